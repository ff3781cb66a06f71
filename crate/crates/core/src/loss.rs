//! Prediction loss, the sampled particle ELBO, and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::cell::replicate_rows;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    /// Targets are one-hot rows; predictions are logits.
    Classification,
}

/// Which steps contribute to the loss.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputSteps {
    All,
    Last,
    Only(Vec<usize>),
}

impl OutputSteps {
    pub fn resolve(&self, len: usize) -> Result<Vec<usize>> {
        let steps = match self {
            Self::All => (0..len).collect(),
            Self::Last => len.checked_sub(1).into_iter().collect(),
            Self::Only(s) => {
                if let Some(&bad) = s.iter().find(|&&t| t >= len) {
                    return Err(Error::Index { index: bad, len });
                }
                s.clone()
            }
        };
        if steps.is_empty() {
            return Err(Error::Config("no output steps selected".into()));
        }
        Ok(steps)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub task: Task,
    /// Weight of the ELBO term.
    pub beta: f64,
    /// Weight of the prediction term.
    pub pred_weight: f64,
    pub output_steps: OutputSteps,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            task: Task::Regression,
            beta: 1.0,
            pred_weight: 1.0,
            output_steps: OutputSteps::All,
        }
    }
}

/// Predictions made at one step.
#[derive(Clone, Debug)]
pub struct StepOutputs {
    /// `[B×D]`, from the mean particle.
    pub mean_pred: Tensor,
    /// `[B·K×D]`, the same head applied to every particle.
    pub particle_preds: Tensor,
    /// `[B×K]`, the weights of the particles behind `particle_preds`.
    pub log_weights: Tensor,
}

impl StepOutputs {
    pub fn particles(&self) -> usize {
        self.log_weights.shape()[1]
    }
}

fn check_target(op: &'static str, pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(shape_err(
            op,
            format!("prediction {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    Ok(())
}

fn check_lengths(outputs: &[StepOutputs], targets: &[Tensor]) -> Result<()> {
    if outputs.len() != targets.len() {
        return Err(shape_err(
            "loss",
            format!("{} steps of output for {} targets", outputs.len(), targets.len()),
        ));
    }
    Ok(())
}

/// Per-row `Σ_c y_c · log softmax(logits)_c`, shape `[N]`.
fn class_loglik(logits: &Tensor, onehot: &Tensor) -> Result<Tensor> {
    logits.log_softmax(1)?.mul(onehot)?.sum_axis(1)
}

/// Regression: squared error summed over dimensions and selected steps,
/// averaged over the batch. Classification: cross-entropy of the mean
/// prediction at the final step.
pub fn pred_loss(outputs: &[StepOutputs], targets: &[Tensor], config: &LossConfig) -> Result<Tensor> {
    check_lengths(outputs, targets)?;
    let steps = config.output_steps.resolve(outputs.len())?;
    match config.task {
        Task::Regression => {
            let mut total: Option<Tensor> = None;
            for t in steps {
                let (pred, y) = (&outputs[t].mean_pred, &targets[t]);
                check_target("pred_loss", pred, y)?;
                let batch = pred.shape()[0] as f64;
                let term = pred.sub(y)?.square().sum().scale(1.0 / batch);
                total = Some(match total {
                    Some(acc) => acc.add(&term)?,
                    None => term,
                });
            }
            Ok(total.expect("steps is non-empty"))
        }
        Task::Classification => {
            let last = *steps.iter().max().expect("steps is non-empty");
            let (pred, y) = (&outputs[last].mean_pred, &targets[last]);
            check_target("pred_loss", pred, y)?;
            Ok(class_loglik(pred, y)?.mean().neg())
        }
    }
}

/// `−Σ_t [logsumexp_i log p(y_t | particle i) − log K]`, averaged over the
/// batch. Regression uses `log p = −‖y − ŷ^i‖`; classification uses the
/// negative cross-entropy of each particle's logits.
pub fn elbo_loss(outputs: &[StepOutputs], targets: &[Tensor], config: &LossConfig) -> Result<Tensor> {
    check_lengths(outputs, targets)?;
    let steps = config.output_steps.resolve(outputs.len())?;
    let mut total: Option<Tensor> = None;
    for t in steps {
        let out = &outputs[t];
        let y = &targets[t];
        let k = out.particles();
        let batch = y.shape()[0];
        let y_rep = replicate_rows(y, k)?;
        check_target("elbo_loss", &out.particle_preds, &y_rep)?;
        let loglik = match config.task {
            Task::Regression => out.particle_preds.sub(&y_rep)?.norm_axis(1)?.neg(),
            Task::Classification => class_loglik(&out.particle_preds, &y_rep)?,
        };
        let log_mean = loglik
            .reshape(&[batch, k])?
            .logsumexp(1)?
            .add_scalar(-(k as f64).ln());
        let term = log_mean.mean().neg();
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("steps is non-empty"))
}

/// The training objective and its parts.
#[derive(Clone, Debug)]
pub struct LossParts {
    pub total: Tensor,
    pub pred: Option<f64>,
    pub elbo: Option<f64>,
}

/// `pred_weight · L_pred + β · L_ELBO`. A term with zero weight is not built.
pub fn combined_loss(outputs: &[StepOutputs], targets: &[Tensor], config: &LossConfig) -> Result<LossParts> {
    if config.beta < 0.0 || config.pred_weight < 0.0 {
        return Err(Error::Config("loss weights must be non-negative".into()));
    }
    let pred = (config.pred_weight != 0.0)
        .then(|| pred_loss(outputs, targets, config))
        .transpose()?;
    let elbo = (config.beta != 0.0)
        .then(|| elbo_loss(outputs, targets, config))
        .transpose()?;
    let weighted = |t: &Tensor, w: f64| if w == 1.0 { t.clone() } else { t.scale(w) };
    let total = match (&pred, &elbo) {
        (Some(p), Some(e)) => weighted(p, config.pred_weight).add(&weighted(e, config.beta))?,
        (Some(p), None) => weighted(p, config.pred_weight),
        (None, Some(e)) => weighted(e, config.beta),
        (None, None) => return Err(Error::Config("both loss weights are zero".into())),
    };
    Ok(LossParts {
        total,
        pred: pred.map(|t| t.item()),
        elbo: elbo.map(|t| t.item()),
    })
}
