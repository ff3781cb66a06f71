//! Training loop, evaluation and input normalization.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::loss::{combined_loss, LossConfig, OutputSteps, Task};
use crate::maze::{Dataset, DatasetMeta, Trajectory, INPUT_DIM, TARGET_DIM};
use crate::model::{map_planes, Model, ModelSpec};
use crate::nn::{clip_grad_norm, Mode, Module, RmsProp};
use crate::rng::RngStream;
use crate::tensor::Tensor;

const MODEL_STREAM: u64 = 1;
const ORDER_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;
const EVAL_STREAM: u64 = 4;
const RECALIBRATE_STREAM: u64 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Global gradient-norm limit.
    pub clip: f64,
    /// Weight decay added to gradients before the optimizer step.
    pub l2: f64,
    pub epochs: usize,
    /// Derives the model-init, data-order and sampling streams.
    pub seed: u64,
    /// Truncation length for backpropagation through time; 0 means the
    /// whole sequence.
    pub bptt: usize,
    pub beta: f64,
    pub pred_weight: f64,
    /// Seeds of the sampling streams used for final evaluation.
    pub eval_seeds: Vec<u64>,
    /// Training trajectories used to re-estimate batch-norm statistics
    /// before each validation; 0 keeps the moving averages.
    #[serde(default = "default_bn_recalibrate")]
    pub bn_recalibrate: usize,
}

fn default_bn_recalibrate() -> usize {
    256
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            batch_size: 32,
            clip: 5.0,
            l2: 1e-4,
            epochs: 30,
            seed: 0,
            bptt: 0,
            beta: 1.0,
            pred_weight: 1.0,
            eval_seeds: vec![0, 1, 2],
            bn_recalibrate: default_bn_recalibrate(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("lr", self.lr), ("clip", self.clip)];
        if let Some((k, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("{k} must be positive, got {v}")));
        }
        let non_negative = [("l2", self.l2), ("beta", self.beta), ("pred_weight", self.pred_weight)];
        if let Some((k, v)) = non_negative.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("{k} must be non-negative, got {v}")));
        }
        if self.beta == 0.0 && self.pred_weight == 0.0 {
            return Err(Error::Config("beta and pred_weight cannot both be zero".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.eval_seeds.is_empty() {
            return Err(Error::Config("at least one evaluation seed is needed".into()));
        }
        Ok(())
    }

    /// The loss used for `spec`. Deterministic baselines train on the
    /// prediction loss alone.
    pub fn loss_config(&self, spec: &ModelSpec) -> LossConfig {
        let beta = if spec.kind.is_particle() { self.beta } else { 0.0 };
        let pred_weight = if beta == 0.0 && self.pred_weight == 0.0 { 1.0 } else { self.pred_weight };
        LossConfig {
            task: Task::Regression,
            beta,
            pred_weight,
            output_steps: OutputSteps::All,
        }
    }
}

/// Input standardization and target scaling fixed at training time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub pose_scale: f64,
}

impl Normalizer {
    pub fn from_meta(meta: &DatasetMeta) -> Self {
        Self {
            input_mean: meta.input_mean.clone(),
            input_std: meta.input_std.clone(),
            pose_scale: meta.pose_scale,
        }
    }

    pub fn identity(dim: usize, pose_scale: f64) -> Self {
        Self {
            input_mean: vec![0.0; dim],
            input_std: vec![1.0; dim],
            pose_scale,
        }
    }

    fn apply<'a>(&'a self, x: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
        x.iter()
            .zip(self.input_mean.iter().zip(&self.input_std))
            .map(|(v, (m, s))| (v - m) / s)
    }
}

/// Step-major tensors for a group of equal-length trajectories.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B×input]` per step.
    pub xs: Vec<Tensor>,
    /// `[B×4]` per step.
    pub ys: Vec<Tensor>,
}

impl Batch {
    pub fn new(trajs: &[&Trajectory], norm: &Normalizer) -> Result<Self> {
        let first = trajs.first().ok_or_else(|| Error::Config("empty batch".into()))?;
        let len = first.len();
        if trajs.iter().any(|t| t.len() != len) {
            return Err(Error::Format("trajectories in a batch differ in length".into()));
        }
        if norm.input_mean.len() != INPUT_DIM {
            return Err(Error::Format("normalizer does not match the input size".into()));
        }
        let b = trajs.len();
        let inputs: Vec<Vec<[f64; INPUT_DIM]>> = trajs.iter().map(|t| t.inputs()).collect();
        let n = norm.pose_scale.round() as usize;
        let targets: Vec<Vec<[f64; TARGET_DIM]>> = trajs.iter().map(|t| t.targets(n)).collect();
        let mut xs = Vec::with_capacity(len);
        let mut ys = Vec::with_capacity(len);
        for step in 0..len {
            let x: Vec<f64> = inputs.iter().flat_map(|seq| norm.apply(&seq[step])).collect();
            let y: Vec<f64> = targets.iter().flat_map(|seq| seq[step]).collect();
            xs.push(Tensor::new(x, &[b, INPUT_DIM])?);
            ys.push(Tensor::new(y, &[b, TARGET_DIM])?);
        }
        Ok(Self { xs, ys })
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean combined loss per batch.
    pub train_loss: f64,
    pub train_pred: Option<f64>,
    pub train_elbo: Option<f64>,
    /// Mean gradient norm before clipping.
    pub grad_norm: f64,
    pub val_last_step_mse: f64,
}

/// Squared error summed over the four target dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean over trajectories of the final step's error.
    pub last_step_mse: f64,
    /// Mean over trajectories and steps.
    pub seq_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub last_step_mse: f64,
    pub last_step_mse_std: f64,
    pub seq_mse: f64,
    pub per_seed: Vec<(u64, Metrics)>,
}

fn squared_error(pred: &[f64; TARGET_DIM], target: &[f64; TARGET_DIM]) -> f64 {
    pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Error of per-step predictions against per-step targets, one sequence
/// per trajectory.
pub fn score(predictions: &[Vec<[f64; TARGET_DIM]>], targets: &[Vec<[f64; TARGET_DIM]>]) -> Result<Metrics> {
    if predictions.is_empty() || predictions.len() != targets.len() {
        return Err(Error::Format(format!(
            "{} predicted sequences for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let (mut last, mut seq, mut steps) = (0.0, 0.0, 0usize);
    for (p, y) in predictions.iter().zip(targets) {
        if p.len() != y.len() || p.is_empty() {
            return Err(Error::Format("prediction and target lengths differ".into()));
        }
        let err: Vec<f64> = p.iter().zip(y).map(|(a, b)| squared_error(a, b)).collect();
        seq += err.iter().sum::<f64>();
        steps += err.len();
        last += err[err.len() - 1];
    }
    let metrics = Metrics {
        last_step_mse: last / predictions.len() as f64,
        seq_mse: seq / steps as f64,
    };
    if !metrics.last_step_mse.is_finite() || !metrics.seq_mse.is_finite() {
        return Err(Error::NonFinite("prediction error".into()));
    }
    Ok(metrics)
}

/// Eval-mode mean predictions for every step of every trajectory.
pub fn predict(
    model: &mut Model,
    trajs: &[Trajectory],
    norm: &Normalizer,
    planes: Option<&Tensor>,
    seed: u64,
    batch_size: usize,
) -> Result<Vec<Vec<[f64; TARGET_DIM]>>> {
    let mut rng = RngStream::with_stream(seed, EVAL_STREAM);
    let mut out: Vec<Vec<[f64; TARGET_DIM]>> = Vec::with_capacity(trajs.len());
    for chunk in trajs.chunks(batch_size.max(1)) {
        let refs: Vec<&Trajectory> = chunk.iter().collect();
        let batch = Batch::new(&refs, norm)?;
        let state = model.initial_state(chunk.len());
        let (_, outs) = model.unroll(state, &batch.xs, planes, &mut rng, Mode::Eval)?;
        let start = out.len();
        out.extend((0..chunk.len()).map(|_| Vec::with_capacity(outs.len())));
        for step in &outs {
            for (row, p) in step.mean_pred.data().chunks(TARGET_DIM).enumerate() {
                out[start + row].push(p.try_into().expect("target width"));
            }
        }
    }
    Ok(out)
}

/// Eval-mode prediction error on `trajs` with sampling driven by `seed`.
pub fn evaluate(
    model: &mut Model,
    trajs: &[Trajectory],
    norm: &Normalizer,
    planes: Option<&Tensor>,
    seed: u64,
    batch_size: usize,
) -> Result<Metrics> {
    if trajs.is_empty() {
        return Err(Error::Config("no trajectories to evaluate".into()));
    }
    let preds = predict(model, trajs, norm, planes, seed, batch_size)?;
    let n = norm.pose_scale.round() as usize;
    let targets: Vec<_> = trajs.iter().map(|t| t.targets(n)).collect();
    score(&preds, &targets)
}

/// Mean and (population) standard deviation over evaluation seeds.
pub fn evaluate_seeds(
    model: &mut Model,
    trajs: &[Trajectory],
    norm: &Normalizer,
    planes: Option<&Tensor>,
    seeds: &[u64],
    batch_size: usize,
) -> Result<EvalReport> {
    let per_seed = seeds
        .iter()
        .map(|&s| evaluate(model, trajs, norm, planes, s, batch_size).map(|m| (s, m)))
        .collect::<Result<Vec<_>>>()?;
    let n = per_seed.len().max(1) as f64;
    let mean = per_seed.iter().map(|(_, m)| m.last_step_mse).sum::<f64>() / n;
    let var = per_seed.iter().map(|(_, m)| (m.last_step_mse - mean).powi(2)).sum::<f64>() / n;
    Ok(EvalReport {
        last_step_mse: mean,
        last_step_mse_std: var.sqrt(),
        seq_mse: per_seed.iter().map(|(_, m)| m.seq_mse).sum::<f64>() / n,
        per_seed,
    })
}

/// Evaluate a saved model on a dataset split.
pub fn evaluate_checkpoint(ck: &Checkpoint, data: &Dataset, trajs: &[Trajectory], seeds: &[u64]) -> Result<EvalReport> {
    let mut model = ck.to_model()?;
    let planes = ck.spec.map_encoder.as_ref().map(|_| map_planes(&data.map));
    evaluate_seeds(&mut model, trajs, &ck.normalizer, planes.as_ref(), seeds, ck.config.batch_size)
}

/// Replace the batch-norm moving averages with an exact average of the
/// train-mode statistics over `trajs`. Parameters are untouched.
pub fn recalibrate_batchnorm(
    model: &mut Model,
    trajs: &[Trajectory],
    norm: &Normalizer,
    planes: Option<&Tensor>,
    seed: u64,
    batch_size: usize,
) -> Result<()> {
    let rows = model.spec.particles();
    let chunks: Vec<&[Trajectory]> = trajs
        .chunks(batch_size.max(1))
        .filter(|c| c.len() * rows >= 2)
        .collect();
    let Some(bn) = model.batchnorm_mut() else {
        return Ok(());
    };
    if chunks.is_empty() {
        return Ok(());
    }
    bn.begin_accumulate();
    let mut rng = RngStream::with_stream(seed, RECALIBRATE_STREAM);
    let mut run = || -> Result<()> {
        for chunk in &chunks {
            let refs: Vec<&Trajectory> = chunk.iter().collect();
            let batch = Batch::new(&refs, norm)?;
            let state = model.initial_state(chunk.len());
            model.unroll(state, &batch.xs, planes, &mut rng, Mode::Train)?;
        }
        Ok(())
    };
    let result = run();
    if let Some(bn) = model.batchnorm_mut() {
        bn.end_accumulate();
    }
    result
}

/// Statistics of one optimizer update.
#[derive(Clone, Copy, Debug)]
pub struct UpdateStats {
    pub loss: f64,
    pub pred: Option<f64>,
    pub elbo: Option<f64>,
    pub grad_norm: f64,
}

/// Forward, backward, clip, decay and RMSProp on one batch. With truncated
/// backpropagation the sequence is split into windows, each followed by its
/// own update.
pub fn train_batch(
    model: &mut Model,
    opt: &mut RmsProp,
    batch: &Batch,
    planes: Option<&Tensor>,
    config: &TrainConfig,
    loss_cfg: &LossConfig,
    rng: &mut RngStream,
) -> Result<UpdateStats> {
    let window = if config.bptt == 0 { batch.len() } else { config.bptt };
    let mut state = model.initial_state(batch.xs[0].shape()[0]);
    let mut stats = UpdateStats {
        loss: 0.0,
        pred: None,
        elbo: None,
        grad_norm: 0.0,
    };
    let mut windows = 0;
    for start in (0..batch.len()).step_by(window) {
        let end = (start + window).min(batch.len());
        let (next, outs) = model.unroll(state.detach(), &batch.xs[start..end], planes, rng, Mode::Train)?;
        let parts = combined_loss(&outs, &batch.ys[start..end], loss_cfg)?;
        let loss = parts.total.item();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss ({loss})")));
        }
        let mut params = Vec::new();
        model.visit_params("", &mut |_, t| params.push(t.clone()));
        let grads_map = parts.total.backward()?;
        let mut grads: Vec<Vec<f64>> = params.iter().map(|p| grads_map.get_or_zeros(p)).collect();
        drop((params, grads_map, parts.total, outs));
        if let Some(bad) = grads.iter().flatten().find(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient ({bad})")));
        }
        stats.grad_norm += clip_grad_norm(&mut grads, config.clip);
        let mut idx = 0;
        let mut result = Ok(());
        model.visit_params_mut("", &mut |name, t| {
            let g = &mut grads[idx];
            idx += 1;
            if result.is_err() {
                return;
            }
            if config.l2 > 0.0 {
                g.iter_mut().zip(t.data()).for_each(|(g, w)| *g += config.l2 * w);
            }
            result = opt.step(name, t, g);
        });
        result?;
        stats.loss += loss;
        stats.pred = parts.pred.map(|p| p + stats.pred.unwrap_or(0.0));
        stats.elbo = parts.elbo.map(|e| e + stats.elbo.unwrap_or(0.0));
        windows += 1;
        state = next;
    }
    stats.grad_norm /= windows as f64;
    Ok(stats)
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Model restored to the best-validation parameters.
    pub model: Model,
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochMetrics>,
}

fn shuffle(order: &mut [usize], rng: &mut RngStream) {
    for i in (1..order.len()).rev() {
        order.swap(i, rng.below(i + 1));
    }
}

/// Mean training target, used to start the prediction head.
fn mean_target(trajs: &[Trajectory], n: usize) -> Vec<f64> {
    let mut acc = [0.0; TARGET_DIM];
    let mut count = 0usize;
    for y in trajs.iter().flat_map(|t| t.targets(n)) {
        acc.iter_mut().zip(y).for_each(|(a, v)| *a += v);
        count += 1;
    }
    acc.iter().map(|a| a / count.max(1) as f64).collect()
}

/// Train `spec` on the training split, validating on the validation split
/// after every epoch and keeping the parameters with the lowest validation
/// last-step error.
pub fn train(spec: &ModelSpec, data: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(spec, data, config, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    spec: &ModelSpec,
    data: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    spec.validate()?;
    if data.train.len() < 2 || data.val.is_empty() {
        return Err(Error::Config("training needs at least 2 training and 1 validation trajectories".into()));
    }
    let norm = Normalizer::from_meta(&data.meta);
    let mut model = Model::new(spec.clone(), &mut RngStream::with_stream(config.seed, MODEL_STREAM))?;
    model.set_head_bias(&mean_target(&data.train, data.map.size()))?;
    let planes = spec.map_encoder.as_ref().map(|_| map_planes(&data.map));
    let loss_cfg = config.loss_config(spec);
    let mut opt = RmsProp::new(config.lr);
    let mut order_rng = RngStream::with_stream(config.seed, ORDER_STREAM);
    let mut noise_rng = RngStream::with_stream(config.seed, NOISE_STREAM);
    let mut best = Checkpoint::capture(&model, config, &norm);
    let mut best_val = f64::INFINITY;
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 1..=config.epochs {
        shuffle(&mut order, &mut order_rng);
        let (mut loss, mut pred, mut elbo, mut gnorm, mut batches) = (0.0, 0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let refs: Vec<&Trajectory> = chunk.iter().map(|&i| &data.train[i]).collect();
            let batch = Batch::new(&refs, &norm)?;
            let stats = train_batch(&mut model, &mut opt, &batch, planes.as_ref(), config, &loss_cfg, &mut noise_rng)
                .map_err(|e| match e {
                    Error::NonFinite(reason) | Error::Degenerate(reason) => Error::Diverged {
                        epoch,
                        reason,
                        last_good: Box::new(best.clone()),
                    },
                    other => other,
                })?;
            loss += stats.loss;
            pred += stats.pred.unwrap_or(0.0);
            elbo += stats.elbo.unwrap_or(0.0);
            gnorm += stats.grad_norm;
            batches += 1;
        }
        let nb = batches.max(1) as f64;
        let calib = &data.train[..config.bn_recalibrate.min(data.train.len())];
        recalibrate_batchnorm(&mut model, calib, &norm, planes.as_ref(), config.seed, config.batch_size)?;
        // An eval-mode blow-up is a bad epoch, not a failed run.
        let val = match evaluate(&mut model, &data.val, &norm, planes.as_ref(), config.seed, config.batch_size) {
            Ok(m) => m.last_step_mse,
            Err(Error::NonFinite(_) | Error::Degenerate(_)) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss / nb,
            train_pred: (loss_cfg.pred_weight != 0.0).then_some(pred / nb),
            train_elbo: (loss_cfg.beta != 0.0).then_some(elbo / nb),
            grad_norm: gnorm / nb,
            val_last_step_mse: val,
        };
        on_epoch(&metrics);
        history.push(metrics);
        if val < best_val {
            best_val = val;
            best = Checkpoint::capture(&model, config, &norm);
            best.best_epoch = Some(epoch);
        }
    }
    best.history = history.clone();
    best.restore_into(&mut model)?;
    Ok(TrainOutcome {
        model,
        checkpoint: best,
        history,
    })
}

/// One step of a filtered trajectory, in target units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub truth: [f64; TARGET_DIM],
    pub mean: [f64; TARGET_DIM],
    /// Per-particle predictions before resampling (one row for baselines).
    pub particles: Vec<[f64; TARGET_DIM]>,
    pub weights: Vec<f64>,
}

/// Eval-mode run over a single trajectory, keeping every particle's
/// prediction at every step.
pub fn particle_trace(
    model: &mut Model,
    traj: &Trajectory,
    norm: &Normalizer,
    planes: Option<&Tensor>,
    seed: u64,
) -> Result<Vec<Frame>> {
    let batch = Batch::new(&[traj], norm)?;
    let mut rng = RngStream::with_stream(seed, EVAL_STREAM);
    let state = model.initial_state(1);
    let (_, outs) = model.unroll(state, &batch.xs, planes, &mut rng, Mode::Eval)?;
    let row = |d: &[f64]| -> [f64; TARGET_DIM] { d.try_into().expect("target width") };
    Ok(outs
        .iter()
        .zip(&batch.ys)
        .map(|(o, y)| {
            let w = o.log_weights.data().iter().map(|v| v.exp()).collect();
            Frame {
                truth: row(y.data()),
                mean: row(o.mean_pred.data()),
                particles: o.particle_preds.data().chunks(TARGET_DIM).map(row).collect(),
                weights: w,
            }
        })
        .collect())
}
