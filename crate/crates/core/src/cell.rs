//! Particle-filter recurrent cells (PF-LSTM, PF-GRU) and the deterministic
//! LSTM/GRU baselines they extend.
//!
//! Particle tensors are stored flattened: row `b * K + k` of `hidden` is
//! particle `k` of batch item `b`. Log-weights are `[B×K]`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{scoped, BatchNorm, Linear, Mode, Module};
use crate::rng::RngStream;
use crate::tensor::{concat, sample_gaussian, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellConfig {
    pub particles: usize,
    /// Soft-resampling mixture weight on the particle distribution.
    pub alpha: f64,
    pub resample: bool,
    pub bn_relu: bool,
    /// Bounds applied to the predicted per-dimension log standard deviation.
    pub logstd_clamp: (f64, f64),
    /// Starting value of the log standard deviation bias.
    pub init_logstd: f64,
    /// Width of a ReLU hidden layer in the observation likelihood; 0 keeps
    /// it a single linear layer.
    #[serde(default)]
    pub obs_hidden: usize,
}

impl Default for CellConfig {
    fn default() -> Self {
        Self {
            particles: 10,
            alpha: 0.5,
            resample: true,
            bn_relu: true,
            logstd_clamp: (-8.0, 2.0),
            init_logstd: 0.0,
            obs_hidden: 0,
        }
    }
}

impl CellConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particles == 0 {
            return Err(Error::Config("particle count must be at least 1".into()));
        }
        check_alpha(self.alpha)?;
        let (lo, hi) = self.logstd_clamp;
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(Error::Config(format!("log-std clamp [{lo}, {hi}] is empty")));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha must lie in (0, 1], got {alpha}")))
    }
}

/// K weighted particles per batch item.
#[derive(Clone, Debug)]
pub struct ParticleBelief {
    /// `[B·K × H]`
    pub hidden: Tensor,
    /// `[B·K × H]`, LSTM-family cells only.
    pub cell: Option<Tensor>,
    /// `[B × K]`, normalized per row.
    pub log_weights: Tensor,
}

impl ParticleBelief {
    /// Zero states replicated K times with uniform weights.
    pub fn initial(batch: usize, particles: usize, hidden: usize, with_cell: bool) -> Self {
        let rows = batch * particles;
        Self {
            hidden: Tensor::zeros(&[rows, hidden]),
            cell: with_cell.then(|| Tensor::zeros(&[rows, hidden])),
            log_weights: Tensor::full(&[batch, particles], -(particles as f64).ln()),
        }
    }

    pub fn batch(&self) -> usize {
        self.log_weights.shape()[0]
    }

    pub fn particles(&self) -> usize {
        self.log_weights.shape()[1]
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden.shape()[1]
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.data().iter().map(|v| v.exp()).collect()
    }

    /// `Σ_k w_k h_k` per batch item, `[B×H]`.
    pub fn mean_particle(&self) -> Result<Tensor> {
        let (b, k, h) = (self.batch(), self.particles(), self.hidden_size());
        if k == 1 {
            return Ok(self.hidden.clone());
        }
        let w = self.log_weights.exp().reshape(&[b, 1, k])?;
        w.bmm(&self.hidden.reshape(&[b, k, h])?)?.reshape(&[b, h])
    }
}

/// Per-step diagnostics: the particles and weights before resampling.
#[derive(Clone, Debug)]
pub struct StepAux {
    /// `[B·K × H]`
    pub hidden: Tensor,
    /// `[B × K]`
    pub log_weights: Tensor,
    /// Flattened ancestor rows chosen by resampling, if it ran.
    pub ancestors: Option<Vec<usize>>,
}

/// Repeat each of the `B` rows of `x` `k` times.
pub fn replicate_rows(x: &Tensor, k: usize) -> Result<Tensor> {
    if k == 1 {
        return Ok(x.clone());
    }
    let b = x.shape()[0];
    let idx: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    x.gather_rows(&idx)
}

/// `ε ⊙ exp(clamp(W_Σ·hx + b_Σ))` with `ε` a fresh standard-normal leaf.
pub fn reparam_noise(
    layer: &Linear,
    hx: &Tensor,
    clamp: (f64, f64),
    rng: &mut RngStream,
) -> Result<Tensor> {
    let logstd = layer.forward(hx)?.clamp(clamp.0, clamp.1);
    let eps = sample_gaussian(rng, logstd.shape());
    eps.mul(&logstd.exp())
}

fn noise_layer(input: usize, hidden: usize, init_logstd: f64, rng: &mut RngStream) -> Result<Linear> {
    let mut layer = Linear::new(input, hidden, rng)?;
    layer.fill_bias(init_logstd);
    Ok(layer)
}

/// Learned observation log-likelihood over `[h, x_feat]`.
///
/// Purely linear, the `x_feat` term is the same for every particle and
/// cancels in the weight update, so observation and state never interact.
/// A hidden layer lets them.
#[derive(Clone, Debug)]
pub struct ObsHead {
    pub first: Linear,
    pub out: Option<Linear>,
}

impl ObsHead {
    pub fn new(input: usize, width: usize, rng: &mut RngStream) -> Result<Self> {
        if width == 0 {
            return Ok(Self {
                first: Linear::new(input, 1, rng)?,
                out: None,
            });
        }
        Ok(Self {
            first: Linear::new(input, width, rng)?,
            out: Some(Linear::new(width, 1, rng)?),
        })
    }

    pub fn param_count(input: usize, width: usize) -> usize {
        if width == 0 {
            input + 1
        } else {
            input * width + width + width + 1
        }
    }

    /// `[N×input]` to `[N×1]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let a = self.first.forward(x)?;
        match &self.out {
            Some(out) => out.forward(&a.relu()),
            None => Ok(a),
        }
    }
}

impl Module for ObsHead {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.first.visit_params(prefix, f);
        if let Some(out) = &self.out {
            out.visit_params(&scoped(prefix, "out"), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.first.visit_params_mut(prefix, f);
        if let Some(out) = &mut self.out {
            out.visit_params_mut(&scoped(prefix, "out"), f);
        }
    }
}

/// Learned log-likelihood of each particle given the features, `[B×K]`.
pub fn obs_loglik(head: &ObsHead, hidden: &Tensor, x_rep: &Tensor, batch: usize) -> Result<Tensor> {
    let rows = hidden.shape()[0];
    if rows % batch.max(1) != 0 {
        return Err(shape_err("obs_loglik", format!("{rows} rows for batch {batch}")));
    }
    let logits = head.forward(&concat(&[hidden.clone(), x_rep.clone()], 1)?)?;
    logits.reshape(&[batch, rows / batch])
}

/// `log w + loglik`, renormalized per row.
pub fn weight_update(log_w: &Tensor, loglik: &Tensor) -> Result<Tensor> {
    log_w.add(loglik)?.log_softmax(1)
}

/// Draw ancestors from `α·w + (1−α)/K` and importance-correct their weights.
///
/// Returns the resampled belief and the flattened ancestor rows. Gradients
/// reach the ancestors' states and log-weights; the draws themselves are
/// constants.
pub fn soft_resample(
    belief: &ParticleBelief,
    alpha: f64,
    rng: &mut RngStream,
) -> Result<(ParticleBelief, Vec<usize>)> {
    check_alpha(alpha)?;
    let (b, k) = (belief.batch(), belief.particles());
    let w = belief.weights();
    let floor = (1.0 - alpha) / k as f64;
    let mut ancestors = Vec::with_capacity(b * k);
    let mut q = vec![0.0; k];
    for row in 0..b {
        for (qi, wi) in q.iter_mut().zip(&w[row * k..(row + 1) * k]) {
            *qi = alpha * wi + floor;
        }
        for _ in 0..k {
            ancestors.push(row * k + rng.categorical(&q));
        }
    }
    let lw = belief
        .log_weights
        .reshape(&[b * k, 1])?
        .gather_rows(&ancestors)?
        .reshape(&[b, k])?;
    let log_floor = if alpha == 1.0 { f64::NEG_INFINITY } else { floor.ln() };
    let log_q = lw.add_scalar(alpha.ln()).logaddexp_scalar(log_floor);
    let resampled = ParticleBelief {
        hidden: belief.hidden.gather_rows(&ancestors)?,
        cell: match &belief.cell {
            Some(c) => Some(c.gather_rows(&ancestors)?),
            None => None,
        },
        log_weights: lw.sub(&log_q)?.log_softmax(1)?,
    };
    Ok((resampled, ancestors))
}

/// Shared weighting and resampling tail of a PF step.
fn reweight_and_resample(
    prev_log_w: &Tensor,
    hidden: Tensor,
    cell: Option<Tensor>,
    obs: &ObsHead,
    x_rep: &Tensor,
    config: &CellConfig,
    rng: &mut RngStream,
) -> Result<(ParticleBelief, StepAux)> {
    let batch = prev_log_w.shape()[0];
    let loglik = obs_loglik(obs, &hidden, x_rep, batch)?;
    let log_weights = weight_update(prev_log_w, &loglik)?;
    let updated = ParticleBelief {
        hidden,
        cell,
        log_weights,
    };
    let mut aux = StepAux {
        hidden: updated.hidden.clone(),
        log_weights: updated.log_weights.clone(),
        ancestors: None,
    };
    if !config.resample {
        return Ok((updated, aux));
    }
    let (resampled, ancestors) = soft_resample(&updated, config.alpha, rng)?;
    aux.ancestors = Some(ancestors);
    Ok((resampled, aux))
}

fn activate(pre: &Tensor, bn: Option<&mut BatchNorm>, mode: Mode) -> Result<Tensor> {
    match bn {
        Some(bn) => Ok(bn.forward(pre, mode)?.relu()),
        None => Ok(pre.tanh()),
    }
}

/// Gate parameters of an LSTM: input, forget and output gates plus the
/// candidate layer, each over `[h, x]`.
#[derive(Clone, Debug)]
pub struct LstmGates {
    pub input: Linear,
    pub forget: Linear,
    pub output: Linear,
    pub candidate: Linear,
    /// Present for the BN-ReLU candidate activation; otherwise `tanh`.
    pub bn: Option<BatchNorm>,
}

impl LstmGates {
    pub fn new(input_dim: usize, hidden: usize, bn_relu: bool, rng: &mut RngStream) -> Result<Self> {
        let d = hidden + input_dim;
        let input = Linear::new(d, hidden, rng)?;
        let mut forget = Linear::new(d, hidden, rng)?;
        forget.fill_bias(1.0);
        Ok(Self {
            input,
            forget,
            output: Linear::new(d, hidden, rng)?,
            candidate: Linear::new(d, hidden, rng)?,
            bn: bn_relu.then(|| BatchNorm::new(hidden)),
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.input.out_dim()
    }

    /// One update from `hx = [h_prev, x]`. `noise`, if given, is added to the
    /// candidate pre-activation.
    pub fn forward(
        &mut self,
        hx: &Tensor,
        c_prev: &Tensor,
        noise: Option<&Tensor>,
        mode: Mode,
    ) -> Result<(Tensor, Tensor)> {
        let i = self.input.forward(hx)?.sigmoid();
        let f = self.forget.forward(hx)?.sigmoid();
        let o = self.output.forward(hx)?.sigmoid();
        let mut pre = self.candidate.forward(hx)?;
        if let Some(xi) = noise {
            pre = pre.add(xi)?;
        }
        let cand = activate(&pre, self.bn.as_mut(), mode)?;
        let c = f.mul(c_prev)?.add(&i.mul(&cand)?)?;
        let h = o.mul(&c.tanh())?;
        Ok((h, c))
    }
}

impl Module for LstmGates {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.input.visit_params(&scoped(prefix, "input"), f);
        self.forget.visit_params(&scoped(prefix, "forget"), f);
        self.output.visit_params(&scoped(prefix, "output"), f);
        self.candidate.visit_params(&scoped(prefix, "candidate"), f);
        if let Some(bn) = &self.bn {
            bn.visit_params(&scoped(prefix, "bn"), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.input.visit_params_mut(&scoped(prefix, "input"), f);
        self.forget.visit_params_mut(&scoped(prefix, "forget"), f);
        self.output.visit_params_mut(&scoped(prefix, "output"), f);
        self.candidate.visit_params_mut(&scoped(prefix, "candidate"), f);
        if let Some(bn) = &mut self.bn {
            bn.visit_params_mut(&scoped(prefix, "bn"), f);
        }
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        if let Some(bn) = &self.bn {
            bn.visit_buffers(&scoped(prefix, "bn"), f);
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        if let Some(bn) = &mut self.bn {
            bn.visit_buffers_mut(&scoped(prefix, "bn"), f);
        }
    }
}

/// Gate parameters of a GRU: reset and update gates over `[h, x]`, and the
/// candidate layer over `[r∘h, x]`.
#[derive(Clone, Debug)]
pub struct GruGates {
    pub reset: Linear,
    pub update: Linear,
    pub candidate: Linear,
    pub bn: Option<BatchNorm>,
}

impl GruGates {
    pub fn new(input_dim: usize, hidden: usize, bn_relu: bool, rng: &mut RngStream) -> Result<Self> {
        let d = hidden + input_dim;
        Ok(Self {
            reset: Linear::new(d, hidden, rng)?,
            update: Linear::new(d, hidden, rng)?,
            candidate: Linear::new(d, hidden, rng)?,
            bn: bn_relu.then(|| BatchNorm::new(hidden)),
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.reset.out_dim()
    }

    pub fn forward(
        &mut self,
        h_prev: &Tensor,
        x: &Tensor,
        noise: Option<&Tensor>,
        mode: Mode,
    ) -> Result<Tensor> {
        let hx = concat(&[h_prev.clone(), x.clone()], 1)?;
        let r = self.reset.forward(&hx)?.sigmoid();
        let z = self.update.forward(&hx)?.sigmoid();
        let rhx = concat(&[r.mul(h_prev)?, x.clone()], 1)?;
        let mut pre = self.candidate.forward(&rhx)?;
        if let Some(xi) = noise {
            pre = pre.add(xi)?;
        }
        let cand = activate(&pre, self.bn.as_mut(), mode)?;
        z.one_minus().mul(&cand)?.add(&z.mul(h_prev)?)
    }
}

impl Module for GruGates {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.reset.visit_params(&scoped(prefix, "reset"), f);
        self.update.visit_params(&scoped(prefix, "update"), f);
        self.candidate.visit_params(&scoped(prefix, "candidate"), f);
        if let Some(bn) = &self.bn {
            bn.visit_params(&scoped(prefix, "bn"), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.reset.visit_params_mut(&scoped(prefix, "reset"), f);
        self.update.visit_params_mut(&scoped(prefix, "update"), f);
        self.candidate.visit_params_mut(&scoped(prefix, "candidate"), f);
        if let Some(bn) = &mut self.bn {
            bn.visit_params_mut(&scoped(prefix, "bn"), f);
        }
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        if let Some(bn) = &self.bn {
            bn.visit_buffers(&scoped(prefix, "bn"), f);
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        if let Some(bn) = &mut self.bn {
            bn.visit_buffers_mut(&scoped(prefix, "bn"), f);
        }
    }
}

fn check_input(op: &'static str, belief: &ParticleBelief, x: &Tensor, input_dim: usize) -> Result<()> {
    match x.shape() {
        [b, f] if *b == belief.batch() && *f == input_dim => Ok(()),
        s => Err(shape_err(
            op,
            format!("features {s:?} for batch {} and input {input_dim}", belief.batch()),
        )),
    }
}

/// LSTM whose state is a weighted particle set.
#[derive(Clone, Debug)]
pub struct PfLstm {
    pub gates: LstmGates,
    pub noise: Linear,
    pub obs: ObsHead,
    pub config: CellConfig,
}

impl PfLstm {
    pub fn new(input_dim: usize, hidden: usize, config: CellConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let d = hidden + input_dim;
        Ok(Self {
            gates: LstmGates::new(input_dim, hidden, config.bn_relu, rng)?,
            noise: noise_layer(d, hidden, config.init_logstd, rng)?,
            obs: ObsHead::new(d, config.obs_hidden, rng)?,
            config,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.noise.in_dim() - self.gates.hidden_size()
    }

    pub fn initial_belief(&self, batch: usize) -> ParticleBelief {
        ParticleBelief::initial(batch, self.config.particles, self.gates.hidden_size(), true)
    }

    pub fn step(
        &mut self,
        belief: &ParticleBelief,
        x: &Tensor,
        rng: &mut RngStream,
        mode: Mode,
    ) -> Result<(ParticleBelief, StepAux)> {
        check_input("pf_lstm_step", belief, x, self.input_dim())?;
        let c_prev = belief
            .cell
            .as_ref()
            .ok_or_else(|| shape_err("pf_lstm_step", "belief has no cell state"))?;
        let x_rep = replicate_rows(x, belief.particles())?;
        let hx = concat(&[belief.hidden.clone(), x_rep.clone()], 1)?;
        let xi = reparam_noise(&self.noise, &hx, self.config.logstd_clamp, rng)?;
        let (h, c) = self.gates.forward(&hx, c_prev, Some(&xi), mode)?;
        reweight_and_resample(&belief.log_weights, h, Some(c), &self.obs, &x_rep, &self.config, rng)
    }
}

impl Module for PfLstm {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.gates.visit_params(prefix, f);
        self.noise.visit_params(&scoped(prefix, "noise"), f);
        self.obs.visit_params(&scoped(prefix, "obs"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.gates.visit_params_mut(prefix, f);
        self.noise.visit_params_mut(&scoped(prefix, "noise"), f);
        self.obs.visit_params_mut(&scoped(prefix, "obs"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.gates.visit_buffers(prefix, f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        self.gates.visit_buffers_mut(prefix, f);
    }
}

/// GRU whose state is a weighted particle set.
#[derive(Clone, Debug)]
pub struct PfGru {
    pub gates: GruGates,
    pub noise: Linear,
    pub obs: ObsHead,
    pub config: CellConfig,
}

impl PfGru {
    pub fn new(input_dim: usize, hidden: usize, config: CellConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let d = hidden + input_dim;
        Ok(Self {
            gates: GruGates::new(input_dim, hidden, config.bn_relu, rng)?,
            noise: noise_layer(d, hidden, config.init_logstd, rng)?,
            obs: ObsHead::new(d, config.obs_hidden, rng)?,
            config,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.noise.in_dim() - self.gates.hidden_size()
    }

    pub fn initial_belief(&self, batch: usize) -> ParticleBelief {
        ParticleBelief::initial(batch, self.config.particles, self.gates.hidden_size(), false)
    }

    pub fn step(
        &mut self,
        belief: &ParticleBelief,
        x: &Tensor,
        rng: &mut RngStream,
        mode: Mode,
    ) -> Result<(ParticleBelief, StepAux)> {
        check_input("pf_gru_step", belief, x, self.input_dim())?;
        let x_rep = replicate_rows(x, belief.particles())?;
        let hx = concat(&[belief.hidden.clone(), x_rep.clone()], 1)?;
        let xi = reparam_noise(&self.noise, &hx, self.config.logstd_clamp, rng)?;
        let h = self.gates.forward(&belief.hidden, &x_rep, Some(&xi), mode)?;
        reweight_and_resample(&belief.log_weights, h, None, &self.obs, &x_rep, &self.config, rng)
    }
}

impl Module for PfGru {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.gates.visit_params(prefix, f);
        self.noise.visit_params(&scoped(prefix, "noise"), f);
        self.obs.visit_params(&scoped(prefix, "obs"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.gates.visit_params_mut(prefix, f);
        self.noise.visit_params_mut(&scoped(prefix, "noise"), f);
        self.obs.visit_params_mut(&scoped(prefix, "obs"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.gates.visit_buffers(prefix, f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        self.gates.visit_buffers_mut(prefix, f);
    }
}

/// Deterministic LSTM, standard (`tanh`) or BN-ReLU candidate.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub gates: LstmGates,
}

impl LstmCell {
    pub fn new(input_dim: usize, hidden: usize, bn_relu: bool, rng: &mut RngStream) -> Result<Self> {
        Ok(Self {
            gates: LstmGates::new(input_dim, hidden, bn_relu, rng)?,
        })
    }

    /// Returns `(h, c)`.
    pub fn step(&mut self, h: &Tensor, c: &Tensor, x: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        let hx = concat(&[h.clone(), x.clone()], 1)?;
        self.gates.forward(&hx, c, None, mode)
    }
}

/// Deterministic GRU, standard (`tanh`) or BN-ReLU candidate.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub gates: GruGates,
}

impl GruCell {
    pub fn new(input_dim: usize, hidden: usize, bn_relu: bool, rng: &mut RngStream) -> Result<Self> {
        Ok(Self {
            gates: GruGates::new(input_dim, hidden, bn_relu, rng)?,
        })
    }

    pub fn step(&mut self, h: &Tensor, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.gates.forward(h, x, None, mode)
    }
}

macro_rules! delegate_module {
    ($ty:ty) => {
        impl Module for $ty {
            fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
                self.gates.visit_params(prefix, f);
            }

            fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
                self.gates.visit_params_mut(prefix, f);
            }

            fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
                self.gates.visit_buffers(prefix, f);
            }

            fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
                self.gates.visit_buffers_mut(prefix, f);
            }
        }
    };
}

delegate_module!(LstmCell);
delegate_module!(GruCell);

#[cfg(test)]
mod tests {
    use super::*;

    fn row_lse(t: &Tensor) -> Vec<f64> {
        let k = t.shape()[1];
        t.data()
            .chunks(k)
            .map(|r| crate::tensor::lse(r.iter().copied()))
            .collect()
    }

    #[test]
    fn weight_update_hand_example() {
        let lw = Tensor::new(vec![0.5f64.ln(), 0.5f64.ln()], &[1, 2]).unwrap();
        let ll = Tensor::new(vec![3f64.ln(), 0.0], &[1, 2]).unwrap();
        let w: Vec<f64> = weight_update(&lw, &ll).unwrap().data().iter().map(|v| v.exp()).collect();
        assert!((w[0] - 0.75).abs() < 1e-15);
        assert!((w[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn weight_update_ignores_constant_loglik() {
        let lw = Tensor::new(vec![0.2f64.ln(), 0.8f64.ln()], &[1, 2]).unwrap();
        let ll = Tensor::full(&[1, 2], -7.3);
        let out = weight_update(&lw, &ll).unwrap();
        for (a, b) in out.data().iter().zip(lw.data()) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(row_lse(&out)[0].abs() < 1e-12);
    }

    #[test]
    fn weight_update_rejects_dead_row() {
        let lw = Tensor::full(&[1, 2], f64::NEG_INFINITY);
        let ll = Tensor::zeros(&[1, 2]);
        assert!(matches!(weight_update(&lw, &ll), Err(Error::Degenerate(_))));
    }

    #[test]
    fn mean_particle_examples() {
        let b = ParticleBelief {
            hidden: Tensor::new(vec![0.0, 4.0], &[2, 1]).unwrap(),
            cell: None,
            log_weights: Tensor::new(vec![0.25f64.ln(), 0.75f64.ln()], &[1, 2]).unwrap(),
        };
        assert!((b.mean_particle().unwrap().data()[0] - 3.0).abs() < 1e-15);

        let delta = ParticleBelief {
            hidden: Tensor::new(vec![1.0, 2.0, 5.0, 6.0], &[2, 2]).unwrap(),
            cell: None,
            log_weights: Tensor::new(vec![f64::NEG_INFINITY, 0.0], &[1, 2]).unwrap(),
        };
        assert_eq!(delta.mean_particle().unwrap().data(), &[5.0, 6.0]);
    }

    #[test]
    fn soft_resample_hand_weights() {
        let belief = ParticleBelief {
            hidden: Tensor::new(vec![0.0, 1.0], &[2, 1]).unwrap(),
            cell: None,
            log_weights: Tensor::new(vec![0.8f64.ln(), 0.2f64.ln()], &[1, 2]).unwrap(),
        };
        let mut rng = RngStream::new(3);
        for _ in 0..20 {
            let (out, anc) = soft_resample(&belief, 0.5, &mut rng).unwrap();
            // Unnormalized importance weights w_a / q_a per drawn ancestor.
            let raw: Vec<f64> = anc.iter().map(|&a| if a == 0 { 0.8 / 0.65 } else { 0.2 / 0.35 }).collect();
            let total: f64 = raw.iter().sum();
            for (w, r) in out.weights().iter().zip(&raw) {
                assert!((w - r / total).abs() < 1e-12);
            }
            for (h, &a) in out.hidden.data().iter().zip(&anc) {
                assert_eq!(*h, a as f64);
            }
        }
        assert!((0.8f64 / 0.65 - 1.23077).abs() < 1e-5);
        assert!((0.2f64 / 0.35 - 0.57143).abs() < 1e-5);
    }

    #[test]
    fn hard_resample_gives_uniform_weights() {
        let belief = ParticleBelief {
            hidden: Tensor::zeros(&[3, 2]),
            cell: None,
            log_weights: Tensor::new(vec![0.1f64.ln(), 0.3f64.ln(), 0.6f64.ln()], &[1, 3]).unwrap(),
        };
        let (out, _) = soft_resample(&belief, 1.0, &mut RngStream::new(0)).unwrap();
        for w in out.weights() {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn soft_resample_rejects_bad_alpha() {
        let belief = ParticleBelief::initial(1, 2, 1, false);
        for alpha in [0.0, -0.1, 1.5] {
            assert!(soft_resample(&belief, alpha, &mut RngStream::new(0)).is_err());
        }
    }

    #[test]
    fn noise_vanishes_when_clamped_low() {
        let mut rng = RngStream::new(1);
        let layer = Linear::new(3, 4, &mut rng).unwrap();
        let hx = Tensor::new(vec![0.3; 6], &[2, 3]).unwrap();
        let xi = reparam_noise(&layer, &hx, (-20.0, -20.0), &mut RngStream::new(2)).unwrap();
        let eps = sample_gaussian(&mut RngStream::new(2), &[2, 4]);
        for (x, e) in xi.data().iter().zip(eps.data()) {
            assert!(x.abs() < 1e-8 * e.abs().max(f64::MIN_POSITIVE));
        }
        let again = reparam_noise(&layer, &hx, (-20.0, -20.0), &mut RngStream::new(2)).unwrap();
        assert_eq!(xi.data(), again.data());
    }

    #[test]
    fn zero_gru_update_bias_saturates() {
        let mut rng = RngStream::new(4);
        let mut cell = PfGru::new(3, 4, CellConfig { particles: 3, ..CellConfig::default() }, &mut rng).unwrap();
        cell.gates.update.fill_bias(1e3);
        let mut belief = cell.initial_belief(2);
        belief.hidden = Tensor::new((0..24).map(|i| (i as f64 * 0.37).sin()).collect(), &[6, 4]).unwrap();
        let x = Tensor::new(vec![0.1, -0.2, 0.3, 0.0, 0.5, 1.0], &[2, 3]).unwrap();
        let (_, aux) = cell.step(&belief, &x, &mut rng, Mode::Train).unwrap();
        assert_eq!(aux.hidden.data(), belief.hidden.data());
    }

    #[test]
    fn zero_weight_lstm_stays_at_zero() {
        let mut cell = LstmCell::new(2, 3, false, &mut RngStream::new(0)).unwrap();
        cell.gates.visit_params_mut("", &mut |_, t| t.update_leaf(|d| d.fill(0.0)));
        let h = Tensor::zeros(&[1, 3]);
        let x = Tensor::new(vec![0.7, -1.1], &[1, 2]).unwrap();
        let (h2, c2) = cell.step(&h, &h, &x, Mode::Eval).unwrap();
        assert!(h2.data().iter().chain(c2.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let gates = LstmGates::new(5, 7, true, &mut RngStream::new(0)).unwrap();
        assert!(gates.forget.bias.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn step_keeps_weights_normalized() {
        let mut rng = RngStream::new(8);
        let mut cell = PfLstm::new(3, 5, CellConfig { particles: 4, ..CellConfig::default() }, &mut rng).unwrap();
        let mut belief = cell.initial_belief(3);
        for t in 0..6 {
            let x = Tensor::new((0..9).map(|i| ((i + t) as f64).cos()).collect(), &[3, 3]).unwrap();
            belief = cell.step(&belief, &x, &mut rng, Mode::Train).unwrap().0;
            for z in row_lse(&belief.log_weights) {
                assert!(z.abs() < 1e-9);
            }
            assert!(belief.weights().iter().all(|&w| w > 0.0));
        }
    }

    #[test]
    fn linear_obs_head_ignores_features_after_normalizing() {
        let mut rng = RngStream::new(3);
        let h = sample_gaussian(&mut rng, &[4, 3]);
        let (xa, xb) = (replicate_rows(&sample_gaussian(&mut rng, &[1, 2]), 4).unwrap(), replicate_rows(&sample_gaussian(&mut rng, &[1, 2]), 4).unwrap());
        let prior = Tensor::full(&[1, 4], -(4f64).ln());
        let weights = |head: &ObsHead, x: &Tensor| weight_update(&prior, &obs_loglik(head, &h, x, 1).unwrap()).unwrap();
        let linear = ObsHead::new(5, 0, &mut rng).unwrap();
        let (a, b) = (weights(&linear, &xa), weights(&linear, &xb));
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| (p - q).abs() < 1e-12));
        let deep = ObsHead::new(5, 8, &mut rng).unwrap();
        assert_eq!(deep.num_params(), ObsHead::param_count(5, 8));
        let (a, b) = (weights(&deep, &xa), weights(&deep, &xb));
        assert!(a.data().iter().zip(b.data()).any(|(p, q)| (p - q).abs() > 1e-6));
    }
}
