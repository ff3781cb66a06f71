#![allow(dead_code)]

use pfrnn::loss::{combined_loss, LossConfig};
use pfrnn::model::{Model, ModelKind, ModelSpec};
use pfrnn::nn::{Mode, Module};
use pfrnn::rng::RngStream;
use pfrnn::tensor::Tensor;

/// Central finite-difference gradient of `f` at `x`.
pub fn numeric_grad(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let up = f(&probe);
            probe[i] = x[i] - eps;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

pub fn random_tensor(rng: &mut RngStream, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| scale * rng.gaussian()).collect(), shape).unwrap()
}

/// A small model with random inputs and targets for gradient checks.
pub struct Fixture {
    pub model: Model,
    pub xs: Vec<Tensor>,
    pub ys: Vec<Tensor>,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Fixture {
    pub fn new(spec: ModelSpec, batch: usize, steps: usize, seed: u64) -> Self {
        let mut rng = RngStream::new(seed);
        let mut model = Model::new(spec.clone(), &mut rng).unwrap();
        // Zero biases put ReLU inputs exactly on the kink when a whole
        // layer is inactive; finite differences are meaningless there.
        model.visit_params_mut("", &mut |name, t| {
            if name.ends_with("bias") {
                let jitter: Vec<f64> = (0..t.numel()).map(|_| 0.1 * rng.gaussian()).collect();
                t.update_leaf(|d| d.iter_mut().zip(&jitter).for_each(|(v, j)| *v += j));
            }
        });
        let xs = (0..steps).map(|_| random_tensor(&mut rng, &[batch, spec.input_dim], 1.0)).collect();
        let ys = (0..steps).map(|_| random_tensor(&mut rng, &[batch, spec.output_dim], 0.5)).collect();
        Self {
            model,
            xs,
            ys,
            loss: LossConfig::default(),
            seed,
        }
    }

    pub fn small(kind: ModelKind, batch: usize, particles: usize, hidden: usize, steps: usize) -> Self {
        let mut spec = ModelSpec::new(kind, hidden);
        spec.input_dim = 3;
        spec.output_dim = 2;
        spec.encoder_widths = [5, 4];
        spec.cell.particles = particles;
        Self::new(spec, batch, steps, 11)
    }

    /// Loss with the sampling stream reset, so every call sees the same draws.
    pub fn loss_value(&mut self) -> Tensor {
        let mut rng = RngStream::with_stream(self.seed, 99);
        let state = self.model.initial_state(self.xs[0].shape()[0]);
        let (_, outs) = self.model.unroll(state, &self.xs, None, &mut rng, Mode::Train).unwrap();
        combined_loss(&outs, &self.ys, &self.loss).unwrap().total
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.model.visit_params("", &mut |n, t| out.push((n.to_string(), t.clone())));
        out
    }

    fn set_param(&mut self, index: usize, values: &[f64]) {
        let mut i = 0;
        self.model.visit_params_mut("", &mut |_, t| {
            if i == index {
                t.update_leaf(|d| d.copy_from_slice(values));
            }
            i += 1;
        });
    }

    /// Worst relative error between autodiff and finite differences over
    /// coordinates whose gradient exceeds `floor`, with the offending name.
    pub fn gradcheck(&mut self, eps: f64, floor: f64) -> (f64, String, usize) {
        let loss = self.loss_value();
        let params = self.params();
        let grads = loss.backward().unwrap();
        let analytic: Vec<Vec<f64>> = params.iter().map(|(_, t)| grads.get_or_zeros(t)).collect();
        let values: Vec<Vec<f64>> = params.iter().map(|(_, t)| t.data().to_vec()).collect();
        let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
        drop((loss, grads, params));
        let (mut worst, mut at, mut checked) = (0.0, String::new(), 0);
        for (idx, base) in values.iter().enumerate() {
            let numeric = numeric_grad(base, eps, |v| {
                self.set_param(idx, v);
                self.loss_value().item()
            });
            self.set_param(idx, base);
            for (j, (a, n)) in analytic[idx].iter().zip(&numeric).enumerate() {
                if a.abs().max(n.abs()) <= floor {
                    continue;
                }
                checked += 1;
                let e = rel_err(*a, *n);
                if e > worst {
                    worst = e;
                    at = format!("{}[{j}] autodiff {a:e} numeric {n:e}", names[idx]);
                }
            }
        }
        (worst, at, checked)
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Exact expectation of the self-normalized estimator `Σ w'_i f(x_{a_i})`
/// after drawing K ancestors from `q = α·w + (1−α)/K` and reweighting by
/// `w/q`, by enumerating every multinomial count vector.
pub fn exact_resampled_expectation(w: &[f64], fx: &[f64], alpha: f64) -> f64 {
    let k = w.len();
    let q: Vec<f64> = w.iter().map(|wi| alpha * wi + (1.0 - alpha) / k as f64).collect();
    let ratio: Vec<f64> = w.iter().zip(&q).map(|(a, b)| a / b).collect();
    let log_fact: Vec<f64> = (0..=k).scan(0.0, |acc, i| {
        if i > 0 {
            *acc += (i as f64).ln();
        }
        Some(*acc)
    }).collect();
    let mut counts = vec![0usize; k];
    let mut total = 0.0;
    fn walk(
        slot: usize,
        left: usize,
        counts: &mut Vec<usize>,
        visit: &mut dyn FnMut(&[usize]),
    ) {
        if slot + 1 == counts.len() {
            counts[slot] = left;
            visit(counts);
            return;
        }
        for c in 0..=left {
            counts[slot] = c;
            walk(slot + 1, left - c, counts, visit);
        }
    }
    walk(0, k, &mut counts, &mut |c| {
        let mut log_p = log_fact[k];
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..k {
            if c[i] > 0 {
                log_p += c[i] as f64 * q[i].ln() - log_fact[c[i]];
                num += c[i] as f64 * ratio[i] * fx[i];
                den += c[i] as f64 * ratio[i];
            }
        }
        total += log_p.exp() * num / den;
    });
    total
}
