//! Layers and optimization: linear and convolutional layers, batch
//! normalization with running statistics, fan-based initialization, RMSProp,
//! and global-norm gradient clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Anything holding named trainable tensors (and optionally named
/// non-trainable buffers such as running statistics).
pub trait Module {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));

    fn visit_buffers(&self, _prefix: &str, _f: &mut dyn FnMut(&str, &[f64])) {}

    fn visit_buffers_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Vec<f64>)) {}

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, t| n += t.numel());
        n
    }
}

pub fn scoped(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Uniform `[-a, a]` draw with `a = sqrt(6 / (fan_in + fan_out))`.
///
/// Fans come from the shape: `[out, in]` for weights, `[F, C, kh, kw]` for
/// kernels, and `[n]` is treated as `fan_in = fan_out = n`.
pub fn init_params(shape: &[usize], rng: &mut RngStream) -> Result<Tensor> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Config(format!("cannot initialize shape {shape:?}")));
    }
    let (fan_in, fan_out) = match *shape {
        [n] => (n, n),
        [out, inp] => (inp, out),
        [f, c, ref rest @ ..] => {
            let field: usize = rest.iter().product();
            (c * field, f * field)
        }
        _ => unreachable!(),
    };
    let a = init_bound(fan_in, fan_out);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_range(-a, a)).collect();
    Tensor::param(data, shape)
}

pub fn init_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut RngStream) -> Result<Self> {
        Ok(Self {
            weight: init_params(&[out_dim, in_dim], rng)?,
            bias: Tensor::zeros(&[out_dim]).into_param(),
        })
    }

    pub fn from_tensors(weight: Tensor, bias: Tensor) -> Result<Self> {
        match (weight.shape(), bias.shape()) {
            ([out, _], [b]) if out == b => Ok(Self { weight, bias }),
            (w, b) => Err(shape_err("linear", format!("weight {w:?} with bias {b:?}"))),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Overwrite every bias entry with `value`.
    pub fn fill_bias(&mut self, value: f64) {
        self.bias.update_leaf(|b| b.iter_mut().for_each(|v| *v = value));
    }

    /// `x·Wᵀ + b` for `x` of shape `[B×in]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul_t(&self.weight)?.add(&self.bias)
    }
}

impl Module for Linear {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&scoped(prefix, "weight"), &self.weight);
        f(&scoped(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&scoped(prefix, "weight"), &mut self.weight);
        f(&scoped(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernels: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        filters: usize,
        kernel: usize,
        stride: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        Ok(Self {
            kernels: init_params(&[filters, in_channels, kernel, kernel], rng)?,
            bias: Tensor::zeros(&[filters]).into_param(),
            stride,
        })
    }

    /// Output spatial size for a square `size×size` input.
    pub fn output_size(&self, size: usize) -> usize {
        let k = self.kernels.shape()[2];
        (size - k) / self.stride + 1
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.kernels, self.stride)?.add_channel_bias(&self.bias)
    }
}

impl Module for Conv2d {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&scoped(prefix, "kernels"), &self.kernels);
        f(&scoped(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&scoped(prefix, "kernels"), &mut self.kernels);
        f(&scoped(prefix, "bias"), &mut self.bias);
    }
}

/// Batch normalization over the rows of a `[N×H]` input.
///
/// Train mode normalizes with the batch's mean and biased variance and folds
/// them into the running statistics; eval mode uses the running statistics
/// only, so it is a fixed affine map per feature.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    /// Batches folded in so far while accumulating an exact average instead
    /// of the moving one (see [`BatchNorm::begin_accumulate`]).
    pub accumulated: Option<u64>,
}

impl BatchNorm {
    pub const MOMENTUM: f64 = 0.1;
    pub const EPS: f64 = 1e-5;

    pub fn new(features: usize) -> Self {
        Self {
            gamma: Tensor::full(&[features], 1.0).into_param(),
            beta: Tensor::zeros(&[features]).into_param(),
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
            accumulated: None,
        }
    }

    /// Reset the running statistics and make subsequent train-mode calls
    /// average them uniformly until [`BatchNorm::end_accumulate`].
    pub fn begin_accumulate(&mut self) {
        self.running_mean.iter_mut().for_each(|m| *m = 0.0);
        self.running_var.iter_mut().for_each(|v| *v = 1.0);
        self.accumulated = Some(0);
    }

    pub fn end_accumulate(&mut self) {
        self.accumulated = None;
    }

    pub fn features(&self) -> usize {
        self.running_mean.len()
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.features();
        let n = match x.shape() {
            [n, f] if *f == h => *n,
            s => return Err(shape_err("batchnorm", format!("input {s:?} for {h} features"))),
        };
        match mode {
            Mode::Train => self.forward_train(x, n, h),
            Mode::Eval => self.forward_eval(x, h),
        }
    }

    fn forward_train(&mut self, x: &Tensor, n: usize, h: usize) -> Result<Tensor> {
        if n < 2 {
            return Err(Error::Config(format!(
                "batch normalization in train mode needs at least 2 rows, got {n}"
            )));
        }
        let xs = x.data();
        let mut mean = vec![0.0; h];
        for row in xs.chunks(h) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; h];
        for row in xs.chunks(h) {
            for j in 0..h {
                var[j] += (row[j] - mean[j]).powi(2);
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let xhat: Vec<f64> = xs
            .iter()
            .enumerate()
            .map(|(i, v)| (v - mean[i % h]) * inv_std[i % h])
            .collect();
        let (g, b) = (self.gamma.data(), self.beta.data());
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, v)| v * g[i % h] + b[i % h])
            .collect();

        let m = match &mut self.accumulated {
            Some(count) => {
                *count += 1;
                1.0 / *count as f64
            }
            None => self.momentum,
        };
        for j in 0..h {
            self.running_mean[j] = (1.0 - m) * self.running_mean[j] + m * mean[j];
            self.running_var[j] = (1.0 - m) * self.running_var[j] + m * var[j];
        }

        Ok(Tensor::from_op(
            out,
            vec![n, h],
            vec![x.clone(), self.gamma.clone(), self.beta.clone()],
            Box::new(move |ctx| {
                let gy = ctx.grad;
                let gamma = ctx.parents[1].data();
                let mut sum_g = vec![0.0; h];
                let mut sum_gx = vec![0.0; h];
                for (i, (&gi, &xi)) in gy.iter().zip(&xhat).enumerate() {
                    sum_g[i % h] += gi;
                    sum_gx[i % h] += gi * xi;
                }
                let gx = ctx.needs[0].then(|| {
                    let nf = n as f64;
                    gy.iter()
                        .zip(&xhat)
                        .enumerate()
                        .map(|(i, (&gi, &xi))| {
                            let j = i % h;
                            gamma[j] * inv_std[j] / nf * (nf * gi - sum_g[j] - xi * sum_gx[j])
                        })
                        .collect()
                });
                vec![gx, Some(sum_gx), Some(sum_g)]
            }),
        ))
    }

    fn forward_eval(&self, x: &Tensor, h: usize) -> Result<Tensor> {
        let mean = self.running_mean.clone();
        let inv_std: Vec<f64> = self
            .running_var
            .iter()
            .map(|v| 1.0 / (v + self.eps).sqrt())
            .collect();
        let (g, b) = (self.gamma.data(), self.beta.data());
        let out = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - mean[i % h]) * inv_std[i % h] * g[i % h] + b[i % h])
            .collect();
        Ok(Tensor::from_op(
            out,
            x.shape().to_vec(),
            vec![x.clone(), self.gamma.clone(), self.beta.clone()],
            Box::new(move |ctx| {
                let (xs, gamma, gy) = (ctx.parents[0].data(), ctx.parents[1].data(), ctx.grad);
                let mut sum_g = vec![0.0; h];
                let mut sum_gx = vec![0.0; h];
                for (i, (&gi, &xi)) in gy.iter().zip(xs).enumerate() {
                    let j = i % h;
                    sum_g[j] += gi;
                    sum_gx[j] += gi * (xi - mean[j]) * inv_std[j];
                }
                let gx = ctx.needs[0].then(|| {
                    gy.iter()
                        .enumerate()
                        .map(|(i, &gi)| gi * gamma[i % h] * inv_std[i % h])
                        .collect()
                });
                vec![gx, Some(sum_gx), Some(sum_g)]
            }),
        ))
    }
}

impl Module for BatchNorm {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&scoped(prefix, "gamma"), &self.gamma);
        f(&scoped(prefix, "beta"), &self.beta);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&scoped(prefix, "gamma"), &mut self.gamma);
        f(&scoped(prefix, "beta"), &mut self.beta);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&scoped(prefix, "running_mean"), &self.running_mean);
        f(&scoped(prefix, "running_var"), &self.running_var);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        f(&scoped(prefix, "running_mean"), &mut self.running_mean);
        f(&scoped(prefix, "running_var"), &mut self.running_var);
    }
}

/// RMSProp: `s ← ρs + (1−ρ)g²`, `θ ← θ − lr·g/(√s + ε)`.
#[derive(Clone, Debug)]
pub struct RmsProp {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    mean_square: BTreeMap<String, Vec<f64>>,
}

impl RmsProp {
    pub const DECAY: f64 = 0.99;
    pub const EPS: f64 = 1e-8;

    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            decay: Self::DECAY,
            eps: Self::EPS,
            mean_square: BTreeMap::new(),
        }
    }

    pub fn mean_square(&self, name: &str) -> Option<&[f64]> {
        self.mean_square.get(name).map(Vec::as_slice)
    }

    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &[f64]) -> Result<()> {
        if grad.len() != param.numel() {
            return Err(shape_err(
                "rmsprop",
                format!("{name}: gradient of {} for {} values", grad.len(), param.numel()),
            ));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name} at index {i}")));
        }
        let s = self
            .mean_square
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; grad.len()]);
        let (rho, lr, eps) = (self.decay, self.lr, self.eps);
        for (acc, g) in s.iter_mut().zip(grad) {
            *acc = rho * *acc + (1.0 - rho) * g * g;
        }
        param.update_leaf(|theta| {
            for ((t, g), acc) in theta.iter_mut().zip(grad).zip(s.iter()) {
                *t -= lr * g / (acc.sqrt() + eps);
            }
        });
        Ok(())
    }
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Scale all gradients by `max_norm / norm` when their global L2 norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_examples() {
        let eye = Tensor::param(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let layer = Linear::from_tensors(eye, Tensor::zeros(&[2])).unwrap();
        let x = Tensor::new(vec![0.3, -2.0], &[1, 2]).unwrap();
        assert_eq!(layer.forward(&x).unwrap().data(), x.data());

        let w = Tensor::param(vec![1.0, 1.0], &[1, 2]).unwrap();
        let b = Tensor::param(vec![0.5], &[1]).unwrap();
        let layer = Linear::from_tensors(w, b).unwrap();
        let x = Tensor::new(vec![2.0, 3.0], &[1, 2]).unwrap();
        assert_eq!(layer.forward(&x).unwrap().data(), &[5.5]);
        assert!(layer.forward(&Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn batchnorm_train_standardizes() {
        let mut rng = RngStream::new(5);
        // Column variances far above eps so the normalized variance is 1 to 1e-8.
        let data: Vec<f64> = (0..64 * 3).map(|_| rng.uniform_range(-200.0, 200.0)).collect();
        let x = Tensor::new(data, &[64, 3]).unwrap();
        let mut bn = BatchNorm::new(3);
        let y = bn.forward(&x, Mode::Train).unwrap();
        for j in 0..3 {
            let col: Vec<f64> = y.data().iter().skip(j).step_by(3).copied().collect();
            let mean = col.iter().sum::<f64>() / 64.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-10, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-8, "var {var}");
        }
    }

    #[test]
    fn batchnorm_constant_column_is_zero() {
        let x = Tensor::new(vec![4.0, 1.0, 4.0, 2.0, 4.0, 3.0], &[3, 2]).unwrap();
        let mut bn = BatchNorm::new(2);
        let y = bn.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert_eq!(y.data()[2], 0.0);
        assert_eq!(y.data()[4], 0.0);
    }

    #[test]
    fn batchnorm_accumulate_is_exact_average() {
        let mut bn = BatchNorm::new(1);
        bn.begin_accumulate();
        for batch in [[1.0, 3.0], [5.0, 5.0], [0.0, 2.0]] {
            bn.forward(&Tensor::new(batch.to_vec(), &[2, 1]).unwrap(), Mode::Train).unwrap();
        }
        bn.end_accumulate();
        // Batch means 2, 5, 1 and biased variances 1, 0, 1.
        assert!((bn.running_mean[0] - 8.0 / 3.0).abs() < 1e-15);
        assert!((bn.running_var[0] - 2.0 / 3.0).abs() < 1e-15);
        bn.forward(&Tensor::new(vec![0.0, 0.0], &[2, 1]).unwrap(), Mode::Train).unwrap();
        assert!((bn.running_mean[0] - 0.9 * 8.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn batchnorm_eval_hand_computed() {
        let mut bn = BatchNorm::new(2);
        bn.running_mean = vec![1.0, -2.0];
        bn.running_var = vec![4.0, 0.25];
        bn.gamma = Tensor::param(vec![2.0, 0.5], &[2]).unwrap();
        bn.beta = Tensor::param(vec![0.1, -0.1], &[2]).unwrap();
        let x = Tensor::new(vec![3.0, 0.0], &[1, 2]).unwrap();
        let y = bn.forward(&x, Mode::Eval).unwrap();
        let e0 = (3.0 - 1.0) / (4.0f64 + 1e-5).sqrt() * 2.0 + 0.1;
        let e1 = (0.0 + 2.0) / (0.25f64 + 1e-5).sqrt() * 0.5 - 0.1;
        assert!((y.data()[0] - e0).abs() < 1e-15);
        assert!((y.data()[1] - e1).abs() < 1e-15);
    }

    #[test]
    fn batchnorm_rejects_single_row_in_train() {
        let mut bn = BatchNorm::new(2);
        assert!(bn.forward(&Tensor::zeros(&[1, 2]), Mode::Train).is_err());
        assert!(bn.forward(&Tensor::zeros(&[1, 2]), Mode::Eval).is_ok());
    }

    #[test]
    fn batchnorm_updates_running_stats() {
        let mut bn = BatchNorm::new(1);
        let x = Tensor::new(vec![1.0, 3.0], &[2, 1]).unwrap();
        bn.forward(&x, Mode::Train).unwrap();
        assert!((bn.running_mean[0] - 0.2).abs() < 1e-15);
        assert!((bn.running_var[0] - (0.9 + 0.1)).abs() < 1e-15);
    }

    #[test]
    fn init_bounds_and_mean() {
        let mut rng = RngStream::new(9);
        let t = init_params(&[300, 400], &mut rng).unwrap();
        let a = init_bound(400, 300);
        assert!(t.data().iter().all(|v| v.abs() <= a));
        let mean = t.data().iter().sum::<f64>() / t.numel() as f64;
        assert!(mean.abs() < 0.01);
        assert!(init_params(&[0, 3], &mut rng).is_err());
    }

    #[test]
    fn rmsprop_single_step() {
        let mut opt = RmsProp::new(0.01);
        let mut p = Tensor::param(vec![0.0], &[1]).unwrap();
        opt.step("p", &mut p, &[1.0]).unwrap();
        assert!((opt.mean_square("p").unwrap()[0] - 0.01).abs() < 1e-15);
        let expected = -0.01 / (0.1 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert!((p.data()[0] + 0.0999999).abs() < 1e-6);
    }

    #[test]
    fn rmsprop_zero_gradient_and_zero_lr_are_identity() {
        let mut p = Tensor::param(vec![1.5, -2.0], &[2]).unwrap();
        RmsProp::new(0.01).step("p", &mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p.data(), &[1.5, -2.0]);
        RmsProp::new(0.0).step("p", &mut p, &[3.0, -1.0]).unwrap();
        assert_eq!(p.data(), &[1.5, -2.0]);
    }

    #[test]
    fn rmsprop_rejects_nan() {
        let mut p = Tensor::param(vec![1.0], &[1]).unwrap();
        let err = RmsProp::new(0.1).step("w", &mut p, &[f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(p.data(), &[1.0]);
    }

    #[test]
    fn rmsprop_decreases_quadratic() {
        let loss = |x: f64| (x - 3.0).powi(2);
        let mut p = Tensor::param(vec![0.0], &[1]).unwrap();
        let mut opt = RmsProp::new(0.05);
        let before = loss(p.data()[0]);
        for _ in 0..2 {
            let g = 2.0 * (p.data()[0] - 3.0);
            opt.step("p", &mut p, &[g]).unwrap();
        }
        assert!(loss(p.data()[0]) < before);
    }

    #[test]
    fn clipping_examples() {
        let mut g = vec![vec![0.6, 0.8]];
        assert_eq!(clip_grad_norm(&mut g, 3.0), 1.0);
        assert_eq!(g, vec![vec![0.6, 0.8]]);
        let mut g = vec![vec![6.0, 8.0]];
        assert_eq!(clip_grad_norm(&mut g, 5.0), 10.0);
        assert_eq!(g, vec![vec![3.0, 4.0]]);
    }
}
