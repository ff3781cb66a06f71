use super::gemm::{gemm, ROW_MAJOR, TRANSPOSED};
use super::{numel, Tensor};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug)]
enum BinOp {
    Add,
    Sub,
    Mul,
}

/// Output shape for a binary op. Operands must match, or the smaller one must
/// equal the trailing dimensions of the larger (it is repeated along the
/// leading dimensions).
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a == b {
        Some(a.to_vec())
    } else if a.len() >= b.len() && a.ends_with(b) {
        Some(a.to_vec())
    } else if b.len() > a.len() && b.ends_with(a) {
        Some(b.to_vec())
    } else {
        None
    }
}

/// Sum `g` (length `n`) down to a repeated operand of length `m`.
fn reduce_to(g: impl Iterator<Item = f64>, m: usize) -> Vec<f64> {
    let mut acc = vec![0.0; m];
    for (i, v) in g.enumerate() {
        acc[i % m] += v;
    }
    acc
}

/// `(outer, len, inner)` extents around `axis`.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(shape_err(op, format!("axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

fn removed_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

impl Tensor {
    fn binary(&self, other: &Tensor, op: BinOp) -> Result<Tensor> {
        let shape = broadcast_shape(self.shape(), other.shape()).ok_or_else(|| {
            shape_err(
                "elementwise",
                format!("{:?} vs {:?} ({op:?})", self.shape(), other.shape()),
            )
        })?;
        let n = numel(&shape);
        let (a, b) = (self.data(), other.data());
        let (na, nb) = (a.len(), b.len());
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let (x, y) = (a[i % na], b[i % nb]);
                match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                }
            })
            .collect();
        Ok(Tensor::from_op(
            data,
            shape,
            vec![self.clone(), other.clone()],
            Box::new(move |ctx| {
                let (a, b) = (ctx.parents[0].data(), ctx.parents[1].data());
                let g = ctx.grad;
                let ga = ctx.needs[0].then(|| {
                    let it = g.iter().enumerate().map(|(i, &gi)| match op {
                        BinOp::Add | BinOp::Sub => gi,
                        BinOp::Mul => gi * b[i % nb],
                    });
                    reduce_to(it, na)
                });
                let gb = ctx.needs[1].then(|| {
                    let it = g.iter().enumerate().map(|(i, &gi)| match op {
                        BinOp::Add => gi,
                        BinOp::Sub => -gi,
                        BinOp::Mul => gi * a[i % na],
                    });
                    reduce_to(it, nb)
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinOp::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinOp::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinOp::Mul)
    }

    /// Elementwise map with derivative `df(x, y)` given input `x` and output `y`.
    fn unary(
        &self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Tensor {
        let data = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |ctx| {
                let x = ctx.parents[0].data();
                let g = x
                    .iter()
                    .zip(ctx.out)
                    .zip(ctx.grad)
                    .map(|((&x, &y), &g)| g * df(x, y))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.unary(move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        self.unary(move |x| x + s, |_, _| 1.0)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    /// `1 - x`, the complement used by gated updates.
    pub fn one_minus(&self) -> Tensor {
        self.unary(|x| 1.0 - x, |_, _| -1.0)
    }

    pub fn square(&self) -> Tensor {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn log(&self) -> Result<Tensor> {
        if let Some(bad) = self.data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(f64::ln, |x, _| 1.0 / x))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    /// ReLU with derivative 0 at exactly 0.
    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Clamp into `[lo, hi]`; zero gradient where the bound is active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(
            move |x| x.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    /// `log(exp(x) + exp(c))` elementwise for a constant `c`, computed stably.
    /// With `c = -inf` this is the identity.
    pub fn logaddexp_scalar(&self, c: f64) -> Tensor {
        if c == f64::NEG_INFINITY {
            return self.unary(|x| x, |_, _| 1.0);
        }
        self.unary(
            move |x| {
                let m = x.max(c);
                m + ((x - m).exp() + (c - m).exp()).ln()
            },
            move |x, _| sigmoid(x - c),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape()),
            ));
        }
        Ok(Tensor::from_op(
            self.data().to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|ctx| vec![Some(ctx.grad.to_vec())]),
        ))
    }

    /// `[m×k]·[k×n] -> [m×n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k, n) = match (self.shape(), other.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            (a, b) => return Err(shape_err("matmul", format!("{a:?} · {b:?}"))),
        };
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(), ROW_MAJOR(k), other.data(), ROW_MAJOR(n), 0.0, &mut out);
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone(), other.clone()],
            Box::new(move |ctx| {
                let (a, b) = (ctx.parents[0].data(), ctx.parents[1].data());
                let ga = ctx.needs[0].then(|| {
                    let mut g = vec![0.0; m * k];
                    gemm(m, n, k, ctx.grad, ROW_MAJOR(n), b, TRANSPOSED(n), 0.0, &mut g);
                    g
                });
                let gb = ctx.needs[1].then(|| {
                    let mut g = vec![0.0; k * n];
                    gemm(k, m, n, a, TRANSPOSED(k), ctx.grad, ROW_MAJOR(n), 0.0, &mut g);
                    g
                });
                vec![ga, gb]
            }),
        ))
    }

    /// `[m×k]·[n×k]ᵀ -> [m×n]`, the layout of a linear layer's weight.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k, n) = match (self.shape(), other.shape()) {
            ([m, k], [n, k2]) if k == k2 => (*m, *k, *n),
            (a, b) => return Err(shape_err("matmul_t", format!("{a:?} · {b:?}ᵀ"))),
        };
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(), ROW_MAJOR(k), other.data(), TRANSPOSED(k), 0.0, &mut out);
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone(), other.clone()],
            Box::new(move |ctx| {
                let (a, b) = (ctx.parents[0].data(), ctx.parents[1].data());
                let ga = ctx.needs[0].then(|| {
                    let mut g = vec![0.0; m * k];
                    gemm(m, n, k, ctx.grad, ROW_MAJOR(n), b, ROW_MAJOR(k), 0.0, &mut g);
                    g
                });
                let gb = ctx.needs[1].then(|| {
                    let mut g = vec![0.0; n * k];
                    gemm(n, m, k, ctx.grad, TRANSPOSED(n), a, ROW_MAJOR(k), 0.0, &mut g);
                    g
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Batched product `[B×m×k]·[B×k×n] -> [B×m×n]`.
    pub fn bmm(&self, other: &Tensor) -> Result<Tensor> {
        let (bs, m, k, n) = match (self.shape(), other.shape()) {
            ([b, m, k], [b2, k2, n]) if b == b2 && k == k2 => (*b, *m, *k, *n),
            (a, b) => return Err(shape_err("bmm", format!("{a:?} · {b:?}"))),
        };
        let (sa, sb, sc) = (m * k, k * n, m * n);
        let mut out = vec![0.0; bs * sc];
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &self.data()[i * sa..(i + 1) * sa],
                ROW_MAJOR(k),
                &other.data()[i * sb..(i + 1) * sb],
                ROW_MAJOR(n),
                0.0,
                &mut out[i * sc..(i + 1) * sc],
            );
        }
        Ok(Tensor::from_op(
            out,
            vec![bs, m, n],
            vec![self.clone(), other.clone()],
            Box::new(move |ctx| {
                let (a, b, g) = (ctx.parents[0].data(), ctx.parents[1].data(), ctx.grad);
                let ga = ctx.needs[0].then(|| {
                    let mut out = vec![0.0; bs * sa];
                    for i in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * sc..(i + 1) * sc],
                            ROW_MAJOR(n),
                            &b[i * sb..(i + 1) * sb],
                            TRANSPOSED(n),
                            0.0,
                            &mut out[i * sa..(i + 1) * sa],
                        );
                    }
                    out
                });
                let gb = ctx.needs[1].then(|| {
                    let mut out = vec![0.0; bs * sb];
                    for i in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            &a[i * sa..(i + 1) * sa],
                            TRANSPOSED(k),
                            &g[i * sc..(i + 1) * sc],
                            ROW_MAJOR(n),
                            0.0,
                            &mut out[i * sb..(i + 1) * sb],
                        );
                    }
                    out
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Rows of `self` (first axis) picked by `indices`. Gradients scatter-add
    /// back into the source rows, so duplicated rows accumulate.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let Some(&rows) = self.shape().first() else {
            return Err(shape_err("gather_rows", "scalar input"));
        };
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Index { index: bad, len: rows });
        }
        let width = if rows == 0 { 0 } else { self.numel() / rows };
        let src = self.data();
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            data.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = indices.len();
        let indices = indices.to_vec();
        Ok(Tensor::from_op(
            data,
            shape,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut g = vec![0.0; rows * width];
                for (j, &i) in indices.iter().enumerate() {
                    let src = &ctx.grad[j * width..(j + 1) * width];
                    g[i * width..(i + 1) * width]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, b)| *a += b);
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self) -> Tensor {
        let n = self.numel();
        Tensor::from_op(
            vec![self.data().iter().sum()],
            Vec::new(),
            vec![self.clone()],
            Box::new(move |ctx| vec![Some(vec![ctx.grad[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        check_axis("sum_axis", self.shape(), axis)?;
        let (outer, len, inner) = axis_extents(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x[base + i];
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            removed_axis(self.shape(), axis),
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut g = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        let base = (o * len + j) * inner;
                        g[base..base + inner].copy_from_slice(&ctx.grad[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// `log Σ exp` along `axis`, stabilized by the running maximum.
    pub fn logsumexp(&self, axis: usize) -> Result<Tensor> {
        check_axis("logsumexp", self.shape(), axis)?;
        let (outer, len, inner) = axis_extents(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| x[(o * len + j) * inner + i];
                out[o * inner + i] = lse((0..len).map(at));
            }
        }
        Ok(Tensor::from_op(
            out,
            removed_axis(self.shape(), axis),
            vec![self.clone()],
            Box::new(move |ctx| {
                let x = ctx.parents[0].data();
                let mut g = vec![0.0; x.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let (y, gy) = (ctx.out[o * inner + i], ctx.grad[o * inner + i]);
                        if y == f64::NEG_INFINITY {
                            continue;
                        }
                        for j in 0..len {
                            let idx = (o * len + j) * inner + i;
                            g[idx] = gy * (x[idx] - y).exp();
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// `x - logsumexp(x)` along `axis`, keeping the shape.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis("log_softmax", self.shape(), axis)?;
        let (outer, len, inner) = axis_extents(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let z = lse((0..len).map(|j| x[idx(j)]));
                if !z.is_finite() {
                    return Err(Error::Degenerate(format!(
                        "log_softmax over a row with normalizer {z}"
                    )));
                }
                for j in 0..len {
                    out[idx(j)] = x[idx(j)] - z;
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut g = vec![0.0; ctx.out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let total: f64 = (0..len).map(|j| ctx.grad[idx(j)]).sum();
                        for j in 0..len {
                            g[idx(j)] = ctx.grad[idx(j)] - ctx.out[idx(j)].exp() * total;
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Euclidean norm along `axis`. The derivative at the origin is taken as 0.
    pub fn norm_axis(&self, axis: usize) -> Result<Tensor> {
        check_axis("norm_axis", self.shape(), axis)?;
        let (outer, len, inner) = axis_extents(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..len).map(|j| x[(o * len + j) * inner + i].powi(2)).sum();
                out[o * inner + i] = s.sqrt();
            }
        }
        Ok(Tensor::from_op(
            out,
            removed_axis(self.shape(), axis),
            vec![self.clone()],
            Box::new(move |ctx| {
                let x = ctx.parents[0].data();
                let mut g = vec![0.0; x.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let r = ctx.out[o * inner + i];
                        if r == 0.0 {
                            continue;
                        }
                        let gy = ctx.grad[o * inner + i] / r;
                        for j in 0..len {
                            let idx = (o * len + j) * inner + i;
                            g[idx] = gy * x[idx];
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }
}

/// Concatenate along `axis`; all other dimensions must agree.
pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| shape_err("concat", "empty input"))?;
    check_axis("concat", first.shape(), axis)?;
    for p in &parts[1..] {
        let (a, b) = (first.shape(), p.shape());
        let compatible = a.len() == b.len()
            && a.iter().zip(b).enumerate().all(|(d, (x, y))| d == axis || x == y);
        if !compatible {
            return Err(shape_err("concat", format!("{a:?} vs {b:?} on axis {axis}")));
        }
    }
    let outer = numel(&first.shape()[..axis]);
    let inner = numel(&first.shape()[axis + 1..]);
    let blocks: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
    let total_block: usize = blocks.iter().sum();
    let mut data = Vec::with_capacity(outer * total_block);
    for o in 0..outer {
        for (p, &blk) in parts.iter().zip(&blocks) {
            data.extend_from_slice(&p.data()[o * blk..(o + 1) * blk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    Ok(Tensor::from_op(
        data,
        shape,
        parts.to_vec(),
        Box::new(move |ctx| {
            let mut offset = 0;
            blocks
                .iter()
                .zip(ctx.needs)
                .map(|(&blk, &need)| {
                    let start = offset;
                    offset += blk;
                    need.then(|| {
                        let mut g = Vec::with_capacity(outer * blk);
                        for o in 0..outer {
                            let row = o * total_block + start;
                            g.extend_from_slice(&ctx.grad[row..row + blk]);
                        }
                        g
                    })
                })
                .collect()
        }),
    ))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable `log Σ exp` of a sequence; `-inf` for an empty or all `-inf` input.
pub fn lse(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || m.is_nan() {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}
