use super::Tensor;
use crate::error::{shape_err, Result};

impl Tensor {
    /// Valid cross-correlation of a `[C×H×W]` input with `[F×C×kh×kw]`
    /// kernels, producing `[F×H'×W']`.
    pub fn conv2d(&self, kernels: &Tensor, stride: usize) -> Result<Tensor> {
        let (c, h, w) = match self.shape() {
            [c, h, w] => (*c, *h, *w),
            s => return Err(shape_err("conv2d", format!("input must be [C,H,W], got {s:?}"))),
        };
        let (f, kc, kh, kw) = match kernels.shape() {
            [f, kc, kh, kw] => (*f, *kc, *kh, *kw),
            s => return Err(shape_err("conv2d", format!("kernels must be [F,C,kh,kw], got {s:?}"))),
        };
        if kc != c {
            return Err(shape_err("conv2d", format!("{c} input channels vs kernel {kc}")));
        }
        if kh > h || kw > w || kh == 0 || kw == 0 {
            return Err(shape_err("conv2d", format!("kernel {kh}x{kw} does not fit {h}x{w}")));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be positive"));
        }
        let (oh, ow) = ((h - kh) / stride + 1, (w - kw) / stride + 1);
        let geom = Geometry { c, h, w, f, kh, kw, oh, ow, stride };
        let out = geom.forward(self.data(), kernels.data());
        Ok(Tensor::from_op(
            out,
            vec![f, oh, ow],
            vec![self.clone(), kernels.clone()],
            Box::new(move |ctx| {
                let (x, k) = (ctx.parents[0].data(), ctx.parents[1].data());
                let (gx, gk) = geom.backward(x, k, ctx.grad, ctx.needs[0], ctx.needs[1]);
                vec![gx, gk]
            }),
        ))
    }

    /// Add one bias value per leading channel of a `[F×...]` tensor.
    pub fn add_channel_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let f = *self.shape().first().unwrap_or(&0);
        if bias.shape() != [f] {
            return Err(shape_err(
                "add_channel_bias",
                format!("{:?} with bias {:?}", self.shape(), bias.shape()),
            ));
        }
        let plane = if f == 0 { 0 } else { self.numel() / f };
        let b = bias.data();
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i / plane])
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), bias.clone()],
            Box::new(move |ctx| {
                let gx = ctx.needs[0].then(|| ctx.grad.to_vec());
                let gb = ctx.needs[1].then(|| {
                    ctx.grad.chunks(plane).map(|c| c.iter().sum()).collect()
                });
                vec![gx, gb]
            }),
        ))
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
}

impl Geometry {
    fn input_at(&self, ch: usize, y: usize, x: usize) -> usize {
        (ch * self.h + y) * self.w + x
    }

    fn kernel_at(&self, f: usize, ch: usize, i: usize, j: usize) -> usize {
        ((f * self.c + ch) * self.kh + i) * self.kw + j
    }

    fn forward(&self, x: &[f64], k: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.f * self.oh * self.ow];
        for f in 0..self.f {
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let mut acc = 0.0;
                    for ch in 0..self.c {
                        for i in 0..self.kh {
                            for j in 0..self.kw {
                                acc += x[self.input_at(ch, oy * self.stride + i, ox * self.stride + j)]
                                    * k[self.kernel_at(f, ch, i, j)];
                            }
                        }
                    }
                    out[(f * self.oh + oy) * self.ow + ox] = acc;
                }
            }
        }
        out
    }

    fn backward(
        &self,
        x: &[f64],
        k: &[f64],
        g: &[f64],
        need_x: bool,
        need_k: bool,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let mut gx = need_x.then(|| vec![0.0; x.len()]);
        let mut gk = need_k.then(|| vec![0.0; k.len()]);
        for f in 0..self.f {
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let go = g[(f * self.oh + oy) * self.ow + ox];
                    if go == 0.0 {
                        continue;
                    }
                    for ch in 0..self.c {
                        for i in 0..self.kh {
                            for j in 0..self.kw {
                                let xi = self.input_at(ch, oy * self.stride + i, ox * self.stride + j);
                                let ki = self.kernel_at(f, ch, i, j);
                                if let Some(gx) = gx.as_mut() {
                                    gx[xi] += go * k[ki];
                                }
                                if let Some(gk) = gk.as_mut() {
                                    gk[ki] += go * x[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
        (gx, gk)
    }
}
