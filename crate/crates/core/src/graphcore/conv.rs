//! 2-D convolution and batch normalization over `(batch, channels, height, width)` tensors.

use crate::graphcore::graph::{BackwardCtx, Graph, Op, Var};
use crate::graphcore::tensor::{gemm, Tensor};
use crate::graphcore::GraphError;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dConfig {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dConfig {
    fn default() -> Self {
        Conv2dConfig {
            stride: 2,
            padding: 1,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn n(&self) -> usize {
        self.batch * self.ho * self.wo
    }

    /// Calls `f(col_row, col_index, input_index)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let n = self.n();
        for ci in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    for b in 0..self.batch {
                        let plane = (b * self.cin + ci) * self.h * self.w;
                        for oh in 0..self.ho {
                            let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                            if ih < 0 || ih >= self.h as isize {
                                continue;
                            }
                            let col_base = row * n + (b * self.ho + oh) * self.wo;
                            let in_base = plane + ih as usize * self.w;
                            for ow in 0..self.wo {
                                let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                                if iw < 0 || iw >= self.w as isize {
                                    continue;
                                }
                                f(row, col_base + ow, in_base + iw as usize);
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        let mut cols = vec![S::zero(); self.k() * self.n()];
        self.for_each_tap(|_, c, i| cols[c] = x[i]);
        cols
    }

    fn col2im<S: Scalar>(&self, cols: &[S]) -> Vec<S> {
        let mut x = vec![S::zero(); self.batch * self.cin * self.h * self.w];
        self.for_each_tap(|_, c, i| x[i] += cols[c]);
        x
    }
}

struct Conv2d {
    geom: ConvGeom,
}

impl<S: Scalar> Op<S> for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, S>) -> Vec<Option<Tensor<S>>> {
        let geom = self.geom;
        let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
        let (k, n, hw) = (geom.k(), geom.n(), geom.ho * geom.wo);
        // (batch, cout, ho*wo) -> (cout, batch*ho*wo)
        let g = ctx.grad.data();
        let mut gp = vec![S::zero(); geom.cout * n];
        for b in 0..geom.batch {
            for co in 0..geom.cout {
                let src = (b * geom.cout + co) * hw;
                let dst = co * n + b * hw;
                gp[dst..dst + hw].copy_from_slice(&g[src..src + hw]);
            }
        }
        let gx = ctx.needs[0].then(|| {
            let mut dcols = vec![S::zero(); k * n];
            gemm(w.data(), true, &gp, false, k, geom.cout, n, &mut dcols, false);
            Tensor::from_parts(x.shape().to_vec(), geom.col2im(&dcols))
        });
        let gw = ctx.needs[1].then(|| {
            let cols = geom.im2col(x.data());
            let mut dw = vec![S::zero(); geom.cout * k];
            gemm(&gp, false, &cols, true, geom.cout, n, k, &mut dw, false);
            Tensor::from_parts(w.shape().to_vec(), dw)
        });
        let mut out = vec![gx, gw];
        if ctx.inputs.len() == 3 {
            out.push(ctx.needs[2].then(|| {
                let db = gp.chunks(n).map(|row| row.iter().copied().sum()).collect();
                Tensor::from_parts(vec![geom.cout], db)
            }));
        }
        out
    }
}

struct BatchNormTrain<S> {
    xhat: Vec<S>,
    invstd: Vec<S>,
    channels: usize,
    plane: usize,
}

impl<S: Scalar> Op<S> for BatchNormTrain<S> {
    fn name(&self) -> &'static str {
        "batchnorm2d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, S>) -> Vec<Option<Tensor<S>>> {
        let (x, gamma) = (ctx.inputs[0], ctx.inputs[1]);
        let g = ctx.grad.data();
        let (c_n, plane) = (self.channels, self.plane);
        let batch = x.shape()[0];
        let count = S::lit((batch * plane) as f64);
        let mut dgamma = vec![S::zero(); c_n];
        let mut dbeta = vec![S::zero(); c_n];
        for b in 0..batch {
            for c in 0..c_n {
                let base = (b * c_n + c) * plane;
                for i in base..base + plane {
                    dbeta[c] += g[i];
                    dgamma[c] += g[i] * self.xhat[i];
                }
            }
        }
        let gx = ctx.needs[0].then(|| {
            let mut dx = vec![S::zero(); x.numel()];
            for b in 0..batch {
                for c in 0..c_n {
                    let scale = gamma.data()[c] * self.invstd[c] / count;
                    let base = (b * c_n + c) * plane;
                    for i in base..base + plane {
                        dx[i] = scale * (count * g[i] - dbeta[c] - self.xhat[i] * dgamma[c]);
                    }
                }
            }
            Tensor::from_parts(x.shape().to_vec(), dx)
        });
        vec![
            gx,
            ctx.needs[1].then(|| Tensor::from_parts(vec![c_n], dgamma)),
            ctx.needs[2].then(|| Tensor::from_parts(vec![c_n], dbeta)),
        ]
    }
}

struct BatchNormEval<S> {
    xhat: Vec<S>,
    invstd: Vec<S>,
    channels: usize,
    plane: usize,
}

impl<S: Scalar> Op<S> for BatchNormEval<S> {
    fn name(&self) -> &'static str {
        "batchnorm2d_eval"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, S>) -> Vec<Option<Tensor<S>>> {
        let (x, gamma) = (ctx.inputs[0], ctx.inputs[1]);
        let g = ctx.grad.data();
        let (c_n, plane) = (self.channels, self.plane);
        let batch = x.shape()[0];
        let mut dgamma = vec![S::zero(); c_n];
        let mut dbeta = vec![S::zero(); c_n];
        let mut dx = vec![S::zero(); x.numel()];
        for b in 0..batch {
            for c in 0..c_n {
                let base = (b * c_n + c) * plane;
                let scale = gamma.data()[c] * self.invstd[c];
                for i in base..base + plane {
                    dbeta[c] += g[i];
                    dgamma[c] += g[i] * self.xhat[i];
                    dx[i] = g[i] * scale;
                }
            }
        }
        vec![
            ctx.needs[0].then(|| Tensor::from_parts(x.shape().to_vec(), dx)),
            ctx.needs[1].then(|| Tensor::from_parts(vec![c_n], dgamma)),
            ctx.needs[2].then(|| Tensor::from_parts(vec![c_n], dbeta)),
        ]
    }
}

/// Per-channel batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments<S> {
    pub mean: Vec<S>,
    /// Biased (population) variance.
    pub var: Vec<S>,
    /// Number of values each statistic was computed over.
    pub count: usize,
}

fn nchw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize), GraphError> {
    match *shape {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(GraphError::Shape {
            op,
            detail: format!("expected (batch, channels, height, width), got {:?}", shape),
        }),
    }
}

impl<S: Scalar> Graph<S> {
    /// Cross-correlation of `x: (B, Cin, H, W)` with `w: (Cout, Cin, kh, kw)` plus an optional `(Cout)` bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        cfg: Conv2dConfig,
    ) -> Result<Var, GraphError> {
        let (batch, cin, h, wd) = nchw("conv2d", self.shape(x))?;
        let (cout, wcin, kh, kw) = nchw("conv2d", self.shape(w))?;
        if wcin != cin || cfg.stride == 0 || h + 2 * cfg.padding < kh || wd + 2 * cfg.padding < kw {
            return Err(GraphError::Shape {
                op: "conv2d",
                detail: format!(
                    "input {:?} with kernel {:?}, stride {}, padding {}",
                    self.shape(x),
                    self.shape(w),
                    cfg.stride,
                    cfg.padding
                ),
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(GraphError::Shape {
                    op: "conv2d",
                    detail: format!("bias {:?} for {} output channels", self.shape(b), cout),
                });
            }
        }
        let geom = ConvGeom {
            batch,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            ho: (h + 2 * cfg.padding - kh) / cfg.stride + 1,
            wo: (wd + 2 * cfg.padding - kw) / cfg.stride + 1,
            stride: cfg.stride,
            pad: cfg.padding,
        };
        let (k, n, hw) = (geom.k(), geom.n(), geom.ho * geom.wo);
        let cols = geom.im2col(self.value(x).data());
        let mut outp = vec![S::zero(); cout * n];
        gemm(self.value(w).data(), false, &cols, false, cout, k, n, &mut outp, false);
        let mut out = vec![S::zero(); cout * n];
        let bias_vals = bias.map(|b| self.value(b).data().to_vec());
        for b in 0..batch {
            for co in 0..cout {
                let src = co * n + b * hw;
                let dst = (b * cout + co) * hw;
                let shift = bias_vals.as_ref().map_or(S::zero(), |bv| bv[co]);
                for i in 0..hw {
                    out[dst + i] = outp[src + i] + shift;
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.record(
            &inputs,
            Tensor::from_parts(vec![batch, cout, geom.ho, geom.wo], out),
            Conv2d { geom },
        )
    }

    /// Training-mode batch norm: normalizes with this batch's per-channel statistics,
    /// which are returned so the caller can fold them into running estimates.
    pub fn batchnorm2d_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchMoments<S>), GraphError> {
        let (batch, c_n, h, w) = nchw("batchnorm2d", self.shape(x))?;
        self.check_affine("batchnorm2d", gamma, beta, c_n)?;
        let plane = h * w;
        let count = batch * plane;
        let xd = self.value(x).data();
        let mut mean = vec![S::zero(); c_n];
        let mut var = vec![S::zero(); c_n];
        for b in 0..batch {
            for c in 0..c_n {
                let base = (b * c_n + c) * plane;
                mean[c] += xd[base..base + plane].iter().copied().sum::<S>();
            }
        }
        let nf = S::lit(count as f64);
        mean.iter_mut().for_each(|m| *m /= nf);
        for b in 0..batch {
            for c in 0..c_n {
                let base = (b * c_n + c) * plane;
                var[c] += xd[base..base + plane]
                    .iter()
                    .map(|&v| (v - mean[c]) * (v - mean[c]))
                    .sum::<S>();
            }
        }
        var.iter_mut().for_each(|v| *v /= nf);
        let invstd: Vec<S> = var.iter().map(|&v| S::one() / (v + S::lit(eps)).sqrt()).collect();
        let (out, xhat) = self.bn_apply(x, gamma, beta, &mean, &invstd, c_n, plane);
        let var_out = self.record(
            &[x, gamma, beta],
            out,
            BatchNormTrain {
                xhat,
                invstd,
                channels: c_n,
                plane,
            },
        )?;
        Ok((var_out, BatchMoments { mean, var, count }))
    }

    /// Inference-mode batch norm with fixed running statistics: an affine map of `x`.
    pub fn batchnorm2d_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<S>,
        running_var: &Tensor<S>,
        eps: f64,
    ) -> Result<Var, GraphError> {
        let (_, c_n, h, w) = nchw("batchnorm2d_eval", self.shape(x))?;
        self.check_affine("batchnorm2d_eval", gamma, beta, c_n)?;
        if running_mean.shape() != [c_n] || running_var.shape() != [c_n] {
            return Err(GraphError::Shape {
                op: "batchnorm2d_eval",
                detail: format!(
                    "running stats {:?}/{:?} for {} channels",
                    running_mean.shape(),
                    running_var.shape(),
                    c_n
                ),
            });
        }
        let invstd: Vec<S> = running_var
            .data()
            .iter()
            .map(|&v| S::one() / (v + S::lit(eps)).sqrt())
            .collect();
        let (out, xhat) = self.bn_apply(x, gamma, beta, running_mean.data(), &invstd, c_n, h * w);
        self.record(
            &[x, gamma, beta],
            out,
            BatchNormEval {
                xhat,
                invstd,
                channels: c_n,
                plane: h * w,
            },
        )
    }

    fn check_affine(&self, op: &'static str, gamma: Var, beta: Var, c_n: usize) -> Result<(), GraphError> {
        if self.shape(gamma) != [c_n] || self.shape(beta) != [c_n] {
            return Err(GraphError::Shape {
                op,
                detail: format!(
                    "gamma {:?} / beta {:?} for {} channels",
                    self.shape(gamma),
                    self.shape(beta),
                    c_n
                ),
            });
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[S],
        invstd: &[S],
        c_n: usize,
        plane: usize,
    ) -> (Tensor<S>, Vec<S>) {
        let xv = self.value(x);
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![S::zero(); xv.numel()];
        let mut out = vec![S::zero(); xv.numel()];
        let xd = xv.data();
        for chunk in 0..xv.numel() / plane.max(1) {
            let c = chunk % c_n;
            for i in chunk * plane..(chunk + 1) * plane {
                xhat[i] = (xd[i] - mean[c]) * invstd[c];
                out[i] = gd[c] * xhat[i] + bd[c];
            }
        }
        (Tensor::from_parts(xv.shape().to_vec(), out), xhat)
    }
}
