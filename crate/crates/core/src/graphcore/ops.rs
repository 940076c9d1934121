//! Elementwise, reduction, shape, and matrix ops recorded on a [`Graph`].

use crate::graphcore::graph::{BackwardCtx, Graph, Op, Var};
use crate::graphcore::tensor::{gemm, Tensor};
use crate::graphcore::GraphError;
use crate::scalar::Scalar;

// ── Broadcasting ─────────────────────────────────────────────────────

/// How one operand of a binary op is indexed against the output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Full,
    /// Operand matches the output's trailing dims and repeats over the leading one.
    Rows(usize),
    Scalar,
}

impl Bcast {
    #[inline]
    fn at(self, i: usize) -> usize {
        match self {
            Bcast::Full => i,
            Bcast::Rows(period) => i % period,
            Bcast::Scalar => 0,
        }
    }

    /// Sums an output-shaped gradient back down to the operand's shape.
    fn reduce<S: Scalar>(self, grad: Vec<S>, shape: &[usize]) -> Tensor<S> {
        match self {
            Bcast::Full => Tensor::from_parts(shape.to_vec(), grad),
            Bcast::Rows(period) => {
                let mut out = vec![S::zero(); period];
                for row in grad.chunks(period) {
                    for (o, &g) in out.iter_mut().zip(row) {
                        *o += g;
                    }
                }
                Tensor::from_parts(shape.to_vec(), out)
            }
            Bcast::Scalar => {
                Tensor::from_parts(shape.to_vec(), vec![grad.into_iter().sum()])
            }
        }
    }
}

fn bcast_mode(own: &[usize], out: &[usize]) -> Bcast {
    let numel: usize = own.iter().product();
    if own == out {
        Bcast::Full
    } else if numel == 1 {
        Bcast::Scalar
    } else {
        Bcast::Rows(numel)
    }
}

/// Output shape of a broadcasting binary op, or a shape error.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>, GraphError> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        return Ok(a.to_vec());
    }
    if nb == 1 {
        return Ok(a.to_vec());
    }
    if na == 1 {
        return Ok(b.to_vec());
    }
    if a.len() >= 1 && &a[1..] == b {
        return Ok(a.to_vec());
    }
    if b.len() >= 1 && &b[1..] == a {
        return Ok(b.to_vec());
    }
    Err(GraphError::Shape {
        op,
        detail: format!("cannot broadcast {:?} with {:?}", a, b),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

struct Binary {
    kind: BinaryKind,
    ma: Bcast,
    mb: Bcast,
}

impl<S: Scalar> Op<S> for Binary {
    fn name(&self) -> &'static str {
        match self.kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_, S>) -> Vec<Option<Tensor<S>>> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        let g = ctx.grad.data();
        let ga = ctx.needs[0].then(|| {
            let raw: Vec<S> = match self.kind {
                BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
                BinaryKind::Mul => g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * b.data()[self.mb.at(i)])
                    .collect(),
            };
            self.ma.reduce(raw, a.shape())
        });
        let gb = ctx.needs[1].then(|| {
            let raw: Vec<S> = match self.kind {
                BinaryKind::Add => g.to_vec(),
                BinaryKind::Sub => g.iter().map(|&gi| -gi).collect(),
                BinaryKind::Mul => g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * a.data()[self.ma.at(i)])
                    .collect(),
            };
            self.mb.reduce(raw, b.shape())
        });
        vec![ga, gb]
    }
}

// ── Unary elementwise ────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
enum UnaryKind<S> {
    Relu,
    Sigmoid,
    Exp,
    Log,
    Square,
    Affine { scale: S, shift: S },
    Clamp { lo: S, hi: S },
}

struct Unary<S> {
    kind: UnaryKind<S>,
}

impl<S: Scalar> UnaryKind<S> {
    fn apply(self, x: S) -> S {
        match self {
            UnaryKind::Relu => x.max(S::zero()),
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Square => x * x,
            UnaryKind::Affine { scale, shift } => scale * x + shift,
            UnaryKind::Clamp { lo, hi } => x.max(lo).min(hi),
        }
    }

    /// d(out)/d(in) given the input and the output.
    fn slope(self, x: S, y: S) -> S {
        match self {
            UnaryKind::Relu => {
                if x > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            UnaryKind::Sigmoid => y * (S::one() - y),
            UnaryKind::Exp => y,
            UnaryKind::Log => S::one() / x,
            UnaryKind::Square => x + x,
            UnaryKind::Affine { scale, .. } => scale,
            UnaryKind::Clamp { lo, hi } => {
                if x >= lo && x <= hi {
                    S::one()
                } else {
                    S::zero()
                }
            }
        }
    }
}

/// Logistic function, evaluated without overflow for large |x|.
#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

impl<S: Scalar> Op<S> for Unary<S> {
    fn name(&self) -> &'static str {
        match self.kind {
            UnaryKind::Relu => "relu",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Square => "square",
            UnaryKind::Affine { .. } => "affine",
            UnaryKind::Clamp { .. } => "clamp",
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_, S>) -> Vec<Option<Tensor<S>>> {
        let x = ctx.inputs[0];
        let data = x
            .data()
            .iter()
            .zip(ctx.output.data())
            .zip(ctx.grad.data())
            .map(|((&xi, &yi), &gi)| gi * self.kind.slope(xi, yi))
            .collect();
        vec![Some(Tensor::from_parts(x.shape().to_vec(), data))]
    }
}

// ── Reductions and shape ops ─────────────────────────────────────────

struct SumAll {
    scale: f64,
}

impl<S: Scalar> Op<S> for SumAll {
    fn name(&self) -> &'static str {
        if self.scale == 1.0 {
            "sum"
        } else {
            "mean"
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_, S>) -> Vec<Option<Tensor<S>>> {
        let g = ctx.grad.item() * S::lit(self.scale);
        vec![Some(Tensor::full(ctx.inputs[0].shape(), g))]
    }
}

struct Reshape;

impl<S: Scalar> Op<S> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, S>) -> Vec<Option<Tensor<S>>> {
        vec![Some(Tensor::from_parts(
            ctx.inputs[0].shape().to_vec(),
            ctx.grad.data().to_vec(),
        ))]
    }
}

/// `(outer, axis_len, inner)` factorisation of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

struct Concat {
    axis: usize,
}

impl<S: Scalar> Op<S> for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, S>) -> Vec<Option<Tensor<S>>> {
        let (outer, total, inner) = split_axis(ctx.output.shape(), self.axis);
        let g = ctx.grad.data();
        let mut offset = 0;
        let mut out = Vec::with_capacity(ctx.inputs.len());
        for (input, &need) in ctx.inputs.iter().zip(&ctx.needs) {
            let len = input.shape()[self.axis];
            if need {
                let mut data = Vec::with_capacity(input.numel());
                for o in 0..outer {
                    let start = (o * total + offset) * inner;
                    data.extend_from_slice(&g[start..start + len * inner]);
                }
                out.push(Some(Tensor::from_parts(input.shape().to_vec(), data)));
            } else {
                out.push(None);
            }
            offset += len;
        }
        out
    }
}

struct Slice {
    axis: usize,
    start: usize,
}

impl<S: Scalar> Op<S> for Slice {
    fn name(&self) -> &'static str {
        "slice"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, S>) -> Vec<Option<Tensor<S>>> {
        let input = ctx.inputs[0];
        let (outer, total, inner) = split_axis(input.shape(), self.axis);
        let len = ctx.output.shape()[self.axis];
        let mut data = vec![S::zero(); input.numel()];
        let g = ctx.grad.data();
        for o in 0..outer {
            let dst = (o * total + self.start) * inner;
            let src = o * len * inner;
            data[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
        }
        vec![Some(Tensor::from_parts(input.shape().to_vec(), data))]
    }
}

// ── Matrix product ───────────────────────────────────────────────────

struct MatMul;

impl<S: Scalar> Op<S> for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, S>) -> Vec<Option<Tensor<S>>> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let g = ctx.grad.data();
        let ga = ctx.needs[0].then(|| {
            let mut out = vec![S::zero(); m * k];
            gemm(g, false, b.data(), true, m, n, k, &mut out, false);
            Tensor::from_parts(vec![m, k], out)
        });
        let gb = ctx.needs[1].then(|| {
            let mut out = vec![S::zero(); k * n];
            gemm(a.data(), true, g, false, k, m, n, &mut out, false);
            Tensor::from_parts(vec![k, n], out)
        });
        vec![ga, gb]
    }
}

// ── Graph methods ────────────────────────────────────────────────────

impl<S: Scalar> Graph<S> {
    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var, GraphError> {
        let name = <Binary as Op<S>>::name(&Binary {
            kind,
            ma: Bcast::Full,
            mb: Bcast::Full,
        });
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(name, &sa, &sb)?;
        let (ma, mb) = (bcast_mode(&sa, &out_shape), bcast_mode(&sb, &out_shape));
        let numel: usize = out_shape.iter().product();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data: Vec<S> = (0..numel)
            .map(|i| {
                let (x, y) = (da[ma.at(i)], db[mb.at(i)]);
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                }
            })
            .collect();
        self.record(
            &[a, b],
            Tensor::from_parts(out_shape, data),
            Binary { kind, ma, mb },
        )
    }

    /// Elementwise sum; `b` may broadcast over `a`'s leading dimension or be a scalar (and vice versa).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.binary(BinaryKind::Mul, a, b)
    }

    fn unary(&mut self, kind: UnaryKind<S>, x: Var) -> Result<Var, GraphError> {
        let value = self.value(x).map(|v| kind.apply(v));
        self.record(&[x], value, Unary { kind })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, GraphError> {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, GraphError> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, GraphError> {
        self.unary(UnaryKind::Exp, x)
    }

    /// Natural log; non-positive inputs surface as a non-finite error.
    pub fn log(&mut self, x: Var) -> Result<Var, GraphError> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var, GraphError> {
        self.unary(UnaryKind::Square, x)
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: S, shift: S) -> Result<Var, GraphError> {
        self.unary(UnaryKind::Affine { scale, shift }, x)
    }

    pub fn scale(&mut self, x: Var, scale: S) -> Result<Var, GraphError> {
        self.affine(x, scale, S::zero())
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: S, hi: S) -> Result<Var, GraphError> {
        self.unary(UnaryKind::Clamp { lo, hi }, x)
    }

    /// Sum of all entries, as a 0-d tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var, GraphError> {
        let total = self.value(x).sum();
        self.record(&[x], Tensor::scalar(total), SumAll { scale: 1.0 })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, GraphError> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(GraphError::Shape {
                op: "mean",
                detail: "empty tensor".into(),
            });
        }
        let scale = 1.0 / n as f64;
        let total = self.value(x).sum() * S::lit(scale);
        self.record(&[x], Tensor::scalar(total), SumAll { scale })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, GraphError> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        self.record(&[x], value, Reshape)
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, GraphError> {
        let Some(&first) = parts.first() else {
            return Err(GraphError::Shape {
                op: "concat",
                detail: "no inputs".into(),
            });
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(GraphError::Shape {
                op: "concat",
                detail: format!("axis {} out of range for {:?}", axis, base),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(GraphError::Shape {
                    op: "concat",
                    detail: format!("{:?} vs {:?} on axis {}", base, s, axis),
                });
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        self.record(parts, Tensor::from_parts(out_shape, data), Concat { axis })
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var, GraphError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(GraphError::Shape {
                op: "slice",
                detail: format!("{}..{} on axis {} of {:?}", start, end, axis, shape),
            });
        }
        let (outer, total, inner) = split_axis(&shape, axis);
        let len = end - start;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * total + start) * inner;
            data.extend_from_slice(&src[s..s + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.record(&[x], Tensor::from_parts(out_shape, data), Slice { axis, start })
    }

    /// 2-D matrix product `(m, k) x (k, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(GraphError::Shape {
                op: "matmul",
                detail: format!("{:?} x {:?}", sa, sb),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        gemm(self.value(a).data(), false, self.value(b).data(), false, m, k, n, &mut out, false);
        self.record(&[a, b], Tensor::from_parts(vec![m, n], out), MatMul)
    }

    /// `x @ w + b` for `x: (batch, in)`, `w: (in, out)`, `b: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, GraphError> {
        let h = self.matmul(x, w)?;
        self.add(h, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = g.constant(t(&[2, 3], &[1.0, -2.0, 3.5, 0.25, 7.0, -1.0]));
        let p = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(p), g.value(a));
    }

    #[test]
    fn sigmoid_symmetry_point() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).item(), 0.5);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 2]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(g.log(x), Err(GraphError::NonFinite { op: "log", .. })));
        let big = g.constant(t(&[1], &[1000.0]));
        assert!(g.exp(big).is_err());
    }

    #[test]
    fn broadcast_rows_and_scalar() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let row = g.constant(t(&[2], &[10.0, 20.0]));
        let s = g.constant(Tensor::scalar(2.0));
        let r = g.add(a, row).unwrap();
        assert_eq!(g.value(r).data(), &[11.0, 22.0, 13.0, 24.0]);
        let m = g.mul(s, a).unwrap();
        assert_eq!(g.value(m).data(), &[2.0, 4.0, 6.0, 8.0]);
        let d = g.sub(row, a).unwrap();
        assert_eq!(g.value(d).data(), &[9.0, 18.0, 7.0, 16.0]);
    }

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[2], &[1.0, 2.0]));
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn one_factor_frozen() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[2], &[1.0, 2.0]));
        let frozen = g.stop_grad(w);
        let prod = g.mul(frozen, w).unwrap();
        let loss = g.sum(prod).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[1], &[3.0]));
        let loss = g.sum(w).unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(GraphError::BackwardTwice)));
        g.reset_sweep();
        assert!(g.backward(loss).is_ok());
    }

    #[test]
    fn disconnected_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[2], &[1.0, 2.0]));
        let other = g.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let loss = g.sum(w).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(other).is_none());
        assert_eq!(grads.wrt(&g, other).data(), &[0.0; 3]);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let back = g.slice(c, 1, 1, 3).unwrap();
        assert_eq!(g.value(back), g.value(b));
    }
}
