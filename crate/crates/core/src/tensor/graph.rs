//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and backward is a single reverse sweep. Every forward
//! result is checked for NaN/Inf and the offending operation is reported.

use super::kernels::{dot, matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    Abs(Var),
    Gelu(Var),
    Exp(Var),
    Ln(Var),
    Pow(Var, S),
    Clamp(Var, S, S),
    Sum(Var),
    SumAxis { x: Var, axis: usize },
    MatMul { a: Var, b: Var, shared_rhs: bool },
    Transpose(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<S>, rstd: Vec<S> },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Reshape(Var),
    CenterNormalize { x: Var, inv_norm: Vec<S> },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Abs(..) => "abs",
            Op::Gelu(..) => "gelu",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Pow(..) => "pow",
            Op::Clamp(..) => "clamp",
            Op::Sum(..) => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::MatMul { .. } => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Reshape(..) => "reshape",
            Op::CenterNormalize { .. } => "center_normalize",
        }
    }
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Computation graph for one forward/backward pass. Confined to one thread.
#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
}

/// Splits a shape around `axis` into (outer, len, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad)
    }

    // ---- elementwise -------------------------------------------------

    fn check_suffix(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(op, format!("{sa:?} with {sb:?}")));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<S>, f: impl Fn(S, S) -> S) -> Result<Var> {
        let name = op.name();
        self.check_suffix(name, a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let nb = bv.len();
        let data = av
            .data()
            .chunks(nb)
            .flat_map(|chunk| chunk.iter().zip(bv).map(|(&x, &y)| f(x, y)))
            .collect();
        let out = Tensor::from_vec(av.shape(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(out, op, rg)
    }

    /// Elementwise sum. `b` may match a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn unary(&mut self, x: Var, op: Op<S>, f: impl Fn(S) -> S) -> Result<Var> {
        let out = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -S::one())
    }

    pub fn add_scalar(&mut self, x: Var, c: S) -> Result<Var> {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (c, a) = (S::of(GELU_C), S::of(GELU_A));
        let half = S::of(0.5);
        self.unary(x, Op::Gelu(x), |v| {
            half * v * (S::one() + (c * (v + a * v * v * v)).tanh())
        })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Ln(x), |v| v.ln())
    }

    pub fn pow(&mut self, x: Var, p: S) -> Result<Var> {
        self.unary(x, Op::Pow(x, p), |v| v.powf(p))
    }

    /// Clamp into `[lo, hi]`; gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: S, hi: S) -> Result<Var> {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.max(lo).min(hi))
    }

    // ---- reductions --------------------------------------------------

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = S::of(self.value(x).numel() as f64);
        let s = self.sum(x)?;
        self.scale(s, S::one() / n)
    }

    /// Sum over `axis`, removing it (a rank-1 input yields shape `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xv[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let t = Tensor::from_vec(&out_shape, out)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::SumAxis { x, axis }, rg)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", format!("axis {axis}")))?;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, S::one() / S::of(len as f64))
    }

    // ---- linear algebra ----------------------------------------------

    /// Batched matrix product `[.., m, k] x [.., k, n]`. The right operand
    /// may also be a plain `[k, n]` matrix shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}: rank < 2")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}: inner extents")));
        }
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}: batch extents")));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![S::zero(); batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        if shared_rhs {
            matmul_acc(av, bv, &mut out, batch * m, k, n);
        } else {
            for bi in 0..batch {
                matmul_acc(
                    &av[bi * m * k..(bi + 1) * m * k],
                    &bv[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let t = Tensor::from_vec(&shape, out)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::MatMul { a, b, shared_rhs }, rg)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("transpose", format!("{shape:?}")));
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let out = transpose_last2(self.value(x).data(), r, c);
        let mut out_shape = shape.clone();
        let l = out_shape.len();
        out_shape.swap(l - 2, l - 1);
        let t = Tensor::from_vec(&out_shape, out)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Transpose(x), rg)
    }

    /// `x W + b` with `W: [in, out]`, `b: [out]`. A rank-1 `x` is treated
    /// as a single row and the result is rank 1.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = if self.shape(x).len() == 1 {
            let n = self.shape(x)[0];
            let row = self.reshape(x, &[1, n])?;
            let y = self.matmul(row, w)?;
            let m = self.shape(y)[1];
            self.reshape(y, &[m])?
        } else {
            self.matmul(x, w)?
        };
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // ---- normalisation -----------------------------------------------

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let mut mx = S::neg_infinity();
                for l in 0..len {
                    mx = mx.max(xv[idx(l)]);
                }
                let mut z = S::zero();
                for l in 0..len {
                    let e = (xv[idx(l)] - mx).exp();
                    out[idx(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[idx(l)] /= z;
                }
            }
        }
        let t = Tensor::from_vec(&shape, out)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Softmax { x, axis }, rg)
    }

    /// Layer normalisation over the last axis with affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("input {shape:?}, gain {:?}, bias {:?}", self.shape(gain), self.shape(bias)),
            ));
        }
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.len() / d;
        let inv_d = S::one() / S::of(d as f64);
        let eps = S::of(eps);
        let mut xhat = vec![S::zero(); xv.len()];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<S>() * inv_d;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() * inv_d;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mu) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let t = Tensor::from_vec(&shape, out)?;
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Subtracts the mean along the last axis and scales each slice to unit
    /// Euclidean norm. Slices with (numerically) zero spread map to zero.
    pub fn center_normalize(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        let xv = self.value(x).data();
        let rows = xv.len() / d;
        let inv_d = S::one() / S::of(d as f64);
        let mut out = vec![S::zero(); xv.len()];
        let mut inv_norm = vec![S::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<S>() * inv_d;
            let scale = row.iter().fold(S::zero(), |m, v| m.max(v.abs()));
            let norm = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>().sqrt();
            let floor = S::of(8.0 * d as f64) * S::epsilon() * scale;
            if norm <= floor || norm == S::zero() {
                continue;
            }
            let inv = S::one() / norm;
            inv_norm[r] = inv;
            for j in 0..d {
                out[r * d + j] = (row[j] - mu) * inv;
            }
        }
        let t = Tensor::from_vec(&shape, out)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::CenterNormalize { x, inv_norm }, rg)
    }

    // ---- shape -------------------------------------------------------

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", format!("{base:?} with {s:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let src = self.value(p).data();
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::from_vec(&shape, out)?;
        let rg = self.rg(parts);
        self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("axis {axis} [{start}, {}) of {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            out.extend_from_slice(&xv[s..s + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::from_vec(&out_shape, out)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Narrow { x, axis, start }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Reshape(x), rg)
    }

    // ---- backward ----------------------------------------------------

    /// Populates gradients of a scalar output with respect to every leaf
    /// that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.backward_from(vec![(loss, Tensor::ones(&shape))])
    }

    /// Reverse sweep seeded with explicit upstream gradients, used when the
    /// loss is evaluated in a separate graph.
    pub fn backward_from(&mut self, seeds: Vec<(Var, Tensor<S>)>) -> Result<()> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<S>>> = (0..n).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            if g.shape() != self.shape(v) {
                return Err(Error::shape(
                    "backward",
                    format!("seed {:?} for output {:?}", g.shape(), self.shape(v)),
                ));
            }
            accumulate(&mut grads[v.0], g)?;
            last = last.max(v.0 + 1);
        }
        for i in (0..last).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            if is_leaf {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    op: self.nodes[i].op.name(),
                });
            }
            for (v, dg) in self.input_grads(i, &g)? {
                if self.nodes[v.0].requires_grad {
                    accumulate(&mut grads[v.0], dg)?;
                }
            }
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { op: "backward" });
        }
        self.grads = grads;
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &Tensor<S>) -> Result<Vec<(Var, Tensor<S>)>> {
        let node = &self.nodes[i];
        let gd = g.data();
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => {
                vec![(*a, g.clone()), (*b, self.reduce_to(*b, gd))]
            }
            Op::Sub(a, b) => {
                let neg: Vec<S> = gd.iter().map(|&v| -v).collect();
                vec![(*a, g.clone()), (*b, self.reduce_to(*b, &neg))]
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let nb = bv.len();
                let ga: Vec<S> = gd
                    .chunks(nb)
                    .flat_map(|c| c.iter().zip(bv).map(|(&x, &y)| x * y))
                    .collect();
                let gb: Vec<S> = gd.iter().zip(av).map(|(&x, &y)| x * y).collect();
                vec![
                    (*a, Tensor::from_vec(g.shape(), ga)?),
                    (*b, self.reduce_to(*b, &gb)),
                ]
            }
            Op::Scale(x, c) => vec![(*x, g.map(|v| v * *c))],
            Op::AddScalar(x) => vec![(*x, g.clone())],
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| {
                        if v > S::zero() {
                            gv
                        } else if v < S::zero() {
                            -gv
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                vec![(*x, Tensor::from_vec(g.shape(), d)?)]
            }
            Op::Gelu(x) => {
                let (c, a) = (S::of(GELU_C), S::of(GELU_A));
                let half = S::of(0.5);
                let three = S::of(3.0);
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| {
                        let t = (c * (v + a * v * v * v)).tanh();
                        let dt = (S::one() - t * t) * c * (S::one() + three * a * v * v);
                        gv * (half * (S::one() + t) + half * v * dt)
                    })
                    .collect();
                vec![(*x, Tensor::from_vec(g.shape(), d)?)]
            }
            Op::Exp(x) => {
                let yv = node.value.data();
                let d = gd.iter().zip(yv).map(|(&a, &b)| a * b).collect();
                vec![(*x, Tensor::from_vec(g.shape(), d)?)]
            }
            Op::Ln(x) => {
                let xv = self.value(*x).data();
                let d = gd.iter().zip(xv).map(|(&a, &b)| a / b).collect();
                vec![(*x, Tensor::from_vec(g.shape(), d)?)]
            }
            Op::Pow(x, p) => {
                let xv = self.value(*x).data();
                let p = *p;
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| {
                        if p == S::zero() {
                            S::zero()
                        } else {
                            gv * p * v.powf(p - S::one())
                        }
                    })
                    .collect();
                vec![(*x, Tensor::from_vec(g.shape(), d)?)]
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| if v < *lo || v > *hi { S::zero() } else { gv })
                    .collect();
                vec![(*x, Tensor::from_vec(g.shape(), d)?)]
            }
            Op::Sum(x) => {
                let shape = self.shape(*x);
                vec![(*x, Tensor::full(shape, gd[0]))]
            }
            Op::SumAxis { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let (outer, len, inner) = split_axis(&shape, *axis);
                let mut d = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        d.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                vec![(*x, Tensor::from_vec(&shape, d)?)]
            }
            Op::MatMul { a, b, shared_rhs } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch: usize = sa[..sa.len() - 2].iter().product();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut res = Vec::with_capacity(2);
                if self.requires_grad(*a) {
                    let mut da = vec![S::zero(); av.len()];
                    if *shared_rhs {
                        matmul_bt_acc(gd, bv, &mut da, batch * m, n, k);
                    } else {
                        for bi in 0..batch {
                            matmul_bt_acc(
                                &gd[bi * m * n..(bi + 1) * m * n],
                                &bv[bi * k * n..(bi + 1) * k * n],
                                &mut da[bi * m * k..(bi + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                    res.push((*a, Tensor::from_vec(&sa, da)?));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![S::zero(); bv.len()];
                    if *shared_rhs {
                        matmul_at_acc(av, gd, &mut db, batch * m, k, n);
                    } else {
                        for bi in 0..batch {
                            matmul_at_acc(
                                &av[bi * m * k..(bi + 1) * m * k],
                                &gd[bi * m * n..(bi + 1) * m * n],
                                &mut db[bi * k * n..(bi + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                    res.push((*b, Tensor::from_vec(&sb, db)?));
                }
                res
            }
            Op::Transpose(x) => {
                let shape = self.shape(*x).to_vec();
                let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                // g has the transposed layout [.., c, r].
                let d = transpose_last2(gd, c, r);
                vec![(*x, Tensor::from_vec(&shape, d)?)]
            }
            Op::Softmax { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let (outer, len, inner) = split_axis(&shape, *axis);
                let yv = node.value.data();
                let mut d = vec![S::zero(); yv.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let s: S = (0..len).map(|l| gd[idx(l)] * yv[idx(l)]).sum();
                        for l in 0..len {
                            d[idx(l)] = yv[idx(l)] * (gd[idx(l)] - s);
                        }
                    }
                }
                vec![(*x, Tensor::from_vec(&shape, d)?)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let shape = self.shape(*x).to_vec();
                let d = *shape.last().unwrap();
                let rows = gd.len() / d;
                let gv = self.value(*gain).data();
                let inv_d = S::one() / S::of(d as f64);
                let mut dx = vec![S::zero(); gd.len()];
                let mut dgain = vec![S::zero(); d];
                let mut dbias = vec![S::zero(); d];
                let mut dxhat = vec![S::zero(); d];
                for r in 0..rows {
                    let gr = &gd[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    for j in 0..d {
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                        dxhat[j] = gr[j] * gv[j];
                    }
                    let m1 = dxhat.iter().copied().sum::<S>() * inv_d;
                    let m2 = dot(&dxhat, hr) * inv_d;
                    for j in 0..d {
                        dx[r * d + j] = rstd[r] * (dxhat[j] - m1 - hr[j] * m2);
                    }
                }
                vec![
                    (*x, Tensor::from_vec(&shape, dx)?),
                    (*gain, Tensor::from_vec(&[d], dgain)?),
                    (*bias, Tensor::from_vec(&[d], dbias)?),
                ]
            }
            Op::CenterNormalize { x, inv_norm } => {
                let shape = self.shape(*x).to_vec();
                let d = *shape.last().unwrap();
                let yv = node.value.data();
                let inv_d = S::one() / S::of(d as f64);
                let mut dx = vec![S::zero(); gd.len()];
                for (r, &inv) in inv_norm.iter().enumerate() {
                    if inv == S::zero() {
                        continue;
                    }
                    let gr = &gd[r * d..(r + 1) * d];
                    let yr = &yv[r * d..(r + 1) * d];
                    let proj = dot(gr, yr);
                    let dc: Vec<S> = gr
                        .iter()
                        .zip(yr)
                        .map(|(&gv, &yv)| (gv - yv * proj) * inv)
                        .collect();
                    let mean = dc.iter().copied().sum::<S>() * inv_d;
                    for j in 0..d {
                        dx[r * d + j] = dc[j] - mean;
                    }
                }
                vec![(*x, Tensor::from_vec(&shape, dx)?)]
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape().to_vec();
                let (outer, total, inner) = split_axis(&shape, *axis);
                let mut res = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let len = ps[*axis];
                    if self.requires_grad(p) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            d.extend_from_slice(&gd[s..s + len * inner]);
                        }
                        res.push((p, Tensor::from_vec(&ps, d)?));
                    }
                    offset += len;
                }
                res
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.shape(*x).to_vec();
                let (outer, full, inner) = split_axis(&shape, *axis);
                let len = node.value.shape()[*axis];
                let mut d = vec![S::zero(); outer * full * inner];
                for o in 0..outer {
                    let s = (o * full + start) * inner;
                    d[s..s + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, Tensor::from_vec(&shape, d)?)]
            }
            Op::Reshape(x) => vec![(*x, g.clone().reshape(self.shape(*x))?)],
        };
        Ok(out)
    }

    /// Sums a full-size gradient down to the (suffix) shape of `v`.
    fn reduce_to(&self, v: Var, g: &[S]) -> Tensor<S> {
        let shape = self.shape(v).to_vec();
        let nb: usize = shape.iter().product();
        if nb == g.len() {
            return Tensor::from_vec(&shape, g.to_vec()).expect("shape checked in forward");
        }
        let mut d = vec![S::zero(); nb];
        for chunk in g.chunks(nb) {
            for (a, &b) in d.iter_mut().zip(chunk) {
                *a += b;
            }
        }
        Tensor::from_vec(&shape, d).expect("shape checked in forward")
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, g: Tensor<S>) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn transpose_last2<S: Scalar>(x: &[S], r: usize, c: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for (b, block) in x.chunks(r * c).enumerate() {
        let dst = &mut out[b * r * c..(b + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = block[i * c + j];
            }
        }
    }
    out
}
