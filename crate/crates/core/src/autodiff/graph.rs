//! Tape-recorded computation graph with reverse-mode differentiation.
//!
//! Every operation produces a node holding its value. A node that depends on a
//! gradient-requiring input also records how it was produced; nodes built only
//! from constants are stored as plain leaves, so inference graphs carry no
//! backward bookkeeping.

use std::collections::{BTreeMap, HashMap};

use crate::scalar::Scalar;

use super::tensor::numel;
use super::{ParamStore, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Padding mode of [`Graph::conv1d_depthwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvPadding {
    /// Left-pad by `width - 1`; output step `l` sees inputs `..=l`.
    Causal,
    /// Centered zero padding of `(width - 1) / 2` on the left.
    Same,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    SumAxis { input: Var, axis: usize },
    MeanAxis { input: Var, axis: usize },
    MaxAxis { input: Var, argmax: Vec<usize> },
    Conv1d { input: Var, kernel: Var, offset: usize },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Scale(Var, S),
    Reshape(Var),
    Transpose(Var),
    Gather { input: Var, index: Vec<Option<usize>> },
    Softmax(Var),
    Scan { u: Var, delta: Var, a: Var, b: Var, c: Var, states: Vec<S>, decays: Vec<S> },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Computation tape.
///
/// A graph optionally borrows a [`ParamStore`]; [`Graph::param`] inserts each
/// named parameter at most once so repeated uses share one node.
pub struct Graph<'p, S: Scalar> {
    params: Option<&'p ParamStore<S>>,
    trainable: bool,
    param_vars: HashMap<String, Var>,
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Graph<'_, S> {
    fn default() -> Self {
        Self::new()
    }
}

/// How an operand is indexed when broadcast into an output shape.
#[derive(Debug, Clone)]
enum Bcast {
    Same,
    /// Operand matches a suffix of the output: `i % len`.
    Tile(usize),
    /// Operand matches a prefix followed by unit dims: `i / inner`.
    Repeat(usize),
    General(Vec<usize>),
}

/// Calls `f(out_index, operand_index)` for every output position, walking
/// tiles and repeats in blocks instead of dividing per element.
#[inline]
fn for_each_index(plan: &Bcast, n: usize, mut f: impl FnMut(usize, usize)) {
    match plan {
        Bcast::Same => (0..n).for_each(|i| f(i, i)),
        Bcast::Tile(len) => {
            for base in (0..n).step_by((*len).max(1)) {
                (0..*len).for_each(|j| f(base + j, j));
            }
        }
        Bcast::Repeat(inner) => {
            for (k, base) in (0..n).step_by((*inner).max(1)).enumerate() {
                (0..*inner).for_each(|j| f(base + j, k));
            }
        }
        Bcast::General(map) => map.iter().enumerate().for_each(|(i, &m)| f(i, m)),
    }
}

fn broadcast_plan(out: &[usize], inp: &[usize]) -> Option<Bcast> {
    if out == inp {
        return Some(Bcast::Same);
    }
    if inp.len() > out.len() {
        return None;
    }
    let pad = out.len() - inp.len();
    let padded: Vec<usize> = std::iter::repeat(1).take(pad).chain(inp.iter().copied()).collect();
    if padded.iter().zip(out).any(|(&i, &o)| i != o && i != 1) {
        return None;
    }
    // suffix match after leading unit dims
    let first_non_unit = padded.iter().position(|&d| d != 1).unwrap_or(padded.len());
    if padded[first_non_unit..] == out[first_non_unit..] {
        return Some(Bcast::Tile(numel(inp)));
    }
    // prefix match followed by unit dims
    let last_non_unit = padded.iter().rposition(|&d| d != 1).map_or(0, |p| p + 1);
    if padded[..last_non_unit] == out[..last_non_unit] {
        return Some(Bcast::Repeat(numel(&out[last_non_unit..])));
    }
    let mut in_strides = vec![0usize; out.len()];
    let mut acc = 1;
    for d in (0..out.len()).rev() {
        in_strides[d] = if padded[d] == 1 { 0 } else { acc };
        acc *= padded[d];
    }
    let total = numel(out);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; out.len()];
    for _ in 0..total {
        map.push(idx.iter().zip(&in_strides).map(|(i, s)| i * s).sum());
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Some(Bcast::General(map))
}

fn binary_plan(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<(Vec<usize>, Bcast, Bcast), TensorError> {
    if let Some(pb) = broadcast_plan(a, b) {
        return Ok((a.to_vec(), Bcast::Same, pb));
    }
    if let Some(pa) = broadcast_plan(b, a) {
        return Ok((b.to_vec(), pa, Bcast::Same));
    }
    Err(TensorError::Shape { op, detail: format!("cannot broadcast {a:?} with {b:?}") })
}

/// (outer, len, inner) decomposition of a shape around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

#[inline]
fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[inline]
fn softplus<S: Scalar>(x: S) -> S {
    // log(1 + e^x) without overflow
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

impl<'p, S: Scalar> Graph<'p, S> {
    pub fn new() -> Self {
        Self {
            params: None,
            trainable: false,
            param_vars: HashMap::new(),
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    /// Graph reading parameters from `params`. With `trainable` the parameter
    /// nodes require gradients.
    pub fn with_params(params: &'p ParamStore<S>, trainable: bool) -> Self {
        Self { params: Some(params), trainable, ..Self::new() }
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Number of nodes, including leaves.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded (differentiable) operations.
    pub fn tape_len(&self) -> usize {
        self.nodes.iter().filter(|n| !matches!(n.op, Op::Leaf)).count()
    }

    fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf that receives gradients (see [`Graph::grad`]).
    pub fn var(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    pub fn scalar(&mut self, value: S) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn param(&mut self, name: &str) -> Result<Var, TensorError> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let store = self.params.ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let value = store.get(name)?.clone();
        let v = self.leaf(value, self.trainable);
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    // ----------------------------------------------------------------- ops

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape { op: "matmul", detail: format!("{sa:?} x {sb:?}") });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", value, Op::MatMul(a, b), rg)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Var, TensorError> {
        let (shape, pa, pb) = binary_plan(name, self.shape(a), self.shape(b))?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let n = numel(&shape);
        let mut out: Vec<S> = Vec::with_capacity(n);
        match (&pa, &pb) {
            (Bcast::Same, Bcast::Same) => out.extend(da.iter().zip(db).map(|(&x, &y)| f(x, y))),
            (Bcast::Same, p) => for_each_index(p, n, |i, j| out.push(f(da[i], db[j]))),
            (p, _) => for_each_index(p, n, |i, j| out.push(f(da[j], db[i]))),
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(name, value, op, rg)
    }

    /// Elementwise sum; the smaller operand broadcasts (right-aligned, unit
    /// dims expand).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = self
            .nodes
            .get(inputs.first().map_or(usize::MAX, |v| v.0))
            .ok_or(TensorError::Shape { op: "concat", detail: "no inputs".into() })?
            .value
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(TensorError::Shape { op: "concat", detail: format!("axis {axis} out of range for {first:?}") });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !ok {
                return Err(TensorError::Shape { op: "concat", detail: format!("{s:?} vs {first:?} along axis {axis}") });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push("concat", value, Op::Concat { inputs: inputs.to_vec(), axis }, rg)
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(TensorError::Shape { op: "slice", detail: format!("{start}..{end} on axis {axis} of {s:?}") });
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let width = end - start;
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&data[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = width;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        self.push("slice", value, Op::Slice { input: x, axis, start }, rg)
    }

    fn reduce_shape(&self, op: &'static str, x: Var, axis: usize) -> Result<(Vec<usize>, usize, usize, usize), TensorError> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(TensorError::Shape { op, detail: format!("axis {axis} out of range for {s:?}") });
        }
        let (outer, len, inner) = axis_split(s, axis);
        let mut shape = s.to_vec();
        shape.remove(axis);
        Ok((shape, outer, len, inner))
    }

    pub fn sum_over_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let (shape, outer, len, inner) = self.reduce_shape("sum_over_axis", x, axis)?;
        let data = self.value(x).data();
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &data[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc = *acc + v;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        self.push("sum_over_axis", value, Op::SumAxis { input: x, axis }, rg)
    }

    pub fn mean_over_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let summed = self.sum_over_axis(x, axis)?;
        let len = self.shape(x)[axis];
        let inv = S::one() / S::lit(len as f64);
        let node = &mut self.nodes[summed.0];
        for v in node.value.data_mut() {
            *v = *v * inv;
        }
        if node.requires_grad {
            node.op = Op::MeanAxis { input: x, axis };
        }
        Ok(summed)
    }

    pub fn max_over_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let (shape, outer, len, inner) = self.reduce_shape("max_over_axis", x, axis)?;
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * len * inner + i;
                for l in 1..len {
                    let idx = (o * len + l) * inner + i;
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        self.push("max_over_axis", value, Op::MaxAxis { input: x, argmax }, rg)
    }

    /// Depthwise 1-D convolution over the middle axis of `[batch, len, channels]`
    /// with a `[channels, width]` kernel and zero padding.
    pub fn conv1d_depthwise(&mut self, x: Var, kernel: Var, padding: ConvPadding) -> Result<Var, TensorError> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 3 || sk.len() != 2 || sk[0] != sx[2] {
            return Err(TensorError::Shape { op: "conv1d_depthwise", detail: format!("input {sx:?}, kernel {sk:?}") });
        }
        let (bsz, len, ch) = (sx[0], sx[1], sx[2]);
        let width = sk[1];
        let offset = match padding {
            ConvPadding::Causal => width - 1,
            ConvPadding::Same => (width - 1) / 2,
        };
        let (xd, kd) = (self.value(x).data(), self.value(kernel).data());
        let mut out = vec![S::zero(); bsz * len * ch];
        for b in 0..bsz {
            for l in 0..len {
                let orow = &mut out[(b * len + l) * ch..(b * len + l + 1) * ch];
                for j in 0..width {
                    let src = l as isize + j as isize - offset as isize;
                    if src < 0 || src >= len as isize {
                        continue;
                    }
                    let irow = &xd[(b * len + src as usize) * ch..(b * len + src as usize + 1) * ch];
                    for c in 0..ch {
                        orow[c] = orow[c] + kd[c * width + j] * irow[c];
                    }
                }
            }
        }
        let value = Tensor::new(sx, out)?;
        let rg = self.rg(x) || self.rg(kernel);
        self.push("conv1d_depthwise", value, Op::Conv1d { input: x, kernel, offset }, rg)
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Result<Var, TensorError> {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())?;
        let rg = self.rg(x);
        self.push(name, value, op, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary("tanh", x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary("relu", x, |v| v.max(S::zero()), Op::Relu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary("softplus", x, softplus, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary("exp", x, |v| v.exp(), Op::Exp(x))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, factor: S) -> Result<Var, TensorError> {
        self.unary("elementwise_scale", x, |v| v * factor, Op::Scale(x, factor))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.sigmoid(x)?;
        self.mul(x, s)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        self.push("reshape", value, Op::Reshape(x), rg)
    }

    /// Transpose of a 2-D array.
    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Shape { op: "transpose", detail: format!("{s:?} is not 2-D") });
        }
        let (r, c) = (s[0], s[1]);
        let d = self.value(x).data();
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        let rg = self.rg(x);
        self.push("transpose", value, Op::Transpose(x), rg)
    }

    /// Selects rows along axis 0; `None` yields a zero row.
    pub fn gather_rows(&mut self, x: Var, index: &[Option<usize>]) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || index.is_empty() || index.iter().flatten().any(|&i| i >= s[0]) {
            return Err(TensorError::Shape { op: "gather_rows", detail: format!("index {index:?} into {s:?}") });
        }
        let row = numel(&s[1..]);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * row);
        for idx in index {
            match idx {
                Some(i) => out.extend_from_slice(&d[i * row..(i + 1) * row]),
                None => out.extend(std::iter::repeat(S::zero()).take(row)),
            }
        }
        let mut shape = s;
        shape[0] = index.len();
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        self.push("gather_rows", value, Op::Gather { input: x, index: index.to_vec() }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        let inner = *s.last().ok_or(TensorError::Shape { op: "softmax", detail: "scalar input".into() })?;
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(d.len());
        for row in d.chunks(inner) {
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let start = out.len();
            let mut total = S::zero();
            for &v in row {
                let e = (v - m).exp();
                total = total + e;
                out.push(e);
            }
            for v in &mut out[start..] {
                *v = *v / total;
            }
        }
        let value = Tensor::new(s, out)?;
        let rg = self.rg(x);
        self.push("softmax", value, Op::Softmax(x), rg)
    }

    /// Selective state-space scan with zero-order-hold discretization:
    /// `h_t = exp(Δ_t A) h_{t-1} + Δ_t B_t u_t`, `y_t = C_t · h_t`, `h_0 = 0`.
    ///
    /// Shapes: `u`, `delta`: `[batch, len, inner]`; `a`: `[inner, state]`;
    /// `b`, `c`: `[batch, len, state]`. Output: `[batch, len, inner]`.
    pub fn selective_scan(&mut self, u: Var, delta: Var, a: Var, b: Var, c: Var) -> Result<Var, TensorError> {
        let su = self.shape(u).to_vec();
        let (sd, sa, sb, sc) = (self.shape(delta), self.shape(a), self.shape(b), self.shape(c));
        let ok = su.len() == 3
            && sd == su.as_slice()
            && sa.len() == 2
            && sa[0] == su[2]
            && sb.len() == 3
            && sb[..2] == su[..2]
            && sb[2] == sa[1]
            && sc == sb;
        if !ok {
            return Err(TensorError::Shape {
                op: "selective_scan",
                detail: format!("u {su:?}, delta {sd:?}, A {sa:?}, B {sb:?}, C {sc:?}"),
            });
        }
        let (bsz, len, inner, state) = (su[0], su[1], su[2], sa[1]);
        let (ud, dd, ad, bd, cd) = (
            self.value(u).data(),
            self.value(delta).data(),
            self.value(a).data(),
            self.value(b).data(),
            self.value(c).data(),
        );
        let rg = [u, delta, a, b, c].iter().any(|&v| self.rg(v));
        // the backward pass needs every state and decay; inference keeps none
        let saved = if rg { bsz * len * inner * state } else { 0 };
        let mut y = vec![S::zero(); bsz * len * inner];
        let mut states = vec![S::zero(); saved];
        let mut decays = vec![S::zero(); saved];
        let mut h = vec![S::zero(); inner * state];
        for bi in 0..bsz {
            h.iter_mut().for_each(|v| *v = S::zero());
            for l in 0..len {
                let t = bi * len + l;
                let bt = &bd[t * state..(t + 1) * state];
                let ct = &cd[t * state..(t + 1) * state];
                for e in 0..inner {
                    let dt = dd[t * inner + e];
                    let x = ud[t * inner + e];
                    let mut acc = S::zero();
                    let hrow = &mut h[e * state..(e + 1) * state];
                    let arow = &ad[e * state..(e + 1) * state];
                    for s in 0..state {
                        let decay = (dt * arow[s]).exp();
                        hrow[s] = decay * hrow[s] + dt * bt[s] * x;
                        acc = acc + ct[s] * hrow[s];
                        if rg {
                            decays[(t * inner + e) * state + s] = decay;
                        }
                    }
                    y[t * inner + e] = acc;
                }
                if rg {
                    states[t * inner * state..(t + 1) * inner * state].copy_from_slice(&h);
                }
            }
        }
        let value = Tensor::new(su, y)?;
        self.push("selective_scan", value, Op::Scan { u, delta, a, b, c, states, decays }, rg)
    }

    // ------------------------------------------------------------ backward

    /// Reverse pass from a scalar `loss`. Returns gradients keyed by parameter
    /// name; parameters used in the graph but disconnected from `loss` get an
    /// all-zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<BTreeMap<String, Tensor<S>>, TensorError> {
        if self.backward_done {
            return Err(TensorError::AlreadyBackpropagated);
        }
        let ls = self.shape(loss);
        if numel(ls) != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            log::warn!("backward on a loss with no gradient-requiring inputs");
        } else {
            self.grads[loss.0] = Some(vec![S::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        let mut out = BTreeMap::new();
        for (name, &v) in &self.param_vars {
            let t = self.value(v);
            let grad = match &self.grads[v.0] {
                Some(g) => Tensor::new(t.shape().to_vec(), g.clone())?,
                None => {
                    if self.trainable {
                        log::debug!("parameter `{name}` is disconnected from the loss; gradient is zero");
                    }
                    Tensor::zeros(t.shape().to_vec())
                }
            };
            out.insert(name.clone(), grad);
        }
        Ok(out)
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.value(v).shape().to_vec(), g.clone()).ok()
    }

    /// Drops all gradients so that `backward` may run again.
    pub fn reset(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// True when every stored gradient is zero (or none is stored).
    pub fn grads_are_clear(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|v| v.is_zero()))
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [S])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![S::zero(); n]);
        f(slot);
    }

    fn propagate(&mut self, i: usize, g: &[S]) {
        // The op is moved out temporarily so that node values stay borrowable.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    let bd = self.value(*b).data().to_vec();
                    self.accumulate(*a, |ga| {
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for c in 0..k {
                                let brow = &bd[c * n..(c + 1) * n];
                                let mut acc = S::zero();
                                for j in 0..n {
                                    acc = acc + grow[j] * brow[j];
                                }
                                ga[r * k + c] = ga[r * k + c] + acc;
                            }
                        }
                    });
                }
                if self.rg(*b) {
                    let ad = self.value(*a).data().to_vec();
                    self.accumulate(*b, |gb| {
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for c in 0..k {
                                let av = ad[r * k + c];
                                if av.is_zero() {
                                    continue;
                                }
                                let brow = &mut gb[c * n..(c + 1) * n];
                                for j in 0..n {
                                    brow[j] = brow[j] + av * grow[j];
                                }
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let is_mul = matches!(op, Op::Mul(..));
                let sign = if matches!(op, Op::Sub(..)) { -S::one() } else { S::one() };
                let pa = broadcast_plan(&out_shape, self.shape(*a)).expect("checked in forward");
                let pb = broadcast_plan(&out_shape, self.shape(*b)).expect("checked in forward");
                // one operand always has the output shape
                let a_full = matches!(pa, Bcast::Same);
                let other = if a_full { &pb } else { &pa };
                let av = if is_mul && self.rg(*b) { self.value(*a).data().to_vec() } else { Vec::new() };
                let bv = if is_mul && self.rg(*a) { self.value(*b).data().to_vec() } else { Vec::new() };
                if self.rg(*a) {
                    self.accumulate(*a, |ga| {
                        for_each_index(other, g.len(), |o, j| {
                            let (t, bi) = if a_full { (o, j) } else { (j, o) };
                            let d = if is_mul { g[o] * bv[bi] } else { g[o] };
                            ga[t] = ga[t] + d;
                        });
                    });
                }
                if self.rg(*b) {
                    self.accumulate(*b, |gb| {
                        for_each_index(other, g.len(), |o, j| {
                            let (ai, t) = if a_full { (o, j) } else { (j, o) };
                            let d = if is_mul { g[o] * av[ai] } else { sign * g[o] };
                            gb[t] = gb[t] + d;
                        });
                    });
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = self.nodes[i].value.shape().to_vec();
                let (outer, _, inner) = axis_split(&shape, *axis);
                let total_block = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let block = self.shape(v)[*axis] * inner;
                    self.accumulate(v, |gv| {
                        for o in 0..outer {
                            let src = &g[o * total_block + offset..o * total_block + offset + block];
                            for (d, &s) in gv[o * block..(o + 1) * block].iter_mut().zip(src) {
                                *d = *d + s;
                            }
                        }
                    });
                    offset += block;
                }
            }
            Op::Slice { input, axis, start } => {
                let s = self.shape(*input).to_vec();
                let (outer, len, inner) = axis_split(&s, *axis);
                let width = self.nodes[i].value.shape()[*axis];
                self.accumulate(*input, |gi| {
                    for o in 0..outer {
                        let dst = o * len * inner + start * inner;
                        for (d, &s) in gi[dst..dst + width * inner].iter_mut().zip(&g[o * width * inner..(o + 1) * width * inner]) {
                            *d = *d + s;
                        }
                    }
                });
            }
            Op::SumAxis { input, axis } | Op::MeanAxis { input, axis } => {
                let s = self.shape(*input).to_vec();
                let (outer, len, inner) = axis_split(&s, *axis);
                let factor = if matches!(op, Op::MeanAxis { .. }) { S::one() / S::lit(len as f64) } else { S::one() };
                self.accumulate(*input, |gi| {
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = &mut gi[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (d, &s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d = *d + s * factor;
                            }
                        }
                    }
                });
            }
            Op::MaxAxis { input, argmax } => {
                self.accumulate(*input, |gi| {
                    for (&src, &gv) in argmax.iter().zip(g) {
                        gi[src] = gi[src] + gv;
                    }
                });
            }
            Op::Conv1d { input, kernel, offset } => {
                let sx = self.shape(*input).to_vec();
                let (bsz, len, ch) = (sx[0], sx[1], sx[2]);
                let width = self.shape(*kernel)[1];
                let xd = self.value(*input).data().to_vec();
                let kd = self.value(*kernel).data().to_vec();
                let pairs = |f: &mut dyn FnMut(usize, usize, usize, usize)| {
                    for b in 0..bsz {
                        for l in 0..len {
                            for j in 0..width {
                                let src = l as isize + j as isize - *offset as isize;
                                if src < 0 || src >= len as isize {
                                    continue;
                                }
                                f(b, l, j, src as usize);
                            }
                        }
                    }
                };
                if self.rg(*input) {
                    self.accumulate(*input, |gx| {
                        pairs(&mut |b, l, j, src| {
                            for c in 0..ch {
                                let t = (b * len + src) * ch + c;
                                gx[t] = gx[t] + kd[c * width + j] * g[(b * len + l) * ch + c];
                            }
                        })
                    });
                }
                if self.rg(*kernel) {
                    self.accumulate(*kernel, |gk| {
                        pairs(&mut |b, l, j, src| {
                            for c in 0..ch {
                                gk[c * width + j] = gk[c * width + j] + xd[(b * len + src) * ch + c] * g[(b * len + l) * ch + c];
                            }
                        })
                    });
                }
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[i].value.data().to_vec();
                self.accumulate(*x, |gx| {
                    for ((d, &gv), &yv) in gx.iter_mut().zip(g).zip(&y) {
                        *d = *d + gv * yv * (S::one() - yv);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = self.nodes[i].value.data().to_vec();
                self.accumulate(*x, |gx| {
                    for ((d, &gv), &yv) in gx.iter_mut().zip(g).zip(&y) {
                        *d = *d + gv * (S::one() - yv * yv);
                    }
                });
            }
            Op::Exp(x) => {
                let y = self.nodes[i].value.data().to_vec();
                self.accumulate(*x, |gx| {
                    for ((d, &gv), &yv) in gx.iter_mut().zip(g).zip(&y) {
                        *d = *d + gv * yv;
                    }
                });
            }
            Op::Relu(x) | Op::Softplus(x) => {
                let xv = self.value(*x).data().to_vec();
                let is_relu = matches!(op, Op::Relu(_));
                self.accumulate(*x, |gx| {
                    for ((d, &gv), &v) in gx.iter_mut().zip(g).zip(&xv) {
                        let slope = if is_relu {
                            if v > S::zero() { S::one() } else { S::zero() }
                        } else {
                            sigmoid(v)
                        };
                        *d = *d + gv * slope;
                    }
                });
            }
            Op::Scale(x, f) => {
                let f = *f;
                self.accumulate(*x, |gx| {
                    for (d, &gv) in gx.iter_mut().zip(g) {
                        *d = *d + gv * f;
                    }
                });
            }
            Op::Reshape(x) => {
                self.accumulate(*x, |gx| {
                    for (d, &gv) in gx.iter_mut().zip(g) {
                        *d = *d + gv;
                    }
                });
            }
            Op::Transpose(x) => {
                let s = self.shape(*x).to_vec();
                let (r, c) = (s[0], s[1]);
                self.accumulate(*x, |gx| {
                    for a in 0..r {
                        for b in 0..c {
                            gx[a * c + b] = gx[a * c + b] + g[b * r + a];
                        }
                    }
                });
            }
            Op::Gather { input, index } => {
                let row = numel(&self.shape(*input)[1..]);
                self.accumulate(*input, |gx| {
                    for (k, idx) in index.iter().enumerate() {
                        if let Some(src) = idx {
                            for (d, &gv) in gx[src * row..(src + 1) * row].iter_mut().zip(&g[k * row..(k + 1) * row]) {
                                *d = *d + gv;
                            }
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = self.nodes[i].value.data().to_vec();
                let inner = *self.nodes[i].value.shape().last().unwrap();
                self.accumulate(*x, |gx| {
                    for ((gr, yr), dr) in g.chunks(inner).zip(y.chunks(inner)).zip(gx.chunks_mut(inner)) {
                        let dot: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = *d + yv * (gv - dot);
                        }
                    }
                });
            }
            Op::Scan { u, delta, a, b, c, states, decays } => {
                self.scan_backward(g, [*u, *delta, *a, *b, *c], states, decays);
            }
        }
        self.nodes[i].op = op;
    }

    fn scan_backward(&mut self, gy: &[S], vars: [Var; 5], states: &[S], decays: &[S]) {
        let [u, delta, a, b, c] = vars;
        let su = self.shape(u).to_vec();
        let (bsz, len, inner) = (su[0], su[1], su[2]);
        let state = self.shape(a)[1];
        let ud = self.value(u).data().to_vec();
        let dd = self.value(delta).data().to_vec();
        let ad = self.value(a).data().to_vec();
        let bd = self.value(b).data().to_vec();
        let cd = self.value(c).data().to_vec();
        let mut gu = vec![S::zero(); ud.len()];
        let mut gd = vec![S::zero(); dd.len()];
        let mut ga = vec![S::zero(); ad.len()];
        let mut gb = vec![S::zero(); bd.len()];
        let mut gc = vec![S::zero(); cd.len()];
        let es = inner * state;
        let mut carry = vec![S::zero(); es];
        let zeros = vec![S::zero(); es];
        for bi in 0..bsz {
            carry.iter_mut().for_each(|v| *v = S::zero());
            for l in (0..len).rev() {
                let t = bi * len + l;
                let h = &states[t * es..(t + 1) * es];
                let h_prev = if l == 0 { &zeros[..] } else { &states[(t - 1) * es..t * es] };
                let bt = &bd[t * state..(t + 1) * state];
                let ct = &cd[t * state..(t + 1) * state];
                let dk = &decays[t * es..(t + 1) * es];
                for e in 0..inner {
                    let gye = gy[t * inner + e];
                    let dt = dd[t * inner + e];
                    let x = ud[t * inner + e];
                    let mut gdt = S::zero();
                    let mut gx = S::zero();
                    for s in 0..state {
                        let k = e * state + s;
                        gc[t * state + s] = gc[t * state + s] + gye * h[k];
                        let gh = carry[k] + gye * ct[s];
                        let decay = dk[k];
                        // through decay * h_prev
                        let g_decay = gh * h_prev[k];
                        gdt = gdt + g_decay * decay * ad[k];
                        ga[k] = ga[k] + g_decay * decay * dt;
                        // through dt * B * u
                        gdt = gdt + gh * bt[s] * x;
                        gb[t * state + s] = gb[t * state + s] + gh * dt * x;
                        gx = gx + gh * dt * bt[s];
                        carry[k] = gh * decay;
                    }
                    gd[t * inner + e] = gd[t * inner + e] + gdt;
                    gu[t * inner + e] = gu[t * inner + e] + gx;
                }
            }
        }
        for (v, gv) in [(u, gu), (delta, gd), (a, ga), (b, gb), (c, gc)] {
            self.accumulate(v, |slot| {
                for (d, s) in slot.iter_mut().zip(gv) {
                    *d = *d + s;
                }
            });
        }
    }
}

pub(crate) fn matmul_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for c in 0..k {
            let av = a[r * k + c];
            if av.is_zero() {
                continue;
            }
            let brow = &b[c * n..(c + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}
