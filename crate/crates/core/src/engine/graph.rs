use std::collections::{BTreeMap, HashMap};
use std::fmt;

use super::kernels::{self, ConvGeometry};
use super::{Element, EngineError, Tensor};

/// Fixed negative-side slope of the leaky rectifier.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Index of a node inside its [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Parameter or input, bound at evaluation time.
    Leaf { name: String },
    /// `x: [B, in]`, `w: [out, in]`, `b: [out]`.
    Dense { x: NodeId, w: NodeId, b: Option<NodeId> },
    /// `x: [B, C, H, W]`, `w: [O, C, KH, KW]`, `b: [O]`.
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        padding: usize,
    },
    Relu(NodeId),
    LeakyRelu(NodeId),
    /// Non-overlapping `k x k` average over `[B, C, H, W]`.
    MeanPool { x: NodeId, k: usize },
    /// `[B, ...] -> [B, prod(...)]`
    Flatten(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Over the last axis.
    Softmax(NodeId),
    /// Over the last axis, fused for stability.
    LogSoftmax(NodeId),
    Log(NodeId),
    /// Sum of all elements to a scalar.
    Sum(NodeId),
    /// Sum of squares of all elements to a scalar.
    L2NormSq(NodeId),
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf { .. } => vec![],
            Op::Dense { x, w, b } | Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![x, w];
                v.extend(b);
                v
            }
            Op::Relu(a)
            | Op::LeakyRelu(a)
            | Op::MeanPool { x: a, .. }
            | Op::Flatten(a)
            | Op::Scale(a, _)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Log(a)
            | Op::Sum(a)
            | Op::L2NormSq(a) => vec![a],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Dense { .. } => "dense",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::MeanPool { .. } => "mean_pool",
            Op::Flatten(_) => "flatten",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Log(_) => "log",
            Op::Sum(_) => "sum",
            Op::L2NormSq(_) => "l2_norm_sq",
        }
    }
}

/// Leaf values for one evaluation. Whether a leaf receives a gradient is
/// taken from the bound tensor's `requires_grad` flag.
#[derive(Default)]
pub struct Bindings<'a, T: Element = f32> {
    entries: HashMap<NodeId, (&'a Tensor<T>, Option<bool>)>,
}

impl<'a, T: Element> Bindings<'a, T> {
    pub fn new() -> Self {
        Self {
            entries: HashMap::new(),
        }
    }

    pub fn bind(&mut self, leaf: NodeId, value: &'a Tensor<T>) -> &mut Self {
        self.entries.insert(leaf, (value, None));
        self
    }

    /// Binds a leaf, overriding the tensor's own `requires_grad` flag.
    pub fn bind_with_grad(&mut self, leaf: NodeId, value: &'a Tensor<T>, requires_grad: bool) -> &mut Self {
        self.entries.insert(leaf, (value, Some(requires_grad)));
        self
    }

    pub fn with(mut self, leaf: NodeId, value: &'a Tensor<T>) -> Self {
        self.entries.insert(leaf, (value, None));
        self
    }
}

/// Gradients of the seeded outputs with respect to every leaf that was bound
/// with `requires_grad`.
pub type Gradients<T = f32> = BTreeMap<NodeId, Tensor<T>>;

/// Topologically ordered op list with a per-evaluation value cache.
///
/// Nodes can only reference earlier nodes, so the list order is a valid
/// evaluation order and the graph is acyclic by construction.
#[derive(Clone, Debug)]
pub struct Graph<T: Element = f32> {
    ops: Vec<Op>,
    output: Option<NodeId>,
    values: Vec<Option<Tensor<T>>>,
    /// Unfolded conv inputs, kept only when the conv weight needs a gradient.
    cols: Vec<Option<Vec<T>>>,
    needs_grad: Vec<bool>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            ops: Vec::new(),
            output: None,
            values: Vec::new(),
            cols: Vec::new(),
            needs_grad: Vec::new(),
        }
    }

    fn push(&mut self, op: Op) -> NodeId {
        for i in op.inputs() {
            assert!(i.0 < self.ops.len(), "node {i} referenced before definition");
        }
        self.ops.push(op);
        self.values.push(None);
        self.cols.push(None);
        self.needs_grad.push(false);
        NodeId(self.ops.len() - 1)
    }

    pub fn leaf(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Leaf { name: name.into() })
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        self.push(Op::Dense { x, w, b })
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, padding: usize) -> NodeId {
        assert!(stride >= 1, "stride must be positive");
        self.push(Op::Conv2d {
            x,
            w,
            b,
            stride,
            padding,
        })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::LeakyRelu(x))
    }

    pub fn mean_pool(&mut self, x: NodeId, k: usize) -> NodeId {
        assert!(k >= 1, "pool size must be positive");
        self.push(Op::MeanPool { x, k })
    }

    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Flatten(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(a, factor))
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        self.push(Op::LogSoftmax(x))
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Log(x))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x))
    }

    pub fn l2_norm_sq(&mut self, x: NodeId) -> NodeId {
        self.push(Op::L2NormSq(x))
    }

    /// Marks the node returned by [`Graph::evaluate`]. Defaults to the last node.
    pub fn set_output(&mut self, node: NodeId) {
        self.output = Some(node);
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output.or(if self.ops.is_empty() {
            None
        } else {
            Some(NodeId(self.ops.len() - 1))
        })
    }

    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn leaves(&self) -> impl Iterator<Item = (NodeId, &str)> {
        self.ops.iter().enumerate().filter_map(|(i, op)| match op {
            Op::Leaf { name } => Some((NodeId(i), name.as_str())),
            _ => None,
        })
    }

    pub fn leaf_named(&self, name: &str) -> Option<NodeId> {
        self.leaves().find(|(_, n)| *n == name).map(|(id, _)| id)
    }

    /// Cached value from the most recent evaluation.
    pub fn value(&self, node: NodeId) -> Option<&Tensor<T>> {
        self.values.get(node.0).and_then(|v| v.as_ref())
    }

    /// Evaluates every node up to the output and returns the output value.
    pub fn evaluate(&mut self, bindings: &Bindings<'_, T>) -> Result<&Tensor<T>, EngineError> {
        let out = self.output().ok_or(EngineError::Empty)?;
        self.evaluate_until(bindings, out)
    }

    /// Evaluates nodes `0..=node` only. Later nodes are left unevaluated,
    /// which is how a forward pass stops at an intermediate tap.
    pub fn evaluate_until(&mut self, bindings: &Bindings<'_, T>, node: NodeId) -> Result<&Tensor<T>, EngineError> {
        for v in self.values.iter_mut() {
            *v = None;
        }
        for c in self.cols.iter_mut() {
            *c = None;
        }
        for i in 0..=node.0 {
            let id = NodeId(i);
            let (value, needs) = match &self.ops[i] {
                Op::Leaf { name } => {
                    let (t, flag) = bindings.entries.get(&id).ok_or_else(|| EngineError::Unbound {
                        node: id,
                        name: name.clone(),
                    })?;
                    let mut t = (*t).clone();
                    t.clear_grad();
                    let needs = flag.unwrap_or(t.requires_grad());
                    (t, needs)
                }
                op => {
                    let op = op.clone();
                    let needs = op.inputs().iter().any(|j| self.needs_grad[j.0]);
                    (self.forward_op(id, &op)?, needs)
                }
            };
            if !value.all_finite() {
                return Err(EngineError::NonFinite {
                    node: id,
                    op: self.ops[i].kind(),
                });
            }
            self.needs_grad[i] = needs;
            self.values[i] = Some(value);
        }
        Ok(self.values[node.0].as_ref().expect("just evaluated"))
    }

    fn val(&self, id: NodeId) -> &Tensor<T> {
        self.values[id.0].as_ref().expect("inputs precede their consumers")
    }

    fn forward_op(&mut self, id: NodeId, op: &Op) -> Result<Tensor<T>, EngineError> {
        let mismatch = |detail: String| EngineError::ShapeMismatch { node: id, detail };
        let out = match *op {
            Op::Leaf { .. } => unreachable!(),
            Op::Dense { x, w, b } => {
                let (xv, wv) = (self.val(x), self.val(w));
                if xv.shape().len() != 2 || wv.shape().len() != 2 || xv.shape()[1] != wv.shape()[1] {
                    return Err(mismatch(format!("dense x{:?} w{:?}", xv.shape(), wv.shape())));
                }
                let (batch, inp, out) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
                let bias = match b {
                    Some(b) => {
                        let bv = self.val(b);
                        if bv.shape() != [out] {
                            return Err(mismatch(format!("dense bias {:?}, expected [{out}]", bv.shape())));
                        }
                        Some(bv.data())
                    }
                    None => None,
                };
                let y = kernels::dense_forward(xv.data(), wv.data(), bias, batch, inp, out);
                Tensor::new(vec![batch, out], y)?
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let (xv, wv) = (self.val(x), self.val(w));
                let geo = conv_geometry(xv.shape(), wv.shape(), stride, padding).map_err(mismatch)?;
                let bias = match b {
                    Some(b) => {
                        let bv = self.val(b);
                        if bv.shape() != [geo.out_channels] {
                            return Err(mismatch(format!("conv bias {:?}", bv.shape())));
                        }
                        Some(bv.data())
                    }
                    None => None,
                };
                let batch = xv.shape()[0];
                let keep = self.needs_grad[w.0];
                let (y, cols) = kernels::conv_forward(&geo, xv.data(), wv.data(), bias, batch, keep);
                self.cols[id.0] = cols;
                Tensor::new(vec![batch, geo.out_channels, geo.out_h(), geo.out_w()], y)?
            }
            Op::Relu(a) => self.val(a).map(|v| if v > T::zero() { v } else { T::zero() }),
            Op::LeakyRelu(a) => {
                let s = T::of(LEAKY_SLOPE);
                self.val(a).map(|v| if v > T::zero() { v } else { s * v })
            }
            Op::MeanPool { x, k } => {
                let xv = self.val(x);
                let sh = xv.shape();
                if sh.len() != 4 || sh[2] < k || sh[3] < k {
                    return Err(mismatch(format!("mean_pool {k} over {sh:?}")));
                }
                let y = kernels::mean_pool_forward(xv.data(), sh[0] * sh[1], sh[2], sh[3], k);
                Tensor::new(vec![sh[0], sh[1], sh[2] / k, sh[3] / k], y)?
            }
            Op::Flatten(a) => {
                let v = self.val(a);
                if v.shape().is_empty() {
                    return Err(mismatch("flatten of a scalar".into()));
                }
                let shape = vec![v.rows(), v.row_len()];
                v.clone().reshape(shape)?
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (av, bv) = (self.val(a), self.val(b));
                if av.shape() != bv.shape() {
                    return Err(mismatch(format!("{} {:?} vs {:?}", op.kind(), av.shape(), bv.shape())));
                }
                let data = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&p, &q)| match op {
                        Op::Add(..) => p + q,
                        Op::Sub(..) => p - q,
                        _ => p * q,
                    })
                    .collect();
                Tensor::new(av.shape().to_vec(), data)?
            }
            Op::Scale(a, f) => {
                let f = T::of(f);
                self.val(a).map(|v| v * f)
            }
            Op::Softmax(a) | Op::LogSoftmax(a) => {
                let v = self.val(a);
                let last = *v.shape().last().ok_or_else(|| mismatch("softmax of a scalar".into()))?;
                if last == 0 {
                    return Err(mismatch("softmax over an empty axis".into()));
                }
                let mut out = v.clone();
                for row in out.data_mut().chunks_mut(last) {
                    if matches!(op, Op::Softmax(_)) {
                        softmax_in_place(row);
                    } else {
                        log_softmax_in_place(row);
                    }
                }
                out
            }
            Op::Log(a) => self.val(a).map(|v| v.ln()),
            Op::Sum(a) => Tensor::scalar(self.val(a).sum()),
            Op::L2NormSq(a) => {
                let d = self.val(a).data();
                Tensor::scalar(kernels::dot(d, d))
            }
        };
        Ok(out)
    }

    /// Reverse pass from the graph output.
    pub fn backward(&mut self, seed: &Tensor<T>) -> Result<Gradients<T>, EngineError> {
        let out = self.output().ok_or(EngineError::Empty)?;
        self.backward_from(&[(out, seed)])
    }

    /// Reverse pass seeded at any set of evaluated nodes. Seeds are summed,
    /// so the result is the gradient of `sum_k <seed_k, node_k>`.
    pub fn backward_from(&mut self, seeds: &[(NodeId, &Tensor<T>)]) -> Result<Gradients<T>, EngineError> {
        let top = seeds.iter().map(|(n, _)| n.0).max().ok_or(EngineError::Empty)?;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.ops.len()];
        for (node, seed) in seeds {
            let value = self.value(*node).ok_or(EngineError::BackwardBeforeForward { node: *node })?;
            if value.shape() != seed.shape() {
                return Err(EngineError::SeedShape {
                    node: *node,
                    expected: value.shape().to_vec(),
                    found: seed.shape().to_vec(),
                });
            }
            accumulate(&mut grads, *node, seed.data().to_vec());
        }
        for i in (0..=top).rev() {
            if !self.needs_grad[i] || matches!(self.ops[i], Op::Leaf { .. }) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let op = self.ops[i].clone();
            self.backward_op(NodeId(i), &op, &dy, &mut grads);
        }
        let mut out = Gradients::new();
        for (i, op) in self.ops.iter().enumerate() {
            if let Op::Leaf { .. } = op {
                if !self.needs_grad[i] {
                    continue;
                }
                let Some(v) = self.values[i].as_ref() else { continue };
                let g = grads[i].take().unwrap_or_else(|| vec![T::zero(); v.len()]);
                out.insert(NodeId(i), Tensor::new(v.shape().to_vec(), g)?);
            }
        }
        Ok(out)
    }

    fn backward_op(&self, id: NodeId, op: &Op, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let needs = |n: NodeId| self.needs_grad[n.0];
        match *op {
            Op::Leaf { .. } => {}
            Op::Dense { x, w, b } => {
                let (xv, wv) = (self.val(x), self.val(w));
                let (batch, inp, out) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
                if needs(x) {
                    accumulate(grads, x, kernels::dense_backward_input(dy, wv.data(), batch, inp, out));
                }
                if needs(w) {
                    accumulate(grads, w, kernels::dense_backward_weight(dy, xv.data(), batch, inp, out));
                }
                if let Some(b) = b.filter(|&b| needs(b)) {
                    accumulate(grads, b, kernels::bias_backward(dy, batch, out));
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let (xv, wv) = (self.val(x), self.val(w));
                let geo = conv_geometry(xv.shape(), wv.shape(), stride, padding).expect("validated in forward");
                let batch = xv.shape()[0];
                if needs(x) {
                    accumulate(grads, x, kernels::conv_backward_input(&geo, dy, wv.data(), batch));
                }
                if needs(w) {
                    let cols = self.cols[id.0].as_ref().expect("cols kept for weight gradient");
                    accumulate(grads, w, kernels::conv_backward_weight(&geo, dy, cols, batch));
                }
                if let Some(b) = b.filter(|&b| needs(b)) {
                    accumulate(grads, b, kernels::conv_backward_bias(&geo, dy, batch));
                }
            }
            Op::Relu(a) | Op::LeakyRelu(a) => {
                if needs(a) {
                    let slope = if matches!(op, Op::Relu(_)) {
                        T::zero()
                    } else {
                        T::of(LEAKY_SLOPE)
                    };
                    let g = self
                        .val(a)
                        .data()
                        .iter()
                        .zip(dy)
                        .map(|(&v, &d)| if v > T::zero() { d } else { slope * d })
                        .collect();
                    accumulate(grads, a, g);
                }
            }
            Op::MeanPool { x, k } => {
                if needs(x) {
                    let sh = self.val(x).shape();
                    accumulate(grads, x, kernels::mean_pool_backward(dy, sh[0] * sh[1], sh[2], sh[3], k));
                }
            }
            Op::Flatten(a) => {
                if needs(a) {
                    accumulate(grads, a, dy.to_vec());
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                if needs(a) {
                    accumulate(grads, a, dy.to_vec());
                }
                if needs(b) {
                    let g = if matches!(op, Op::Add(..)) {
                        dy.to_vec()
                    } else {
                        dy.iter().map(|&d| -d).collect()
                    };
                    accumulate(grads, b, g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(a).data(), self.val(b).data());
                if needs(a) {
                    accumulate(grads, a, dy.iter().zip(bv).map(|(&d, &q)| d * q).collect());
                }
                if needs(b) {
                    accumulate(grads, b, dy.iter().zip(av).map(|(&d, &p)| d * p).collect());
                }
            }
            Op::Scale(a, f) => {
                if needs(a) {
                    let f = T::of(f);
                    accumulate(grads, a, dy.iter().map(|&d| d * f).collect());
                }
            }
            Op::Softmax(a) => {
                if needs(a) {
                    let y = self.val(id);
                    let last = *y.shape().last().expect("checked in forward");
                    let mut g = vec![T::zero(); dy.len()];
                    for ((gr, yr), dr) in g.chunks_mut(last).zip(y.data().chunks(last)).zip(dy.chunks(last)) {
                        let s = kernels::dot(yr, dr);
                        for ((gv, &yv), &dv) in gr.iter_mut().zip(yr).zip(dr) {
                            *gv = yv * (dv - s);
                        }
                    }
                    accumulate(grads, a, g);
                }
            }
            Op::LogSoftmax(a) => {
                if needs(a) {
                    let y = self.val(id);
                    let last = *y.shape().last().expect("checked in forward");
                    let mut g = vec![T::zero(); dy.len()];
                    for ((gr, yr), dr) in g.chunks_mut(last).zip(y.data().chunks(last)).zip(dy.chunks(last)) {
                        let s: T = dr.iter().copied().sum();
                        for ((gv, &lv), &dv) in gr.iter_mut().zip(yr).zip(dr) {
                            *gv = dv - lv.exp() * s;
                        }
                    }
                    accumulate(grads, a, g);
                }
            }
            Op::Log(a) => {
                if needs(a) {
                    let g = self.val(a).data().iter().zip(dy).map(|(&v, &d)| d / v).collect();
                    accumulate(grads, a, g);
                }
            }
            Op::Sum(a) => {
                if needs(a) {
                    accumulate(grads, a, vec![dy[0]; self.val(a).len()]);
                }
            }
            Op::L2NormSq(a) => {
                if needs(a) {
                    let two = T::of(2.0) * dy[0];
                    accumulate(grads, a, self.val(a).data().iter().map(|&v| two * v).collect());
                }
            }
        }
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Vec<T>>], node: NodeId, g: Vec<T>) {
    match &mut grads[node.0] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(g) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn conv_geometry(x: &[usize], w: &[usize], stride: usize, padding: usize) -> Result<ConvGeometry, String> {
    if x.len() != 4 || w.len() != 4 || x[1] != w[1] {
        return Err(format!("conv2d x{x:?} w{w:?}"));
    }
    if x[2] + 2 * padding < w[2] || x[3] + 2 * padding < w[3] {
        return Err(format!("conv2d kernel {w:?} larger than padded input {x:?}"));
    }
    Ok(ConvGeometry {
        in_channels: x[1],
        height: x[2],
        width: x[3],
        out_channels: w[0],
        kernel_h: w[2],
        kernel_w: w[3],
        stride,
        padding,
    })
}

pub fn softmax_in_place<T: Element>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

pub fn log_softmax_in_place<T: Element>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
    for v in row.iter_mut() {
        *v -= lse;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn identity_graph_returns_input() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf("x");
        let xv = t(&[3], &[1.0, -2.0, 3.5]);
        let out = g.evaluate(&Bindings::new().with(x, &xv)).unwrap();
        assert_eq!(out, &xv);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf("x");
        g.relu(x);
        let xv = t(&[3], &[-1.0, 0.0, 2.0]);
        let out = g.evaluate(&Bindings::new().with(x, &xv)).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn one_by_one_dense_is_affine() {
        let mut g = Graph::<f64>::new();
        let (x, w, b) = (g.leaf("x"), g.leaf("w"), g.leaf("b"));
        g.dense(x, w, Some(b));
        let (xv, wv, bv) = (t(&[1, 1], &[3.0]), t(&[1, 1], &[2.0]), t(&[1], &[1.0]));
        let out = g
            .evaluate(&Bindings::new().with(x, &xv).with(w, &wv).with(b, &bv))
            .unwrap();
        assert_eq!(out.data(), &[7.0]);
    }

    #[test]
    fn scale_derivative() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf("x");
        g.scale(x, 3.0);
        let xv = t(&[], &[1.25]).with_requires_grad(true);
        g.evaluate(&Bindings::new().with(x, &xv)).unwrap();
        let grads = g.backward(&Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads[&x].data(), &[3.0]);
    }

    #[test]
    fn dead_relu_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf("x");
        g.relu(x);
        let xv = t(&[1], &[-1.0]).with_requires_grad(true);
        g.evaluate(&Bindings::new().with(x, &xv)).unwrap();
        let grads = g.backward(&t(&[1], &[1.0])).unwrap();
        assert_eq!(grads[&x].data(), &[0.0]);
    }

    #[test]
    fn shape_mismatch_names_node() {
        let mut g = Graph::<f64>::new();
        let (a, b) = (g.leaf("a"), g.leaf("b"));
        let s = g.add(a, b);
        let (av, bv) = (t(&[2], &[1.0, 2.0]), t(&[3], &[1.0, 2.0, 3.0]));
        match g.evaluate(&Bindings::new().with(a, &av).with(b, &bv)) {
            Err(EngineError::ShapeMismatch { node, .. }) => assert_eq!(node, s),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_output_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf("x");
        g.log(x);
        let xv = t(&[2], &[1.0, 0.0]);
        assert!(matches!(
            g.evaluate(&Bindings::new().with(x, &xv)),
            Err(EngineError::NonFinite { .. })
        ));
    }

    #[test]
    fn backward_before_forward_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf("x");
        g.relu(x);
        assert!(matches!(
            g.backward(&t(&[1], &[1.0])),
            Err(EngineError::BackwardBeforeForward { .. })
        ));
    }

    #[test]
    fn unbound_leaf_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf("x");
        g.relu(x);
        assert!(matches!(g.evaluate(&Bindings::new()), Err(EngineError::Unbound { .. })));
    }

    #[test]
    fn evaluation_is_bitwise_deterministic() {
        let mut g = Graph::<f32>::new();
        let (x, w) = (g.leaf("x"), g.leaf("w"));
        let c = g.conv2d(x, w, None, 1, 1);
        g.softmax(c);
        let xv = Tensor::<f32>::new(vec![1, 1, 4, 4], (0..16).map(|i| i as f32 * 0.37).collect()).unwrap();
        let wv = Tensor::<f32>::new(vec![2, 1, 3, 3], (0..18).map(|i| (i as f32).sin()).collect()).unwrap();
        let b = Bindings::new().with(x, &xv).with(w, &wv);
        let first = g.evaluate(&b).unwrap().clone();
        let second = g.evaluate(&b).unwrap().clone();
        assert_eq!(
            first.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            second.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
