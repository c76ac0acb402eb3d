//! Finite-difference verification of reverse-mode gradients on randomly
//! composed double-precision graphs.

use rand::Rng as _;

use super::{Bindings, EngineError, Graph, NodeId, Op, Tensor};
use crate::rng;

/// A random scalar-valued graph with values for all of its leaves.
pub struct RandomGraph {
    pub graph: Graph<f64>,
    pub leaves: Vec<(NodeId, Tensor<f64>)>,
}

impl RandomGraph {
    /// Op kinds present, in first-use order.
    pub fn kinds(&self) -> Vec<&'static str> {
        let mut out: Vec<&'static str> = Vec::new();
        for op in self.graph.ops() {
            if !out.contains(&op.kind()) {
                out.push(op.kind());
            }
        }
        out
    }

    fn eval(&mut self) -> Result<f64, EngineError> {
        let mut b = Bindings::new();
        for (id, t) in &self.leaves {
            b.bind(*id, t);
        }
        Ok(self.graph.evaluate(&b)?.data()[0])
    }
}

struct Builder<'a> {
    g: Graph<f64>,
    leaves: Vec<(NodeId, Tensor<f64>)>,
    rng: &'a mut rng::Rng,
}

impl Builder<'_> {
    fn leaf(&mut self, shape: &[usize], scale: f64) -> NodeId {
        let id = self.g.leaf(format!("p{}", self.leaves.len()));
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-scale..scale)).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("shape matches data").with_requires_grad(true);
        self.leaves.push((id, t));
        id
    }

    fn coin(&mut self, p: f64) -> bool {
        self.rng.random_bool(p)
    }

    fn activation(&mut self, x: NodeId) -> NodeId {
        match self.rng.random_range(0..3) {
            0 => self.g.relu(x),
            1 => self.g.leaky_relu(x),
            _ => x,
        }
    }
}

/// Builds one random graph. Every op kind appears with substantial
/// probability; the output is a scalar.
pub fn random_graph(seed: u64) -> RandomGraph {
    let mut r = rng::stream(seed, "gradcheck-graph", &[]);
    let mut b = Builder {
        g: Graph::new(),
        leaves: Vec::new(),
        rng: &mut r,
    };
    let batch = b.rng.random_range(1..=2);
    let channels = b.rng.random_range(1..=2);
    let side = if b.coin(0.5) { 4 } else { 6 };
    let x = b.leaf(&[batch, channels, side, side], 1.0);

    let mut h = x;
    let (mut c, mut s) = (channels, side);
    if b.coin(0.75) {
        let out = b.rng.random_range(1..=3);
        let k = if b.coin(0.5) { 3 } else { 2 };
        let stride = if b.coin(0.3) { 2 } else { 1 };
        let padding = if k == 3 && b.coin(0.5) { 1 } else { 0 };
        let w = b.leaf(&[out, c, k, k], 0.7);
        let bias = if b.coin(0.5) { Some(b.leaf(&[out], 0.3)) } else { None };
        h = b.g.conv2d(h, w, bias, stride, padding);
        s = (s + 2 * padding - k) / stride + 1;
        c = out;
        h = b.activation(h);
    }
    if s % 2 == 0 && s >= 2 && b.coin(0.6) {
        h = b.g.mean_pool(h, 2);
        s /= 2;
    }
    h = b.g.flatten(h);
    let features = c * s * s;
    let hidden = b.rng.random_range(2..=4);
    let w1 = b.leaf(&[hidden, features], 0.6);
    let b1 = if b.coin(0.5) { Some(b.leaf(&[hidden], 0.3)) } else { None };
    h = b.g.dense(h, w1, b1);
    h = b.activation(h);
    for _ in 0..b.rng.random_range(0..3) {
        let other = b.leaf(&[batch, hidden], 1.0);
        h = match b.rng.random_range(0..4) {
            0 => b.g.add(h, other),
            1 => b.g.sub(h, other),
            2 => b.g.mul(h, other),
            _ => {
                let f = b.rng.random_range(-2.0..2.0);
                b.g.scale(h, f)
            }
        };
    }
    let weights = b.leaf(&[batch, hidden], 1.0);
    match b.rng.random_range(0..5) {
        0 => {
            let ls = b.g.log_softmax(h);
            let m = b.g.mul(ls, weights);
            b.g.sum(m);
        }
        1 => {
            let sm = b.g.softmax(h);
            let l = b.g.log(sm);
            let m = b.g.mul(l, weights);
            b.g.sum(m);
        }
        2 => {
            let sm = b.g.softmax(h);
            let m = b.g.mul(sm, weights);
            b.g.sum(m);
        }
        3 => {
            b.g.l2_norm_sq(h);
        }
        _ => {
            let d = b.g.sub(h, weights);
            let sq = b.g.l2_norm_sq(d);
            b.g.scale(sq, 0.5);
        }
    }
    RandomGraph {
        graph: b.g,
        leaves: b.leaves,
    }
}

/// Smallest distance of any ReLU-family input from its kink.
fn kink_margin(g: &Graph<f64>) -> f64 {
    g.ops()
        .iter()
        .filter_map(|op| match op {
            Op::Relu(a) | Op::LeakyRelu(a) => g.value(*a),
            _ => None,
        })
        .flat_map(|t| t.data().iter().map(|v| v.abs()))
        .fold(f64::INFINITY, f64::min)
}

/// Outcome of one finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub kinds: Vec<&'static str>,
    pub coordinates: usize,
    /// `max |a − n| / max(|a|, |n|, floor)` over the checked coordinates.
    pub max_relative_error: f64,
}

/// Relative error floor; below it the comparison is effectively absolute.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Compares analytic gradients of every leaf with central differences of
/// step `h`, probing at most `per_leaf` coordinates of each leaf. Leaf
/// values that put a ReLU input within `min(10 h, 0.01)` of its kink are
/// redrawn first.
pub fn check_random_graph(seed: u64, h: f64, per_leaf: usize) -> Result<GradCheck, EngineError> {
    let mut attempt = 0u64;
    let mut rg = random_graph(seed);
    loop {
        rg.eval()?;
        if kink_margin(&rg.graph) > (10.0 * h).min(0.01) {
            break;
        }
        attempt += 1;
        let mut r = rng::stream(seed, "gradcheck-redraw", &[attempt]);
        for (_, t) in &mut rg.leaves {
            for v in t.data_mut() {
                *v = r.random_range(-1.0..1.0);
            }
        }
    }
    let grads = rg.graph.backward(&Tensor::scalar(1.0))?;
    let analytic: Vec<Vec<f64>> = rg.leaves.iter().map(|(id, _)| grads[id].data().to_vec()).collect();
    let mut pick = rng::stream(seed, "gradcheck-coords", &[]);
    let mut worst = 0.0f64;
    let mut coordinates = 0;
    for (li, a) in analytic.iter().enumerate() {
        let n = a.len();
        let coords: Vec<usize> = if n <= per_leaf {
            (0..n).collect()
        } else {
            (0..per_leaf).map(|_| pick.random_range(0..n)).collect()
        };
        for k in coords {
            let orig = rg.leaves[li].1.data()[k];
            rg.leaves[li].1.data_mut()[k] = orig + h;
            let up = rg.eval()?;
            rg.leaves[li].1.data_mut()[k] = orig - h;
            let down = rg.eval()?;
            rg.leaves[li].1.data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (a[k] - numeric).abs() / a[k].abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            worst = worst.max(err);
            coordinates += 1;
        }
    }
    Ok(GradCheck {
        kinds: rg.kinds(),
        coordinates,
        max_relative_error: worst,
    })
}

/// Every op kind the engine implements.
pub const ALL_KINDS: [&str; 16] = [
    "leaf",
    "dense",
    "conv2d",
    "relu",
    "leaky_relu",
    "mean_pool",
    "flatten",
    "add",
    "sub",
    "mul",
    "scale",
    "softmax",
    "log_softmax",
    "log",
    "sum",
    "l2_norm_sq",
];
