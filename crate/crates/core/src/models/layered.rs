use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::spec::{Activation, Architecture, ModelSpec};
use crate::engine::{softmax_in_place, Bindings, Element, Graph, NodeId, ParamMap, Tensor};
use crate::error::{Error, Result};
use crate::rng;

/// One step of a layer stack. Layers flagged `tap` expose their
/// pre-activation output for feature distillation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Conv {
        name: String,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        tap: bool,
    },
    Dense {
        name: String,
        out: usize,
        tap: bool,
    },
    /// The model's activation function.
    Activation,
    MeanPool {
        k: usize,
    },
    Flatten,
    /// `conv_a -> act -> conv_b`, plus identity skip. Both the `conv_a`
    /// output and the pre-activation sum are taps when `tap` is set. The
    /// activation after the sum is a separate layer.
    Residual {
        name: String,
        tap: bool,
    },
    /// Exposes the current value as a tap.
    Tap,
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Image(usize, usize, usize),
    Flat(usize),
}

struct ParamInfo {
    name: String,
    shape: Vec<usize>,
    fan_in: usize,
    bias: bool,
}

/// Walks the stack once, checking shapes and collecting parameter shapes.
fn plan(input: [usize; 3], classes: usize, layers: &[Layer]) -> Result<(Vec<ParamInfo>, usize)> {
    let bad = |reason: String| Error::invalid("layers", reason);
    let mut shape = Shape::Image(input[0], input[1], input[2]);
    let mut params = Vec::new();
    let mut taps = 0;
    let push_conv = |params: &mut Vec<ParamInfo>, name: String, o: usize, c: usize, k: usize| {
        params.push(ParamInfo {
            name: format!("{name}.weight"),
            shape: vec![o, c, k, k],
            fan_in: c * k * k,
            bias: false,
        });
        params.push(ParamInfo {
            name: format!("{name}.bias"),
            shape: vec![o],
            fan_in: c * k * k,
            bias: true,
        });
    };
    for layer in layers {
        shape = match (layer, shape) {
            (
                Layer::Conv {
                    name,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    tap,
                },
                Shape::Image(c, h, w),
            ) => {
                if *stride == 0 || h + 2 * padding < *kernel || w + 2 * padding < *kernel {
                    return Err(bad(format!("conv {name} does not fit a {h}x{w} input")));
                }
                push_conv(&mut params, name.clone(), *out_channels, c, *kernel);
                taps += *tap as usize;
                Shape::Image(
                    *out_channels,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                )
            }
            (Layer::Residual { name, tap }, Shape::Image(c, h, w)) => {
                push_conv(&mut params, format!("{name}.a"), c, c, 3);
                push_conv(&mut params, format!("{name}.b"), c, c, 3);
                taps += 2 * (*tap as usize);
                Shape::Image(c, h, w)
            }
            (Layer::Dense { name, out, tap }, Shape::Flat(n)) => {
                params.push(ParamInfo {
                    name: format!("{name}.weight"),
                    shape: vec![*out, n],
                    fan_in: n,
                    bias: false,
                });
                params.push(ParamInfo {
                    name: format!("{name}.bias"),
                    shape: vec![*out],
                    fan_in: n,
                    bias: true,
                });
                taps += *tap as usize;
                Shape::Flat(*out)
            }
            (Layer::MeanPool { k }, Shape::Image(c, h, w)) => {
                if *k == 0 || h < *k || w < *k {
                    return Err(bad(format!("mean pool {k} over {h}x{w}")));
                }
                Shape::Image(c, h / k, w / k)
            }
            (Layer::Flatten, Shape::Image(c, h, w)) => Shape::Flat(c * h * w),
            (Layer::Flatten, s @ Shape::Flat(_)) => s,
            (Layer::Activation, s) => s,
            (Layer::Tap, s) => {
                taps += 1;
                s
            }
            (l, s) => return Err(bad(format!("{l:?} cannot follow {s:?}"))),
        };
    }
    match shape {
        Shape::Flat(n) if n == classes => Ok((params, taps)),
        s => Err(bad(format!("stack ends in {s:?}, expected {classes} logits"))),
    }
}

fn conv(name: &str, out_channels: usize, stride: usize) -> Layer {
    Layer::Conv {
        name: name.into(),
        out_channels,
        kernel: 3,
        stride,
        padding: 1,
        tap: true,
    }
}

fn dense(name: &str, out: usize) -> Layer {
    Layer::Dense {
        name: name.into(),
        out,
        tap: true,
    }
}

pub fn architecture_layers(spec: &ModelSpec) -> Vec<Layer> {
    let w = spec.width;
    let c = spec.classes;
    match spec.architecture {
        Architecture::MlpSmall => vec![
            Layer::Flatten,
            dense("fc1", 64 * w),
            Layer::Activation,
            dense("fc2", 32 * w),
            Layer::Activation,
            dense("logits", c),
        ],
        Architecture::CnnSmall => vec![
            conv("conv1", 8 * w, 1),
            Layer::Activation,
            conv("conv2", 16 * w, 2),
            Layer::Activation,
            Layer::MeanPool { k: 2 },
            Layer::Flatten,
            Layer::Tap,
            dense("logits", c),
        ],
        Architecture::CnnResidual => vec![
            conv("conv1", 8 * w, 1),
            Layer::Activation,
            Layer::Residual {
                name: "block".into(),
                tap: true,
            },
            Layer::Activation,
            conv("conv2", 16 * w, 2),
            Layer::Activation,
            Layer::MeanPool { k: 2 },
            Layer::Flatten,
            Layer::Tap,
            dense("logits", c),
        ],
    }
}

/// A feed-forward classifier whose intermediate pre-activation outputs
/// ("taps", numbered from 1) are addressable.
#[derive(Clone, Debug, PartialEq)]
pub struct LayeredModel<T: Element = f32> {
    id: String,
    spec: Option<ModelSpec>,
    input_shape: [usize; 3],
    classes: usize,
    activation: Activation,
    layers: Vec<Layer>,
    params: ParamMap<T>,
    tap_count: usize,
    frozen: bool,
}

/// Builds a model from a named architecture with seeded fan-in-scaled
/// uniform initialization.
pub fn build_model<T: Element>(spec: &ModelSpec) -> Result<LayeredModel<T>> {
    spec.validate()?;
    let layers = architecture_layers(spec);
    let (infos, tap_count) = plan(spec.input_shape, spec.classes, &layers)?;
    let mut rng = rng::stream(spec.seed, "init", &[]);
    let mut params = ParamMap::new();
    for info in infos {
        let bound = if info.bias {
            1.0 / (info.fan_in as f64).sqrt()
        } else {
            (6.0 / info.fan_in as f64).sqrt()
        };
        let n: usize = info.shape.iter().product();
        let data = (0..n)
            .map(|_| T::of(rng.random_range(-bound..bound)))
            .collect();
        params.insert(info.name, Tensor::new(info.shape, data)?);
    }
    Ok(LayeredModel {
        id: format!("{}-{}", spec.architecture, spec.seed),
        spec: Some(spec.clone()),
        input_shape: spec.input_shape,
        classes: spec.classes,
        activation: spec.activation,
        layers,
        params,
        tap_count,
        frozen: false,
    })
}

impl<T: Element> LayeredModel<T> {
    /// Assembles a model from an explicit layer stack and parameter values.
    pub fn from_layers(
        id: impl Into<String>,
        input_shape: [usize; 3],
        classes: usize,
        activation: Activation,
        layers: Vec<Layer>,
        params: ParamMap<T>,
    ) -> Result<Self> {
        let (infos, tap_count) = plan(input_shape, classes, &layers)?;
        if infos.len() != params.len() {
            return Err(Error::invalid(
                "params",
                format!("expected {} tensors, got {}", infos.len(), params.len()),
            ));
        }
        for info in &infos {
            match params.get(&info.name) {
                Some(t) if t.shape() == info.shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::invalid(
                        "params",
                        format!("{} has shape {:?}, expected {:?}", info.name, t.shape(), info.shape),
                    ))
                }
                None => return Err(Error::invalid("params", format!("missing {}", info.name))),
            }
        }
        Ok(Self {
            id: id.into(),
            spec: None,
            input_shape,
            classes,
            activation,
            layers,
            params,
            tap_count,
            frozen: false,
        })
    }

    pub(crate) fn with_spec(mut self, spec: Option<ModelSpec>) -> Self {
        self.spec = spec;
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn set_id(&mut self, id: impl Into<String>) {
        self.id = id.into();
    }

    pub fn spec(&self) -> Option<&ModelSpec> {
        self.spec.as_ref()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn tap_count(&self) -> usize {
        self.tap_count
    }

    pub fn params(&self) -> &ParamMap<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamMap<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Frozen models are skipped by parameter updates during training.
    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn check_tap(&self, l: usize) -> Result<()> {
        if l == 0 || l > self.tap_count {
            return Err(Error::TapOutOfRange {
                index: l,
                tap_count: self.tap_count,
            });
        }
        Ok(())
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let sh = x.shape();
        if sh.len() != 4 || sh[1..] != self.input_shape {
            let mut expected = vec![sh.first().copied().unwrap_or(0)];
            expected.extend_from_slice(&self.input_shape);
            return Err(Error::InputShape {
                expected,
                found: sh.to_vec(),
            });
        }
        Ok(())
    }

    pub fn compile(&self) -> ModelGraph<T> {
        let mut g = Graph::new();
        let input = g.leaf("input");
        let mut params = Vec::new();
        let mut taps = Vec::new();
        let mut cur = input;
        let mut leaf = |g: &mut Graph<T>, name: String| {
            let id = g.leaf(name.clone());
            params.push((name, id));
            id
        };
        for layer in &self.layers {
            cur = match layer {
                Layer::Conv {
                    name,
                    stride,
                    padding,
                    tap,
                    ..
                } => {
                    let w = leaf(&mut g, format!("{name}.weight"));
                    let b = leaf(&mut g, format!("{name}.bias"));
                    let y = g.conv2d(cur, w, Some(b), *stride, *padding);
                    if *tap {
                        taps.push(y);
                    }
                    y
                }
                Layer::Dense { name, tap, .. } => {
                    let w = leaf(&mut g, format!("{name}.weight"));
                    let b = leaf(&mut g, format!("{name}.bias"));
                    let y = g.dense(cur, w, Some(b));
                    if *tap {
                        taps.push(y);
                    }
                    y
                }
                Layer::Residual { name, tap } => {
                    let wa = leaf(&mut g, format!("{name}.a.weight"));
                    let ba = leaf(&mut g, format!("{name}.a.bias"));
                    let a = g.conv2d(cur, wa, Some(ba), 1, 1);
                    let act = match self.activation {
                        Activation::Relu => g.relu(a),
                        Activation::LeakyRelu => g.leaky_relu(a),
                    };
                    let wb = leaf(&mut g, format!("{name}.b.weight"));
                    let bb = leaf(&mut g, format!("{name}.b.bias"));
                    let b = g.conv2d(act, wb, Some(bb), 1, 1);
                    let sum = g.add(b, cur);
                    if *tap {
                        taps.push(a);
                        taps.push(sum);
                    }
                    sum
                }
                Layer::Activation => match self.activation {
                    Activation::Relu => g.relu(cur),
                    Activation::LeakyRelu => g.leaky_relu(cur),
                },
                Layer::MeanPool { k } => g.mean_pool(cur, *k),
                Layer::Flatten => g.flatten(cur),
                Layer::Tap => {
                    taps.push(cur);
                    cur
                }
            };
        }
        g.set_output(cur);
        ModelGraph {
            graph: g,
            input,
            params,
            taps,
            logits: cur,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut mg = self.compile();
        mg.run(self, x, GradMode::None, Stop::Logits)?;
        Ok(mg.logits().clone())
    }

    /// Logits and the pre-activation output of tap `l` (1-based).
    pub fn forward_with_tap(&self, x: &Tensor<T>, l: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_tap(l)?;
        self.check_input(x)?;
        let mut mg = self.compile();
        mg.run(self, x, GradMode::None, Stop::Logits)?;
        Ok((mg.logits().clone(), mg.tap(l).clone()))
    }

    /// Row-wise softmax of the logits.
    pub fn probabilities(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut p = self.forward(x)?;
        let c = self.classes;
        for row in p.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        Ok(p)
    }
}

/// Which leaves receive gradients in a [`ModelGraph`] run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    None,
    Input,
    Params,
    Both,
}

impl GradMode {
    fn input(self) -> bool {
        matches!(self, GradMode::Input | GradMode::Both)
    }

    fn params(self) -> bool {
        matches!(self, GradMode::Params | GradMode::Both)
    }
}

/// Where a forward pass may stop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stop {
    Logits,
    Tap(usize),
}

#[derive(Clone, Debug, Default)]
pub struct ModelGrads<T: Element = f32> {
    pub input: Option<Tensor<T>>,
    pub params: ParamMap<T>,
}

/// A compiled model graph, reusable across forward passes of any batch size.
#[derive(Clone, Debug)]
pub struct ModelGraph<T: Element = f32> {
    graph: Graph<T>,
    input: NodeId,
    params: Vec<(String, NodeId)>,
    taps: Vec<NodeId>,
    logits: NodeId,
}

impl<T: Element> ModelGraph<T> {
    fn stop_node(&self, stop: Stop) -> NodeId {
        match stop {
            Stop::Logits => self.logits,
            Stop::Tap(l) => self.taps[l - 1],
        }
    }

    pub fn run(&mut self, model: &LayeredModel<T>, x: &Tensor<T>, grad: GradMode, stop: Stop) -> Result<()> {
        model.check_input(x)?;
        if let Stop::Tap(l) = stop {
            model.check_tap(l)?;
        }
        let mut b = Bindings::new();
        b.bind_with_grad(self.input, x, grad.input());
        for (name, id) in &self.params {
            b.bind_with_grad(*id, &model.params()[name], grad.params());
        }
        let node = self.stop_node(stop);
        self.graph.evaluate_until(&b, node)?;
        Ok(())
    }

    pub fn logits(&self) -> &Tensor<T> {
        self.graph.value(self.logits).expect("forward ran to the logits")
    }

    pub fn tap(&self, l: usize) -> &Tensor<T> {
        self.graph.value(self.taps[l - 1]).expect("forward ran past this tap")
    }

    /// Backpropagates seeds placed on the logits and/or taps.
    pub fn backward(&mut self, seeds: &[(Stop, &Tensor<T>)]) -> Result<ModelGrads<T>> {
        let seeds: Vec<(NodeId, &Tensor<T>)> = seeds.iter().map(|(s, t)| (self.stop_node(*s), *t)).collect();
        let mut grads = self.graph.backward_from(&seeds)?;
        let input = grads.remove(&self.input);
        let mut params = ParamMap::new();
        for (name, id) in &self.params {
            if let Some(g) = grads.remove(id) {
                params.insert(name.clone(), g);
            }
        }
        Ok(ModelGrads { input, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(arch: &str) -> ModelSpec {
        ModelSpec::new(arch, [1, 16, 16], 10, 11).unwrap()
    }

    fn batch(n: usize) -> Tensor<f32> {
        let data = (0..n * 256).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        Tensor::new(vec![n, 1, 16, 16], data).unwrap()
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        for arch in ["mlp-small", "cnn-small", "cnn-residual"] {
            let a: LayeredModel = build_model(&spec(arch)).unwrap();
            let b: LayeredModel = build_model(&spec(arch)).unwrap();
            assert_eq!(a.params(), b.params());
            let c: LayeredModel = build_model(&spec(arch).with_seed(12)).unwrap();
            assert_ne!(a.params(), c.params());
        }
    }

    #[test]
    fn cnn_small_emits_one_logit_per_class() {
        let m: LayeredModel = build_model(&spec("cnn-small")).unwrap();
        let y = m.forward(&batch(3)).unwrap();
        assert_eq!(y.shape(), &[3, 10]);
        assert_eq!(m.tap_count(), 4);
    }

    #[test]
    fn every_architecture_has_at_least_three_taps() {
        for arch in Architecture::ALL {
            let m: LayeredModel = build_model(&spec(arch.name())).unwrap();
            assert!(m.tap_count() >= 3, "{arch}");
        }
    }

    #[test]
    fn wider_models_have_more_parameters() {
        for arch in Architecture::ALL {
            let narrow: LayeredModel = build_model(&spec(arch.name())).unwrap();
            let wide: LayeredModel = build_model(&spec(arch.name()).with_width(2)).unwrap();
            assert!(wide.param_count() > narrow.param_count());
        }
    }

    #[test]
    fn last_tap_is_the_logit_layer() {
        let m: LayeredModel = build_model(&spec("cnn-small")).unwrap();
        let (logits, tap) = m.forward_with_tap(&batch(2), m.tap_count()).unwrap();
        assert_eq!(logits, tap);
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut m: LayeredModel = build_model(&spec("cnn-residual")).unwrap();
        for p in m.params_mut().values_mut() {
            p.data_mut().fill(0.0);
        }
        let y = m.forward(&batch(2)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tap_index_is_validated() {
        let m: LayeredModel = build_model(&spec("mlp-small")).unwrap();
        assert!(matches!(
            m.forward_with_tap(&batch(1), 0),
            Err(Error::TapOutOfRange { .. })
        ));
        assert!(matches!(
            m.forward_with_tap(&batch(1), 4),
            Err(Error::TapOutOfRange { .. })
        ));
    }

    #[test]
    fn input_shape_is_validated() {
        let m: LayeredModel = build_model(&spec("cnn-small")).unwrap();
        let x = Tensor::<f32>::zeros(&[1, 1, 8, 8]);
        assert!(matches!(m.forward(&x), Err(Error::InputShape { .. })));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        for arch in Architecture::ALL {
            let m: LayeredModel = build_model(&spec(arch.name())).unwrap();
            let p = m.probabilities(&batch(4)).unwrap();
            for row in p.data().chunks(10) {
                let s: f32 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-5);
                assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }

    #[test]
    fn from_layers_checks_parameter_shapes() {
        let layers = vec![Layer::Flatten, dense("out", 2)];
        let mut params = ParamMap::<f64>::new();
        params.insert("out.weight".into(), Tensor::zeros(&[2, 3]));
        params.insert("out.bias".into(), Tensor::zeros(&[2]));
        assert!(LayeredModel::from_layers("m", [1, 1, 3], 2, Activation::Relu, layers.clone(), params.clone()).is_ok());
        params.insert("out.bias".into(), Tensor::zeros(&[3]));
        assert!(LayeredModel::from_layers("m", [1, 1, 3], 2, Activation::Relu, layers, params).is_err());
    }
}
