//! Feature distillation: find `z` near a source image whose tap-`l`
//! representation matches that of a target image,
//! `argmin_z ‖f^l(z) − f^l(x)‖²` subject to `‖z − x_s‖∞ ≤ ε`, `z ∈ [0, 1]`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{check_unit_range, search, Schedule};
use crate::engine::{Element, Tensor};
use crate::error::{Error, Result};
use crate::models::{GradMode, LayeredModel, Stop};

fn one() -> f32 {
    1.0
}

fn ten() -> usize {
    10
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSpec {
    pub epsilon: f32,
    #[serde(default = "ten")]
    pub steps: usize,
    /// Defaults to ε/10 when absent.
    #[serde(default)]
    pub step_size: Option<f32>,
    #[serde(default = "one")]
    pub momentum: f32,
    /// Tap index, 1-based.
    pub layer: usize,
    /// Return the lowest-objective iterate rather than the last one.
    #[serde(default = "yes")]
    pub best_iterate: bool,
}

impl DistillSpec {
    pub fn new(epsilon: f32, layer: usize) -> Self {
        Self {
            epsilon,
            steps: 10,
            step_size: None,
            momentum: 1.0,
            layer,
            best_iterate: true,
        }
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn with_step_size(mut self, step_size: f32) -> Self {
        self.step_size = Some(step_size);
        self
    }

    pub fn with_momentum(mut self, momentum: f32) -> Self {
        self.momentum = momentum;
        self
    }

    pub fn with_layer(mut self, layer: usize) -> Self {
        self.layer = layer;
        self
    }

    pub fn with_best_iterate(mut self, best_iterate: bool) -> Self {
        self.best_iterate = best_iterate;
        self
    }

    pub fn effective_step_size(&self) -> f32 {
        self.step_size.unwrap_or(self.epsilon / 10.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid("epsilon", format!("{} is not a finite non-negative radius", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(Error::invalid("steps", "must be positive"));
        }
        let step = self.effective_step_size();
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::invalid("step_size", format!("{step} must be positive")));
        }
        if !(self.momentum >= 0.0 && self.momentum.is_finite()) {
            return Err(Error::invalid("momentum", format!("{} must be non-negative", self.momentum)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistilledBatch<T: Element = f32> {
    pub distilled: Tensor<T>,
    pub sources: Tensor<T>,
    pub source_labels: Vec<usize>,
    pub targets: Tensor<T>,
    pub target_labels: Vec<usize>,
    pub layer: usize,
    pub epsilon: T,
    /// `‖f^l(x′) − f^l(x)‖₂` per row.
    pub objective_values: Vec<T>,
}

impl<T: Element> DistilledBatch<T> {
    pub fn len(&self) -> usize {
        self.source_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_labels.is_empty()
    }

    pub fn mean_objective(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.objective_values.iter().map(|v| v.as_f64()).sum::<f64>() / self.len() as f64
    }
}

/// `‖f^l(z) − f^l(x)‖²` per row.
pub fn distill_objective<T: Element>(model: &LayeredModel<T>, layer: usize, z: &Tensor<T>, x: &Tensor<T>) -> Result<Vec<T>> {
    let (_, fz) = model.forward_with_tap(z, layer)?;
    let (_, fx) = model.forward_with_tap(x, layer)?;
    Ok(squared_distance(&fz, &fx))
}

fn squared_distance<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Vec<T> {
    let d = a.row_len();
    a.data()
        .chunks(d)
        .zip(b.data().chunks(d))
        .map(|(p, q)| p.iter().zip(q).map(|(&u, &v)| (u - v) * (u - v)).sum())
        .collect()
}

fn distill_rows<T: Element>(model: &LayeredModel<T>, spec: &DistillSpec, x: &Tensor<T>, xs: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
    let l = spec.layer;
    let mut graph = model.compile();
    graph.run(model, x, GradMode::None, Stop::Tap(l))?;
    let goal = graph.tap(l).clone();
    let sched = Schedule {
        epsilon: T::of(spec.epsilon as f64),
        steps: spec.steps,
        step_size: T::of(spec.effective_step_size() as f64),
        momentum: T::of(spec.momentum as f64),
        maximize: false,
    };
    let two = T::of(2.0);
    let run = search(xs, xs.clone(), sched, |z, want| {
        let mode = if want { GradMode::Input } else { GradMode::None };
        graph.run(model, z, mode, Stop::Tap(l))?;
        let fz = graph.tap(l);
        let values = squared_distance(fz, &goal);
        if !want {
            return Ok((values, None));
        }
        let mut seed = fz.clone();
        for (s, &g) in seed.data_mut().iter_mut().zip(goal.data()) {
            *s = two * (*s - g);
        }
        let grad = graph.backward(&[(Stop::Tap(l), &seed)])?.input;
        Ok((values, grad))
    })?;
    Ok(if spec.best_iterate {
        (run.best, run.best_value)
    } else {
        (run.last, run.last_value)
    })
}

const CHUNK_ROWS: usize = 32;

/// Distils the tap-`l` features of `targets` into images near `sources`.
///
/// The search starts at `z = x_s` without a random offset; `seed` is kept for
/// interface symmetry with the attacks and does not influence the result.
pub fn distill_features<T: Element>(
    model: &LayeredModel<T>,
    spec: &DistillSpec,
    targets: (&Tensor<T>, &[usize]),
    sources: (&Tensor<T>, &[usize]),
    _seed: u64,
) -> Result<DistilledBatch<T>> {
    spec.validate()?;
    model.check_tap(spec.layer)?;
    let (x, y) = targets;
    let (xs, ys) = sources;
    model.check_input(x)?;
    model.check_input(xs)?;
    if x.rows() != xs.rows() || y.len() != x.rows() || ys.len() != xs.rows() {
        return Err(Error::invalid(
            "batch",
            format!("{} targets/{} labels vs {} sources/{} labels", x.rows(), y.len(), xs.rows(), ys.len()),
        ));
    }
    check_unit_range(xs, "source images")?;
    let rows = x.rows();
    let (distilled, sq) = if rayon::current_num_threads() <= 1 || rows <= CHUNK_ROWS {
        distill_rows(model, spec, x, xs)?
    } else {
        let parts = (0..rows)
            .step_by(CHUNK_ROWS)
            .collect::<Vec<_>>()
            .par_iter()
            .map(|&s| {
                let idx: Vec<usize> = (s..(s + CHUNK_ROWS).min(rows)).collect();
                distill_rows(model, spec, &x.select_rows(&idx), &xs.select_rows(&idx))
            })
            .collect::<Result<Vec<_>>>()?;
        let z = Tensor::concat_rows(&parts.iter().map(|p| &p.0).collect::<Vec<_>>())?;
        (z, parts.into_iter().flat_map(|p| p.1).collect())
    };
    Ok(DistilledBatch {
        distilled,
        sources: xs.clone(),
        source_labels: ys.to_vec(),
        targets: x.clone(),
        target_labels: y.to_vec(),
        layer: spec.layer,
        epsilon: T::of(spec.epsilon as f64),
        objective_values: sq.into_iter().map(|v| v.sqrt()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::ParamMap;
    use crate::models::{build_model, Activation, Layer, ModelSpec};

    /// Model whose first tap is the flattened input itself.
    fn identity_tap(d: usize) -> LayeredModel<f64> {
        let mut w = Tensor::zeros(&[d, d]);
        for i in 0..d {
            w.data_mut()[i * d + i] = 1.0;
        }
        let mut p = ParamMap::new();
        p.insert("id.weight".into(), w);
        p.insert("id.bias".into(), Tensor::zeros(&[d]));
        p.insert("out.weight".into(), Tensor::zeros(&[2, d]));
        p.insert("out.bias".into(), Tensor::zeros(&[2]));
        let layers = vec![
            Layer::Flatten,
            Layer::Dense {
                name: "id".into(),
                out: d,
                tap: true,
            },
            Layer::Activation,
            Layer::Dense {
                name: "out".into(),
                out: 2,
                tap: true,
            },
        ];
        LayeredModel::from_layers("identity", [1, 1, d], 2, Activation::Relu, layers, p).unwrap()
    }

    fn images(seed: usize, n: usize, d: usize) -> Tensor<f64> {
        Tensor::new(vec![n, 1, 1, d], (0..n * d).map(|i| (((i + seed) * 7919) % 1000) as f64 / 999.0).collect()).unwrap()
    }

    #[test]
    fn source_equal_to_target_is_a_fixed_point() {
        let m: LayeredModel = build_model(&ModelSpec::new("cnn-small", [1, 8, 8], 3, 1).unwrap()).unwrap();
        let x = Tensor::new(vec![2, 1, 8, 8], (0..128).map(|i| (i % 11) as f32 / 10.0).collect()).unwrap();
        let out = distill_features(&m, &DistillSpec::new(0.1, 2), (&x, &[0, 1]), (&x, &[0, 1]), 0).unwrap();
        assert_eq!(out.distilled, x);
        assert_eq!(out.objective_values, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_tap_distils_to_the_clamped_target() {
        let d = 6;
        let m = identity_tap(d);
        let x = images(0, 5, d);
        let xs = images(3, 5, d);
        let eps = 0.2;
        let labels = [0; 5];
        for (mu, tol) in [(0.0, eps / 10.0), (1.0, eps)] {
            let spec = DistillSpec::new(eps as f32, 1).with_momentum(mu as f32);
            let out = distill_features(&m, &spec, (&x, &labels), (&xs, &labels), 0).unwrap();
            for i in 0..x.len() {
                let a = xs.data()[i];
                let want = x.data()[i].clamp(a - eps, a + eps).clamp(0.0, 1.0);
                assert!((out.distilled.data()[i] - want).abs() <= tol + 1e-6, "mu {mu} elem {i}");
            }
        }
    }

    #[test]
    fn layer_out_of_range_is_rejected() {
        let m = identity_tap(2);
        let x = images(0, 1, 2);
        let err = distill_features(&m, &DistillSpec::new(0.1, 3), (&x, &[0]), (&x, &[0]), 0);
        assert!(matches!(err, Err(Error::TapOutOfRange { index: 3, tap_count: 2 })));
    }

    #[test]
    fn distillation_never_worsens_the_start() {
        let m: LayeredModel = build_model(&ModelSpec::new("cnn-small", [1, 8, 8], 3, 4).unwrap()).unwrap();
        let x = Tensor::new(vec![4, 1, 8, 8], (0..256).map(|i| ((i * 13) % 17) as f32 / 16.0).collect()).unwrap();
        let xs = Tensor::new(vec![4, 1, 8, 8], (0..256).map(|i| ((i * 5) % 19) as f32 / 18.0).collect()).unwrap();
        for l in 1..=m.tap_count() {
            let spec = DistillSpec::new(0.05, l);
            let out = distill_features(&m, &spec, (&x, &[0; 4]), (&xs, &[1; 4]), 0).unwrap();
            let start = distill_objective(&m, l, &xs, &x).unwrap();
            for (v, s) in out.objective_values.iter().zip(start) {
                assert!(v * v <= s * (1.0 + 1e-6));
            }
        }
    }
}
