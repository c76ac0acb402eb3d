//! L∞-bounded adversarial examples by momentum sign-gradient PGD with random
//! restarts, against a single model or a probability-averaging ensemble.

mod pgd;
mod target;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub(crate) use pgd::{search, Schedule};
pub use target::{AttackTarget, Probe};

use crate::engine::{Element, Tensor};
use crate::error::{Error, Result};
pub use crate::loss::{attack_loss, LossKind};
use crate::models::Classifier;
use crate::rng;

fn one() -> f32 {
    1.0
}

fn one_restart() -> usize {
    1
}

/// Search configuration of an attack: the L∞ ball and how δ is optimised.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub epsilon: f32,
    pub steps: usize,
    pub step_size: f32,
    /// Decay of the accumulated normalised gradient; 0 gives plain PGD.
    #[serde(default = "one")]
    pub momentum: f32,
    #[serde(default = "one_restart")]
    pub restarts: usize,
    /// Restart 0 starts from δ = 0 instead of a uniform draw.
    #[serde(default)]
    pub start_at_zero: bool,
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default)]
    pub targeted: bool,
    #[serde(default)]
    pub target_labels: Option<Vec<usize>>,
}

impl AttackSpec {
    pub fn new(epsilon: f32, steps: usize, step_size: f32) -> Self {
        Self {
            epsilon,
            steps,
            step_size,
            momentum: 1.0,
            restarts: 1,
            start_at_zero: false,
            loss: LossKind::Ce,
            targeted: false,
            target_labels: None,
        }
    }

    /// White-box protocol: plain PGD, 50 steps of ε/5, five random starts.
    pub fn evaluation(epsilon: f32) -> Self {
        Self::new(epsilon, 50, (epsilon / 5.0).max(f32::MIN_POSITIVE))
            .with_restarts(5)
            .with_momentum(0.0)
    }

    pub fn with_momentum(mut self, momentum: f32) -> Self {
        self.momentum = momentum;
        self
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }

    pub fn with_start_at_zero(mut self, start_at_zero: bool) -> Self {
        self.start_at_zero = start_at_zero;
        self
    }

    pub fn with_loss(mut self, loss: LossKind) -> Self {
        self.loss = loss;
        self
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn targeted_at(mut self, labels: Vec<usize>) -> Self {
        self.targeted = true;
        self.target_labels = Some(labels);
        self
    }

    /// The same schedule at another radius, step size scaled with ε.
    pub fn at_epsilon(&self, epsilon: f32) -> Self {
        let mut s = self.clone();
        if self.epsilon > 0.0 && epsilon > 0.0 {
            s.step_size = self.step_size * epsilon / self.epsilon;
        }
        s.epsilon = epsilon;
        s
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid("epsilon", format!("{} is not a finite non-negative radius", self.epsilon)));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid("step_size", format!("{} must be positive", self.step_size)));
        }
        if !(self.momentum >= 0.0 && self.momentum.is_finite()) {
            return Err(Error::invalid("momentum", format!("{} must be non-negative", self.momentum)));
        }
        if self.steps == 0 {
            return Err(Error::invalid("steps", "must be positive"));
        }
        if self.restarts == 0 {
            return Err(Error::invalid("restarts", "must be at least 1"));
        }
        if self.targeted && self.target_labels.is_none() {
            return Err(Error::invalid("target_labels", "required for a targeted attack"));
        }
        Ok(())
    }
}

/// Adversarial examples with their per-row outcome against the generation
/// target.
#[derive(Clone, Debug, PartialEq)]
pub struct AdvBatch<T: Element = f32> {
    pub originals: Tensor<T>,
    pub adversarials: Tensor<T>,
    pub labels: Vec<usize>,
    /// Untargeted: the target misclassifies the row. Targeted: it predicts
    /// the requested label.
    pub success_mask: Vec<bool>,
    /// Attack loss at the returned adversarial (against the target labels
    /// when targeted).
    pub final_loss: Vec<T>,
    pub epsilon: T,
    /// The gradient was zero for the whole batch at every step of every
    /// restart; the result is the best starting point.
    pub zero_gradient: bool,
}

impl<T: Element> AdvBatch<T> {
    /// Largest L∞ distance of any row from its original.
    pub fn max_perturbation(&self) -> T {
        self.adversarials.max_abs_diff(&self.originals)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub(crate) fn check_unit_range<T: Element>(x: &Tensor<T>, what: &'static str) -> Result<()> {
    if x.data().iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
        return Err(Error::invalid(what, "values must lie in [0, 1]"));
    }
    Ok(())
}

/// Uniform start in the ε-ball around `x`, clipped to `[0, 1]`, drawn per row
/// so the result does not depend on how rows are grouped.
fn random_start<T: Element>(x: &Tensor<T>, epsilon: f32, seed: u64, restart: usize, first_row: usize) -> Tensor<T> {
    let mut out = x.clone();
    if epsilon == 0.0 {
        return out;
    }
    let eps = epsilon as f64;
    for r in 0..x.rows() {
        let mut g = rng::stream(seed, "pgd-start", &[restart as u64, (first_row + r) as u64]);
        for v in out.row_mut(r) {
            *v = T::of((v.as_f64() + g.random_range(-eps..=eps)).clamp(0.0, 1.0));
        }
    }
    out
}

fn attack_rows<T: Element, C: Classifier<T> + ?Sized>(
    target: &C,
    x: &Tensor<T>,
    labels: &[usize],
    objective_labels: &[usize],
    spec: &AttackSpec,
    seed: u64,
    first_row: usize,
) -> Result<AdvBatch<T>> {
    let mut t = AttackTarget::new(target)?;
    let sched = Schedule {
        epsilon: T::of(spec.epsilon as f64),
        steps: spec.steps,
        step_size: T::of(spec.step_size as f64),
        momentum: T::of(spec.momentum as f64),
        maximize: true,
    };
    let sign = if spec.targeted { -T::one() } else { T::one() };
    let mut best: Option<(Tensor<T>, Vec<T>)> = None;
    let mut zero_gradient = true;
    for restart in 0..spec.restarts {
        let start = if restart == 0 && spec.start_at_zero {
            x.clone()
        } else {
            random_start(x, spec.epsilon, seed, restart, first_row)
        };
        let run = search(x, start, sched, |z, want| {
            let p = t.probe(z, objective_labels, spec.loss, want)?;
            let grad = p.grad.map(|mut g| {
                if spec.targeted {
                    g.data_mut().iter_mut().for_each(|v| *v = -*v);
                }
                g
            });
            Ok((p.losses.into_iter().map(|l| sign * l).collect(), grad))
        })?;
        zero_gradient &= run.zero_gradient;
        best = Some(match best {
            None => (run.best, run.best_value),
            Some((mut bx, mut bv)) => {
                for r in 0..bv.len() {
                    if run.best_value[r] > bv[r] {
                        bv[r] = run.best_value[r];
                        bx.row_mut(r).copy_from_slice(run.best.row(r));
                    }
                }
                (bx, bv)
            }
        });
    }
    let (adversarials, _) = best.expect("at least one restart");
    let probe = t.probe(&adversarials, objective_labels, spec.loss, false)?;
    let success_mask = probe
        .predicted
        .iter()
        .zip(objective_labels)
        .map(|(&p, &y)| if spec.targeted { p == y } else { p != y })
        .collect();
    Ok(AdvBatch {
        originals: x.clone(),
        adversarials,
        labels: labels.to_vec(),
        success_mask,
        final_loss: probe.losses,
        epsilon: T::of(spec.epsilon as f64),
        zero_gradient,
    })
}

/// Rows per parallel work item; results do not depend on the grouping.
const CHUNK_ROWS: usize = 32;

/// Momentum PGD with restarts; per row, the highest-objective iterate over
/// all restarts (start points included) is returned.
pub fn pgd_attack<T: Element, C: Classifier<T> + ?Sized>(
    target: &C,
    x: &Tensor<T>,
    labels: &[usize],
    spec: &AttackSpec,
    seed: u64,
) -> Result<AdvBatch<T>> {
    spec.validate()?;
    check_unit_range(x, "attack input")?;
    let classes = target.classes();
    if labels.len() != x.rows() {
        return Err(Error::invalid("labels", format!("{} labels for {} rows", labels.len(), x.rows())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let objective: &[usize] = if spec.targeted {
        let t = spec.target_labels.as_deref().expect("validated");
        if t.len() != labels.len() {
            return Err(Error::invalid("target_labels", format!("{} targets for {} rows", t.len(), labels.len())));
        }
        t
    } else {
        labels
    };
    let rows = x.rows();
    if rayon::current_num_threads() <= 1 || rows <= CHUNK_ROWS {
        return attack_rows(target, x, labels, objective, spec, seed, 0);
    }
    let starts: Vec<usize> = (0..rows).step_by(CHUNK_ROWS).collect();
    let parts = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + CHUNK_ROWS).min(rows)).collect();
            let xs = x.select_rows(&idx);
            attack_rows(target, &xs, &labels[s..s + idx.len()], &objective[s..s + idx.len()], spec, seed, s)
        })
        .collect::<Result<Vec<_>>>()?;
    merge(parts)
}

fn merge<T: Element>(parts: Vec<AdvBatch<T>>) -> Result<AdvBatch<T>> {
    let originals = Tensor::concat_rows(&parts.iter().map(|p| &p.originals).collect::<Vec<_>>())?;
    let adversarials = Tensor::concat_rows(&parts.iter().map(|p| &p.adversarials).collect::<Vec<_>>())?;
    let zero_gradient = parts.iter().all(|p| p.zero_gradient);
    let epsilon = parts[0].epsilon;
    let mut labels = Vec::new();
    let mut success_mask = Vec::new();
    let mut final_loss = Vec::new();
    for p in parts {
        labels.extend(p.labels);
        success_mask.extend(p.success_mask);
        final_loss.extend(p.final_loss);
    }
    Ok(AdvBatch {
        originals,
        adversarials,
        labels,
        success_mask,
        final_loss,
        epsilon,
        zero_gradient,
    })
}

/// Fraction of adversarials that `evaluator` misclassifies.
pub fn success_rate<T: Element, C: Classifier<T> + ?Sized>(adv: &AdvBatch<T>, evaluator: &C) -> Result<f64> {
    if adv.is_empty() {
        return Ok(0.0);
    }
    let predicted = evaluator.predict_labels(&adv.adversarials)?;
    let wrong = predicted.iter().zip(&adv.labels).filter(|(p, y)| p != y).count();
    Ok(wrong as f64 / adv.len() as f64)
}

/// Gradient of the attack loss w.r.t. the input of an averaged-softmax
/// classifier.
pub fn input_gradient<T: Element, C: Classifier<T> + ?Sized>(
    target: &C,
    x: &Tensor<T>,
    labels: &[usize],
    kind: LossKind,
) -> Result<Tensor<T>> {
    let mut t = AttackTarget::new(target)?;
    Ok(t.probe(x, labels, kind, true)?.grad.expect("gradient requested"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::ParamMap;
    use crate::models::{build_model, Activation, Layer, LayeredModel, ModelSpec};

    /// Two-class logistic model on one feature: logits `[0, w x]`.
    fn logistic(w: f64) -> LayeredModel<f64> {
        let mut p = ParamMap::new();
        p.insert("out.weight".into(), Tensor::from_f64(&[2, 1], &[0.0, w]).unwrap());
        p.insert("out.bias".into(), Tensor::zeros(&[2]));
        let layers = vec![
            Layer::Flatten,
            Layer::Dense {
                name: "out".into(),
                out: 2,
                tap: true,
            },
        ];
        LayeredModel::from_layers("logistic", [1, 1, 1], 2, Activation::Relu, layers, p).unwrap()
    }

    fn cnn() -> LayeredModel {
        build_model(&ModelSpec::new("cnn-small", [1, 8, 8], 5, 3).unwrap()).unwrap()
    }

    fn batch(n: usize) -> (Tensor, Vec<usize>) {
        let x = Tensor::new(vec![n, 1, 8, 8], (0..n * 64).map(|i| ((i * 29) % 97) as f32 / 96.0).collect()).unwrap();
        (x, (0..n).map(|i| i % 5).collect())
    }

    #[test]
    fn one_step_moves_along_the_loss_gradient_sign() {
        let m = logistic(2.0);
        let x = Tensor::from_f64(&[1, 1, 1, 1], &[0.5]).unwrap();
        let spec = AttackSpec::new(0.25, 1, 0.125).with_momentum(0.0).with_start_at_zero(true);
        let adv = pgd_attack(&m, &x, &[0], &spec, 0).unwrap();
        assert_eq!(adv.adversarials.data()[0], 0.625);
    }

    #[test]
    fn zero_radius_returns_the_originals() {
        let m = cnn();
        let (x, y) = batch(6);
        let spec = AttackSpec::new(0.0, 5, 0.01).with_restarts(2);
        let adv = pgd_attack(&m, &x, &y, &spec, 1).unwrap();
        assert_eq!(adv.adversarials, x);
        let clean = m.predict_labels(&x).unwrap();
        let wrong: Vec<bool> = clean.iter().zip(&y).map(|(p, l)| p != l).collect();
        assert_eq!(adv.success_mask, wrong);
    }

    #[test]
    fn success_rate_against_the_target_is_the_mask_mean() {
        let m = cnn();
        let (x, y) = batch(10);
        let adv = pgd_attack(&m, &x, &y, &AttackSpec::new(0.1, 10, 0.02).with_restarts(2), 4).unwrap();
        let mean = adv.success_mask.iter().filter(|&&s| s).count() as f64 / 10.0;
        assert_eq!(success_rate(&adv, &m).unwrap(), mean);
        assert_eq!(success_rate(&adv, &m.clone()).unwrap(), mean);
    }

    #[test]
    fn zero_start_restart_never_loses_loss() {
        let m = cnn();
        let (x, y) = batch(8);
        for kind in [LossKind::Ce, LossKind::Cw] {
            let spec = AttackSpec::new(0.05, 4, 0.01).with_start_at_zero(true).with_restarts(3).with_loss(kind);
            let adv = pgd_attack(&m, &x, &y, &spec, 9).unwrap();
            let clean = attack_loss(&m.forward(&x).unwrap(), &y, kind).unwrap();
            for (a, c) in adv.final_loss.iter().zip(&clean) {
                assert!(a >= c);
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let m = cnn();
        let (x, y) = batch(2);
        assert!(pgd_attack(&m, &x, &y, &AttackSpec::new(0.1, 1, 0.0), 0).is_err());
        assert!(pgd_attack(&m, &x, &y, &AttackSpec::new(-0.1, 1, 0.1), 0).is_err());
        assert!(pgd_attack(&m, &x, &y, &AttackSpec::new(0.1, 1, 0.1).with_restarts(0), 0).is_err());
        assert!(pgd_attack(&m, &x, &[0, 7], &AttackSpec::new(0.1, 1, 0.1), 0).is_err());
    }

    #[test]
    fn targeted_attack_pushes_toward_the_target() {
        let m = cnn();
        let (x, y) = batch(6);
        let targets = vec![1; 6];
        let spec = AttackSpec::new(0.3, 20, 0.03).targeted_at(targets.clone());
        let adv = pgd_attack(&m, &x, &y, &spec, 2).unwrap();
        let before = attack_loss(&m.forward(&x).unwrap(), &targets, LossKind::Ce).unwrap();
        let after: f32 = adv.final_loss.iter().sum();
        assert!(after < before.iter().sum::<f32>());
    }
}
