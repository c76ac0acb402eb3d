//! Robustness evaluation: clean accuracy, white-box sweeps, all-or-nothing
//! transfer robustness, decision-region grids and iteration sweeps.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attacks::{input_gradient, pgd_attack, AttackSpec, LossKind};
use crate::data::Dataset;
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::models::{Classifier, Ensemble, LayeredModel};
use crate::rng;

/// Rows per prediction call, bounding intermediate memory.
const PREDICT_ROWS: usize = 256;

fn predict_all<C: Classifier + ?Sized>(c: &C, x: &Tensor) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(x.rows());
    for start in (0..x.rows()).step_by(PREDICT_ROWS) {
        let idx: Vec<usize> = (start..(start + PREDICT_ROWS).min(x.rows())).collect();
        out.extend(c.predict_labels(&x.select_rows(&idx))?);
    }
    Ok(out)
}

/// Per-row correctness of `c` on `(x, y)`.
pub fn correct_mask<C: Classifier + ?Sized>(c: &C, x: &Tensor, y: &[usize]) -> Result<Vec<bool>> {
    Ok(predict_all(c, x)?.iter().zip(y).map(|(p, l)| p == l).collect())
}

fn fraction(mask: &[bool]) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    mask.iter().filter(|&&b| b).count() as f64 / mask.len() as f64
}

pub fn clean_accuracy<C: Classifier + ?Sized>(c: &C, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    Ok(fraction(&correct_mask(c, data.images(), data.labels())?))
}

/// Rows every member classifies correctly, in dataset order.
pub fn commonly_correct(members: &[LayeredModel], data: &Dataset) -> Result<Vec<usize>> {
    let mut keep = vec![true; data.len()];
    for m in members {
        for (k, ok) in keep.iter_mut().zip(correct_mask(m, data.images(), data.labels())?) {
            *k &= ok;
        }
    }
    Ok((0..data.len()).filter(|&i| keep[i]).collect())
}

/// Up to `n` seeded-random commonly-correct rows, returned in dataset order.
pub fn commonly_correct_sample(members: &[LayeredModel], data: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    use rand::seq::SliceRandom;
    let mut idx = commonly_correct(members, data)?;
    if idx.is_empty() {
        return Err(Error::NoCommonlyCorrect { checked: data.len() });
    }
    idx.shuffle(&mut rng::stream(seed, "eval-pick", &[]));
    idx.truncate(n);
    idx.sort_unstable();
    Ok(data.subset(&idx, "commonly correct"))
}

fn check_ascending(eps: &[f32]) -> Result<()> {
    if eps.windows(2).any(|w| w[0] > w[1]) || eps.iter().any(|e| !(*e >= 0.0)) {
        return Err(Error::invalid("epsilons", "must be non-negative and ascending"));
    }
    Ok(())
}

/// Accuracy under white-box PGD against the ensemble's mean-probability
/// loss, one entry per ε.
///
/// Every restart runs as its own single-start attack and a row counts as
/// broken once any attempt at this or a smaller ε succeeded (attempts at a
/// smaller radius are feasible at a larger one). Clean errors count as broken
/// everywhere.
pub fn whitebox_eval<C: Classifier + ?Sized>(c: &C, eps: &[f32], template: &AttackSpec, data: &Dataset, seed: u64) -> Result<Vec<f64>> {
    check_ascending(eps)?;
    let (x, y) = (data.images(), data.labels());
    let mut broken: Vec<bool> = correct_mask(c, x, y)?.iter().map(|ok| !ok).collect();
    let mut out = Vec::with_capacity(eps.len());
    for (level, &e) in eps.iter().enumerate() {
        if e > 0.0 {
            let spec = template.at_epsilon(e).with_restarts(1);
            for r in 0..template.restarts {
                let s = rng::derive(seed, &[level as u64, r as u64]);
                let adv = pgd_attack(c, x, y, &spec, s)?;
                for (b, hit) in broken.iter_mut().zip(&adv.success_mask) {
                    *b |= hit;
                }
            }
        }
        out.push(fraction(&broken.iter().map(|b| !b).collect::<Vec<_>>()));
    }
    Ok(out)
}

/// Attack configurations applied per surrogate in a black-box evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Battery {
    pub attacks: Vec<AttackSpec>,
}

impl Battery {
    /// Three momentum-PGD random starts with cross-entropy plus one CW-loss
    /// run per surrogate. Step size scales with ε.
    pub fn desk(epsilon: f32) -> Self {
        let pgd = AttackSpec::new(epsilon, 50, (epsilon / 5.0).max(f32::MIN_POSITIVE));
        let mut attacks = vec![pgd.clone(); 3];
        attacks.push(pgd.with_loss(LossKind::Cw));
        Self { attacks }
    }

    pub fn empty() -> Self {
        Self { attacks: Vec::new() }
    }

    pub fn describe(&self, surrogates: usize) -> Vec<String> {
        let mut out = Vec::new();
        for s in 0..surrogates {
            for (k, a) in self.attacks.iter().enumerate() {
                out.push(format!(
                    "surrogate {s} / attack {k}: {:?} loss, {} steps of {}, momentum {}, {} start(s)",
                    a.loss, a.steps, a.step_size, a.momentum, a.restarts
                ));
            }
        }
        out
    }
}

/// All-or-nothing accuracy: a row counts only if the defender classifies the
/// clean input and every battery adversarial from every surrogate correctly.
pub fn blackbox_eval<D: Classifier + ?Sized>(
    defender: &D,
    surrogates: &[Ensemble],
    epsilon: f32,
    battery: &Battery,
    data: &Dataset,
    seed: u64,
) -> Result<f64> {
    if surrogates.is_empty() {
        return Err(Error::Empty("surrogate list"));
    }
    let (x, y) = (data.images(), data.labels());
    let mut credited = correct_mask(defender, x, y)?;
    for (si, s) in surrogates.iter().enumerate() {
        for (ai, attack) in battery.attacks.iter().enumerate() {
            let spec = attack.at_epsilon(epsilon);
            let adv = pgd_attack(s, x, y, &spec, rng::derive(seed, &[si as u64, ai as u64]))?;
            for (c, ok) in credited.iter_mut().zip(correct_mask(defender, &adv.adversarials, y)?) {
                *c &= ok;
            }
        }
    }
    Ok(fraction(&credited))
}

/// Vertical-axis construction of a decision grid.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AxisMode {
    /// Sign of the surrogate's loss gradient at the image.
    #[default]
    SignGradient,
    /// Sign of the perturbation found by a PGD run at the grid radius.
    Pgd { steps: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionGrid {
    pub image_id: usize,
    pub resolution: usize,
    pub epsilon_max: f32,
    pub axis_v: Vec<f32>,
    pub axis_h: Vec<f32>,
    /// `labels[i][j]` at vertical offset `i` and horizontal offset `j`, both
    /// running from `−ε_max` to `+ε_max`.
    pub labels: Vec<Vec<usize>>,
    /// The vertical axis had to fall back to a second random direction.
    pub axis_v_fallback: bool,
}

impl DecisionGrid {
    pub fn offsets(&self) -> Vec<f32> {
        offsets(self.resolution, self.epsilon_max)
    }

    pub fn center_label(&self) -> usize {
        let c = self.resolution / 2;
        self.labels[c][c]
    }
}

fn offsets(g: usize, eps: f32) -> Vec<f32> {
    let c = (g / 2) as f32;
    (0..g).map(|i| if i == g / 2 { 0.0 } else { eps * (i as f32 - c) / c }).collect()
}

fn rademacher(d: usize, seed: u64, draw: u64) -> Vec<f32> {
    let mut r = rng::stream(seed, "rademacher", &[draw]);
    (0..d).map(|_| if r.random::<bool>() { 1.0 } else { -1.0 }).collect()
}

/// Labels of `ensemble` on the plane spanned by the surrogate's adversarial
/// direction (vertical) and a Rademacher direction (horizontal) around
/// image `index` of `data`.
#[allow(clippy::too_many_arguments)]
pub fn decision_grid<C: Classifier + ?Sized, S: Classifier + ?Sized>(
    ensemble: &C,
    surrogate: &S,
    data: &Dataset,
    index: usize,
    resolution: usize,
    epsilon_max: f32,
    axis: &AxisMode,
    seed: u64,
) -> Result<DecisionGrid> {
    if resolution < 3 || resolution % 2 == 0 {
        return Err(Error::invalid("resolution", format!("{resolution} must be odd and at least 3")));
    }
    if index >= data.len() {
        return Err(Error::invalid("image", format!("index {index} outside {} rows", data.len())));
    }
    let (x, y) = data.batch(&[index]);
    let d = x.len();
    let raw = match axis {
        AxisMode::SignGradient => input_gradient(surrogate, &x, &y, LossKind::Ce)?.into_data(),
        AxisMode::Pgd { steps } => {
            let spec = AttackSpec::new(epsilon_max.max(f32::MIN_POSITIVE), (*steps).max(1), (epsilon_max / 5.0).max(f32::MIN_POSITIVE));
            let adv = pgd_attack(surrogate, &x, &y, &spec, seed)?;
            adv.adversarials.data().iter().zip(x.data()).map(|(a, b)| a - b).collect()
        }
    };
    let mut axis_v: Vec<f32> = raw.iter().map(|&g| if g > 0.0 { 1.0 } else if g < 0.0 { -1.0 } else { 0.0 }).collect();
    let fallback = axis_v.iter().all(|&v| v == 0.0);
    if fallback {
        axis_v = rademacher(d, seed, 1);
    }
    let axis_h = rademacher(d, seed, 0);
    let offs = offsets(resolution, epsilon_max);
    let mut points = Vec::with_capacity(resolution * resolution * d);
    for &a in &offs {
        for &b in &offs {
            points.extend(
                x.data()
                    .iter()
                    .zip(&axis_v)
                    .zip(&axis_h)
                    .map(|((&p, &v), &h)| (p + a * v + b * h).clamp(0.0, 1.0)),
            );
        }
    }
    let mut shape = x.shape().to_vec();
    shape[0] = resolution * resolution;
    let flat = predict_all(ensemble, &Tensor::new(shape, points)?)?;
    Ok(DecisionGrid {
        image_id: index,
        resolution,
        epsilon_max,
        axis_v,
        axis_h,
        labels: flat.chunks(resolution).map(<[usize]>::to_vec).collect(),
        axis_v_fallback: fallback,
    })
}

/// White-box accuracy at a fixed ε for each attack iteration budget; a
/// budget of 0 is clean accuracy. All budgets share the same seed.
pub fn convergence_check<C: Classifier + ?Sized>(c: &C, iterations: &[usize], template: &AttackSpec, data: &Dataset, seed: u64) -> Result<Vec<f64>> {
    if iterations.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("iterations", "must be ascending"));
    }
    iterations
        .iter()
        .map(|&n| {
            if n == 0 {
                clean_accuracy(c, data)
            } else {
                Ok(whitebox_eval(c, &[template.epsilon], &template.clone().with_steps(n), data, seed)?[0])
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clean_accuracy: f64,
    pub epsilons: Vec<f32>,
    pub whitebox_accuracy: Vec<f64>,
    pub blackbox_accuracy: Vec<f64>,
    pub battery: Vec<String>,
    pub sample_count: usize,
    pub seed: u64,
}

/// Clean, white-box and black-box accuracy over an ε list.
pub fn evaluate<C: Classifier + ?Sized>(
    defender: &C,
    surrogates: &[Ensemble],
    eps: &[f32],
    whitebox: &AttackSpec,
    battery: &Battery,
    data: &Dataset,
    seed: u64,
) -> Result<EvalReport> {
    let blackbox = if surrogates.is_empty() {
        Vec::new()
    } else {
        eps.iter()
            .enumerate()
            .map(|(i, &e)| blackbox_eval(defender, surrogates, e, battery, data, rng::derive(seed, &[1, i as u64])))
            .collect::<Result<_>>()?
    };
    Ok(EvalReport {
        clean_accuracy: clean_accuracy(defender, data)?,
        epsilons: eps.to_vec(),
        whitebox_accuracy: whitebox_eval(defender, eps, whitebox, data, rng::derive(seed, &[0]))?,
        blackbox_accuracy: blackbox,
        battery: battery.describe(surrogates.len()),
        sample_count: data.len(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, Provenance, Split, SyntheticSpec};
    use crate::engine::ParamMap;
    use crate::models::{build_model, Activation, Layer, ModelSpec};

    /// Zero weights, fixed bias: predicts the bias argmax everywhere.
    fn constant(classes: usize, favourite: usize, d: usize) -> LayeredModel {
        let mut p = ParamMap::new();
        p.insert("out.weight".into(), Tensor::zeros(&[classes, d]));
        let mut b = Tensor::zeros(&[classes]);
        b.data_mut()[favourite] = 1.0;
        p.insert("out.bias".into(), b);
        let layers = vec![
            Layer::Flatten,
            Layer::Dense {
                name: "out".into(),
                out: classes,
                tap: true,
            },
        ];
        LayeredModel::from_layers("const", [1, 2, 2], classes, Activation::Relu, layers, p).unwrap()
    }

    /// One-hot inputs of length `d` labelled by their hot position, and a
    /// model that reads the label off the input.
    fn lookup(classes: usize) -> (LayeredModel, Dataset) {
        let d = 4;
        let mut w = Tensor::zeros(&[classes, d]);
        for c in 0..classes {
            w.data_mut()[c * d + c] = 10.0;
        }
        let mut p = ParamMap::new();
        p.insert("out.weight".into(), w);
        p.insert("out.bias".into(), Tensor::zeros(&[classes]));
        let layers = vec![
            Layer::Flatten,
            Layer::Dense {
                name: "out".into(),
                out: classes,
                tap: true,
            },
        ];
        let m = LayeredModel::from_layers("lookup", [1, 2, 2], classes, Activation::Relu, layers, p).unwrap();
        let n = 20;
        let mut data = vec![0.0; n * d];
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        for (i, &l) in labels.iter().enumerate() {
            data[i * d + l] = 1.0;
        }
        let ds = Dataset::new(
            Tensor::new(vec![n, 1, 2, 2], data).unwrap(),
            labels,
            classes,
            Split::Test,
            Provenance::Derived {
                from: Box::new(Provenance::Synthetic(SyntheticSpec::new(2, 1, 4, 0.0, 0))),
                note: "one-hot".into(),
            },
        )
        .unwrap();
        (m, ds)
    }

    #[test]
    fn constant_model_scores_its_class_share() {
        let (_, ds) = lookup(4);
        let expected = ds.labels().iter().filter(|&&l| l == 2).count() as f64 / ds.len() as f64;
        assert_eq!(clean_accuracy(&constant(4, 2, 4), &ds).unwrap(), expected);
    }

    #[test]
    fn lookup_model_is_perfect_and_keeps_everything() {
        let (m, ds) = lookup(4);
        assert_eq!(clean_accuracy(&m, &ds).unwrap(), 1.0);
        let e = Ensemble::new(vec![m.clone(), m]).unwrap();
        assert_eq!(commonly_correct(e.members(), &ds).unwrap(), (0..ds.len()).collect::<Vec<_>>());
    }

    fn trained_free() -> (Ensemble, Dataset) {
        let ds = gen_synthetic(&SyntheticSpec::new(3, 8, 8, 0.1, 1), Split::Test).unwrap();
        let members = (0..2)
            .map(|s| build_model(&ModelSpec::new("cnn-small", [1, 8, 8], 3, s).unwrap()).unwrap())
            .collect();
        (Ensemble::new(members).unwrap(), ds)
    }

    #[test]
    fn whitebox_is_clean_at_zero_and_non_increasing() {
        let (e, ds) = trained_free();
        let eps = [0.0, 0.02, 0.05, 0.1];
        let acc = whitebox_eval(&e, &eps, &AttackSpec::new(0.1, 5, 0.02).with_restarts(2), &ds, 3).unwrap();
        assert_eq!(acc[0], clean_accuracy(&e, &ds).unwrap());
        assert!(acc.windows(2).all(|w| w[1] <= w[0]));
        assert!(whitebox_eval(&e, &[0.1, 0.0], &AttackSpec::new(0.1, 1, 0.1), &ds, 3).is_err());
    }

    #[test]
    fn empty_battery_is_clean_accuracy() {
        let (e, ds) = trained_free();
        let acc = blackbox_eval(&e, std::slice::from_ref(&e), 0.1, &Battery::empty(), &ds, 0).unwrap();
        assert_eq!(acc, clean_accuracy(&e, &ds).unwrap());
    }

    #[test]
    fn decision_grid_degenerate_cases() {
        let (e, ds) = trained_free();
        let g = decision_grid(&e, &e, &ds, 2, 5, 0.0, &AxisMode::SignGradient, 1).unwrap();
        let first = g.labels[0][0];
        assert!(g.labels.iter().flatten().all(|&l| l == first));
        assert_eq!(g.center_label(), e.predict_labels(&ds.batch(&[2]).0).unwrap()[0]);
        let c = Ensemble::new(vec![constant(4, 1, 4)]).unwrap();
        let (_, one_hot) = lookup(4);
        let g = decision_grid(&c, &c, &one_hot, 0, 7, 0.5, &AxisMode::SignGradient, 1).unwrap();
        assert!(g.labels.iter().flatten().all(|&l| l == 1));
        assert!(g.axis_v_fallback);
        assert!(decision_grid(&e, &e, &ds, 0, 4, 0.1, &AxisMode::SignGradient, 1).is_err());
    }

    #[test]
    fn convergence_check_budgets() {
        let (e, ds) = trained_free();
        let spec = AttackSpec::new(0.05, 1, 0.01);
        let acc = convergence_check(&e, &[0, 3, 3], &spec, &ds, 5).unwrap();
        assert_eq!(acc[0], clean_accuracy(&e, &ds).unwrap());
        assert_eq!(acc[1], acc[2]);
    }
}
