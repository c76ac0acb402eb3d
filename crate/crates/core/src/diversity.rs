//! Vulnerability diversity between sub-models, the round-robin training
//! term, and pairwise transferability matrices.

use std::fmt::Write as _;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd_attack, success_rate, AttackSpec};
use crate::data::Dataset;
use crate::distill::{distill_features, DistillSpec, DistilledBatch};
use crate::engine::{ParamMap, Tensor};
use crate::error::{Error, Result};
use crate::eval::commonly_correct_sample;
use crate::loss::{attack_loss, model_ce_grads, LossKind};
use crate::models::{Classifier, LayeredModel};
use crate::rng::{self, Rng};

/// How the distillation layer is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerPolicy {
    /// A fresh uniform draw from all taps each time.
    #[default]
    UniformRandom,
    /// Always this tap (1-based).
    Fixed(usize),
}

impl LayerPolicy {
    pub fn pick(self, tap_count: usize, rng: &mut Rng) -> Result<usize> {
        match self {
            LayerPolicy::UniformRandom => Ok(rng.random_range(1..=tap_count)),
            LayerPolicy::Fixed(l) if (1..=tap_count).contains(&l) => Ok(l),
            LayerPolicy::Fixed(l) => Err(Error::TapOutOfRange { index: l, tap_count }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityEstimate {
    pub pair: (String, String),
    /// Half the mean cross-entropy each model suffers on the other's
    /// distilled features, against the target label.
    pub value: f64,
    pub sample_count: usize,
    pub epsilon: f32,
    pub layer_policy: LayerPolicy,
}

fn per_row_ce(model: &LayeredModel, x: &Tensor, y: &[usize]) -> Result<Vec<f32>> {
    attack_loss(&model.forward(x)?, y, LossKind::Ce)
}

/// Monte Carlo estimate of the vulnerability diversity of two models.
///
/// Draws `samples` triples of target row, source row and layer (uniform with
/// replacement) from one seeded stream. Both terms use the same triples and
/// are added per row before averaging, so swapping the models gives a
/// bitwise-equal value.
pub fn pairwise_diversity(
    fi: &LayeredModel,
    fj: &LayeredModel,
    data: &Dataset,
    distill: &DistillSpec,
    policy: LayerPolicy,
    samples: usize,
    seed: u64,
) -> Result<DiversityEstimate> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if samples == 0 {
        return Err(Error::invalid("sample_count", "must be at least 1"));
    }
    if fi.input_shape() != fj.input_shape() || fi.classes() != fj.classes() {
        return Err(Error::IncompatibleModels(format!("{} vs {}", fi.id(), fj.id())));
    }
    let taps = fi.tap_count().min(fj.tap_count());
    let mut r = rng::stream(seed, "diversity", &[]);
    let mut triples = Vec::with_capacity(samples);
    for _ in 0..samples {
        let t = r.random_range(0..data.len());
        let s = r.random_range(0..data.len());
        triples.push((t, s, policy.pick(taps, &mut r)?));
    }
    let mut layers: Vec<usize> = triples.iter().map(|t| t.2).collect();
    layers.sort_unstable();
    layers.dedup();
    let mut sum = 0.0f64;
    for l in layers {
        let rows: Vec<&(usize, usize, usize)> = triples.iter().filter(|t| t.2 == l).collect();
        let (x, y) = data.batch(&rows.iter().map(|t| t.0).collect::<Vec<_>>());
        let (xs, ys) = data.batch(&rows.iter().map(|t| t.1).collect::<Vec<_>>());
        let spec = distill.clone().with_layer(l);
        let from_j = distill_features(fj, &spec, (&x, &y), (&xs, &ys), seed)?;
        let from_i = distill_features(fi, &spec, (&x, &y), (&xs, &ys), seed)?;
        let a = per_row_ce(fi, &from_j.distilled, &y)?;
        let b = per_row_ce(fj, &from_i.distilled, &y)?;
        for (p, q) in a.iter().zip(&b) {
            sum += (p + q) as f64;
        }
    }
    Ok(DiversityEstimate {
        pair: (fi.id().to_string(), fj.id().to_string()),
        value: 0.5 * sum / samples as f64,
        sample_count: samples,
        epsilon: distill.epsilon,
        layer_policy: policy,
    })
}

/// `Σ_j mean CE(f_i(x′_j), y_s)` over the other members' distilled batches,
/// with its parameter gradient.
pub fn diversity_loss_with_grad(fi: &LayeredModel, others: &[&DistilledBatch]) -> Result<(f32, ParamMap)> {
    let Some(first) = others.first() else {
        let zeros = fi.params().iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect();
        return Ok((0.0, zeros));
    };
    if others.iter().any(|b| b.len() != first.len()) {
        return Err(Error::invalid("distilled batches", "sizes differ"));
    }
    let x = Tensor::concat_rows(&others.iter().map(|b| &b.distilled).collect::<Vec<_>>())?;
    let y: Vec<usize> = others.iter().flat_map(|b| b.source_labels.iter().copied()).collect();
    model_ce_grads(fi, &x, &y, 1.0 / first.len() as f32)
}

/// The round-robin term for `f_i` without gradients.
pub fn diversity_loss(fi: &LayeredModel, others: &[&DistilledBatch]) -> Result<f32> {
    let mut total = 0.0;
    for b in others {
        let l = per_row_ce(fi, &b.distilled, &b.source_labels)?;
        total += l.iter().sum::<f32>() / b.len() as f32;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    /// `rates[i][j]`: success on member `j` of adversarials made against
    /// member `i`.
    pub rates: Vec<Vec<f64>>,
    pub epsilon: f32,
    pub steps: usize,
    pub restarts: usize,
    pub sample_count: usize,
}

impl TransferMatrix {
    pub fn mean_off_diagonal(&self) -> Option<f64> {
        let n = self.rates.len();
        if n < 2 {
            return None;
        }
        let mut sum = 0.0;
        for (i, row) in self.rates.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if i != j {
                    sum += v;
                }
            }
        }
        Some(sum / (n * (n - 1)) as f64)
    }

    /// Row-major CSV with a `#`-prefixed metadata header.
    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# epsilon={} steps={} restarts={} samples={}\n",
            self.epsilon, self.steps, self.restarts, self.sample_count
        );
        let n = self.rates.len();
        s.push_str("source");
        for j in 0..n {
            let _ = write!(s, ",on_{j}");
        }
        s.push('\n');
        for (i, row) in self.rates.iter().enumerate() {
            let _ = write!(s, "{i}");
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

/// Pairwise attack success among members on `samples` rows that every
/// member classifies correctly.
pub fn transfer_matrix<C: Classifier + ?Sized>(ensemble: &C, spec: &AttackSpec, data: &Dataset, samples: usize, seed: u64) -> Result<TransferMatrix> {
    let members = ensemble.members();
    let eval = commonly_correct_sample(members, data, samples, seed)?;
    transfer_matrix_on(members, spec, &eval, seed)
}

/// [`transfer_matrix`] on an evaluation set that is already filtered.
pub fn transfer_matrix_on(members: &[LayeredModel], spec: &AttackSpec, eval: &Dataset, seed: u64) -> Result<TransferMatrix> {
    let (x, y) = (eval.images(), eval.labels());
    let rates = (0..members.len())
        .into_par_iter()
        .map(|i| {
            let adv = pgd_attack(&members[i], x, y, spec, rng::derive(seed, &[i as u64]))?;
            members.iter().map(|m| success_rate(&adv, m)).collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TransferMatrix {
        rates,
        epsilon: spec.epsilon,
        steps: spec.steps,
        restarts: spec.restarts,
        sample_count: eval.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, Split, SyntheticSpec};
    use crate::loss::softmax_rows;
    use crate::models::{build_model, Ensemble, ModelSpec};

    fn model(seed: u64) -> LayeredModel {
        build_model(&ModelSpec::new("cnn-small", [1, 8, 8], 3, seed).unwrap()).unwrap()
    }

    fn data() -> Dataset {
        gen_synthetic(&SyntheticSpec::new(3, 6, 8, 0.1, 2), Split::Test).unwrap()
    }

    #[test]
    fn diversity_is_symmetric_under_shared_sampling() {
        let (a, b) = (model(1), model(2));
        let spec = DistillSpec::new(0.05, 1);
        let ab = pairwise_diversity(&a, &b, &data(), &spec, LayerPolicy::UniformRandom, 12, 7).unwrap();
        let ba = pairwise_diversity(&b, &a, &data(), &spec, LayerPolicy::UniformRandom, 12, 7).unwrap();
        assert_eq!(ab.value, ba.value);
        assert!(ab.value >= 0.0);
    }

    #[test]
    fn copies_score_their_own_distillation_loss() {
        let a = model(3);
        let d = data();
        let spec = DistillSpec::new(0.05, 2);
        let est = pairwise_diversity(&a, &a.clone(), &d, &spec, LayerPolicy::Fixed(2), 5, 1).unwrap();
        let mut r = rng::stream(1, "diversity", &[]);
        let mut t = Vec::new();
        let mut s = Vec::new();
        for _ in 0..5 {
            t.push(r.random_range(0..d.len()));
            s.push(r.random_range(0..d.len()));
        }
        let (x, y) = d.batch(&t);
        let (xs, ys) = d.batch(&s);
        let out = distill_features(&a, &spec, (&x, &y), (&xs, &ys), 0).unwrap();
        let own = per_row_ce(&a, &out.distilled, &y).unwrap();
        let mean = own.iter().map(|&v| v as f64).sum::<f64>() / 5.0;
        assert!((est.value - mean).abs() < 1e-6);
    }

    #[test]
    fn empty_sum_is_zero() {
        let a = model(4);
        assert_eq!(diversity_loss(&a, &[]).unwrap(), 0.0);
        let (l, g) = diversity_loss_with_grad(&a, &[]).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.values().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn loss_matches_a_straight_line_reimplementation() {
        let (fi, fj) = (model(5), model(6));
        let d = data();
        let (x, y) = d.batch(&[0, 1, 2, 3]);
        let (xs, ys) = d.batch(&[5, 9, 4, 11]);
        let b = distill_features(&fj, &DistillSpec::new(0.1, 3), (&x, &y), (&xs, &ys), 0).unwrap();
        let got = diversity_loss(&fi, &[&b]).unwrap();
        let (with_grad, _) = diversity_loss_with_grad(&fi, &[&b]).unwrap();
        let p = softmax_rows(&fi.forward(&b.distilled).unwrap());
        let mut want = 0.0f64;
        for (r, &label) in ys.iter().enumerate() {
            want -= (p.row(r)[label] as f64).ln();
        }
        want /= 4.0;
        assert!((got as f64 - want).abs() < 1e-5);
        assert!((with_grad as f64 - want).abs() < 1e-5);
    }

    #[test]
    fn identical_members_give_constant_rows() {
        let m = model(7);
        let e = Ensemble::new(vec![m.clone(), m.clone(), m]).unwrap();
        let d = data();
        let t = transfer_matrix(&e, &AttackSpec::new(0.1, 5, 0.02).with_restarts(2), &d, 10, 1);
        match t {
            Ok(t) => {
                for row in &t.rates {
                    assert!(row.iter().all(|&v| v == row[0]));
                }
            }
            Err(Error::NoCommonlyCorrect { .. }) => {}
            Err(e) => panic!("{e}"),
        }
    }
}
