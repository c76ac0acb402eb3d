use crate::engine::{log_softmax_in_place, Element, Tensor};
use crate::error::{Error, Result};
use crate::loss::{loss_with_grad, LossKind};
use crate::models::{argmax, Classifier, GradMode, LayeredModel, ModelGraph, Stop};

/// Loss values, optional input gradient and predictions at one point.
#[derive(Clone, Debug)]
pub struct Probe<T: Element = f32> {
    pub losses: Vec<T>,
    pub grad: Option<Tensor<T>>,
    pub predicted: Vec<usize>,
}

/// Compiled graphs for differentiating a classification loss of an
/// averaged-softmax classifier with respect to its input.
///
/// A single model is scored on its logits. An ensemble of `K > 1` members is
/// scored on `s = log(mean_k softmax(z_k))`, so CE on `s` is the CE of the
/// mean probability.
pub struct AttackTarget<'a, T: Element = f32> {
    members: &'a [LayeredModel<T>],
    graphs: Vec<ModelGraph<T>>,
}

impl<'a, T: Element> AttackTarget<'a, T> {
    pub fn new<C: Classifier<T> + ?Sized>(target: &'a C) -> Result<Self> {
        let members = target.members();
        if members.is_empty() {
            return Err(Error::EmptyEnsemble);
        }
        Ok(Self {
            members,
            graphs: members.iter().map(LayeredModel::compile).collect(),
        })
    }

    pub fn classes(&self) -> usize {
        self.members[0].classes()
    }

    /// Per-row loss of `x` against `labels`; the gradient is computed only
    /// when `want_grad` is set.
    pub fn probe(&mut self, x: &Tensor<T>, labels: &[usize], kind: LossKind, want_grad: bool) -> Result<Probe<T>> {
        let mode = if want_grad { GradMode::Input } else { GradMode::None };
        let k = self.members.len();
        let c = self.classes();
        let mut logp = Vec::with_capacity(k);
        for (m, g) in self.members.iter().zip(&mut self.graphs) {
            g.run(m, x, mode, Stop::Logits)?;
            logp.push(g.logits().clone());
        }
        let single = k == 1;
        let scores = if single {
            logp[0].clone()
        } else {
            for lp in &mut logp {
                for row in lp.data_mut().chunks_mut(c) {
                    log_softmax_in_place(row);
                }
            }
            let ln_k = T::of((k as f64).ln());
            let mut s = logp[0].clone();
            for (i, v) in s.data_mut().iter_mut().enumerate() {
                let hi = logp.iter().map(|t| t.data()[i]).fold(T::neg_infinity(), T::max);
                let acc: T = logp.iter().map(|t| (t.data()[i] - hi).exp()).sum();
                *v = hi + acc.ln() - ln_k;
            }
            s
        };
        let predicted = if single {
            let mut p = scores.clone();
            for row in p.data_mut().chunks_mut(c) {
                crate::engine::softmax_in_place(row);
            }
            p.data().chunks(c).map(argmax).collect()
        } else {
            let p = scores.map(|v| v.exp());
            p.data().chunks(c).map(argmax).collect()
        };
        let (losses, ds) = loss_with_grad(&scores, labels, kind)?;
        if !want_grad {
            return Ok(Probe {
                losses,
                grad: None,
                predicted,
            });
        }
        let mut total: Option<Tensor<T>> = None;
        for (idx, g) in self.graphs.iter_mut().enumerate() {
            let seed = if single {
                ds.clone()
            } else {
                member_seed(&logp, idx, &scores, &ds, k, c)
            };
            let gi = g.backward(&[(Stop::Logits, &seed)])?.input.expect("input gradient requested");
            total = Some(match total {
                None => gi,
                Some(mut t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(gi.data()) {
                        *a += *b;
                    }
                    t
                }
            });
        }
        Ok(Probe {
            losses,
            grad: total,
            predicted,
        })
    }

    /// Predicted labels of the averaged softmax.
    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let dummy = vec![0; x.rows()];
        Ok(self.probe(x, &dummy, LossKind::Ce, false)?.predicted)
    }
}

/// Gradient of the loss w.r.t. member `idx`'s logits given `ds = dL/ds`.
///
/// With `r_kc = p_kc / sum_k' p_k'c`: `dz_kj = ds_j r_kj - p_kj sum_c ds_c r_kc`.
fn member_seed<T: Element>(logp: &[Tensor<T>], idx: usize, scores: &Tensor<T>, ds: &Tensor<T>, k: usize, c: usize) -> Tensor<T> {
    let ln_k = T::of((k as f64).ln());
    let lp = &logp[idx];
    let mut out = Tensor::zeros(lp.shape());
    for row in 0..lp.rows() {
        let base = row * c;
        let mut dot = T::zero();
        let mut r = vec![T::zero(); c];
        for j in 0..c {
            // log sum_k p_kc = s_c + ln K
            r[j] = (lp.data()[base + j] - scores.data()[base + j] - ln_k).exp();
            dot += ds.data()[base + j] * r[j];
        }
        for j in 0..c {
            let p = lp.data()[base + j].exp();
            out.data_mut()[base + j] = ds.data()[base + j] * r[j] - p * dot;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, Ensemble, ModelSpec};

    fn members() -> Vec<LayeredModel<f64>> {
        (0..3)
            .map(|s| build_model(&ModelSpec::new("mlp-small", [1, 3, 3], 4, s).unwrap()).unwrap())
            .collect()
    }

    #[test]
    fn ensemble_ce_is_ce_of_mean_probability() {
        let e = Ensemble::new(members()).unwrap();
        let x = Tensor::<f64>::new(vec![2, 1, 3, 3], (0..18).map(|i| (i as f64 * 0.37).sin().abs()).collect()).unwrap();
        let mut t = AttackTarget::new(&e).unwrap();
        let probe = t.probe(&x, &[1, 3], LossKind::Ce, false).unwrap();
        let (p, labels) = e.predict(&x).unwrap();
        assert!((probe.losses[0] + p.data()[1].ln()).abs() < 1e-12);
        assert!((probe.losses[1] + p.data()[7].ln()).abs() < 1e-12);
        assert_eq!(probe.predicted, labels);
    }

    #[test]
    fn ensemble_input_gradient_matches_finite_differences() {
        let e = Ensemble::new(members()).unwrap();
        let x = Tensor::<f64>::new(vec![1, 1, 3, 3], (0..9).map(|i| 0.1 + 0.08 * i as f64).collect()).unwrap();
        for kind in [LossKind::Ce, LossKind::Cw] {
            let mut t = AttackTarget::new(&e).unwrap();
            let g = t.probe(&x, &[2], kind, true).unwrap().grad.unwrap();
            for i in 0..9 {
                let (mut a, mut b) = (x.clone(), x.clone());
                a.data_mut()[i] += 1e-6;
                b.data_mut()[i] -= 1e-6;
                let fa = t.probe(&a, &[2], kind, false).unwrap().losses[0];
                let fb = t.probe(&b, &[2], kind, false).unwrap().losses[0];
                let fd = (fa - fb) / 2e-6;
                assert!((fd - g.data()[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "{kind:?} {i}: {fd} vs {}", g.data()[i]);
            }
        }
    }
}
