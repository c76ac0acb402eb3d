//! Classification losses evaluated outside the graph. Each returns per-row
//! values and the gradient with respect to the scores, which is then used as
//! the backward seed.

use serde::{Deserialize, Serialize};

use crate::engine::{log_softmax_in_place, softmax_in_place, Element, ParamMap, Tensor};
use crate::error::{Error, Result};
use crate::models::{GradMode, LayeredModel, Stop};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Cross-entropy, `-log softmax(z)[y]`.
    #[default]
    Ce,
    /// Untargeted logit margin, `max_{c != y} z_c - z_y` (no confidence offset).
    Cw,
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::invalid("labels", format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// Loss of one score row and its gradient, written into `grad`.
pub(crate) fn row_loss_grad<T: Element>(scores: &[T], label: usize, kind: LossKind, grad: Option<&mut [T]>) -> T {
    match kind {
        LossKind::Ce => {
            let mut lp = scores.to_vec();
            log_softmax_in_place(&mut lp);
            if let Some(g) = grad {
                for (i, (gv, &l)) in g.iter_mut().zip(&lp).enumerate() {
                    *gv = l.exp() - if i == label { T::one() } else { T::zero() };
                }
            }
            -lp[label]
        }
        LossKind::Cw => {
            let mut other = usize::MAX;
            for (i, &v) in scores.iter().enumerate() {
                if i != label && (other == usize::MAX || v > scores[other]) {
                    other = i;
                }
            }
            if let Some(g) = grad {
                g.fill(T::zero());
                g[other] = T::one();
                g[label] = -T::one();
            }
            scores[other] - scores[label]
        }
    }
}

/// Per-row attack loss of a `[B, C]` logit batch.
pub fn attack_loss<T: Element>(logits: &Tensor<T>, labels: &[usize], kind: LossKind) -> Result<Vec<T>> {
    let c = logits.row_len();
    if c < 2 {
        return Err(Error::invalid("logits", "need at least two classes"));
    }
    check_labels(labels, logits.rows(), c)?;
    Ok(logits
        .data()
        .chunks(c)
        .zip(labels)
        .map(|(row, &y)| row_loss_grad(row, y, kind, None))
        .collect())
}

/// Mean cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn cross_entropy_mean<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (losses, mut grad) = loss_with_grad(logits, labels, LossKind::Ce)?;
    let n = T::of(labels.len() as f64);
    for g in grad.data_mut() {
        *g /= n;
    }
    Ok((losses.into_iter().sum::<T>() / n, grad))
}

/// Per-row losses with the unscaled per-row gradients.
pub fn loss_with_grad<T: Element>(logits: &Tensor<T>, labels: &[usize], kind: LossKind) -> Result<(Vec<T>, Tensor<T>)> {
    let c = logits.row_len();
    check_labels(labels, logits.rows(), c)?;
    let mut grad = Tensor::zeros(logits.shape());
    let losses = logits
        .data()
        .chunks(c)
        .zip(grad.data_mut().chunks_mut(c))
        .zip(labels)
        .map(|((row, g), &y)| row_loss_grad(row, y, kind, Some(g)))
        .collect();
    Ok((losses, grad))
}

/// Cross-entropy of `model` on `x`, summed over rows and scaled by `scale`,
/// with its parameter gradient. `scale = 1/B` gives the batch mean.
pub fn model_ce_grads<T: Element>(model: &LayeredModel<T>, x: &Tensor<T>, labels: &[usize], scale: T) -> Result<(T, ParamMap<T>)> {
    let mut g = model.compile();
    g.run(model, x, GradMode::Params, Stop::Logits)?;
    let (losses, mut seed) = loss_with_grad(g.logits(), labels, LossKind::Ce)?;
    for v in seed.data_mut() {
        *v *= scale;
    }
    let grads = g.backward(&[(Stop::Logits, &seed)])?.params;
    Ok((losses.into_iter().sum::<T>() * scale, grads))
}

/// Row-wise softmax of a `[B, C]` tensor.
pub fn softmax_rows<T: Element>(logits: &Tensor<T>) -> Tensor<T> {
    let mut p = logits.clone();
    let c = p.row_len();
    for row in p.data_mut().chunks_mut(c) {
        softmax_in_place(row);
    }
    p
}
