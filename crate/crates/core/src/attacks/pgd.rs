use crate::engine::{Element, Tensor};
use crate::error::Result;

/// Step schedule of a sign-gradient projected search.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Schedule<T> {
    pub epsilon: T,
    pub steps: usize,
    pub step_size: T,
    pub momentum: T,
    pub maximize: bool,
}

/// Outcome of one projected search.
pub(crate) struct Search<T: Element> {
    /// Per row, the best iterate seen (the start point included).
    pub best: Tensor<T>,
    pub best_value: Vec<T>,
    pub last: Tensor<T>,
    pub last_value: Vec<T>,
    /// Every step saw an all-zero gradient for the whole batch.
    pub zero_gradient: bool,
}

/// Momentum sign-gradient search inside `anchor ± epsilon` intersected with
/// `[0, 1]`.
///
/// `oracle(x, want_grad)` returns per-row objective values and, when asked,
/// their gradient w.r.t. `x`. The momentum buffer accumulates the per-row
/// L1-normalised gradient; rows with a zero gradient contribute nothing, and
/// `sign(0) = 0`, so a stationary row never moves.
pub(crate) fn search<T, F>(anchor: &Tensor<T>, start: Tensor<T>, s: Schedule<T>, mut oracle: F) -> Result<Search<T>>
where
    T: Element,
    F: FnMut(&Tensor<T>, bool) -> Result<(Vec<T>, Option<Tensor<T>>)>,
{
    let rows = anchor.rows();
    let d = anchor.row_len();
    let mut x = start;
    let (mut value, mut grad) = oracle(&x, s.steps > 0)?;
    let mut best = x.clone();
    let mut best_value = value.clone();
    let mut velocity = vec![T::zero(); x.len()];
    let mut all_zero = s.steps > 0;
    let dir = if s.maximize { T::one() } else { -T::one() };
    for step in 0..s.steps {
        let g = grad.take().expect("gradient requested for every non-final iterate");
        let mut batch_zero = true;
        for r in 0..rows {
            let gr = &g.data()[r * d..(r + 1) * d];
            let norm: T = gr.iter().map(|v| v.abs()).sum();
            let vr = &mut velocity[r * d..(r + 1) * d];
            for (v, &gv) in vr.iter_mut().zip(gr) {
                *v = s.momentum * *v + if norm > T::zero() { gv / norm } else { T::zero() };
            }
            batch_zero &= norm == T::zero();
        }
        all_zero &= batch_zero;
        for ((xv, &v), &a) in x.data_mut().iter_mut().zip(&velocity).zip(anchor.data()) {
            let sign = if v > T::zero() {
                T::one()
            } else if v < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
            let moved = *xv + dir * s.step_size * sign;
            *xv = moved.max(a - s.epsilon).min(a + s.epsilon).max(T::zero()).min(T::one());
        }
        let want = step + 1 < s.steps;
        (value, grad) = oracle(&x, want)?;
        for r in 0..rows {
            let better = if s.maximize {
                value[r] > best_value[r]
            } else {
                value[r] < best_value[r]
            };
            if better {
                best_value[r] = value[r];
                best.row_mut(r).copy_from_slice(x.row(r));
            }
        }
    }
    Ok(Search {
        best,
        best_value,
        last: x,
        last_value: value,
        zero_gradient: all_zero,
    })
}
