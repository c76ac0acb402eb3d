use std::collections::BTreeMap;

use super::{Element, EngineError, Tensor};

/// Named parameter tensors. Ordered so iteration (and therefore
/// serialization and update order) is deterministic.
pub type ParamMap<T = f32> = BTreeMap<String, Tensor<T>>;

/// Hyperparameters of momentum SGD with L2 weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Per-parameter velocity buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState<T = f32> {
    velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Element> SgdState<T> {
    pub fn new() -> Self {
        Self {
            velocity: BTreeMap::new(),
        }
    }

    pub fn velocity(&self, name: &str) -> Option<&[T]> {
        self.velocity.get(name).map(Vec::as_slice)
    }
}

/// One update: `v <- momentum * v + grad + weight_decay * param`,
/// `param <- param - lr * v`.
pub fn sgd_step<T: Element>(
    params: &mut ParamMap<T>,
    grads: &ParamMap<T>,
    config: SgdConfig,
    state: &mut SgdState<T>,
) -> Result<(), EngineError> {
    for name in params.keys() {
        let g = grads.get(name).ok_or_else(|| EngineError::MissingGrad(name.clone()))?;
        if g.shape() != params[name].shape() {
            return Err(EngineError::GradShape {
                expected: params[name].shape().to_vec(),
                found: g.shape().to_vec(),
            });
        }
    }
    let (lr, mu, wd) = (T::of(config.lr), T::of(config.momentum), T::of(config.weight_decay));
    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| vec![T::zero(); g.len()]);
        for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
            *vv = mu * *vv + gv + wd * *pv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}
