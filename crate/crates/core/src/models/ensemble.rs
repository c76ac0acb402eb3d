use super::layered::LayeredModel;
use crate::engine::{Element, Tensor};
use crate::error::{Error, Result};

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Sub-models whose softmax outputs are averaged into one prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble<T: Element = f32> {
    members: Vec<LayeredModel<T>>,
}

impl<T: Element> Ensemble<T> {
    pub fn new(members: Vec<LayeredModel<T>>) -> Result<Self> {
        let first = members.first().ok_or(Error::EmptyEnsemble)?;
        for m in &members[1..] {
            if m.input_shape() != first.input_shape() || m.classes() != first.classes() {
                return Err(Error::IncompatibleModels(format!(
                    "{} takes {:?}/{} classes, {} takes {:?}/{}",
                    first.id(),
                    first.input_shape(),
                    first.classes(),
                    m.id(),
                    m.input_shape(),
                    m.classes()
                )));
            }
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[LayeredModel<T>] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [LayeredModel<T>] {
        &mut self.members
    }

    pub fn into_members(self) -> Vec<LayeredModel<T>> {
        self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Anything that predicts by averaging the softmax of one or more
/// [`LayeredModel`]s: a single model is an ensemble of one.
pub trait Classifier<T: Element = f32>: Sync {
    fn members(&self) -> &[LayeredModel<T>];

    fn classes(&self) -> usize {
        self.members()[0].classes()
    }

    fn input_shape(&self) -> [usize; 3] {
        self.members()[0].input_shape()
    }

    /// Mean softmax probabilities `[B, C]` and the argmax label per row.
    fn predict(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
        let members = self.members();
        if members.is_empty() {
            return Err(Error::EmptyEnsemble);
        }
        let mut acc: Option<Tensor<T>> = None;
        for m in members {
            let p = m.probabilities(x)?;
            acc = Some(match acc {
                None => p,
                Some(mut a) => {
                    for (s, v) in a.data_mut().iter_mut().zip(p.data()) {
                        *s += *v;
                    }
                    a
                }
            });
        }
        let mut prob = acc.expect("non-empty");
        let n = T::of(members.len() as f64);
        for v in prob.data_mut() {
            *v /= n;
        }
        let labels = prob.data().chunks(self.classes()).map(argmax).collect();
        Ok((prob, labels))
    }

    fn predict_labels(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(self.predict(x)?.1)
    }
}

impl<T: Element> Classifier<T> for LayeredModel<T> {
    fn members(&self) -> &[LayeredModel<T>] {
        std::slice::from_ref(self)
    }
}

impl<T: Element> Classifier<T> for Ensemble<T> {
    fn members(&self) -> &[LayeredModel<T>] {
        &self.members
    }
}

impl<T: Element> Classifier<T> for [LayeredModel<T>] {
    fn members(&self) -> &[LayeredModel<T>] {
        self
    }
}

/// Mean-softmax prediction of an ensemble.
pub fn ensemble_predict<T: Element>(e: &Ensemble<T>, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    e.predict(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::ParamMap;
    use crate::models::{build_model, Activation, Layer, ModelSpec};

    /// Single dense layer with zero weights and a fixed bias, so the
    /// softmax is the same for every input.
    fn constant_model(bias: &[f64]) -> LayeredModel<f64> {
        let c = bias.len();
        let mut p = ParamMap::new();
        p.insert("out.weight".into(), Tensor::zeros(&[c, 2]));
        p.insert("out.bias".into(), Tensor::from_f64(&[c], bias).unwrap());
        let layers = vec![
            Layer::Flatten,
            Layer::Dense {
                name: "out".into(),
                out: c,
                tap: true,
            },
        ];
        LayeredModel::from_layers("const", [1, 1, 2], c, Activation::Relu, layers, p).unwrap()
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.5f32, 0.5]), 0);
        assert_eq!(argmax(&[0.1f32, 0.7, 0.7]), 1);
    }

    #[test]
    fn opposite_certain_models_average_to_a_tie() {
        let a = constant_model(&[60.0, 0.0]);
        let b = constant_model(&[0.0, 60.0]);
        let e = Ensemble::new(vec![a, b]).unwrap();
        let (p, labels) = ensemble_predict(&e, &Tensor::zeros(&[1, 1, 1, 2])).unwrap();
        assert!((p.data()[0] - 0.5).abs() < 1e-12);
        assert!((p.data()[1] - 0.5).abs() < 1e-12);
        assert_eq!(labels, vec![0]);
    }

    #[test]
    fn ensemble_of_one_matches_the_model() {
        let m: LayeredModel = build_model(&ModelSpec::new("mlp-small", [1, 4, 4], 3, 5).unwrap()).unwrap();
        let x = Tensor::new(vec![2, 1, 4, 4], (0..32).map(|i| i as f32 / 32.0).collect()).unwrap();
        let e = Ensemble::new(vec![m.clone()]).unwrap();
        assert_eq!(e.predict(&x).unwrap(), m.predict(&x).unwrap());
        assert_eq!(e.predict(&x).unwrap().0, m.probabilities(&x).unwrap());
    }

    #[test]
    fn identical_members_reproduce_the_single_softmax() {
        let m: LayeredModel = build_model(&ModelSpec::new("cnn-small", [1, 8, 8], 4, 5).unwrap()).unwrap();
        let x = Tensor::new(vec![3, 1, 8, 8], (0..192).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        let e = Ensemble::new(vec![m.clone(), m.clone(), m.clone()]).unwrap();
        let (pe, le) = e.predict(&x).unwrap();
        let (pm, lm) = m.predict(&x).unwrap();
        assert!(pe.max_abs_diff(&pm) < 1e-6);
        assert_eq!(le, lm);
    }

    #[test]
    fn incompatible_members_are_rejected() {
        let a: LayeredModel = build_model(&ModelSpec::new("mlp-small", [1, 4, 4], 3, 5).unwrap()).unwrap();
        let b: LayeredModel = build_model(&ModelSpec::new("mlp-small", [1, 4, 4], 4, 5).unwrap()).unwrap();
        assert!(Ensemble::new(vec![a, b]).is_err());
        assert!(matches!(Ensemble::<f32>::new(vec![]), Err(Error::EmptyEnsemble)));
    }
}
