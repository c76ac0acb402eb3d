//! Small layered classifiers with addressable pre-activation taps, and
//! probability-averaging ensembles of them.

mod ensemble;
mod layered;
mod spec;

pub use ensemble::{argmax, ensemble_predict, Classifier, Ensemble};
pub use layered::{architecture_layers, build_model, GradMode, Layer, LayeredModel, ModelGrads, ModelGraph, Stop};
pub use spec::{Activation, Architecture, ModelSpec};
