//! Ensemble training that diversifies adversarial vulnerability across
//! sub-models, together with the attack, distillation and evaluation
//! machinery it needs.

pub mod attacks;
pub mod data;
pub mod distill;
pub mod diversity;
pub mod eval;
pub mod engine;
pub mod error;
pub mod loss;
pub mod models;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
