use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    MlpSmall,
    CnnSmall,
    CnnResidual,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Architecture::MlpSmall, Architecture::CnnSmall, Architecture::CnnResidual];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::MlpSmall => "mlp-small",
            Architecture::CnnSmall => "cnn-small",
            Architecture::CnnResidual => "cnn-residual",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::UnknownArchitecture(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Relu,
    /// Negative slope fixed at [`crate::engine::LEAKY_SLOPE`].
    LeakyRelu,
}

/// Everything needed to rebuild a model's initial parameters bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    /// `[channels, height, width]`
    pub input_shape: [usize; 3],
    pub classes: usize,
    #[serde(default = "one")]
    pub width: usize,
    #[serde(default)]
    pub activation: Activation,
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl ModelSpec {
    pub fn new(architecture: &str, input_shape: [usize; 3], classes: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            architecture: architecture.parse()?,
            input_shape,
            classes,
            width: 1,
            activation: Activation::Relu,
            seed,
        })
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.width = width;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("classes", format!("{} < 2", self.classes)));
        }
        if self.width == 0 {
            return Err(Error::invalid("width", "must be positive"));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::invalid("input_shape", format!("{:?} has a zero extent", self.input_shape)));
        }
        if self.architecture != Architecture::MlpSmall && (self.input_shape[1] < 4 || self.input_shape[2] < 4) {
            return Err(Error::invalid("input_shape", "convolutional models need at least 4x4 inputs"));
        }
        Ok(())
    }
}
