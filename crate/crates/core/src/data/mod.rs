//! Datasets, batching, the IDX file format and checkpoint persistence.

mod batching;
mod checkpoint;
mod idx;
mod synthetic;

use serde::{Deserialize, Serialize};

pub use batching::{epoch_batches, sample_with_replacement};
pub use checkpoint::{load_checkpoint, load_model, save_checkpoint, save_model, CHECKPOINT_VERSION};
pub use idx::{decode_idx, encode_idx_images, encode_idx_labels, load_idx, write_idx};
pub use synthetic::{gen_synthetic, glyph, SyntheticSpec};

use crate::engine::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Where a dataset came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Provenance {
    Synthetic(SyntheticSpec),
    Idx { images_sha256: String, labels_sha256: String },
    Derived { from: Box<Provenance>, note: String },
}

/// Labelled images of shape `[N, C, H, W]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
    provenance: Provenance,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize, split: Split, provenance: Provenance) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::invalid("images", format!("shape {:?} is not [N, C, H, W]", images.shape())));
        }
        if images.rows() != labels.len() {
            return Err(Error::CountMismatch {
                images: images.rows(),
                labels: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        crate::attacks::check_unit_range(&images, "images")?;
        Ok(Self {
            images,
            labels,
            classes,
            split,
            provenance,
        })
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[channels, height, width]`
    pub fn input_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Images and labels of the given rows, in order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        (self.images.select_rows(indices), indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize], note: &str) -> Dataset {
        let (images, labels) = self.batch(indices);
        Dataset {
            images,
            labels,
            classes: self.classes,
            split: self.split,
            provenance: Provenance::Derived {
                from: Box::new(self.provenance.clone()),
                note: note.to_string(),
            },
        }
    }

    /// The same rows under a different class count (for example an IDX file
    /// whose labels do not reach the top class).
    pub fn with_classes(self, classes: usize) -> Result<Self> {
        Dataset::new(self.images, self.labels, classes, self.split, self.provenance)
    }

    /// `n` rows drawn without replacement by a seeded shuffle, kept in
    /// dataset order. The whole set when `n` is at least its size.
    pub fn sample(&self, n: usize, seed: u64) -> Dataset {
        use rand::seq::SliceRandom;
        if n >= self.len() {
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut crate::rng::stream(seed, "data-sample", &[]));
        idx.truncate(n);
        idx.sort_unstable();
        self.subset(&idx, &format!("{n} sampled rows"))
    }

    /// The first `n` rows (all of them if `n` exceeds the size).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        self.subset(&(0..n).collect::<Vec<_>>(), &format!("first {n} rows"))
    }
}
