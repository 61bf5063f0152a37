//! Datasets, MNIST ingestion, test-time mutilations and analytic toy posteriors.

mod idx;
mod mutilate;
mod synthetic;
mod toy;

pub use idx::{find_mnist, load_mnist, write_idx_images, write_idx_labels};
pub use mutilate::{mutilate, rotate_image, MutilationKind, MutilationSpec, NoiseScale};
pub use synthetic::synthetic_blobs;
pub use toy::{mode_coverage, Moments, ToyPosteriorSpec};

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Labelled samples stored row-major. Images use `feature_shape = [1, H, W]`
/// with pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub feature_shape: Vec<usize>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        feature_shape: Vec<usize>,
        labels: Vec<usize>,
        classes: usize,
        split: Split,
    ) -> Result<Self> {
        let per = feature_shape.iter().product::<usize>();
        if per == 0 || features.len() != per * labels.len() {
            return Err(Error::Data(format!(
                "{} feature values do not fit {} samples of shape {feature_shape:?}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Label { label, classes });
        }
        Ok(Self {
            features,
            feature_shape,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.feature_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.features[i * n..(i + 1) * n]
    }

    /// Stacks the selected samples into a `[batch, ..feature_shape]` tensor.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend(&self.feature_shape);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("gather shape"), labels)
    }

    /// The first `n` samples (all of them when `n >= len`).
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            features: self.features[..n * self.sample_len()].to_vec(),
            feature_shape: self.feature_shape.clone(),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
            split: self.split,
        }
    }

    /// `(height, width)` when the samples are single- or multi-channel images.
    pub fn image_dims(&self) -> Option<(usize, usize, usize)> {
        match self.feature_shape.as_slice() {
            &[c, h, w] => Some((c, h, w)),
            &[h, w] => Some((1, h, w)),
            _ => None,
        }
    }
}
