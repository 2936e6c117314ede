//! Dataset loading, batching, preprocessing and augmentation.

mod augment;
mod idx;
mod preprocess;
mod sampler;

pub use augment::{add_noise, crop, flip_h, flip_v, AugmentOp, FancyPca};
pub use idx::{load_idx, load_mnist, write_idx_images, write_idx_labels, MnistFiles};
pub use preprocess::{PreprocessKind, Preprocessor};
pub use sampler::{BatchSampler, SamplingMode};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MNIST_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images `[N, H, W, C]` with one-hot labels `[N, classes]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Tensor,
    labels: Tensor,
    split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Tensor, split: Split) -> Result<Self> {
        if images.rank() != 4 || labels.rank() != 2 || images.batch() != labels.batch() {
            return Err(Error::shape("dataset", images.shape(), labels.shape()));
        }
        Ok(Dataset {
            images,
            labels,
            split,
        })
    }

    /// Builds one-hot labels from class indices.
    pub fn from_classes(images: Tensor, classes: &[usize], n_classes: usize, split: Split) -> Result<Self> {
        Self::new(images, one_hot(classes, n_classes)?, split)
    }

    pub fn len(&self) -> usize {
        self.images.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &Tensor {
        &self.labels
    }

    /// Per-sample image shape `[H, W, C]`.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn n_classes(&self) -> usize {
        self.labels.shape()[1]
    }

    pub fn class_of(&self, i: usize) -> usize {
        let c = self.n_classes();
        crate::tensor::argmax(&self.labels.data()[i * c..(i + 1) * c])
    }

    pub fn gather(&self, indices: &[usize]) -> (Tensor, Tensor) {
        (self.images.gather_rows(indices), self.labels.gather_rows(indices))
    }

    /// The first `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images.slice_rows(0, n),
            labels: self.labels.slice_rows(0, n),
            split: self.split,
        }
    }

    pub(crate) fn with_images(&self, images: Tensor) -> Dataset {
        Dataset {
            images,
            labels: self.labels.clone(),
            split: self.split,
        }
    }
}

pub fn one_hot(classes: &[usize], n_classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[classes.len().max(1), n_classes]);
    if classes.is_empty() {
        return Err(Error::InvalidArgument("no labels".into()));
    }
    for (i, &k) in classes.iter().enumerate() {
        if k >= n_classes {
            return Err(Error::InvalidArgument(format!("label {k} outside {n_classes} classes")));
        }
        t.data_mut()[i * n_classes + k] = 1.0;
    }
    Ok(t)
}
