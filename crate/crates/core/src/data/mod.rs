//! Dataset ingestion and preparation: binary-format loaders, stratified
//! subsampling, box-filter resizing, and the synthetic two-domain
//! benchmark generator.

mod cifar;
mod records;
mod stl;
mod synthetic;

pub use cifar::load_cifar10;
pub use records::{read_records, write_records, RECORD_BYTES, RECORD_HW};
pub use stl::load_stl10;
pub use synthetic::{generate_synthetic_domains, SyntheticDomains};

use crate::rng::{hash_key, permutation};
use crate::tensor::{Shape, Tensor, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("missing dataset file {0}")]
    MissingFile(String),
    #[error("{path}: truncated record at byte offset {offset}")]
    TruncatedRecord { path: String, offset: u64 },
    #[error("{path}: expected {want} records, found {got}")]
    BadRecordCount { path: String, want: usize, got: usize },
    #[error("{path}: label {label} out of range for {classes} classes")]
    LabelOutOfRange { path: String, label: u8, classes: usize },
    #[error("{path}: size {len} bytes is not a multiple of the {unit}-byte image size")]
    BadImageFileSize { path: String, len: u64, unit: usize },
    #[error("{images} holds {image_count} images but {labels} holds {label_count} labels")]
    SplitCountMismatch { images: String, labels: String, image_count: usize, label_count: usize },
    #[error("fraction {0} outside (0, 1]")]
    BadFraction(f64),
    #[error("fraction {fraction} yields zero samples for class {class}")]
    FractionTooSmall { fraction: f64, class: usize },
    #[error("height {h} x width {w} not divisible by resize factor {factor}")]
    NotDivisible { h: usize, w: usize, factor: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Labeled image set. Images are [n, c, h, w] with values in [0, 1];
/// immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<u8>,
    num_classes: usize,
    class_counts: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<u8>, num_classes: usize) -> Result<Self, DataError> {
        if images.dims().len() != 4 {
            return Err(DataError::Invalid(format!(
                "images must be [n, c, h, w], got {:?}",
                images.dims()
            )));
        }
        if images.dims()[0] != labels.len() {
            return Err(DataError::Invalid(format!(
                "{} images but {} labels",
                images.dims()[0],
                labels.len()
            )));
        }
        if num_classes == 0 || num_classes > 256 {
            return Err(DataError::Invalid(format!("num_classes {num_classes} out of range")));
        }
        let mut class_counts = vec![0usize; num_classes];
        for &l in &labels {
            if (l as usize) >= num_classes {
                return Err(DataError::Invalid(format!(
                    "label {l} out of range for {num_classes} classes"
                )));
            }
            class_counts[l as usize] += 1;
        }
        Ok(Dataset { images, labels, num_classes, class_counts })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    /// (channels, height, width) of one image.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let d = self.images.dims();
        (d[1], d[2], d[3])
    }

    /// Gather the given sample indices into a batch tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<u8>) {
        let (c, h, w) = self.image_dims();
        let stride = c * h * w;
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&src[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        let shape = Shape::new(&[indices.len(), c, h, w]).expect("batch shape");
        (Tensor::from_raw(shape, data), labels)
    }

    /// Per class, keep floor(fraction * count) samples chosen by a seeded
    /// shuffle; the result preserves class balance.
    pub fn subsample_stratified(&self, fraction: f64, seed: u64) -> Result<Dataset, DataError> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(DataError::BadFraction(fraction));
        }
        let mut picked = Vec::new();
        for class in 0..self.num_classes {
            let members: Vec<usize> = (0..self.len())
                .filter(|&i| self.labels[i] as usize == class)
                .collect();
            let keep = (fraction * members.len() as f64).floor() as usize;
            if keep == 0 {
                return Err(DataError::FractionTooSmall { fraction, class });
            }
            let perm = permutation(members.len(), hash_key(seed, &[class as u64]));
            picked.extend(perm[..keep].iter().map(|&p| members[p]));
        }
        let (images, labels) = self.batch(&picked);
        Dataset::new(images, labels, self.num_classes)
    }

    /// Uniform (non-stratified) variant: one seeded shuffle over the whole
    /// set, keep floor(fraction * n).
    pub fn subsample_uniform(&self, fraction: f64, seed: u64) -> Result<Dataset, DataError> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(DataError::BadFraction(fraction));
        }
        let keep = (fraction * self.len() as f64).floor() as usize;
        if keep == 0 {
            return Err(DataError::FractionTooSmall { fraction, class: 0 });
        }
        let perm = permutation(self.len(), seed);
        let (images, labels) = self.batch(&perm[..keep]);
        Dataset::new(images, labels, self.num_classes)
    }

    /// Downscale by averaging non-overlapping factor x factor blocks.
    pub fn resize_box(&self, factor: usize) -> Result<Dataset, DataError> {
        if factor == 0 {
            return Err(DataError::NotDivisible { h: 0, w: 0, factor });
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (c, h, w) = self.image_dims();
        if h % factor != 0 || w % factor != 0 {
            return Err(DataError::NotDivisible { h, w, factor });
        }
        let (nh, nw) = (h / factor, w / factor);
        let n = self.len();
        let src = self.images.data();
        let inv = 1.0 / (factor * factor) as f64;
        let mut out = vec![0.0; n * c * nh * nw];
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut out[plane * nh * nw..(plane + 1) * nh * nw];
            for y in 0..nh {
                for x in 0..nw {
                    let mut acc = 0.0;
                    for by in 0..factor {
                        for bx in 0..factor {
                            acc += s[(y * factor + by) * w + x * factor + bx];
                        }
                    }
                    d[y * nw + x] = acc * inv;
                }
            }
        }
        let shape = Shape::new(&[n, c, nh, nw]).expect("resize shape");
        Dataset::new(Tensor::from_raw(shape, out), self.labels.clone(), self.num_classes)
    }
}
