//! 3073-byte record files: 1 label byte followed by a 32x32 RGB image
//! stored as channel planes (R, G, B), each plane row-major. This is the
//! CIFAR-10 binary layout; synthetic datasets export to it as well.

use super::{DataError, Dataset};
use crate::tensor::{Shape, Tensor};
use std::fs;
use std::path::Path;

pub const RECORD_HW: usize = 32;
pub const RECORD_BYTES: usize = 1 + 3 * RECORD_HW * RECORD_HW;

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

/// Parse a record file. Every label must be below `num_classes`.
pub fn read_records(path: &Path, num_classes: usize) -> Result<Dataset, DataError> {
    let bytes = fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            DataError::MissingFile(path_str(path))
        } else {
            DataError::Io { path: path_str(path), source }
        }
    })?;
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(DataError::TruncatedRecord {
            path: path_str(path),
            offset: (bytes.len() / RECORD_BYTES * RECORD_BYTES) as u64,
        });
    }
    let n = bytes.len() / RECORD_BYTES;
    let plane = RECORD_HW * RECORD_HW;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * 3 * plane);
    for rec in 0..n {
        let record = &bytes[rec * RECORD_BYTES..(rec + 1) * RECORD_BYTES];
        let label = record[0];
        if (label as usize) >= num_classes {
            return Err(DataError::LabelOutOfRange {
                path: path_str(path),
                label,
                classes: num_classes,
            });
        }
        labels.push(label);
        data.extend(record[1..].iter().map(|&b| b as f64 / 255.0));
    }
    let shape = Shape::new(&[n, 3, RECORD_HW, RECORD_HW]).expect("record shape");
    Dataset::new(Tensor::from_raw(shape, data), labels, num_classes)
}

/// Write a dataset as 3073-byte records. Images must be 32x32 with 1 or 3
/// channels; single-channel images are replicated across R, G, B. Pixel
/// values are quantized to bytes by rounding.
pub fn write_records(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    let (c, h, w) = ds.image_dims();
    if h != RECORD_HW || w != RECORD_HW || !(c == 1 || c == 3) {
        return Err(DataError::Invalid(format!(
            "record format requires 1- or 3-channel {RECORD_HW}x{RECORD_HW} images, got {c}x{h}x{w}"
        )));
    }
    let plane = RECORD_HW * RECORD_HW;
    let src = ds.images().data();
    let mut bytes = Vec::with_capacity(ds.len() * RECORD_BYTES);
    for i in 0..ds.len() {
        bytes.push(ds.labels()[i]);
        let img = &src[i * c * plane..(i + 1) * c * plane];
        for ch in 0..3 {
            let p = if c == 3 { &img[ch * plane..(ch + 1) * plane] } else { &img[..plane] };
            bytes.extend(p.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
    }
    fs::write(path, bytes).map_err(|source| DataError::Io { path: path_str(path), source })
}
