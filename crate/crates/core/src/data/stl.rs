//! STL-10 binary loader. Images are 96x96x3 with channel planes stored
//! column-major; planes are transposed to row-major on load. Label bytes
//! run 1-10 and are remapped to 0-9.

use super::{DataError, Dataset};
use crate::tensor::{Shape, Tensor};
use std::fs;
use std::path::Path;

const HW: usize = 96;
const PLANE: usize = HW * HW;
const IMAGE_BYTES: usize = 3 * PLANE;
const NUM_CLASSES: usize = 10;

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            DataError::MissingFile(path_str(path))
        } else {
            DataError::Io { path: path_str(path), source }
        }
    })
}

fn load_split(dir: &Path, image_name: &str, label_name: &str) -> Result<Dataset, DataError> {
    let image_path = dir.join(image_name);
    let label_path = dir.join(label_name);
    let image_bytes = read_file(&image_path)?;
    let label_bytes = read_file(&label_path)?;

    if image_bytes.len() % IMAGE_BYTES != 0 {
        return Err(DataError::BadImageFileSize {
            path: path_str(&image_path),
            len: image_bytes.len() as u64,
            unit: IMAGE_BYTES,
        });
    }
    let n = image_bytes.len() / IMAGE_BYTES;
    if label_bytes.len() != n {
        return Err(DataError::SplitCountMismatch {
            images: path_str(&image_path),
            labels: path_str(&label_path),
            image_count: n,
            label_count: label_bytes.len(),
        });
    }

    let mut labels = Vec::with_capacity(n);
    for &raw in &label_bytes {
        if raw == 0 || raw as usize > NUM_CLASSES {
            return Err(DataError::LabelOutOfRange {
                path: path_str(&label_path),
                label: raw,
                classes: NUM_CLASSES,
            });
        }
        labels.push(raw - 1);
    }

    let mut data = vec![0.0f64; n * IMAGE_BYTES];
    for i in 0..n {
        let img = &image_bytes[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES];
        let dst = &mut data[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES];
        for ch in 0..3 {
            let plane = &img[ch * PLANE..(ch + 1) * PLANE];
            let out = &mut dst[ch * PLANE..(ch + 1) * PLANE];
            // column-major plane: raw[col * HW + row] -> out[row * HW + col]
            for row in 0..HW {
                for col in 0..HW {
                    out[row * HW + col] = plane[col * HW + row] as f64 / 255.0;
                }
            }
        }
    }
    let shape = Shape::new(&[n, 3, HW, HW]).expect("stl shape");
    Dataset::new(Tensor::from_raw(shape, data), labels, NUM_CLASSES)
}

/// Load the labeled STL-10 splits (train_X/train_y, test_X/test_y).
pub fn load_stl10(dir: &Path) -> Result<(Dataset, Dataset), DataError> {
    let train = load_split(dir, "train_X.bin", "train_y.bin")?;
    let test = load_split(dir, "test_X.bin", "test_y.bin")?;
    Ok((train, test))
}
