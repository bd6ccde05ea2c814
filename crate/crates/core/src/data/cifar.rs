//! CIFAR-10 binary-version loader: five 10,000-record training batches
//! plus one test batch of 3073-byte records.

use super::records::{read_records, RECORD_BYTES};
use super::{DataError, Dataset};
use crate::tensor::{Shape, Tensor};
use std::path::Path;

const RECORDS_PER_BATCH: usize = 10_000;
const TRAIN_BATCHES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_BATCH: &str = "test_batch.bin";
const NUM_CLASSES: usize = 10;

fn read_batch(dir: &Path, name: &str) -> Result<Dataset, DataError> {
    let path = dir.join(name);
    let ds = read_records(&path, NUM_CLASSES)?;
    if ds.len() != RECORDS_PER_BATCH {
        return Err(DataError::BadRecordCount {
            path: path.display().to_string(),
            want: RECORDS_PER_BATCH,
            got: ds.len(),
        });
    }
    Ok(ds)
}

fn concat(parts: Vec<Dataset>) -> Result<Dataset, DataError> {
    let (c, h, w) = parts[0].image_dims();
    let total: usize = parts.iter().map(Dataset::len).sum();
    let mut data = Vec::with_capacity(total * c * h * w);
    let mut labels = Vec::with_capacity(total);
    for p in &parts {
        data.extend_from_slice(p.images().data());
        labels.extend_from_slice(p.labels());
    }
    let shape = Shape::new(&[total, c, h, w]).expect("concat shape");
    Dataset::new(Tensor::from_raw(shape, data), labels, NUM_CLASSES)
}

/// Load the binary CIFAR-10 distribution from a directory:
/// 50,000 training images and 10,000 test images in 10 classes,
/// pixels scaled to [0, 1].
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset), DataError> {
    let mut batches = Vec::with_capacity(TRAIN_BATCHES.len());
    for name in TRAIN_BATCHES {
        batches.push(read_batch(dir, name)?);
    }
    let train = concat(batches)?;
    let test = read_batch(dir, TEST_BATCH)?;
    debug_assert_eq!(train.len(), 5 * RECORDS_PER_BATCH);
    Ok((train, test))
}
