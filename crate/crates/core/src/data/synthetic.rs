//! Synthetic two-domain benchmark. Both domains render 32x32-style
//! grayscale images from one shared low-level feature alphabet (oriented
//! bars, corners, blobs, rings) with seeded jitter, a distractor stroke,
//! and pixel noise. Class semantics differ between domains: each class is
//! an ordered pair of primitives placed in two slots, and the two domains
//! use disjoint pair sets. Low-level features therefore transfer while
//! class mappings must be relearned.

use super::{DataError, Dataset};
use crate::rng::{hash_key, permutation, SplitMix};
use crate::tensor::{Shape, Tensor};

const NUM_PRIMITIVES: usize = 8;
const NOISE_SIGMA: f64 = 0.13;
const JITTER: i64 = 4;
const DISTRACTORS: usize = 2;
const MAP_STREAM: u64 = 0x6d61_7073; // "maps"

#[derive(Debug, Clone)]
pub struct SyntheticDomains {
    pub source_train: Dataset,
    pub source_test: Dataset,
    pub target_train: Dataset,
    pub target_test: Dataset,
}

/// Disjoint class -> (left primitive, right primitive) assignments for the
/// two domains, drawn from the 64 ordered pairs by a seeded shuffle.
pub(crate) fn class_feature_maps(
    num_classes: usize,
    seed: u64,
) -> (Vec<(u8, u8)>, Vec<(u8, u8)>) {
    let all = NUM_PRIMITIVES * NUM_PRIMITIVES;
    let perm = permutation(all, hash_key(seed, &[MAP_STREAM]));
    let pair = |i: usize| ((perm[i] / NUM_PRIMITIVES) as u8, (perm[i] % NUM_PRIMITIVES) as u8);
    let source = (0..num_classes).map(pair).collect();
    let target = (num_classes..2 * num_classes).map(pair).collect();
    (source, target)
}

/// Generate train/test splits for both domains. Train splits hold
/// `n_per_class` samples per class; test splits hold
/// `max(1, n_per_class / 4)`. Deterministic given the seed.
pub fn generate_synthetic_domains(
    n_per_class: usize,
    num_classes: usize,
    image_hw: usize,
    seed: u64,
) -> Result<SyntheticDomains, DataError> {
    if n_per_class == 0 {
        return Err(DataError::Invalid("n_per_class must be positive".into()));
    }
    if num_classes < 2 || 2 * num_classes > NUM_PRIMITIVES * NUM_PRIMITIVES {
        return Err(DataError::Invalid(format!(
            "num_classes {num_classes} outside supported range 2..=32"
        )));
    }
    if image_hw < 16 {
        return Err(DataError::Invalid(format!("image_hw {image_hw} below minimum 16")));
    }

    let (source_map, target_map) = class_feature_maps(num_classes, seed);
    let test_per_class = (n_per_class / 4).max(1);
    let render = |map: &[(u8, u8)], per_class: usize, domain: u64, split: u64| {
        render_split(map, per_class, image_hw, seed, domain, split)
    };
    Ok(SyntheticDomains {
        source_train: render(&source_map, n_per_class, 0, 0)?,
        source_test: render(&source_map, test_per_class, 0, 1)?,
        target_train: render(&target_map, n_per_class, 1, 0)?,
        target_test: render(&target_map, test_per_class, 1, 1)?,
    })
}

fn render_split(
    map: &[(u8, u8)],
    per_class: usize,
    hw: usize,
    seed: u64,
    domain: u64,
    split: u64,
) -> Result<Dataset, DataError> {
    let num_classes = map.len();
    let n = num_classes * per_class;
    let mut data = Vec::with_capacity(n * hw * hw);
    let mut labels = Vec::with_capacity(n);
    for (class, &(left, right)) in map.iter().enumerate() {
        for sample in 0..per_class {
            let mut rng = SplitMix::new(hash_key(
                seed,
                &[domain, split, class as u64, sample as u64],
            ));
            data.extend(render_image(hw, left, right, &mut rng));
            labels.push(class as u8);
        }
    }
    let shape = Shape::new(&[n, 1, hw, hw]).expect("synthetic shape");
    Dataset::new(Tensor::from_raw(shape, data), labels, num_classes)
}

fn render_image(hw: usize, left: u8, right: u8, rng: &mut SplitMix) -> Vec<f64> {
    let mut canvas = vec![0.0f64; hw * hw];
    let slots = [(hw as i64 / 2, hw as i64 / 4), (hw as i64 / 2, 3 * hw as i64 / 4)];
    for (prim, (sy, sx)) in [left, right].into_iter().zip(slots) {
        let jy = rng.below(2 * JITTER as usize + 1) as i64 - JITTER;
        let jx = rng.below(2 * JITTER as usize + 1) as i64 - JITTER;
        let intensity = rng.range_f64(0.45, 1.0);
        draw_primitive(&mut canvas, hw, prim, sy + jy, sx + jx, intensity);
    }

    // Low-intensity distractor strokes anywhere on the canvas.
    for _ in 0..DISTRACTORS {
        let dy = rng.below(hw) as i64;
        let dx = rng.below(hw) as i64;
        let orient = rng.below(4);
        let a = rng.range_f64(0.2, 0.55);
        for t in -3i64..=3 {
            let (y, x) = match orient {
                0 => (dy, dx + t),
                1 => (dy + t, dx),
                2 => (dy + t, dx + t),
                _ => (dy + t, dx - t),
            };
            put(&mut canvas, hw, y, x, a);
        }
    }

    for v in &mut canvas {
        let noisy = (*v + NOISE_SIGMA * rng.next_gaussian()).clamp(0.0, 1.0);
        // Quantize to the byte grid so record export is lossless.
        *v = (noisy * 255.0).round() / 255.0;
    }
    canvas
}

fn put(canvas: &mut [f64], hw: usize, y: i64, x: i64, v: f64) {
    if y >= 0 && x >= 0 && (y as usize) < hw && (x as usize) < hw {
        let cell = &mut canvas[y as usize * hw + x as usize];
        if v > *cell {
            *cell = v;
        }
    }
}

fn draw_primitive(canvas: &mut [f64], hw: usize, prim: u8, cy: i64, cx: i64, a: f64) {
    match prim {
        // horizontal bar
        0 => {
            for dy in -1..=1 {
                for dx in -4..=4 {
                    put(canvas, hw, cy + dy, cx + dx, a);
                }
            }
        }
        // vertical bar
        1 => {
            for dy in -4..=4 {
                for dx in -1..=1 {
                    put(canvas, hw, cy + dy, cx + dx, a);
                }
            }
        }
        // main diagonal
        2 => {
            for t in -4..=4 {
                put(canvas, hw, cy + t, cx + t, a);
                put(canvas, hw, cy + t + 1, cx + t, a);
            }
        }
        // anti-diagonal
        3 => {
            for t in -4..=4 {
                put(canvas, hw, cy + t, cx - t, a);
                put(canvas, hw, cy + t + 1, cx - t, a);
            }
        }
        // top-left corner
        4 => {
            for d in -4..=4 {
                put(canvas, hw, cy - 4, cx + d, a);
                put(canvas, hw, cy - 3, cx + d, a);
                put(canvas, hw, cy + d, cx - 4, a);
                put(canvas, hw, cy + d, cx - 3, a);
            }
        }
        // bottom-right corner
        5 => {
            for d in -4..=4 {
                put(canvas, hw, cy + 4, cx + d, a);
                put(canvas, hw, cy + 3, cx + d, a);
                put(canvas, hw, cy + d, cx + 4, a);
                put(canvas, hw, cy + d, cx + 3, a);
            }
        }
        // filled blob
        6 => {
            for dy in -4i64..=4 {
                for dx in -4i64..=4 {
                    if dy * dy + dx * dx <= 11 {
                        put(canvas, hw, cy + dy, cx + dx, a);
                    }
                }
            }
        }
        // ring
        _ => {
            for dy in -5i64..=5 {
                for dx in -5i64..=5 {
                    let r2 = dy * dy + dx * dx;
                    if (9..=22).contains(&r2) {
                        put(canvas, hw, cy + dy, cx + dx, a);
                    }
                }
            }
        }
    }
}
