//! Mini-batch SGD with momentum, frozen-layer support, and per-epoch
//! train/test error logging.

use crate::data::Dataset;
use crate::network::{loss_forward, Layer, Network, NetworkError};
use crate::rng::{hash_key, permutation};
use crate::tensor::Tensor;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("training aborted: non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub shuffle_seed: u64,
    /// Multiplicative learning-rate factor applied per epoch.
    pub lr_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
            epochs: 10,
            shuffle_seed: 0,
            lr_decay: 0.98,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(TrainError::InvalidConfig(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::InvalidConfig(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(TrainError::InvalidConfig(format!(
                "lr_decay {} outside (0, 1]",
                self.lr_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Fraction of training samples misclassified during the epoch,
    /// measured on the forward pass of each batch before its update.
    pub train_error: f64,
    pub test_error: f64,
    pub mean_loss: f64,
}

/// Per-epoch error series; one record per completed epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn final_test_error(&self) -> Option<f64> {
        self.records.last().map(|r| r.test_error)
    }

    /// CSV with the fixed header and 6-decimal fixed-point reals. An
    /// optional comment line (prefixed `# `) carries the run config.
    pub fn to_csv(&self, comment: Option<&str>) -> String {
        let mut out = String::new();
        if let Some(c) = comment {
            let _ = writeln!(out, "# {c}");
        }
        out.push_str("epoch,train_error,test_error,mean_loss\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6}",
                r.epoch, r.train_error, r.test_error, r.mean_loss
            );
        }
        out
    }
}

/// Fraction of samples whose argmax logit differs from the label. Ties
/// break to the lowest class index.
pub fn evaluate(net: &Network, dataset: &Dataset) -> Result<f64, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    const EVAL_BATCH: usize = 64;
    let mut wrong = 0usize;
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, labels) = dataset.batch(chunk);
        let logits = net.forward(&x)?;
        wrong += count_errors(&logits, &labels);
    }
    Ok(wrong as f64 / dataset.len() as f64)
}

fn count_errors(logits: &Tensor, labels: &[u8]) -> usize {
    let classes = logits.dims()[1];
    let data = logits.data();
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &label)| argmax(&data[i * classes..(i + 1) * classes]) != label as usize)
        .count()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

struct Velocity {
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// Train in place for `cfg.epochs` epochs of mini-batch SGD with momentum:
/// v <- momentum * v - lr * grad, W <- (W + v) (*) mask, applied to
/// unfrozen layers only. Data order is reshuffled every epoch from
/// `shuffle_seed`; a non-finite loss aborts with the failing step.
pub fn train(
    net: &mut Network,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &SgdConfig,
) -> Result<TrainingLog, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }

    let mut velocities: Vec<Option<Velocity>> = net
        .layers()
        .iter()
        .map(|layer| match layer {
            Layer::Conv(l) if !l.frozen() => Some(Velocity {
                weights: vec![0.0; l.weights().numel()],
                bias: vec![0.0; l.bias().numel()],
            }),
            Layer::Dense(l) if !l.frozen() => Some(Velocity {
                weights: vec![0.0; l.weights().numel()],
                bias: vec![0.0; l.bias().numel()],
            }),
            _ => None,
        })
        .collect();

    let n = train_set.len();
    let mut log = TrainingLog::default();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate * cfg.lr_decay.powi(epoch as i32);
        let order = permutation(n, hash_key(cfg.shuffle_seed, &[epoch as u64]));
        let mut wrong = 0usize;
        let mut loss_sum = 0.0;

        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = train_set.batch(chunk);
            let (logits, acts) = net.forward_train(&x)?;
            let (loss, grad_logits) = loss_forward(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { step, loss });
            }
            wrong += count_errors(&logits, &labels);
            loss_sum += loss * chunk.len() as f64;

            let grads = net.backward(&acts, &grad_logits)?;
            for (i, grad) in grads.into_iter().enumerate() {
                let Some(grad) = grad else { continue };
                let vel = velocities[i].as_mut().expect("trainable layer has velocity");
                for (v, g) in vel.weights.iter_mut().zip(grad.weights.data()) {
                    *v = cfg.momentum * *v - lr * g;
                }
                for (v, g) in vel.bias.iter_mut().zip(grad.bias.data()) {
                    *v = cfg.momentum * *v - lr * g;
                }
                match net.layer_mut(i) {
                    Layer::Conv(l) => {
                        l.apply_weight_delta(&vel.weights);
                        l.apply_bias_delta(&vel.bias);
                        mask_velocity(&mut vel.weights, l.mask().bits());
                    }
                    Layer::Dense(l) => {
                        l.apply_weight_delta(&vel.weights);
                        l.apply_bias_delta(&vel.bias);
                        mask_velocity(&mut vel.weights, l.mask().bits());
                    }
                    _ => unreachable!("gradients only for parameterized layers"),
                }
            }
            step += 1;
        }

        log.records.push(EpochRecord {
            epoch,
            train_error: wrong as f64 / n as f64,
            test_error: evaluate(net, test_set)?,
            mean_loss: loss_sum / n as f64,
        });
    }
    Ok(log)
}

/// Masked gradients already keep masked velocity entries at zero; this is
/// defense-in-depth for the mask-zero invariant.
fn mask_velocity(velocity: &mut [f64], bits: &[u8]) {
    for (v, &b) in velocity.iter_mut().zip(bits) {
        if b == 0 {
            *v = 0.0;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeEntry {
    pub layer_index: usize,
    pub frozen: bool,
    /// Maskable weight count of the layer (bias excluded).
    pub param_count: usize,
    /// Weights whose mask bit survived.
    pub surviving_count: usize,
}

/// Freeze/sparsity audit over the parameterized layers.
pub fn freeze_report(net: &Network) -> Vec<FreezeEntry> {
    net.layers()
        .iter()
        .enumerate()
        .filter_map(|(layer_index, layer)| {
            layer.mask().map(|mask| FreezeEntry {
                layer_index,
                frozen: layer.frozen(),
                param_count: mask.len(),
                surviving_count: mask.count_ones(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connectivity::binomial_bound;
    use crate::data::Dataset;
    use crate::network::build_paper_architecture;
    use crate::rng::SplitMix;
    use crate::tensor::Shape;

    /// Linearly separable 2-class set: class decided by which half of the
    /// image is brighter.
    fn separable_dataset(n: usize, hw: usize, seed: u64) -> Dataset {
        let mut rng = SplitMix::new(seed);
        let mut data = Vec::with_capacity(n * hw * hw);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = (i % 2) as u8;
            labels.push(class);
            for _row in 0..hw {
                for x in 0..hw {
                    let on_left = x < hw / 2;
                    let bright = (class == 0) == on_left;
                    let base = if bright { 0.8 } else { 0.1 };
                    data.push((base + 0.05 * rng.next_f64()).clamp(0.0, 1.0));
                }
            }
        }
        let images = Tensor::from_vec(Shape::new(&[n, 1, hw, hw]).unwrap(), data).unwrap();
        Dataset::new(images, labels, 2).unwrap()
    }

    fn balanced_dataset(n_per_class: usize, classes: usize, hw: usize) -> Dataset {
        let n = n_per_class * classes;
        let labels: Vec<u8> = (0..n).map(|i| (i % classes) as u8).collect();
        let images = Tensor::zeros(Shape::new(&[n, 1, hw, hw]).unwrap());
        Dataset::new(images, labels, classes).unwrap()
    }

    #[test]
    fn evaluate_counts_mismatches() {
        // Zero images through zero-initialized biases give constant logits;
        // the argmax tie resolves to class 0.
        let net = build_paper_architecture(1, 16, 10, 1.0, 3).unwrap();
        let images = Tensor::zeros(Shape::new(&[5, 1, 16, 16]).unwrap());
        let ds0 = Dataset::new(images, vec![0; 5], 10).unwrap();
        assert_eq!(evaluate(&net, &ds0).unwrap(), 0.0);

        let balanced = balanced_dataset(100, 10, 16);
        let err = evaluate(&net, &balanced).unwrap();
        assert!((err - 0.9).abs() < 1e-12, "balanced error {err}");
    }

    #[test]
    fn untrained_network_is_at_chance_level() {
        let d = crate::data::generate_synthetic_domains(20, 10, 32, 9).unwrap();
        let net = build_paper_architecture(1, 32, 10, 0.75, 4).unwrap();
        let err = evaluate(&net, &d.source_train).unwrap();
        assert!((err - 0.9).abs() <= 0.05, "untrained error {err} not near chance");
    }

    #[test]
    fn zero_epochs_changes_nothing() {
        let mut net = build_paper_architecture(1, 16, 2, 0.75, 3).unwrap();
        let before = net.clone();
        let ds = separable_dataset(8, 16, 1);
        let cfg = SgdConfig { epochs: 0, ..Default::default() };
        let log = train(&mut net, &ds, &ds, &cfg).unwrap();
        assert!(log.records.is_empty());
        assert_eq!(net, before);
    }

    #[test]
    fn config_validation() {
        let bad = SgdConfig { momentum: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = SgdConfig { learning_rate: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = SgdConfig { lr_decay: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = SgdConfig { batch_size: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(SgdConfig::default().validate().is_ok());
    }

    #[test]
    fn separable_set_trains_to_zero_error() {
        let ds = separable_dataset(20, 16, 5);
        let mut net = build_paper_architecture(1, 16, 2, 0.75, 11).unwrap();
        let cfg = SgdConfig {
            learning_rate: 0.02,
            epochs: 200,
            batch_size: 20,
            shuffle_seed: 3,
            lr_decay: 1.0,
            ..Default::default()
        };
        let log = train(&mut net, &ds, &ds, &cfg).unwrap();
        let last = log.records.last().unwrap();
        assert_eq!(last.train_error, 0.0, "did not converge: {last:?}");
        assert!(
            log.records.last().unwrap().mean_loss < log.records[0].mean_loss,
            "loss did not decrease"
        );
    }

    #[test]
    fn training_is_deterministic() {
        let ds = separable_dataset(12, 16, 5);
        let cfg = SgdConfig { epochs: 3, batch_size: 4, ..Default::default() };
        let mut a = build_paper_architecture(1, 16, 2, 0.75, 7).unwrap();
        let mut b = build_paper_architecture(1, 16, 2, 0.75, 7).unwrap();
        let log_a = train(&mut a, &ds, &ds, &cfg).unwrap();
        let log_b = train(&mut b, &ds, &ds, &cfg).unwrap();
        assert_eq!(log_a, log_b);
        assert_eq!(a, b);
    }

    fn assert_mask_zero(net: &Network, when: &str) {
        for (i, layer) in net.layers().iter().enumerate() {
            let (weights, bits) = match layer {
                Layer::Conv(l) => (l.weights(), l.mask().bits()),
                Layer::Dense(l) => (l.weights(), l.mask().bits()),
                _ => continue,
            };
            for (w, &b) in weights.data().iter().zip(bits) {
                if b == 0 {
                    assert_eq!(*w, 0.0, "masked weight nonzero in layer {i} {when}");
                }
            }
        }
    }

    #[test]
    fn mask_zero_invariant_sampled_across_100_steps() {
        // 8 steps per epoch; check the invariant every 8 steps for 104 steps.
        let ds = separable_dataset(64, 16, 2);
        let mut net = build_paper_architecture(1, 16, 2, 0.6, 13).unwrap();
        assert_mask_zero(&net, "after init");
        for round in 0..13 {
            let cfg = SgdConfig {
                epochs: 1,
                batch_size: 8,
                shuffle_seed: round,
                ..Default::default()
            };
            train(&mut net, &ds, &ds, &cfg).unwrap();
            assert_mask_zero(&net, &format!("after step {}", (round + 1) * 8));
        }
    }

    #[test]
    fn velocity_masking_zeroes_dead_positions() {
        let mut v = vec![1.0, 2.0, 3.0, 4.0];
        mask_velocity(&mut v, &[1, 0, 1, 0]);
        assert_eq!(v, vec![1.0, 0.0, 3.0, 0.0]);
    }

    #[test]
    fn frozen_layers_do_not_move() {
        let ds = separable_dataset(16, 16, 2);
        let mut net = build_paper_architecture(1, 16, 2, 0.75, 13).unwrap();
        for i in 0..net.layers().len() {
            if let Layer::Conv(c) = net.layer_mut(i) {
                c.set_frozen(true);
            }
        }
        let frozen_before: Vec<_> = net
            .layers()
            .iter()
            .filter_map(|l| match l {
                Layer::Conv(c) => Some((c.weights().clone(), c.bias().clone())),
                _ => None,
            })
            .collect();
        let cfg = SgdConfig { epochs: 3, batch_size: 8, ..Default::default() };
        train(&mut net, &ds, &ds, &cfg).unwrap();
        let frozen_after: Vec<_> = net
            .layers()
            .iter()
            .filter_map(|l| match l {
                Layer::Conv(c) => Some((c.weights().clone(), c.bias().clone())),
                _ => None,
            })
            .collect();
        assert_eq!(frozen_before, frozen_after);
    }

    #[test]
    fn freeze_report_shape() {
        let mut net = build_paper_architecture(1, 16, 10, 0.75, 21).unwrap();
        let fresh = freeze_report(&net);
        assert_eq!(fresh.len(), 5);
        assert!(fresh.iter().all(|e| !e.frozen));
        for entry in &fresh {
            let bound = binomial_bound(0.75, entry.param_count);
            let frac = entry.surviving_count as f64 / entry.param_count as f64;
            assert!((frac - 0.75).abs() < bound, "layer {}: {frac}", entry.layer_index);
        }

        for i in 0..net.layers().len() {
            if let Layer::Conv(c) = net.layer_mut(i) {
                c.set_frozen(true);
            }
        }
        let report = freeze_report(&net);
        assert!(report[..3].iter().all(|e| e.frozen));
        assert!(report[3..].iter().all(|e| !e.frozen));
    }

    #[test]
    fn csv_format_is_fixed_point() {
        let log = TrainingLog {
            records: vec![EpochRecord {
                epoch: 0,
                train_error: 0.5,
                test_error: 0.25,
                mean_loss: 1.234567899,
            }],
        };
        let csv = log.to_csv(Some("cmd=test"));
        assert_eq!(
            csv,
            "# cmd=test\nepoch,train_error,test_error,mean_loss\n0,0.500000,0.250000,1.234568\n"
        );
    }
}
