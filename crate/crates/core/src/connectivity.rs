//! Stochastic connectivity: Gaussian probability maps over receptive
//! fields, calibration of the map to a target mean connectivity, and
//! deterministic Bernoulli realization of binary connection masks.

use crate::rng::keyed_unit;
use crate::tensor::Shape;
use thiserror::Error;

/// Bisection tolerance on the map mean.
const CALIBRATION_TOL: f64 = 1e-9;
const CALIBRATION_MAX_ITERS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConnectivityError {
    #[error("target connectivity {0} outside (0, 1]")]
    ConnectivityOutOfRange(f64),
    #[error("kernel size {0} must be a positive odd integer")]
    BadKernelSize(usize),
    #[error("sigma {0} must be positive and large enough for the kernel")]
    BadSigma(f64),
    #[error("mask dimensions must be positive, got {0:?}")]
    BadMaskDims(Vec<usize>),
    #[error("mask bit at index {0} is not 0 or 1")]
    BadMaskBit(usize),
    #[error("mask bit count {have} does not match shape count {want}")]
    BadMaskLen { have: usize, want: usize },
}

/// Isotropic Gaussian connection-probability model over a k x k receptive
/// field: the mean sits at the field center and connection probability
/// falls off with radial distance, calibrated so the expected fraction of
/// realized connections equals `target_connectivity`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianConnectivityModel {
    kernel_size: usize,
    sigma: f64,
    target_connectivity: f64,
}

impl GaussianConnectivityModel {
    pub fn new(
        kernel_size: usize,
        sigma: f64,
        target_connectivity: f64,
    ) -> Result<Self, ConnectivityError> {
        if kernel_size == 0 || kernel_size % 2 == 0 {
            return Err(ConnectivityError::BadKernelSize(kernel_size));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(ConnectivityError::BadSigma(sigma));
        }
        if !(target_connectivity > 0.0 && target_connectivity <= 1.0) {
            return Err(ConnectivityError::ConnectivityOutOfRange(target_connectivity));
        }
        Ok(GaussianConnectivityModel { kernel_size, sigma, target_connectivity })
    }

    /// Preset used throughout: sigma fixed to a third of the field size.
    pub fn preset(kernel_size: usize, target_connectivity: f64) -> Result<Self, ConnectivityError> {
        Self::new(kernel_size, kernel_size as f64 / 3.0, target_connectivity)
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn target_connectivity(&self) -> f64 {
        self.target_connectivity
    }
}

/// Calibrated per-offset connection probabilities for a k x k field.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    k: usize,
    /// Row-major k x k probabilities, index (ky, kx) = offset (dy, dx)
    /// shifted by the radius.
    p: Vec<f64>,
    /// Calibration constant c in p = min(1, c * gaussian).
    scale_c: f64,
}

impl ProbabilityMap {
    pub fn kernel_size(&self) -> usize {
        self.k
    }

    pub fn values(&self) -> &[f64] {
        &self.p
    }

    pub fn scale_c(&self) -> f64 {
        self.scale_c
    }

    /// Probability at kernel index (ky, kx), each in 0..k.
    pub fn at(&self, ky: usize, kx: usize) -> f64 {
        self.p[ky * self.k + kx]
    }

    /// Probability at signed offset (dy, dx) from the field center.
    pub fn at_offset(&self, dy: i64, dx: i64) -> f64 {
        let r = (self.k / 2) as i64;
        assert!(dy.abs() <= r && dx.abs() <= r, "offset outside field");
        self.at((dy + r) as usize, (dx + r) as usize)
    }

    pub fn mean(&self) -> f64 {
        self.p.iter().sum::<f64>() / self.p.len() as f64
    }
}

/// Calibrate the Gaussian model into per-offset probabilities
/// p(dy,dx) = min(1, c * exp(-(dy^2+dx^2)/(2 sigma^2))), with c found by
/// bisection on [rho, rho / g_min] so that the map mean equals rho.
/// Clamping makes the mean piecewise-linear in c, hence bisection rather
/// than closed-form scaling.
pub fn probability_map(
    model: &GaussianConnectivityModel,
) -> Result<ProbabilityMap, ConnectivityError> {
    let k = model.kernel_size;
    let rho = model.target_connectivity;
    let sigma = model.sigma;
    let r = (k / 2) as i64;

    let mut gauss = Vec::with_capacity(k * k);
    for dy in -r..=r {
        for dx in -r..=r {
            let d2 = (dy * dy + dx * dx) as f64;
            gauss.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    let g_min = gauss.iter().cloned().fold(f64::INFINITY, f64::min);
    if g_min <= 0.0 {
        return Err(ConnectivityError::BadSigma(sigma));
    }

    if rho == 1.0 {
        // Saturated: c = 1/g_min lifts every offset to the clamp.
        return Ok(ProbabilityMap { k, p: vec![1.0; k * k], scale_c: 1.0 / g_min });
    }

    let mean_at = |c: f64| gauss.iter().map(|&g| (c * g).min(1.0)).sum::<f64>() / (k * k) as f64;

    let mut lo = rho;
    let mut hi = rho / g_min;
    let mut c = lo;
    if (mean_at(lo) - rho).abs() > CALIBRATION_TOL {
        for _ in 0..CALIBRATION_MAX_ITERS {
            c = 0.5 * (lo + hi);
            let err = mean_at(c) - rho;
            if err.abs() <= CALIBRATION_TOL {
                break;
            }
            if err < 0.0 {
                lo = c;
            } else {
                hi = c;
            }
        }
    }

    let p: Vec<f64> = gauss.iter().map(|&g| (c * g).min(1.0)).collect();
    Ok(ProbabilityMap { k, p, scale_c: c })
}

/// Binary connection mask congruent to a weight tensor. Bit generation is
/// counter-based: each bit is keyed by (seed, coordinates), so regeneration
/// is order-independent and bit-exact.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectivityMask {
    shape: Shape,
    bits: Vec<u8>,
    seed: u64,
}

impl ConnectivityMask {
    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    /// Flat row-major bits, each 0 or 1.
    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn realized_fraction(&self) -> f64 {
        self.count_ones() as f64 / self.bits.len() as f64
    }

    /// Rebuild a mask from stored bits (checkpoint restore).
    pub fn from_bits(shape: Shape, bits: Vec<u8>, seed: u64) -> Result<Self, ConnectivityError> {
        if bits.len() != shape.numel() {
            return Err(ConnectivityError::BadMaskLen { have: bits.len(), want: shape.numel() });
        }
        if let Some(i) = bits.iter().position(|&b| b > 1) {
            return Err(ConnectivityError::BadMaskBit(i));
        }
        Ok(ConnectivityMask { shape, bits, seed })
    }
}

/// Realize a convolutional connection mask of shape
/// [out_channels, in_channels, k, k]. One bit per filter tap, shared across
/// all spatial positions of the feature map, so sparse connectivity means
/// sparse filters and weight sharing is preserved.
pub fn realize_conv_mask(
    pm: &ProbabilityMap,
    out_channels: usize,
    in_channels: usize,
    seed: u64,
) -> Result<ConnectivityMask, ConnectivityError> {
    if out_channels == 0 || in_channels == 0 {
        return Err(ConnectivityError::BadMaskDims(vec![out_channels, in_channels]));
    }
    let k = pm.kernel_size();
    let shape = Shape::new(&[out_channels, in_channels, k, k])
        .map_err(|_| ConnectivityError::BadMaskDims(vec![out_channels, in_channels, k, k]))?;
    let mut bits = Vec::with_capacity(shape.numel());
    for oc in 0..out_channels {
        for ic in 0..in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let u = keyed_unit(seed, &[oc as u64, ic as u64, ky as u64, kx as u64]);
                    bits.push(u8::from(u < pm.at(ky, kx)));
                }
            }
        }
    }
    Ok(ConnectivityMask { shape, bits, seed })
}

/// Realize a fully-connected mask of shape [out_dim, in_dim] with i.i.d.
/// Bernoulli(rho) bits. Dense layers have no spatial receptive field, so
/// the Gaussian model degenerates to a uniform connection probability.
pub fn realize_dense_mask(
    in_dim: usize,
    out_dim: usize,
    rho: f64,
    seed: u64,
) -> Result<ConnectivityMask, ConnectivityError> {
    if in_dim == 0 || out_dim == 0 {
        return Err(ConnectivityError::BadMaskDims(vec![out_dim, in_dim]));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(ConnectivityError::ConnectivityOutOfRange(rho));
    }
    let shape = Shape::new(&[out_dim, in_dim])
        .map_err(|_| ConnectivityError::BadMaskDims(vec![out_dim, in_dim]))?;
    let mut bits = Vec::with_capacity(shape.numel());
    for row in 0..out_dim {
        for col in 0..in_dim {
            let u = keyed_unit(seed, &[row as u64, col as u64]);
            bits.push(u8::from(u < rho));
        }
    }
    Ok(ConnectivityMask { shape, bits, seed })
}

/// 5-sigma binomial bound on the deviation of an empirical fraction from p
/// over n trials.
pub fn binomial_bound(p: f64, n: usize) -> f64 {
    5.0 * (p * (1.0 - p) / n as f64).sqrt()
}
