//! Layer definitions, hand-written forward/backward passes, and the
//! three-conv architecture builder with stochastic connectivity.

mod conv;
mod dense;
mod loss;
mod simple;

pub use conv::SparseConvLayer;
pub use dense::SparseDenseLayer;
pub use loss::loss_forward;
pub use simple::{
    flatten_backward, flatten_forward, flatten_output_shape, maxpool2_backward, maxpool2_forward,
    maxpool2_output_shape, relu_backward, relu_forward,
};

use crate::connectivity::{
    probability_map, realize_conv_mask, realize_dense_mask, ConnectivityError,
    ConnectivityMask, GaussianConnectivityModel,
};
use crate::rng::{hash_key, keyed_unit};
use crate::tensor::{Shape, Tensor, TensorError};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Connectivity(#[from] ConnectivityError),
    #[error("input size {0} must be a positive multiple of 8")]
    InputSizeNotDivisible(usize),
    #[error("expected {want} input channels, got {got}")]
    ChannelMismatch { want: usize, got: usize },
    #[error("{context}: expected dims {expected:?} (0 = any), got {got:?}")]
    ShapeMismatch { context: &'static str, expected: Vec<usize>, got: Vec<usize> },
    #[error("maxpool2 requires even height and width, got {h}x{w}")]
    OddPoolInput { h: usize, w: usize },
    #[error("kernel {k} exceeds padded input {h}x{w} (padding {padding})")]
    KernelExceedsInput { k: usize, h: usize, w: usize, padding: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{labels} labels for a batch of {batch}")]
    LabelCountMismatch { labels: usize, batch: usize },
    #[error("network output dim {got} does not match num_classes {want}")]
    OutputDimMismatch { got: usize, want: usize },
    #[error("backward cache has {got} activations for {want} layers")]
    CacheMismatch { got: usize, want: usize },
    #[error("invalid layer configuration: {0}")]
    BadLayerConfig(String),
}

/// Parameter gradients of one masked layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Tensor,
    pub bias: Tensor,
}

/// One element of the network stack.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(SparseConvLayer),
    MaxPool2,
    Relu,
    Flatten,
    Dense(SparseDenseLayer),
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::MaxPool2 => "maxpool2",
            Layer::Relu => "relu",
            Layer::Flatten => "flatten",
            Layer::Dense(_) => "dense",
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NetworkError> {
        match self {
            Layer::Conv(l) => l.forward(x),
            Layer::MaxPool2 => maxpool2_forward(x),
            Layer::Relu => Ok(relu_forward(x)),
            Layer::Flatten => flatten_forward(x),
            Layer::Dense(l) => l.forward(x),
        }
    }

    pub fn output_shape(&self, input: &Shape) -> Result<Shape, NetworkError> {
        match self {
            Layer::Conv(l) => l.output_shape(input),
            Layer::MaxPool2 => maxpool2_output_shape(input),
            Layer::Relu => Ok(input.clone()),
            Layer::Flatten => flatten_output_shape(input),
            Layer::Dense(l) => l.output_shape(input),
        }
    }

    pub fn mask(&self) -> Option<&ConnectivityMask> {
        match self {
            Layer::Conv(l) => Some(l.mask()),
            Layer::Dense(l) => Some(l.mask()),
            _ => None,
        }
    }

    pub fn frozen(&self) -> bool {
        match self {
            Layer::Conv(l) => l.frozen(),
            Layer::Dense(l) => l.frozen(),
            _ => false,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, Layer::Conv(_) | Layer::Dense(_))
    }

    fn trainable(&self) -> bool {
        self.has_params() && !self.frozen()
    }
}

/// Ordered layer stack with a softmax cross-entropy head.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    num_classes: usize,
}

impl Network {
    pub fn new(layers: Vec<Layer>, num_classes: usize) -> Result<Self, NetworkError> {
        let Some(Layer::Dense(last)) = layers.iter().rev().find(|l| l.has_params()) else {
            return Err(NetworkError::BadLayerConfig(
                "network must end in a dense layer".into(),
            ));
        };
        if last.out_dim() != num_classes {
            return Err(NetworkError::OutputDimMismatch { got: last.out_dim(), want: num_classes });
        }
        Ok(Network { layers, num_classes })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_mut(&mut self, index: usize) -> &mut Layer {
        &mut self.layers[index]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Logits for a batch.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NetworkError> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur)?;
        }
        Ok(cur)
    }

    /// Forward pass that keeps each layer's input for the backward pass.
    pub fn forward_train(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>), NetworkError> {
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let next = layer.forward(&cur)?;
            acts.push(cur);
            cur = next;
        }
        Ok((cur, acts))
    }

    /// Backpropagate from the logit gradient. Returns one entry per layer:
    /// parameter gradients for trainable layers, `None` elsewhere. Frozen
    /// layers propagate the input gradient but report no parameter grads;
    /// gradients are not computed below the deepest trainable layer.
    pub fn backward(
        &self,
        acts: &[Tensor],
        grad_logits: &Tensor,
    ) -> Result<Vec<Option<LayerGrads>>, NetworkError> {
        if acts.len() != self.layers.len() {
            return Err(NetworkError::CacheMismatch {
                got: acts.len(),
                want: self.layers.len(),
            });
        }
        let mut grads: Vec<Option<LayerGrads>> = self.layers.iter().map(|_| None).collect();
        let Some(lowest) = self.layers.iter().position(Layer::trainable) else {
            return Ok(grads);
        };
        let mut g = grad_logits.clone();
        for i in (lowest..self.layers.len()).rev() {
            let need_gx = i > lowest;
            match &self.layers[i] {
                Layer::Conv(l) => {
                    let need_pg = !l.frozen();
                    let (gx, pg) = l.backward_inner(&acts[i], &g, need_gx, need_pg)?;
                    grads[i] = pg;
                    if let Some(gx) = gx {
                        g = gx;
                    }
                }
                Layer::Dense(l) => {
                    let need_pg = !l.frozen();
                    let (gx, pg) = l.backward_inner(&acts[i], &g, need_gx, need_pg)?;
                    grads[i] = pg;
                    if let Some(gx) = gx {
                        g = gx;
                    }
                }
                Layer::MaxPool2 => g = maxpool2_backward(&acts[i], &g)?,
                Layer::Relu => g = relu_backward(&acts[i], &g)?,
                Layer::Flatten => g = flatten_backward(acts[i].shape(), &g)?,
            }
        }
        Ok(grads)
    }

    /// Chain every layer's reported output shape.
    pub fn output_shape(&self, input: &Shape) -> Result<Shape, NetworkError> {
        let mut cur = input.clone();
        for layer in &self.layers {
            cur = layer.output_shape(&cur)?;
        }
        Ok(cur)
    }

    /// Intermediate shapes, one entry per layer output.
    pub fn shape_chain(&self, input: &Shape) -> Result<Vec<Shape>, NetworkError> {
        let mut chain = Vec::with_capacity(self.layers.len());
        let mut cur = input.clone();
        for layer in &self.layers {
            cur = layer.output_shape(&cur)?;
            chain.push(cur.clone());
        }
        Ok(chain)
    }
}

const MASK_STREAM: u64 = 0x6d61_736b; // "mask"
const WEIGHT_STREAM: u64 = 0x7767_7473; // "wgts"

/// Three 5x5 conv layers of 32, 32, and 64 filters (same padding, stride 1,
/// each followed by ReLU and 2x2 max pooling), a hidden dense layer of 64
/// neurons with ReLU, and a dense output layer. Every conv and dense weight
/// is gated by a connectivity mask at connectivity `rho`: conv masks from
/// the Gaussian receptive-field model, dense masks i.i.d. Bernoulli.
pub fn build_paper_architecture(
    in_channels: usize,
    input_hw: usize,
    num_classes: usize,
    rho: f64,
    seed: u64,
) -> Result<Network, NetworkError> {
    if in_channels == 0 || num_classes == 0 {
        return Err(NetworkError::BadLayerConfig(
            "channel and class counts must be positive".into(),
        ));
    }
    if input_hw == 0 || input_hw % 8 != 0 {
        return Err(NetworkError::InputSizeNotDivisible(input_hw));
    }
    const KERNEL: usize = 5;
    let pm = probability_map(&GaussianConnectivityModel::preset(KERNEL, rho)?)?;

    let mut layers = Vec::new();
    let conv_dims = [(in_channels, 32), (32, 32), (32, 64)];
    for (i, &(ic, oc)) in conv_dims.iter().enumerate() {
        let stack_index = layers.len() as u64;
        let mask_seed = hash_key(seed, &[stack_index, MASK_STREAM]);
        let weight_seed = hash_key(seed, &[stack_index, WEIGHT_STREAM]);
        let mask = realize_conv_mask(&pm, oc, ic, mask_seed)?;
        let weights = init_masked_weights(
            Shape::new(&[oc, ic, KERNEL, KERNEL])?,
            &mask,
            mask.count_ones() as f64 / oc as f64,
            mask.count_ones() as f64 / ic as f64,
            weight_seed,
        );
        let bias = Tensor::zeros(Shape::new(&[oc])?);
        layers.push(Layer::Conv(SparseConvLayer::new(weights, bias, mask, 1, 2, rho)?));
        layers.push(Layer::Relu);
        layers.push(Layer::MaxPool2);
        let _ = i;
    }
    layers.push(Layer::Flatten);

    let pooled = input_hw / 8;
    let dense_dims = [(64 * pooled * pooled, 64), (64, num_classes)];
    for (i, &(din, dout)) in dense_dims.iter().enumerate() {
        let stack_index = layers.len() as u64;
        let mask_seed = hash_key(seed, &[stack_index, MASK_STREAM]);
        let weight_seed = hash_key(seed, &[stack_index, WEIGHT_STREAM]);
        let mask = realize_dense_mask(din, dout, rho, mask_seed)?;
        let weights = init_masked_weights(
            Shape::new(&[dout, din])?,
            &mask,
            mask.count_ones() as f64 / dout as f64,
            mask.count_ones() as f64 / din as f64,
            weight_seed,
        );
        let bias = Tensor::zeros(Shape::new(&[dout])?);
        layers.push(Layer::Dense(SparseDenseLayer::new(weights, bias, mask, rho)?));
        if i == 0 {
            layers.push(Layer::Relu);
        }
    }

    Network::new(layers, num_classes)
}

/// Uniform init in [-a, a] with a = sqrt(6 / (fan_in_eff + fan_out_eff)),
/// where the effective fans count only surviving mask bits: sparsity lowers
/// the effective fan, so the variance is calibrated to the connections that
/// actually exist. Masked positions are zero.
fn init_masked_weights(
    shape: Shape,
    mask: &ConnectivityMask,
    fan_in_eff: f64,
    fan_out_eff: f64,
    seed: u64,
) -> Tensor {
    let denom = fan_in_eff + fan_out_eff;
    let a = if denom > 0.0 { (6.0 / denom).sqrt() } else { 0.0 };
    let bits = mask.bits();
    let data = (0..shape.numel())
        .map(|j| {
            if bits[j] == 0 {
                0.0
            } else {
                a * (2.0 * keyed_unit(seed, &[j as u64]) - 1.0)
            }
        })
        .collect();
    Tensor::from_raw(shape, data)
}

#[cfg(test)]
mod tests;
