//! Sparse 2-D convolution (cross-correlation, no kernel flip) gated by a
//! connection mask. Masked weights are exactly zero at all times and
//! masked positions never receive gradient.
//!
//! Kernels lower each sample to an im2col matrix (one row per filter tap,
//! one column per output position) so the hot loops run over whole output
//! planes and vectorize.

use super::{LayerGrads, NetworkError};
use crate::connectivity::ConnectivityMask;
use crate::tensor::{Shape, Tensor};
use rayon::prelude::*;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseConvLayer {
    weights: Tensor, // [oc, ic, k, k]
    bias: Tensor,    // [oc]
    mask: ConnectivityMask,
    stride: usize,
    padding: usize,
    frozen: bool,
    rho: f64,
}

/// Surviving filter tap.
struct Tap {
    /// Flat tap index (ic * k + ky) * k + kx; also the im2col row.
    t: usize,
    w: f64,
}

/// Per-call geometry shared by the kernels.
struct Geom {
    n: usize,
    ic: usize,
    h: usize,
    w: usize,
    oc: usize,
    oh: usize,
    ow: usize,
    k: usize,
    stride: usize,
    padding: usize,
}

impl Geom {
    fn padded_h(&self) -> usize {
        self.h + 2 * self.padding
    }

    fn padded_w(&self) -> usize {
        self.w + 2 * self.padding
    }

    fn out_positions(&self) -> usize {
        self.oh * self.ow
    }

    fn tap_count(&self) -> usize {
        self.ic * self.k * self.k
    }

    /// Offset of tap `t`'s first read within a padded sample.
    fn tap_base(&self, t: usize) -> usize {
        let k = self.k;
        let (ic, ky, kx) = (t / (k * k), (t / k) % k, t % k);
        ic * self.padded_h() * self.padded_w() + ky * self.padded_w() + kx
    }
}

/// Dot product with eight interleaved accumulators so the reduction
/// vectorizes; the summation order is fixed and deterministic.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let av = &a[i * 8..i * 8 + 8];
        let bv = &b[i * 8..i * 8 + 8];
        for l in 0..8 {
            acc[l] += av[l] * bv[l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    acc.iter().sum::<f64>() + tail
}

fn axpy(dst: &mut [f64], w: f64, src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += w * s;
    }
}

impl SparseConvLayer {
    pub fn new(
        weights: Tensor,
        bias: Tensor,
        mask: ConnectivityMask,
        stride: usize,
        padding: usize,
        rho: f64,
    ) -> Result<Self, NetworkError> {
        let dims = weights.dims();
        if dims.len() != 4 || dims[2] != dims[3] {
            return Err(NetworkError::BadLayerConfig(format!(
                "conv weights must be [oc, ic, k, k], got {dims:?}"
            )));
        }
        if bias.dims() != [dims[0]] {
            return Err(NetworkError::BadLayerConfig(format!(
                "conv bias must be [{}], got {:?}",
                dims[0],
                bias.dims()
            )));
        }
        if mask.shape() != weights.shape() {
            return Err(NetworkError::BadLayerConfig(format!(
                "mask shape {:?} does not match weights {:?}",
                mask.shape().dims(),
                dims
            )));
        }
        if stride == 0 {
            return Err(NetworkError::BadLayerConfig("stride must be positive".into()));
        }
        let mut layer =
            SparseConvLayer { weights, bias, mask, stride, padding, frozen: false, rho };
        layer.apply_mask_to_weights();
        Ok(layer)
    }

    pub fn out_channels(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.dims()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.weights.dims()[2]
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn mask(&self) -> &ConnectivityMask {
        &self.mask
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// Replace weights; masked-out entries are forced back to zero.
    pub fn set_weights(&mut self, weights: Tensor) -> Result<(), NetworkError> {
        if weights.shape() != self.weights.shape() {
            return Err(NetworkError::ShapeMismatch {
                context: "conv weights",
                expected: self.weights.dims().to_vec(),
                got: weights.dims().to_vec(),
            });
        }
        self.weights = weights;
        self.apply_mask_to_weights();
        Ok(())
    }

    pub fn set_bias(&mut self, bias: Tensor) -> Result<(), NetworkError> {
        if bias.shape() != self.bias.shape() {
            return Err(NetworkError::ShapeMismatch {
                context: "conv bias",
                expected: self.bias.dims().to_vec(),
                got: bias.dims().to_vec(),
            });
        }
        self.bias = bias;
        Ok(())
    }

    fn apply_mask_to_weights(&mut self) {
        let bits = self.mask.bits();
        for (w, &b) in self.weights.data_mut().iter_mut().zip(bits) {
            if b == 0 {
                *w = 0.0;
            }
        }
    }

    /// Weight update used by the optimizer: add `delta` to the weights and
    /// re-apply the mask.
    pub(crate) fn apply_weight_delta(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.weights.numel());
        let bits = self.mask.bits();
        for ((w, &d), &b) in self.weights.data_mut().iter_mut().zip(delta).zip(bits) {
            *w = if b == 0 { 0.0 } else { *w + d };
        }
    }

    pub(crate) fn apply_bias_delta(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.bias.numel());
        for (b, &d) in self.bias.data_mut().iter_mut().zip(delta) {
            *b += d;
        }
    }

    pub fn output_shape(&self, input: &Shape) -> Result<Shape, NetworkError> {
        Ok(Shape::new(&self.geometry(input)?.output_dims()).expect("conv output shape"))
    }

    fn geometry(&self, input: &Shape) -> Result<Geom, NetworkError> {
        let dims = input.dims();
        if dims.len() != 4 {
            return Err(NetworkError::ShapeMismatch {
                context: "conv input",
                expected: vec![0, self.in_channels(), 0, 0],
                got: dims.to_vec(),
            });
        }
        let (n, ic, h, w) = (dims[0], dims[1], dims[2], dims[3]);
        if ic != self.in_channels() {
            return Err(NetworkError::ChannelMismatch { want: self.in_channels(), got: ic });
        }
        let k = self.kernel_size();
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < k || pw < k {
            return Err(NetworkError::KernelExceedsInput { k, h, w, padding: self.padding });
        }
        Ok(Geom {
            n,
            ic,
            h,
            w,
            oc: self.out_channels(),
            oh: (ph - k) / self.stride + 1,
            ow: (pw - k) / self.stride + 1,
            k,
            stride: self.stride,
            padding: self.padding,
        })
    }

    fn surviving_taps(&self, per_oc: usize) -> Vec<Vec<Tap>> {
        let oc = self.out_channels();
        let bits = self.mask.bits();
        let wdata = self.weights.data();
        (0..oc)
            .map(|o| {
                (0..per_oc)
                    .filter(|t| bits[o * per_oc + t] != 0)
                    .map(|t| Tap { t, w: wdata[o * per_oc + t] })
                    .collect()
            })
            .collect()
    }

    /// Cross-correlate a batch with the masked filters and add bias.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NetworkError> {
        let g = self.geometry(x.shape())?;
        let taps = self.surviving_taps(g.tap_count());
        let bias = self.bias.data();
        let opos = g.out_positions();
        let mut out = vec![0.0; g.n * g.oc * opos];

        out.par_chunks_mut(g.oc * opos)
            .zip(x.data().par_chunks(g.ic * g.h * g.w))
            .for_each(|(out_sample, x_sample)| {
                let mut padded = vec![0.0; g.ic * g.padded_h() * g.padded_w()];
                pad_sample(x_sample, &g, &mut padded);
                let mut col = vec![0.0; g.tap_count() * opos];
                im2col(&padded, &g, &mut col);
                for (o, tap_list) in taps.iter().enumerate() {
                    let plane = &mut out_sample[o * opos..(o + 1) * opos];
                    plane.fill(bias[o]);
                    for tap in tap_list {
                        axpy(plane, tap.w, &col[tap.t * opos..(tap.t + 1) * opos]);
                    }
                }
            });

        Ok(Tensor::from_raw(Shape::new(&g.output_dims()).expect("conv shape"), out))
    }

    /// Gradients of the loss w.r.t. input, weights, and bias.
    pub fn backward(
        &self,
        x: &Tensor,
        grad_out: &Tensor,
    ) -> Result<(Tensor, LayerGrads), NetworkError> {
        let (gx, grads) = self.backward_inner(x, grad_out, true, true)?;
        Ok((gx.expect("grad_x requested"), grads.expect("param grads requested")))
    }

    /// Backward pass with selectable outputs so the network can skip work
    /// for frozen layers and for the lowest trainable layer.
    pub(crate) fn backward_inner(
        &self,
        x: &Tensor,
        grad_out: &Tensor,
        need_grad_x: bool,
        need_param_grads: bool,
    ) -> Result<(Option<Tensor>, Option<LayerGrads>), NetworkError> {
        let g = self.geometry(x.shape())?;
        let out_dims = g.output_dims();
        if grad_out.dims() != out_dims {
            return Err(NetworkError::ShapeMismatch {
                context: "conv grad_out",
                expected: out_dims.to_vec(),
                got: grad_out.dims().to_vec(),
            });
        }
        let taps = self.surviving_taps(g.tap_count());
        let opos = g.out_positions();
        let per_oc = g.tap_count();
        let go = grad_out.data();

        // One parallel pass per sample; parameter-gradient partials are
        // reduced afterwards in ascending batch order.
        let per_sample: Vec<(Option<Vec<f64>>, Option<(Vec<f64>, Vec<f64>)>)> = x
            .data()
            .par_chunks(g.ic * g.h * g.w)
            .zip(go.par_chunks(g.oc * opos))
            .map(|(x_sample, g_sample)| {
                let params = need_param_grads.then(|| {
                    let mut padded = vec![0.0; g.ic * g.padded_h() * g.padded_w()];
                    pad_sample(x_sample, &g, &mut padded);
                    let mut col = vec![0.0; per_oc * opos];
                    im2col(&padded, &g, &mut col);
                    let mut gw = vec![0.0; g.oc * per_oc];
                    let mut gb = vec![0.0; g.oc];
                    for (o, tap_list) in taps.iter().enumerate() {
                        let g_plane = &g_sample[o * opos..(o + 1) * opos];
                        for tap in tap_list {
                            gw[o * per_oc + tap.t] =
                                dot(g_plane, &col[tap.t * opos..(tap.t + 1) * opos]);
                        }
                        gb[o] = g_plane.iter().sum();
                    }
                    (gw, gb)
                });

                let gx = need_grad_x.then(|| {
                    let mut grad_col = vec![0.0; per_oc * opos];
                    for (o, tap_list) in taps.iter().enumerate() {
                        let g_plane = &g_sample[o * opos..(o + 1) * opos];
                        for tap in tap_list {
                            axpy(
                                &mut grad_col[tap.t * opos..(tap.t + 1) * opos],
                                tap.w,
                                g_plane,
                            );
                        }
                    }
                    // col2im: scatter-add tap rows back into padded space,
                    // then crop the padding off.
                    let mut grad_padded = vec![0.0; g.ic * g.padded_h() * g.padded_w()];
                    col2im(&grad_col, &g, &mut grad_padded);
                    let mut gx_sample = vec![0.0; g.ic * g.h * g.w];
                    crop_sample(&grad_padded, &g, &mut gx_sample);
                    gx_sample
                });

                (gx, params)
            })
            .collect();

        let param_grads = if need_param_grads {
            let mut grad_w = vec![0.0; g.oc * per_oc];
            let mut grad_b = vec![0.0; g.oc];
            for (_, params) in &per_sample {
                let (gw, gb) = params.as_ref().expect("param partial");
                for (a, b) in grad_w.iter_mut().zip(gw) {
                    *a += b;
                }
                for (a, b) in grad_b.iter_mut().zip(gb) {
                    *a += b;
                }
            }
            Some(LayerGrads {
                weights: Tensor::from_raw(self.weights.shape().clone(), grad_w),
                bias: Tensor::from_raw(self.bias.shape().clone(), grad_b),
            })
        } else {
            None
        };

        let grad_x = if need_grad_x {
            let mut gx = Vec::with_capacity(x.numel());
            for (sample_gx, _) in per_sample {
                gx.extend_from_slice(&sample_gx.expect("grad_x partial"));
            }
            Some(Tensor::from_raw(x.shape().clone(), gx))
        } else {
            None
        };

        Ok((grad_x, param_grads))
    }
}

impl Geom {
    fn output_dims(&self) -> [usize; 4] {
        [self.n, self.oc, self.oh, self.ow]
    }
}

fn pad_sample(src: &[f64], g: &Geom, dst: &mut [f64]) {
    let (ph, pw, p) = (g.padded_h(), g.padded_w(), g.padding);
    if p == 0 {
        dst.copy_from_slice(src);
        return;
    }
    for c in 0..g.ic {
        for row in 0..g.h {
            let s = &src[(c * g.h + row) * g.w..(c * g.h + row + 1) * g.w];
            let d = &mut dst[(c * ph + row + p) * pw + p..][..g.w];
            d.copy_from_slice(s);
        }
    }
}

fn crop_sample(padded: &[f64], g: &Geom, dst: &mut [f64]) {
    let (ph, pw, p) = (g.padded_h(), g.padded_w(), g.padding);
    if p == 0 {
        dst.copy_from_slice(padded);
        return;
    }
    for c in 0..g.ic {
        for row in 0..g.h {
            let s = &padded[(c * ph + row + p) * pw + p..][..g.w];
            dst[(c * g.h + row) * g.w..(c * g.h + row + 1) * g.w].copy_from_slice(s);
        }
    }
}

/// col[t][r * ow + c] = padded[tap_base(t) + r * stride * pw + c * stride].
fn im2col(padded: &[f64], g: &Geom, col: &mut [f64]) {
    let (pw, s, opos) = (g.padded_w(), g.stride, g.out_positions());
    for t in 0..g.tap_count() {
        let base = g.tap_base(t);
        let dst = &mut col[t * opos..(t + 1) * opos];
        if s == 1 {
            for r in 0..g.oh {
                dst[r * g.ow..(r + 1) * g.ow]
                    .copy_from_slice(&padded[base + r * pw..base + r * pw + g.ow]);
            }
        } else {
            for r in 0..g.oh {
                let row = base + r * s * pw;
                for c in 0..g.ow {
                    dst[r * g.ow + c] = padded[row + c * s];
                }
            }
        }
    }
}

/// Transpose of `im2col` with accumulation.
fn col2im(col: &[f64], g: &Geom, padded: &mut [f64]) {
    let (pw, s, opos) = (g.padded_w(), g.stride, g.out_positions());
    for t in 0..g.tap_count() {
        let base = g.tap_base(t);
        let src = &col[t * opos..(t + 1) * opos];
        if s == 1 {
            for r in 0..g.oh {
                let dst = &mut padded[base + r * pw..base + r * pw + g.ow];
                for (d, &v) in dst.iter_mut().zip(&src[r * g.ow..(r + 1) * g.ow]) {
                    *d += v;
                }
            }
        } else {
            for r in 0..g.oh {
                let row = base + r * s * pw;
                for c in 0..g.ow {
                    padded[row + c * s] += src[r * g.ow + c];
                }
            }
        }
    }
}
