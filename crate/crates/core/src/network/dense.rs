//! Sparse fully-connected layer gated by a connection mask.

use super::{LayerGrads, NetworkError};
use crate::connectivity::ConnectivityMask;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct SparseDenseLayer {
    weights: Tensor, // [out, in]
    bias: Tensor,    // [out]
    mask: ConnectivityMask,
    frozen: bool,
    rho: f64,
}

impl SparseDenseLayer {
    pub fn new(
        weights: Tensor,
        bias: Tensor,
        mask: ConnectivityMask,
        rho: f64,
    ) -> Result<Self, NetworkError> {
        let dims = weights.dims();
        if dims.len() != 2 {
            return Err(NetworkError::BadLayerConfig(format!(
                "dense weights must be [out, in], got {dims:?}"
            )));
        }
        if bias.dims() != [dims[0]] {
            return Err(NetworkError::BadLayerConfig(format!(
                "dense bias must be [{}], got {:?}",
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
        let mut layer = SparseDenseLayer { weights, bias, mask, frozen: false, rho };
        layer.apply_mask_to_weights();
        Ok(layer)
    }

    pub fn out_dim(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weights.dims()[1]
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

    pub fn set_weights(&mut self, weights: Tensor) -> Result<(), NetworkError> {
        if weights.shape() != self.weights.shape() {
            return Err(NetworkError::ShapeMismatch {
                context: "dense weights",
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
                context: "dense bias",
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
        let dims = input.dims();
        if dims.len() != 2 || dims[1] != self.in_dim() {
            return Err(NetworkError::ShapeMismatch {
                context: "dense input",
                expected: vec![0, self.in_dim()],
                got: dims.to_vec(),
            });
        }
        Ok(Shape::new(&[dims[0], self.out_dim()]).expect("dense output shape"))
    }

    /// y = (W (*) mask) . x + b. The mask-zero invariant makes the raw
    /// weight matrix numerically identical to the gated one.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NetworkError> {
        let out_shape = self.output_shape(x.shape())?;
        let n = x.dims()[0];
        let (din, dout) = (self.in_dim(), self.out_dim());
        let w = self.weights.data();
        let b = self.bias.data();
        let xd = x.data();
        let mut out = vec![0.0; n * dout];
        for ni in 0..n {
            let x_row = &xd[ni * din..(ni + 1) * din];
            let o_row = &mut out[ni * dout..(ni + 1) * dout];
            for (o, ov) in o_row.iter_mut().enumerate() {
                let w_row = &w[o * din..(o + 1) * din];
                let mut acc = b[o];
                for (&wv, &xv) in w_row.iter().zip(x_row) {
                    acc += wv * xv;
                }
                *ov = acc;
            }
        }
        Ok(Tensor::from_raw(out_shape, out))
    }

    pub fn backward(
        &self,
        x: &Tensor,
        grad_out: &Tensor,
    ) -> Result<(Tensor, LayerGrads), NetworkError> {
        let (gx, grads) = self.backward_inner(x, grad_out, true, true)?;
        Ok((gx.expect("grad_x requested"), grads.expect("param grads requested")))
    }

    pub(crate) fn backward_inner(
        &self,
        x: &Tensor,
        grad_out: &Tensor,
        need_grad_x: bool,
        need_param_grads: bool,
    ) -> Result<(Option<Tensor>, Option<LayerGrads>), NetworkError> {
        let out_shape = self.output_shape(x.shape())?;
        if grad_out.shape() != &out_shape {
            return Err(NetworkError::ShapeMismatch {
                context: "dense grad_out",
                expected: out_shape.dims().to_vec(),
                got: grad_out.dims().to_vec(),
            });
        }
        let n = x.dims()[0];
        let (din, dout) = (self.in_dim(), self.out_dim());
        let w = self.weights.data();
        let xd = x.data();
        let g = grad_out.data();

        let param_grads = if need_param_grads {
            let mut grad_w = vec![0.0; dout * din];
            let mut grad_b = vec![0.0; dout];
            for ni in 0..n {
                let x_row = &xd[ni * din..(ni + 1) * din];
                let g_row = &g[ni * dout..(ni + 1) * dout];
                for (o, &gv) in g_row.iter().enumerate() {
                    grad_b[o] += gv;
                    let gw_row = &mut grad_w[o * din..(o + 1) * din];
                    for (gw, &xv) in gw_row.iter_mut().zip(x_row) {
                        *gw += gv * xv;
                    }
                }
            }
            // Nonexistent connections never receive gradient.
            for (gw, &bit) in grad_w.iter_mut().zip(self.mask.bits()) {
                if bit == 0 {
                    *gw = 0.0;
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
            let mut gx = vec![0.0; n * din];
            for ni in 0..n {
                let g_row = &g[ni * dout..(ni + 1) * dout];
                let gx_row = &mut gx[ni * din..(ni + 1) * din];
                for (o, &gv) in g_row.iter().enumerate() {
                    let w_row = &w[o * din..(o + 1) * din];
                    for (gxv, &wv) in gx_row.iter_mut().zip(w_row) {
                        *gxv += gv * wv;
                    }
                }
            }
            Some(Tensor::from_raw(x.shape().clone(), gx))
        } else {
            None
        };

        Ok((grad_x, param_grads))
    }
}
