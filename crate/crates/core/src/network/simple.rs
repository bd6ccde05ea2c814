//! Parameter-free layers: 2x2 max pooling, ReLU, and flatten.

use super::NetworkError;
use crate::tensor::{Shape, Tensor};

/// 2x2 max pooling with stride 2. Height and width must be even.
pub fn maxpool2_forward(x: &Tensor) -> Result<Tensor, NetworkError> {
    let out_shape = maxpool2_output_shape(x.shape())?;
    let dims = x.dims();
    let (n, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for r in 0..oh {
            for col in 0..ow {
                let base = 2 * r * w + 2 * col;
                let mut best = src[base];
                for &cand in &[src[base + 1], src[base + w], src[base + w + 1]] {
                    if cand > best {
                        best = cand;
                    }
                }
                dst[r * ow + col] = best;
            }
        }
    }
    Ok(Tensor::from_raw(out_shape, out))
}

/// Routes each output gradient to the argmax of its window. Ties go to the
/// first maximum in row-major scan order, matching the forward pass.
pub fn maxpool2_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor, NetworkError> {
    let out_shape = maxpool2_output_shape(x.shape())?;
    if grad_out.shape() != &out_shape {
        return Err(NetworkError::ShapeMismatch {
            context: "maxpool2 grad_out",
            expected: out_shape.dims().to_vec(),
            got: grad_out.dims().to_vec(),
        });
    }
    let dims = x.dims();
    let (n, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let g = grad_out.data();
    let mut gx = vec![0.0; xd.len()];
    for plane in 0..n * c {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        let gp = &g[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
        for r in 0..oh {
            for col in 0..ow {
                let base = 2 * r * w + 2 * col;
                let mut best_idx = base;
                let mut best = src[base];
                for off in [1, w, w + 1] {
                    if src[base + off] > best {
                        best = src[base + off];
                        best_idx = base + off;
                    }
                }
                dst[best_idx] += gp[r * ow + col];
            }
        }
    }
    Ok(Tensor::from_raw(x.shape().clone(), gx))
}

pub fn maxpool2_output_shape(input: &Shape) -> Result<Shape, NetworkError> {
    let dims = input.dims();
    if dims.len() != 4 {
        return Err(NetworkError::ShapeMismatch {
            context: "maxpool2 input",
            expected: vec![0, 0, 0, 0],
            got: dims.to_vec(),
        });
    }
    let (h, w) = (dims[2], dims[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(NetworkError::OddPoolInput { h, w });
    }
    Ok(Shape::new(&[dims[0], dims[1], h / 2, w / 2]).expect("pool output shape"))
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::from_raw(x.shape().clone(), data)
}

/// Subgradient at exactly zero is zero.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor, NetworkError> {
    if grad_out.shape() != x.shape() {
        return Err(NetworkError::ShapeMismatch {
            context: "relu grad_out",
            expected: x.dims().to_vec(),
            got: grad_out.dims().to_vec(),
        });
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Ok(Tensor::from_raw(x.shape().clone(), data))
}

/// Collapse all non-batch dimensions into one.
pub fn flatten_forward(x: &Tensor) -> Result<Tensor, NetworkError> {
    Ok(x.reshape(flatten_output_shape(x.shape())?)?)
}

pub fn flatten_backward(input_shape: &Shape, grad_out: &Tensor) -> Result<Tensor, NetworkError> {
    Ok(grad_out.reshape(input_shape.clone())?)
}

pub fn flatten_output_shape(input: &Shape) -> Result<Shape, NetworkError> {
    let dims = input.dims();
    if dims.len() < 2 {
        return Err(NetworkError::ShapeMismatch {
            context: "flatten input",
            expected: vec![0, 0],
            got: dims.to_vec(),
        });
    }
    let rest: usize = dims[1..].iter().product();
    Ok(Shape::new(&[dims[0], rest]).expect("flatten output shape"))
}
