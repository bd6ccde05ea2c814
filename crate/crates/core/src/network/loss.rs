//! Softmax cross-entropy head with max-subtraction stabilization.

use super::NetworkError;
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over the batch, plus the gradient w.r.t. the
/// logits: (softmax - onehot) / n.
pub fn loss_forward(logits: &Tensor, labels: &[u8]) -> Result<(f64, Tensor), NetworkError> {
    let dims = logits.dims();
    if dims.len() != 2 {
        return Err(NetworkError::ShapeMismatch {
            context: "loss logits",
            expected: vec![0, 0],
            got: dims.to_vec(),
        });
    }
    let (n, classes) = (dims[0], dims[1]);
    if labels.len() != n {
        return Err(NetworkError::LabelCountMismatch { labels: labels.len(), batch: n });
    }
    if let Some(&bad) = labels.iter().find(|&&l| (l as usize) >= classes) {
        return Err(NetworkError::LabelOutOfRange { label: bad as usize, classes });
    }

    let data = logits.data();
    let mut grad = vec![0.0; n * classes];
    let inv_n = 1.0 / n as f64;
    let mut loss_sum = 0.0;
    for i in 0..n {
        let row = &data[i * classes..(i + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &v in row {
            denom += (v - max).exp();
        }
        let label = labels[i] as usize;
        loss_sum += denom.ln() - (row[label] - max);
        let g_row = &mut grad[i * classes..(i + 1) * classes];
        for (j, (&v, g)) in row.iter().zip(g_row.iter_mut()).enumerate() {
            let softmax = (v - max).exp() / denom;
            *g = (softmax - if j == label { 1.0 } else { 0.0 }) * inv_n;
        }
    }

    let grad = Tensor::from_raw(logits.shape().clone(), grad);
    Ok((loss_sum * inv_n, grad))
}
