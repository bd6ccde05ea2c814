use super::*;
use crate::connectivity::binomial_bound;
use crate::rng::SplitMix;

fn shape(dims: &[usize]) -> Shape {
    Shape::new(dims).unwrap()
}

fn full_mask(dims: &[usize]) -> ConnectivityMask {
    ConnectivityMask::from_bits(shape(dims), vec![1; dims.iter().product()], 0).unwrap()
}

fn random_tensor(rng: &mut SplitMix, dims: &[usize]) -> Tensor {
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| rng.range_f64(-1.0, 1.0)).collect();
    Tensor::from_vec(shape(dims), data).unwrap()
}

/// Independent dense convolution oracle: six explicit loops, bounds checks
/// instead of padding buffers, no mask awareness.
fn conv_oracle(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let (n, ic, h, wd) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let (oc, k) = (w.dims()[0], w.dims()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * oc * oh * ow];
    for ni in 0..n {
        for o in 0..oc {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b[o];
                    for c in 0..ic {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    let xi = x.at(&[ni, c, iy as usize, ix as usize]);
                                    let wi = w.at(&[o, c, ky, kx]);
                                    acc += wi * xi;
                                }
                            }
                        }
                    }
                    out[((ni * oc + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Relative error with an absolute floor: tiny gradients compare absolutely.
fn grad_close(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff < 1e-7 || diff / analytic.abs().max(numeric.abs()) < 1e-4
}

#[test]
fn identity_kernel_reproduces_input() {
    let mut w = vec![0.0; 9];
    w[4] = 1.0; // center tap
    let layer = SparseConvLayer::new(
        Tensor::from_vec(shape(&[1, 1, 3, 3]), w).unwrap(),
        Tensor::zeros(shape(&[1])),
        full_mask(&[1, 1, 3, 3]),
        1,
        1,
        1.0,
    )
    .unwrap();
    let x = Tensor::from_vec(
        shape(&[1, 1, 3, 3]),
        vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
    )
    .unwrap();
    let y = layer.forward(&x).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn conv_matches_six_loop_oracle() {
    let mut rng = SplitMix::new(21);
    let x = random_tensor(&mut rng, &[2, 3, 8, 8]);
    let w = random_tensor(&mut rng, &[4, 3, 3, 3]);
    let b: Vec<f64> = (0..4).map(|_| rng.range_f64(-0.5, 0.5)).collect();
    for &(stride, pad) in &[(1usize, 1usize), (1, 0), (2, 1)] {
        let layer = SparseConvLayer::new(
            w.clone(),
            Tensor::from_vec(shape(&[4]), b.clone()).unwrap(),
            full_mask(&[4, 3, 3, 3]),
            stride,
            pad,
            1.0,
        )
        .unwrap();
        let got = layer.forward(&x).unwrap();
        let want = conv_oracle(&x, &w, &b, stride, pad);
        assert!(
            max_abs_diff(got.data(), &want) < 1e-10,
            "stride {stride} pad {pad} diverges from oracle"
        );
    }
}

#[test]
fn masked_tap_equals_dense_conv_with_zeroed_weight() {
    let mut rng = SplitMix::new(31);
    let x = random_tensor(&mut rng, &[2, 2, 6, 6]);
    let w = random_tensor(&mut rng, &[3, 2, 3, 3]);
    let b = vec![0.1, -0.2, 0.3];

    // Zero out tap (oc=1, ic=0, ky=2, kx=1) via the mask.
    let mut bits = vec![1u8; 3 * 2 * 3 * 3];
    let dead = ((1 * 2 + 0) * 3 + 2) * 3 + 1;
    bits[dead] = 0;
    let mask = ConnectivityMask::from_bits(shape(&[3, 2, 3, 3]), bits, 0).unwrap();
    let layer = SparseConvLayer::new(
        w.clone(),
        Tensor::from_vec(shape(&[3]), b.clone()).unwrap(),
        mask,
        1,
        1,
        0.9,
    )
    .unwrap();

    let mut w_zeroed = w.data().to_vec();
    w_zeroed[dead] = 0.0;
    let want = conv_oracle(
        &x,
        &Tensor::from_vec(shape(&[3, 2, 3, 3]), w_zeroed).unwrap(),
        &b,
        1,
        1,
    );
    assert!(max_abs_diff(layer.forward(&x).unwrap().data(), &want) < 1e-12);
}

#[test]
fn zero_grad_out_gives_zero_grads() {
    let mut rng = SplitMix::new(41);
    let x = random_tensor(&mut rng, &[1, 2, 4, 4]);
    let layer = SparseConvLayer::new(
        random_tensor(&mut rng, &[2, 2, 3, 3]),
        random_tensor(&mut rng, &[2]),
        full_mask(&[2, 2, 3, 3]),
        1,
        1,
        1.0,
    )
    .unwrap();
    let grad_out = Tensor::zeros(layer.output_shape(x.shape()).unwrap());
    let (gx, grads) = layer.backward(&x, &grad_out).unwrap();
    assert!(gx.data().iter().all(|&v| v == 0.0));
    assert!(grads.weights.data().iter().all(|&v| v == 0.0));
    assert!(grads.bias.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = SplitMix::new(51);
    let x = random_tensor(&mut rng, &[1, 2, 6, 6]);
    // Mixed mask: roughly three quarters of taps survive.
    let bits: Vec<u8> = (0..3 * 2 * 3 * 3).map(|_| u8::from(rng.next_f64() < 0.75)).collect();
    let mask = ConnectivityMask::from_bits(shape(&[3, 2, 3, 3]), bits.clone(), 0).unwrap();
    let layer = SparseConvLayer::new(
        random_tensor(&mut rng, &[3, 2, 3, 3]),
        random_tensor(&mut rng, &[3]),
        mask,
        1,
        1,
        0.75,
    )
    .unwrap();

    let out_shape = layer.output_shape(x.shape()).unwrap();
    let probe = random_tensor(&mut rng, out_shape.dims());
    let probe_loss = |l: &SparseConvLayer, input: &Tensor| -> f64 {
        l.forward(input)
            .unwrap()
            .data()
            .iter()
            .zip(probe.data())
            .map(|(a, b)| a * b)
            .sum()
    };

    let (gx, grads) = layer.backward(&x, &probe).unwrap();
    let eps = 1e-5;

    for idx in 0..layer.weights().numel() {
        if bits[idx] == 0 {
            assert_eq!(grads.weights.data()[idx], 0.0, "masked tap {idx} received gradient");
            continue;
        }
        let mut plus = layer.clone();
        let mut minus = layer.clone();
        let mut wp = layer.weights().data().to_vec();
        wp[idx] += eps;
        plus.set_weights(Tensor::from_vec(layer.weights().shape().clone(), wp).unwrap()).unwrap();
        let mut wm = layer.weights().data().to_vec();
        wm[idx] -= eps;
        minus.set_weights(Tensor::from_vec(layer.weights().shape().clone(), wm).unwrap()).unwrap();
        let numeric = (probe_loss(&plus, &x) - probe_loss(&minus, &x)) / (2.0 * eps);
        assert!(
            grad_close(grads.weights.data()[idx], numeric),
            "weight {idx}: analytic {} vs numeric {numeric}",
            grads.weights.data()[idx]
        );
    }

    for idx in 0..layer.bias().numel() {
        let mut bp = layer.bias().data().to_vec();
        bp[idx] += eps;
        let mut bm = layer.bias().data().to_vec();
        bm[idx] -= eps;
        let mut plus = layer.clone();
        plus.set_bias(Tensor::from_vec(layer.bias().shape().clone(), bp).unwrap()).unwrap();
        let mut minus = layer.clone();
        minus.set_bias(Tensor::from_vec(layer.bias().shape().clone(), bm).unwrap()).unwrap();
        let numeric = (probe_loss(&plus, &x) - probe_loss(&minus, &x)) / (2.0 * eps);
        assert!(grad_close(grads.bias.data()[idx], numeric), "bias {idx}");
    }

    for idx in 0..x.numel() {
        let mut xp = x.data().to_vec();
        xp[idx] += eps;
        let mut xm = x.data().to_vec();
        xm[idx] -= eps;
        let numeric = (probe_loss(&layer, &Tensor::from_vec(x.shape().clone(), xp).unwrap())
            - probe_loss(&layer, &Tensor::from_vec(x.shape().clone(), xm).unwrap()))
            / (2.0 * eps);
        assert!(grad_close(gx.data()[idx], numeric), "input {idx}");
    }
}

#[test]
fn dense_identity_passthrough() {
    let eye = Tensor::from_vec(shape(&[3, 3]), vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
    let layer = SparseDenseLayer::new(eye, Tensor::zeros(shape(&[3])), full_mask(&[3, 3]), 1.0)
        .unwrap();
    let x = Tensor::from_vec(shape(&[2, 3]), vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
    assert_eq!(layer.forward(&x).unwrap().data(), x.data());
}

#[test]
fn dense_gradients_match_finite_differences() {
    let mut rng = SplitMix::new(61);
    let bits: Vec<u8> = (0..5 * 4).map(|_| u8::from(rng.next_f64() < 0.75)).collect();
    let mask = ConnectivityMask::from_bits(shape(&[5, 4]), bits.clone(), 0).unwrap();
    let layer = SparseDenseLayer::new(
        random_tensor(&mut rng, &[5, 4]),
        random_tensor(&mut rng, &[5]),
        mask,
        0.75,
    )
    .unwrap();
    let x = random_tensor(&mut rng, &[3, 4]);
    let probe = random_tensor(&mut rng, &[3, 5]);
    let probe_loss = |l: &SparseDenseLayer, input: &Tensor| -> f64 {
        l.forward(input)
            .unwrap()
            .data()
            .iter()
            .zip(probe.data())
            .map(|(a, b)| a * b)
            .sum()
    };

    let (gx, grads) = layer.backward(&x, &probe).unwrap();
    let eps = 1e-5;
    for idx in 0..20 {
        if bits[idx] == 0 {
            assert_eq!(grads.weights.data()[idx], 0.0);
            continue;
        }
        let mut wp = layer.weights().data().to_vec();
        wp[idx] += eps;
        let mut wm = layer.weights().data().to_vec();
        wm[idx] -= eps;
        let mut plus = layer.clone();
        plus.set_weights(Tensor::from_vec(shape(&[5, 4]), wp).unwrap()).unwrap();
        let mut minus = layer.clone();
        minus.set_weights(Tensor::from_vec(shape(&[5, 4]), wm).unwrap()).unwrap();
        let numeric = (probe_loss(&plus, &x) - probe_loss(&minus, &x)) / (2.0 * eps);
        assert!(grad_close(grads.weights.data()[idx], numeric), "weight {idx}");
    }
    for idx in 0..x.numel() {
        let mut xp = x.data().to_vec();
        xp[idx] += eps;
        let mut xm = x.data().to_vec();
        xm[idx] -= eps;
        let numeric = (probe_loss(&layer, &Tensor::from_vec(shape(&[3, 4]), xp).unwrap())
            - probe_loss(&layer, &Tensor::from_vec(shape(&[3, 4]), xm).unwrap()))
            / (2.0 * eps);
        assert!(grad_close(gx.data()[idx], numeric), "input {idx}");
    }
}

#[test]
fn maxpool_routes_gradient_to_argmax() {
    let x = Tensor::from_vec(shape(&[1, 1, 2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = maxpool2_forward(&x).unwrap();
    assert_eq!(y.data(), &[4.0]);
    let g = Tensor::from_vec(shape(&[1, 1, 1, 1]), vec![5.0]).unwrap();
    let gx = maxpool2_backward(&x, &g).unwrap();
    assert_eq!(gx.data(), &[0.0, 0.0, 0.0, 5.0]);
}

#[test]
fn maxpool_ties_break_to_first_in_scan_order() {
    let x = Tensor::filled(shape(&[1, 1, 4, 4]), 0.5).unwrap();
    let g = Tensor::filled(shape(&[1, 1, 2, 2]), 1.0).unwrap();
    let gx = maxpool2_backward(&x, &g).unwrap();
    // Each 2x2 window sends its gradient to the top-left cell.
    let want = vec![
        1.0, 0.0, 1.0, 0.0, //
        0.0, 0.0, 0.0, 0.0, //
        1.0, 0.0, 1.0, 0.0, //
        0.0, 0.0, 0.0, 0.0,
    ];
    assert_eq!(gx.data(), &want[..]);
    assert!(maxpool2_forward(&Tensor::zeros(shape(&[1, 1, 3, 4]))).is_err());
}

#[test]
fn relu_values_and_subgradient_at_zero() {
    let x = Tensor::from_vec(shape(&[3]), vec![-1.0, 0.0, 2.0]).unwrap();
    let y = relu_forward(&x);
    assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    let g = Tensor::filled(shape(&[3]), 1.0).unwrap();
    let gx = relu_backward(&x, &g).unwrap();
    assert_eq!(gx.data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn builder_produces_documented_shapes() {
    let net = build_paper_architecture(3, 32, 10, 0.75, 7).unwrap();
    let conv_shapes: Vec<Vec<usize>> = net
        .layers()
        .iter()
        .filter_map(|l| match l {
            Layer::Conv(c) => Some(c.mask().shape().dims().to_vec()),
            _ => None,
        })
        .collect();
    assert_eq!(
        conv_shapes,
        vec![vec![32, 3, 5, 5], vec![32, 32, 5, 5], vec![64, 32, 5, 5]]
    );
    let dense_shapes: Vec<Vec<usize>> = net
        .layers()
        .iter()
        .filter_map(|l| match l {
            Layer::Dense(d) => Some(d.weights().dims().to_vec()),
            _ => None,
        })
        .collect();
    assert_eq!(dense_shapes, vec![vec![64, 1024], vec![10, 64]]);

    assert!(matches!(
        build_paper_architecture(3, 33, 10, 0.75, 7),
        Err(NetworkError::InputSizeNotDivisible(33))
    ));
}

#[test]
fn builder_shape_chain() {
    let net = build_paper_architecture(3, 32, 10, 0.75, 7).unwrap();
    let chain = net.shape_chain(&shape(&[4, 3, 32, 32])).unwrap();
    let dims: Vec<Vec<usize>> = chain.iter().map(|s| s.dims().to_vec()).collect();
    let want: Vec<Vec<usize>> = vec![
        vec![4, 32, 32, 32], // conv1, same padding
        vec![4, 32, 32, 32], // relu
        vec![4, 32, 16, 16], // pool
        vec![4, 32, 16, 16], // conv2
        vec![4, 32, 16, 16],
        vec![4, 32, 8, 8],
        vec![4, 64, 8, 8], // conv3
        vec![4, 64, 8, 8],
        vec![4, 64, 4, 4],
        vec![4, 1024], // flatten
        vec![4, 64],   // hidden dense
        vec![4, 64],
        vec![4, 10], // output
    ];
    assert_eq!(dims, want);

    // The reported chain matches actual forward shapes.
    let x = Tensor::zeros(shape(&[4, 3, 32, 32]));
    let logits = net.forward(&x).unwrap();
    assert_eq!(logits.dims(), &[4, 10]);
}

#[test]
fn saturated_network_has_full_masks() {
    let net = build_paper_architecture(1, 16, 4, 1.0, 3).unwrap();
    for layer in net.layers() {
        if let Some(mask) = layer.mask() {
            assert_eq!(mask.count_ones(), mask.len());
        }
    }
}

#[test]
fn surviving_parameter_fraction_near_rho() {
    let net = build_paper_architecture(3, 32, 10, 0.75, 99).unwrap();
    let (mut total, mut surviving) = (0usize, 0usize);
    for layer in net.layers() {
        if let Some(mask) = layer.mask() {
            total += mask.len();
            surviving += mask.count_ones();
        }
    }
    let frac = surviving as f64 / total as f64;
    let bound = binomial_bound(0.75, total);
    assert!((frac - 0.75).abs() < bound, "fraction {frac} outside bound {bound}");
}

#[test]
fn builder_is_deterministic() {
    let a = build_paper_architecture(1, 16, 10, 0.75, 1234).unwrap();
    let b = build_paper_architecture(1, 16, 10, 0.75, 1234).unwrap();
    assert_eq!(a, b);

    let mut rng = SplitMix::new(5);
    let x = random_tensor(&mut rng, &[2, 1, 16, 16]);
    let la = a.forward(&x).unwrap();
    let lb = b.forward(&x).unwrap();
    assert_eq!(la.data(), lb.data());

    let c = build_paper_architecture(1, 16, 10, 0.75, 1235).unwrap();
    assert_ne!(a, c);
}

#[test]
fn masked_weights_are_zero_after_init() {
    let net = build_paper_architecture(1, 16, 10, 0.5, 8).unwrap();
    for layer in net.layers() {
        match layer {
            Layer::Conv(l) => {
                for (w, &b) in l.weights().data().iter().zip(l.mask().bits()) {
                    if b == 0 {
                        assert_eq!(*w, 0.0);
                    } else {
                        assert_ne!(*w, 0.0);
                    }
                }
            }
            Layer::Dense(l) => {
                for (w, &b) in l.weights().data().iter().zip(l.mask().bits()) {
                    if b == 0 {
                        assert_eq!(*w, 0.0);
                    }
                }
            }
            _ => {}
        }
    }
}

#[test]
fn frozen_layers_report_no_param_grads() {
    let mut net = build_paper_architecture(1, 16, 4, 1.0, 2).unwrap();
    // Freeze the first conv layer only.
    if let Layer::Conv(c) = net.layer_mut(0) {
        c.set_frozen(true);
    }
    let mut rng = SplitMix::new(6);
    let x = random_tensor(&mut rng, &[2, 1, 16, 16]);
    let (logits, acts) = net.forward_train(&x).unwrap();
    let (_, grad_logits) = loss_forward(&logits, &[0, 1]).unwrap();
    let grads = net.backward(&acts, &grad_logits).unwrap();
    assert!(grads[0].is_none(), "frozen conv produced parameter grads");
    let param_layers: Vec<usize> = net
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| l.has_params())
        .map(|(i, _)| i)
        .collect();
    for &i in &param_layers[1..] {
        assert!(grads[i].is_some(), "trainable layer {i} missing grads");
    }
}
