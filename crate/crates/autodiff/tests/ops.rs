//! Per-operation forward values and gradient checks.

use approx::assert_relative_eq;
use autodiff::{
    finite_diff_check, finite_diff_check_params, gru_cell, AdError, Activation, Graph, GruParams,
    ParamStore, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

// ---- matmul -----------------------------------------------------------------

#[test]
fn matmul_identity() {
    let mut g = Graph::new();
    let eye = g.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let a = g.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let c = g.matmul(eye, a).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_hand_arithmetic() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap());
    let b = g.leaf(Tensor::from_vec(&[2, 1], vec![3.0, 4.0]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).shape(), &[1, 1]);
    assert_eq!(g.value(c).data(), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::zeros(&[2, 3]));
    let b = g.leaf(Tensor::zeros(&[2, 2]));
    match g.matmul(a, b) {
        Err(AdError::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 2]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn matmul_grad_matches_finite_differences() {
    // d sum(A·B) / dA at A = ones, B = 2I equals [[2,2],[2,2]]
    let b_val = Tensor::from_vec(&[2, 2], vec![2.0, 0.0, 0.0, 2.0]).unwrap();
    let a_val = Tensor::full(&[2, 2], 1.0);
    let report = finite_diff_check(
        |g, a| {
            let b = g.leaf(b_val.clone());
            let c = g.matmul(a, b)?;
            Ok(g.sum(c))
        },
        &a_val,
        1e-6,
        1e-9,
    )
    .unwrap();
    assert!(report.pass, "{report:?}");

    let mut g = Graph::new();
    let a = g.leaf(a_val);
    let b = g.leaf(b_val);
    let c = g.matmul(a, b).unwrap();
    let loss = g.sum(c);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(a).unwrap().data(), &[2.0, 2.0, 2.0, 2.0]);
}

// ---- conv2d -----------------------------------------------------------------

/// Direct quadruple-loop convolution, independent of the graph implementation.
fn conv2d_oracle(input: &Tensor, kernels: &Tensor, dilation: usize) -> Tensor {
    let (ci, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
    );
    let co = kernels.shape()[0];
    let mut out = Tensor::zeros(&[co, h, w]);
    let d = dilation as isize;
    for o in 0..co {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for c in 0..ci {
                    for ky in 0..3isize {
                        for kx in 0..3isize {
                            let sy = y as isize + d * (ky - 1);
                            let sx = x as isize + d * (kx - 1);
                            if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                continue;
                            }
                            acc += input.at3(c, sy as usize, sx as usize)
                                * kernels.data()
                                    [((o * ci + c) * 3 + ky as usize) * 3 + kx as usize];
                        }
                    }
                }
                out.data_mut()[(o * h + y) * w + x] = acc;
            }
        }
    }
    out
}

#[test]
fn conv2d_all_ones_edge_effect() {
    let mut g = Graph::new();
    let input = g.leaf(Tensor::full(&[1, 5, 5], 1.0));
    let kernels = g.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
    let out = g.conv2d(input, kernels, 1).unwrap();
    let v = g.value(out);
    assert_eq!(v.at3(0, 2, 2), 9.0);
    assert_eq!(v.at3(0, 0, 0), 4.0);
    assert_eq!(v.at3(0, 0, 4), 4.0);
    assert_eq!(v.at3(0, 4, 0), 4.0);
    assert_eq!(v.at3(0, 0, 2), 6.0);
}

#[test]
fn conv2d_zero_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let input = g.leaf(rand_tensor(&mut rng, &[2, 4, 4]));
    let kernels = g.leaf(Tensor::zeros(&[3, 2, 3, 3]));
    let out = g.conv2d(input, kernels, 1).unwrap();
    assert!(g.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv2d_matches_loop_oracle_dilated() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let input = rand_tensor(&mut rng, &[1, 6, 6]);
    let kernels = rand_tensor(&mut rng, &[2, 1, 3, 3]);
    let expect = conv2d_oracle(&input, &kernels, 2);
    let mut g = Graph::new();
    let i = g.leaf(input);
    let k = g.leaf(kernels);
    let out = g.conv2d(i, k, 2).unwrap();
    let max_diff = g
        .value(out)
        .data()
        .iter()
        .zip(expect.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(max_diff < 1e-12, "max diff {max_diff}");
}

#[test]
fn conv2d_channel_mismatch() {
    let mut g = Graph::new();
    let input = g.leaf(Tensor::zeros(&[2, 4, 4]));
    let kernels = g.leaf(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(g.conv2d(input, kernels, 1).is_err());
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = ParamStore::new();
    params.insert("input", rand_tensor(&mut rng, &[2, 5, 5]));
    params.insert("kernels", rand_tensor(&mut rng, &[2, 2, 3, 3]));
    for dilation in [1, 2] {
        let report = finite_diff_check_params(
            |g, b| {
                let out = g.conv2d(b.id("input"), b.id("kernels"), dilation)?;
                let act = g.activation(out, Activation::Elu);
                Ok(g.sum(act))
            },
            &params,
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.pass, "dilation {dilation}: {report:?}");
    }
}

// ---- activations ------------------------------------------------------------

#[test]
fn elu_closed_form() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(-1.0));
    let y = g.activation(x, Activation::Elu);
    assert_relative_eq!(g.value(y).item(), (-1.0f64).exp() - 1.0, epsilon = 1e-15);
    assert_relative_eq!(g.value(y).item(), -0.63212, epsilon = 1e-5);
}

#[test]
fn relu_vector() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_vec(&[3], vec![-2.0, 0.0, 3.0]).unwrap());
    let y = g.activation(x, Activation::Relu);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 3.0]);
}

#[test]
fn activation_gradients_match_finite_differences() {
    let points = Tensor::from_vec(&[4], vec![-1.5, -0.1, 0.1, 2.0]).unwrap();
    for kind in [
        Activation::Elu,
        Activation::Relu,
        Activation::Sigmoid,
        Activation::Tanh,
    ] {
        let report = finite_diff_check(
            |g, x| {
                let y = g.activation(x, kind);
                Ok(g.sum(y))
            },
            &points,
            1e-6,
            1e-10,
        )
        .unwrap();
        assert!(report.pass, "{kind:?}: {report:?}");
    }
}

// ---- instance norm ----------------------------------------------------------

#[test]
fn instance_norm_constant_channel_is_zero() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::full(&[1, 3, 3], 4.2));
    let gamma = g.leaf(Tensor::full(&[1], 1.0));
    let beta = g.leaf(Tensor::zeros(&[1]));
    let y = g.instance_norm(x, gamma, beta).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn instance_norm_affine_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let x = g.leaf(rand_tensor(&mut rng, &[2, 3, 3]));
    let gamma = g.leaf(Tensor::zeros(&[2]));
    let beta = g.leaf(Tensor::full(&[2], 5.0));
    let y = g.instance_norm(x, gamma, beta).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 5.0));
}

#[test]
fn instance_norm_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut params = ParamStore::new();
    params.insert("x", rand_tensor(&mut rng, &[2, 4, 4]));
    params.insert("gamma", rand_tensor(&mut rng, &[2]));
    params.insert("beta", rand_tensor(&mut rng, &[2]));
    let report = finite_diff_check_params(
        |g, b| {
            let y = g.instance_norm(b.id("x"), b.id("gamma"), b.id("beta"))?;
            let z = g.activation(y, Activation::Tanh);
            Ok(g.sum(z))
        },
        &params,
        1e-4,
        1e-8,
    )
    .unwrap();
    assert!(report.pass, "{report:?}");
}

// ---- softmax cross entropy ----------------------------------------------------

#[test]
fn cross_entropy_perfect_prediction() {
    let mut g = Graph::new();
    let logits = g.leaf(Tensor::from_vec(&[2, 2], vec![100.0, 0.0, 0.0, 100.0]).unwrap());
    let loss = g
        .softmax_cross_entropy(logits, &[0, 1], &[true, true])
        .unwrap();
    assert!(g.value(loss).item() < 1e-6);
}

#[test]
fn cross_entropy_uniform_logits() {
    let mut g = Graph::new();
    let logits = g.leaf(Tensor::zeros(&[3, 2]));
    let loss = g
        .softmax_cross_entropy(logits, &[0, 1, 0], &[true, true, true])
        .unwrap();
    assert_relative_eq!(g.value(loss).item(), 2.0f64.ln(), epsilon = 1e-15);
}

#[test]
fn cross_entropy_all_masked_is_error() {
    let mut g = Graph::new();
    let logits = g.leaf(Tensor::zeros(&[2, 2]));
    match g.softmax_cross_entropy(logits, &[0, 0], &[false, false]) {
        Err(AdError::EmptyLoss) => {}
        other => panic!("expected EmptyLoss, got {other:?}"),
    }
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    // 3x3 positions x 4 classes, one position masked
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let logits = rand_tensor(&mut rng, &[9, 4]);
    let targets: Vec<usize> = (0..9).map(|_| rng.gen_range(0..4)).collect();
    let mut mask = vec![true; 9];
    mask[4] = false;
    let report = finite_diff_check(
        |g, x| g.softmax_cross_entropy(x, &targets, &mask),
        &logits,
        1e-5,
        1e-10,
    )
    .unwrap();
    assert!(report.pass, "{report:?}");
}

// ---- gru cell ---------------------------------------------------------------

fn gru_param_store(rng: &mut ChaCha8Rng, d: usize, zero: bool) -> ParamStore {
    let mut params = ParamStore::new();
    for name in ["wz", "uz", "wr", "ur", "wn", "un"] {
        let t = if zero {
            Tensor::zeros(&[d, d])
        } else {
            rand_tensor(rng, &[d, d])
        };
        params.insert(name, t);
    }
    for name in ["bz", "br", "bn"] {
        let t = if zero {
            Tensor::zeros(&[d])
        } else {
            rand_tensor(rng, &[d])
        };
        params.insert(name, t);
    }
    params
}

fn bind_gru(b: &autodiff::ParamBinding) -> GruParams {
    GruParams {
        w_update: b.id("wz"),
        u_update: b.id("uz"),
        b_update: b.id("bz"),
        w_reset: b.id("wr"),
        u_reset: b.id("ur"),
        b_reset: b.id("br"),
        w_cand: b.id("wn"),
        u_cand: b.id("un"),
        b_cand: b.id("bn"),
    }
}

#[test]
fn gru_zero_weights_halve_the_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let params = gru_param_store(&mut rng, 3, true);
    let h_val = rand_tensor(&mut rng, &[2, 3]);
    let mut g = Graph::new();
    let binding = params.bind(&mut g);
    let h = g.leaf(h_val.clone());
    let m = g.leaf(Tensor::zeros(&[2, 3]));
    let out = gru_cell(&mut g, h, m, &bind_gru(&binding)).unwrap();
    for (y, x) in g.value(out).data().iter().zip(h_val.data()) {
        assert_relative_eq!(*y, 0.5 * x, epsilon = 1e-15);
    }
}

#[test]
fn gru_saturated_update_gate_carries_state_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut params = gru_param_store(&mut rng, 3, true);
    params.insert("bz", Tensor::full(&[3], 40.0));
    let h_val = rand_tensor(&mut rng, &[2, 3]);
    let mut g = Graph::new();
    let binding = params.bind(&mut g);
    let h = g.leaf(h_val.clone());
    let m = g.leaf(Tensor::zeros(&[2, 3]));
    let out = gru_cell(&mut g, h, m, &bind_gru(&binding)).unwrap();
    for (y, x) in g.value(out).data().iter().zip(h_val.data()) {
        assert_relative_eq!(*y, *x, epsilon = 1e-12);
    }
}

#[test]
fn gru_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut params = gru_param_store(&mut rng, 3, false);
    params.insert("h", rand_tensor(&mut rng, &[2, 3]));
    params.insert("m", rand_tensor(&mut rng, &[2, 3]));
    let report = finite_diff_check_params(
        |g, b| {
            let out = gru_cell(g, b.id("h"), b.id("m"), &bind_gru(b))?;
            Ok(g.sum(out))
        },
        &params,
        1e-4,
        1e-9,
    )
    .unwrap();
    assert!(report.pass, "{report:?}");
}

#[test]
fn gru_parameter_shape_mismatch() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let mut params = gru_param_store(&mut rng, 3, false);
    params.insert("wz", Tensor::zeros(&[2, 2]));
    let mut g = Graph::new();
    let binding = params.bind(&mut g);
    let h = g.leaf(rand_tensor(&mut rng, &[2, 3]));
    let m = g.leaf(rand_tensor(&mut rng, &[2, 3]));
    assert!(gru_cell(&mut g, h, m, &bind_gru(&binding)).is_err());
}

// ---- structured ops -----------------------------------------------------------

#[test]
fn edge_to_edge_matches_stated_values() {
    // C_in = C_out = 1, W = H = 1, identity rho, no normalization
    let mut g = Graph::new();
    let a = g.leaf(Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let w = g.leaf(Tensor::full(&[1, 1], 1.0));
    let h = g.leaf(Tensor::full(&[1, 1], 1.0));
    let out = g.edge_to_edge(a, w, h, false).unwrap();
    let v = g.value(out);
    assert_eq!(v.at3(0, 0, 0), 7.0); // (1+2) + (1+3)
    assert_eq!(v.at3(0, 1, 1), 13.0); // (3+4) + (2+4)
}

#[test]
fn edge_to_edge_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut params = ParamStore::new();
    params.insert("a", rand_tensor(&mut rng, &[2, 4, 4]));
    params.insert("w", rand_tensor(&mut rng, &[3, 2]));
    params.insert("h", rand_tensor(&mut rng, &[3, 2]));
    let report = finite_diff_check_params(
        |g, b| {
            let out = g.edge_to_edge(b.id("a"), b.id("w"), b.id("h"), true)?;
            let act = g.activation(out, Activation::Elu);
            Ok(g.sum(act))
        },
        &params,
        1e-5,
        1e-9,
    )
    .unwrap();
    assert!(report.pass, "{report:?}");
}

#[test]
fn edge_message_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let mut params = ParamStore::new();
    params.insert("mats", rand_tensor(&mut rng, &[4, 4, 9]));
    params.insert("h", rand_tensor(&mut rng, &[4, 3]));
    let report = finite_diff_check_params(
        |g, b| {
            let m = g.edge_message(b.id("mats"), b.id("h"), None)?;
            let act = g.activation(m, Activation::Tanh);
            Ok(g.sum(act))
        },
        &params,
        1e-4,
        1e-9,
    )
    .unwrap();
    assert!(report.pass, "{report:?}");
}

#[test]
fn pair_concat_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let edge_feats = rand_tensor(&mut rng, &[5, 5, 2]);
    let mut params = ParamStore::new();
    params.insert("t", rand_tensor(&mut rng, &[5, 3]));
    let report = finite_diff_check_params(
        |g, b| {
            let e = g.leaf(edge_feats.clone());
            let out = g.pair_concat(b.id("t"), Some(e))?;
            let act = g.activation(out, Activation::Sigmoid);
            Ok(g.sum(act))
        },
        &params,
        1e-5,
        1e-9,
    )
    .unwrap();
    assert!(report.pass, "{report:?}");
}

#[test]
fn conv1d_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let mut params = ParamStore::new();
    params.insert("input", rand_tensor(&mut rng, &[5, 4]));
    params.insert("kernels", rand_tensor(&mut rng, &[3, 4, 3]));
    params.insert("bias", rand_tensor(&mut rng, &[3]));
    let report = finite_diff_check_params(
        |g, b| {
            let out = g.conv1d(b.id("input"), b.id("kernels"), Some(b.id("bias")))?;
            let act = g.activation(out, Activation::Elu);
            Ok(g.sum(act))
        },
        &params,
        1e-5,
        1e-9,
    )
    .unwrap();
    assert!(report.pass, "{report:?}");
}

#[test]
fn softmax_axis0_rows_sum_to_one_and_grads_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let x = rand_tensor(&mut rng, &[3, 4, 4]);
    let mut g = Graph::new();
    let id = g.leaf(x.clone());
    let p = g.softmax_axis0(id).unwrap();
    let pv = g.value(p);
    for i in 0..4 {
        for j in 0..4 {
            let s: f64 = (0..3).map(|b| pv.at3(b, i, j)).sum();
            assert_relative_eq!(s, 1.0, epsilon = 1e-12);
        }
    }
    let weights = rand_tensor(&mut rng, &[3, 4, 4]);
    let report = finite_diff_check(
        |g, x| {
            let p = g.softmax_axis0(x)?;
            let w = g.leaf(weights.clone());
            let wp = g.mul(p, w)?;
            Ok(g.sum(wp))
        },
        &x,
        1e-5,
        1e-10,
    )
    .unwrap();
    assert!(report.pass, "{report:?}");
}

#[test]
fn permute_and_reshape_round_trip_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    let weights = rand_tensor(&mut rng, &[3, 4, 2]);
    let report = finite_diff_check(
        |g, x| {
            let p = g.permute3(x, [1, 2, 0])?;
            let w = g.leaf(weights.clone());
            let wp = g.mul(p, w)?;
            let flat = g.reshape(wp, &[24, 1])?;
            Ok(g.sum(flat))
        },
        &x,
        1e-6,
        1e-10,
    )
    .unwrap();
    assert!(report.pass, "{report:?}");
}
