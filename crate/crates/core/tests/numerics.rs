mod common;

use common::{erf_quadrature, max_gradient_error, random_tensor, rng, weighted_sum};
use patchmixer::numerics::{
    gelu_scalar, BatchNormState, Graph, Mode, PointLoss, Tensor, Var,
};
use patchmixer::Error;
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn naive_matmul(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (rows, inp) = (x.shape()[0], x.shape()[1]);
    let out = w.shape()[1];
    let mut y = vec![0.0; rows * out];
    for r in 0..rows {
        for o in 0..out {
            let mut acc = b.data()[o];
            for i in 0..inp {
                acc += x.data()[r * inp + i] * w.data()[i * out + o];
            }
            y[r * out + o] = acc;
        }
    }
    y
}

/// Direct sliding dot product, one output element at a time.
fn naive_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    stride: usize,
    groups: usize,
) -> Vec<f64> {
    let (c, lin) = (x.shape()[0], x.shape()[1]);
    let (cout, cin_g, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let lout = (lin - k) / stride + 1;
    let mut y = Vec::new();
    for o in 0..cout {
        let g = o / (cout / groups);
        for p in 0..lout {
            let mut acc = b.data()[o];
            for ci in 0..cin_g {
                let ch = g * (c / groups) + ci;
                for j in 0..k {
                    acc += w.data()[(o * cin_g + ci) * k + j] * x.data()[ch * lin + p * stride + j];
                }
            }
            y.push(acc);
        }
    }
    y
}

fn linear_once(x: Tensor<f64>, w: Tensor<f64>, b: Tensor<f64>) -> Result<Tensor<f64>, Error> {
    let mut g = Graph::new();
    let (x, w, b) = (g.constant(x), g.constant(w), g.constant(b));
    let y = g.linear(x, w, Some(b))?;
    Ok(g.value(y).clone())
}

fn conv_once(
    x: Tensor<f64>,
    w: Tensor<f64>,
    b: Tensor<f64>,
    stride: usize,
    groups: usize,
) -> Result<Tensor<f64>, Error> {
    let mut g = Graph::new();
    let (x, w, b) = (g.constant(x), g.constant(w), g.constant(b));
    let y = g.conv1d(x, w, Some(b), stride, groups)?;
    Ok(g.value(y).clone())
}

#[test]
fn linear_identity_and_bias_only() {
    let y = linear_once(t(&[1, 2], &[1., 2.]), t(&[2, 2], &[1., 0., 0., 1.]), t(&[2], &[0., 0.])).unwrap();
    assert_eq!(y.data(), &[1., 2.]);
    let y = linear_once(t(&[1, 2], &[1., 2.]), t(&[2, 2], &[0.; 4]), t(&[2], &[3., 4.])).unwrap();
    assert_eq!(y.data(), &[3., 4.]);
}

#[test]
fn linear_matches_naive_matmul() {
    let mut r = rng(7);
    let x = random_tensor(&[4, 3], &mut r);
    let w = random_tensor(&[3, 5], &mut r);
    let b = random_tensor(&[5], &mut r);
    let y = linear_once(x.clone(), w.clone(), b.clone()).unwrap();
    assert_eq!(y.shape(), &[4, 5]);
    for (a, e) in y.data().iter().zip(naive_matmul(&x, &w, &b)) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn linear_shape_error_names_both_shapes() {
    let err = linear_once(t(&[1, 3], &[1.; 3]), t(&[2, 2], &[0.; 4]), t(&[2], &[0.; 2])).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[1, 3]") && msg.contains("[2, 2]"), "{msg}");
}

#[test]
fn conv_box_filter_on_constant() {
    let y = conv_once(t(&[1, 4], &[1.; 4]), t(&[1, 1, 2], &[1., 1.]), t(&[1], &[0.]), 2, 1).unwrap();
    assert_eq!(y.shape(), &[1, 2]);
    assert_eq!(y.data(), &[2., 2.]);
}

#[test]
fn depthwise_zero_kernel_outputs_bias() {
    let mut r = rng(1);
    let x = random_tensor(&[3, 8], &mut r);
    let y = conv_once(x, Tensor::zeros(&[3, 1, 4]), t(&[3], &[0.5, -1., 2.]), 4, 3).unwrap();
    assert_eq!(y.shape(), &[3, 2]);
    assert_eq!(y.data(), &[0.5, 0.5, -1., -1., 2., 2.]);
}

#[test]
fn depthwise_matches_naive_oracle() {
    let mut r = rng(11);
    let x = random_tensor(&[6, 10], &mut r);
    let w = random_tensor(&[6, 1, 3], &mut r);
    let b = random_tensor(&[6], &mut r);
    let y = conv_once(x.clone(), w.clone(), b.clone(), 1, 6).unwrap();
    assert_eq!(y.shape(), &[6, 8]);
    for (a, e) in y.data().iter().zip(naive_conv(&x, &w, &b, 1, 6)) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn grouped_conv_matches_naive_oracle() {
    let mut r = rng(12);
    let x = random_tensor(&[4, 9], &mut r);
    let w = random_tensor(&[6, 2, 3], &mut r);
    let b = random_tensor(&[6], &mut r);
    let y = conv_once(x.clone(), w.clone(), b.clone(), 2, 2).unwrap();
    for (a, e) in y.data().iter().zip(naive_conv(&x, &w, &b, 2, 2)) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn conv_errors() {
    let err = conv_once(t(&[1, 2], &[1.; 2]), Tensor::zeros(&[1, 1, 3]), t(&[1], &[0.]), 1, 1).unwrap_err();
    assert!(err.to_string().contains("input shorter than kernel"));
    let err = conv_once(Tensor::zeros(&[3, 4]), Tensor::zeros(&[3, 1, 2]), Tensor::zeros(&[3]), 1, 2).unwrap_err();
    assert!(matches!(err, Error::Grouping { .. }));
}

#[test]
fn pointwise_conv_equals_linear() {
    let mut r = rng(21);
    let (c, l, cout) = (5, 7, 4);
    let x = random_tensor(&[c, l], &mut r);
    let w = random_tensor(&[cout, c, 1], &mut r);
    let b = random_tensor(&[cout], &mut r);
    let y = conv_once(x.clone(), w.clone(), b.clone(), 1, 1).unwrap();
    // conv over positions == linear over the transposed layout
    let xt = Tensor::from_fn(&[l, c], |i| x.data()[(i % c) * l + i / c]);
    let wt = Tensor::from_fn(&[c, cout], |i| w.data()[(i % cout) * c + i / cout]);
    let lin = linear_once(xt, wt, b).unwrap();
    for o in 0..cout {
        for p in 0..l {
            assert!((y.data()[o * l + p] - lin.data()[p * cout + o]).abs() < 1e-12);
        }
    }
}

#[test]
fn gelu_reference_values() {
    assert_eq!(gelu_scalar(0.0f64), 0.0);
    assert!((gelu_scalar(10.0f64) - 10.0).abs() < 1e-6);
    let expected = 0.5 * (1.0 + erf_quadrature(std::f64::consts::FRAC_1_SQRT_2));
    assert!((gelu_scalar(1.0f64) - expected).abs() < 1e-9);
}

fn bn_once(x: Tensor<f64>, gamma: f64, beta: f64) -> Tensor<f64> {
    let c = x.shape()[1];
    let mut g = Graph::new();
    let mut st = BatchNormState::new(c);
    let xv = g.constant(x);
    let gm = g.constant(Tensor::full(&[c], gamma));
    let bt = g.constant(Tensor::full(&[c], beta));
    let y = g.batch_norm(xv, gm, bt, &mut st, Mode::Train).unwrap();
    g.value(y).clone()
}

#[test]
fn batchnorm_degenerate_cases() {
    let x = Tensor::from_fn(&[2, 2, 3], |i| if (i / 3) % 2 == 0 { 4.0 } else { -1.5 });
    assert!(bn_once(x, 1.0, 0.0).data().iter().all(|&v| v == 0.0));
    let mut r = rng(4);
    let x = random_tensor(&[2, 3, 4], &mut r);
    assert!(bn_once(x, 0.0, 5.0).data().iter().all(|&v| v == 5.0));
}

#[test]
fn batchnorm_train_moments() {
    let mut r = rng(3);
    let x = random_tensor(&[2, 3, 4], &mut r);
    let y = bn_once(x.clone(), 1.0, 0.0);
    let channel = |t: &Tensor<f64>, c: usize| -> Vec<f64> {
        (0..2)
            .flat_map(|b| (0..4).map(move |l| (b, l)))
            .map(|(b, l)| t.data()[(b * 3 + c) * 4 + l])
            .collect()
    };
    let moments = |v: &[f64]| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        (mean, var)
    };
    for c in 0..3 {
        let (_, in_var) = moments(&channel(&x, c));
        let (mean, var) = moments(&channel(&y, c));
        assert!(mean.abs() < 1e-6);
        // normalized variance is var / (var + eps), eps = 1e-5
        assert!((var - in_var / (in_var + 1e-5)).abs() < 1e-6, "var {var}");
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn batchnorm_running_stats_and_eval() {
    let mut g = Graph::new();
    let mut st = BatchNormState::<f64>::new(1);
    let x = g.constant(t(&[1, 1, 4], &[1., 2., 3., 4.]));
    let gm = g.constant(t(&[1], &[1.]));
    let bt = g.constant(t(&[1], &[0.]));
    g.batch_norm(x, gm, bt, &mut st, Mode::Train).unwrap();
    assert!((st.running_mean[0] - 0.25).abs() < 1e-12);
    // unbiased variance 5/3, blended with the initial 1.0
    assert!((st.running_var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    let y = g.batch_norm(x, gm, bt, &mut st, Mode::Eval).unwrap();
    let expected = (1.0 - 0.25) / (st.running_var[0] + 1e-5).sqrt();
    assert!((g.value(y).data()[0] - expected).abs() < 1e-12);
}

#[test]
fn backward_simple_cases() {
    let mut g = Graph::new();
    let x = g.variable(t(&[3], &[0.3, -2., 7.]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).data(), &[1., 1., 1.]);

    let mut g = Graph::new();
    let x = g.variable(t(&[2], &[1., 2.]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).data(), &[2., 4.]);
    assert_eq!(g.op_name(s), "sum");
    assert_eq!(g.parents(sq), vec![x, x]);

    // second call accumulates
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).data(), &[4., 8.]);
    g.zero_grad();
    assert_eq!(g.grad(x).data(), &[0., 0.]);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut g = Graph::new();
    let x = g.variable(t(&[2], &[1., 2.]));
    let y = g.gelu(x);
    assert!(matches!(g.backward(y), Err(Error::NonScalarRoot(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2], &[1., 2.]));
    let w = g.variable(t(&[2], &[3., 4.]));
    let p = g.mul(x, w).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap();
    assert_eq!(g.grad(w).data(), &[1., 2.]);
    assert_eq!(g.grad(x).data(), &[0., 0.]);
}

const TOL: f64 = 1e-4;

#[test]
fn gradcheck_linear() {
    let mut r = rng(31);
    let inputs = [
        random_tensor(&[2, 3, 4], &mut r),
        random_tensor(&[4, 5], &mut r),
        random_tensor(&[5], &mut r),
    ];
    let err = max_gradient_error(&inputs, |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
        weighted_sum(g, y, 1)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn gradcheck_conv_variants() {
    let mut r = rng(32);
    for (cin, cout, k, stride, groups) in [(4, 4, 3, 1, 4), (4, 4, 2, 2, 4), (3, 5, 1, 1, 1), (4, 6, 3, 2, 2)] {
        let inputs = [
            random_tensor(&[2, cin, 9], &mut r),
            random_tensor(&[cout, cin / groups, k], &mut r),
            random_tensor(&[cout], &mut r),
        ];
        let err = max_gradient_error(&inputs, |g, v| {
            let y = g.conv1d(v[0], v[1], Some(v[2]), stride, groups).unwrap();
            weighted_sum(g, y, 2)
        });
        assert!(err < TOL, "conv {cin}->{cout} k{k} s{stride} g{groups}: {err}");
    }
}

#[test]
fn gradcheck_gelu() {
    let mut r = rng(33);
    let inputs = [Tensor::from_fn(&[20], |_| rand::Rng::gen_range(&mut r, -4.0..4.0))];
    let err = max_gradient_error(&inputs, |g, v| {
        let y = g.gelu(v[0]);
        weighted_sum(g, y, 3)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn gradcheck_batchnorm_train_and_eval() {
    for mode in [Mode::Train, Mode::Eval] {
        let mut r = rng(34);
        let inputs = [
            random_tensor(&[3, 2, 4], &mut r),
            random_tensor(&[2], &mut r),
            random_tensor(&[2], &mut r),
        ];
        let err = max_gradient_error(&inputs, |g, v| {
            let mut st = BatchNormState::new(2);
            st.running_mean = vec![0.1, -0.2];
            st.running_var = vec![0.7, 1.3];
            let y = g.batch_norm(v[0], v[1], v[2], &mut st, mode).unwrap();
            weighted_sum(g, y, 4)
        });
        assert!(err < TOL, "{mode:?}: {err}");
    }
}

#[test]
fn gradcheck_structural_ops() {
    let mut r = rng(35);
    let inputs = [random_tensor(&[2, 7], &mut r), random_tensor(&[2, 7], &mut r)];
    let err = max_gradient_error(&inputs, |g, v| {
        let a = g.add(v[0], v[1]).unwrap();
        let m = g.mul(a, v[1]).unwrap();
        let p = g.pad_end(m, 3);
        let u = g.unfold(p, 4, 3).unwrap();
        let flat = g.reshape(u, &[2, 12]).unwrap();
        let s = g.row_affine(flat, &[1.5, -0.5], &[2.0, 3.0]).unwrap();
        weighted_sum(g, s, 5)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn gradcheck_losses() {
    let mut r = rng(36);
    let target = random_tensor(&[3, 4], &mut r);
    for kind in [PointLoss::Mse, PointLoss::Mae, PointLoss::SmoothL1 { beta: 1.0 }, PointLoss::SmoothL1 { beta: 0.3 }] {
        let inputs = [random_tensor(&[3, 4], &mut r)];
        let err = max_gradient_error(&inputs, |g, v| g.point_loss(v[0], &target, kind).unwrap());
        assert!(err < TOL, "{kind:?}: {err}");
    }
}

#[test]
fn dropout_scales_kept_units_and_is_identity_at_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::full(&[1000], 1.0));
    let mut r = rng(8);
    assert_eq!(g.dropout(x, 0.0, &mut r), x);
    let y = g.dropout(x, 0.25, &mut r);
    let vals = g.value(y).data();
    assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12));
    let kept = vals.iter().filter(|&&v| v != 0.0).count();
    assert!((650..850).contains(&kept), "{kept}");
}

fn conv_forward_bits(seed: u64) -> Vec<u64> {
    let mut r = rng(seed);
    let x = random_tensor(&[2, 4, 16], &mut r);
    let w = random_tensor(&[4, 1, 4], &mut r);
    let mut g = Graph::new();
    let (xv, wv): (Var, Var) = (g.constant(x), g.constant(w));
    let y = g.conv1d(xv, wv, None, 4, 4).unwrap();
    let y = g.gelu(y);
    g.value(y).data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn forward_is_bitwise_deterministic() {
    assert_eq!(conv_forward_bits(99), conv_forward_bits(99));
}

proptest! {
    #[test]
    fn conv_output_length_law(
        groups in 1usize..4,
        per_group in 1usize..3,
        k in 1usize..6,
        extra in 0usize..20,
        stride in 1usize..5,
    ) {
        let c = groups * per_group;
        let lin = k + extra;
        let y = conv_once(Tensor::zeros(&[c, lin]), Tensor::zeros(&[c, per_group, k]), Tensor::zeros(&[c]), stride, groups).unwrap();
        prop_assert_eq!(y.shape(), &[c, (lin - k) / stride + 1]);
    }
}
