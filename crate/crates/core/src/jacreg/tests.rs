use super::*;
use crate::nn::{finite_diff_jacobian, Activation, Dense};
use crate::selfcheck::fixtures::{normal_batch, random_mlp};
use crate::selfcheck::oracle::{fd_param_grads, grads_rel_err, max_abs_diff, rel_err};

fn linear(w: Tensor) -> Mlp {
    let c = w.rows();
    Mlp::new(vec![Dense { weights: w, bias: vec![0.1; c], activation: Activation::Identity }]).unwrap()
}

fn tanh_net(seed: u64) -> Mlp {
    random_mlp(&[6, 9, 7, 4], Activation::Tanh, seed, 1.5)
}

#[test]
fn exact_on_linear_model_is_weight_norm() {
    let w = normal_batch(3, 5, &mut Stream::new(1));
    let m = linear(w.clone());
    let x = normal_batch(4, 5, &mut Stream::new(2));
    let r = jacreg_exact(&m, &x).unwrap();
    assert!((r.value - w.sum_sq()).abs() < 1e-12 * w.sum_sq());
    // d||W||^2/dW = 2W, bias irrelevant
    let mut two_w = w.clone();
    two_w.scale(2.0);
    assert!(max_abs_diff(r.grads.weights[0].as_slice(), two_w.as_slice()) < 1e-12);
    assert!(r.grads.biases[0].iter().all(|&b| b == 0.0));
}

#[test]
fn exact_on_identity_network_is_dimension() {
    let m = linear(Tensor::identity(5));
    let r = jacreg_exact(&m, &normal_batch(3, 5, &mut Stream::new(0))).unwrap();
    assert_eq!(r.value, 5.0);
    assert!(r.per_sample.iter().all(|&v| v == 5.0));
}

#[test]
fn exact_matches_finite_difference_jacobian() {
    let m = tanh_net(3);
    let x = normal_batch(1, 6, &mut Stream::new(4));
    let r = jacreg_exact(&m, &x).unwrap();
    let fd = finite_diff_jacobian(&m, x.row(0), 1e-5).unwrap().sum_sq();
    assert!((r.value - fd).abs() / fd < 1e-5);
}

#[test]
fn exact_gradient_matches_finite_differences() {
    let m = tanh_net(5);
    let x = normal_batch(3, 6, &mut Stream::new(6));
    let r = jacreg_exact(&m, &x).unwrap();
    let fd = fd_param_grads(&m, 1e-5, |p| jacreg_exact(p, &x).unwrap().value);
    let e = grads_rel_err(&r.grads, &fd);
    assert!(e < 1e-6, "relative error {e}");
}

#[test]
fn relu_exact_gradient_matches_finite_differences_away_from_kinks() {
    let m = random_mlp(&[5, 8, 3], Activation::Relu, 9, 1.0);
    let x = normal_batch(2, 5, &mut Stream::new(10));
    let r = jacreg_exact(&m, &x).unwrap();
    let fd = fd_param_grads(&m, 1e-6, |p| jacreg_exact(p, &x).unwrap().value);
    assert!(grads_rel_err(&r.grads, &fd) < 1e-6);
}

#[test]
fn basis_projection_reproduces_exact_bitwise() {
    let m = tanh_net(7);
    let x = normal_batch(5, 6, &mut Stream::new(8));
    let a = jacreg_exact(&m, &x).unwrap();
    let b = jacreg_estimate_basis(&m, &x).unwrap();
    assert_eq!(a.value.to_bits(), b.value.to_bits());
    assert_eq!(a.grads, b.grads);
}

#[test]
fn orthogonal_jacobian_gives_exact_single_projection() {
    // Householder reflection: orthogonal, so v J J^T v^T = 1 for unit v
    let u = [0.5, -0.5, 0.5, 0.5];
    let mut q = Tensor::identity(4);
    for i in 0..4 {
        for j in 0..4 {
            q.set(i, j, q.get(i, j) - 2.0 * u[i] * u[j]);
        }
    }
    let m = linear(q);
    let x = normal_batch(8, 4, &mut Stream::new(1));
    let mut rng = Stream::new(2);
    for _ in 0..5 {
        let r = jacreg_estimate(&m, &x, 1, &mut rng).unwrap();
        assert!(r.per_sample.iter().all(|&v| (v - 4.0).abs() < 1e-12));
    }
}

#[test]
fn estimate_is_unbiased() {
    let m = tanh_net(11);
    let x = normal_batch(1, 6, &mut Stream::new(12));
    let exact = jacreg_exact(&m, &x).unwrap().value;
    // 10^4 single-projection estimates, one per replicated row
    let reps = Tensor::matrix(10_000, 6, x.row(0).repeat(10_000)).unwrap();
    let est = estimate_values(&m, &reps, 1, &mut Stream::new(13)).unwrap();
    let n = est.len() as f64;
    let mean = est.iter().sum::<f64>() / n;
    let sd = (est.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let se = sd / n.sqrt();
    assert!((mean - exact).abs() < 3.0 * se, "mean {mean} exact {exact} se {se}");
}

#[test]
fn estimate_gradient_matches_finite_differences_with_frozen_projections() {
    let m = tanh_net(14);
    let x = normal_batch(4, 6, &mut Stream::new(15));
    let rng = Stream::new(16);
    let r = jacreg_estimate(&m, &x, 2, &mut rng.clone()).unwrap();
    assert_eq!(r.rng_seed, Some(16));
    let fd = fd_param_grads(&m, 1e-5, |p| jacreg_estimate(p, &x, 2, &mut rng.clone()).unwrap().value);
    let e = grads_rel_err(&r.grads, &fd);
    assert!(e < 1e-6, "relative error {e}");
}

#[test]
fn estimate_rejects_zero_projections() {
    let m = tanh_net(1);
    let x = normal_batch(1, 6, &mut Stream::new(1));
    assert!(matches!(jacreg_estimate(&m, &x, 0, &mut Stream::new(0)), Err(Error::Config(_))));
}

#[test]
fn regularizer_refuses_dropout_traces() {
    let m = tanh_net(1);
    let x = normal_batch(2, 6, &mut Stream::new(1));
    let (_, t) = m.forward(&x, crate::nn::Mode::Train { dropout: 0.5 }, &mut Stream::new(3)).unwrap();
    assert!(accumulate(&m, &t, Projections::Basis, &mut Stream::new(0), false).is_err());
}

#[test]
fn cyclo_single_identity_layer_collapses() {
    let w = normal_batch(3, 4, &mut Stream::new(3));
    let m = linear(w.clone());
    let r = cyclopropagation(&m, &[0.2, -0.1, 0.4, 1.0]).unwrap();
    // d(1/2 ||W||^2)/dW = W, reported for ||W||^2 hence doubled
    let mut two_w = w.clone();
    two_w.scale(2.0);
    assert!(max_abs_diff(r.grads.weights[0].as_slice(), two_w.as_slice()) < 1e-14);
    assert!(r.grads.biases[0].iter().all(|&b| b == 0.0));
    assert!((r.value - w.sum_sq()).abs() < 1e-12);
}

#[test]
fn cyclo_agrees_with_exact() {
    for seed in 0..6 {
        let dims: &[usize] = match seed % 3 {
            0 => &[5, 4],
            1 => &[6, 8, 3],
            _ => &[4, 7, 6, 5, 3],
        };
        let m = random_mlp(dims, Activation::Tanh, seed, 1.3);
        let x = normal_batch(1, dims[0], &mut Stream::new(seed + 100));
        let e = jacreg_exact(&m, &x).unwrap();
        let c = cyclopropagation(&m, x.row(0)).unwrap();
        assert!((e.value - c.value).abs() <= 1e-10 * e.value);
        assert!(max_abs_diff(&e.grads.flatten(), &c.grads.flatten()) < 1e-8);
    }
}

#[test]
fn cyclo_batch_is_mean_of_singles() {
    let m = tanh_net(4);
    let x = normal_batch(3, 6, &mut Stream::new(5));
    let e = jacreg_exact(&m, &x).unwrap();
    let c = cyclopropagation_batch(&m, &x).unwrap();
    assert!(rel_err(&e.grads.flatten(), &c.grads.flatten()) < 1e-10);
    assert!((e.value - c.value).abs() < 1e-10 * e.value);
}

#[test]
fn cyclo_rejects_relu() {
    let m = random_mlp(&[3, 4, 2], Activation::Relu, 1, 1.0);
    assert!(matches!(cyclopropagation(&m, &[0.0; 3]), Err(Error::UnsupportedActivation { .. })));
}

#[test]
fn unit_sphere_rows_have_unit_norm() {
    let v = sample_unit_sphere(100, 7, &mut Stream::new(1));
    for row in v.iter_rows() {
        assert!((crate::tensor::norm2(row) - 1.0).abs() < 1e-12);
    }
    let v = sample_unit_sphere(50, 1, &mut Stream::new(2));
    assert!(v.as_slice().iter().all(|&x| x == 1.0 || x == -1.0));
}

#[test]
fn unit_sphere_marginals_are_centered() {
    let n = 100_000;
    let v = sample_unit_sphere(n, 5, &mut Stream::new(3));
    let tol = 3.0 / ((5 * n) as f64).sqrt();
    for (c, s) in v.col_sums().iter().enumerate() {
        assert!((s / n as f64).abs() < tol, "coordinate {c}");
    }
}

#[test]
fn stats_isotropic_case_has_no_variance() {
    let s = estimator_stats(&Tensor::identity(4), 1000, &mut Stream::new(1));
    assert!(s.closed_form_variance.abs() < 1e-12);
    assert!(s.variance < 1e-20);
    assert!((s.mean - 4.0).abs() < 1e-12);
}

#[test]
fn stats_rank_one_saturates_bound() {
    let j = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let s = estimator_stats(&j, 200_000, &mut Stream::new(5));
    assert_eq!(s.exact_mean, 1.0);
    assert!((s.closed_form_variance - 0.5).abs() < 1e-15);
    assert!((s.bound() - 0.5).abs() < 1e-15);
    assert!((s.mean - 1.0).abs() < 4.0 * s.mean_std_error);
    assert!((s.variance - 0.5).abs() < 5.0 * s.variance_std_error);
}

#[test]
fn stats_match_closed_form_on_random_jacobian() {
    let j = normal_batch(6, 9, &mut Stream::new(7));
    let s = estimator_stats(&j, 100_000, &mut Stream::new(8));
    assert!((s.variance - s.closed_form_variance).abs() < 5.0 * s.variance_std_error);
    assert!(s.relative_variance() <= s.bound() + 3.0 * s.relative_variance_error());
}
