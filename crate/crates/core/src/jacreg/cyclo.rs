//! Closed-form gradient of `R = 1/2 ||J||_F^2` for a dense network.
//!
//! With layer Jacobians `J_l = diag(sigma'(pre_l)) W_l`, prefix products
//! `P_l = J_l ... J_0` and suffix products `A_l = J_{L-1} ... J_{l+1}`, the
//! cycle matrix for layer `l` is
//!
//! ```text
//! Omega_l = P_{l-1} J^T A_l                      (n_{l-1} x n_l)
//! Bt_l    = (W_{l+1}^T Bt_{l+1}) * sigma'(pre_l) + sigma''(pre_l) * diag(W_l Omega_l)
//! Wt_l    = Bt_l z_{l-1}^T + sigma'(pre_l) Omega_l^T
//! ```
//!
//! iterated from the last layer down, with `Bt_L = 0`. `Bt` and `Wt` are
//! `dR/db_l` and `dR/dW_l`. The first term of `Bt_l` is written with
//! `W_{l+1}` instead of `J_{l+1} / sigma'(pre_{l+1})`; the two are equal and
//! this form never divides by a vanishing slope.

use super::{JacobianResult, Method};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, ParamGrads};
use crate::tensor::{self, Tensor};

fn layer_jacobian(w: &Tensor, slope: &[f64]) -> Tensor {
    let mut j = w.clone();
    for (r, s) in slope.iter().enumerate() {
        j.row_mut(r).iter_mut().for_each(|v| *v *= s);
    }
    j
}

/// `||J(x)||_F^2` and its parameter gradient at a single input.
pub fn cyclopropagation(model: &Mlp, x: &[f64]) -> Result<JacobianResult> {
    for (l, layer) in model.layers().iter().enumerate() {
        if layer.activation == Activation::Relu {
            return Err(Error::UnsupportedActivation {
                layer: l,
                activation: "relu",
                why: "the recursion needs sigma''/sigma', which relu does not have",
            });
        }
    }
    let batch = Tensor::matrix(1, x.len(), x.to_vec())?;
    let (_, trace) = model.forward_eval(&batch)?;
    let layers = model.layers();
    let n = layers.len();

    let mut slope = Vec::with_capacity(n);
    let mut curv = Vec::with_capacity(n);
    for (l, layer) in layers.iter().enumerate() {
        let act = trace.activations()[l].row(0);
        let pre = trace.preactivations()[l].row(0);
        slope.push(pre.iter().zip(act).map(|(&p, &a)| layer.activation.deriv(p, a)).collect::<Vec<_>>());
        curv.push(act.iter().map(|&a| layer.activation.second_deriv(a)).collect::<Vec<_>>());
    }
    let jl: Vec<Tensor> = layers.iter().zip(&slope).map(|(layer, s)| layer_jacobian(&layer.weights, s)).collect();

    // prefix[l] = J_l ... J_0
    let mut prefix: Vec<Tensor> = Vec::with_capacity(n);
    for l in 0..n {
        let p = if l == 0 { jl[0].clone() } else { tensor::matmul(&jl[l], &prefix[l - 1]) };
        prefix.push(p);
    }
    let jac = &prefix[n - 1];
    let jac_t = jac.transpose();

    // suffix[l] = J_{L-1} ... J_{l+1}; identity for the last layer
    let mut suffix: Vec<Tensor> = vec![Tensor::zeros(&[0]); n];
    suffix[n - 1] = Tensor::identity(model.output_width());
    for l in (0..n - 1).rev() {
        suffix[l] = tensor::matmul(&suffix[l + 1], &jl[l + 1]);
    }

    let mut grads = ParamGrads::zeros_like(model);
    let mut bt_above: Option<Vec<f64>> = None;
    for l in (0..n).rev() {
        let w = &layers[l].weights;
        // back to the input, forward to the output, back to layer l
        let jt_a = tensor::matmul(&jac_t, &suffix[l]);
        let omega = if l == 0 { jt_a } else { tensor::matmul(&prefix[l - 1], &jt_a) };

        let mut bt = vec![0.0; layers[l].outputs()];
        if let Some(above) = &bt_above {
            let w_next = &layers[l + 1].weights;
            for (k, &b_k) in above.iter().enumerate() {
                for (j, w_kj) in w_next.row(k).iter().enumerate() {
                    bt[j] += w_kj * b_k;
                }
            }
            bt.iter_mut().zip(&slope[l]).for_each(|(b, s)| *b *= s);
        }
        for (j, b) in bt.iter_mut().enumerate() {
            if curv[l][j] != 0.0 {
                let diag: f64 = w.row(j).iter().enumerate().map(|(k, w_jk)| w_jk * omega.get(k, j)).sum();
                *b += curv[l][j] * diag;
            }
        }

        let z_below = if l == 0 { x } else { trace.activations()[l - 1].row(0) };
        let gw = &mut grads.weights[l];
        for (j, &b_j) in bt.iter().enumerate() {
            let s_j = slope[l][j];
            for (k, g) in gw.row_mut(j).iter_mut().enumerate() {
                *g = b_j * z_below[k] + s_j * omega.get(k, j);
            }
        }
        grads.biases[l].copy_from_slice(&bt);
        bt_above = Some(bt);
    }

    // report ||J||^2 rather than 1/2 ||J||^2
    grads.scale(2.0);
    let value = jac.sum_sq();
    Ok(JacobianResult { value, per_sample: vec![value], grads, method: Method::Cyclo, rng_seed: None })
}

/// Batch mean of [`cyclopropagation`] over the rows of `x`.
pub fn cyclopropagation_batch(model: &Mlp, x: &Tensor) -> Result<JacobianResult> {
    let b = x.rows();
    if b == 0 {
        return Err(Error::Dimension("empty batch".into()));
    }
    let mut grads = ParamGrads::zeros_like(model);
    let mut per_sample = Vec::with_capacity(b);
    for row in x.iter_rows() {
        let r = cyclopropagation(model, row)?;
        grads.axpy(1.0 / b as f64, &r.grads);
        per_sample.push(r.value);
    }
    let value = per_sample.iter().sum::<f64>() / b as f64;
    Ok(JacobianResult { value, per_sample, grads, method: Method::Cyclo, rng_seed: None })
}
