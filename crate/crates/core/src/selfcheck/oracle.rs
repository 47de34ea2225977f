//! Independent numerical oracles: central differences over parameters and a
//! normwise relative error.

use crate::nn::{Mlp, ParamGrads};

/// Central-difference gradient of `f` with respect to every parameter.
pub fn fd_param_grads(model: &Mlp, h: f64, mut f: impl FnMut(&Mlp) -> f64) -> ParamGrads {
    let mut probe = model.clone();
    let mut out = ParamGrads::zeros_like(model);
    for l in 0..model.layers().len() {
        for k in 0..model.layers()[l].weights.len() {
            let orig = model.layers()[l].weights.as_slice()[k];
            probe.layers_mut()[l].weights.as_mut_slice()[k] = orig + h;
            let up = f(&probe);
            probe.layers_mut()[l].weights.as_mut_slice()[k] = orig - h;
            let down = f(&probe);
            probe.layers_mut()[l].weights.as_mut_slice()[k] = orig;
            out.weights[l].as_mut_slice()[k] = (up - down) / (2.0 * h);
        }
        for k in 0..model.layers()[l].bias.len() {
            let orig = model.layers()[l].bias[k];
            probe.layers_mut()[l].bias[k] = orig + h;
            let up = f(&probe);
            probe.layers_mut()[l].bias[k] = orig - h;
            let down = f(&probe);
            probe.layers_mut()[l].bias[k] = orig;
            out.biases[l][k] = (up - down) / (2.0 * h);
        }
    }
    out
}

/// `max|a - b| / max(max|a|, max|b|)`; zero when both are identically zero.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "compared arrays differ in length");
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "compared arrays differ in length");
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

pub fn grads_rel_err(a: &ParamGrads, b: &ParamGrads) -> f64 {
    rel_err(&a.flatten(), &b.flatten())
}
