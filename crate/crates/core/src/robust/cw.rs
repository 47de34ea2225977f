//! Carlini-Wagner L2 attack with the margin loss
//! `f(x) = max(z_true - max_{c != true} z_c, 0)`.
//!
//! The box constraint is removed by `x = (tanh(w) + 1) / 2`; each row
//! minimizes `||x - x0||^2 + c f(x)` with Adam, and `c` is binary-searched
//! per row, growing tenfold until a first success.

use super::{argmax_other, predict_raw, row_l2, AttackConfig};
use crate::data::Preprocess;
use crate::error::Result;
use crate::nn::{vjp_input, Mlp};
use crate::tensor::{self, Tensor};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const C_CEILING: f64 = 1e10;

#[derive(Debug, Clone)]
pub struct CwResult {
    /// Best successful example per row, or the original if none was found.
    pub adversarial: Tensor,
    pub fooled: Vec<bool>,
    /// Raw-space `||x_adv - x||_2`; infinite where not fooled.
    pub l2: Vec<f64>,
}

pub fn cw_attack(model: &Mlp, pre: Preprocess, x_raw: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<CwResult> {
    let n = x_raw.rows();
    let width = x_raw.cols();
    let mut adversarial = x_raw.clone();
    let mut best = vec![f64::INFINITY; n];
    for (i, p) in predict_raw(model, pre, x_raw)?.into_iter().enumerate() {
        if p != labels[i] {
            best[i] = 0.0;
        }
    }
    let targets: Vec<usize> = (0..n).filter(|&i| best[i].is_infinite()).collect();
    let w0 = x_raw.map(|v| ((2.0 * v - 1.0) * (1.0 - 1e-6)).atanh());

    let mut c = vec![cfg.cw_c_init; n];
    let mut c_lo = vec![0.0; n];
    let mut c_hi = vec![C_CEILING; n];
    let check_every = (cfg.cw_max_iters / 10).max(1);

    for _ in 0..cfg.cw_binary_steps {
        if targets.is_empty() {
            break;
        }
        let mut w = w0.select_rows(&targets);
        let mut m = Tensor::zeros(&[targets.len(), width]);
        let mut v = Tensor::zeros(&[targets.len(), width]);
        let mut success = vec![false; targets.len()];
        let mut prev = vec![f64::INFINITY; targets.len()];
        let mut live: Vec<usize> = (0..targets.len()).collect();

        for it in 1..=cfg.cw_max_iters {
            if live.is_empty() {
                break;
            }
            let wl = w.select_rows(&live);
            let th = wl.map(f64::tanh);
            let xa = th.map(|t| 0.5 * (t + 1.0));
            let (z, trace) = model.forward_eval(&pre.apply(&xa))?;
            let mut dz = Tensor::zeros(z.shape());
            let mut losses = Vec::with_capacity(live.len());
            for (k, &j) in live.iter().enumerate() {
                let i = targets[j];
                let zr = z.row(k);
                let t = labels[i];
                let o = argmax_other(zr, t);
                let margin = zr[t] - zr[o];
                let dist = row_l2(xa.row(k), x_raw.row(i));
                losses.push(dist * dist + c[i] * margin.max(0.0));
                if tensor::argmax(zr) != t {
                    success[j] = true;
                    if dist < best[i] {
                        best[i] = dist;
                        adversarial.row_mut(i).copy_from_slice(xa.row(k));
                    }
                }
                if margin > 0.0 {
                    dz.row_mut(k)[t] = c[i];
                    dz.row_mut(k)[o] = -c[i];
                }
            }
            let mut g = vjp_input(model, &trace, &dz)?;
            g.scale(pre.scale());
            let bc1 = 1.0 - BETA1.powi(it as i32);
            let bc2 = 1.0 - BETA2.powi(it as i32);
            for (k, &j) in live.iter().enumerate() {
                let x0 = x_raw.row(targets[j]);
                let (gr, xr, tr) = (g.row(k), xa.row(k), th.row(k));
                let span = j * width..(j + 1) * width;
                let mr = &mut m.as_mut_slice()[span.clone()];
                let vr = &mut v.as_mut_slice()[span.clone()];
                let wr = &mut w.as_mut_slice()[span];
                for q in 0..width {
                    let dx = gr[q] + 2.0 * (xr[q] - x0[q]);
                    let dw = dx * 0.5 * (1.0 - tr[q] * tr[q]);
                    mr[q] = BETA1 * mr[q] + (1.0 - BETA1) * dw;
                    vr[q] = BETA2 * vr[q] + (1.0 - BETA2) * dw * dw;
                    wr[q] -= cfg.cw_lr * (mr[q] / bc1) / ((vr[q] / bc2).sqrt() + ADAM_EPS);
                }
            }
            if it % check_every == 0 {
                // drop rows whose objective stopped improving
                let mut keep = Vec::with_capacity(live.len());
                for (k, &j) in live.iter().enumerate() {
                    if losses[k] <= 0.9999 * prev[j] {
                        prev[j] = losses[k];
                        keep.push(j);
                    }
                }
                live = keep;
            }
        }

        for (j, &i) in targets.iter().enumerate() {
            if success[j] {
                c_hi[i] = c_hi[i].min(c[i]);
                c[i] = 0.5 * (c_lo[i] + c_hi[i]);
            } else {
                c_lo[i] = c_lo[i].max(c[i]);
                c[i] = if c_hi[i] < C_CEILING { 0.5 * (c_lo[i] + c_hi[i]) } else { c[i] * 10.0 };
            }
        }
    }
    let fooled = best.iter().map(|b| b.is_finite()).collect();
    Ok(CwResult { adversarial, fooled, l2: best })
}
