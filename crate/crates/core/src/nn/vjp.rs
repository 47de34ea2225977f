//! The input vector-Jacobian product `u = v J(x)` as a differentiable graph.
//!
//! Building the graph runs the usual backward sweep from the logits to the
//! input and keeps every intermediate. [`VjpGraph::backward`] then
//! differentiates `<u_bar, u>` with respect to the parameters: the weight
//! terms come straight from the sweep, and the dependence through
//! `sigma'(pre)` turns into `sigma''` cotangents on the pre-activations,
//! which [`propagate`](super::propagate) pushes back through the forward pass.

use super::{propagate, Activation, ForwardTrace, Mlp, ParamGrads};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// The vector contracted with the logits, one per batch row.
#[derive(Debug, Clone, Copy)]
pub enum Cotangent<'a> {
    /// The same basis vector `e_c` for every row.
    Basis(usize),
    /// An explicit `B x C` matrix.
    Rows(&'a Tensor),
}

#[derive(Debug)]
pub struct VjpGraph<'a> {
    model: &'a Mlp,
    trace: &'a ForwardTrace,
    cot: Cotangent<'a>,
    /// `out_grad[l]`: cotangent on the activations of hidden layer `l`.
    out_grad: Vec<Tensor>,
    /// `delta[l] = out_grad[l] * sigma'(pre[l])`.
    delta: Vec<Tensor>,
    input_grad: Tensor,
}

/// Pending parameter cotangents from one or more [`VjpGraph::backward`] calls.
///
/// Call [`Adjoint::finish`] once to push the curvature terms through the
/// forward pass; batching several graphs into one adjoint shares that sweep.
#[derive(Debug, Clone)]
pub struct Adjoint {
    pub(crate) grads: ParamGrads,
    pub(crate) direct: Vec<Option<Tensor>>,
}

impl Adjoint {
    pub fn new(model: &Mlp) -> Self {
        Self { grads: ParamGrads::zeros_like(model), direct: vec![None; model.layers().len()] }
    }

    pub(crate) fn add_direct(&mut self, l: usize, alpha: f64, t: &Tensor) {
        match &mut self.direct[l] {
            Some(d) => d.axpy(alpha, t),
            slot @ None => {
                let mut t = t.clone();
                if alpha != 1.0 {
                    t.scale(alpha);
                }
                *slot = Some(t);
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.grads.scale(alpha);
        self.direct.iter_mut().flatten().for_each(|d| d.scale(alpha));
    }

    /// Adds an ordinary logit cotangent so a supervised loss shares the sweep.
    pub fn add_logit_grad(&mut self, dlogits: &Tensor) {
        let top = self.direct.len() - 1;
        self.add_direct(top, 1.0, dlogits);
    }

    pub fn finish(mut self, model: &Mlp, trace: &ForwardTrace) -> Result<ParamGrads> {
        trace.check(model)?;
        propagate(model, trace, std::mem::take(&mut self.direct), &mut self.grads);
        Ok(self.grads)
    }
}

impl<'a> VjpGraph<'a> {
    pub fn build(model: &'a Mlp, trace: &'a ForwardTrace, cot: Cotangent<'a>) -> Result<Self> {
        trace.check(model)?;
        let n = model.layers().len();
        let top = &model.layers()[n - 1];
        let (b, c) = (trace.batch_size(), top.outputs());
        match cot {
            Cotangent::Basis(k) if k >= c => {
                return Err(Error::Index(format!("basis index {k} outside [0, {c})")));
            }
            Cotangent::Rows(v) if v.shape() != [b, c] => {
                return Err(Error::Dimension(format!("cotangent {:?}, expected [{b}, {c}]", v.shape())));
            }
            _ => {}
        }

        // final layer is the identity, so its delta is the cotangent itself
        let mut below = match cot {
            Cotangent::Basis(k) => {
                let w = top.weights.row(k);
                let mut g = Tensor::zeros(&[b, top.inputs()]);
                for r in 0..b {
                    g.row_mut(r).copy_from_slice(w);
                }
                g
            }
            Cotangent::Rows(v) => tensor::matmul(v, &top.weights),
        };
        if let Some(m) = &trace.masks[n - 1] {
            below.mul_assign(m);
        }

        let mut out_grad = vec![Tensor::zeros(&[0]); n - 1];
        let mut delta = vec![Tensor::zeros(&[0]); n - 1];
        for l in (0..n - 1).rev() {
            let layer = &model.layers()[l];
            let mut d = below.clone();
            if layer.activation != Activation::Identity {
                d.mul_assign(&trace.slope(model, l));
            }
            let next = tensor::matmul(&d, &layer.weights);
            if layer.activation.has_curvature() {
                out_grad[l] = below;
            }
            below = next;
            if let Some(m) = &trace.masks[l] {
                below.mul_assign(m);
            }
            delta[l] = d;
        }
        Ok(Self { model, trace, cot, out_grad, delta, input_grad: below })
    }

    /// `u`, one row per example.
    pub fn input_grad(&self) -> &Tensor {
        &self.input_grad
    }

    /// Accumulates the parameter gradient of `<u_bar, u>` into `adj`.
    pub fn backward(&self, u_bar: &Tensor, adj: &mut Adjoint) -> Result<()> {
        if u_bar.shape() != self.input_grad.shape() {
            return Err(Error::Dimension(format!(
                "u_bar {:?} vs input gradient {:?}",
                u_bar.shape(),
                self.input_grad.shape()
            )));
        }
        let model = self.model;
        let trace = self.trace;
        let n = model.layers().len();
        let mut in_bar = u_bar.clone();
        for l in 0..n {
            let layer = &model.layers()[l];
            // in_grad[l] = (delta[l] W_l) * mask_l
            if let Some(m) = &trace.masks[l] {
                in_bar.mul_assign(m);
            }
            if l == n - 1 {
                match self.cot {
                    Cotangent::Basis(k) => {
                        let sums = in_bar.col_sums();
                        for (g, s) in adj.grads.weights[l].row_mut(k).iter_mut().zip(sums) {
                            *g += s;
                        }
                    }
                    Cotangent::Rows(v) => tensor::matmul_tn_acc(1.0, v, &in_bar, &mut adj.grads.weights[l]),
                }
                break;
            }
            tensor::matmul_tn_acc(1.0, &self.delta[l], &in_bar, &mut adj.grads.weights[l]);
            let mut d_bar = tensor::matmul_nt(&in_bar, &layer.weights);
            if layer.activation.has_curvature() {
                // pre_bar += d_bar * out_grad * sigma''(pre)
                let mut curv = d_bar.clone();
                for ((c, g), a) in curv
                    .as_mut_slice()
                    .iter_mut()
                    .zip(self.out_grad[l].as_slice())
                    .zip(trace.act[l].as_slice())
                {
                    *c *= g * layer.activation.second_deriv(*a);
                }
                adj.add_direct(l, 1.0, &curv);
            }
            if layer.activation != Activation::Identity {
                d_bar.mul_assign(&trace.slope(model, l));
            }
            in_bar = d_bar;
        }
        Ok(())
    }
}
