//! Squared Frobenius norm of the input-output Jacobian and its parameter gradient.
//!
//! All three routes report the batch mean of `||J(x)||_F^2` and the gradient
//! of that mean:
//!
//! - [`jacreg_exact`] contracts the logits with every output basis vector,
//!   one backward sweep each, so the cost grows linearly with the class count.
//! - [`jacreg_estimate`] replaces the basis with `n_proj` random unit vectors
//!   per example, scaled by `C`, which is unbiased for the same quantity.
//! - [`cyclopropagation`] evaluates the closed-form layer recursion for a
//!   single input with no randomness at all.
//!
//! The first two materialize `v J` through [`VjpGraph`] and differentiate it
//! with one reverse pass. The regularizer always runs on the dropout-free
//! graph; callers pass eval-mode traces.

mod cyclo;
mod stats;

pub use cyclo::{cyclopropagation, cyclopropagation_batch};
pub use stats::{estimator_stats, sample_unit_sphere, EstimatorStats};

use crate::error::{Error, Result};
use crate::nn::{Adjoint, Cotangent, ForwardTrace, Mlp, ParamGrads, VjpGraph};
use crate::rng::Stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Exact,
    Projection { n_proj: usize },
    /// Projection mode with the output basis in place of random vectors; test hook.
    BasisProjection,
    Cyclo,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Exact => write!(f, "exact"),
            Method::Projection { n_proj } => write!(f, "projection({n_proj})"),
            Method::BasisProjection => write!(f, "basis-projection"),
            Method::Cyclo => write!(f, "cyclo"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct JacobianResult {
    /// Batch mean of `||J(x)||_F^2` (or its estimate).
    pub value: f64,
    pub per_sample: Vec<f64>,
    /// Gradient of `value` with respect to every parameter.
    pub grads: ParamGrads,
    pub method: Method,
    /// Seed of the stream the projections were drawn from, if any.
    pub rng_seed: Option<u64>,
}

/// How the output space is probed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projections {
    Basis,
    Random(usize),
}

/// Regularizer value and its pending adjoint on an existing eval-mode trace.
///
/// The adjoint is left unfinished so a caller can fold a supervised logit
/// gradient into the same reverse sweep.
#[derive(Debug)]
pub struct Accumulated {
    pub value: f64,
    pub per_sample: Vec<f64>,
    pub adjoint: Option<Adjoint>,
}

pub fn accumulate(
    model: &Mlp,
    trace: &ForwardTrace,
    probes: Projections,
    rng: &mut Stream,
    want_grads: bool,
) -> Result<Accumulated> {
    if trace.has_dropout() {
        return Err(Error::State("the Jacobian regularizer runs on the dropout-free graph".into()));
    }
    let b = trace.batch_size();
    let c = model.output_width();
    let mut per_sample = vec![0.0; b];
    let mut adjoint = want_grads.then(|| Adjoint::new(model));

    let mut absorb = |graph: VjpGraph<'_>, weight: f64| -> Result<()> {
        let u = graph.input_grad();
        for (acc, row) in per_sample.iter_mut().zip(u.iter_rows()) {
            *acc += weight * row.iter().map(|v| v * v).sum::<f64>();
        }
        if let Some(adj) = adjoint.as_mut() {
            // d/du of (weight / B) sum ||u||^2
            let mut u_bar = u.clone();
            u_bar.scale(2.0 * weight / b as f64);
            graph.backward(&u_bar, adj)?;
        }
        Ok(())
    };

    match probes {
        Projections::Basis => {
            for k in 0..c {
                absorb(VjpGraph::build(model, trace, Cotangent::Basis(k))?, 1.0)?;
            }
        }
        Projections::Random(n_proj) => {
            if n_proj < 1 {
                return Err(Error::Config("n_proj must be at least 1".into()));
            }
            let weight = c as f64 / n_proj as f64;
            for _ in 0..n_proj {
                let v = sample_unit_sphere(b, c, rng);
                absorb(VjpGraph::build(model, trace, Cotangent::Rows(&v))?, weight)?;
            }
        }
    }
    let value = per_sample.iter().sum::<f64>() / b as f64;
    Ok(Accumulated { value, per_sample, adjoint })
}

fn finish(model: &Mlp, trace: &ForwardTrace, acc: Accumulated, method: Method, seed: Option<u64>) -> Result<JacobianResult> {
    let grads = acc.adjoint.expect("gradients requested").finish(model, trace)?;
    Ok(JacobianResult { value: acc.value, per_sample: acc.per_sample, grads, method, rng_seed: seed })
}

/// Exact batch-mean `||J||_F^2` by one backward sweep per output class.
pub fn jacreg_exact(model: &Mlp, x: &Tensor) -> Result<JacobianResult> {
    let (_, trace) = model.forward_eval(x)?;
    let acc = accumulate(model, &trace, Projections::Basis, &mut Stream::new(0), true)?;
    finish(model, &trace, acc, Method::Exact, None)
}

/// Random-projection estimate with `n_proj` unit vectors per example.
pub fn jacreg_estimate(model: &Mlp, x: &Tensor, n_proj: usize, rng: &mut Stream) -> Result<JacobianResult> {
    if n_proj < 1 {
        return Err(Error::Config("n_proj must be at least 1".into()));
    }
    let (_, trace) = model.forward_eval(x)?;
    let seed = rng.seed();
    let acc = accumulate(model, &trace, Projections::Random(n_proj), rng, true)?;
    finish(model, &trace, acc, Method::Projection { n_proj }, Some(seed))
}

/// The estimator run over the output basis instead of random directions
/// (`n_proj = C`); reproduces [`jacreg_exact`] bit for bit.
pub fn jacreg_estimate_basis(model: &Mlp, x: &Tensor) -> Result<JacobianResult> {
    let (_, trace) = model.forward_eval(x)?;
    let acc = accumulate(model, &trace, Projections::Basis, &mut Stream::new(0), true)?;
    finish(model, &trace, acc, Method::BasisProjection, None)
}

/// Per-example `||J(x)||_F` (not squared), exact, without gradients.
pub fn frobenius_norms(model: &Mlp, x: &Tensor) -> Result<Vec<f64>> {
    let (_, trace) = model.forward_eval(x)?;
    let acc = accumulate(model, &trace, Projections::Basis, &mut Stream::new(0), false)?;
    Ok(acc.per_sample.into_iter().map(f64::sqrt).collect())
}

/// Per-example single-batch estimates without gradients.
pub fn estimate_values(model: &Mlp, x: &Tensor, n_proj: usize, rng: &mut Stream) -> Result<Vec<f64>> {
    let (_, trace) = model.forward_eval(x)?;
    Ok(accumulate(model, &trace, Projections::Random(n_proj), rng, false)?.per_sample)
}

#[cfg(test)]
mod tests;
