//! Property suites behind `jrlab check`: gradient soundness, estimator
//! unbiasedness, the variance bound and method equivalence. Each line of a
//! report carries the measured value and the tolerance it was held to.

pub mod fixtures;
pub mod oracle;

use std::fmt::Write as _;

use crate::error::Result;
use crate::jacreg::{cyclopropagation, estimate_values, estimator_stats, jacreg_estimate, jacreg_exact, JacobianResult};
use crate::nn::{backprop_params, softmax_cross_entropy, Activation, Mlp};
use crate::rng::Stream;
use crate::tensor::Tensor;
use crate::train::{joint_loss_grad, RegMethod};
use fixtures::{normal_batch, random_dims, random_mlp};
use oracle::{fd_param_grads, grads_rel_err, max_abs_diff, rel_err};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub suite: &'static str,
    pub name: String,
    pub measured: f64,
    /// Passing means `measured <= tolerance`.
    pub tolerance: f64,
}

impl CheckLine {
    pub fn passed(&self) -> bool {
        self.measured <= self.tolerance
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckReport {
    pub lines: Vec<CheckLine>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(CheckLine::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckLine> {
        self.lines.iter().filter(|l| !l.passed())
    }

    pub fn suite_passed(&self, suite: &str) -> bool {
        self.lines.iter().filter(|l| l.suite == suite).all(CheckLine::passed)
    }

    pub fn extend(&mut self, other: CheckReport) {
        self.lines.extend(other.lines);
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for l in &self.lines {
            let _ = writeln!(
                s,
                "{} {:<12} {:<40} measured {:<12.4e} tolerance {:<12.4e} margin {:.4e}",
                if l.passed() { "PASS" } else { "FAIL" },
                l.suite,
                l.name,
                l.measured,
                l.tolerance,
                l.tolerance - l.measured
            );
        }
        let failed = self.failures().count();
        let _ = writeln!(s, "{} checks, {} failed", self.lines.len(), failed);
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    pub models: usize,
    pub estimates: usize,
    pub jacobians: usize,
    pub variance_samples: usize,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { models: 20, estimates: 10_000, jacobians: 50, variance_samples: 20_000, seed: 0 }
    }
}

/// Signature of a single-input cyclopropagation routine, so a test can
/// substitute a broken one.
pub type CycloFn = dyn Fn(&Mlp, &[f64]) -> Result<JacobianResult>;

pub fn run_all(opts: &CheckOptions) -> Result<CheckReport> {
    let mut r = gradient_suite(opts)?;
    r.extend(unbiasedness_suite(opts)?);
    r.extend(variance_suite(opts));
    r.extend(equivalence_suite(opts, &cyclopropagation)?);
    Ok(r)
}

/// Analytic gradients against central differences on tiny tanh models.
pub fn gradient_suite(opts: &CheckOptions) -> Result<CheckReport> {
    const TOL: f64 = 1e-5;
    const H: f64 = 1e-5;
    let mut lines = Vec::new();
    let root = Stream::new(opts.seed).split(1);
    for case in 0..3u64 {
        let mut rng = root.split(case);
        let dims = [4, 5, 4, 3];
        let model = random_mlp(&dims, Activation::Tanh, rng.seed(), 1.5);
        let x = normal_batch(4, 4, &mut rng);
        let labels = vec![0, 1, 2, 1];

        let (z, trace) = model.forward_eval(&x)?;
        let (_, dz) = softmax_cross_entropy(&z, &labels, 1.0)?;
        let g = backprop_params(&model, &trace, &dz)?;
        let fd = fd_param_grads(&model, H, |m| softmax_cross_entropy(&m.logits(&x).unwrap(), &labels, 1.0).unwrap().0);
        lines.push(CheckLine { suite: "gradients", name: format!("supervised #{case}"), measured: grads_rel_err(&g, &fd), tolerance: TOL });

        let g = jacreg_exact(&model, &x)?.grads;
        let fd = fd_param_grads(&model, H, |m| jacreg_exact(m, &x).unwrap().value);
        lines.push(CheckLine { suite: "gradients", name: format!("exact regularizer #{case}"), measured: grads_rel_err(&g, &fd), tolerance: TOL });

        let frozen = root.split(100 + case);
        let g = jacreg_estimate(&model, &x, 2, &mut frozen.clone())?.grads;
        let fd = fd_param_grads(&model, H, |m| jacreg_estimate(m, &x, 2, &mut frozen.clone()).unwrap().value);
        lines.push(CheckLine { suite: "gradients", name: format!("estimated regularizer #{case}"), measured: grads_rel_err(&g, &fd), tolerance: TOL });

        let (lambda, dropout) = (0.5, 0.2);
        let method = RegMethod::Projections(1);
        let (_, g) = joint_loss_grad(&model, &x, &labels, lambda, dropout, method, &mut frozen.clone())?;
        let fd = fd_param_grads(&model, H, |m| {
            joint_loss_grad(m, &x, &labels, lambda, dropout, method, &mut frozen.clone()).unwrap().0.total(lambda)
        });
        lines.push(CheckLine { suite: "gradients", name: format!("joint loss #{case}"), measured: grads_rel_err(&g, &fd), tolerance: TOL });
    }
    Ok(CheckReport { lines })
}

/// Mean of single-projection estimates against the exact value, in
/// standard errors.
pub fn unbiasedness_suite(opts: &CheckOptions) -> Result<CheckReport> {
    let mut lines = Vec::new();
    let root = Stream::new(opts.seed).split(2);
    for k in 0..opts.models {
        let mut rng = root.split(k as u64);
        let inputs = 2 + (rng.uniform() * 10.0) as usize;
        let classes = 2 + (rng.uniform() * 9.0) as usize;
        let dims = random_dims(&mut rng, inputs, classes, 4, 16);
        let model = random_mlp(&dims, Activation::Tanh, rng.seed(), 1.5);
        let x = normal_batch(1, inputs, &mut rng);
        let exact = jacreg_exact(&model, &x)?.value;
        let reps = Tensor::matrix(opts.estimates, inputs, x.row(0).repeat(opts.estimates))?;
        let est = estimate_values(&model, &reps, 1, &mut rng.split(7))?;
        let n = est.len() as f64;
        let mean = est.iter().sum::<f64>() / n;
        let sd = (est.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let z = (mean - exact).abs() / (sd / n.sqrt()).max(f64::MIN_POSITIVE);
        lines.push(CheckLine { suite: "unbiased", name: format!("model #{k} dims {dims:?}"), measured: z, tolerance: 3.0 });
    }
    Ok(CheckReport { lines })
}

/// Sample variance over squared mean against the worst case, and the
/// closed-form variance against Monte Carlo.
pub fn variance_suite(opts: &CheckOptions) -> CheckReport {
    let mut lines = Vec::new();
    let root = Stream::new(opts.seed).split(3);
    let sizes = [2, 5, 10, 50];
    let mut cases: Vec<(String, Tensor)> = (0..opts.jacobians)
        .map(|k| {
            let mut rng = root.split(k as u64);
            let c = sizes[k % sizes.len()];
            let i = 3 + (rng.uniform() * 20.0) as usize;
            (format!("J#{k} C={c} I={i}"), normal_batch(c, i, &mut rng))
        })
        .collect();
    cases.push(("rank-1 diag(1,0)".into(), Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).expect("2x2")));
    for (k, (name, j)) in cases.iter().enumerate() {
        let s = estimator_stats(j, opts.variance_samples, &mut root.split(1000 + k as u64));
        let err = s.relative_variance_error();
        lines.push(CheckLine { suite: "variance", name: format!("{name} var/mean^2"), measured: s.relative_variance(), tolerance: s.bound() + 3.0 * err });
        lines.push(CheckLine {
            suite: "variance",
            name: format!("{name} closed form (SE)"),
            measured: (s.variance - s.closed_form_variance).abs() / s.variance_std_error.max(f64::MIN_POSITIVE),
            tolerance: 5.0,
        });
    }
    // the rank-1 case must reach the bound 0.5 at C = 2, not merely stay under it
    let rank1 = estimator_stats(&cases.last().expect("rank-1 case").1, opts.variance_samples, &mut root.split(9999));
    lines.push(CheckLine {
        suite: "variance",
        name: "rank-1 saturation |var/mean^2 - 0.5| (err)".into(),
        measured: (rank1.relative_variance() - 0.5).abs() / rank1.relative_variance_error(),
        tolerance: 5.0,
    });
    CheckReport { lines }
}

/// Cyclopropagation against the exact basis sweep on random tanh models.
pub fn equivalence_suite(opts: &CheckOptions, cyclo: &CycloFn) -> Result<CheckReport> {
    let mut lines = Vec::new();
    let root = Stream::new(opts.seed).split(4);
    for k in 0..opts.models {
        let mut rng = root.split(k as u64);
        let inputs = 2 + (rng.uniform() * 30.0) as usize;
        let classes = 2 + (rng.uniform() * 30.0) as usize;
        let dims = random_dims(&mut rng, inputs, classes, 4, 32);
        let model = random_mlp(&dims, Activation::Tanh, rng.seed(), 1.2);
        let x = normal_batch(1, inputs, &mut rng);
        let exact = jacreg_exact(&model, &x)?;
        let cy = cyclo(&model, x.row(0))?;
        lines.push(CheckLine {
            suite: "equivalence",
            name: format!("model #{k} value rel"),
            measured: rel_err(&[cy.value], &[exact.value]),
            tolerance: 1e-10,
        });
        lines.push(CheckLine {
            suite: "equivalence",
            name: format!("model #{k} grads abs"),
            measured: max_abs_diff(&cy.grads.flatten(), &exact.grads.flatten()),
            tolerance: 1e-8,
        });
    }
    Ok(CheckReport { lines })
}
