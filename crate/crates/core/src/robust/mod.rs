//! Input corruptions in raw `[0, 1]` pixel space: white noise, FGSM, PGD and
//! Carlini-Wagner, plus minimal-fooling-distance searches and the curves
//! built from them.
//!
//! Every attack differentiates through the preprocessing, so a raw-space
//! gradient is the model-space gradient times `1 / std`.

mod cw;

pub use cw::{cw_attack, CwResult};

use std::fmt::Write as _;

use crate::config::{parse_value, unknown_key, KeyValues};
use crate::data::{Dataset, Preprocess};
use crate::error::{Error, Result};
use crate::nn::{softmax_cross_entropy, vjp_input, Mlp};
use crate::rng::Stream;
use crate::tensor::{self, Tensor};

/// `sign` with `sign(0) = 0`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-example gradient of the cross-entropy (temperature 1) with respect to
/// the raw pixels of each row.
pub fn loss_gradient_raw(model: &Mlp, pre: Preprocess, x_raw: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (z, trace) = model.forward_eval(&pre.apply(x_raw))?;
    let (_, mut dz) = softmax_cross_entropy(&z, labels, 1.0)?;
    // undo the batch mean so each row is its own example's gradient
    dz.scale(x_raw.rows() as f64 * pre.scale());
    vjp_input(model, &trace, &dz)
}

pub fn predict_raw(model: &Mlp, pre: Preprocess, x_raw: &Tensor) -> Result<Vec<usize>> {
    model.predict(&pre.apply(x_raw))
}

fn l2_rows(a: &Tensor, b: &Tensor) -> Vec<f64> {
    a.iter_rows()
        .zip(b.iter_rows())
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    White,
    Fgsm,
    Pgd,
    Cw,
}

impl AttackKind {
    pub const ALL: [AttackKind; 4] = [AttackKind::White, AttackKind::Fgsm, AttackKind::Pgd, AttackKind::Cw];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::White => "white",
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::Cw => "cw",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown attack kind {s:?}; expected white, fgsm, pgd or cw")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub pgd_step: f64,
    pub linf_ball: f64,
    pub pgd_max_iters: usize,
    pub cw_lr: f64,
    pub cw_c_init: f64,
    pub cw_binary_steps: usize,
    pub cw_max_iters: usize,
    /// Starting noise level of the white-noise doubling search.
    pub white_sigma0: f64,
    pub white_sigma_max: f64,
    pub white_bisect_steps: usize,
    pub fgsm_eps_max: f64,
    pub fgsm_tol: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kind: AttackKind::Pgd,
            pgd_step: 1.0 / 255.0,
            linf_ball: 32.0 / 255.0,
            pgd_max_iters: 100,
            cw_lr: 0.005,
            cw_c_init: 0.01,
            cw_binary_steps: 10,
            cw_max_iters: 1_000,
            white_sigma0: 0.01,
            white_sigma_max: 10.24,
            white_bisect_steps: 20,
            fgsm_eps_max: 1.0,
            fgsm_tol: 1e-4,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub const KEYS: &'static [&'static str] = &[
        "kind",
        "pgd_step",
        "linf_ball",
        "pgd_max_iters",
        "cw_lr",
        "cw_c_init",
        "cw_binary_steps",
        "cw_max_iters",
        "white_sigma0",
        "white_sigma_max",
        "white_bisect_steps",
        "fgsm_eps_max",
        "fgsm_tol",
        "seed",
    ];

    pub fn of_kind(kind: AttackKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "kind" => self.kind = AttackKind::parse(value)?,
            "pgd_step" => self.pgd_step = parse_value(key, value)?,
            "linf_ball" => self.linf_ball = parse_value(key, value)?,
            "pgd_max_iters" => self.pgd_max_iters = parse_value(key, value)?,
            "cw_lr" => self.cw_lr = parse_value(key, value)?,
            "cw_c_init" => self.cw_c_init = parse_value(key, value)?,
            "cw_binary_steps" => self.cw_binary_steps = parse_value(key, value)?,
            "cw_max_iters" => self.cw_max_iters = parse_value(key, value)?,
            "white_sigma0" => self.white_sigma0 = parse_value(key, value)?,
            "white_sigma_max" => self.white_sigma_max = parse_value(key, value)?,
            "white_bisect_steps" => self.white_bisect_steps = parse_value(key, value)?,
            "fgsm_eps_max" => self.fgsm_eps_max = parse_value(key, value)?,
            "fgsm_tol" => self.fgsm_tol = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            other => return Err(unknown_key(other, Self::KEYS)),
        }
        Ok(())
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in kv {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("kind", self.kind.name().to_string()),
            ("pgd_step", self.pgd_step.to_string()),
            ("linf_ball", self.linf_ball.to_string()),
            ("pgd_max_iters", self.pgd_max_iters.to_string()),
            ("cw_lr", self.cw_lr.to_string()),
            ("cw_c_init", self.cw_c_init.to_string()),
            ("cw_binary_steps", self.cw_binary_steps.to_string()),
            ("cw_max_iters", self.cw_max_iters.to_string()),
            ("white_sigma0", self.white_sigma0.to_string()),
            ("white_sigma_max", self.white_sigma_max.to_string()),
            ("white_bisect_steps", self.white_bisect_steps.to_string()),
            ("fgsm_eps_max", self.fgsm_eps_max.to_string()),
            ("fgsm_tol", self.fgsm_tol.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let mags = [
            ("pgd_step", self.pgd_step),
            ("linf_ball", self.linf_ball),
            ("cw_lr", self.cw_lr),
            ("cw_c_init", self.cw_c_init),
            ("white_sigma0", self.white_sigma0),
            ("white_sigma_max", self.white_sigma_max),
            ("fgsm_eps_max", self.fgsm_eps_max),
            ("fgsm_tol", self.fgsm_tol),
        ];
        for (k, v) in mags {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{k} must be finite and >= 0, got {v}")));
            }
        }
        if self.pgd_step > self.linf_ball {
            return Err(Error::Config(format!("pgd_step {} exceeds linf_ball {}", self.pgd_step, self.linf_ball)));
        }
        if self.white_sigma0 <= 0.0 || self.white_sigma_max < self.white_sigma0 {
            return Err(Error::Config("white-noise search needs 0 < white_sigma0 <= white_sigma_max".into()));
        }
        if self.fgsm_tol <= 0.0 {
            return Err(Error::Config("fgsm_tol must be positive".into()));
        }
        Ok(())
    }
}

/// `crop(x + eps)` with `eps_i ~ N(0, sigma^2)`.
pub fn white_noise_perturb(x_raw: &Tensor, sigma: f64, rng: &mut Stream) -> Result<Tensor> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::Config(format!("noise sigma must be finite and >= 0, got {sigma}")));
    }
    let mut out = x_raw.clone();
    for v in out.as_mut_slice() {
        *v = (*v + sigma * rng.normal()).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// One signed-gradient step of size `eps` per row, cropped.
pub fn fgsm_attack(model: &Mlp, pre: Preprocess, x_raw: &Tensor, labels: &[usize], eps: f64) -> Result<Tensor> {
    let g = loss_gradient_raw(model, pre, x_raw, labels)?;
    let mut out = x_raw.clone();
    for (x, g) in out.as_mut_slice().iter_mut().zip(g.as_slice()) {
        *x = (*x + eps * sign(*g)).clamp(0.0, 1.0);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct PgdResult {
    pub adversarial: Tensor,
    pub fooled: Vec<bool>,
    pub iters: Vec<usize>,
}

/// Repeated FGSM steps of `pgd_step`, each followed by projection onto the
/// `linf_ball` around the original and the `[0, 1]` crop. A row stops at its
/// first misclassification or after `pgd_max_iters` steps.
pub fn pgd_attack(model: &Mlp, pre: Preprocess, x_raw: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<PgdResult> {
    let n = x_raw.rows();
    let mut adv = x_raw.clone();
    let mut iters = vec![0; n];
    let mut fooled: Vec<bool> = predict_raw(model, pre, x_raw)?.iter().zip(labels).map(|(p, l)| p != l).collect();
    for _ in 0..cfg.pgd_max_iters {
        let active: Vec<usize> = (0..n).filter(|&i| !fooled[i]).collect();
        if active.is_empty() {
            break;
        }
        let cur = adv.select_rows(&active);
        let lab: Vec<usize> = active.iter().map(|&i| labels[i]).collect();
        let g = loss_gradient_raw(model, pre, &cur, &lab)?;
        let mut next = cur;
        for (k, &i) in active.iter().enumerate() {
            let orig = x_raw.row(i);
            for ((x, g), o) in next.row_mut(k).iter_mut().zip(g.row(k)).zip(orig) {
                let stepped = *x + cfg.pgd_step * sign(*g);
                *x = stepped.clamp(o - cfg.linf_ball, o + cfg.linf_ball).clamp(0.0, 1.0);
            }
        }
        let preds = predict_raw(model, pre, &next)?;
        for (k, &i) in active.iter().enumerate() {
            adv.row_mut(i).copy_from_slice(next.row(k));
            iters[i] += 1;
            fooled[i] = preds[k] != labels[i];
        }
    }
    Ok(PgdResult { adversarial: adv, fooled, iters })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveMetric {
    Accuracy,
    Error,
}

/// Percent accuracy or test error against a strictly increasing abscissa.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessCurve {
    pub kind: AttackKind,
    pub metric: CurveMetric,
    pub abscissa: Vec<f64>,
    pub values: Vec<f64>,
    pub n_test: usize,
    pub seed: u64,
}

impl RobustnessCurve {
    /// Step-function value at `x`: the entry of the largest abscissa `<= x`,
    /// or the curve's floor before the first point.
    pub fn value_at(&self, x: f64) -> f64 {
        let k = self.abscissa.partition_point(|&a| a <= x);
        match (k, self.metric) {
            (0, CurveMetric::Error) => 0.0,
            (0, CurveMetric::Accuracy) => 100.0,
            (k, _) => self.values[k - 1],
        }
    }

    /// Accuracy at `x`, whichever metric is stored.
    pub fn accuracy_at(&self, x: f64) -> f64 {
        match self.metric {
            CurveMetric::Accuracy => self.value_at(x),
            CurveMetric::Error => 100.0 - self.value_at(x),
        }
    }

    /// `abscissa,<accuracy|error>,n,seed`, one row per abscissa value.
    pub fn to_csv(&self) -> String {
        let metric = match self.metric {
            CurveMetric::Accuracy => "accuracy",
            CurveMetric::Error => "error",
        };
        let mut s = format!("abscissa,{metric},n,seed\n");
        for (a, v) in self.abscissa.iter().zip(&self.values) {
            let _ = writeln!(s, "{a},{v},{},{}", self.n_test, self.seed);
        }
        s
    }
}

fn eval_subset(dataset: &Dataset, n_test: usize) -> Result<Dataset> {
    if dataset.is_empty() {
        return Err(Error::Data("no test points".into()));
    }
    Ok(if n_test == 0 || n_test >= dataset.len() { dataset.clone() } else { dataset.head(n_test) })
}

/// Accuracy with one independent noise draw per point per `sigma`. Point
/// `i` at level `s` draws from `rng.split(i).split(s)`.
pub fn accuracy_under_noise(model: &Mlp, dataset: &Dataset, sigmas: &[f64], n_test: usize, rng: &Stream) -> Result<RobustnessCurve> {
    if sigmas.is_empty() || sigmas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("noise levels must be non-empty and strictly increasing".into()));
    }
    let ds = eval_subset(dataset, n_test)?;
    let mut values = Vec::with_capacity(sigmas.len());
    for (s, &sigma) in sigmas.iter().enumerate() {
        let mut noisy = ds.images().clone();
        for i in 0..ds.len() {
            let row = Tensor::matrix(1, ds.width(), ds.image(i).to_vec())?;
            let out = white_noise_perturb(&row, sigma, &mut rng.split(i as u64).split(s as u64))?;
            noisy.row_mut(i).copy_from_slice(out.as_slice());
        }
        let preds = predict_raw(model, ds.preprocess, &noisy)?;
        let hits = preds.iter().zip(ds.labels()).filter(|(p, l)| p == l).count();
        values.push(100.0 * hits as f64 / ds.len() as f64);
    }
    Ok(RobustnessCurve {
        kind: AttackKind::White,
        metric: CurveMetric::Accuracy,
        abscissa: sigmas.to_vec(),
        values,
        n_test: ds.len(),
        seed: rng.seed(),
    })
}

/// Minimal successful perturbation found for one test point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FoolingPoint {
    /// Raw-space L2 distance, or the search budget's distance if censored.
    pub distance: f64,
    pub censored: bool,
}

/// Batched bisection on a per-row scale `t` of a fixed perturbation
/// `x(t) = crop(x + t d)`, returning the fooling points.
fn scale_search(
    model: &Mlp,
    pre: Preprocess,
    x: &Tensor,
    labels: &[usize],
    dirs: &Tensor,
    ladder: &[f64],
    bisect_steps: usize,
    tol: f64,
) -> Result<Vec<FoolingPoint>> {
    let n = x.rows();
    let at = |t: &[f64]| -> Tensor {
        let mut out = x.clone();
        for (i, &ti) in t.iter().enumerate() {
            for (v, d) in out.row_mut(i).iter_mut().zip(dirs.row(i)) {
                *v = (*v + ti * d).clamp(0.0, 1.0);
            }
        }
        out
    };
    let fooled_at = |t: &[f64]| -> Result<Vec<bool>> {
        Ok(predict_raw(model, pre, &at(t))?.iter().zip(labels).map(|(p, l)| p != l).collect())
    };
    let mut lo = vec![0.0; n];
    let mut hi = vec![f64::NAN; n];
    let clean = fooled_at(&lo)?;
    for (i, &c) in clean.iter().enumerate() {
        if c {
            hi[i] = 0.0;
        }
    }
    for &t in ladder {
        let open: Vec<usize> = (0..n).filter(|&i| hi[i].is_nan()).collect();
        if open.is_empty() {
            break;
        }
        let probe: Vec<f64> = (0..n).map(|i| if hi[i].is_nan() { t } else { 0.0 }).collect();
        let f = fooled_at(&probe)?;
        for i in open {
            if f[i] {
                hi[i] = t;
            } else {
                lo[i] = t;
            }
        }
    }
    let censored: Vec<bool> = hi.iter().map(|h| h.is_nan()).collect();
    let budget = *ladder.last().unwrap_or(&0.0);
    for (i, h) in hi.iter_mut().enumerate() {
        if censored[i] {
            *h = budget;
        }
    }
    for _ in 0..bisect_steps {
        let open: Vec<usize> = (0..n).filter(|&i| !censored[i] && hi[i] - lo[i] > tol).collect();
        if open.is_empty() {
            break;
        }
        let mid: Vec<f64> = (0..n).map(|i| 0.5 * (lo[i] + hi[i])).collect();
        let f = fooled_at(&mid)?;
        for i in open {
            if f[i] {
                hi[i] = mid[i];
            } else {
                lo[i] = mid[i];
            }
        }
    }
    let dist = l2_rows(&at(&hi), x);
    Ok(dist.into_iter().zip(censored).map(|(distance, censored)| FoolingPoint { distance, censored }).collect())
}

/// Per-point minimal fooling distances on the first `n_test` points.
///
/// - white: a fixed Gaussian direction per point, scaled by `sigma`
///   doubling from `white_sigma0`, then bisected.
/// - fgsm: the signed gradient at the clean point, bisected on `eps` down
///   to `fgsm_tol`.
/// - pgd, cw: the distance of the returned example.
pub fn fooling_distances(model: &Mlp, dataset: &Dataset, cfg: &AttackConfig, n_test: usize) -> Result<Vec<FoolingPoint>> {
    cfg.validate()?;
    let ds = eval_subset(dataset, n_test)?;
    let (x, labels, pre) = (ds.images(), ds.labels(), ds.preprocess);
    match cfg.kind {
        AttackKind::White => {
            let root = Stream::new(cfg.seed);
            let mut dirs = Tensor::zeros(&[ds.len(), ds.width()]);
            for i in 0..ds.len() {
                let mut r = root.split(i as u64);
                dirs.row_mut(i).iter_mut().for_each(|v| *v = r.normal());
            }
            let mut ladder = vec![cfg.white_sigma0];
            while *ladder.last().unwrap() < cfg.white_sigma_max {
                let next = (ladder.last().unwrap() * 2.0).min(cfg.white_sigma_max);
                ladder.push(next);
            }
            scale_search(model, pre, x, labels, &dirs, &ladder, cfg.white_bisect_steps, 0.0)
        }
        AttackKind::Fgsm => {
            let g = loss_gradient_raw(model, pre, x, labels)?;
            let dirs = g.map(sign);
            let steps = (cfg.fgsm_eps_max / cfg.fgsm_tol).log2().ceil().max(0.0) as usize + 1;
            scale_search(model, pre, x, labels, &dirs, &[cfg.fgsm_eps_max], steps, cfg.fgsm_tol)
        }
        AttackKind::Pgd => {
            let r = pgd_attack(model, pre, x, labels, cfg)?;
            let d = l2_rows(&r.adversarial, x);
            Ok(d.into_iter().zip(r.fooled).map(|(distance, f)| FoolingPoint { distance, censored: !f }).collect())
        }
        AttackKind::Cw => {
            let r = cw_attack(model, pre, x, labels, cfg)?;
            Ok(r.l2.into_iter().zip(r.fooled).map(|(d, f)| FoolingPoint { distance: if f { d } else { f64::INFINITY }, censored: !f }).collect())
        }
    }
}

/// Cumulative test error against fooling distance: the abscissa is every
/// distinct uncensored distance, the value the percentage of all points
/// fooled at or below it. Censored points only count in the denominator.
pub fn fooling_curve(points: &[FoolingPoint], kind: AttackKind, seed: u64) -> RobustnessCurve {
    let mut d: Vec<f64> = points.iter().filter(|p| !p.censored).map(|p| p.distance).collect();
    d.sort_by(f64::total_cmp);
    let n = points.len().max(1) as f64;
    let mut abscissa = Vec::new();
    let mut values = Vec::new();
    for (k, &v) in d.iter().enumerate() {
        let count = (k + 1) as f64 * 100.0 / n;
        if abscissa.last() == Some(&v) {
            *values.last_mut().unwrap() = count;
        } else {
            abscissa.push(v);
            values.push(count);
        }
    }
    RobustnessCurve { kind, metric: CurveMetric::Error, abscissa, values, n_test: points.len(), seed }
}

pub fn fooling_distance_sweep(model: &Mlp, dataset: &Dataset, cfg: &AttackConfig, n_test: usize) -> Result<RobustnessCurve> {
    let points = fooling_distances(model, dataset, cfg, n_test)?;
    Ok(fooling_curve(&points, cfg.kind, cfg.seed))
}

/// Median over uncensored points; `None` if every point was censored.
pub fn median_distance(points: &[FoolingPoint]) -> Option<f64> {
    let mut d: Vec<f64> = points.iter().filter(|p| !p.censored).map(|p| p.distance).collect();
    if d.is_empty() {
        return None;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len() / 2;
    Some(if d.len() % 2 == 1 { d[m] } else { 0.5 * (d[m - 1] + d[m]) })
}

/// Mean of `a(x) - b(x)` over a grid of points, used to compare two curves.
pub fn mean_gap(a: &RobustnessCurve, b: &RobustnessCurve, grid: &[f64]) -> f64 {
    grid.iter().map(|&x| a.accuracy_at(x) - b.accuracy_at(x)).sum::<f64>() / grid.len().max(1) as f64
}

pub(crate) fn argmax_other(row: &[f64], skip: usize) -> usize {
    let mut best = usize::MAX;
    for (k, &v) in row.iter().enumerate() {
        if k != skip && (best == usize::MAX || v > row[best]) {
            best = k;
        }
    }
    best
}

pub(crate) fn row_l2(a: &[f64], b: &[f64]) -> f64 {
    tensor::norm2(&a.iter().zip(b).map(|(p, q)| p - q).collect::<Vec<_>>())
}
