//! SGD with momentum on `L_super + (lambda_jr / 2) * mean ||J||_F^2`, with
//! weight decay, ten-fold learning-rate quenching, per-class subsampling and
//! optional FGSM adversarial training.

use std::fmt::Write as _;

use crate::config::{parse_value, unknown_key, KeyValues};
use crate::data::{Dataset, Preprocess};
use crate::error::{Error, Result};
use crate::jacreg::{self, accumulate, Projections};
use crate::nn::{backprop_params, softmax_cross_entropy, Mlp, Mode, ParamGrads};
use crate::rng::Stream;
use crate::robust;
use crate::tensor::Tensor;

/// How the regularizer probes the output space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegMethod {
    Exact,
    Projections(usize),
}

impl RegMethod {
    fn probes(self) -> Projections {
        match self {
            RegMethod::Exact => Projections::Basis,
            RegMethod::Projections(n) => Projections::Random(n),
        }
    }
}

impl std::fmt::Display for RegMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RegMethod::Exact => write!(f, "exact"),
            RegMethod::Projections(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSize {
    Fixed(usize),
    Full,
}

impl std::fmt::Display for BatchSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BatchSize::Fixed(n) => write!(f, "{n}"),
            BatchSize::Full => write!(f, "full"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda_jr: f64,
    pub lambda_wd: f64,
    pub dropout: f64,
    pub n_proj: RegMethod,
    pub eta0: f64,
    pub quench_every: usize,
    pub total_iters: usize,
    pub batch_size: BatchSize,
    pub momentum: f64,
    /// FGSM training amplitudes are drawn from `U[0, adv_eps_max]`.
    pub adv_eps_max: Option<f64>,
    pub seed: u64,
    pub samples_per_class: Option<usize>,
    pub log_every: usize,
    /// Test examples used for logged metrics; 0 means all.
    pub eval_points: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_jr: 0.0,
            lambda_wd: 0.0,
            dropout: 0.0,
            n_proj: RegMethod::Projections(1),
            eta0: 0.1,
            quench_every: 5_000,
            total_iters: 15_000,
            batch_size: BatchSize::Fixed(100),
            momentum: 0.9,
            adv_eps_max: None,
            seed: 0,
            samples_per_class: None,
            log_every: 100,
            eval_points: 1_000,
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "lambda_jr",
        "lambda_wd",
        "dropout",
        "n_proj",
        "eta0",
        "quench_every",
        "total_iters",
        "batch_size",
        "momentum",
        "adv_eps_max",
        "seed",
        "samples_per_class",
        "log_every",
        "eval_points",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "lambda_jr" => self.lambda_jr = parse_value(key, value)?,
            "lambda_wd" => self.lambda_wd = parse_value(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            "n_proj" => {
                self.n_proj = match value {
                    "exact" => RegMethod::Exact,
                    v => RegMethod::Projections(parse_value(key, v)?),
                }
            }
            "eta0" => self.eta0 = parse_value(key, value)?,
            "quench_every" => self.quench_every = parse_value(key, value)?,
            "total_iters" => self.total_iters = parse_value(key, value)?,
            "batch_size" => {
                self.batch_size = match value {
                    "full" => BatchSize::Full,
                    v => BatchSize::Fixed(parse_value(key, v)?),
                }
            }
            "momentum" => self.momentum = parse_value(key, value)?,
            "adv_eps_max" => {
                self.adv_eps_max = match value {
                    "off" | "none" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "seed" => self.seed = parse_value(key, value)?,
            "samples_per_class" => {
                self.samples_per_class = match value {
                    "all" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "log_every" => self.log_every = parse_value(key, value)?,
            "eval_points" => self.eval_points = parse_value(key, value)?,
            other => return Err(unknown_key(other, Self::KEYS)),
        }
        Ok(())
    }

    /// Defaults overridden by every pair in `kv`; unknown keys are errors.
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
            ("lambda_jr", self.lambda_jr.to_string()),
            ("lambda_wd", self.lambda_wd.to_string()),
            ("dropout", self.dropout.to_string()),
            ("n_proj", self.n_proj.to_string()),
            ("eta0", self.eta0.to_string()),
            ("quench_every", self.quench_every.to_string()),
            ("total_iters", self.total_iters.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("momentum", self.momentum.to_string()),
            ("adv_eps_max", self.adv_eps_max.map_or("off".into(), |e| e.to_string())),
            ("seed", self.seed.to_string()),
            ("samples_per_class", self.samples_per_class.map_or("all".into(), |k| k.to_string())),
            ("log_every", self.log_every.to_string()),
            ("eval_points", self.eval_points.to_string()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let nonneg = [("lambda_jr", self.lambda_jr), ("lambda_wd", self.lambda_wd), ("eta0", self.eta0)];
        for (k, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{k} must be finite and >= 0, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.n_proj == RegMethod::Projections(0) {
            return bad("n_proj must be at least 1 or `exact`".into());
        }
        if self.quench_every == 0 {
            return bad("quench_every must be positive".into());
        }
        if self.batch_size == BatchSize::Fixed(0) {
            return bad("batch_size must be positive or `full`".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be positive".into());
        }
        if self.samples_per_class == Some(0) {
            return bad("samples_per_class must be positive or `all`".into());
        }
        if let Some(e) = self.adv_eps_max {
            if !(e.is_finite() && e >= 0.0) {
                return bad(format!("adv_eps_max must be finite and >= 0, got {e}"));
            }
        }
        Ok(())
    }

    /// `eta0 * 10^-floor(t / quench_every)`.
    pub fn lr_at(&self, t: usize) -> f64 {
        self.eta0 * 10f64.powi(-((t / self.quench_every) as i32))
    }
}

/// Exactly `k` examples of every class, picked by a seeded shuffle and
/// returned in ascending index order.
pub fn subsample_per_class(dataset: &Dataset, k: usize, seed: u64) -> Result<Dataset> {
    let root = Stream::new(seed);
    let mut picked = Vec::with_capacity(k * dataset.classes());
    for class in 0..dataset.classes() {
        let mut members: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels()[i] == class).collect();
        if members.len() < k {
            return Err(Error::Data(format!("class {class} has {} examples, {k} requested", members.len())));
        }
        root.split(class as u64).shuffle(&mut members);
        picked.extend_from_slice(&members[..k]);
    }
    picked.sort_unstable();
    Ok(dataset.subset(&picked))
}

/// `v <- rho v - eta (g + lambda_wd theta)`, then `theta <- theta + v`, for
/// weights and biases alike.
pub fn sgd_step(model: &mut Mlp, velocity: &mut ParamGrads, grads: &ParamGrads, eta: f64, rho: f64, lambda_wd: f64) {
    let mut vel = velocity.weights.iter_mut().zip(velocity.biases.iter_mut()).flat_map(|(w, b)| {
        [w.as_mut_slice(), b.as_mut_slice()]
    });
    model.for_each_param_mut(grads, |theta, g| {
        let v = vel.next().expect("velocity congruent with model");
        for ((t, v), g) in theta.iter_mut().zip(v.iter_mut()).zip(g) {
            *v = rho * *v - eta * (g + lambda_wd * *t);
            *t += *v;
        }
    });
}

/// FGSM-corrupted copy of a raw batch, one amplitude `U[0, eps_max]` per
/// example, cropped and then preprocessed.
pub fn fgsm_augment(
    batch_raw: &Tensor,
    labels: &[usize],
    model: &Mlp,
    pre: Preprocess,
    eps_max: f64,
    rng: &mut Stream,
) -> Result<Tensor> {
    if eps_max == 0.0 {
        return Ok(pre.apply(batch_raw));
    }
    let grad = robust::loss_gradient_raw(model, pre, batch_raw, labels)?;
    let mut out = batch_raw.clone();
    for r in 0..out.rows() {
        let eps = rng.uniform_in(0.0, eps_max);
        for (x, g) in out.row_mut(r).iter_mut().zip(grad.row(r)) {
            *x = (*x + eps * robust::sign(*g)).clamp(0.0, 1.0);
        }
    }
    Ok(pre.apply(&out))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointLoss {
    pub supervised: f64,
    /// Batch-mean `||J||_F^2` (or its estimate); `None` when not computed.
    pub reg: Option<f64>,
}

impl JointLoss {
    pub fn total(&self, lambda_jr: f64) -> f64 {
        self.supervised + 0.5 * lambda_jr * self.reg.unwrap_or(0.0)
    }
}

/// Joint loss on a preprocessed batch and its parameter gradient. Dropout
/// masks are drawn from `rng` first, then projection vectors. The regularizer
/// is skipped when `lambda_jr == 0`.
pub fn joint_loss_grad(
    model: &Mlp,
    x: &Tensor,
    labels: &[usize],
    lambda_jr: f64,
    dropout: f64,
    method: RegMethod,
    rng: &mut Stream,
) -> Result<(JointLoss, ParamGrads)> {
    let mode = if dropout > 0.0 { Mode::Train { dropout } } else { Mode::Eval };
    let (z, trace) = model.forward(x, mode, rng)?;
    let (supervised, dlogits) = softmax_cross_entropy(&z, labels, 1.0)?;
    if lambda_jr == 0.0 {
        let grads = backprop_params(model, &trace, &dlogits)?;
        return Ok((JointLoss { supervised, reg: None }, grads));
    }
    if dropout > 0.0 {
        let grads_sup = backprop_params(model, &trace, &dlogits)?;
        let (_, eval_trace) = model.forward_eval(x)?;
        let mut acc = accumulate(model, &eval_trace, method.probes(), rng, true)?;
        let mut adj = acc.adjoint.take().expect("gradients requested");
        adj.scale(0.5 * lambda_jr);
        let mut grads = adj.finish(model, &eval_trace)?;
        grads.axpy(1.0, &grads_sup);
        return Ok((JointLoss { supervised, reg: Some(acc.value) }, grads));
    }
    // one reverse sweep for both terms
    let mut acc = accumulate(model, &trace, method.probes(), rng, true)?;
    let mut adj = acc.adjoint.take().expect("gradients requested");
    adj.scale(0.5 * lambda_jr);
    adj.add_logit_grad(&dlogits);
    let grads = adj.finish(model, &trace)?;
    Ok((JointLoss { supervised, reg: Some(acc.value) }, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    /// Percent correct.
    pub accuracy: f64,
    /// Mean exact `||J(x)||_F` over the evaluated points.
    pub jf_norm: f64,
    pub n: usize,
}

pub fn accuracy(model: &Mlp, x: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Data("accuracy of an empty set".into()));
    }
    let hits = model.predict(x)?.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

/// Mean exact `||J||_F` over the rows of a preprocessed batch, in chunks.
pub fn mean_jf_norm(model: &Mlp, x: &Tensor) -> Result<f64> {
    let n = x.rows();
    let mut sum = 0.0;
    for start in (0..n).step_by(500) {
        let idx: Vec<usize> = (start..(start + 500).min(n)).collect();
        sum += jacreg::frobenius_norms(model, &x.select_rows(&idx))?.iter().sum::<f64>();
    }
    Ok(sum / n as f64)
}

/// Clean accuracy and mean `||J||_F` on the first `n` examples (0 = all).
pub fn evaluate(model: &Mlp, dataset: &Dataset, n: usize) -> Result<Evaluation> {
    let ds = if n == 0 || n >= dataset.len() { dataset.clone() } else { dataset.head(n) };
    let x = ds.preprocessed();
    Ok(Evaluation { accuracy: accuracy(model, &x, ds.labels())?, jf_norm: mean_jf_norm(model, &x)?, n: ds.len() })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRecord {
    /// Steps completed.
    pub iteration: usize,
    pub loss: f64,
    pub reg_value: Option<f64>,
    pub test_acc: Option<f64>,
    pub jf_norm: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub train_size: usize,
    pub seed: u64,
    pub records: Vec<HistoryRecord>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&HistoryRecord> {
        self.records.last()
    }

    /// `# train_size=.. seed=..` then `iteration,loss,reg_value,test_acc,jf_norm,lr`.
    /// Quantities that were not computed are left empty.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        let mut s = format!("# train_size={} seed={}\niteration,loss,reg_value,test_acc,jf_norm,lr\n", self.train_size, self.seed);
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.iteration,
                r.loss,
                opt(r.reg_value),
                opt(r.test_acc),
                opt(r.jf_norm),
                r.lr
            );
        }
        s
    }
}

struct Batcher {
    n: usize,
    size: Option<usize>,
    order: Vec<usize>,
    pos: usize,
    rng: Stream,
}

impl Batcher {
    fn next(&mut self) -> Vec<usize> {
        let Some(b) = self.size else { return (0..self.n).collect() };
        if self.pos + b > self.order.len() {
            self.order = (0..self.n).collect();
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + b].to_vec();
        self.pos += b;
        out
    }
}

/// Runs `cfg.total_iters` SGD steps from `model` on `train_set`, logging
/// test metrics on `test_set` when given.
pub fn train(mut model: Mlp, train_set: &Dataset, test_set: Option<&Dataset>, cfg: &TrainConfig) -> Result<(Mlp, TrainHistory)> {
    cfg.validate()?;
    if train_set.width() != model.input_width() || train_set.classes() != model.output_width() {
        return Err(Error::Dimension(format!(
            "model {:?} does not fit data with {} inputs and {} classes",
            model.dims(),
            train_set.width(),
            train_set.classes()
        )));
    }
    let data = match cfg.samples_per_class {
        Some(k) => subsample_per_class(train_set, k, cfg.seed)?,
        None => train_set.clone(),
    };
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let x_all = data.preprocessed();
    let test = test_set.map(|t| if cfg.eval_points == 0 { t.clone() } else { t.head(cfg.eval_points) });
    let x_test = test.as_ref().map(Dataset::preprocessed);

    let root = Stream::new(cfg.seed);
    let mut batcher = Batcher {
        n: data.len(),
        size: match cfg.batch_size {
            BatchSize::Full => None,
            BatchSize::Fixed(b) => Some(b.min(data.len())),
        },
        order: Vec::new(),
        pos: 0,
        rng: root.split(1),
    };
    let mut step_rng = root.split(2);
    let mut adv_rng = root.split(3);

    let mut velocity = ParamGrads::zeros_like(&model);
    let mut history = TrainHistory { train_size: data.len(), seed: cfg.seed, records: Vec::new() };
    for t in 0..cfg.total_iters {
        let idx = batcher.next();
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();
        let x = match cfg.adv_eps_max {
            Some(eps) => fgsm_augment(&data.images().select_rows(&idx), &labels, &model, data.preprocess, eps, &mut adv_rng)?,
            None => x_all.select_rows(&idx),
        };
        let (loss, grads) = joint_loss_grad(&model, &x, &labels, cfg.lambda_jr, cfg.dropout, cfg.n_proj, &mut step_rng)?;
        if !loss.total(cfg.lambda_jr).is_finite() || !grads.all_finite() {
            return Err(Error::Diverged { iter: t, loss: loss.supervised, reg: loss.reg.unwrap_or(0.0) });
        }
        let lr = cfg.lr_at(t);
        sgd_step(&mut model, &mut velocity, &grads, lr, cfg.momentum, cfg.lambda_wd);

        let done = t + 1;
        if done % cfg.log_every == 0 || done == cfg.total_iters {
            let (test_acc, jf_norm) = match (&test, &x_test) {
                (Some(ds), Some(xt)) => (Some(accuracy(&model, xt, ds.labels())?), Some(mean_jf_norm(&model, xt)?)),
                _ => (None, None),
            };
            history.records.push(HistoryRecord { iteration: done, loss: loss.supervised, reg_value: loss.reg, test_acc, jf_norm, lr });
        }
    }
    Ok((model, history))
}
