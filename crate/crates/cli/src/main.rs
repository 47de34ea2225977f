mod run;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use jrlab::checkpoint;
use jrlab::config::{read_kv, render_kv, KeyValues};
use jrlab::data::Dataset;
use jrlab::robust::{self, AttackConfig, AttackKind};
use jrlab::selfcheck::{self, CheckOptions};
use jrlab::slice::{DecisionSlice, SliceBasis, SliceConfig};
use jrlab::train::{evaluate, train};
use jrlab::{Mlp, Stream, Tensor};

use run::RunConfig;

#[derive(Parser)]
#[command(name = "jrlab", version, about = "Jacobian-regularized MLP training and robustness analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes model.jrlb, history.csv and manifest.txt.
    Train(TrainArgs),
    /// Clean accuracy and mean ||J||_F of a checkpoint on the test split.
    Eval(EvalArgs),
    /// Noise curve or minimal-fooling-distance sweep for one attack.
    Attack(AttackArgs),
    /// Train one model per lambda_jr and seed, then run noise and PGD.
    Sweep(SweepArgs),
    /// Decision-cell cross section through a test point.
    Slice(SliceArgs),
    /// Run the gradient, estimator and equivalence property suites.
    Check(CheckArgs),
}

/// Every run-config key as a kebab-case flag.
#[derive(Args, Default)]
struct RunFlags {
    #[arg(long)]
    lambda_jr: Option<String>,
    #[arg(long)]
    lambda_wd: Option<String>,
    #[arg(long)]
    dropout: Option<String>,
    #[arg(long)]
    n_proj: Option<String>,
    #[arg(long)]
    eta0: Option<String>,
    #[arg(long)]
    quench_every: Option<String>,
    #[arg(long)]
    total_iters: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    momentum: Option<String>,
    #[arg(long)]
    adv_eps_max: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    samples_per_class: Option<String>,
    #[arg(long)]
    log_every: Option<String>,
    #[arg(long)]
    eval_points: Option<String>,
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    activation: Option<String>,
    /// auto, synthetic, mnist or mnist:<dir>.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    synthetic_train: Option<String>,
    #[arg(long)]
    synthetic_test: Option<String>,
    #[arg(long)]
    synthetic_seed: Option<String>,
}

impl RunFlags {
    fn pairs(&self) -> KeyValues {
        let all = [
            ("lambda_jr", &self.lambda_jr),
            ("lambda_wd", &self.lambda_wd),
            ("dropout", &self.dropout),
            ("n_proj", &self.n_proj),
            ("eta0", &self.eta0),
            ("quench_every", &self.quench_every),
            ("total_iters", &self.total_iters),
            ("batch_size", &self.batch_size),
            ("momentum", &self.momentum),
            ("adv_eps_max", &self.adv_eps_max),
            ("seed", &self.seed),
            ("samples_per_class", &self.samples_per_class),
            ("log_every", &self.log_every),
            ("eval_points", &self.eval_points),
            ("hidden", &self.hidden),
            ("activation", &self.activation),
            ("data", &self.data),
            ("synthetic_train", &self.synthetic_train),
            ("synthetic_test", &self.synthetic_test),
            ("synthetic_seed", &self.synthetic_seed),
        ];
        all.into_iter().filter_map(|(k, v)| v.clone().map(|v| (k.to_string(), v))).collect()
    }
}

/// Config file, then flags, then the data source pinned.
fn resolve_run(config: Option<&Path>, flags: &RunFlags) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = config {
        cfg.apply(&read_kv(p)?)?;
    }
    cfg.apply(&flags.pairs())?;
    cfg.train.validate()?;
    cfg.resolve_data();
    Ok(cfg)
}

#[derive(Args)]
struct TrainArgs {
    /// key = value file; a previous manifest.txt reproduces that run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
    #[command(flatten)]
    flags: RunFlags,
}

/// Where the test split comes from.
#[derive(Args)]
struct DataArgs {
    /// A training manifest whose data settings to reuse.
    #[arg(long)]
    run: Option<PathBuf>,
    /// auto, synthetic, mnist or mnist:<dir>; overrides the manifest.
    #[arg(long)]
    data: Option<String>,
}

impl DataArgs {
    fn test_set(&self) -> Result<Dataset> {
        let flags = RunFlags { data: self.data.clone(), ..RunFlags::default() };
        Ok(resolve_run(self.run.as_deref(), &flags)?.load_data()?.1)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Test points to use; 0 means all.
    #[arg(long, default_value_t = 0)]
    n_test: usize,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Attack key = value file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    pgd_step: Option<String>,
    #[arg(long)]
    linf_ball: Option<String>,
    #[arg(long)]
    pgd_max_iters: Option<String>,
    #[arg(long)]
    cw_lr: Option<String>,
    #[arg(long)]
    cw_c_init: Option<String>,
    #[arg(long)]
    cw_binary_steps: Option<String>,
    #[arg(long)]
    cw_max_iters: Option<String>,
    #[arg(long)]
    white_sigma0: Option<String>,
    #[arg(long)]
    white_sigma_max: Option<String>,
    #[arg(long)]
    white_bisect_steps: Option<String>,
    #[arg(long)]
    fgsm_eps_max: Option<String>,
    #[arg(long)]
    fgsm_tol: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Noise levels for an accuracy-vs-sigma curve (white noise only).
    #[arg(long, value_delimiter = ',')]
    sigmas: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1000)]
    n_test: usize,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "attack")]
    out_dir: PathBuf,
}

impl AttackArgs {
    fn config(&self) -> Result<AttackConfig> {
        let mut kv = match &self.config {
            Some(p) => read_kv(p)?,
            None => KeyValues::new(),
        };
        let flags = [
            ("kind", &self.kind),
            ("pgd_step", &self.pgd_step),
            ("linf_ball", &self.linf_ball),
            ("pgd_max_iters", &self.pgd_max_iters),
            ("cw_lr", &self.cw_lr),
            ("cw_c_init", &self.cw_c_init),
            ("cw_binary_steps", &self.cw_binary_steps),
            ("cw_max_iters", &self.cw_max_iters),
            ("white_sigma0", &self.white_sigma0),
            ("white_sigma_max", &self.white_sigma_max),
            ("white_bisect_steps", &self.white_bisect_steps),
            ("fgsm_eps_max", &self.fgsm_eps_max),
            ("fgsm_tol", &self.fgsm_tol),
            ("seed", &self.seed),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                kv.insert(k.to_string(), v.clone());
            }
        }
        Ok(AttackConfig::from_kv(&kv)?)
    }
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', required = true)]
    lambdas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.7,1")]
    sigmas: Vec<f64>,
    #[arg(long, default_value_t = 200)]
    n_test: usize,
    #[arg(long, default_value = "sweep")]
    out_dir: PathBuf,
    #[command(flatten)]
    flags: RunFlags,
}

#[derive(Args)]
struct SliceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Test point index.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// random or given.
    #[arg(long, default_value = "random")]
    mode: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Two comma-separated rows of direction components (given mode).
    #[arg(long)]
    basis_file: Option<PathBuf>,
    /// Two checkpoints whose FGSM directions at the point span the plane (given mode).
    #[arg(long, num_args = 2)]
    fgsm_from: Option<Vec<PathBuf>>,
    #[arg(long, default_value_t = 5.0)]
    extent: f64,
    #[arg(long, default_value_t = 51)]
    resolution: usize,
    #[arg(long, default_value_t = 20.0)]
    radius_max: f64,
    #[arg(long, default_value = "slice.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    /// Smaller suites for a fast smoke run.
    #[arg(long)]
    quick: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Mlp> {
    checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn check_fit(model: &Mlp, ds: &Dataset) -> Result<()> {
    if model.input_width() != ds.width() || model.output_width() != ds.classes() {
        bail!(
            "checkpoint expects {} inputs and {} classes, data has {} and {}",
            model.input_width(),
            model.output_width(),
            ds.width(),
            ds.classes()
        );
    }
    Ok(())
}

fn train_one(cfg: &RunConfig, out_dir: &Path) -> Result<(Mlp, Dataset)> {
    let (train_set, test_set) = cfg.load_data()?;
    let model = cfg.init_model(train_set.width(), train_set.classes())?;
    let (model, history) = train(model, &train_set, Some(&test_set), &cfg.train)?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    checkpoint::save(&model, &out_dir.join("model.jrlb"))?;
    write(&out_dir.join("history.csv"), &history.to_csv())?;
    write(&out_dir.join("manifest.txt"), &cfg.manifest())?;
    if let Some(last) = history.last() {
        println!(
            "trained {} iters on {} examples: loss {:.4} test acc {} ||J||_F {}",
            last.iteration,
            history.train_size,
            last.loss,
            last.test_acc.map_or("-".into(), |a| format!("{a:.2}%")),
            last.jf_norm.map_or("-".into(), |j| format!("{j:.4}"))
        );
    }
    Ok((model, test_set))
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = resolve_run(args.config.as_deref(), &args.flags)?;
    train_one(&cfg, &args.out_dir)?;
    println!("wrote {}", args.out_dir.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let test = args.data.test_set()?;
    check_fit(&model, &test)?;
    let e = evaluate(&model, &test, args.n_test)?;
    println!("accuracy {:.2}% mean ||J||_F {} over {} points", e.accuracy, e.jf_norm, e.n);
    if let Some(p) = &args.csv {
        write(p, &format!("n,accuracy,jf_norm\n{},{},{}\n", e.n, e.accuracy, e.jf_norm))?;
    }
    Ok(())
}

fn cmd_attack(args: &AttackArgs) -> Result<()> {
    let cfg = args.config()?;
    let model = load_checkpoint(&args.checkpoint)?;
    let test = args.data.test_set()?;
    check_fit(&model, &test)?;
    fs::create_dir_all(&args.out_dir)?;
    let mut manifest = render_kv(cfg.to_kv());
    let _ = writeln!(manifest, "n_test = {}", args.n_test);
    let curve = match &args.sigmas {
        Some(sigmas) => {
            if cfg.kind != AttackKind::White {
                bail!("--sigmas applies to kind = white only");
            }
            let _ = writeln!(manifest, "sigmas = {}", sigmas.iter().map(f64::to_string).collect::<Vec<_>>().join(","));
            robust::accuracy_under_noise(&model, &test, sigmas, args.n_test, &Stream::new(cfg.seed))?
        }
        None => {
            let points = robust::fooling_distances(&model, &test, &cfg, args.n_test)?;
            let mut csv = String::from("index,distance,censored\n");
            for (i, p) in points.iter().enumerate() {
                let _ = writeln!(csv, "{i},{},{}", p.distance, p.censored);
            }
            write(&args.out_dir.join("points.csv"), &csv)?;
            let median = robust::median_distance(&points);
            println!(
                "{} median fooling distance {} ({} of {} censored)",
                cfg.kind.name(),
                median.map_or("-".into(), |m| format!("{m:.4}")),
                points.iter().filter(|p| p.censored).count(),
                points.len()
            );
            robust::fooling_curve(&points, cfg.kind, cfg.seed)
        }
    };
    write(&args.out_dir.join("curve.csv"), &curve.to_csv())?;
    write(&args.out_dir.join("manifest.txt"), &manifest)?;
    println!("wrote {}", args.out_dir.display());
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    if args.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        bail!("lambda values must be finite and non-negative");
    }
    let base = resolve_run(args.config.as_deref(), &args.flags)?;
    fs::create_dir_all(&args.out_dir)?;
    let mut combined = String::from("lambda,seed,test_acc,jf_norm,curve,abscissa,value\n");
    for &lambda in &args.lambdas {
        let mut jf = Vec::new();
        for &seed in &args.seeds {
            let mut cfg = base.clone();
            cfg.train.lambda_jr = lambda;
            cfg.train.seed = seed;
            let dir = args.out_dir.join(format!("lambda_{lambda}_seed_{seed}"));
            let (model, test) = train_one(&cfg, &dir)?;
            let e = evaluate(&model, &test, args.n_test)?;
            jf.push(e.jf_norm);
            let noise = robust::accuracy_under_noise(&model, &test, &args.sigmas, args.n_test, &Stream::new(seed))?;
            let pgd = robust::fooling_distance_sweep(&model, &test, &AttackConfig { seed, ..AttackConfig::of_kind(AttackKind::Pgd) }, args.n_test)?;
            for (name, curve) in [("noise", &noise), ("pgd", &pgd)] {
                for (a, v) in curve.abscissa.iter().zip(&curve.values) {
                    let _ = writeln!(combined, "{lambda},{seed},{},{},{name},{a},{v}", e.accuracy, e.jf_norm);
                }
            }
        }
        println!("lambda {lambda}: mean ||J||_F {:.4}", jf.iter().sum::<f64>() / jf.len() as f64);
    }
    write(&args.out_dir.join("sweep.csv"), &combined)?;
    println!("wrote {}", args.out_dir.display());
    Ok(())
}

fn read_basis(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|v| v.trim().parse::<f64>()).collect::<Result<_, _>>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("parsing {}", path.display()))?;
    match <[Vec<f64>; 2]>::try_from(rows) {
        Ok([a, b]) => Ok((a, b)),
        Err(rows) => bail!("{} holds {} rows, expected 2", path.display(), rows.len()),
    }
}

fn cmd_slice(args: &SliceArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let test = args.data.test_set()?;
    check_fit(&model, &test)?;
    if args.index >= test.len() {
        bail!("index {} outside the {} test points", args.index, test.len());
    }
    let center = test.image(args.index).to_vec();
    let basis = match args.mode.as_str() {
        "random" => SliceBasis::Random { seed: args.seed },
        "given" => match (&args.basis_file, &args.fgsm_from) {
            (Some(p), None) => {
                let (a, b) = read_basis(p)?;
                SliceBasis::Given(a, b)
            }
            (None, Some(ckpts)) => {
                let x = Tensor::matrix(1, center.len(), center.clone())?;
                let label = [test.labels()[args.index]];
                let mut dirs = Vec::new();
                for p in ckpts {
                    let m = load_checkpoint(p)?;
                    dirs.push(robust::loss_gradient_raw(&m, test.preprocess, &x, &label)?.map(robust::sign).into_vec());
                }
                let b = dirs.pop().expect("two checkpoints");
                SliceBasis::Given(dirs.pop().expect("two checkpoints"), b)
            }
            _ => bail!("given mode needs exactly one of --basis-file or --fgsm-from"),
        },
        other => bail!("unknown slice mode {other:?}; expected random or given"),
    };
    let cfg = SliceConfig { extent: args.extent, resolution: args.resolution, radius_max: args.radius_max, ..SliceConfig::default() };
    let s = DecisionSlice::compute(&model, test.preprocess, &center, basis, &cfg)?;
    write(&args.out, &s.to_csv())?;
    println!(
        "center class {} boundary radius {}{}",
        s.center_class(),
        s.boundary_radius,
        if s.boundary_found { "" } else { " (none within radius_max)" }
    );
    Ok(())
}

fn cmd_check(args: &CheckArgs) -> Result<bool> {
    let opts = if args.quick {
        CheckOptions { models: 5, estimates: 4_000, jacobians: 12, variance_samples: 8_000, seed: args.seed }
    } else {
        CheckOptions { seed: args.seed, ..CheckOptions::default() }
    };
    let report = selfcheck::run_all(&opts)?;
    print!("{}", report.render());
    Ok(report.passed())
}

fn is_usage_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| matches!(c.downcast_ref::<jrlab::Error>(), Some(jrlab::Error::Config(_))))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Attack(a) => cmd_attack(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Slice(a) => cmd_slice(a),
        Command::Check(a) => match cmd_check(a) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("error: self-check failed");
                return ExitCode::FAILURE;
            }
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage_error(&e) { 2 } else { 1 })
        }
    }
}
