//! Command-line driver: simulate datasets, train generators, emit bootstrap
//! draws (from the generator or the exact solvers), and post-process them
//! into confidence intervals, cross-validation curves, and mixture
//! posteriors.
//!
//! Every subcommand writes fixed-name artifacts into `--out-dir`, reruns are
//! byte-identical given the same config and seed (pass `--no-timestamp` to
//! drop the one timestamp comment line from CSV outputs), and any flag can
//! instead be supplied through a JSON run config via `--config`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::{Array1, Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use gms_core::error::invalid;
use gms_core::infer::{
    basic_ci, calibrated_ci, cv_curve, draw_alphas, draw_second_level, percentile_ci,
    solve_draws_generator, solve_draws_oracle, studentized_ci, CIMethod, CIResult, DrawMatrix,
};
use gms_core::model::{Dataset, Family, ModelSpec, Penalty};
use gms_core::net::{assemble_batch, Generator};
use gms_core::npmle::{
    em_stage2, predictive_density_curve, sample_posterior, train_stage1, write_density_curve_csv,
    MixtureGenConfig,
};
use gms_core::train::TrainConfig;
use gms_core::weights::{SubgroupMap, WeightLaw};
use gms_core::{designs, io, oracle, Error, Result};

#[derive(Parser)]
#[command(name = "gms", version, about = "Generator-based bootstrap and cross-validation")]
struct Cli {
    /// JSON run config supplying defaults for any flag left unset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; every randomized stage derives its stream from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Cap worker-thread parallelism (default: one thread per core).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Directory receiving all output artifacts (created if missing).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Suppress the timestamp comment line at the top of CSV outputs.
    #[arg(long, global = true)]
    no_timestamp: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a named dataset design into y.csv, x.csv and truth.json.
    Simulate {
        /// Design name; an unknown name lists the catalog.
        #[arg(long)]
        design: Option<String>,
    },
    /// Train a generator; writes params.bin and train_trace.csv.
    Train(TrainArgs),
    /// Forward-pass bootstrap draws from trained parameters; writes
    /// draws.csv, estimate.csv and (with --c) second_draws.csv.
    Generate(GenerateArgs),
    /// Solve bootstrap draws exactly with the per-family solvers; same
    /// artifacts as generate.
    Oracle(OracleArgs),
    /// Confidence intervals from draw files; writes ci_<method>.{csv,json}.
    Ci(CiArgs),
    /// Bootstrapped K-fold cross-validation curve over a lambda grid;
    /// writes cv_curve.csv and cv.json.
    Cv(CvArgs),
    /// Nonparametric mixture pipeline: stage-one training, EM reweighting,
    /// posterior draws, predictive density, per-observation means.
    Npmle(NpmleArgs),
}

/// Defaults file for `--config`: any subset of these fields may be present;
/// command-line flags win over config values. A `command` field, when set,
/// must match the invoked subcommand.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    command: Option<String>,
    family: Option<String>,
    penalty: Option<String>,
    weight_law: Option<String>,
    train: Option<TrainConfig>,
    y: Option<PathBuf>,
    x: Option<PathBuf>,
    params: Option<PathBuf>,
    draws: Option<PathBuf>,
    second_draws: Option<PathBuf>,
    estimate: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Response CSV (one column).
    #[arg(long)]
    y: Option<PathBuf>,
    /// Covariate CSV.
    #[arg(long)]
    x: Option<PathBuf>,
    /// Model family: linear, logistic, quantile.
    #[arg(long)]
    family: Option<String>,
    /// Penalty for linear models: none, l1, l2.
    #[arg(long)]
    penalty: Option<String>,
    /// Weight subgroups S (input dimension of the generator).
    #[arg(long)]
    s: Option<usize>,
    /// Training iterations.
    #[arg(long)]
    iterations: Option<usize>,
    /// Weight/tuning draws per iteration.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    /// Network structure: wm (weight-multiplicative) or simple.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Weight law: dirichlet, multinomial, double, iterated:D, cv:K, cv_boot:K.
    #[arg(long)]
    weight_law: Option<String>,
    /// Comma-separated lambda candidates (penalized models).
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Vec<f64>,
    /// Comma-separated eta candidates (quantile models).
    #[arg(long, value_delimiter = ',')]
    eta_grid: Vec<f64>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Trained parameter file from `gms train`.
    #[arg(long)]
    params: Option<PathBuf>,
    /// First-level draw count B.
    #[arg(long, default_value_t = 1000)]
    b: usize,
    /// Second-level draws per parent; enables the double bootstrap.
    #[arg(long)]
    c: Option<usize>,
    /// Weight law for the draws (defaults to dirichlet, or double with --c).
    #[arg(long)]
    weight_law: Option<String>,
    /// Penalty level fed to the generator's lambda input.
    #[arg(long)]
    lambda: Option<f64>,
    /// Quantile level fed to the generator's eta input.
    #[arg(long)]
    eta: Option<f64>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    y: Option<PathBuf>,
    #[arg(long)]
    x: Option<PathBuf>,
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    penalty: Option<String>,
    /// Weight subgroups S (default: one group per observation).
    #[arg(long)]
    s: Option<usize>,
    /// First-level draw count B.
    #[arg(long, default_value_t = 1000)]
    b: usize,
    /// Second-level draws per parent; enables the double bootstrap.
    #[arg(long)]
    c: Option<usize>,
    #[arg(long)]
    weight_law: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
}

#[derive(Args)]
struct CiArgs {
    /// First-level draw CSV.
    #[arg(long)]
    draws: Option<PathBuf>,
    /// Second-level draw CSV (calibrated and studentized intervals).
    #[arg(long)]
    second_draws: Option<PathBuf>,
    /// Full-data estimate CSV (one column).
    #[arg(long)]
    estimate: Option<PathBuf>,
    /// Comma-separated methods: percentile, basic, calibrated, studentized.
    #[arg(long, value_delimiter = ',', default_values_t = [String::from("percentile"), String::from("basic")])]
    methods: Vec<String>,
    /// Two-sided coverage level.
    #[arg(long, default_value_t = 0.95)]
    level: f64,
}

#[derive(Args)]
struct CvArgs {
    #[arg(long)]
    y: Option<PathBuf>,
    #[arg(long)]
    x: Option<PathBuf>,
    /// Penalty being tuned: l1 or l2 (family is linear).
    #[arg(long)]
    penalty: Option<String>,
    /// Comma-separated lambda grid.
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Vec<f64>,
    /// Number of folds K.
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Bootstrap draws of the CV curve.
    #[arg(long, default_value_t = 100)]
    b: usize,
    /// Weight subgroups S (default: one group per observation).
    #[arg(long)]
    s: Option<usize>,
    /// Trained parameter file; when present the curve is evaluated through
    /// the generator instead of the exact solvers.
    #[arg(long)]
    params: Option<PathBuf>,
}

#[derive(Args)]
struct NpmleArgs {
    #[arg(long)]
    y: Option<PathBuf>,
    /// Covariate CSV (scalar-covariate Gaussian mixtures).
    #[arg(long)]
    x: Option<PathBuf>,
    /// Mixture family: npmle_gaussian[:sigma], npmle_poisson,
    /// npmle_binomial[:trials], npmle_gamma[:shape].
    #[arg(long)]
    family: Option<String>,
    /// Candidate component rows emitted per forward pass.
    #[arg(long, default_value_t = 100)]
    q: usize,
    /// Latent input dimension.
    #[arg(long, default_value_t = 1)]
    z_dim: usize,
    /// Latent draws per training step.
    #[arg(long, default_value_t = 100)]
    latent_draws: usize,
    /// Weight draws per training step.
    #[arg(long, default_value_t = 100)]
    weight_draws: usize,
    /// Weight subgroups S (default: one group per observation).
    #[arg(long)]
    s: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    weight_law: Option<String>,
    /// Posterior draws to sample after reweighting.
    #[arg(long, default_value_t = 1000)]
    posterior_draws: usize,
    /// EM stopping tolerance on the mixture probabilities.
    #[arg(long, default_value_t = 1e-3)]
    em_tol: f64,
    /// Points on the predictive density grid (continuous families).
    #[arg(long, default_value_t = 201)]
    grid_count: usize,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GMS_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        // 2: bad config or inputs; 3: the numbers themselves failed.
        let code = match e {
            Error::Numeric(_) => 3,
            _ => 2,
        };
        std::process::exit(code);
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(invalid("--threads must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| invalid(format!("thread pool: {e}")))?;
    }
    let cfg: RunConfig = match &cli.config {
        Some(path) => io::read_json(path)?,
        None => RunConfig::default(),
    };
    if let Some(expected) = &cfg.command {
        let actual = match &cli.command {
            Command::Simulate { .. } => "simulate",
            Command::Train(_) => "train",
            Command::Generate(_) => "generate",
            Command::Oracle(_) => "oracle",
            Command::Ci(_) => "ci",
            Command::Cv(_) => "cv",
            Command::Npmle(_) => "npmle",
        };
        if expected != actual {
            return Err(invalid(format!(
                "config is for command '{expected}', invoked '{actual}'"
            )));
        }
    }
    let out = Out::new(&cli, &cfg)?;
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    match cli.command {
        Command::Simulate { design } => {
            let design = design.ok_or_else(|| invalid("missing --design"))?;
            cmd_simulate(&design, seed, &out)
        }
        Command::Train(args) => cmd_train(args, &cfg, seed, &out),
        Command::Generate(args) => cmd_generate(args, &cfg, seed, &out),
        Command::Oracle(args) => cmd_oracle(args, &cfg, seed, &out),
        Command::Ci(args) => cmd_ci(args, &cfg, &out),
        Command::Cv(args) => cmd_cv(args, &cfg, seed, &out),
        Command::Npmle(args) => cmd_npmle(args, &cfg, seed, &out),
    }
}

/// Output directory plus the timestamp policy for CSV artifacts.
struct Out {
    dir: PathBuf,
    timestamp: bool,
}

impl Out {
    fn new(cli: &Cli, cfg: &RunConfig) -> Result<Self> {
        let dir = cli
            .out_dir
            .clone()
            .or_else(|| cfg.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir, timestamp: !cli.no_timestamp })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Prepend the timestamp comment line (unless suppressed) and announce
    /// the artifact. CSV readers in this workspace skip `#` lines.
    fn finish_csv(&self, path: &Path) -> Result<()> {
        if self.timestamp {
            let secs = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            let mut stamped = format!("# generated {secs}\n").into_bytes();
            stamped.extend(std::fs::read(path)?);
            std::fs::write(path, stamped)?;
        }
        println!("wrote {}", path.display());
        Ok(())
    }

    fn finish(&self, path: &Path) {
        println!("wrote {}", path.display());
    }
}

fn pick<T: Clone>(flag: Option<T>, cfg: Option<&T>, what: &str) -> Result<T> {
    flag.or_else(|| cfg.cloned())
        .ok_or_else(|| invalid(format!("missing {what}: pass the flag or set it in --config")))
}

fn load_data(
    y: Option<PathBuf>,
    x: Option<PathBuf>,
    cfg: &RunConfig,
) -> Result<Dataset> {
    let y_path = pick(y, cfg.y.as_ref(), "response file (--y)")?;
    let x_path = x.or_else(|| cfg.x.clone());
    io::read_dataset(&y_path, x_path.as_deref())
}

fn parse_spec(
    family: Option<String>,
    penalty: Option<String>,
    cfg: &RunConfig,
) -> Result<ModelSpec> {
    let family: Family = pick(family, cfg.family.as_ref(), "model family (--family)")?.parse()?;
    let penalty: Penalty = match penalty.or_else(|| cfg.penalty.clone()) {
        Some(s) => s.parse()?,
        None => Penalty::None,
    };
    ModelSpec::new(family, penalty)
}

fn parse_law(flag: Option<String>, cfg: &RunConfig, default: WeightLaw) -> Result<WeightLaw> {
    match flag.or_else(|| cfg.weight_law.clone()) {
        Some(s) => s.parse(),
        None => Ok(default),
    }
}

fn cmd_simulate(design: &str, seed: u64, out: &Out) -> Result<()> {
    let sim = designs::simulate(design, seed)?;
    let y_path = out.path("y.csv");
    io::write_vector_csv(&y_path, "y", sim.data.y())?;
    out.finish_csv(&y_path)?;
    if let Some(x) = sim.data.x() {
        let x_path = out.path("x.csv");
        io::write_matrix_csv(&x_path, "x", x.view())?;
        out.finish_csv(&x_path)?;
    }
    let truth_path = out.path("truth.json");
    io::write_json(&truth_path, &sim.truth)?;
    out.finish(&truth_path);
    Ok(())
}

fn cmd_train(args: TrainArgs, cfg: &RunConfig, seed: u64, out: &Out) -> Result<()> {
    let data = load_data(args.y, args.x, cfg)?;
    let spec = parse_spec(args.family, args.penalty, cfg)?;
    let mut tc = cfg.train.clone().unwrap_or_default();
    tc.seed = seed;
    if let Some(s) = args.s {
        tc.s = s;
    }
    if let Some(t) = args.iterations {
        tc.t = t;
    }
    if let Some(m) = args.batch {
        tc.m = m;
    }
    if let Some(h) = args.hidden {
        tc.hidden = h;
    }
    if let Some(d) = args.depth {
        tc.depth = d;
    }
    if let Some(v) = &args.variant {
        tc.variant = v.parse()?;
    }
    if let Some(lr) = args.learning_rate {
        tc.learning_rate = lr;
    }
    if let Some(law) = args.weight_law.clone().or_else(|| cfg.weight_law.clone()) {
        tc.weight_law = law.parse()?;
    }
    if !args.lambda_grid.is_empty() {
        tc.lambda_candidates = Some(args.lambda_grid);
    }
    if !args.eta_grid.is_empty() {
        tc.eta_candidates = Some(args.eta_grid);
    }
    let map = SubgroupMap::new(data.n(), tc.s, seed)?;
    let (gen, report) = gms_core::train::train(&tc, &spec, &data, &map)?;
    let params_path = cfg.params.clone().unwrap_or_else(|| out.path("params.bin"));
    gen.save(&params_path)?;
    out.finish(&params_path);
    let trace_path = out.path("train_trace.csv");
    report.write_csv(&trace_path)?;
    out.finish_csv(&trace_path)?;
    println!(
        "final loss {:.6e} after {} iterations",
        report.final_loss, report.iterations_run
    );
    Ok(())
}

fn cmd_generate(args: GenerateArgs, cfg: &RunConfig, seed: u64, out: &Out) -> Result<()> {
    let params = pick(args.params, cfg.params.as_ref(), "trained parameters (--params)")?;
    let gen = Generator::load(&params)?;
    let s = gen.arch().alpha_dim;
    let default_law = if args.c.is_some() {
        WeightLaw::DoubleDirichlet
    } else {
        WeightLaw::Dirichlet
    };
    let law = parse_law(args.weight_law, cfg, default_law)?;
    let (alphas, parents) = draw_alphas(&law, s, args.b, seed)?;
    let values = solve_draws_generator(&gen, alphas.view(), args.lambda, args.eta)?;
    let theta_hat = unit_forward(&gen, s, args.lambda, args.eta)?;
    write_draw_artifacts(out, values, theta_hat.clone(), None)?;
    if let Some(c) = args.c {
        let (alphas2, idx) = draw_second_level(&parents, c, seed)?;
        let values2 = solve_draws_generator(&gen, alphas2.view(), args.lambda, args.eta)?;
        write_second_level(out, values2, theta_hat, idx)?;
    }
    Ok(())
}

/// Generator output at unit weights: the plug-in full-data estimate.
fn unit_forward(
    gen: &Generator,
    s: usize,
    lambda: Option<f64>,
    eta: Option<f64>,
) -> Result<Array1<f64>> {
    let ones = Array2::ones((1, s));
    let out = solve_draws_generator(gen, ones.view(), lambda, eta)?;
    Ok(out.row(0).to_owned())
}

fn write_draw_artifacts(
    out: &Out,
    values: Array2<f64>,
    theta_hat: Array1<f64>,
    name: Option<&str>,
) -> Result<()> {
    let draws = DrawMatrix::single(values, theta_hat.clone())?;
    let draws_path = out.path(name.unwrap_or("draws.csv"));
    draws.write_csv(&draws_path)?;
    out.finish_csv(&draws_path)?;
    let est_path = out.path("estimate.csv");
    io::write_vector_csv(&est_path, "estimate", theta_hat.view())?;
    out.finish_csv(&est_path)?;
    Ok(())
}

fn write_second_level(
    out: &Out,
    values: Array2<f64>,
    theta_hat: Array1<f64>,
    parents: Vec<usize>,
) -> Result<()> {
    let draws = DrawMatrix::second_level(values, theta_hat, parents)?;
    let path = out.path("second_draws.csv");
    draws.write_csv(&path)?;
    out.finish_csv(&path)?;
    Ok(())
}

fn cmd_oracle(args: OracleArgs, cfg: &RunConfig, seed: u64, out: &Out) -> Result<()> {
    let data = load_data(args.y, args.x, cfg)?;
    let spec = parse_spec(args.family, args.penalty, cfg)?;
    let s = args.s.unwrap_or(data.n());
    let map = SubgroupMap::new(data.n(), s, seed)?;
    let lambda = required_lambda(&spec, args.lambda)?;
    let eta = required_eta(&spec, args.eta)?;
    let default_law = if args.c.is_some() {
        WeightLaw::DoubleDirichlet
    } else {
        WeightLaw::Dirichlet
    };
    let law = parse_law(args.weight_law, cfg, default_law)?;
    let (alphas, parents) = draw_alphas(&law, s, args.b, seed)?;
    let values = solve_draws_oracle(&spec, &data, &map, alphas.view(), lambda, eta)?;
    let unit = vec![1.0; data.n()];
    let theta_hat = oracle::solve(&spec, &data, &unit, lambda, eta)?.theta;
    write_draw_artifacts(out, values, theta_hat.clone(), None)?;
    if let Some(c) = args.c {
        let (alphas2, idx) = draw_second_level(&parents, c, seed)?;
        let values2 = solve_draws_oracle(&spec, &data, &map, alphas2.view(), lambda, eta)?;
        write_second_level(out, values2, theta_hat, idx)?;
    }
    Ok(())
}

fn required_lambda(spec: &ModelSpec, lambda: Option<f64>) -> Result<f64> {
    if spec.penalty == Penalty::None {
        Ok(lambda.unwrap_or(0.0))
    } else {
        lambda.ok_or_else(|| invalid("penalized model requires --lambda"))
    }
}

fn required_eta(spec: &ModelSpec, eta: Option<f64>) -> Result<Option<f64>> {
    if spec.family.requires_eta() && eta.is_none() {
        return Err(invalid("quantile family requires --eta"));
    }
    Ok(eta)
}

fn cmd_ci(args: CiArgs, cfg: &RunConfig, out: &Out) -> Result<()> {
    let estimate_path = pick(args.estimate, cfg.estimate.as_ref(), "estimate file (--estimate)")?;
    let theta_hat = io::read_vector_csv(&estimate_path)?;
    let draws_path = pick(args.draws, cfg.draws.as_ref(), "draw file (--draws)")?;
    let first = DrawMatrix::read_csv(&draws_path, theta_hat.clone())?;
    let second_path = args.second_draws.or_else(|| cfg.second_draws.clone());
    let second = second_path
        .map(|p| DrawMatrix::read_csv(&p, theta_hat.clone()))
        .transpose()?;
    for name in &args.methods {
        let method: CIMethod = name.parse()?;
        let result: CIResult = match method {
            CIMethod::Percentile => percentile_ci(&first, args.level)?,
            CIMethod::Basic => basic_ci(&first, args.level)?,
            CIMethod::Calibrated | CIMethod::Studentized => {
                let second = second.as_ref().ok_or_else(|| {
                    invalid(format!("{method} interval needs --second-draws"))
                })?;
                match method {
                    CIMethod::Calibrated => calibrated_ci(&first, second, args.level)?,
                    _ => studentized_ci(&first, second, args.level)?,
                }
            }
        };
        let csv_path = out.path(&format!("ci_{method}.csv"));
        result.write_csv(&csv_path)?;
        out.finish_csv(&csv_path)?;
        let json_path = out.path(&format!("ci_{method}.json"));
        result.write_json(&json_path)?;
        out.finish(&json_path);
    }
    Ok(())
}

fn cmd_cv(args: CvArgs, cfg: &RunConfig, seed: u64, out: &Out) -> Result<()> {
    let data = load_data(args.y, args.x, cfg)?;
    let penalty: Penalty =
        pick(args.penalty, cfg.penalty.as_ref(), "penalty to tune (--penalty)")?.parse()?;
    if penalty == Penalty::None {
        return Err(invalid("cross-validation tunes a penalty; pass --penalty l1 or l2"));
    }
    let spec = ModelSpec::new(Family::Linear, penalty)?;
    if args.lambda_grid.is_empty() {
        return Err(invalid("missing --lambda-grid"));
    }
    let s = args.s.unwrap_or(data.n());
    let map = SubgroupMap::new(data.n(), s, seed)?;
    let gen = args
        .params
        .or_else(|| cfg.params.clone())
        .map(|p| Generator::load(&p))
        .transpose()?;
    let grid = &args.lambda_grid;
    let (b, k_folds, l, p) = (
        args.b,
        args.folds,
        grid.len(),
        data.x_required()?.ncols(),
    );
    if b == 0 || k_folds < 2 {
        return Err(invalid("need --b >= 1 and --folds >= 2"));
    }
    let boot_law = WeightLaw::CvFold { k_folds, fold: 0, bootstrapped: true };
    let plain_law = WeightLaw::CvFold { k_folds, fold: 0, bootstrapped: false };
    let mut rng = gms_core::rng::stream(seed, 0xcf01);
    let mut solutions = Array4::zeros((b, k_folds, l, p));
    let mut plain = Array3::zeros((k_folds, l, p));
    for k in 0..k_folds {
        let plain_alpha =
            gms_core::weights::sample_weights_with(&plain_law.with_fold(k), s, &mut rng)?.alpha;
        let row = solve_fold(&spec, &data, &map, &gen, &plain_alpha, grid)?;
        plain.index_axis_mut(ndarray::Axis(0), k).assign(&row);
        for bi in 0..b {
            let alpha =
                gms_core::weights::sample_weights_with(&boot_law.with_fold(k), s, &mut rng)?.alpha;
            let row = solve_fold(&spec, &data, &map, &gen, &alpha, grid)?;
            solutions
                .index_axis_mut(ndarray::Axis(0), bi)
                .index_axis_mut(ndarray::Axis(0), k)
                .assign(&row);
        }
    }
    let result = cv_curve(solutions.view(), Some(plain.view()), &spec, &data, &map, grid, None)?;
    let curve_path = out.path("cv_curve.csv");
    result.write_curve_csv(&curve_path)?;
    out.finish_csv(&curve_path)?;
    let json_path = out.path("cv.json");
    result.write_json(&json_path)?;
    out.finish(&json_path);
    println!(
        "minimizer mode lambda {:.6e}",
        grid[result.minimizer_mode()]
    );
    Ok(())
}

/// Solutions for one weight vector across the lambda grid: exact solves, or
/// generator forward passes when trained parameters were supplied.
fn solve_fold(
    spec: &ModelSpec,
    data: &Dataset,
    map: &SubgroupMap,
    gen: &Option<Generator>,
    alpha: &[f64],
    grid: &[f64],
) -> Result<Array2<f64>> {
    match gen {
        Some(gen) => {
            let alphas = Array2::from_shape_fn((grid.len(), alpha.len()), |(_, j)| alpha[j]);
            let inputs = assemble_batch(gen.arch(), alphas.view(), Some(grid), None)?;
            let (out, _) = gen.forward_batch(inputs.view())?;
            Ok(out)
        }
        None => {
            let w = map.expand(alpha)?;
            let p = data.x_required()?.ncols();
            let mut out = Array2::zeros((grid.len(), p));
            for (li, &lambda) in grid.iter().enumerate() {
                let sol = oracle::solve(spec, data, &w, lambda, None)?;
                out.row_mut(li).assign(&sol.theta);
            }
            Ok(out)
        }
    }
}

fn cmd_npmle(args: NpmleArgs, cfg: &RunConfig, seed: u64, out: &Out) -> Result<()> {
    let data = load_data(args.y, args.x, cfg)?;
    let family: Family =
        pick(args.family, cfg.family.as_ref(), "mixture family (--family)")?.parse()?;
    let mut mix = MixtureGenConfig::new(family.clone())?;
    mix.q = args.q;
    mix.z_dim = args.z_dim;
    mix.latent_draws = args.latent_draws;
    mix.weight_draws = args.weight_draws;
    let mut tc = cfg.train.clone().unwrap_or_default();
    tc.seed = seed;
    if let Some(s) = args.s {
        tc.s = s;
    } else if cfg.train.is_none() {
        tc.s = data.n();
    }
    if let Some(t) = args.iterations {
        tc.t = t;
    }
    if let Some(lr) = args.learning_rate {
        tc.learning_rate = lr;
    }
    if let Some(h) = args.hidden {
        tc.hidden = h;
    }
    if let Some(d) = args.depth {
        tc.depth = d;
    }
    if let Some(law) = args.weight_law.clone().or_else(|| cfg.weight_law.clone()) {
        tc.weight_law = law.parse()?;
    }
    let map = SubgroupMap::new(data.n(), tc.s, seed)?;
    let (gen, report) = train_stage1(&mix, &data, &map, &tc)?;
    let params_path = cfg.params.clone().unwrap_or_else(|| out.path("mixture_params.bin"));
    gen.save(&params_path)?;
    out.finish(&params_path);
    let trace_path = out.path("train_trace.csv");
    report.write_csv(&trace_path)?;
    out.finish_csv(&trace_path)?;

    let em = em_stage2(&gen, &mix, &data, &tc.weight_law, args.em_tol, seed)?;
    let tau_path = out.path("tau.csv");
    io::write_vector_csv(&tau_path, "tau", em.tau.view())?;
    out.finish_csv(&tau_path)?;
    let em_path = out.path("em.json");
    io::write_json(
        &em_path,
        &serde_json::json!({
            "iterations": em.iterations,
            "converged": em.converged,
            "loglik_trace": em.loglik_trace,
        }),
    )?;
    out.finish(&em_path);

    let posterior =
        sample_posterior(&gen, &mix, em.tau.view(), &tc.weight_law, args.posterior_draws, seed)?;
    let draws_path = out.path("posterior_draws.csv");
    posterior.write_draws_csv(&draws_path)?;
    out.finish_csv(&draws_path)?;

    let grid = density_grid(&family, &data, args.grid_count);
    let curve = predictive_density_curve(&posterior, &grid)?;
    let density_path = out.path("density.csv");
    write_density_curve_csv(&density_path, &curve)?;
    out.finish_csv(&density_path)?;

    let means = gms_core::npmle::posterior_mean_per_observation(&posterior, &data)?;
    let means_path = out.path("posterior_means.csv");
    io::write_vector_csv(&means_path, "posterior_mean", means.view())?;
    out.finish_csv(&means_path)?;
    Ok(())
}

/// Evaluation grid for the predictive density: a fine mesh for continuous
/// families, the integer support for count families.
fn density_grid(family: &Family, data: &Dataset, count: usize) -> Vec<f64> {
    let y = data.y();
    let lo = y.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    match family {
        Family::MixturePoisson => (0..=(hi as usize + 2)).map(|k| k as f64).collect(),
        Family::MixtureBinomial { trials } => (0..=*trials).map(|k| k as f64).collect(),
        Family::MixtureGamma { .. } => {
            let hi = hi * 1.2;
            (1..=count.max(2)).map(|i| hi * i as f64 / count.max(2) as f64).collect()
        }
        _ => {
            let pad = 0.1 * (hi - lo).max(1.0);
            Array1::linspace(lo - pad, hi + pad, count.max(2)).to_vec()
        }
    }
}
