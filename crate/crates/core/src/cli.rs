//! The `accel-dpmm` command line: `generate`, `run` and `eval`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::data::{generate_synthetic, load_counts, save_counts, Format, SyntheticSpec};
use crate::distributed::{run_distributed, Execution};
use crate::error::Error;
use crate::init::Initialization;
use crate::metrics::{emit_trace, feature_popularity, fmt_real, predictive_log_likelihood, Clock, MetricsSink};
use crate::model::{ClusterId, ClusterState, CountDataset, Theta};
use crate::serial::run_serial;
use crate::slots::RefreshMode;
use crate::state::{GlobalState, RunOutput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Serial collapsed sampler, empty features from the prior.
    Collapsed,
    /// Serial collapsed sampler, empty features from the data-driven kernel.
    CollapsedEmpirical,
    /// Parallel sampler without the accelerated stage.
    Uncollapsed,
    /// Parallel sampler, accelerated stage first.
    Accelerated,
}

impl Mode {
    pub fn is_serial(self) -> bool {
        matches!(self, Mode::Collapsed | Mode::CollapsedEmpirical)
    }
}

#[derive(Debug, Parser)]
#[command(name = "accel-dpmm", version, about = "Parallel inference for Dirichlet process mixtures of multinomials")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a synthetic train/test split from the model prior.
    Generate(GenerateArgs),
    /// Run a sampler and write its trace and final state.
    Run(RunArgs),
    /// Score saved features on a test set.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    pub dim: u64,
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    pub train: u64,
    #[arg(long, default_value_t = 100)]
    pub test: u64,
    #[arg(long, default_value_t = 1.0, value_parser = positive)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1.0, value_parser = positive)]
    pub gamma: f64,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u32).range(1..))]
    pub trials: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write train.bin and test.bin in the dense binary format.
    #[arg(long)]
    pub binary: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Replay the run described by a manifest.json; other run flags are ignored.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Accelerated)]
    pub mode: Mode,
    #[arg(long, required_unless_present = "manifest")]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    pub workers: u64,
    #[arg(long, default_value_t = 1000)]
    pub iters: usize,
    #[arg(long, default_value_t = 50)]
    pub accel_iters: usize,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    pub sync_every: u64,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    pub m: u64,
    #[arg(long, default_value_t = 0.9, value_parser = unit_interval)]
    pub rho: f64,
    #[arg(long, default_value_t = 1.0, value_parser = positive)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1.0, value_parser = positive)]
    pub gamma: f64,
    /// Keep the concentration fixed instead of resampling it at every sync.
    #[arg(long)]
    pub fixed_alpha: bool,
    #[arg(long, value_parser = positive)]
    pub max_seconds: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `wall` measures seconds; `logical` counts iterations so traces are reproducible.
    #[arg(long, value_enum, default_value_t = ClockArg::Wall)]
    pub clock: ClockArg,
    /// `single`, `random:K` or `kmeans:K`.
    #[arg(long, default_value = "single", value_parser = parse_init)]
    pub init: Initialization,
    /// Run workers one after another on the calling thread.
    #[arg(long)]
    pub sequential: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ClockArg {
    Wall,
    Logical,
}

impl From<ClockArg> for Clock {
    fn from(c: ClockArg) -> Self {
        match c {
            ClockArg::Wall => Clock::Wall,
            ClockArg::Logical => Clock::Logical,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// features.csv written by `run`.
    #[arg(long)]
    pub features: PathBuf,
    /// popularity.csv overriding the counts stored with the features.
    #[arg(long)]
    pub counts: Option<PathBuf>,
    #[arg(long)]
    pub test: PathBuf,
    /// Concentration; `run` records its final value in summary.json.
    #[arg(long, default_value_t = 1.0, value_parser = non_negative)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1.0, value_parser = positive)]
    pub gamma: f64,
}

fn parse_f64(s: &str) -> Result<f64, String> {
    s.parse::<f64>().map_err(|e| e.to_string())
}

fn positive(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{s} is not a positive number"))
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{s} is not a non-negative number"))
    }
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{s} is not in [0, 1]"))
    }
}

pub fn parse_init(s: &str) -> Result<Initialization, String> {
    let clusters = |k: &str| -> Result<usize, String> {
        match k.parse::<usize>() {
            Ok(k) if k > 0 => Ok(k),
            _ => Err(format!("bad cluster count '{k}'")),
        }
    };
    match s.split_once(':') {
        None if s == "single" => Ok(Initialization::SingleCluster),
        Some(("random", k)) => Ok(Initialization::Random { clusters: clusters(k)? }),
        Some(("kmeans", k)) => Ok(Initialization::KMeans { clusters: clusters(k)? }),
        _ => Err(format!("unknown initialization '{s}' (single, random:K, kmeans:K)")),
    }
}

/// Everything needed to repeat a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub run_id: String,
    pub version: String,
    pub mode: Mode,
    pub config: ModelConfig,
    pub train: PathBuf,
    pub test: Option<PathBuf>,
    pub init: Initialization,
    pub clock: Clock,
    pub max_seconds: Option<f64>,
}

impl RunManifest {
    /// Hex SHA-256 of the manifest with an empty id.
    pub fn compute_id(&self) -> String {
        let mut m = self.clone();
        m.run_id.clear();
        let bytes = serde_json::to_vec(&m).expect("manifest serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn from_args(a: &RunArgs) -> RunManifest {
        let mut config = ModelConfig {
            alpha: a.alpha,
            gamma: a.gamma,
            m: a.m as usize,
            rho: a.rho,
            sync_interval: a.sync_every as usize,
            n_workers: a.workers as usize,
            accel_iters: a.accel_iters,
            total_iters: a.iters,
            seed: a.seed,
            resample_alpha: !a.fixed_alpha,
            ..ModelConfig::default()
        };
        match a.mode {
            Mode::Collapsed | Mode::CollapsedEmpirical => {
                config.n_workers = 1;
                config.accel_iters = 0;
                config.resample_alpha = false;
            }
            Mode::Uncollapsed => config.accel_iters = 0,
            Mode::Accelerated => {}
        }
        let mut m = RunManifest {
            run_id: String::new(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            mode: a.mode,
            config,
            train: a.train.clone().unwrap_or_default(),
            test: a.test.clone(),
            init: a.init,
            clock: a.clock.into(),
            max_seconds: a.max_seconds,
        };
        m.run_id = m.compute_id();
        m
    }
}

/// Runs the sampler selected by `mode` on already loaded data.
pub fn run_mode(
    mode: Mode,
    train: &CountDataset,
    test: Option<&CountDataset>,
    config: &ModelConfig,
    init: Initialization,
    clock: Clock,
    max_seconds: Option<f64>,
    execution: Execution,
) -> crate::Result<RunOutput> {
    let sink = MetricsSink::new(test, config.gamma, clock).with_time_limit(max_seconds);
    match mode {
        Mode::Collapsed => run_serial(train, config, RefreshMode::Prior, init, sink),
        Mode::CollapsedEmpirical => run_serial(train, config, RefreshMode::EmpiricalExact, init, sink),
        Mode::Uncollapsed => {
            let config = ModelConfig { accel_iters: 0, ..config.clone() };
            run_distributed(train, &config, init, execution, sink)
        }
        Mode::Accelerated => run_distributed(train, config, init, execution, sink),
    }
}

/// A failure and the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidParameter(m) => CliError::usage(m),
            other => CliError { code: 1, message: other.to_string() },
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError { code: 1, message: e.to_string() }
    }
}

fn with_path<T>(path: &Path, r: crate::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| CliError { code: 1, message: format!("{}: {e}", path.display()) })
}

fn load(path: &Path) -> Result<CountDataset, CliError> {
    with_path(path, load_counts(path, Format::from_path(path)))
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<(), CliError> {
    let spec = SyntheticSpec {
        dim: a.dim as usize,
        n_train: a.train as usize,
        n_test: a.test as usize,
        alpha: a.alpha,
        gamma: a.gamma,
        trials: a.trials,
        seed: a.seed,
    };
    let s = generate_synthetic(&spec)?;
    fs::create_dir_all(&a.out)?;
    save_counts(&s.train, &a.out.join("train.csv"), Format::Csv)?;
    save_counts(&s.test, &a.out.join("test.csv"), Format::Csv)?;
    if a.binary {
        save_counts(&s.train, &a.out.join("train.bin"), Format::DenseBinary)?;
        save_counts(&s.test, &a.out.join("test.bin"), Format::DenseBinary)?;
    }
    let mut truth = BufWriter::new(File::create(a.out.join("truth.csv"))?);
    writeln!(truth, "observation_id,cluster_id")?;
    for (i, l) in s.truth.train_labels.iter().chain(&s.truth.test_labels).enumerate() {
        writeln!(truth, "{i},{l}")?;
    }
    truth.flush()?;
    let info = serde_json::json!({
        "spec": spec,
        "k_true": s.truth.k_true(),
        "k_train": s.truth.k_train(),
    });
    fs::write(a.out.join("generator.json"), serde_json::to_string_pretty(&info).unwrap())?;
    Ok(())
}

pub fn cmd_run(a: &RunArgs) -> Result<(), CliError> {
    let manifest = match &a.manifest {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError { code: 1, message: format!("{}: {e}", path.display()) })?;
            let m: RunManifest = serde_json::from_str(&text)
                .map_err(|e| CliError { code: 1, message: format!("{}: {e}", path.display()) })?;
            if m.run_id != m.compute_id() {
                return Err(CliError { code: 1, message: format!("{}: run id does not match contents", path.display()) });
            }
            m
        }
        None => RunManifest::from_args(a),
    };
    manifest.config.validate()?;
    let train = load(&manifest.train)?;
    let test = manifest.test.as_deref().map(load).transpose()?;
    if let Some(t) = &test {
        if t.dim() != train.dim() {
            return Err(CliError {
                code: 1,
                message: format!("test data has {} columns, training data {}", t.dim(), train.dim()),
            });
        }
    }
    let execution = if a.sequential { Execution::Sequential } else { Execution::Parallel };
    let out = run_mode(
        manifest.mode,
        &train,
        test.as_ref(),
        &manifest.config,
        manifest.init,
        manifest.clock,
        manifest.max_seconds,
        execution,
    )?;
    fs::create_dir_all(&a.out)?;
    write_outputs(&a.out, &manifest, &out)?;
    log::info!(
        "{} iterations, {} features, alpha {}",
        out.iterations,
        out.global.k_plus(),
        out.global.alpha
    );
    Ok(())
}

fn write_outputs(dir: &Path, manifest: &RunManifest, out: &RunOutput) -> Result<(), CliError> {
    emit_trace(&out.trace.records, &dir.join("metrics.csv"))?;

    let mut pop = BufWriter::new(File::create(dir.join("popularity.csv"))?);
    writeln!(pop, "cluster_id,count")?;
    for (id, n) in feature_popularity(&out.global) {
        writeln!(pop, "{id},{n}")?;
    }
    pop.flush()?;

    write_features(&out.global, &dir.join("features.csv"))?;

    let mut asg = BufWriter::new(File::create(dir.join("assignments.csv"))?);
    writeln!(asg, "observation_id,cluster_id")?;
    for (i, id) in out.assignments.iter().enumerate() {
        writeln!(asg, "{i},{id}")?;
    }
    asg.flush()?;

    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(manifest).unwrap())?;
    let last = out.trace.last();
    let summary = serde_json::json!({
        "run_id": manifest.run_id,
        "iterations": out.iterations,
        "k_plus": out.global.k_plus(),
        "alpha": out.global.alpha,
        "test_pred_ll": last.map(|r| r.test_pred_ll).filter(|v| v.is_finite()),
        "wall_seconds": last.map(|r| r.wall_seconds),
    });
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary).unwrap())?;
    Ok(())
}

/// One row per occupied feature: id, count, then the parameter vector.
pub fn write_features(global: &GlobalState, path: &Path) -> crate::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let dim = global.clusters.first().map_or(0, |c| c.theta.dim());
    let cols: Vec<String> = (0..dim).map(|j| format!("theta_{j}")).collect();
    writeln!(w, "cluster_id,count,{}", cols.join(","))?;
    for c in global.clusters.iter().filter(|c| c.count > 0) {
        let theta: Vec<String> = c.theta.probs().iter().map(|&p| fmt_real(p)).collect();
        writeln!(w, "{},{},{}", c.id, c.count, theta.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn bad_line(path: &Path, line: usize, what: &str) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: format!("line {line}: {what}"),
    }
}

/// Reads a file written by [`write_features`].
pub fn read_features(path: &Path) -> crate::Result<Vec<ClusterState>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut lines = reader.lines().enumerate();
    match lines.next() {
        Some((_, Ok(h))) if h.starts_with("cluster_id,count") => {}
        Some((_, Err(e))) => return Err(e.into()),
        _ => return Err(bad_line(path, 1, "missing header")),
    }
    for (n, line) in lines {
        let line = line?;
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 3 {
            return Err(bad_line(path, line_no, "expected id, count and at least one coordinate"));
        }
        let id = fields[0].parse().map_err(|_| bad_line(path, line_no, "bad cluster id"))?;
        let count = fields[1].parse().map_err(|_| bad_line(path, line_no, "bad count"))?;
        let probs = fields[2..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| bad_line(path, line_no, "bad coordinate"))?;
        let theta = Theta::new(probs).map_err(|e| bad_line(path, line_no, &e.to_string()))?;
        if out.first().is_some_and(|c: &ClusterState| c.theta.dim() != theta.dim()) {
            return Err(bad_line(path, line_no, "inconsistent dimension"));
        }
        let dim = theta.dim();
        out.push(ClusterState { id: ClusterId(id), theta, count, suffstats: vec![0; dim] });
    }
    Ok(out)
}

/// Reads a `cluster_id,count` file.
pub fn read_counts(path: &Path) -> crate::Result<Vec<(ClusterId, usize)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if n == 0 && line.starts_with("cluster_id") || line.trim().is_empty() {
            continue;
        }
        let (a, b) = line
            .split_once(',')
            .ok_or_else(|| bad_line(path, n + 1, "expected two fields"))?;
        let id = a.trim().parse().map_err(|_| bad_line(path, n + 1, "bad cluster id"))?;
        let count = b.trim().parse().map_err(|_| bad_line(path, n + 1, "bad count"))?;
        out.push((ClusterId(id), count));
    }
    Ok(out)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<f64, CliError> {
    let mut clusters = with_path(&a.features, read_features(&a.features))?;
    if let Some(path) = &a.counts {
        let counts = with_path(path, read_counts(path))?;
        for c in &mut clusters {
            c.count = counts.iter().find(|(id, _)| *id == c.id).map_or(0, |&(_, n)| n);
        }
    }
    let test = load(&a.test)?;
    let mut global = GlobalState::from_clusters(clusters, a.alpha);
    global.alpha = a.alpha;
    predictive_log_likelihood(&test, &global, a.gamma)
        .map_err(|e| CliError { code: 1, message: e.to_string() })
}

/// Parses arguments, runs the command and maps failures to exit codes:
/// 0 on success, 1 for data or runtime errors, 2 for usage errors.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Run(a) => cmd_run(a),
        Command::Eval(a) => cmd_eval(a).map(|v| println!("{}", fmt_real(v))),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
