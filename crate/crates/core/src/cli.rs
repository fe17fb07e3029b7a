//! Command-line front end.
//!
//! Every command writes into one output directory together with a
//! `manifest.json` recording the tool version, seed, effective config and
//! SHA-256 fingerprints of its input files. Primary outputs (CSVs,
//! checkpoints) are byte-reproducible from the same inputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::{format_f64, CountsDistribution, Dataset, SplitSpec, SyntheticFamily};
use crate::error::{Error, Result};
use crate::metrics::{lipschitz_scatter, pearson, sorted_fraction, EmpiricalSample, MetricReport};
use crate::trainer::{
    sweep, train_until, Ablation, Checkpoint, ConditionalSampler, SweepGrid, TrainConfig, TrainProblem, TrainState,
};

pub const OUT_ENV: &str = "CONDOT_OUT";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const DENSITY_POINTS: usize = 512;
pub const DEFAULT_K: usize = 10_000;

#[derive(Debug, Parser)]
#[command(name = "condot", version, about = "Conditional distribution learning with entropic OT regularization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw train/val/test CSVs from a synthetic family with a known law.
    Synth(SynthArgs),
    /// Frequency-based train/val/test split of a CSV dataset.
    Split(SplitArgs),
    /// Train a generator/potential pair.
    Train(TrainArgs),
    /// Sample from a trained generator.
    Generate(GenerateArgs),
    /// Metric report and density dumps on the test split.
    Eval(EvalArgs),
    /// Grid search over hyperparameters by validation W2.
    Sweep(SweepArgs),
    /// Covariate distance vs response W2 over well-populated pairs.
    Scatter(ScatterArgs),
}

#[derive(Debug, Args)]
pub struct OutArg {
    /// Output directory (default: $CONDOT_OUT/<command>, else runs/<command>).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value = "heteroscedastic-sine")]
    pub family: String,
    #[arg(long, default_value_t = 1)]
    pub dim: usize,
    /// Number of training covariates.
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    /// Responses per training covariate, `k` or `low-high`.
    #[arg(long, default_value = "1-5")]
    pub counts: String,
    #[arg(long, default_value_t = 200)]
    pub val: usize,
    #[arg(long, default_value_t = 200)]
    pub test: usize,
    /// Responses drawn per validation/test covariate.
    #[arg(long, default_value_t = 1000)]
    pub eval_count: usize,
    /// Family parameter override, `key=value`; repeatable.
    #[arg(long = "param")]
    pub params: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "y")]
    pub response: String,
    #[arg(long, default_value_t = 30)]
    pub test_min_freq: usize,
    #[arg(long, default_value_t = 20)]
    pub val_min_freq: usize,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON config; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding `train.csv`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "y")]
    pub response: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long, value_enum)]
    pub ablation: Option<AblationArg>,
    /// Continue from a checkpoint written by an earlier (possibly interrupted) run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AblationArg {
    NoReg,
    NoSmooth,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::NoReg => Ablation::NoReg,
            AblationArg::NoSmooth => Ablation::NoSmooth,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    /// Independent uniform draws.
    Iid,
    /// `U_k = (k - 0.5) / K`.
    Grid,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated covariate.
    #[arg(long, conflicts_with = "x_file", required_unless_present = "x_file")]
    pub x: Option<String>,
    /// CSV with a header and one covariate per row.
    #[arg(long)]
    pub x_file: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long, value_enum, default_value = "iid")]
    pub mode: SampleMode,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory holding `test.csv`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "y")]
    pub response: String,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long, value_enum, default_value = "iid")]
    pub mode: SampleMode,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// e.g. `h=0.1,0.2,0.3;lambda=0.4,0.8`
    #[arg(long)]
    pub grid: String,
    /// Directory holding `train.csv` and `val.csv`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "y")]
    pub response: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct ScatterArgs {
    /// A CSV file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "y")]
    pub response: String,
    /// Only groups with more than this many responses take part.
    #[arg(long, default_value_t = 30)]
    pub min_count: usize,
    #[command(flatten)]
    pub out: OutArg,
}

/// Keeps freed training buffers on the heap instead of handing them back to
/// the OS after every step, which otherwise costs a page fault per touched
/// page on the next step. Process-wide; call once at startup.
pub fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only changes allocator thresholds.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}

/// Process exit status for an error.
///
/// | code | meaning |
/// |------|---------|
/// | 0 | success |
/// | 2 | command-line usage |
/// | 3 | invalid argument, dimension mismatch or config error |
/// | 4 | I/O, CSV, JSON or load failure |
/// | 5 | empty dataset or split |
/// | 6 | bad checkpoint |
/// | 7 | numerical failure (non-finite values, no convergence) |
/// | 8 | internal contract violation |
/// | 130 | interrupted (checkpoint written) |
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_) | Error::DimensionMismatch { .. } | Error::Config { .. } => 3,
        Error::Load { .. } | Error::Io(_) | Error::Json(_) | Error::Csv(_) => 4,
        Error::EmptyDataset(_) => 5,
        Error::Checkpoint(_) => 6,
        Error::NonFinite { .. } | Error::Convergence { .. } => 7,
        Error::Contract(_) => 8,
        Error::Interrupted(_) => 130,
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    /// SHA-256 of each input file, keyed by file name.
    pub fingerprints: BTreeMap<String, String>,
    /// Files written, relative to the output directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    fn new(command: &'static str) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed: None,
            config: serde_json::Value::Null,
            fingerprints: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    fn fingerprint(&mut self, path: &Path) -> Result<()> {
        let name = path
            .file_name()
            .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        self.fingerprints.insert(name, file_sha256(path)?);
        Ok(())
    }

    fn write(mut self, dir: &Path) -> Result<()> {
        self.outputs.sort();
        let text = serde_json::to_string_pretty(&self)?;
        fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn out_dir(arg: &OutArg, command: &str) -> Result<PathBuf> {
    let dir = match &arg.out {
        Some(p) => p.clone(),
        None => std::env::var_os(OUT_ENV)
            .map_or_else(|| PathBuf::from("runs"), PathBuf::from)
            .join(command),
    };
    fs::create_dir_all(&dir).map_err(|e| Error::Load {
        path: dir.clone(),
        reason: format!("cannot create output directory: {e}"),
    })?;
    Ok(dir)
}

fn split_file(dir: &Path, name: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(Error::Load {
            path,
            reason: format!("missing split `{name}` in data directory"),
        });
    }
    Ok(path)
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn parse_counts(text: &str) -> Result<CountsDistribution> {
    let bad = || Error::invalid(format!("counts `{text}` is not `k` or `low-high`"));
    match text.split_once('-') {
        Some((lo, hi)) => Ok(CountsDistribution::Uniform {
            low: lo.trim().parse().map_err(|_| bad())?,
            high: hi.trim().parse().map_err(|_| bad())?,
        }),
        None => Ok(CountsDistribution::Fixed {
            count: text.trim().parse().map_err(|_| bad())?,
        }),
    }
}

fn parse_covariate(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("covariate entry `{v}` is not a number")))
        })
        .collect()
}

fn load_covariates(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let row = record
            .iter()
            .map(|v| {
                v.parse::<f64>().map_err(|_| Error::Load {
                    path: path.to_path_buf(),
                    reason: format!("non-numeric covariate `{v}` on data row {}", line + 1),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset(format!("{} has no covariate rows", path.display())));
    }
    Ok(rows)
}

fn draw_samples(model: &ConditionalSampler<f64>, x: &[f64], k: usize, mode: SampleMode, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    match mode {
        SampleMode::Iid => model.sample_iid(x, k, rng),
        SampleMode::Grid => model.sample_grid(x, k),
    }
}

/// `1.06 sd n^(-1/5)`, with a small positive floor for constant samples.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len().max(1) as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = if var > 0.0 { var.sqrt() } else { 1e-3 * mean.abs().max(1.0) };
    1.06 * sd * n.powf(-0.2)
}

/// Gaussian KDE on a fixed grid using linear binning of the samples onto the
/// grid; the bandwidth follows Silverman's rule.
pub fn binned_kde(samples: &[f64], grid: &[f64]) -> Vec<f64> {
    let n = samples.len();
    let g = grid.len();
    if n == 0 || g == 0 {
        return vec![0.0; g];
    }
    let h = silverman_bandwidth(samples);
    let mut counts = vec![0.0; g];
    if g == 1 {
        counts[0] = n as f64;
    } else {
        let (lo, step) = (grid[0], (grid[g - 1] - grid[0]) / (g - 1) as f64);
        for &s in samples {
            let pos = ((s - lo) / step).clamp(0.0, (g - 1) as f64);
            let i = (pos.floor() as usize).min(g - 2);
            let frac = pos - i as f64;
            counts[i] += 1.0 - frac;
            counts[i + 1] += frac;
        }
    }
    let norm = 1.0 / (n as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    grid.iter()
        .map(|&y| {
            counts
                .iter()
                .zip(grid)
                .filter(|(&c, _)| c > 0.0)
                .map(|(&c, &gj)| {
                    let z = (y - gj) / h;
                    c * (-0.5 * z * z).exp()
                })
                .sum::<f64>()
                * norm
        })
        .collect()
}

/// Evenly spaced grid covering both samples plus three bandwidths.
pub fn density_grid(a: &[f64], b: &[f64], points: usize) -> Vec<f64> {
    let (lo, hi) = a
        .iter()
        .chain(b)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let pad = 3.0 * silverman_bandwidth(a).max(silverman_bandwidth(b));
    let (lo, hi) = (lo - pad, hi + pad);
    if points == 1 {
        return vec![(lo + hi) / 2.0];
    }
    (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect()
}

fn write_rows(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

fn covariate_names(d: usize) -> Vec<String> {
    (1..=d).map(|i| format!("x{i}")).collect()
}

pub fn run(cli: Cli, stop: Option<&AtomicBool>) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Split(a) => cmd_split(&a),
        Command::Train(a) => cmd_train(&a, stop),
        Command::Generate(a) => cmd_generate(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Scatter(a) => cmd_scatter(&a),
    }
}

#[derive(Serialize)]
struct OracleSpec<'a> {
    family: &'a SyntheticFamily,
    train_covariates: usize,
    train_counts: CountsDistribution,
    val_covariates: usize,
    test_covariates: usize,
    eval_count: usize,
    /// Generation streams of the train/val/test draws.
    streams: [u64; 3],
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut family = SyntheticFamily::by_name(&args.family, args.dim, args.seed)?;
    for p in &args.params {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("param `{p}` is not key=value")))?;
        let v: f64 = v.trim().parse().map_err(|_| Error::invalid(format!("param `{p}` has a non-numeric value")))?;
        family = family.with_param(k.trim(), v)?;
    }
    let counts = parse_counts(&args.counts)?;
    let fixed = CountsDistribution::Fixed { count: args.eval_count };
    let streams = [0, 1, 2];
    let train = family.generate(args.n, counts, streams[0])?;
    let val = family.generate(args.val, fixed, streams[1])?;
    let test = family.generate(args.test, fixed, streams[2])?;
    let seen: std::collections::HashSet<Vec<u64>> = train
        .groups
        .iter()
        .map(|g| g.x.iter().map(|v| v.to_bits()).collect())
        .collect();
    for g in val.groups.iter().chain(&test.groups) {
        if seen.contains(&g.x.iter().map(|v| v.to_bits()).collect::<Vec<_>>()) {
            return Err(Error::Contract("held-out covariate coincides with a training covariate".into()));
        }
    }

    let dir = out_dir(&args.out, "synth")?;
    let mut manifest = RunManifest::new("synth");
    manifest.seed = Some(args.seed);
    for (name, ds) in [("train.csv", &train), ("val.csv", &val), ("test.csv", &test)] {
        ds.save_csv(dir.join(name))?;
        manifest.outputs.push(name.into());
    }
    let oracle = OracleSpec {
        family: &family,
        train_covariates: args.n,
        train_counts: counts,
        val_covariates: args.val,
        test_covariates: args.test,
        eval_count: args.eval_count,
        streams,
    };
    let oracle_json = serde_json::to_value(&oracle)?;
    fs::write(dir.join("oracle.json"), serde_json::to_string_pretty(&oracle_json)? + "\n")?;
    manifest.outputs.push("oracle.json".into());
    manifest.config = oracle_json;
    manifest.write(&dir)?;
    println!(
        "wrote {} train / {} val / {} test covariates to {}",
        train.len(),
        val.len(),
        test.len(),
        dir.display()
    );
    Ok(())
}

pub fn cmd_split(args: &SplitArgs) -> Result<()> {
    let spec = SplitSpec {
        test_min_freq: args.test_min_freq,
        val_min_freq: args.val_min_freq,
    };
    spec.validate()?;
    let ds = Dataset::load_csv(&args.data, &args.response)?;
    let (train, val, test) = ds.split(&spec)?;
    let dir = out_dir(&args.out, "split")?;
    let mut manifest = RunManifest::new("split");
    manifest.fingerprint(&args.data)?;
    manifest.config = serde_json::to_value(spec)?;
    for (name, part) in [("train.csv", &train), ("val.csv", &val), ("test.csv", &test)] {
        part.save_csv(dir.join(name))?;
        manifest.outputs.push(name.into());
    }
    manifest.write(&dir)?;
    println!(
        "train {} / val {} / test {} distinct covariates",
        train.len(),
        val.len(),
        test.len()
    );
    Ok(())
}

pub fn cmd_train(args: &TrainArgs, stop: Option<&AtomicBool>) -> Result<()> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(n) = args.iterations {
        config.iterations = n;
    }
    if let Some(a) = args.ablation {
        Ablation::from(a).apply(&mut config);
    }
    config.validate()?;
    let train_path = split_file(&args.data, "train.csv")?;
    let train = Dataset::load_csv(&train_path, &args.response)?;
    let problem = TrainProblem::<f64>::new(&train, config.bandwidth)?;

    let mut state = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::<f64>::load(path)?;
            if ckpt.normalizer != problem.normalizer {
                return Err(Error::Checkpoint("checkpoint was trained on a different training split".into()));
            }
            ckpt.state
        }
        None => TrainState::init(problem.len(), problem.dim(), &config)?,
    };

    let dir = out_dir(&args.out, "train")?;
    let mut history = Vec::new();
    let result = train_until(&mut state, &problem, &config, stop, &mut history);
    if let Err(e) = &result {
        if !matches!(e, Error::Interrupted(_)) {
            return result;
        }
    }

    let ckpt = Checkpoint {
        state,
        normalizer: problem.normalizer.clone(),
        config: config.clone(),
    };
    ckpt.save(dir.join(CHECKPOINT_FILE))?;
    let hist_file = fs::File::create(dir.join("history.csv"))?;
    crate::trainer::write_history(&history, hist_file)?;
    fs::write(dir.join("config.json"), config.to_json()? + "\n")?;
    fs::write(dir.join("pairs.json"), problem.pairs.to_json()? + "\n")?;

    let mut manifest = RunManifest::new("train");
    manifest.seed = Some(config.seed);
    manifest.config = serde_json::to_value(&config)?;
    manifest.fingerprint(&train_path)?;
    if let Some(path) = &args.resume {
        manifest.fingerprint(path)?;
    }
    manifest.outputs = vec![
        CHECKPOINT_FILE.into(),
        "history.csv".into(),
        "config.json".into(),
        "pairs.json".into(),
    ];
    manifest.write(&dir)?;

    match result {
        Ok(()) => {
            if let Some(last) = history.last() {
                println!(
                    "iteration {}: fit {:.6} reg {:.6} loss {:.6}",
                    last.iteration, last.fit, last.reg, last.loss
                );
            }
            println!("checkpoint written to {}", dir.join(CHECKPOINT_FILE).display());
            Ok(())
        }
        Err(e) => {
            eprintln!("interrupted; checkpoint written to {}", dir.join(CHECKPOINT_FILE).display());
            Err(e)
        }
    }
}

#[derive(Serialize)]
struct MonotonicityReport {
    k: usize,
    per_covariate: Vec<f64>,
    mean: f64,
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let ckpt = Checkpoint::<f64>::load(&args.checkpoint)?;
    let model = ckpt.sampler();
    let covariates = match (&args.x, &args.x_file) {
        (Some(x), _) => vec![parse_covariate(x)?],
        (None, Some(path)) => load_covariates(path)?,
        (None, None) => return Err(Error::invalid("one of --x or --x-file is required")),
    };
    let d = model.normalizer.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let uniforms = crate::trainer::grid_uniforms(args.k);
    let dir = out_dir(&args.out, "generate")?;
    let mut header = vec!["covariate".to_string()];
    header.extend(covariate_names(d));
    header.extend(["u".to_string(), "y".to_string()]);
    let mut rows = Vec::new();
    let mut fractions = Vec::new();
    for (c, x) in covariates.iter().enumerate() {
        if x.len() != d {
            return Err(Error::DimensionMismatch {
                context: "generate covariate",
                expected: d,
                got: x.len(),
            });
        }
        let u: Vec<f64> = match args.mode {
            SampleMode::Grid if args.k > 0 => uniforms.clone(),
            _ => {
                if args.k == 0 {
                    return Err(Error::invalid("K must be at least 1"));
                }
                (0..args.k).map(|_| crate::trainer::open_uniform(&mut rng)).collect()
            }
        };
        let ys = model.sample(x, &u)?;
        if args.mode == SampleMode::Grid {
            fractions.push(sorted_fraction(&ys));
        }
        for (ui, yi) in u.iter().zip(&ys) {
            let mut row = vec![c.to_string()];
            row.extend(x.iter().map(|&v| format_f64(v)));
            row.push(format_f64(*ui));
            row.push(format_f64(*yi));
            rows.push(row);
        }
    }
    write_rows(&dir.join("samples.csv"), &header, rows)?;
    let mut manifest = RunManifest::new("generate");
    manifest.seed = Some(args.seed);
    manifest.config = serde_json::json!({ "k": args.k, "mode": args.mode });
    manifest.fingerprint(&args.checkpoint)?;
    if let Some(p) = &args.x_file {
        manifest.fingerprint(p)?;
    }
    manifest.outputs.push("samples.csv".into());
    if args.mode == SampleMode::Grid {
        let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
        let report = MonotonicityReport {
            k: args.k,
            per_covariate: fractions,
            mean,
        };
        fs::write(dir.join("monotonicity.json"), serde_json::to_string_pretty(&report)? + "\n")?;
        manifest.outputs.push("monotonicity.json".into());
        println!("sorted fraction (grid mode, K={}): {mean:.4}", args.k);
    }
    manifest.write(&dir)?;
    println!("wrote {} samples for {} covariate(s)", args.k * covariates.len(), covariates.len());
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::<f64>::load(&args.checkpoint)?;
    let model = ckpt.sampler();
    let test_path = split_file(&args.data, "test.csv")?;
    let test = Dataset::load_csv(&test_path, &args.response)?;
    if test.is_empty() {
        return Err(Error::EmptyDataset("test split has no covariates".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut entries = Vec::with_capacity(test.len());
    for g in &test.groups {
        let generated = draw_samples(&model, &g.x, args.k, args.mode, &mut rng)?;
        entries.push((
            g.x.clone(),
            EmpiricalSample::new(generated)?,
            EmpiricalSample::new(g.responses.clone())?,
        ));
    }
    let report = MetricReport::build(&entries)?;

    let dir = out_dir(&args.out, "eval")?;
    let density_dir = dir.join("density");
    fs::create_dir_all(&density_dir)?;
    let mut manifest = RunManifest::new("eval");
    manifest.seed = Some(args.seed);
    manifest.config = serde_json::json!({ "k": args.k, "mode": args.mode, "density_points": DENSITY_POINTS });
    manifest.fingerprint(&args.checkpoint)?;
    manifest.fingerprint(&test_path)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    manifest.outputs.push("report.json".into());
    for (i, (_, generated, reference)) in entries.iter().enumerate() {
        let grid = density_grid(generated.values(), reference.values(), DENSITY_POINTS);
        let gen_density = binned_kde(generated.values(), &grid);
        let ref_density = binned_kde(reference.values(), &grid);
        let name = format!("density/covariate_{i:04}.csv");
        write_rows(
            &dir.join(&name),
            &["y".into(), "generated".into(), "reference".into()],
            grid.iter()
                .zip(gen_density.iter().zip(&ref_density))
                .map(|(y, (g, r))| vec![format_f64(*y), format_f64(*g), format_f64(*r)]),
        )?;
        manifest.outputs.push(name);
    }
    manifest.write(&dir)?;
    let agg = &report.aggregate;
    println!(
        "W2^2 {:.6} ± {:.6}  W2 {:.6}  KS {:.6}  MSE {:.6}  ({} covariates)",
        agg.w2_squared.mean,
        agg.w2_squared.std,
        agg.w2.mean,
        agg.ks.mean,
        agg.mse,
        report.per_covariate.len()
    );
    Ok(())
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let mut base = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        base.seed = s;
    }
    if let Some(n) = args.iterations {
        base.iterations = n;
    }
    base.validate()?;
    let grid: SweepGrid = args.grid.parse()?;
    let train_path = split_file(&args.data, "train.csv")?;
    let val_path = split_file(&args.data, "val.csv")?;
    let train = Dataset::load_csv(&train_path, &args.response)?;
    let val = Dataset::load_csv(&val_path, &args.response)?;
    let outcome = sweep::<f64>(&train, &val, &base, &grid)?;

    let dir = out_dir(&args.out, "sweep")?;
    let mut header: Vec<String> = grid.axes.iter().map(|(k, _)| k.clone()).collect();
    header.extend(["iterations".to_string(), "val_w2_squared".to_string()]);
    write_rows(
        &dir.join("grid.csv"),
        &header,
        outcome.rows.iter().map(|r| {
            let mut row: Vec<String> = r.point.iter().map(|(_, v)| format_f64(*v)).collect();
            row.push(r.iterations.to_string());
            row.push(format_f64(r.val_w2_squared));
            row
        }),
    )?;
    fs::write(dir.join("best_config.json"), outcome.best_config.to_json()? + "\n")?;
    let mut manifest = RunManifest::new("sweep");
    manifest.seed = Some(base.seed);
    manifest.config = serde_json::json!({ "base": base, "grid": args.grid });
    manifest.fingerprint(&train_path)?;
    manifest.fingerprint(&val_path)?;
    manifest.outputs = vec!["grid.csv".into(), "best_config.json".into()];
    manifest.write(&dir)?;
    let best = &outcome.rows[outcome.best_index];
    println!(
        "best point #{} {:?}: validation W2^2 {:.6}",
        outcome.best_index, best.point, best.val_w2_squared
    );
    Ok(())
}

pub fn cmd_scatter(args: &ScatterArgs) -> Result<()> {
    let ds = Dataset::load_csv(&args.data, &args.response)?;
    let points = lipschitz_scatter(&ds, args.min_count)?;
    let dir = out_dir(&args.out, "scatter")?;
    write_rows(
        &dir.join("scatter.csv"),
        &["i".into(), "j".into(), "covariate_distance".into(), "w2".into()],
        points.iter().map(|p| {
            vec![
                p.i.to_string(),
                p.j.to_string(),
                format_f64(p.covariate_distance),
                format_f64(p.w2),
            ]
        }),
    )?;
    let r = pearson(
        &points.iter().map(|p| p.covariate_distance).collect::<Vec<_>>(),
        &points.iter().map(|p| p.w2).collect::<Vec<_>>(),
    );
    let mut manifest = RunManifest::new("scatter");
    manifest.config = serde_json::json!({ "min_count": args.min_count, "pearson": r });
    manifest.fingerprint(&args.data)?;
    manifest.outputs.push("scatter.csv".into());
    manifest.write(&dir)?;
    match r {
        Some(r) => println!("{} pairs, pearson r = {r:.4}", points.len()),
        None => println!("{} pairs, correlation undefined", points.len()),
    }
    Ok(())
}
