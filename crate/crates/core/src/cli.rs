//! Command-line interface: argument parsing, layered configuration, run
//! manifests, and the `toy`, `analyze`, `bmnist` and `mimo` commands.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::analysis::{analyze, AnalysisConstants, Case};
use crate::engine::{save_loss_history, DivergenceEvent, TrainOutcome, ValRecord};
use crate::error::Error;
use crate::flowcore::{SamplerKind, TimeSampler};
use crate::objectives::{LossSpace, Prediction, TimeBin};
use crate::sampler::save_pgm_grid;
use crate::tasks::bmnist::{self, BinaryImageSet, BmnistRecipe, QualityMetrics};
use crate::tasks::mimo::{self, MimoRecipe};
use crate::tasks::toy::{self, DataKind, ToyRecipe};
use crate::tasks::ObjectiveCell;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING_INPUT: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    MissingInput { path: PathBuf, hint: String },
    Internal(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::MissingInput { .. } => EXIT_MISSING_INPUT,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::MissingInput { path, hint } => write!(f, "missing input {}\nhint: {hint}", path.display()),
            CliError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Usage(m),
            Error::MissingInput { path } => CliError::MissingInput {
                path,
                hint: "check the path; the file must exist and be readable".into(),
            },
            other => CliError::Internal(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

impl FromStr for DataKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gaussian" => Ok(DataKind::GaussianIid),
            "bpsk" => Ok(DataKind::BpskIid),
            _ => Err(format!("unknown data kind `{s}` (expected gaussian or bpsk)")),
        }
    }
}

impl FromStr for Prediction {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "x" => Ok(Prediction::XPred),
            "v" => Ok(Prediction::VPred),
            _ => Err(format!("unknown prediction `{s}` (expected x or v)")),
        }
    }
}

impl FromStr for LossSpace {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "xmse" => Ok(LossSpace::XMse),
            "vmse" => Ok(LossSpace::VMse),
            "bce" => Ok(LossSpace::Bce),
            _ => Err(format!("unknown loss `{s}` (expected xmse, vmse or bce)")),
        }
    }
}

impl FromStr for SamplerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "uniform" => Ok(SamplerKind::Uniform),
            "logitnormal" => Ok(SamplerKind::LogitNormal),
            _ => Err(format!("unknown sampler `{s}` (expected uniform or logitnormal)")),
        }
    }
}

impl FromStr for Case {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "continuous" => Ok(Case::Continuous),
            "binary" => Ok(Case::Binary),
            _ => Err(format!("unknown case `{s}` (expected continuous or binary)")),
        }
    }
}

/// `PRED-LOSS[/SAMPLER]`, e.g. `x-bce` or `x-vmse/logitnormal`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CellSpec {
    pub prediction: Prediction,
    pub loss: LossSpace,
    pub sampler: SamplerKind,
}

impl FromStr for CellSpec {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let (obj, sampler) = s.split_once('/').unwrap_or((s, "uniform"));
        let (p, l) = obj
            .split_once('-')
            .ok_or_else(|| format!("cell `{s}` is not of the form PRED-LOSS[/SAMPLER]"))?;
        Ok(CellSpec {
            prediction: p.parse()?,
            loss: l.parse()?,
            sampler: sampler.parse()?,
        })
    }
}

impl CellSpec {
    pub fn build(&self, m: f64, s: f64, t_max: f64) -> crate::Result<ObjectiveCell> {
        let sampler = match self.sampler {
            SamplerKind::Uniform => TimeSampler::uniform(),
            SamplerKind::LogitNormal => TimeSampler::logit_normal(m, s)?,
        }
        .with_t_max(t_max)?;
        ObjectiveCell::new(self.prediction, self.loss, sampler)
    }
}

/// A flat `key = value` configuration file; `#` starts a comment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    pub entries: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value", i + 1)))?;
            let key = k.trim().replace('-', "_");
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(CliError::Usage(format!("config line {}: duplicate key `{key}`", i + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        match std::fs::read_to_string(path) {
            Ok(text) => Self::parse(&text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(CliError::MissingInput {
                path: path.into(),
                hint: "the --config file does not exist".into(),
            }),
            Err(e) => Err(e.into()),
        }
    }

    fn check_keys(&self, allowed: &[&str]) -> CliResult<()> {
        match self.entries.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(CliError::Usage(format!("unknown config key `{k}`; allowed: {}", allowed.join(", ")))),
            None => Ok(()),
        }
    }

    fn parsed<T: FromStr>(&self, key: &str) -> CliResult<Option<T>>
    where
        T::Err: fmt::Display,
    {
        self.entries
            .get(key)
            .map(|v| v.parse::<T>().map_err(|e| CliError::Usage(format!("config key `{key}`: {e}"))))
            .transpose()
    }

    /// Flag, else config file, else `default`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> CliResult<T>
    where
        T::Err: fmt::Display,
    {
        Ok(self.pick_opt(flag, key)?.unwrap_or(default))
    }

    pub fn pick_opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> CliResult<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.parsed(key),
        }
    }

    pub fn pick_required<T: FromStr>(&self, flag: Option<T>, key: &str) -> CliResult<T>
    where
        T::Err: fmt::Display,
    {
        self.pick_opt(flag, key)?
            .ok_or_else(|| CliError::Usage(format!("--{} is required", key.replace('_', "-"))))
    }

    /// Comma-separated list, with the same precedence as [`ConfigFile::pick`].
    pub fn pick_list<T: FromStr>(&self, flag: Vec<T>, key: &str, default: &str) -> CliResult<Vec<T>>
    where
        T::Err: fmt::Display,
    {
        if !flag.is_empty() {
            return Ok(flag);
        }
        let text = self.entries.get(key).map(String::as_str).unwrap_or(default);
        text.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<T>().map_err(|e| CliError::Usage(format!("`{key}`: {e}"))))
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CellDivergence {
    pub cell: String,
    pub step: usize,
    pub reason: String,
}

/// Record of one command invocation; written when the run starts and
/// rewritten with every output file once results exist.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub version: String,
    pub out_dir: PathBuf,
    pub status: String,
    pub duration_secs: Option<f64>,
    pub files: Vec<String>,
    pub divergence_events: Vec<CellDivergence>,
    pub summary: serde_json::Value,
}

pub const MANIFEST_NAME: &str = "manifest.json";

struct Run {
    manifest: RunManifest,
    start: Instant,
}

impl Run {
    fn begin(command: &str, config: &impl Serialize, seed: u64, out: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(out)?;
        let run = Self {
            manifest: RunManifest {
                command: command.into(),
                config: serde_json::to_value(config)?,
                seed,
                version: env!("CARGO_PKG_VERSION").into(),
                out_dir: out.into(),
                status: "started".into(),
                duration_secs: None,
                files: Vec::new(),
                divergence_events: Vec::new(),
                summary: serde_json::Value::Null,
            },
            start: Instant::now(),
        };
        run.write()?;
        Ok(run)
    }

    fn write(&self) -> CliResult<()> {
        let path = self.manifest.out_dir.join(MANIFEST_NAME);
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Path for an output file, listed in the manifest.
    fn file(&mut self, name: &str) -> PathBuf {
        self.manifest.files.push(name.into());
        self.manifest.out_dir.join(name)
    }

    fn divergence(&mut self, cell: &str, event: &Option<DivergenceEvent>) {
        if let Some(e) = event {
            self.manifest.divergence_events.push(CellDivergence {
                cell: cell.into(),
                step: e.step,
                reason: e.reason.clone(),
            });
        }
    }

    fn finish(mut self, summary: serde_json::Value) -> CliResult<()> {
        self.manifest.status = "complete".into();
        self.manifest.summary = summary;
        self.manifest.duration_secs = Some(self.start.elapsed().as_secs_f64());
        self.write()
    }
}

#[derive(Debug, Parser)]
#[command(name = "binflow", version, about = "Flow matching on continuous and binary data: stability studies, analysis, and recipes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Toy stability study on i.i.d. Gaussian or BPSK vectors.
    Toy(ToyArgs),
    /// Variance-integral and sampling-gap analysis report.
    Analyze(AnalyzeArgs),
    /// Class-conditional binarized MNIST generation.
    Bmnist(BmnistArgs),
    /// MIMO detection with classical and learned detectors.
    Mimo(MimoArgs),
}

#[derive(Debug, Args)]
pub struct ToyArgs {
    /// Flat key=value file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// gaussian | bpsk
    #[arg(long)]
    pub data: Option<DataKind>,
    /// x | v
    #[arg(long)]
    pub pred: Option<Prediction>,
    /// xmse | vmse | bce
    #[arg(long)]
    pub loss: Option<LossSpace>,
    /// uniform | logitnormal
    #[arg(long)]
    pub sampler: Option<SamplerKind>,
    #[arg(long, allow_hyphen_values = true)]
    pub m: Option<f64>,
    #[arg(long)]
    pub s: Option<f64>,
    #[arg(long)]
    pub t_max: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub ber_samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// continuous | binary
    #[arg(long)]
    pub case: Option<Case>,
    #[arg(long, allow_hyphen_values = true)]
    pub s: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub m: Option<f64>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BmnistArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Binarized dataset cache, read if present and written otherwise.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Mean-pool factor, 1 or 2.
    #[arg(long)]
    pub downscale: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// PRED-LOSS[/SAMPLER] cells, comma separated or repeated.
    #[arg(long, value_delimiter = ',')]
    pub objective: Vec<CellSpec>,
    #[arg(long, allow_hyphen_values = true)]
    pub m: Option<f64>,
    #[arg(long)]
    pub s: Option<f64>,
    /// Train on a seeded random subset of this many images.
    #[arg(long)]
    pub subset: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub val_count: Option<usize>,
    #[arg(long)]
    pub val_every: Option<usize>,
    #[arg(long)]
    pub sample_steps: Option<usize>,
    #[arg(long)]
    pub samples_per_class: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MimoArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Complex system size; the real model has 2N dimensions.
    #[arg(long)]
    pub n: Option<usize>,
    /// SNR points in dB, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub snr_sweep: Vec<f64>,
    /// PRED-LOSS[/SAMPLER] cells, comma separated or repeated.
    #[arg(long, value_delimiter = ',')]
    pub cells: Vec<CellSpec>,
    #[arg(long, allow_hyphen_values = true)]
    pub m: Option<f64>,
    #[arg(long)]
    pub s: Option<f64>,
    #[arg(long)]
    pub t_max: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Global gradient-norm clip; 0 disables clipping.
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub euler_steps: Option<usize>,
    #[arg(long)]
    pub eval_bits: Option<usize>,
    /// Evaluate the exhaustive MAP detector (default: when 2N <= 16).
    #[arg(long)]
    pub map: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.code()
        }
    }
}

pub fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Toy(a) => cmd_toy(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Bmnist(a) => cmd_bmnist(a),
        Command::Mimo(a) => cmd_mimo(a),
    }
}

fn write_bins(path: &Path, bins: &[TimeBin]) -> CliResult<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "t_mid,mean_grad_sq,count")?;
    for b in bins {
        writeln!(f, "{},{:e},{}", b.t_mid, b.mean_grad_sq, b.count)?;
    }
    f.flush()?;
    Ok(())
}

fn write_validations(path: &Path, records: &[ValRecord]) -> CliResult<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,t,loss,x_mse")?;
    for r in records {
        for row in &r.rows {
            writeln!(f, "{},{},{:e},{:e}", r.step, row.t, row.loss, row.x_mse)?;
        }
    }
    f.flush()?;
    Ok(())
}

/// File-name stem for a cell: index, objective and sampler kind.
fn cell_tag(i: usize, cell: &ObjectiveCell) -> String {
    let sampler = match cell.sampler.kind {
        SamplerKind::Uniform => "uniform",
        SamplerKind::LogitNormal => "logitnormal",
    };
    format!("c{i}_{}_{sampler}", cell.objective.label())
}

fn write_training(run: &mut Run, tag: &str, outcome: &TrainOutcome) -> CliResult<()> {
    save_loss_history(&run.file(&format!("{tag}_loss.csv")), &outcome.history)?;
    outcome.trace.save_csv(&run.file(&format!("{tag}_trace.csv")))?;
    if !outcome.validations.is_empty() {
        write_validations(&run.file(&format!("{tag}_val.csv")), &outcome.validations)?;
    }
    outcome.best_model().params.save(&run.file(&format!("{tag}_best.bnfm")))?;
    Ok(())
}

const TOY_KEYS: &[&str] = &[
    "data", "pred", "loss", "sampler", "m", "s", "t_max", "steps", "batch", "lr", "d", "ber_samples", "seed", "out",
];

pub fn cmd_toy(a: ToyArgs) -> CliResult<()> {
    let file = ConfigFile::load(a.config.as_deref())?;
    file.check_keys(TOY_KEYS)?;
    let out: PathBuf = file.pick_required(a.out, "out")?;
    let data = file.pick(a.data, "data", DataKind::BpskIid)?;
    let spec = CellSpec {
        prediction: file.pick(a.pred, "pred", Prediction::XPred)?,
        loss: file.pick(a.loss, "loss", LossSpace::XMse)?,
        sampler: file.pick(a.sampler, "sampler", SamplerKind::Uniform)?,
    };
    let cell = spec.build(
        file.pick(a.m, "m", -0.8)?,
        file.pick(a.s, "s", 0.8)?,
        file.pick(a.t_max, "t_max", 1.0)?,
    )?;
    let seed = file.pick(a.seed, "seed", 0)?;
    let mut recipe = ToyRecipe::new(data, vec![cell], seed);
    recipe.steps = file.pick(a.steps, "steps", recipe.steps)?;
    recipe.batch = file.pick(a.batch, "batch", recipe.batch)?;
    recipe.lr = file.pick(a.lr, "lr", recipe.lr)?;
    recipe.d = file.pick(a.d, "d", recipe.d)?;
    recipe.ber_samples = file.pick(a.ber_samples, "ber_samples", recipe.ber_samples)?;
    recipe.net.in_dim = recipe.d;
    recipe.net.out_dim = recipe.d;
    recipe.validate()?;

    let mut run = Run::begin("toy", &recipe, seed, &out)?;
    let res = toy::run_toy_cell(&recipe, &cell)?;
    run.divergence(&cell.label(), &res.outcome.divergence);
    save_loss_history(&run.file("loss_history.csv"), &res.outcome.history)?;
    res.outcome.trace.save_csv(&run.file("trace.csv"))?;
    write_bins(&run.file("bins.csv"), &res.bins)?;
    if let Some(rows) = &res.ber {
        let mut f = std::io::BufWriter::new(std::fs::File::create(run.file("ber.csv"))?);
        writeln!(f, "t0,model_ber,mmse_ber,mmse_closed_form,bits")?;
        for r in rows {
            writeln!(f, "{},{:e},{:e},{:e},{}", r.t0, r.model_ber, r.mmse_ber, r.mmse_closed_form, r.bits)?;
        }
        f.flush()?;
    }
    run.finish(serde_json::json!({
        "cell": cell.label(),
        "completed_steps": res.outcome.completed_steps(),
        "spike_ratio": res.spike_ratio,
    }))
}

const ANALYZE_KEYS: &[&str] = &["case", "s", "m", "d", "report"];

pub fn cmd_analyze(a: AnalyzeArgs) -> CliResult<()> {
    let file = ConfigFile::load(a.config.as_deref())?;
    file.check_keys(ANALYZE_KEYS)?;
    let report_path: PathBuf = file.pick_required(a.report, "report")?;
    let case = file.pick(a.case, "case", Case::Binary)?;
    let s = file.pick(a.s, "s", 0.8)?;
    let m = file.pick(a.m, "m", 0.0)?;
    if !(s > 0.0) {
        return Err(CliError::Usage(format!("--s must be positive, got {s}")));
    }
    let constants = AnalysisConstants {
        d: file.pick(a.d, "d", 16)?,
        ..AnalysisConstants::default()
    };
    constants.validate()?;
    let report = analyze(case, s, m, &constants)?;
    if let Some(dir) = report_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    std::fs::write(&report_path, text)?;
    Ok(())
}

const BMNIST_KEYS: &[&str] = &[
    "images",
    "labels",
    "cache",
    "downscale",
    "threshold",
    "objective",
    "m",
    "s",
    "subset",
    "steps",
    "batch",
    "lr",
    "hidden",
    "val_count",
    "val_every",
    "sample_steps",
    "samples_per_class",
    "seed",
    "out",
];

pub const DEFAULT_IMAGES: &str = "data/mnist-5k/images-idx3-ubyte";
pub const DEFAULT_LABELS: &str = "data/mnist-5k/labels-idx1-ubyte";

fn dataset_hint(e: CliError) -> CliError {
    match e {
        CliError::MissingInput { path, .. } => CliError::MissingInput {
            path,
            hint: "pass --images/--labels pointing at MNIST IDX files (the repository ships a 5000-image subset under \
                 data/mnist-5k; run from the repository root), or convert a CSV export with scripts/mnist_subset_to_idx.py".to_string(),
        },
        other => other,
    }
}

fn prepare_images(a: &BmnistArgs, file: &ConfigFile) -> CliResult<BinaryImageSet> {
    let cache: Option<PathBuf> = file.pick_opt(a.cache.clone(), "cache")?;
    if let Some(c) = cache.as_ref().filter(|c| c.exists()) {
        return Ok(BinaryImageSet::load(c)?);
    }
    let images: PathBuf = file.pick(a.images.clone(), "images", DEFAULT_IMAGES.into())?;
    let labels: PathBuf = file.pick(a.labels.clone(), "labels", DEFAULT_LABELS.into())?;
    let gray = bmnist::load_idx(&images, &labels).map_err(|e| dataset_hint(e.into()))?;
    let set = bmnist::binarize_and_downscale(
        &gray,
        file.pick(a.threshold, "threshold", 0.5)?,
        file.pick(a.downscale, "downscale", 2)?,
    )?;
    if let Some(c) = cache {
        set.save(&c)?;
    }
    Ok(set)
}

#[derive(Serialize)]
struct BmnistRun<'a> {
    recipe: &'a BmnistRecipe,
    images: usize,
    height: usize,
    width: usize,
}

pub fn cmd_bmnist(a: BmnistArgs) -> CliResult<()> {
    let file = ConfigFile::load(a.config.as_deref())?;
    file.check_keys(BMNIST_KEYS)?;
    let out: PathBuf = file.pick_required(a.out.clone(), "out")?;
    let seed = file.pick(a.seed, "seed", 0)?;
    let mut set = prepare_images(&a, &file)?;
    if let Some(n) = file.pick_opt(a.subset, "subset")? {
        set = set.subset(n, seed)?;
    }
    let (m, s) = (file.pick(a.m, "m", -0.8)?, file.pick(a.s, "s", 0.8)?);
    let cells = file
        .pick_list(a.objective.clone(), "objective", "x-xmse/uniform")?
        .iter()
        .map(|c| c.build(m, s, 1.0))
        .collect::<crate::Result<Vec<_>>>()?;
    let mut recipe = BmnistRecipe::new(set.pixels(), cells, seed);
    recipe.steps = file.pick(a.steps, "steps", recipe.steps)?;
    recipe.batch = file.pick(a.batch, "batch", recipe.batch)?;
    recipe.lr = file.pick(a.lr, "lr", recipe.lr)?;
    recipe.net.hidden = file.pick(a.hidden, "hidden", recipe.net.hidden)?;
    recipe.val_count = file.pick(a.val_count, "val_count", (set.count() / 10).clamp(1, 500))?;
    recipe.val_every = file.pick(a.val_every, "val_every", (recipe.steps / 20).max(1))?;
    recipe.sample_steps = file.pick(a.sample_steps, "sample_steps", recipe.sample_steps)?;
    recipe.samples_per_class = file.pick(a.samples_per_class, "samples_per_class", recipe.samples_per_class)?;
    recipe.validate(&set)?;

    let config = BmnistRun {
        recipe: &recipe,
        images: set.count(),
        height: set.height(),
        width: set.width(),
    };
    let mut run = Run::begin("bmnist", &config, seed, &out)?;
    let untrained = bmnist::untrained_baseline(&set, &recipe)?;
    let mut rows: Vec<(String, usize, bool, bool, Option<QualityMetrics>)> = Vec::new();
    rows.push(("untrained".into(), 0, false, false, Some(untrained)));
    for (i, cell) in recipe.cells.iter().enumerate() {
        let res = bmnist::run_bmnist_cell(&set, &recipe, cell)?;
        let tag = cell_tag(i, cell);
        run.divergence(&cell.label(), &res.outcome.divergence);
        write_training(&mut run, &tag, &res.outcome)?;
        if let Some(samples) = &res.samples {
            save_pgm_grid(
                &run.file(&format!("{tag}_samples.pgm")),
                samples,
                set.height(),
                set.width(),
                recipe.samples_per_class,
            )?;
        }
        rows.push((
            cell.label(),
            res.outcome.completed_steps(),
            res.outcome.divergence.is_some(),
            res.loss_monotone,
            res.metrics,
        ));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(run.file("metrics.csv"))?);
    writeln!(f, "cell,completed_steps,diverged,loss_monotone,binariness,marginal_l1,nn_hamming")?;
    for (label, steps, div, mono, m) in &rows {
        let metrics = match m {
            Some(m) => format!("{:e},{:e},{:e}", m.binariness, m.marginal_l1, m.nn_hamming),
            None => ",,".into(),
        };
        writeln!(f, "{label},{steps},{div},{mono},{metrics}")?;
    }
    f.flush()?;
    drop(f);
    run.finish(serde_json::json!({ "untrained": untrained }))
}

const MIMO_KEYS: &[&str] = &[
    "n",
    "snr_sweep",
    "cells",
    "m",
    "s",
    "t_max",
    "steps",
    "batch",
    "lr",
    "grad_clip",
    "hidden",
    "euler_steps",
    "eval_bits",
    "map",
    "seed",
    "out",
];

pub fn cmd_mimo(a: MimoArgs) -> CliResult<()> {
    let file = ConfigFile::load(a.config.as_deref())?;
    file.check_keys(MIMO_KEYS)?;
    let out: PathBuf = file.pick_required(a.out.clone(), "out")?;
    let seed = file.pick(a.seed, "seed", 0)?;
    let n = file.pick(a.n, "n", 2)?;
    if n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let (m, s) = (file.pick(a.m, "m", -0.8)?, file.pick(a.s, "s", 0.8)?);
    let t_max = file.pick(a.t_max, "t_max", 0.99)?;
    let cells = file
        .pick_list(a.cells.clone(), "cells", "x-bce/uniform,x-vmse/uniform")?
        .iter()
        .map(|c| c.build(m, s, t_max))
        .collect::<crate::Result<Vec<_>>>()?;
    let mut recipe = MimoRecipe::new(n, cells, seed);
    recipe.snr_sweep = file.pick_list(a.snr_sweep.clone(), "snr_sweep", "0,2,4,6,8,10,12")?;
    recipe.steps = file.pick(a.steps, "steps", recipe.steps)?;
    recipe.batch = file.pick(a.batch, "batch", recipe.batch)?;
    recipe.lr = file.pick(a.lr, "lr", recipe.lr)?;
    let clip = file.pick(a.grad_clip, "grad_clip", recipe.grad_clip.unwrap_or(0.0))?;
    recipe.grad_clip = (clip > 0.0).then_some(clip);
    recipe.net.hidden = file.pick(a.hidden, "hidden", recipe.net.hidden)?;
    recipe.euler_steps = file.pick(a.euler_steps, "euler_steps", recipe.euler_steps)?;
    recipe.eval_bits = file.pick(a.eval_bits, "eval_bits", recipe.eval_bits)?;
    recipe.map = file.pick(a.map, "map", recipe.map)?;
    recipe.validate()?;

    let mut run = Run::begin("mimo", &recipe, seed, &out)?;
    let report = mimo::run_mimo(&recipe)?;
    for (i, c) in report.cells.iter().enumerate() {
        run.divergence(&c.cell.label(), &c.outcome.divergence);
        write_training(&mut run, &cell_tag(i, &c.cell), &c.outcome)?;
    }
    mimo::save_ber_csv(&run.file("ber.csv"), &report.rows)?;
    run.finish(serde_json::json!({
        "snr_definition": "SNR(dB) = -10 log10(noise variance); channel entries have variance 1/(2N)",
        "zf_ridge_fallbacks": report.zf_ridge_fallbacks,
        "sampling_divergences": report.sampling_divergences,
    }))
}
