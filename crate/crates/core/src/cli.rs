//! The `train`, `eval`, `ablate` and `gradcheck` commands and their CSV
//! reports.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error, 3 data
//! error (including a checkpoint written for a different model).

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::error::{CheckpointError, DataError, Error};
use crate::experiment::{ConfigError, ExperimentConfig};
use crate::gradcheck::{gradcheck_suite, CustomCase, SuiteReport};
use crate::models::{build_model, ModelSpec, QimSpec};
use crate::qim::QimConfig;
use crate::train::{evaluate_dataset, fit, load_checkpoint, save_checkpoint, Accuracy, TrainConfig};

pub const REPORT_HEADER: &str = "approach,density_maps,density_size,accuracy,seed,epochs,wall_seconds";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const GRADCHECK_SEEDS: usize = 20;

#[derive(Debug, Error)]
pub enum CommandError {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Runtime(Error),

    #[error("report: {0}")]
    Report(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("{failed} of {total} ablation cells failed")]
    AblationCells { failed: usize, total: usize },
}

impl CommandError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CommandError::Config(_) => 2,
            CommandError::Data(_) => 3,
            _ => 1,
        }
    }
}

impl From<Error> for CommandError {
    fn from(e: Error) -> Self {
        match e {
            Error::Data(d) => CommandError::Data(d.to_string()),
            Error::Checkpoint(c @ CheckpointError::DescriptorMismatch { .. }) => CommandError::Data(c.to_string()),
            other => CommandError::Runtime(other),
        }
    }
}

impl From<DataError> for CommandError {
    fn from(e: DataError) -> Self {
        CommandError::Data(e.to_string())
    }
}

impl From<csv::Error> for CommandError {
    fn from(e: csv::Error) -> Self {
        CommandError::Report(e.to_string())
    }
}

impl From<std::io::Error> for CommandError {
    fn from(e: std::io::Error) -> Self {
        CommandError::Report(e.to_string())
    }
}

mod four_decimals {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => s.serialize_str(&format!("{x:.4}")),
            None => s.serialize_str(""),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        let s = String::deserialize(d)?;
        if s.is_empty() {
            return Ok(None);
        }
        s.parse().map(Some).map_err(serde::de::Error::custom)
    }
}

/// One row of a results table. Density columns are empty for baselines;
/// accuracy is empty for a failed cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub approach: String,
    pub density_maps: Option<usize>,
    pub density_size: Option<usize>,
    #[serde(with = "four_decimals")]
    pub accuracy: Option<f64>,
    pub seed: u64,
    pub epochs: usize,
    pub wall_seconds: f64,
}

impl ReportRow {
    /// Row for a finished run; `approach` gains a `[clamped:s->s']` note
    /// when the density map size was clamped.
    pub fn finished(
        spec: &ModelSpec,
        bound_size: Option<usize>,
        accuracy: Accuracy,
        seed: u64,
        epochs: usize,
        wall_seconds: f64,
    ) -> Self {
        let mut approach = spec.approach();
        if let (Some(q), Some(s)) = (spec.qim, bound_size) {
            if s != q.config.size {
                approach.push_str(&format!("[clamped:{}->{s}]", q.config.size));
            }
        }
        Self {
            approach,
            density_maps: spec.qim.map(|q| q.config.filters),
            density_size: bound_size.or(spec.qim.map(|q| q.config.size)),
            accuracy: Some(accuracy.to_string().parse().expect("formatted float")),
            seed,
            epochs,
            wall_seconds,
        }
    }

    pub fn failed(spec: &ModelSpec, error: &str, seed: u64, epochs: usize) -> Self {
        Self {
            approach: format!("{}[error:{}]", spec.approach(), error.replace(['\n', ','], " ")),
            density_maps: spec.qim.map(|q| q.config.filters),
            density_size: spec.qim.map(|q| q.config.size),
            accuracy: None,
            seed,
            epochs,
            wall_seconds: 0.0,
        }
    }

    pub fn accuracy_field(&self) -> String {
        self.accuracy.map(|a| format!("{a:.4}")).unwrap_or_default()
    }
}

/// CSV writer that flushes after every row.
pub struct ReportWriter {
    inner: csv::Writer<File>,
}

impl ReportWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self, CommandError> {
        Ok(Self { inner: csv::Writer::from_path(path)? })
    }

    pub fn append(&mut self, row: &ReportRow) -> Result<(), CommandError> {
        self.inner.serialize(row)?;
        self.inner.flush()?;
        Ok(())
    }
}

pub fn read_report(path: impl AsRef<Path>) -> Result<Vec<ReportRow>, CommandError> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(String::from).collect();
    if header.join(",") != REPORT_HEADER {
        return Err(CommandError::Report(format!("unexpected header `{}`", header.join(","))));
    }
    reader.deserialize().map(|r| r.map_err(CommandError::from)).collect()
}

/// Ablation grid: every filter count crossed with every map size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grid {
    pub counts: Vec<usize>,
    pub sizes: Vec<usize>,
}

impl Default for Grid {
    fn default() -> Self {
        Self { counts: vec![32, 64, 128, 192], sizes: vec![8, 10, 12, 16] }
    }
}

impl Grid {
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.counts.iter().flat_map(move |&c| self.sizes.iter().map(move |&s| (c, s)))
    }
}

/// `counts=32,64;sizes=8,10`. Either part may be omitted to keep the
/// default values.
impl FromStr for Grid {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        let mut grid = Grid::default();
        for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let bad = |reason: &str| ConfigError::InvalidValue {
                key: "grid".into(),
                value: part.into(),
                reason: reason.into(),
            };
            let (key, values) = part.split_once('=').ok_or_else(|| bad("expected counts=.. or sizes=.."))?;
            let values: Vec<usize> = values
                .split(',')
                .map(|v| v.trim().parse::<usize>().map_err(|e| bad(&e.to_string())))
                .collect::<Result<_, _>>()?;
            if values.is_empty() || values.contains(&0) {
                return Err(bad("values must be positive"));
            }
            match key.trim() {
                "counts" => grid.counts = values,
                "sizes" => grid.sizes = values,
                _ => return Err(bad("expected counts or sizes")),
            }
        }
        Ok(grid)
    }
}

/// Command-line overrides of config values.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

fn resolve(config_path: &Path, overrides: &Overrides) -> Result<(ExperimentConfig, PathBuf), CommandError> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(seed) = overrides.seed {
        cfg.train.seed = seed;
    }
    let out = overrides.out.clone().or_else(|| cfg.out.clone()).ok_or_else(|| ConfigError::MissingKey("out".into()))?;
    Ok((cfg, out))
}

fn create_dir(out: &Path) -> Result<(), CommandError> {
    fs::create_dir_all(out).map_err(|e| CommandError::Report(format!("{}: {e}", out.display())))
}

/// Result of a `train` run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub row: ReportRow,
    pub epoch_losses: Vec<f64>,
    pub out: PathBuf,
}

fn run_one(
    spec: &ModelSpec,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    mut log: impl FnMut(usize, f64),
) -> Result<(ReportRow, Vec<f64>, crate::models::Network<f32>), Error> {
    let mut net = build_model::<f32>(spec, cfg.seed)?;
    if let Some(w) = net.qim().and_then(|q| q.warning.clone()) {
        eprintln!("warning: {w}");
    }
    let bound_size = net.qim().map(|q| q.s);
    let metrics = fit(&mut net, train, test, cfg, &mut log)?;
    let row = ReportRow::finished(spec, bound_size, metrics.accuracy, cfg.seed, cfg.epochs, metrics.wall_seconds);
    Ok((row, metrics.epoch_losses, net))
}

/// Trains the configured model, evaluates it, and writes `metrics.csv`,
/// `epochs.csv` and `model.ckpt` into the output directory.
pub fn cmd_train(config_path: &Path, overrides: &Overrides) -> Result<TrainOutcome, CommandError> {
    let (cfg, out) = resolve(config_path, overrides)?;
    let train = cfg.load_train()?;
    let test = cfg.load_test()?;
    create_dir(&out)?;
    let spec = cfg.model_spec();

    let mut epochs = File::create(out.join(EPOCHS_FILE))?;
    writeln!(epochs, "epoch,train_loss")?;
    let (row, losses, net) = run_one(&spec, &train, &test, &cfg.train, |e, loss| {
        eprintln!("epoch {} train loss {loss:.6}", e + 1);
        let _ = writeln!(epochs, "{},{loss}", e + 1).and_then(|_| epochs.flush());
    })?;

    let mut report = ReportWriter::create(out.join(METRICS_FILE))?;
    report.append(&row)?;
    save_checkpoint(&net, out.join(CHECKPOINT_FILE)).map_err(Error::from)?;
    println!("{} accuracy {}", row.approach, row.accuracy_field());
    Ok(TrainOutcome { row, epoch_losses: losses, out })
}

/// Loads a checkpoint for the configured model and reports test accuracy.
pub fn cmd_eval(checkpoint: &Path, config_path: &Path) -> Result<Accuracy, CommandError> {
    let cfg = ExperimentConfig::load(config_path)?;
    let test = cfg.load_test()?;
    let net = load_checkpoint::<f32>(&cfg.model_spec(), checkpoint)?;
    let acc = evaluate_dataset(&net, &test, cfg.train.batch_size.max(256))?;
    println!("accuracy {acc}");
    Ok(acc)
}

/// Runs the baseline and every grid cell, appending one row per run to
/// `ablation.csv`. A failing cell leaves an error row and the grid goes on;
/// the command still fails at the end.
pub fn cmd_ablate(config_path: &Path, grid: &Grid, overrides: &Overrides) -> Result<Vec<ReportRow>, CommandError> {
    let (cfg, out) = resolve(config_path, overrides)?;
    let train = cfg.load_train()?;
    let test = cfg.load_test()?;
    create_dir(&out)?;
    let mut report = ReportWriter::create(out.join(ABLATION_FILE))?;

    let base = ModelSpec { qim: None, ..cfg.model_spec() };
    let template = cfg.qim.unwrap_or(QimSpec { config: QimConfig::new(1, 1), insert_after: None });
    let mut specs = vec![base];
    for (c, s) in grid.cells() {
        let config = QimConfig { filters: c, size: s, ..template.config };
        specs.push(ModelSpec { qim: Some(QimSpec { config, ..template }), ..base });
    }

    let mut rows = Vec::with_capacity(specs.len());
    let mut failed = 0;
    for spec in &specs {
        eprintln!("ablate: {}", spec.descriptor());
        let row = match run_one(spec, &train, &test, &cfg.train, |e, loss| {
            eprintln!("  epoch {} train loss {loss:.6}", e + 1)
        }) {
            Ok((row, _, _)) => row,
            Err(e) => {
                failed += 1;
                eprintln!("  failed: {e}");
                ReportRow::failed(spec, &e.to_string(), cfg.train.seed, cfg.train.epochs)
            }
        };
        report.append(&row)?;
        println!("{},{},{},{}", row.approach, opt(row.density_maps), opt(row.density_size), row.accuracy_field());
        rows.push(row);
    }
    if failed > 0 {
        return Err(CommandError::AblationCells { failed, total: rows.len() });
    }
    Ok(rows)
}

fn opt(v: Option<usize>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Runs the gradient-check suite over [`GRADCHECK_SEEDS`] seeds and prints
/// the per-parameter report. Extra custom ops are checked alongside.
pub fn cmd_gradcheck(seed: u64, custom: &[CustomCase]) -> Result<SuiteReport, CommandError> {
    let report = gradcheck_suite(seed, GRADCHECK_SEEDS, custom)?;
    println!("{report}");
    if !report.passed() {
        let names: Vec<String> = report.failures().map(|e| format!("{}.{}", e.component, e.input)).collect();
        return Err(CommandError::GradCheck(names.join(", ")));
    }
    Ok(report)
}
