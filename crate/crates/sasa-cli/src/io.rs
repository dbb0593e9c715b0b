//! File formats: NDJSON datasets with `.meta.json` sidecars, strict run
//! configs, parameter snapshots, and the CSV report/matrix writers.
//!
//! Everything written here is byte-deterministic for fixed inputs:
//! floats go through Rust's shortest-roundtrip formatting and JSON
//! field order is the struct declaration order.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sasa::alignment::AlignmentNorm;
use sasa::baseline::LstmS2TParams;
use sasa::model::{Ablation, ModelConfig, ModelParams, TrainReport};
use sasa::series::{Domain, Mat, Task, TimeSeriesSample};
use sasa::structure::StructureMatrix;
use sasa::synth::{CausalGraphSpec, DomainSpec};

use crate::{CliError, CliResult};

/// One dataset line: `{"id": ..., "series": [[...]], "label": ..., "domain": ...}`.
#[derive(Debug, Serialize, Deserialize)]
struct SampleRecord {
    id: String,
    series: Vec<Vec<f64>>,
    label: Option<f64>,
    domain: Domain,
}

/// Sidecar contents for a dataset file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub num_vars: usize,
    pub num_steps: usize,
    pub task: Task,
    pub count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub graph: Option<CausalGraphSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub domain_spec: Option<DomainSpec>,
}

pub fn meta_path(dataset: &Path) -> PathBuf {
    dataset.with_extension("meta.json")
}

pub fn write_dataset(
    path: &Path,
    samples: &[TimeSeriesSample],
    id_prefix: &str,
    meta: &DatasetMeta,
) -> CliResult<()> {
    let mut out = String::new();
    for (i, sample) in samples.iter().enumerate() {
        let record = SampleRecord {
            id: format!("{id_prefix}-{i:06}"),
            series: sample.series.to_nested(),
            label: sample.label,
            domain: sample.domain,
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| CliError::runtime(format!("encoding {}: {e}", path.display())))?;
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out)
        .map_err(|e| CliError::runtime(format!("writing {}: {e}", path.display())))?;
    let meta_json = serde_json::to_string_pretty(meta)
        .map_err(|e| CliError::runtime(format!("encoding metadata: {e}")))?;
    fs::write(meta_path(path), meta_json + "\n")
        .map_err(|e| CliError::runtime(format!("writing {}: {e}", meta_path(path).display())))?;
    Ok(())
}

/// Read and validate a dataset; every line must parse and all samples
/// must share one `M × N` shape.
pub fn read_dataset(path: &Path) -> CliResult<Vec<TimeSeriesSample>> {
    let file = fs::File::open(path)
        .map_err(|e| CliError::invalid(format!("cannot open {}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line
            .map_err(|e| CliError::runtime(format!("reading {}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = serde_json::from_str(&line).map_err(|e| {
            CliError::invalid(format!("{} line {}: {e}", path.display(), lineno + 1))
        })?;
        let series = Mat::from_rows(&record.series)
            .map_err(|e| CliError::invalid(format!("{} line {}: {e}", path.display(), lineno + 1)))?;
        let sample = TimeSeriesSample::new(series, record.label, record.domain)
            .map_err(|e| CliError::invalid(format!("{} line {}: {e}", path.display(), lineno + 1)))?;
        if let Some(first) = samples.first() {
            let first: &TimeSeriesSample = first;
            if sample.num_vars() != first.num_vars() || sample.num_steps() != first.num_steps() {
                return Err(CliError::invalid(format!(
                    "{} line {}: sample is {}x{}, earlier lines are {}x{}",
                    path.display(),
                    lineno + 1,
                    sample.num_vars(),
                    sample.num_steps(),
                    first.num_vars(),
                    first.num_steps()
                )));
            }
        }
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(CliError::invalid(format!("{} holds no samples", path.display())));
    }
    Ok(samples)
}

pub fn read_meta(dataset: &Path) -> CliResult<Option<DatasetMeta>> {
    let path = meta_path(dataset);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::invalid(format!("cannot read {}: {e}", path.display())))?;
    let meta = serde_json::from_str(&text)
        .map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
    Ok(Some(meta))
}

fn default_d_h() -> usize {
    16
}
fn default_omega() -> f64 {
    1.0
}
fn default_lr() -> f64 {
    1e-3
}
fn default_batch_size() -> usize {
    32
}
fn default_epochs() -> usize {
    10
}
fn default_ablation() -> Ablation {
    Ablation::Full
}
fn default_alignment_norm() -> AlignmentNorm {
    AlignmentNorm::L2
}

/// Strict-parsed run configuration; unknown keys are fatal so a typo
/// cannot silently fall back to a default.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub source_train: PathBuf,
    pub target_train: PathBuf,
    pub target_test: PathBuf,
    pub out_dir: PathBuf,
    /// Data dimensions; validated against (or derived from) the files.
    #[serde(default)]
    pub num_vars: Option<usize>,
    #[serde(default)]
    pub num_steps: Option<usize>,
    #[serde(default)]
    pub task: Option<Task>,
    #[serde(default = "default_d_h")]
    pub d_h: usize,
    #[serde(default = "default_omega")]
    pub omega: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_ablation")]
    pub ablation: Ablation,
    #[serde(default = "default_alignment_norm")]
    pub alignment_norm: AlignmentNorm,
}

pub fn read_run_config(path: &Path) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::invalid(format!("cannot read {}: {e}", path.display())))?;
    let config: RunConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
    for (name, p) in [
        ("source_train", &config.source_train),
        ("target_train", &config.target_train),
        ("target_test", &config.target_test),
    ] {
        if !p.exists() {
            return Err(CliError::invalid(format!(
                "{name} path {} does not exist",
                p.display()
            )));
        }
    }
    Ok(config)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::invalid(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::runtime(format!("encoding {}: {e}", path.display())))?;
    fs::write(path, text + "\n")
        .map_err(|e| CliError::runtime(format!("writing {}: {e}", path.display())))
}

/// Trained parameters plus the config needed to run them.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamsSnapshot {
    Sasa { config: ModelConfig, params: ModelParams },
    LstmS2t { config: ModelConfig, params: LstmS2TParams },
}

impl ParamsSnapshot {
    pub fn config(&self) -> &ModelConfig {
        match self {
            ParamsSnapshot::Sasa { config, .. } => config,
            ParamsSnapshot::LstmS2t { config, .. } => config,
        }
    }
}

/// Fixed-column training trace: one row per epoch.
pub fn write_report_csv(path: &Path, report: &TrainReport) -> CliResult<()> {
    let mut out = String::from("epoch,l_y,l_alpha,l_beta,total,target_metric\n");
    for e in &report.epochs {
        let metric = e.target_metric.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.epoch, e.label_loss, e.alpha_loss, e.beta_loss, e.total_loss, metric
        ));
    }
    fs::write(path, out)
        .map_err(|e| CliError::runtime(format!("writing {}: {e}", path.display())))
}

/// `M × M` matrix as CSV: header of source-variable indices, one row
/// per target variable.
pub fn write_structure_csv(path: &Path, matrix: &StructureMatrix) -> CliResult<()> {
    let m = matrix.a.rows;
    let mut out = String::from("var");
    for j in 0..m {
        out.push_str(&format!(",{j}"));
    }
    out.push('\n');
    for i in 0..m {
        out.push_str(&i.to_string());
        for j in 0..m {
            out.push_str(&format!(",{}", matrix.a.get(i, j)));
        }
        out.push('\n');
    }
    fs::write(path, out)
        .map_err(|e| CliError::runtime(format!("writing {}: {e}", path.display())))
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path)
        .map_err(|e| CliError::runtime(format!("creating {}: {e}", path.display())))
}

/// Flush a line to stdout, surfacing broken pipes as runtime errors.
pub fn print_stdout(line: &str) -> CliResult<()> {
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{line}").map_err(|e| CliError::runtime(format!("stdout: {e}")))
}
