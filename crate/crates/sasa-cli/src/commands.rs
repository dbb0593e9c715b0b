//! The four subcommands. Each is a plain function over parsed
//! arguments so the integration tests can drive them directly.

use std::path::PathBuf;
use std::thread;

use clap::{Args, ValueEnum};
use serde::Serialize;

use sasa::baseline;
use sasa::metrics::MetricReport;
use sasa::model::{self, Ablation, ModelConfig, ParamCountReport, TrainReport};
use sasa::series::{Domain, Task, TimeSeriesSample};
use sasa::synth::{self, CausalGraphSpec, DomainSpec};

use crate::io::{
    create_dir, print_stdout, read_dataset, read_json, read_meta, read_run_config,
    write_dataset, write_json, write_report_csv, write_structure_csv, DatasetMeta,
    ParamsSnapshot, RunConfig,
};
use crate::{log, CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    /// Structure-alignment model.
    Sasa,
    /// Plain shared-LSTM source-to-target baseline.
    LstmS2t,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DomainArg {
    Source,
    Target,
}

impl From<DomainArg> for Domain {
    fn from(d: DomainArg) -> Domain {
        match d {
            DomainArg::Source => Domain::Source,
            DomainArg::Target => Domain::Target,
        }
    }
}

// ── gen-data ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    /// Causal graph spec JSON (defaults to the built-in benchmark graph).
    #[arg(long)]
    pub graph: Option<PathBuf>,
    /// Source domain spec JSON (defaults to lag shift 0, offsets 0..2).
    #[arg(long = "domain-src")]
    pub domain_src: Option<PathBuf>,
    /// Target domain spec JSON (defaults to lag shift +2, offsets 2..5).
    #[arg(long = "domain-tgt")]
    pub domain_tgt: Option<PathBuf>,
    /// Training samples per domain.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Test samples per domain (defaults to n/2).
    #[arg(long = "n-test")]
    pub n_test: Option<usize>,
    /// Timesteps per series.
    #[arg(long, default_value_t = 24)]
    pub len: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Output directory for the four dataset files.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_gen_data(args: &GenDataArgs) -> CliResult<()> {
    let graph: CausalGraphSpec = match &args.graph {
        Some(path) => read_json(path)?,
        None => synth::default_benchmark_graph(),
    };
    graph.validate().map_err(CliError::from)?;
    let domain_src: DomainSpec = match &args.domain_src {
        Some(path) => read_json(path)?,
        None => synth::default_source_domain(),
    };
    let domain_tgt: DomainSpec = match &args.domain_tgt {
        Some(path) => read_json(path)?,
        None => synth::default_target_domain(),
    };
    let n_test = args.n_test.unwrap_or(args.n / 2);
    if args.n == 0 || n_test == 0 {
        return Err(CliError::invalid("need at least one train and one test sample"));
    }

    create_dir(&args.out)?;
    let total = args.n + n_test;
    let train_frac = args.n as f64 / total as f64;

    let jobs = [
        (Domain::Source, &domain_src, args.seed, args.seed + 2, "source"),
        (Domain::Target, &domain_tgt, args.seed + 1, args.seed + 3, "target"),
    ];
    for (domain, spec, gen_seed, split_seed, stem) in jobs {
        let samples = synth::generate(&graph, spec, total, args.len, gen_seed, domain)
            .map_err(|e| CliError::invalid(e.to_string()))?;
        let (train, test) = synth::split(samples, train_frac, split_seed, graph.task)
            .map_err(|e| CliError::invalid(e.to_string()))?;
        let meta = |count: usize| DatasetMeta {
            num_vars: graph.num_vars,
            num_steps: args.len,
            task: graph.task,
            count,
            seed: Some(args.seed),
            graph: Some(graph.clone()),
            domain_spec: Some(spec.clone()),
        };
        let train_path = args.out.join(format!("{stem}_train.ndjson"));
        let test_path = args.out.join(format!("{stem}_test.ndjson"));
        write_dataset(&train_path, &train, &format!("{stem}-train"), &meta(train.len()))?;
        write_dataset(&test_path, &test, &format!("{stem}-test"), &meta(test.len()))?;
        log::info(format!(
            "wrote {} ({} samples) and {} ({} samples)",
            train_path.display(),
            train.len(),
            test_path.display(),
            test.len()
        ));
    }
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Run configuration JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Override the config's ablation.
    #[arg(long, value_enum)]
    pub ablation: Option<AblationArg>,
    /// Override the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run this many consecutive seeds (seed, seed+1, ...).
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
    /// Which model to train.
    #[arg(long, value_enum, default_value_t = ModelKind::Sasa)]
    pub model: ModelKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblationArg {
    Full,
    NoAlpha,
    NoBeta,
    SourceOnly,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Ablation {
        match a {
            AblationArg::Full => Ablation::Full,
            AblationArg::NoAlpha => Ablation::NoAlpha,
            AblationArg::NoBeta => Ablation::NoBeta,
            AblationArg::SourceOnly => Ablation::SourceOnly,
        }
    }
}

#[derive(Debug, Serialize)]
struct SeedSummary {
    seed: u64,
    final_target_metric: Option<f64>,
    final_label_loss: f64,
    epochs: usize,
    wall_secs_total: f64,
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    model: String,
    ablation: Ablation,
    metric: String,
    seeds: Vec<u64>,
    per_seed: Vec<SeedSummary>,
    mean_target_metric: Option<f64>,
    param_count: ParamCountReport,
}

/// Datasets plus the resolved model config for a run.
pub struct ResolvedRun {
    pub config: ModelConfig,
    pub out_dir: PathBuf,
    pub source_train: Vec<TimeSeriesSample>,
    pub target_train: Vec<TimeSeriesSample>,
    pub target_test: Vec<TimeSeriesSample>,
}

/// Load datasets and reconcile dimensions between config and data.
pub fn resolve_run(run: &RunConfig) -> CliResult<ResolvedRun> {
    let source_train = read_dataset(&run.source_train)?;
    let target_train = read_dataset(&run.target_train)?;
    let target_test = read_dataset(&run.target_test)?;

    let data_m = source_train[0].num_vars();
    let data_n = source_train[0].num_steps();
    let num_vars = run.num_vars.unwrap_or(data_m);
    let num_steps = run.num_steps.unwrap_or(data_n);
    if num_vars != data_m || num_steps != data_n {
        return Err(CliError::invalid(format!(
            "config says {num_vars}x{num_steps} but {} holds {data_m}x{data_n} samples",
            run.source_train.display()
        )));
    }

    let task = match run.task {
        Some(task) => task,
        None => match read_meta(&run.source_train)? {
            Some(meta) => meta.task,
            None => {
                return Err(CliError::invalid(
                    "task not in config and no dataset metadata to infer it from",
                ))
            }
        },
    };

    let config = ModelConfig {
        num_vars,
        num_steps,
        d_h: run.d_h,
        task,
        omega: run.omega,
        lr: run.lr,
        batch_size: run.batch_size,
        epochs: run.epochs,
        seed: run.seed,
        ablation: run.ablation,
        alignment_norm: run.alignment_norm,
    };
    config.validate().map_err(CliError::from)?;
    Ok(ResolvedRun {
        config,
        out_dir: run.out_dir.clone(),
        source_train,
        target_train,
        target_test,
    })
}

struct SeedOutcome {
    seed: u64,
    report: TrainReport,
    metric_name: String,
}

fn run_one_seed(resolved: &ResolvedRun, kind: ModelKind, seed: u64) -> CliResult<SeedOutcome> {
    let config = ModelConfig { seed, ..resolved.config.clone() };
    let metric_name = match config.task {
        Task::Classification => "auc",
        Task::Regression => "rmse",
    }
    .to_string();

    let (snapshot, report) = match kind {
        ModelKind::Sasa => {
            let (params, report) = model::train(
                &resolved.source_train,
                &resolved.target_train,
                Some(&resolved.target_test),
                &config,
            )?;
            (ParamsSnapshot::Sasa { config: config.clone(), params }, report)
        }
        ModelKind::LstmS2t => {
            let (params, epochs) =
                baseline::train_lstm_s2t(&resolved.source_train, Some(&resolved.target_test), &config)?;
            let total = params.param_count();
            let predictor = params.predictor.param_count();
            let report = TrainReport {
                epochs,
                param_count: ParamCountReport {
                    lstm: total - predictor,
                    projection: 0,
                    predictor,
                    total,
                },
                final_structure_source: None,
                final_structure_target: None,
            };
            (ParamsSnapshot::LstmS2t { config: config.clone(), params }, report)
        }
    };

    write_report_csv(&resolved.out_dir.join(format!("seed{seed}_report.csv")), &report)?;
    write_json(&resolved.out_dir.join(format!("seed{seed}_params.json")), &snapshot)?;
    Ok(SeedOutcome { seed, report, metric_name })
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    if args.seeds == 0 {
        return Err(CliError::invalid("--seeds must be at least 1"));
    }
    let run = read_run_config(&args.config)?;
    let mut run = run;
    if let Some(ablation) = args.ablation {
        run.ablation = ablation.into();
    }
    if let Some(seed) = args.seed {
        run.seed = seed;
    }
    let resolved = resolve_run(&run)?;
    create_dir(&resolved.out_dir)?;

    let seeds: Vec<u64> = (0..args.seeds as u64).map(|k| resolved.config.seed + k).collect();
    log::info(format!(
        "training {:?} ({:?}) on {} source / {} target samples, seeds {:?}",
        args.model,
        resolved.config.ablation,
        resolved.source_train.len(),
        resolved.target_train.len(),
        seeds
    ));

    // Independent single-threaded runs; parallel across seeds only.
    let outcomes: Vec<SeedOutcome> = if seeds.len() == 1 {
        vec![run_one_seed(&resolved, args.model, seeds[0])?]
    } else {
        let resolved_ref = &resolved;
        let results: Vec<CliResult<SeedOutcome>> = thread::scope(|scope| {
            let handles: Vec<_> = seeds
                .iter()
                .map(|&seed| scope.spawn(move || run_one_seed(resolved_ref, args.model, seed)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(CliError::runtime("training thread panicked"))))
                .collect()
        });
        results.into_iter().collect::<CliResult<Vec<_>>>()?
    };

    let per_seed: Vec<SeedSummary> = outcomes
        .iter()
        .map(|o| {
            let last = o.report.epochs.last();
            SeedSummary {
                seed: o.seed,
                final_target_metric: last.and_then(|e| e.target_metric),
                final_label_loss: last.map(|e| e.label_loss).unwrap_or(f64::NAN),
                epochs: o.report.epochs.len(),
                wall_secs_total: o.report.epochs.iter().map(|e| e.wall_secs).sum(),
            }
        })
        .collect();
    let metrics: Vec<f64> = per_seed.iter().filter_map(|s| s.final_target_metric).collect();
    let mean_target_metric = if metrics.is_empty() {
        None
    } else {
        Some(metrics.iter().sum::<f64>() / metrics.len() as f64)
    };

    let summary = TrainSummary {
        model: format!("{:?}", args.model).to_lowercase(),
        ablation: resolved.config.ablation,
        metric: outcomes[0].metric_name.clone(),
        seeds,
        per_seed,
        mean_target_metric,
        param_count: outcomes[0].report.param_count.clone(),
    };
    write_json(&resolved.out_dir.join("summary.json"), &summary)?;
    if let Some(mean) = mean_target_metric {
        log::info(format!("mean target {} = {mean:.4}", summary.metric));
    }
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Parameter snapshot from `train`.
    #[arg(long)]
    pub params: PathBuf,
    /// Dataset to score.
    #[arg(long)]
    pub data: PathBuf,
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<MetricReport> {
    let snapshot: ParamsSnapshot = read_json(&args.params)?;
    let samples = read_dataset(&args.data)?;
    let report = match &snapshot {
        ParamsSnapshot::Sasa { config, params } => {
            model::evaluate(params, &samples, config).map_err(invalid_input)?
        }
        ParamsSnapshot::LstmS2t { config, params } => {
            baseline::evaluate(params, &samples, config).map_err(invalid_input)?
        }
    };
    let line = serde_json::to_string(&report)
        .map_err(|e| CliError::runtime(format!("encoding report: {e}")))?;
    print_stdout(&line)?;
    Ok(report)
}

/// Evaluation failures are bad inputs (dimension or label problems).
fn invalid_input(err: sasa::Error) -> CliError {
    CliError::invalid(err.to_string())
}

// ── export-structure ───────────────────────────────────────────────

#[derive(Debug, Clone, Args)]
pub struct ExportArgs {
    /// Parameter snapshot from `train` (structure model only).
    #[arg(long)]
    pub params: PathBuf,
    /// Dataset whose batch-averaged structure to export.
    #[arg(long)]
    pub data: PathBuf,
    /// Keep only samples tagged with this domain.
    #[arg(long, value_enum)]
    pub domain: DomainArg,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_export_structure(args: &ExportArgs) -> CliResult<()> {
    let snapshot: ParamsSnapshot = read_json(&args.params)?;
    let (config, params) = match &snapshot {
        ParamsSnapshot::Sasa { config, params } => (config, params),
        ParamsSnapshot::LstmS2t { .. } => {
            return Err(CliError::invalid(
                "the baseline has no associative structure to export",
            ))
        }
    };
    let wanted: Domain = args.domain.into();
    let samples: Vec<TimeSeriesSample> = read_dataset(&args.data)?
        .into_iter()
        .filter(|s| s.domain == wanted)
        .collect();
    if samples.is_empty() {
        return Err(CliError::invalid(format!(
            "{} has no samples tagged {:?}",
            args.data.display(),
            wanted
        )));
    }
    let matrix = model::structure_of(params, &samples, config).map_err(invalid_input)?;
    write_structure_csv(&args.out, &matrix)?;
    log::info(format!("wrote {}", args.out.display()));
    Ok(())
}
