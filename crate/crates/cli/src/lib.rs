//! `bevcvt` command line: dataset generation and ingestion, training,
//! evaluation, the experiment matrix, reports and inference panels.

pub mod config;
pub mod plot;
pub mod report;
pub mod visualize;

use std::fs;
use std::path::{Path, PathBuf};

use bevcvt_core::dataset::{
    generate_dataset, ingest_external, read_sample, DatasetConfig, DatasetError, IngestOptions, PoseConvention, SampleId,
    Split,
};
use bevcvt_core::geometry::CameraRecord;
use bevcvt_nn::training::{
    adapt_views, evaluate, logits_to_mask, standard_matrix, predict, run_experiment_matrix, train_model, ExperimentCell,
    TrainConfig, RUN_FILE,
};
use bevcvt_nn::{BevModel, NnError};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("plot {0}")]
    Plot(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    /// 2 for invalid invocations, 1 for everything that failed while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Dataset(DatasetError::InvalidArgument(_)) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "bevcvt", version, about = "Multi-camera bird's-eye-view map prediction on a synthetic world")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON config file layered over the built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Config override `dotted.key=value` (value parsed as JSON when possible); repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Dataset root.
    #[arg(long, env = "BEVCVT_DATA_ROOT", global = true)]
    pub root: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate towns, routes and rendered frames with the split manifest.
    GenData,
    /// Normalize pre-recorded frames into the dataset layout.
    Ingest {
        /// Directory with <town>/<route>/<frame>/ recordings.
        #[arg(long)]
        src: PathBuf,
    },
    /// Train one model.
    Train,
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Train and evaluate the model × loss × views matrix, then report.
    Experiment,
    /// Tables and plots from evaluation outputs, run directories or experiments.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Inference panels for individual samples.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample ids `town/route/frame`.
        #[arg(long = "sample", required = true)]
        samples: Vec<String>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
}

/// Options of `ingest`, settable through `--config`/`--set`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    pub convention: PoseConvention,
    pub rig_override: Option<Vec<CameraRecord>>,
    pub tolerance: f64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        let d = IngestOptions::default();
        Self { convention: d.convention, rig_override: d.rig_override, tolerance: d.tolerance }
    }
}

/// Options of `experiment`: the shared training setup and the cells to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub cells: Vec<ExperimentCell>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { train: TrainConfig::default(), cells: standard_matrix() }
    }
}

fn data_root(global: &GlobalArgs) -> Result<&Path, CliError> {
    global
        .root
        .as_deref()
        .ok_or_else(|| CliError::Usage("no dataset root: pass --root or set BEVCVT_DATA_ROOT".into()))
}

fn no_config(global: &GlobalArgs, command: &str) -> Result<(), CliError> {
    if global.config.is_some() || !global.overrides.is_empty() {
        return Err(CliError::Usage(format!("{command} takes no --config/--set")));
    }
    Ok(())
}

fn refuse_existing(path: &Path, force: bool) -> Result<(), CliError> {
    if path.exists() && !force {
        return Err(CliError::Failed(format!("{} exists; pass --force to replace it", path.display())));
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn parse_sample_id(text: &str) -> Result<SampleId, CliError> {
    match text.split('/').collect::<Vec<_>>()[..] {
        [town, route, frame] if !town.is_empty() && !route.is_empty() && !frame.is_empty() => {
            Ok(SampleId { town: town.into(), route: route.into(), frame: frame.into() })
        }
        _ => Err(CliError::Usage(format!("sample id '{text}' is not of the form town/route/frame"))),
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    match &cli.command {
        Command::GenData => {
            let cfg: DatasetConfig = config::resolve(g.config.as_deref(), &g.overrides)?;
            let root = g.out.as_deref().or(g.root.as_deref()).ok_or_else(|| {
                CliError::Usage("no dataset root: pass --out, --root or set BEVCVT_DATA_ROOT".into())
            })?;
            let summary = generate_dataset(&cfg, root, g.force)?;
            print!("{}", summary.listing());
            write_text(&root.join("generation.json"), &(serde_json::to_string_pretty(&summary)? + "\n"))?;
        }
        Command::Ingest { src } => {
            let cfg: IngestConfig = config::resolve(g.config.as_deref(), &g.overrides)?;
            let dest = g.out.as_deref().or(g.root.as_deref()).ok_or_else(|| {
                CliError::Usage("no destination: pass --out, --root or set BEVCVT_DATA_ROOT".into())
            })?;
            let options = IngestOptions { convention: cfg.convention, rig_override: cfg.rig_override, tolerance: cfg.tolerance, force: g.force };
            let summary = ingest_external(src, dest, &options)?;
            println!("ingested {} frames from {} routes into {}", summary.frames, summary.routes.len(), dest.display());
        }
        Command::Train => {
            let cfg: TrainConfig = config::resolve(g.config.as_deref(), &g.overrides)?;
            cfg.validate()?;
            let root = data_root(g)?;
            let out = g.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(report::slug(&cfg.display_name())));
            refuse_existing(&out.join(RUN_FILE), g.force)?;
            let run = train_model(&cfg, root, &out)?;
            for e in &run.epochs {
                println!("epoch {:>3}  train {:.6}  val {:.6}", e.epoch, e.train_loss, e.val_loss);
            }
            println!("{}: best epoch {}, checkpoints in {}", run.name, run.best_epoch, out.display());
        }
        Command::Eval { checkpoint, split, threshold } => {
            no_config(g, "eval")?;
            let root = data_root(g)?;
            let report = evaluate(checkpoint, root, *split, *threshold)?;
            let out = g.out.clone().unwrap_or_else(|| checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
            let path = out.join(format!("eval_{split}.json"));
            write_text(&path, &(serde_json::to_string_pretty(&report)? + "\n"))?;
            let table = bevcvt_core::metrics::MetricsTable::from_reports(report::table_title(&split.to_string()), [&report]);
            print!("{}", table.to_text());
            println!("wrote {}", path.display());
        }
        Command::Experiment => {
            let cfg: ExperimentConfig = config::resolve(g.config.as_deref(), &g.overrides)?;
            cfg.train.validate()?;
            if cfg.cells.is_empty() {
                return Err(CliError::Usage("experiment needs at least one cell".into()));
            }
            let root = data_root(g)?;
            let out = g.out.clone().unwrap_or_else(|| PathBuf::from("experiment"));
            refuse_existing(&out.join(report::EXPERIMENT_FILE), g.force)?;
            let started = std::time::Instant::now();
            let result = run_experiment_matrix(&cfg.train, &cfg.cells, root, &out)?;
            let inputs = report::ReportInputs::load(std::slice::from_ref(&out));
            match inputs {
                Ok(inputs) => {
                    let written = report::write_report(&inputs, &out.join("report"))?;
                    for table in written.tables.values() {
                        println!("{}", table.to_text());
                    }
                }
                Err(e) => log::error!("no report: {e}"),
            }
            println!("experiment finished in {:.0} s", started.elapsed().as_secs_f64());
            let failed: Vec<String> =
                result.outcomes.iter().filter_map(|o| o.error.as_ref().map(|e| format!("{}: {e}", o.name))).collect();
            if !failed.is_empty() {
                return Err(CliError::Failed(format!("{} cell(s) failed:\n  {}", failed.len(), failed.join("\n  "))));
            }
        }
        Command::Report { inputs } => {
            no_config(g, "report")?;
            let loaded = report::ReportInputs::load(inputs)?;
            let out = g.out.clone().unwrap_or_else(|| PathBuf::from("report"));
            let written = report::write_report(&loaded, &out)?;
            for table in written.tables.values() {
                println!("{}", table.to_text());
            }
            println!("wrote {} files to {}", written.files.len(), out.display());
        }
        Command::Visualize { checkpoint, samples, threshold } => {
            no_config(g, "visualize")?;
            let root = data_root(g)?;
            let ids = samples.iter().map(|s| parse_sample_id(s)).collect::<Result<Vec<_>, _>>()?;
            let unknown: Vec<String> = ids.iter().filter(|id| !id.dir(root).is_dir()).map(ToString::to_string).collect();
            if !unknown.is_empty() {
                return Err(CliError::Input(format!("unknown sample id(s): {}", unknown.join(", "))));
            }
            let device = candle_core::Device::Cpu;
            let model = BevModel::load(checkpoint, &device)?;
            let n_views = model.config().n_views();
            let out = g.out.clone().unwrap_or_else(|| PathBuf::from("panels"));
            fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
            for id in ids {
                let sample = adapt_views(read_sample(&id.dir(root))?, n_views)?;
                let logits = predict(&model, std::slice::from_ref(&sample), 1, &device)?;
                let mask = logits_to_mask(&logits[0], *threshold)?;
                let (_, panel) = visualize::render_panel(&sample, &mask);
                let path = out.join(panel_file_name(&id));
                panel.save(&path)?;
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

pub fn panel_file_name(id: &SampleId) -> String {
    format!("panel_{}_{}_{}.png", id.town, id.route, id.frame)
}
