//! Collects evaluation outputs and run records and emits the per-channel
//! tables (text and JSON), loss-curve plots and per-route segment traces.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use bevcvt_core::metrics::{MetricsReport, MetricsTable};
use bevcvt_nn::training::{ExperimentReport, RunRecord, RUN_FILE, TEST_TABLE_TITLE, VAL_TABLE_TITLE};

use crate::plot::{self, LossSeries};
use crate::CliError;

pub const EXPERIMENT_FILE: &str = "experiment.json";

/// Evaluation outputs grouped into tables, plus the runs they came from.
#[derive(Debug, Default)]
pub struct ReportInputs {
    /// `(group, report)` in input order; group is the split, or
    /// `test_best` for best-validation checkpoints.
    pub reports: Vec<(String, MetricsReport)>,
    pub runs: Vec<RunRecord>,
}

/// What `report` wrote.
#[derive(Debug, Default)]
pub struct ReportOutputs {
    pub tables: BTreeMap<String, MetricsTable>,
    pub files: Vec<PathBuf>,
}

pub fn table_title(group: &str) -> String {
    match group {
        "val" => VAL_TABLE_TITLE.to_string(),
        "test" => TEST_TABLE_TITLE.to_string(),
        "test_best" => format!("{TEST_TABLE_TITLE} (best-validation checkpoint)"),
        other => format!("Per-channel mIoU - {other}"),
    }
}

pub fn slug(name: &str) -> String {
    let s: String = name.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect();
    s.split('_').filter(|p| !p.is_empty()).collect::<Vec<_>>().join("_")
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn group_of(path: &Path, report: &MetricsReport) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
    if stem.contains("best") {
        format!("{}_best", report.split)
    } else {
        report.split.clone()
    }
}

impl ReportInputs {
    fn add_experiment(&mut self, exp: ExperimentReport) {
        for o in exp.outcomes {
            for (group, r) in [("val", o.val), ("test", o.test), ("test_best", o.test_best)] {
                if let Some(r) = r {
                    self.reports.push((group.to_string(), r));
                }
            }
            self.runs.extend(o.run);
        }
    }

    fn add_run_dir(&mut self, dir: &Path) -> Result<(), CliError> {
        self.runs.push(RunRecord::load(dir)?);
        let mut evals: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| CliError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                let name = p.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default();
                name.starts_with("eval_") && name.ends_with(".json")
            })
            .collect();
        evals.sort();
        for p in evals {
            let r: MetricsReport = read_json(&p)?;
            self.reports.push((group_of(&p, &r), r));
        }
        Ok(())
    }

    /// Accepts evaluation JSON files, run directories (with `run.jsonl` and
    /// any `eval_*.json`) and experiment directories or `experiment.json`.
    pub fn load(paths: &[PathBuf]) -> Result<Self, CliError> {
        let missing: Vec<String> = paths.iter().filter(|p| !p.exists()).map(|p| p.display().to_string()).collect();
        if !missing.is_empty() {
            return Err(CliError::Input(format!("missing inputs: {}", missing.join(", "))));
        }
        let mut inputs = Self::default();
        for path in paths {
            if path.is_dir() {
                if path.join(EXPERIMENT_FILE).exists() {
                    inputs.add_experiment(read_json(&path.join(EXPERIMENT_FILE))?);
                } else if path.join(RUN_FILE).exists() {
                    inputs.add_run_dir(path)?;
                } else {
                    return Err(CliError::Input(format!("{} holds neither {EXPERIMENT_FILE} nor {RUN_FILE}", path.display())));
                }
            } else if path.file_name().is_some_and(|n| n == EXPERIMENT_FILE) {
                inputs.add_experiment(read_json(path)?);
            } else {
                let r: MetricsReport = read_json(path)?;
                inputs.reports.push((group_of(path, &r), r));
            }
        }
        if inputs.reports.is_empty() {
            return Err(CliError::Input("no evaluation outputs among the inputs".into()));
        }
        Ok(inputs)
    }
}

/// Writes `table_<group>.{txt,json}`, `losses.svg` plus one loss plot per
/// run, and `traces/<model>_<group>/<town>_<route>.svg`.
pub fn write_report(inputs: &ReportInputs, out: &Path) -> Result<ReportOutputs, CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let mut outputs = ReportOutputs::default();
    let mut groups: Vec<&str> = Vec::new();
    for (g, _) in &inputs.reports {
        if !groups.contains(&g.as_str()) {
            groups.push(g);
        }
    }
    for group in groups {
        let reports = inputs.reports.iter().filter(|(g, _)| g == group).map(|(_, r)| r);
        let table = MetricsTable::from_reports(table_title(group), reports);
        for (ext, text) in [("txt", table.to_text()), ("json", table.to_json() + "\n")] {
            let path = out.join(format!("table_{group}.{ext}"));
            fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
            outputs.files.push(path);
        }
        outputs.tables.insert(group.to_string(), table);
    }

    let series: Vec<LossSeries> =
        inputs.runs.iter().map(|r| LossSeries { name: r.name.clone(), train: r.train_losses(), val: r.val_losses() }).collect();
    if !series.is_empty() {
        let path = out.join("losses.svg");
        plot::loss_curves(&path, &series, "Training and validation loss per epoch")?;
        outputs.files.push(path);
        for s in &series {
            let path = out.join(format!("losses_{}.svg", slug(&s.name)));
            plot::loss_curves(&path, std::slice::from_ref(s), &s.name)?;
            outputs.files.push(path);
        }
    }

    for (group, report) in &inputs.reports {
        if report.traces.is_empty() {
            continue;
        }
        let dir = out.join("traces").join(format!("{}_{group}", slug(&report.model)));
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        for (route, trace) in &report.traces {
            let path = dir.join(format!("{}.svg", slug(route)));
            plot::segment_trace(&path, trace, &format!("{} - {route}", report.model))?;
            outputs.files.push(path);
        }
    }
    Ok(outputs)
}
