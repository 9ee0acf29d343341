//! Deterministic training loop, evaluation and the six-cell experiment matrix.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bevcvt_core::dataset::{batch_order, drop_rear_view, read_sample, Sample, Split, SplitManifest};
use bevcvt_core::metrics::{binarize, iou_per_channel, mean_iou, segment_trace, ChannelIoU, MetricsReport, MetricsTable};
use candle_core::{Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::cvt::CvtConfig;
use crate::error::io_err;
use crate::losses::{LossConfig, LossKind};
use crate::model::{BevModel, ModelConfig, ModelKind};
use crate::unet::UnetConfig;
use crate::{NnError, Result};

pub const RUN_FILE: &str = "run.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const LAST_CHECKPOINT: &str = "last.safetensors";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from the base rate to zero over all epochs.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub n_views: usize,
    pub loss: LossConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    pub seed: u64,
    /// Extra checkpoint every this many epochs; 0 keeps only best and last.
    pub checkpoint_every: usize,
    /// Evenly spaced subset of the training split, when set.
    pub max_train_samples: Option<usize>,
    pub max_val_samples: Option<usize>,
    pub threshold: f64,
    pub cvt: CvtConfig,
    pub unet: UnetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Cvt,
            n_views: 4,
            loss: LossConfig::default(),
            epochs: 20,
            batch_size: 8,
            learning_rate: 3e-4,
            lr_schedule: LrSchedule::Constant,
            weight_decay: 0.0,
            seed: 0,
            checkpoint_every: 0,
            max_train_samples: None,
            max_val_samples: None,
            threshold: 0.5,
            cvt: CvtConfig::default(),
            unet: UnetConfig::default(),
        }
    }
}

impl TrainConfig {
    /// A fifty-epoch schedule for longer runs.
    pub fn long_preset() -> Self {
        Self { epochs: 50, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(NnError::Config(format!("epochs ({}) and batch size ({}) must be >= 1", self.epochs, self.batch_size)));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(NnError::Config("learning rate must be > 0 and weight decay >= 0".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(NnError::Config(format!("threshold must be in (0, 1) (got {})", self.threshold)));
        }
        if self.n_views == 0 {
            return Err(NnError::Config("n_views must be >= 1".into()));
        }
        self.loss.validate()
    }

    /// Table label, e.g. `CVT, Focal loss - 4 cams`.
    pub fn display_name(&self) -> String {
        let arch = match self.model {
            ModelKind::Cvt => "CVT",
            ModelKind::Unet => "Unet",
        };
        let loss = match self.loss.kind {
            LossKind::Focal => "Focal loss",
            LossKind::L1 => "L1",
        };
        format!("{arch}, {loss} - {} cams", self.n_views)
    }

    /// Model config with views, image size and grid taken from the dataset.
    pub fn model_config(&self, manifest: &SplitManifest) -> ModelConfig {
        let image_size = [manifest.rig.height as usize, manifest.rig.width as usize];
        let bev_size = [manifest.grid.height, manifest.grid.width];
        match self.model {
            ModelKind::Cvt => ModelConfig::Cvt(CvtConfig { n_views: self.n_views, image_size, bev_size, ..self.cvt.clone() }),
            ModelKind::Unet => ModelConfig::Unet(UnetConfig { n_views: self.n_views, image_size, bev_size, ..self.unet.clone() }),
        }
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * epoch as f64 / self.epochs as f64).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub elapsed_s: f64,
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
}

impl RunRecord {
    /// Reads `config.json` and `run.jsonl` from a run directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join(CONFIG_FILE);
        let config: TrainConfig = serde_json::from_str(&fs::read_to_string(&cfg_path).map_err(io_err(&cfg_path))?)?;
        let run_path = dir.join(RUN_FILE);
        let text = fs::read_to_string(&run_path).map_err(io_err(&run_path))?;
        let epochs = text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<std::result::Result<Vec<EpochRecord>, _>>()?;
        let best_epoch = epochs
            .iter()
            .min_by(|a, b| a.val_loss.total_cmp(&b.val_loss))
            .map_or(0, |e| e.epoch);
        Ok(Self {
            name: config.display_name(),
            config,
            epochs,
            best_epoch,
            best_checkpoint: dir.join(BEST_CHECKPOINT),
            last_checkpoint: dir.join(LAST_CHECKPOINT),
        })
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn val_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_loss).collect()
    }
}

/// Samples of a split with the view count reduced to `n_views` (the rear
/// view is the one dropped); `limit` keeps an evenly spaced subset.
pub fn load_split(root: &Path, manifest: &SplitManifest, split: Split, n_views: usize, limit: Option<usize>) -> Result<Vec<Sample>> {
    let frames = manifest.frames(root, split)?;
    if frames.is_empty() {
        return Err(NnError::Config(format!("split {split} has no frames under {}", root.display())));
    }
    let picked: Vec<&PathBuf> = match limit {
        Some(k) if k < frames.len() => (0..k).map(|i| &frames[i * frames.len() / k]).collect(),
        _ => frames.iter().collect(),
    };
    picked.into_iter().map(|dir| adapt_views(read_sample(dir)?, n_views)).collect()
}

pub fn adapt_views(sample: Sample, n_views: usize) -> Result<Sample> {
    match sample.views.len() {
        n if n == n_views => Ok(sample),
        n if n == n_views + 1 => Ok(drop_rear_view(sample)?),
        n => Err(NnError::Config(format!("sample {} has {n} views, model expects {n_views}", sample.id))),
    }
}

pub fn check_rig(manifest: &SplitManifest, n_views: usize) -> Result<()> {
    let available = manifest.rig.n_views;
    if n_views != available && !(n_views + 1 == available && available == 4) {
        return Err(NnError::Config(format!("model expects {n_views} views but the dataset rig records {available}")));
    }
    Ok(())
}

/// One model plus its optimizer and objective.
pub struct Trainer {
    pub model: BevModel,
    pub loss: LossConfig,
    opt: AdamW,
}

impl Trainer {
    pub fn new(model: BevModel, loss: LossConfig, learning_rate: f64, weight_decay: f64) -> Result<Self> {
        loss.validate()?;
        let params = ParamsAdamW { lr: learning_rate, weight_decay, ..ParamsAdamW::default() };
        let opt = AdamW::new(model.params().vars(), params)?;
        Ok(Self { model, loss, opt })
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.opt.set_learning_rate(lr);
    }

    /// One optimizer step; returns the loss before the update. A non-finite
    /// loss leaves the parameters untouched.
    pub fn step(&mut self, batch: &Batch) -> Result<f64> {
        let loss = self.loss.compute(&self.model.forward(batch)?, &batch.target)?;
        let value = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        if value.is_finite() {
            self.opt.backward_step(&loss)?;
        }
        Ok(value)
    }
}

/// Loss without any parameter update.
pub fn batch_loss(model: &BevModel, loss: &LossConfig, batch: &Batch) -> Result<f64> {
    let logits = model.forward(batch)?.detach();
    Ok(loss.compute(&logits, &batch.target)?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

fn mean_loss(model: &BevModel, loss: &LossConfig, samples: &[Sample], batch_size: usize, device: &Device) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(batch_size) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        total += batch_loss(model, loss, &Batch::from_samples(&refs, device)?)? * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

fn append_line(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    writeln!(f, "{}", serde_json::to_string(value)?).map_err(io_err(path))
}

/// Trains one model on the `train` split, validating after every epoch.
/// Writes `config.json`, `run.jsonl` (one line per epoch) and the best-val
/// and last checkpoints into `out_dir`.
pub fn train_model(config: &TrainConfig, data_root: &Path, out_dir: &Path) -> Result<RunRecord> {
    config.validate()?;
    let manifest = SplitManifest::load(data_root)?;
    check_rig(&manifest, config.n_views)?;
    let device = Device::Cpu;
    let train = load_split(data_root, &manifest, Split::Train, config.n_views, config.max_train_samples)?;
    let val = load_split(data_root, &manifest, Split::Val, config.n_views, config.max_val_samples)?;
    let model = BevModel::new(&config.model_config(&manifest), config.seed, &device)?;
    train_on(config, model, &train, &val, out_dir)
}

/// Training loop over in-memory samples.
pub fn train_on(config: &TrainConfig, model: BevModel, train: &[Sample], val: &[Sample], out_dir: &Path) -> Result<RunRecord> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(NnError::Config("training and validation sets must be non-empty".into()));
    }
    let device = Device::Cpu;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let cfg_path = out_dir.join(CONFIG_FILE);
    fs::write(&cfg_path, serde_json::to_string_pretty(config)? + "\n").map_err(io_err(&cfg_path))?;
    let run_path = out_dir.join(RUN_FILE);
    fs::write(&run_path, "").map_err(io_err(&run_path))?;
    let name = config.display_name();
    let label = [("label", name.clone())];

    let mut trainer = Trainer::new(model, config.loss.clone(), config.learning_rate, config.weight_decay)?;
    let start = Instant::now();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best = (f64::INFINITY, 0);
    for epoch in 0..config.epochs {
        trainer.set_learning_rate(config.lr_at(epoch));
        let mut total = 0.0;
        for (bi, idx) in batch_order(train.len(), config.batch_size, config.seed, epoch).iter().enumerate() {
            let refs: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            let batch = Batch::from_samples(&refs, &device)?;
            let value = trainer.step(&batch)?;
            if !value.is_finite() {
                let samples = batch.ids.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ");
                return Err(NnError::NonFinite { epoch: epoch + 1, batch: bi, value, samples });
            }
            total += value * idx.len() as f64;
        }
        let train_loss = total / train.len() as f64;
        let val_loss = mean_loss(&trainer.model, &config.loss, val, config.batch_size, &device)?;
        if !val_loss.is_finite() {
            return Err(NnError::NonFinite { epoch: epoch + 1, batch: 0, value: val_loss, samples: "validation".into() });
        }
        let mut checkpoints = vec![out_dir.join(LAST_CHECKPOINT)];
        if val_loss < best.0 {
            best = (val_loss, epoch + 1);
            checkpoints.push(out_dir.join(BEST_CHECKPOINT));
        }
        if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
            checkpoints.push(out_dir.join(format!("epoch{:03}.safetensors", epoch + 1)));
        }
        for path in &checkpoints {
            trainer.model.save_with(path, &label)?;
        }
        let record = EpochRecord { epoch: epoch + 1, train_loss, val_loss, elapsed_s: start.elapsed().as_secs_f64(), checkpoints };
        log::info!("{name}: epoch {} train {train_loss:.5} val {val_loss:.5} ({:.0} s)", epoch + 1, record.elapsed_s);
        append_line(&run_path, &record)?;
        epochs.push(record);
    }
    Ok(RunRecord {
        name,
        config: config.clone(),
        epochs,
        best_epoch: best.1,
        best_checkpoint: out_dir.join(BEST_CHECKPOINT),
        last_checkpoint: out_dir.join(LAST_CHECKPOINT),
    })
}

/// Logits of every sample, `(3, Hg, Wg)` each.
pub fn predict(model: &BevModel, samples: &[Sample], batch_size: usize, device: &Device) -> Result<Vec<Array3<f32>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let logits = model.forward(&Batch::from_samples(&refs, device)?)?.detach();
        let (b, c, h, w) = logits.dims4()?;
        let flat = logits.flatten_all()?.to_vec1::<f32>()?;
        for i in 0..b {
            let part = flat[i * c * h * w..(i + 1) * c * h * w].to_vec();
            out.push(Array3::from_shape_vec((c, h, w), part).expect("logit shape"));
        }
    }
    Ok(out)
}

/// Scores logits against ground truth: overall per-channel mIoU, a
/// per-route breakdown and per-route segment traces in frame order.
pub fn score_predictions(model: &str, split: &str, samples: &[Sample], logits: &[Array3<f32>], threshold: f64) -> Result<MetricsReport> {
    if samples.len() != logits.len() {
        return Err(NnError::Config(format!("{} samples but {} predictions", samples.len(), logits.len())));
    }
    let mut all = Vec::with_capacity(samples.len());
    let mut routes: BTreeMap<String, Vec<(String, ChannelIoU, bevcvt_core::metrics::SegmentLabel)>> = BTreeMap::new();
    for (s, l) in samples.iter().zip(logits) {
        let pred = binarize(l, threshold)?;
        let gt = s.bev_gt.data.mapv(|v| v != 0);
        let iou = iou_per_channel(&pred, &gt)?;
        routes.entry(format!("{}/{}", s.id.town, s.id.route)).or_default().push((s.id.frame.clone(), iou.clone(), s.segment));
        all.push(iou);
    }
    let mut per_route = BTreeMap::new();
    let mut traces = BTreeMap::new();
    for (route, mut frames) in routes {
        frames.sort_by(|a, b| a.0.cmp(&b.0));
        let ious: Vec<ChannelIoU> = frames.iter().map(|f| f.1.clone()).collect();
        let labels: Vec<_> = frames.iter().map(|f| f.2).collect();
        per_route.insert(route.clone(), mean_iou(&ious));
        traces.insert(route, segment_trace(&ious, &labels)?);
    }
    Ok(MetricsReport { model: model.to_string(), split: split.to_string(), threshold, overall: mean_iou(&all), per_route, traces })
}

pub fn evaluate_model(model: &BevModel, name: &str, split: &str, samples: &[Sample], threshold: f64, batch_size: usize) -> Result<MetricsReport> {
    let logits = predict(model, samples, batch_size, &Device::Cpu)?;
    score_predictions(name, split, samples, &logits, threshold)
}

/// Loads a checkpoint and evaluates it on one split of the dataset.
pub fn evaluate(checkpoint: &Path, data_root: &Path, split: Split, threshold: f64) -> Result<MetricsReport> {
    let device = Device::Cpu;
    let (model, meta) = BevModel::load_with_metadata(checkpoint, &device)?;
    let manifest = SplitManifest::load(data_root)?;
    let config = model.config();
    check_rig(&manifest, config.n_views())?;
    if manifest.routes(split).is_empty() {
        return Err(NnError::Config(format!("dataset has no {split} routes")));
    }
    let samples = load_split(data_root, &manifest, split, config.n_views(), None)?;
    let name = meta.get("label").cloned().unwrap_or_else(|| config.kind().to_string());
    evaluate_model(&model, &name, &split.to_string(), &samples, threshold, 8)
}

/// One cell of the architecture × loss × views matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentCell {
    pub model: ModelKind,
    pub loss: LossKind,
    pub n_views: usize,
}

impl ExperimentCell {
    pub fn slug(&self) -> String {
        format!("{}_{}_{}cams", self.model, self.loss, self.n_views)
    }

    pub fn config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            model: self.model,
            n_views: self.n_views,
            loss: LossConfig { kind: self.loss, ..base.loss.clone() },
            ..base.clone()
        }
    }
}

/// Four CVT cells ({focal, L1} × {4, 3} views) and two 4-view UNet cells,
/// in table row order.
pub fn standard_matrix() -> Vec<ExperimentCell> {
    use LossKind::*;
    use ModelKind::*;
    [(Cvt, Focal, 4), (Unet, Focal, 4), (Cvt, L1, 4), (Unet, L1, 4), (Cvt, Focal, 3), (Cvt, L1, 3)]
        .into_iter()
        .map(|(model, loss, n_views)| ExperimentCell { model, loss, n_views })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub cell: ExperimentCell,
    pub name: String,
    pub run: Option<RunRecord>,
    /// Metrics of the final-epoch model.
    pub val: Option<MetricsReport>,
    pub test: Option<MetricsReport>,
    /// Test metrics of the best-validation checkpoint.
    pub test_best: Option<MetricsReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub outcomes: Vec<CellOutcome>,
    pub val_table: MetricsTable,
    pub test_table: MetricsTable,
}

pub const VAL_TABLE_TITLE: &str = "Mean IoU per channel - validation route (training town)";
pub const TEST_TABLE_TITLE: &str = "Per-channel mIoU - all routes of the unseen town";

impl ExperimentReport {
    pub fn from_outcomes(outcomes: Vec<CellOutcome>) -> Self {
        let val_table = MetricsTable::from_reports(VAL_TABLE_TITLE, outcomes.iter().filter_map(|o| o.val.as_ref()));
        let test_table = MetricsTable::from_reports(TEST_TABLE_TITLE, outcomes.iter().filter_map(|o| o.test.as_ref()));
        Self { outcomes, val_table, test_table }
    }
}

fn run_cell(base: &TrainConfig, cell: &ExperimentCell, root: &Path, manifest: &SplitManifest, dir: &Path) -> Result<CellOutcome> {
    let config = cell.config(base);
    let run = train_model(&config, root, dir)?;
    let device = Device::Cpu;
    let name = config.display_name();
    let last = BevModel::load(&run.last_checkpoint, &device)?;
    let val_samples = load_split(root, manifest, Split::Val, config.n_views, None)?;
    let val = evaluate_model(&last, &name, "val", &val_samples, config.threshold, config.batch_size)?;
    drop(val_samples);
    let test_samples = load_split(root, manifest, Split::Test, config.n_views, None)?;
    let test = evaluate_model(&last, &name, "test", &test_samples, config.threshold, config.batch_size)?;
    let test_best = if run.best_epoch == run.epochs.len() {
        test.clone()
    } else {
        let best = BevModel::load(&run.best_checkpoint, &device)?;
        evaluate_model(&best, &name, "test", &test_samples, config.threshold, config.batch_size)?
    };
    for (file, report) in [("eval_val.json", &val), ("eval_test.json", &test), ("eval_test_best.json", &test_best)] {
        let path = dir.join(file);
        fs::write(&path, serde_json::to_string_pretty(report)? + "\n").map_err(io_err(&path))?;
    }
    Ok(CellOutcome { cell: *cell, name, run: Some(run), val: Some(val), test: Some(test), test_best: Some(test_best), error: None })
}

/// Trains and evaluates every cell under `out_dir/<cell slug>/`. A failing
/// cell is recorded with its error and the remaining cells still run.
pub fn run_experiment_matrix(base: &TrainConfig, cells: &[ExperimentCell], data_root: &Path, out_dir: &Path) -> Result<ExperimentReport> {
    let manifest = SplitManifest::load(data_root)?;
    let mut outcomes = Vec::with_capacity(cells.len());
    for cell in cells {
        let dir = out_dir.join(cell.slug());
        let outcome = run_cell(base, cell, data_root, &manifest, &dir).unwrap_or_else(|e| {
            log::error!("{}: {e}", cell.slug());
            CellOutcome {
                cell: *cell,
                name: cell.config(base).display_name(),
                run: None,
                val: None,
                test: None,
                test_best: None,
                error: Some(e.to_string()),
            }
        });
        outcomes.push(outcome);
    }
    let report = ExperimentReport::from_outcomes(outcomes);
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let path = out_dir.join("experiment.json");
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n").map_err(io_err(&path))?;
    Ok(report)
}

/// Per-element gradient-free helper used by the CLI to turn logits into an
/// RGB overlay: channel `c` is set where its probability exceeds `threshold`.
pub fn logits_to_mask(logits: &Array3<f32>, threshold: f64) -> Result<Array3<u8>> {
    Ok(binarize(logits, threshold)?.mapv(u8::from))
}

pub fn tensor_to_array3(t: &Tensor) -> Result<Array3<f32>> {
    let (c, h, w) = t.dims3()?;
    Ok(Array3::from_shape_vec((c, h, w), t.flatten_all()?.to_vec1::<f32>()?).expect("shape"))
}
