//! Per-channel IoU, per-sample mean IoU, route segment labelling and the
//! fixed `Model | Road | Trajectory | Lane` result tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array3, Axis, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synthworld::{LANE, P2, ROAD, TRAJECTORY};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: prediction {pred:?} vs ground truth {gt:?}")]
    ShapeMismatch { pred: Vec<usize>, gt: Vec<usize> },
    #[error("threshold must lie in (0, 1), got {0}")]
    Threshold(f64),
    #[error("{0} labels for {1} frames")]
    LabelCount(usize, usize),
    #[error("malformed table: {0}")]
    Table(String),
}

/// `sigmoid(logit) > threshold`, evaluated in logit space so that the default
/// 0.5 is exactly the sign test.
pub fn binarize(logits: &Array3<f32>, threshold: f64) -> Result<Array3<bool>, MetricsError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(MetricsError::Threshold(threshold));
    }
    let cut = (threshold / (1.0 - threshold)).ln();
    Ok(logits.mapv(|x| (x as f64) > cut))
}

/// IoU per semantic channel; `None` where the union was empty.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ChannelIoU {
    pub road: Option<f64>,
    pub trajectory: Option<f64>,
    pub lane: Option<f64>,
    /// Number of samples that contributed to each value (road, trajectory, lane).
    pub n_samples: [usize; 3],
}

impl ChannelIoU {
    /// Value for a channel index ([`ROAD`], [`LANE`], [`TRAJECTORY`]).
    pub fn get(&self, channel: usize) -> Option<f64> {
        match channel {
            ROAD => self.road,
            LANE => self.lane,
            TRAJECTORY => self.trajectory,
            _ => None,
        }
    }

    fn slot(channel: usize) -> usize {
        match channel {
            ROAD => 0,
            TRAJECTORY => 1,
            _ => 2,
        }
    }

    pub fn count(&self, channel: usize) -> usize {
        self.n_samples[Self::slot(channel)]
    }

    fn set(&mut self, channel: usize, value: Option<f64>, n: usize) {
        match channel {
            ROAD => self.road = value,
            LANE => self.lane = value,
            _ => self.trajectory = value,
        }
        self.n_samples[Self::slot(channel)] = n;
    }

    /// Mean of the defined channels; a sample with nothing to segment in any
    /// channel scores 1.
    pub fn mean_over_channels(&self) -> f64 {
        let vals: Vec<f64> = [self.road, self.trajectory, self.lane].into_iter().flatten().collect();
        if vals.is_empty() {
            1.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }
}

/// Intersection over union per channel for one sample; masks are
/// `(channel, row, col)` with channels ordered road, lane, trajectory.
pub fn iou_per_channel(pred: &Array3<bool>, gt: &Array3<bool>) -> Result<ChannelIoU, MetricsError> {
    if pred.shape() != gt.shape() || pred.shape()[0] != 3 {
        return Err(MetricsError::ShapeMismatch { pred: pred.shape().to_vec(), gt: gt.shape().to_vec() });
    }
    let mut out = ChannelIoU::default();
    for ch in 0..3 {
        let (inter, union) = Zip::from(pred.index_axis(Axis(0), ch))
            .and(gt.index_axis(Axis(0), ch))
            .fold((0usize, 0usize), |(i, u), &p, &g| (i + (p && g) as usize, u + (p || g) as usize));
        if union == 0 {
            out.set(ch, None, 0);
        } else {
            out.set(ch, Some(inter as f64 / union as f64), 1);
        }
    }
    Ok(out)
}

/// Arithmetic mean over the samples in which each channel was defined.
pub fn mean_iou(samples: &[ChannelIoU]) -> ChannelIoU {
    let mut out = ChannelIoU::default();
    for ch in [ROAD, TRAJECTORY, LANE] {
        let vals: Vec<f64> = samples.iter().filter_map(|s| s.get(ch)).collect();
        let n: usize = samples.iter().filter(|s| s.get(ch).is_some()).map(|s| s.count(ch).max(1)).sum();
        if vals.is_empty() {
            out.set(ch, None, 0);
        } else {
            out.set(ch, Some(vals.iter().sum::<f64>() / vals.len() as f64), n);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentLabel {
    Straight,
    Turn,
    Intersection,
}

impl SegmentLabel {
    pub fn color(self) -> [u8; 3] {
        match self {
            SegmentLabel::Straight => [31, 119, 180],
            SegmentLabel::Turn => [214, 39, 40],
            SegmentLabel::Intersection => [255, 127, 14],
        }
    }
}

/// Thresholds for [`label_route_segments`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentRules {
    /// rad/m
    pub turn_curvature: f64,
    /// Minimum length of a high-curvature stretch, meters.
    pub turn_min_length: f64,
    /// Distance to a junction node that marks an intersection, meters.
    pub junction_radius: f64,
    /// Half-window used to estimate curvature, meters.
    pub curvature_window: f64,
}

impl Default for SegmentRules {
    fn default() -> Self {
        Self { turn_curvature: 0.05, turn_min_length: 4.0, junction_radius: 8.0, curvature_window: 4.0 }
    }
}

/// Labels every waypoint of an evenly spaced route as straight, turn or
/// intersection. Curvature at a waypoint is the heading change across a
/// window of `2 * curvature_window` meters divided by the window length.
/// Turns take precedence over intersections.
pub fn label_route_segments(waypoints: &[P2], spacing: f64, junctions: &[P2], rules: &SegmentRules) -> Vec<SegmentLabel> {
    let n = waypoints.len();
    if n == 0 {
        return Vec::new();
    }
    let headings: Vec<f64> = waypoints.windows(2).map(|w| (w[1].y - w[0].y).atan2(w[1].x - w[0].x)).collect();
    let k = ((rules.curvature_window / spacing).ceil() as usize).max(1);
    let curvature: Vec<f64> = (0..n)
        .map(|i| {
            if headings.is_empty() {
                return 0.0;
            }
            let a = i.saturating_sub(k).min(headings.len() - 1);
            let b = (i + k - 1).min(headings.len() - 1);
            let span = ((b - a + 1) as f64 * spacing).max(spacing);
            crate::synthworld::wrap_angle(headings[b] - headings[a]).abs() / span
        })
        .collect();

    let mut labels = vec![SegmentLabel::Straight; n];
    let mut i = 0;
    while i < n {
        if curvature[i] > rules.turn_curvature {
            let start = i;
            while i < n && curvature[i] > rules.turn_curvature {
                i += 1;
            }
            if (i - start) as f64 * spacing >= rules.turn_min_length {
                labels[start..i].iter_mut().for_each(|l| *l = SegmentLabel::Turn);
            }
        } else {
            i += 1;
        }
    }
    for (label, p) in labels.iter_mut().zip(waypoints) {
        if *label == SegmentLabel::Straight && junctions.iter().any(|j| (j - p).norm() <= rules.junction_radius) {
            *label = SegmentLabel::Intersection;
        }
    }
    labels
}

/// Contiguous runs of equal labels as `(label, first, last_exclusive)`.
pub fn label_runs(labels: &[SegmentLabel]) -> Vec<(SegmentLabel, usize, usize)> {
    let mut runs: Vec<(SegmentLabel, usize, usize)> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        match runs.last_mut() {
            Some(last) if last.0 == l => last.2 = i + 1,
            _ => runs.push((l, i, i + 1)),
        }
    }
    runs
}

/// Per-frame mean-over-channels IoU with the route segment label of each frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentTrace {
    pub values: Vec<f64>,
    pub labels: Vec<SegmentLabel>,
}

pub fn segment_trace(frames: &[ChannelIoU], labels: &[SegmentLabel]) -> Result<SegmentTrace, MetricsError> {
    if frames.len() != labels.len() {
        return Err(MetricsError::LabelCount(labels.len(), frames.len()));
    }
    Ok(SegmentTrace { values: frames.iter().map(ChannelIoU::mean_over_channels).collect(), labels: labels.to_vec() })
}

/// Evaluation of one model on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub split: String,
    pub threshold: f64,
    pub overall: ChannelIoU,
    pub per_route: BTreeMap<String, ChannelIoU>,
    pub traces: BTreeMap<String, SegmentTrace>,
}

/// One `Model | Road | Trajectory | Lane` row, values rounded to four decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub model: String,
    pub road: Option<f64>,
    pub trajectory: Option<f64>,
    pub lane: Option<f64>,
}

fn round4(v: Option<f64>) -> Option<f64> {
    v.map(|x| (x * 1e4).round() / 1e4)
}

impl TableRow {
    pub fn new(model: impl Into<String>, iou: &ChannelIoU) -> Self {
        Self { model: model.into(), road: round4(iou.road), trajectory: round4(iou.trajectory), lane: round4(iou.lane) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub title: String,
    pub rows: Vec<TableRow>,
}

const HEADER: [&str; 4] = ["Model", "Road", "Trajectory", "Lane"];

impl MetricsTable {
    pub fn from_reports<'a>(title: impl Into<String>, reports: impl IntoIterator<Item = &'a MetricsReport>) -> Self {
        Self { title: title.into(), rows: reports.into_iter().map(|r| TableRow::new(&r.model, &r.overall)).collect() }
    }

    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
        let width = self.rows.iter().map(|r| r.model.len()).chain([HEADER[0].len()]).max().unwrap_or(5);
        let mut out = String::new();
        writeln!(out, "{}", self.title).unwrap();
        let header = format!("{:<width$} | {:>10} | {:>10} | {:>10}", HEADER[0], HEADER[1], HEADER[2], HEADER[3]);
        writeln!(out, "{header}").unwrap();
        writeln!(out, "{}", "-".repeat(header.len())).unwrap();
        for r in &self.rows {
            writeln!(out, "{:<width$} | {:>10} | {:>10} | {:>10}", r.model, fmt(r.road), fmt(r.trajectory), fmt(r.lane))
                .unwrap();
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    /// Reads back a table produced by [`MetricsTable::to_text`].
    pub fn parse_text(text: &str) -> Result<Self, MetricsError> {
        let mut lines = text.lines();
        let title = lines.next().ok_or_else(|| MetricsError::Table("empty".into()))?.to_string();
        let header: Vec<&str> = lines.next().unwrap_or_default().split('|').map(str::trim).collect();
        if header != HEADER {
            return Err(MetricsError::Table(format!("unexpected header {header:?}")));
        }
        lines.next();
        let parse = |s: &str| -> Result<Option<f64>, MetricsError> {
            if s == "n/a" {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| MetricsError::Table(format!("bad value '{s}'")))
            }
        };
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let cells: Vec<&str> = line.split('|').map(str::trim).collect();
            if cells.len() != 4 {
                return Err(MetricsError::Table(format!("row has {} cells: '{line}'", cells.len())));
            }
            rows.push(TableRow {
                model: cells[0].to_string(),
                road: parse(cells[1])?,
                trajectory: parse(cells[2])?,
                lane: parse(cells[3])?,
            });
        }
        Ok(Self { title, rows })
    }
}
