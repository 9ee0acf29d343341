//! Static SVG plots: loss curves per epoch and per-frame IoU traces shaded
//! by route section.

use std::path::Path;

use bevcvt_core::metrics::{label_runs, SegmentLabel, SegmentTrace};
use plotters::prelude::*;

use crate::CliError;

/// Train and validation losses of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSeries {
    pub name: String,
    pub train: Vec<f64>,
    pub val: Vec<f64>,
}

fn plot_err<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Plot(format!("{}: {e}", path.display()))
}

fn value_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    ((lo - pad).max(0.0), hi + pad)
}

/// Training (solid) and validation (dashed) loss per epoch, one color per run.
pub fn loss_curves(path: &Path, runs: &[LossSeries], title: &str) -> Result<(), CliError> {
    let err = plot_err(path);
    let epochs = runs.iter().map(|r| r.train.len().max(r.val.len())).max().unwrap_or(1).max(2);
    let (lo, hi) = value_range(runs.iter().flat_map(|r| r.train.iter().chain(&r.val).copied()));
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(60)
        .build_cartesian_2d(1f64..epochs as f64, lo..hi)
        .map_err(&err)?;
    chart.configure_mesh().x_desc("epoch").y_desc("loss").draw().map_err(&err)?;
    for (i, run) in runs.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let points = |v: &[f64]| v.iter().enumerate().map(|(e, &l)| (e as f64 + 1.0, l)).collect::<Vec<_>>();
        chart
            .draw_series(LineSeries::new(points(&run.train), color.stroke_width(2)))
            .map_err(&err)?
            .label(format!("{} (train)", run.name))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        chart
            .draw_series(DashedLineSeries::new(points(&run.val), 6, 4, color.stroke_width(2)))
            .map_err(&err)?
            .label(format!("{} (val)", run.name))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 6, y), (x + 12, y), (x + 18, y)], color.stroke_width(1)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::UpperRight)
        .draw()
        .map_err(&err)?;
    root.present().map_err(&err)
}

fn label_name(label: SegmentLabel) -> &'static str {
    match label {
        SegmentLabel::Straight => "straight",
        SegmentLabel::Turn => "turn",
        SegmentLabel::Intersection => "intersection",
    }
}

/// Per-frame mean IoU along a route; the background of every frame range is
/// tinted with the color of its section label.
pub fn segment_trace(path: &Path, trace: &SegmentTrace, title: &str) -> Result<(), CliError> {
    let err = plot_err(path);
    let n = trace.values.len().max(2);
    let root = SVGBackend::new(path, (900, 360)).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(50)
        .build_cartesian_2d(0f64..n as f64, 0f64..1.0)
        .map_err(&err)?;
    chart.configure_mesh().x_desc("frame").y_desc("IoU").draw().map_err(&err)?;
    let mut seen = Vec::new();
    for (label, start, end) in label_runs(&trace.labels) {
        let [r, g, b] = label.color();
        let color = RGBColor(r, g, b);
        let series = chart
            .draw_series(std::iter::once(Rectangle::new([(start as f64, 0.0), (end as f64, 1.0)], color.mix(0.18).filled())))
            .map_err(&err)?;
        if !seen.contains(&label) {
            seen.push(label);
            series
                .label(label_name(label))
                .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 14, y + 5)], color.mix(0.5).filled()));
        }
    }
    let points: Vec<(f64, f64)> = trace.values.iter().enumerate().map(|(i, &v)| (i as f64 + 0.5, v)).collect();
    chart
        .draw_series(LineSeries::new(points.clone(), BLACK.stroke_width(2)))
        .map_err(&err)?
        .label("mean IoU")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], BLACK.stroke_width(2)));
    chart.draw_series(points.iter().map(|&p| Circle::new(p, 2, BLACK.filled()))).map_err(&err)?;
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(&err)?;
    root.present().map_err(&err)
}
