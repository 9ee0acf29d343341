use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, make_splits, route_name, write_json, write_sample, DatasetError, Result, RouteId, Sample, SampleId, Split, View};
use super::{ROUTE_FILE, TOWN_FILE};
use crate::metrics::{label_route_segments, SegmentLabel, SegmentRules};
use crate::synthworld::{
    default_rig, generate_town, pick_routes, rasterize_bev_gt, rasterize_sparse_trajectory, render_camera_view, EgoPose,
    GridSpec, RigSpec, Route, TownSpec,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TownEntry {
    pub name: String,
    pub seed: u64,
}

/// Everything `gen-data` needs; the first town provides train/val, the rest test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub towns: Vec<TownEntry>,
    pub town: TownSpec,
    pub routes_per_town: usize,
    pub val_route: String,
    pub train_frames: usize,
    pub val_frames: usize,
    pub test_frames: usize,
    /// When set, every route gets exactly this many frames and the split totals are ignored.
    pub frames_per_route: Option<usize>,
    pub route_spacing: f64,
    pub min_route_length: f64,
    pub rig: RigSpec,
    pub grid: GridSpec,
    pub segments: SegmentRules,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            towns: vec![TownEntry { name: "town01".into(), seed: 1 }, TownEntry { name: "town02".into(), seed: 2 }],
            town: TownSpec::default(),
            routes_per_town: 10,
            val_route: "route00".into(),
            train_frames: 2000,
            val_frames: 200,
            test_frames: 1000,
            frames_per_route: None,
            route_spacing: 2.0,
            min_route_length: 80.0,
            rig: RigSpec::default(),
            grid: GridSpec::default(),
            segments: SegmentRules::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitCount {
    pub samples: usize,
    pub images: usize,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub train: SplitCount,
    pub val: SplitCount,
    pub test: SplitCount,
}

impl GenerationSummary {
    fn slot(&mut self, split: Split) -> &mut SplitCount {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    /// Per-split listing: "Training: N images and M sample points, totaling approximately X GB".
    pub fn listing(&self) -> String {
        let all = [("Training", &self.train), ("Validation", &self.val), ("Test", &self.test)];
        let total_images: usize = all.iter().map(|(_, c)| c.images).sum();
        let total_samples: usize = all.iter().map(|(_, c)| c.samples).sum();
        let total_bytes: u64 = all.iter().map(|(_, c)| c.bytes).sum();
        let mut out = format!(
            "The dataset comprises {} images and {} sample points, resulting in approximately {:.2} GB of data.\n",
            thousands(total_images),
            thousands(total_samples),
            gb(total_bytes)
        );
        for (name, c) in all {
            out.push_str(&format!(
                "  {name}: {} images and {} sample points, totaling approximately {:.2} GB\n",
                thousands(c.images),
                thousands(c.samples),
                gb(c.bytes)
            ));
        }
        out
    }
}

fn gb(bytes: u64) -> f64 {
    bytes as f64 / 1e9
}

fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn spread(total: usize, parts: usize) -> Vec<usize> {
    (0..parts).map(|i| total / parts + usize::from(i < total % parts)).collect()
}

/// Route as stored in `route.json`, with per-waypoint segment labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteRecord {
    pub route: Route,
    pub labels: Vec<SegmentLabel>,
}

fn frame_label(route: &Route, labels: &[SegmentLabel], s: f64) -> SegmentLabel {
    if labels.len() < 2 {
        return labels.first().copied().unwrap_or(SegmentLabel::Straight);
    }
    let step = route.length() / (labels.len() - 1) as f64;
    labels[((s / step).round() as usize).min(labels.len() - 1)]
}

fn dir_size(path: &Path) -> u64 {
    fs::read_dir(path)
        .map(|rd| rd.filter_map(|e| e.ok()).filter_map(|e| e.metadata().ok()).map(|m| m.len()).sum())
        .unwrap_or(0)
}

/// Generates towns, routes and all frames under `root` and writes the split
/// manifest. Refuses a non-empty `root` unless `force` is set, in which case
/// only the configured town directories and the manifest are replaced.
pub fn generate_dataset(config: &DatasetConfig, root: &Path, force: bool) -> Result<GenerationSummary> {
    if config.routes_per_town == 0 {
        return Err(DatasetError::InvalidArgument("routes per town must be at least 1".into()));
    }
    if config.frames_per_route == Some(0) {
        return Err(DatasetError::InvalidArgument("frames per route must be at least 1".into()));
    }
    let names: Vec<String> = config.towns.iter().map(|t| t.name.clone()).collect();
    let mut manifest = make_splits(&names, config.routes_per_town, &config.val_route)?;
    manifest.grid = config.grid;
    manifest.rig = config.rig.clone();
    let rig = default_rig(&config.rig)?;

    if root.exists() {
        let non_empty = fs::read_dir(root).map_err(io_err(root))?.next().is_some();
        if non_empty && !force {
            return Err(DatasetError::Exists(root.to_path_buf()));
        }
        for name in names.iter().map(String::as_str).chain([super::MANIFEST_FILE]) {
            let p = root.join(name);
            if p.is_dir() {
                fs::remove_dir_all(&p).map_err(io_err(&p))?;
            } else if p.exists() {
                fs::remove_file(&p).map_err(io_err(&p))?;
            }
        }
    }
    fs::create_dir_all(root).map_err(io_err(root))?;

    let frames_for = |split: Split, routes: &[RouteId]| -> Vec<usize> {
        match config.frames_per_route {
            Some(n) => vec![n; routes.len()],
            None => {
                let total = match split {
                    Split::Train => config.train_frames,
                    Split::Val => config.val_frames,
                    Split::Test => config.test_frames,
                };
                spread(total, routes.len())
            }
        }
    };
    let mut plan: Vec<(RouteId, Split, usize)> = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        let routes = manifest.routes(split);
        for (r, n) in routes.iter().zip(frames_for(split, routes)) {
            plan.push((r.clone(), split, n));
        }
    }

    let mut summary = GenerationSummary::default();
    for (town_idx, entry) in config.towns.iter().enumerate() {
        let town = generate_town(entry.seed, &config.town)?;
        let town_dir = root.join(&entry.name);
        fs::create_dir_all(&town_dir).map_err(io_err(&town_dir))?;
        write_json(&town_dir.join(TOWN_FILE), &town)?;
        let routes = pick_routes(
            &town,
            config.routes_per_town,
            config.min_route_length,
            config.route_spacing,
            entry.seed.wrapping_add(1000 + town_idx as u64),
        )?;
        let junctions = town.graph.junctions();
        for (ri, route) in routes.iter().enumerate() {
            let rid = RouteId::new(&entry.name, route_name(ri));
            let Some((_, split, n_frames)) = plan.iter().find(|(r, _, _)| *r == rid) else {
                continue;
            };
            let labels = label_route_segments(&route.waypoints, route.spacing, &junctions, &config.segments);
            let route_dir = town_dir.join(&rid.route);
            fs::create_dir_all(&route_dir).map_err(io_err(&route_dir))?;
            write_json(&route_dir.join(ROUTE_FILE), &RouteRecord { route: route.clone(), labels: labels.clone() })?;

            let len = route.length();
            for f in 0..*n_frames {
                let s = len * (f as f64 + 0.5) / *n_frames as f64;
                let p = route.point_at(s);
                let ego = EgoPose::new(p.x, p.y, route.heading_at(s, 2.0), f as u32);
                let sample = Sample {
                    id: SampleId::new(&rid.town, &rid.route, f as u32),
                    views: rig
                        .iter()
                        .map(|cam| View { camera: cam.clone(), image: render_camera_view(&town, cam, &ego).to_rgb() })
                        .collect(),
                    trajectory: rasterize_sparse_trajectory(route, &ego, &config.grid),
                    bev_gt: rasterize_bev_gt(&town, route, &ego, &config.grid),
                    ego,
                    segment: frame_label(route, &labels, s),
                };
                write_sample(&sample, root)?;
                let c = summary.slot(*split);
                c.samples += 1;
                c.images += sample.n_views() + 1;
                c.bytes += dir_size(&sample.id.dir(root));
            }
        }
    }
    manifest.save(root)?;
    Ok(summary)
}
