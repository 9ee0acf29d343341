use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{io_err, read_json, read_sample, write_json, DatasetError, Result, RouteId, SampleMeta, SplitManifest};
use super::{MANIFEST_FILE, META_FILE, ROUTE_FILE, TOWN_FILE};
use crate::geometry::CameraRecord;
use crate::synthworld::RigSpec;

/// Axis convention of the recorded poses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseConvention {
    /// Right-handed, Z up, Y left; yaw counter-clockwise.
    #[default]
    Native,
    /// Left-handed simulator frame: Y right, yaw clockwise seen from above.
    Carla,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestOptions {
    pub convention: PoseConvention,
    /// Replaces the calibration recorded with every frame.
    pub rig_override: Option<Vec<CameraRecord>>,
    /// Largest accepted deviation between recorded and recomputed matrices.
    pub tolerance: f64,
    pub force: bool,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self { convention: PoseConvention::Native, rig_override: None, tolerance: 1e-3, force: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub frames: usize,
    pub routes: Vec<RouteId>,
}

fn subdirs(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(path)
        .map_err(io_err(path))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

fn to_native(mut meta: SampleMeta, convention: PoseConvention) -> SampleMeta {
    if convention == PoseConvention::Carla {
        meta.ego.y = -meta.ego.y;
        meta.ego.heading = crate::synthworld::wrap_angle(-meta.ego.heading);
        for rec in &mut meta.rig {
            rec.position[1] = -rec.position[1];
            rec.rotation[1] = -rec.rotation[1];
            rec.rotation[2] = -rec.rotation[2];
            // recorded extrinsics live in the simulator frame and cannot be compared
            rec.e = None;
        }
    }
    meta
}

/// Normalizes a directory of recorded frames (`<town>/<route>/<frame>/` with
/// view images, rasters and `meta.json`) into the native layout under `dest`.
/// Calibration is recomputed from each camera's configuration and compared
/// against recorded matrices; any deviation beyond the tolerance aborts the
/// ingestion before anything is written, listing every offending frame.
pub fn ingest_external(src: &Path, dest: &Path, options: &IngestOptions) -> Result<IngestSummary> {
    if !src.is_dir() {
        return Err(DatasetError::InvalidArgument(format!("{} is not a directory", src.display())));
    }
    let mut frames: Vec<(RouteId, PathBuf, SampleMeta)> = Vec::new();
    for town in subdirs(src)? {
        for route in subdirs(&town)? {
            for frame in subdirs(&route)? {
                if !frame.join(META_FILE).exists() {
                    continue;
                }
                let meta: SampleMeta = read_json(&frame.join(META_FILE))?;
                let rid = RouteId::new(
                    town.file_name().unwrap().to_string_lossy(),
                    route.file_name().unwrap().to_string_lossy(),
                );
                frames.push((rid, frame, meta));
            }
        }
    }
    if frames.is_empty() {
        return Err(DatasetError::InvalidArgument(format!("no recorded frames found under {}", src.display())));
    }

    let mut problems = Vec::new();
    let mut normalized = Vec::with_capacity(frames.len());
    for (rid, dir, meta) in frames {
        let mut meta = to_native(meta, options.convention);
        if let Some(rig) = &options.rig_override {
            meta.rig = rig.clone();
        }
        let mut cams = Vec::with_capacity(meta.rig.len());
        for rec in &meta.rig {
            match rec.check_matrices(options.tolerance) {
                Ok(cam) => cams.push(cam),
                Err(e) => problems.push(format!("{}/{}: {e}", rid, meta.frame)),
            }
        }
        meta.rig = cams.iter().map(CameraRecord::from).collect();
        normalized.push((rid, dir, meta));
    }
    if !problems.is_empty() {
        return Err(DatasetError::Calibration(problems));
    }

    if dest.exists() && fs::read_dir(dest).map_err(io_err(dest))?.next().is_some() && !options.force {
        return Err(DatasetError::Exists(dest.to_path_buf()));
    }
    let mut routes: Vec<RouteId> = Vec::new();
    for (rid, dir, meta) in &normalized {
        let out = dest.join(&rid.town).join(&rid.route).join(&meta.frame);
        fs::create_dir_all(&out).map_err(io_err(&out))?;
        for entry in fs::read_dir(dir).map_err(io_err(dir))? {
            let path = entry.map_err(io_err(dir))?.path();
            if path.extension().is_some_and(|e| e == "png") {
                let target = out.join(path.file_name().unwrap());
                fs::copy(&path, &target).map_err(io_err(&target))?;
            }
        }
        write_json(&out.join(META_FILE), meta)?;
        read_sample(&out)?;
        if !routes.contains(rid) {
            for (from, to) in [
                (src.join(&rid.town).join(TOWN_FILE), dest.join(&rid.town).join(TOWN_FILE)),
                (src.join(&rid.town).join(&rid.route).join(ROUTE_FILE), dest.join(&rid.town).join(&rid.route).join(ROUTE_FILE)),
            ] {
                if from.exists() {
                    fs::copy(&from, &to).map_err(io_err(&to))?;
                }
            }
            routes.push(rid.clone());
        }
    }
    let manifest_src = src.join(MANIFEST_FILE);
    if manifest_src.exists() {
        let target = dest.join(MANIFEST_FILE);
        fs::copy(&manifest_src, &target).map_err(io_err(&target))?;
    } else {
        let first = &normalized[0].2;
        let manifest = SplitManifest {
            train: Vec::new(),
            val: Vec::new(),
            test: routes.clone(),
            grid: first.grid,
            rig: RigSpec { n_views: first.rig.len(), ..RigSpec::default() },
        };
        manifest.save(dest)?;
    }
    Ok(IngestSummary { frames: normalized.len(), routes })
}
