//! On-disk sample format, split manifests, dataset generation from the
//! synthetic world and ingestion of externally recorded frames.
//!
//! Layout, per frame:
//!
//! ```text
//! root/<town>/<route>/<frame>/{left,center,right,rear}.png
//!                             trajectory.png   8-bit gray, 0/255
//!                             bev_gt.png       RGB, 0/255 per channel: R road, G lane, B trajectory
//!                             meta.json        ids, ego pose, grid, rig calibration
//! root/<town>/town.json, root/<town>/<route>/route.json, root/manifest.json
//! ```

mod generate;
mod ingest;
mod split;

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraModel, CameraRecord, GeometryError};
use crate::metrics::SegmentLabel;
use crate::synthworld::{BevGrid, EgoPose, GridSpec, WorldError};

pub use generate::{generate_dataset, DatasetConfig, GenerationSummary, TownEntry};
pub use ingest::{ingest_external, IngestOptions, IngestSummary, PoseConvention};
pub use split::{batch_order, make_splits, route_name, RouteId, Split, SplitManifest};

pub const META_FILE: &str = "meta.json";
pub const TRAJECTORY_FILE: &str = "trajectory.png";
pub const BEV_FILE: &str = "bev_gt.png";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ROUTE_FILE: &str = "route.json";
pub const TOWN_FILE: &str = "town.json";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: view '{view}' is missing")]
    MissingView { path: PathBuf, view: String },
    #[error("{path}: dimension mismatch: {detail}")]
    Dimension { path: PathBuf, detail: String },
    #[error("{path}: expected {expected} channels, found {found}")]
    ChannelCount { path: PathBuf, expected: usize, found: usize },
    #[error("{path}: raster is not binary (value {value})")]
    NotBinary { path: PathBuf, value: u8 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("calibration mismatch in {} frame(s): {}", .0.len(), .0.join("; "))]
    Calibration(Vec<String>),
    #[error("{0} exists and is not empty (use --force to overwrite)")]
    Exists(PathBuf),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    World(#[from] WorldError),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| DatasetError::Json { path: path.to_path_buf(), source })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleId {
    pub town: String,
    pub route: String,
    pub frame: String,
}

impl SampleId {
    pub fn new(town: impl Into<String>, route: impl Into<String>, frame: u32) -> Self {
        Self { town: town.into(), route: route.into(), frame: format!("{frame:06}") }
    }

    pub fn dir(&self, root: &Path) -> PathBuf {
        root.join(&self.town).join(&self.route).join(&self.frame)
    }
}

impl std::fmt::Display for SampleId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}", self.town, self.route, self.frame)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub camera: CameraModel,
    pub image: RgbImage,
}

/// One time step: camera views with calibration, the sparse trajectory
/// input, the three-channel ground truth and the ego pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: SampleId,
    pub views: Vec<View>,
    /// `(height, width)`, values 0/1.
    pub trajectory: Array2<u8>,
    pub bev_gt: BevGrid,
    pub ego: EgoPose,
    /// Route section label of this frame.
    pub segment: SegmentLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub town: String,
    pub route: String,
    pub frame: String,
    pub ego: EgoPose,
    pub segment: SegmentLabel,
    pub grid: GridSpec,
    pub rig: Vec<CameraRecord>,
}

impl Sample {
    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn meta(&self) -> SampleMeta {
        SampleMeta {
            town: self.id.town.clone(),
            route: self.id.route.clone(),
            frame: self.id.frame.clone(),
            ego: self.ego,
            segment: self.segment,
            grid: self.bev_gt.spec,
            rig: self.views.iter().map(|v| CameraRecord::from(&v.camera)).collect(),
        }
    }

    /// Type invariants: views at their declared resolution, rasters matching
    /// the grid, binary values, 3 or 4 views.
    pub fn validate(&self, path: &Path) -> Result<()> {
        if !(self.views.len() == 3 || self.views.len() == 4) {
            return Err(DatasetError::Dimension { path: path.into(), detail: format!("{} views", self.views.len()) });
        }
        for v in &self.views {
            if v.image.dimensions() != (v.camera.width, v.camera.height) {
                return Err(DatasetError::Dimension {
                    path: path.join(format!("{}.png", v.camera.name)),
                    detail: format!("image {:?} vs calibration {}x{}", v.image.dimensions(), v.camera.width, v.camera.height),
                });
            }
        }
        let g = self.bev_gt.spec;
        if self.trajectory.dim() != (g.height, g.width) || self.bev_gt.data.dim() != (3, g.height, g.width) {
            return Err(DatasetError::Dimension {
                path: path.into(),
                detail: format!("rasters {:?} / {:?} vs grid {}x{}", self.trajectory.dim(), self.bev_gt.data.dim(), g.height, g.width),
            });
        }
        if let Some(&v) = self.trajectory.iter().chain(self.bev_gt.data.iter()).find(|&&v| v > 1) {
            return Err(DatasetError::NotBinary { path: path.into(), value: v });
        }
        Ok(())
    }
}

/// Writes one sample under `root`; returns the files written.
pub fn write_sample(sample: &Sample, root: &Path) -> Result<Vec<PathBuf>> {
    let dir = sample.id.dir(root);
    sample.validate(&dir)?;
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut written = Vec::with_capacity(sample.views.len() + 3);
    for v in &sample.views {
        let path = dir.join(format!("{}.png", v.camera.name));
        v.image.save(&path).map_err(|source| DatasetError::Image { path: path.clone(), source })?;
        written.push(path);
    }
    let (h, w) = sample.trajectory.dim();
    let traj = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([sample.trajectory[[y as usize, x as usize]] * 255]));
    let path = dir.join(TRAJECTORY_FILE);
    traj.save(&path).map_err(|source| DatasetError::Image { path: path.clone(), source })?;
    written.push(path);
    let path = dir.join(BEV_FILE);
    bev_to_rgb(&sample.bev_gt).save(&path).map_err(|source| DatasetError::Image { path: path.clone(), source })?;
    written.push(path);
    let path = dir.join(META_FILE);
    write_json(&path, &sample.meta())?;
    written.push(path);
    Ok(written)
}

/// RGB rendering of a BEV grid, 255 where a channel is set.
pub fn bev_to_rgb(grid: &BevGrid) -> RgbImage {
    let d = &grid.data;
    RgbImage::from_fn(grid.spec.width as u32, grid.spec.height as u32, |x, y| {
        let (r, c) = (y as usize, x as usize);
        Rgb([d[[0, r, c]] * 255, d[[1, r, c]] * 255, d[[2, r, c]] * 255])
    })
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(DatasetError::Io { path: path.into(), source: std::io::ErrorKind::NotFound.into() });
    }
    ImageReader::open(path)
        .map_err(io_err(path))?
        .decode()
        .map_err(|source| DatasetError::Image { path: path.into(), source })
}

fn binary(value: u8, path: &Path) -> Result<u8> {
    match value {
        0 => Ok(0),
        255 => Ok(1),
        v => Err(DatasetError::NotBinary { path: path.into(), value: v }),
    }
}

/// Reads the frame directory written by [`write_sample`].
pub fn read_sample(dir: &Path) -> Result<Sample> {
    let meta: SampleMeta = read_json(&dir.join(META_FILE))?;
    let mut views = Vec::with_capacity(meta.rig.len());
    for rec in &meta.rig {
        let path = dir.join(format!("{}.png", rec.name));
        if !path.exists() {
            return Err(DatasetError::MissingView { path: dir.into(), view: rec.name.clone() });
        }
        let img = open_image(&path)?;
        let channels = img.color().channel_count() as usize;
        if channels != 3 {
            return Err(DatasetError::ChannelCount { path, expected: 3, found: channels });
        }
        views.push(View { camera: rec.to_camera()?, image: img.into_rgb8() });
    }
    let grid = meta.grid;

    let path = dir.join(TRAJECTORY_FILE);
    let img = open_image(&path)?;
    if img.color().channel_count() != 1 {
        return Err(DatasetError::ChannelCount { path, expected: 1, found: img.color().channel_count() as usize });
    }
    let traj = img.into_luma8();
    if traj.dimensions() != (grid.width as u32, grid.height as u32) {
        return Err(DatasetError::Dimension { path, detail: format!("{:?} vs grid {}x{}", traj.dimensions(), grid.width, grid.height) });
    }
    let mut trajectory = Array2::zeros((grid.height, grid.width));
    for (x, y, p) in traj.enumerate_pixels() {
        trajectory[[y as usize, x as usize]] = binary(p.0[0], &path)?;
    }

    let path = dir.join(BEV_FILE);
    let img = open_image(&path)?;
    if img.color().channel_count() != 3 {
        return Err(DatasetError::ChannelCount { path, expected: 3, found: img.color().channel_count() as usize });
    }
    let bev = img.into_rgb8();
    if bev.dimensions() != (grid.width as u32, grid.height as u32) {
        return Err(DatasetError::Dimension { path, detail: format!("{:?} vs grid {}x{}", bev.dimensions(), grid.width, grid.height) });
    }
    let mut data = Array3::zeros((3, grid.height, grid.width));
    for (x, y, p) in bev.enumerate_pixels() {
        for ch in 0..3 {
            data[[ch, y as usize, x as usize]] = binary(p.0[ch], &path)?;
        }
    }

    let sample = Sample {
        id: SampleId { town: meta.town, route: meta.route, frame: meta.frame },
        views,
        trajectory,
        bev_gt: BevGrid { spec: grid, data },
        ego: meta.ego,
        segment: meta.segment,
    };
    sample.validate(dir)?;
    Ok(sample)
}

/// Removes the view named `rear`.
pub fn drop_rear_view(mut sample: Sample) -> Result<Sample> {
    let idx = sample
        .views
        .iter()
        .position(|v| v.camera.name == "rear")
        .ok_or_else(|| DatasetError::InvalidArgument(format!("sample {} has no rear view", sample.id)))?;
    sample.views.remove(idx);
    Ok(sample)
}

/// Frame directories of one route, in frame order.
pub fn list_frames(root: &Path, route: &RouteId) -> Result<Vec<PathBuf>> {
    let dir = root.join(&route.town).join(&route.route);
    let mut frames: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(io_err(&dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join(META_FILE).exists())
        .collect();
    frames.sort();
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{
        default_rig, generate_town, pick_routes, rasterize_bev_gt, rasterize_sparse_trajectory, render_camera_view,
        RigSpec, TownSpec,
    };

    pub(crate) fn synthetic_sample(n_views: usize, frame: u32) -> Sample {
        let town = generate_town(3, &TownSpec::default()).unwrap();
        let route = pick_routes(&town, 1, 60.0, 2.0, 1).unwrap().remove(0);
        let s = 5.0 + frame as f64;
        let p = route.point_at(s);
        let ego = EgoPose::new(p.x, p.y, route.heading_at(s, 2.0), frame);
        let rig = default_rig(&RigSpec { n_views, width: 32, height: 24, ..RigSpec::default() }).unwrap();
        let grid = GridSpec { height: 32, width: 32, resolution: 1.0, anchor_row: 24, anchor_col: 16 };
        Sample {
            id: SampleId::new("town01", "route03", frame),
            views: rig
                .into_iter()
                .map(|c| View { image: render_camera_view(&town, &c, &ego).to_rgb(), camera: c })
                .collect(),
            trajectory: rasterize_sparse_trajectory(&route, &ego, &grid),
            bev_gt: rasterize_bev_gt(&town, &route, &ego, &grid),
            ego,
            segment: SegmentLabel::Straight,
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = synthetic_sample(4, 2);
        let files = write_sample(&s, dir.path()).unwrap();
        assert_eq!(files.len(), 7);
        let back = read_sample(&s.id.dir(dir.path())).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn missing_rear_view_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let s = synthetic_sample(4, 0);
        write_sample(&s, dir.path()).unwrap();
        let frame = s.id.dir(dir.path());
        fs::remove_file(frame.join("rear.png")).unwrap();
        match read_sample(&frame) {
            Err(DatasetError::MissingView { view, .. }) => assert_eq!(view, "rear"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_dimensions_and_channels() {
        let dir = tempfile::tempdir().unwrap();
        let s = synthetic_sample(3, 0);
        write_sample(&s, dir.path()).unwrap();
        let frame = s.id.dir(dir.path());
        GrayImage::new(32, 24).save(frame.join("left.png")).unwrap();
        assert!(matches!(read_sample(&frame), Err(DatasetError::ChannelCount { .. })));
        RgbImage::new(10, 10).save(frame.join("left.png")).unwrap();
        assert!(matches!(read_sample(&frame), Err(DatasetError::Dimension { .. })));
        let mut traj = GrayImage::new(32, 32);
        traj.put_pixel(0, 0, Luma([7]));
        s.views[0].image.save(frame.join("left.png")).unwrap();
        traj.save(frame.join(TRAJECTORY_FILE)).unwrap();
        assert!(matches!(read_sample(&frame), Err(DatasetError::NotBinary { value: 7, .. })));
    }

    #[test]
    fn drop_rear_once() {
        let s = synthetic_sample(4, 1);
        let three = drop_rear_view(s.clone()).unwrap();
        assert_eq!(three.n_views(), 3);
        assert_eq!(three.bev_gt, s.bev_gt);
        for (a, b) in three.views.iter().zip(&s.views) {
            assert_eq!(a.image.as_raw(), b.image.as_raw());
            assert_eq!(a.camera, b.camera);
        }
        assert!(drop_rear_view(three).is_err());
    }
}
