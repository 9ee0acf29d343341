#![allow(dead_code)]

use std::path::Path;

use bevcvt_core::dataset::{generate_dataset, DatasetConfig, Sample, Split, SplitManifest, TownEntry};
use bevcvt_core::synthworld::{GridSpec, RigSpec};
use bevcvt_nn::cvt::CvtConfig;
use bevcvt_nn::training::load_split;
use bevcvt_nn::unet::UnetConfig;

/// Small dataset: 32×32 views and a 32×32 grid at 1 m per cell.
pub fn tiny_config(frames_per_route: usize) -> DatasetConfig {
    DatasetConfig {
        towns: vec![TownEntry { name: "town01".into(), seed: 1 }, TownEntry { name: "town02".into(), seed: 2 }],
        routes_per_town: 2,
        frames_per_route: Some(frames_per_route),
        rig: RigSpec { width: 32, height: 32, ..RigSpec::default() },
        grid: GridSpec { height: 32, width: 32, resolution: 1.0, anchor_row: 24, anchor_col: 16 },
        ..DatasetConfig::default()
    }
}

pub fn tiny_dataset(root: &Path, frames_per_route: usize) -> SplitManifest {
    generate_dataset(&tiny_config(frames_per_route), root, false).unwrap();
    SplitManifest::load(root).unwrap()
}

pub fn tiny_samples(frames_per_route: usize, split: Split, n_views: usize) -> Vec<Sample> {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_dataset(dir.path(), frames_per_route);
    load_split(dir.path(), &m, split, n_views, None).unwrap()
}

pub fn tiny_cvt(n_views: usize) -> CvtConfig {
    CvtConfig {
        embed_dim: 16,
        n_heads: 2,
        backbone_widths: vec![8, 16, 16],
        map_resolution: 8,
        decoder_widths: vec![8],
        n_views,
        image_size: [32, 32],
        bev_size: [32, 32],
        ..CvtConfig::default()
    }
}

pub fn tiny_unet(n_views: usize) -> UnetConfig {
    UnetConfig { n_views, widths: vec![8, 16], image_size: [32, 32], bev_size: [32, 32] }
}

pub fn max_abs_diff(a: &candle_core::Tensor, b: &candle_core::Tensor) -> f64 {
    (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_dtype(candle_core::DType::F64).unwrap().to_scalar::<f64>().unwrap()
}
