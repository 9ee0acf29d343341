//! Inference panels: input views, trajectory raster, ground truth and
//! prediction side by side in one PNG.

use bevcvt_core::dataset::{bev_to_rgb, Sample};
use bevcvt_core::synthworld::BevGrid;
use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use ndarray::Array3;

/// Background pixels between tiles.
pub const GAP: u32 = 4;
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);

/// Tile order: every view, then trajectory, ground truth and prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PanelLayout {
    pub n_views: usize,
    pub tile_width: u32,
    pub tile_height: u32,
}

impl PanelLayout {
    pub fn n_tiles(&self) -> usize {
        self.n_views + 3
    }

    pub fn tile_origin(&self, index: usize) -> (u32, u32) {
        (GAP + index as u32 * (self.tile_width + GAP), GAP)
    }

    pub fn trajectory_tile(&self) -> usize {
        self.n_views
    }

    pub fn ground_truth_tile(&self) -> usize {
        self.n_views + 1
    }

    pub fn prediction_tile(&self) -> usize {
        self.n_views + 2
    }

    pub fn size(&self) -> (u32, u32) {
        (GAP + self.n_tiles() as u32 * (self.tile_width + GAP), self.tile_height + 2 * GAP)
    }

    /// Copies tile `index` out of a rendered panel.
    pub fn crop(&self, panel: &RgbImage, index: usize) -> RgbImage {
        let (x, y) = self.tile_origin(index);
        imageops::crop_imm(panel, x, y, self.tile_width, self.tile_height).to_image()
    }
}

/// Renders one panel; tiles are the size of the BEV grid and views are
/// resized to it when their resolution differs. `prediction` is a 0/1 mask.
pub fn render_panel(sample: &Sample, prediction: &Array3<u8>) -> (PanelLayout, RgbImage) {
    let spec = sample.bev_gt.spec;
    let layout = PanelLayout { n_views: sample.views.len(), tile_width: spec.width as u32, tile_height: spec.height as u32 };
    let (w, h) = layout.size();
    let mut panel = RgbImage::from_pixel(w, h, BACKGROUND);
    let mut put = |index: usize, tile: &RgbImage| {
        let (x, y) = layout.tile_origin(index);
        imageops::replace(&mut panel, tile, x as i64, y as i64);
    };
    for (i, view) in sample.views.iter().enumerate() {
        if view.image.dimensions() == (layout.tile_width, layout.tile_height) {
            put(i, &view.image);
        } else {
            put(i, &imageops::resize(&view.image, layout.tile_width, layout.tile_height, FilterType::Triangle));
        }
    }
    let traj = RgbImage::from_fn(layout.tile_width, layout.tile_height, |x, y| {
        let v = sample.trajectory[[y as usize, x as usize]] * 255;
        Rgb([v, v, v])
    });
    put(layout.trajectory_tile(), &traj);
    put(layout.ground_truth_tile(), &bev_to_rgb(&sample.bev_gt));
    put(layout.prediction_tile(), &bev_to_rgb(&BevGrid { spec, data: prediction.clone() }));
    (layout, panel)
}
