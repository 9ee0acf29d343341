use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::render::EgoPose;
use super::route::Route;
use super::town::{polyline_distance, segment_distance, TownMap, P2};

pub const ROAD: usize = 0;
pub const LANE: usize = 1;
pub const TRAJECTORY: usize = 2;
pub const CHANNEL_NAMES: [&str; 3] = ["road", "lane", "trajectory"];

/// Half-width in meters of the dense trajectory band in the ground truth.
pub const TRAJECTORY_HALF_WIDTH: f64 = 1.0;

/// Ego-centered raster layout. Row 0 is the far front; the ego sits at
/// `(anchor_row, anchor_col)` facing up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    /// Meters per cell.
    pub resolution: f64,
    pub anchor_row: usize,
    pub anchor_col: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { height: 128, width: 128, resolution: 0.25, anchor_row: 96, anchor_col: 64 }
    }
}

impl GridSpec {
    /// Cell center as ego-frame (forward, left) meters.
    pub fn cell_to_ego(&self, row: usize, col: usize) -> (f64, f64) {
        (
            (self.anchor_row as f64 - row as f64) * self.resolution,
            (self.anchor_col as f64 - col as f64) * self.resolution,
        )
    }

    /// Nearest cell for an ego-frame offset; may lie outside the grid.
    pub fn ego_to_cell(&self, forward: f64, left: f64) -> (i64, i64) {
        (
            (self.anchor_row as f64 - forward / self.resolution).round() as i64,
            (self.anchor_col as f64 - left / self.resolution).round() as i64,
        )
    }

    pub fn contains(&self, row: i64, col: i64) -> bool {
        row >= 0 && col >= 0 && (row as usize) < self.height && (col as usize) < self.width
    }

    /// Largest distance from the ego to any cell center.
    fn reach(&self) -> f64 {
        let far_r = self.anchor_row.max(self.height - 1 - self.anchor_row) as f64;
        let far_c = self.anchor_col.max(self.width - 1 - self.anchor_col) as f64;
        (far_r.hypot(far_c) + 1.0) * self.resolution
    }
}

/// Three binary channels (road, lane, trajectory), values 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    pub spec: GridSpec,
    pub data: Array3<u8>,
}

impl BevGrid {
    pub fn zeros(spec: GridSpec) -> Self {
        Self { spec, data: Array3::zeros((3, spec.height, spec.width)) }
    }

    pub fn count(&self, channel: usize) -> usize {
        self.data.index_axis(ndarray::Axis(0), channel).iter().filter(|&&v| v != 0).count()
    }
}

fn near_segments(points: &[P2], ego: &P2, reach: f64) -> Vec<[P2; 2]> {
    match points {
        [] => Vec::new(),
        [only] => vec![[*only, *only]],
        _ => points
            .windows(2)
            .filter(|w| segment_distance(&w[0], &w[1], ego) <= reach)
            .map(|w| [w[0], w[1]])
            .collect(),
    }
}

/// Analytic ground truth around `ego`: road surface, lane markings, and the
/// band of road within [`TRAJECTORY_HALF_WIDTH`] of the route.
pub fn rasterize_bev_gt(town: &TownMap, route: &Route, ego: &EgoPose, spec: &GridSpec) -> BevGrid {
    let mut grid = BevGrid::zeros(*spec);
    let segments = near_segments(&route.waypoints, &ego.position(), spec.reach() + TRAJECTORY_HALF_WIDTH);
    for r in 0..spec.height {
        for c in 0..spec.width {
            let (f, l) = spec.cell_to_ego(r, c);
            let p = ego.to_world(f, l);
            let road = town.is_road(&p);
            grid.data[[ROAD, r, c]] = road as u8;
            grid.data[[LANE, r, c]] = town.is_lane(&p) as u8;
            let on_route = segments.iter().any(|s| segment_distance(&s[0], &s[1], &p) <= TRAJECTORY_HALF_WIDTH);
            grid.data[[TRAJECTORY, r, c]] = (road && on_route) as u8;
        }
    }
    grid
}

/// Sparse model input: every route waypoint whose cell lies on the grid is
/// drawn as a disc of radius one cell.
pub fn rasterize_sparse_trajectory(route: &Route, ego: &EgoPose, spec: &GridSpec) -> Array2<u8> {
    let mut out = Array2::zeros((spec.height, spec.width));
    for w in &route.waypoints {
        let (f, l) = ego.to_ego(w);
        let (row, col) = spec.ego_to_cell(f, l);
        if !spec.contains(row, col) {
            continue;
        }
        for (dr, dc) in [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)] {
            if spec.contains(row + dr, col + dc) {
                out[[(row + dr) as usize, (col + dc) as usize]] = 1;
            }
        }
    }
    out
}

/// Cells of the disc drawn per waypoint.
pub const DISC_AREA: usize = 5;

/// Distance from `p` to the route polyline.
pub fn route_distance(route: &Route, p: &P2) -> f64 {
    polyline_distance(&route.waypoints, p)
}
