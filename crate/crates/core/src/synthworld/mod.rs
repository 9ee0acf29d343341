//! Desk-scale synthetic driving world: procedural towns, planned routes,
//! exact ray-cast camera rendering and analytic BEV ground truth.

mod bev;
mod render;
mod rig;
mod route;
mod town;

use thiserror::Error;

pub use bev::{
    rasterize_bev_gt, rasterize_sparse_trajectory, route_distance, BevGrid, GridSpec, CHANNEL_NAMES, DISC_AREA, LANE,
    ROAD, TRAJECTORY, TRAJECTORY_HALF_WIDTH,
};
pub use render::{classify_ray, render_camera_view, EgoPose, PixelClass, SemanticImage};
pub use rig::{default_rig, RigSpec, VIEW_NAMES};
pub use route::{pick_routes, plan_route, polyline_length, resample, wrap_angle, Route};
pub use town::{generate_town, LanePolyline, Polygon, RoadGraph, Surface, TownMap, TownSpec, P2};

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no route from node {start} to node {goal}")]
    NoRoute { start: usize, goal: usize },
    #[error("pixel color {0:?} is not in the semantic palette")]
    UnknownColor([u8; 3]),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}
