use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::route::wrap_angle;
use super::town::{Surface, TownMap, P2};
use super::WorldError;
use crate::geometry::{ray_ground_intersection, CameraModel, ImagePoint};

/// Ego vehicle pose on the ground plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoPose {
    pub x: f64,
    pub y: f64,
    /// Radians in `[-pi, pi)`, counter-clockwise from world +X.
    pub heading: f64,
    pub frame: u32,
}

impl EgoPose {
    pub fn new(x: f64, y: f64, heading: f64, frame: u32) -> Self {
        Self { x, y, heading: wrap_angle(heading), frame }
    }

    pub fn position(&self) -> P2 {
        P2::new(self.x, self.y)
    }

    /// Ego-frame (forward, left) offset to world coordinates.
    pub fn to_world(&self, forward: f64, left: f64) -> P2 {
        let (s, c) = self.heading.sin_cos();
        P2::new(self.x + c * forward - s * left, self.y + s * forward + c * left)
    }

    /// World point to ego-frame (forward, left).
    pub fn to_ego(&self, p: &P2) -> (f64, f64) {
        let (s, c) = self.heading.sin_cos();
        let (dx, dy) = (p.x - self.x, p.y - self.y);
        (c * dx + s * dy, -s * dx + c * dy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PixelClass {
    Road,
    Lane,
    Offroad,
    Sky,
}

impl PixelClass {
    pub const ALL: [PixelClass; 4] = [PixelClass::Road, PixelClass::Lane, PixelClass::Offroad, PixelClass::Sky];

    pub fn color(self) -> [u8; 3] {
        match self {
            PixelClass::Road => [128, 64, 128],
            PixelClass::Lane => [255, 255, 255],
            PixelClass::Offroad => [60, 140, 60],
            PixelClass::Sky => [70, 130, 180],
        }
    }

    pub fn from_color(c: [u8; 3]) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.color() == c)
    }
}

impl From<Surface> for PixelClass {
    fn from(s: Surface) -> Self {
        match s {
            Surface::Road => PixelClass::Road,
            Surface::Lane => PixelClass::Lane,
            Surface::Offroad => PixelClass::Offroad,
        }
    }
}

/// Per-pixel semantic classes of one camera view, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<PixelClass>,
}

impl SemanticImage {
    pub fn get(&self, u: u32, v: u32) -> PixelClass {
        self.pixels[(v * self.width + u) as usize]
    }

    pub fn to_rgb(&self) -> RgbImage {
        RgbImage::from_fn(self.width, self.height, |u, v| Rgb(self.get(u, v).color()))
    }

    pub fn from_rgb(img: &RgbImage) -> Result<Self, WorldError> {
        let pixels = img
            .pixels()
            .map(|p| PixelClass::from_color(p.0).ok_or(WorldError::UnknownColor(p.0)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { width: img.width(), height: img.height(), pixels })
    }
}

/// Class seen along the ray through `q` of a camera already placed in the world.
pub fn classify_ray(town: &TownMap, cam: &CameraModel, q: &ImagePoint) -> PixelClass {
    match ray_ground_intersection(q, cam) {
        Some(hit) => town.classify(&P2::new(hit.x, hit.y)).into(),
        None => PixelClass::Sky,
    }
}

/// Renders the semantic view of a rig camera (`cam` expressed in the ego
/// frame) mounted on a vehicle at `ego`. Each pixel center is ray-cast onto
/// the flat ground.
pub fn render_camera_view(town: &TownMap, cam: &CameraModel, ego: &EgoPose) -> SemanticImage {
    let placed = cam.placed_at(ego.x, ego.y, ego.heading);
    let mut pixels = Vec::with_capacity((cam.width * cam.height) as usize);
    for v in 0..cam.height {
        for u in 0..cam.width {
            let q = ImagePoint::new(u as f64 + 0.5, v as f64 + 0.5);
            pixels.push(classify_ray(town, &placed, &q));
        }
    }
    SemanticImage { width: cam.width, height: cam.height, pixels }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, CameraPose};
    use crate::synthworld::town::{generate_town, LanePolyline, Polygon, TownSpec};

    fn straight_road_town() -> TownMap {
        // one long east-west road with a center marking
        let road = Polygon {
            points: vec![P2::new(0.0, 96.0), P2::new(400.0, 96.0), P2::new(400.0, 104.0), P2::new(0.0, 104.0)],
        };
        let lane = LanePolyline { points: vec![P2::new(0.0, 100.0), P2::new(400.0, 100.0)], half_width: 0.15 };
        let json = serde_json::json!({
            "seed": 0,
            "spec": TownSpec::default(),
            "extent": [400.0, 200.0],
            "road_polygons": [road],
            "lane_polylines": [lane],
            "graph": {"nodes": [[0.0, 100.0], [400.0, 100.0]], "edges": [[0, 1]]},
        });
        serde_json::from_value(json).unwrap()
    }

    #[test]
    fn upward_camera_sees_only_sky() {
        let town = straight_road_town();
        let cam = CameraModel::new("up", 64, 64, 90.0, CameraPose::new(0.0, 0.0, 1.8, 80.0, 0.0, 0.0)).unwrap();
        let img = render_camera_view(&town, &cam, &EgoPose::new(200.0, 100.0, 0.0, 0));
        assert!(img.pixels.iter().all(|&p| p == PixelClass::Sky));
    }

    #[test]
    fn straight_road_is_mirror_symmetric() {
        let town = straight_road_town();
        let cam = CameraModel::new("center", 128, 128, 90.0, CameraPose::new(0.0, 0.0, 1.8, -5.0, 0.0, 0.0)).unwrap();
        let img = render_camera_view(&town, &cam, &EgoPose::new(200.0, 100.0, 0.0, 0));
        let road_like = |p: PixelClass| matches!(p, PixelClass::Road | PixelClass::Lane);
        for v in 0..128 {
            let row: Vec<bool> = (0..128).map(|u| road_like(img.get(u, v))).collect();
            let left = row.iter().position(|&b| b);
            let right = row.iter().rposition(|&b| b);
            if let (Some(l), Some(r)) = (left, right) {
                let (l_edge, r_edge) = (l as i64, 127 - r as i64);
                assert!((l_edge - r_edge).abs() <= 1, "row {v}: {l} .. {r}");
            }
        }
        assert!(img.pixels.iter().any(|&p| p == PixelClass::Lane));
    }

    #[test]
    fn pixels_match_direct_classification() {
        let town = generate_town(4, &TownSpec::default()).unwrap();
        let cam = CameraModel::new("left", 64, 48, 90.0, CameraPose::new(0.3, 0.5, 1.8, -5.0, 55.0, 0.0)).unwrap();
        let ego = EgoPose::new(town.graph.nodes[4].x, town.graph.nodes[4].y, 0.3, 0);
        let img = render_camera_view(&town, &cam, &ego);
        let placed = cam.placed_at(ego.x, ego.y, ego.heading);
        for v in 0..48 {
            for u in 0..64 {
                let q = ImagePoint::new(u as f64 + 0.5, v as f64 + 0.5);
                let expected = match ray_ground_intersection(&q, &placed) {
                    None => PixelClass::Sky,
                    Some(h) => {
                        let p = P2::new(h.x, h.y);
                        if town.lane_polylines.iter().any(|l| l.covers(&p)) {
                            PixelClass::Lane
                        } else if town.road_polygons.iter().any(|r| r.contains(&p)) {
                            PixelClass::Road
                        } else {
                            PixelClass::Offroad
                        }
                    }
                };
                assert_eq!(img.get(u, v), expected);
                if let Some(h) = ray_ground_intersection(&q, &placed) {
                    let back = project(&h, &placed).unwrap();
                    assert!((back.u - q.u).abs() < 1e-6 && (back.v - q.v).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn rgb_round_trip_and_palette() {
        let town = generate_town(4, &TownSpec::default()).unwrap();
        let cam = CameraModel::new("c", 32, 32, 90.0, CameraPose::new(0.0, 0.0, 1.8, -5.0, 0.0, 0.0)).unwrap();
        let img = render_camera_view(&town, &cam, &EgoPose::new(town.graph.nodes[0].x, town.graph.nodes[0].y, 0.0, 0));
        let rgb = img.to_rgb();
        assert_eq!(SemanticImage::from_rgb(&rgb).unwrap(), img);
        let mut bad = rgb.clone();
        bad.put_pixel(0, 0, Rgb([1, 2, 3]));
        assert!(SemanticImage::from_rgb(&bad).is_err());
    }

    #[test]
    fn ego_frame_round_trip() {
        let ego = EgoPose::new(3.0, -2.0, 2.2, 0);
        let p = ego.to_world(4.0, 1.5);
        let (f, l) = ego.to_ego(&p);
        assert!((f - 4.0).abs() < 1e-12 && (l - 1.5).abs() < 1e-12);
    }
}
