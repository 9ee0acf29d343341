use nalgebra::{Point2, Vector2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::WorldError;

pub type P2 = Point2<f64>;

/// Block-grid layout parameters for [`generate_town`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TownSpec {
    pub blocks_x: usize,
    pub blocks_y: usize,
    pub block_min: f64,
    pub block_max: f64,
    pub road_width: f64,
    /// Fraction of interior road segments removed to create T-junctions.
    pub removal_fraction: f64,
    /// Offroad border around the outermost roads.
    pub margin: f64,
}

impl Default for TownSpec {
    fn default() -> Self {
        Self {
            blocks_x: 3,
            blocks_y: 3,
            block_min: 34.0,
            block_max: 52.0,
            road_width: 8.0,
            removal_fraction: 0.25,
            margin: 24.0,
        }
    }
}

impl TownSpec {
    fn validate(&self) -> Result<(), WorldError> {
        if self.blocks_x < 2 || self.blocks_y < 2 {
            return Err(WorldError::InvalidArgument(format!(
                "town needs at least a 2x2 block grid (got {}x{})",
                self.blocks_x, self.blocks_y
            )));
        }
        let sane = self.block_min.is_finite()
            && self.block_max.is_finite()
            && self.road_width.is_finite()
            && self.road_width > 0.0
            && self.block_min > 2.0 * self.road_width
            && self.block_max >= self.block_min
            && (0.0..1.0).contains(&self.removal_fraction)
            && self.margin >= 0.0;
        if !sane {
            return Err(WorldError::InvalidArgument(format!("degenerate town spec: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub points: Vec<P2>,
}

impl Polygon {
    /// Even-odd crossing test.
    pub fn contains(&self, p: &P2) -> bool {
        let pts = &self.points;
        let mut inside = false;
        let mut j = pts.len() - 1;
        for i in 0..pts.len() {
            let (a, b) = (pts[i], pts[j]);
            if (a.y > p.y) != (b.y > p.y) {
                let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
                if p.x < x {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }

    pub fn bounds(&self) -> (P2, P2) {
        bounds_of(&self.points, 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanePolyline {
    pub points: Vec<P2>,
    pub half_width: f64,
}

impl LanePolyline {
    pub fn covers(&self, p: &P2) -> bool {
        polyline_distance(&self.points, p) <= self.half_width
    }
}

/// Drivable waypoint graph: nodes at road junctions and corners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadGraph {
    pub nodes: Vec<P2>,
    pub edges: Vec<(usize, usize)>,
}

impl RoadGraph {
    pub fn degree(&self, node: usize) -> usize {
        self.edges.iter().filter(|(a, b)| *a == node || *b == node).count()
    }

    pub fn neighbors(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter_map(move |&(a, b)| {
            if a == node {
                Some(b)
            } else if b == node {
                Some(a)
            } else {
                None
            }
        })
    }

    pub fn edge_length(&self, edge: (usize, usize)) -> f64 {
        (self.nodes[edge.1] - self.nodes[edge.0]).norm()
    }

    pub fn is_connected(&self) -> bool {
        if self.nodes.is_empty() {
            return true;
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(n) = stack.pop() {
            for m in self.neighbors(n) {
                if !seen[m] {
                    seen[m] = true;
                    stack.push(m);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Positions of nodes where three or more roads meet.
    pub fn junctions(&self) -> Vec<P2> {
        (0..self.nodes.len()).filter(|&n| self.degree(n) >= 3).map(|n| self.nodes[n]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surface {
    Road,
    Lane,
    Offroad,
}

#[derive(Serialize, Deserialize)]
struct TownData {
    seed: u64,
    spec: TownSpec,
    extent: [f64; 2],
    road_polygons: Vec<Polygon>,
    lane_polylines: Vec<LanePolyline>,
    graph: RoadGraph,
}

/// A procedurally generated town on the ground plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "TownData", into = "TownData")]
pub struct TownMap {
    pub seed: u64,
    pub spec: TownSpec,
    /// Width and depth in meters; the town occupies `[0, extent[0]] x [0, extent[1]]`.
    pub extent: [f64; 2],
    pub road_polygons: Vec<Polygon>,
    pub lane_polylines: Vec<LanePolyline>,
    pub graph: RoadGraph,
    index: BucketIndex,
}

impl From<TownData> for TownMap {
    fn from(d: TownData) -> Self {
        let index = BucketIndex::build(d.extent, &d.road_polygons, &d.lane_polylines);
        Self {
            seed: d.seed,
            spec: d.spec,
            extent: d.extent,
            road_polygons: d.road_polygons,
            lane_polylines: d.lane_polylines,
            graph: d.graph,
            index,
        }
    }
}

impl From<TownMap> for TownData {
    fn from(t: TownMap) -> Self {
        Self {
            seed: t.seed,
            spec: t.spec,
            extent: t.extent,
            road_polygons: t.road_polygons,
            lane_polylines: t.lane_polylines,
            graph: t.graph,
        }
    }
}

impl TownMap {
    pub fn is_road(&self, p: &P2) -> bool {
        self.index.polygons_near(p).iter().any(|&i| self.road_polygons[i].contains(p))
    }

    pub fn is_lane(&self, p: &P2) -> bool {
        self.index.lanes_near(p).iter().any(|&i| self.lane_polylines[i].covers(p))
    }

    /// Lane markings take precedence over plain road surface.
    pub fn classify(&self, p: &P2) -> Surface {
        if self.is_lane(p) {
            Surface::Lane
        } else if self.is_road(p) {
            Surface::Road
        } else {
            Surface::Offroad
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("town serializes")
    }
}

/// Builds a town: a jittered block grid of straight two-way roads, with a
/// share of interior segments removed. Deterministic in `(seed, spec)`.
pub fn generate_town(seed: u64, spec: &TownSpec) -> Result<TownMap, WorldError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lines = |n: usize, rng: &mut ChaCha8Rng| {
        let mut acc = spec.margin;
        let mut out = vec![acc];
        for _ in 0..n {
            acc += if spec.block_max > spec.block_min {
                rng.random_range(spec.block_min..spec.block_max)
            } else {
                spec.block_min
            };
            out.push(acc);
        }
        out
    };
    let xs = lines(spec.blocks_x, &mut rng);
    let ys = lines(spec.blocks_y, &mut rng);
    let extent = [xs[xs.len() - 1] + spec.margin, ys[ys.len() - 1] + spec.margin];

    let (nx, ny) = (xs.len(), ys.len());
    let id = |i: usize, j: usize| j * nx + i;
    let mut nodes = Vec::with_capacity(nx * ny);
    for y in &ys {
        for x in &xs {
            nodes.push(P2::new(*x, *y));
        }
    }
    let mut edges = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            if i + 1 < nx {
                edges.push((id(i, j), id(i + 1, j)));
            }
            if j + 1 < ny {
                edges.push((id(i, j), id(i, j + 1)));
            }
        }
    }
    let on_boundary = |n: usize| {
        let (i, j) = (n % nx, n / nx);
        i == 0 || j == 0 || i == nx - 1 || j == ny - 1
    };
    let mut candidates: Vec<(usize, usize)> =
        edges.iter().copied().filter(|&(a, b)| !(on_boundary(a) && on_boundary(b))).collect();
    candidates.shuffle(&mut rng);
    let target = (spec.removal_fraction * candidates.len() as f64).floor() as usize;

    let mut graph = RoadGraph { nodes, edges };
    let mut removed = 0;
    for cand in candidates {
        if removed == target {
            break;
        }
        let mut trial = graph.clone();
        trial.edges.retain(|e| *e != cand);
        let min_degree = (0..trial.nodes.len()).map(|n| trial.degree(n)).min().unwrap_or(0);
        let has_crossing = (0..trial.nodes.len()).any(|n| trial.degree(n) >= 4);
        if min_degree >= 2 && has_crossing && trial.is_connected() {
            graph = trial;
            removed += 1;
        }
    }

    let hw = spec.road_width / 2.0;
    let mut road_polygons = Vec::with_capacity(graph.edges.len());
    let mut lane_polylines = Vec::new();
    for &(a, b) in &graph.edges {
        let (pa, pb) = (graph.nodes[a], graph.nodes[b]);
        let dir: Vector2<f64> = (pb - pa).normalize();
        let normal = Vector2::new(-dir.y, dir.x);
        let (start, end) = (pa - dir * hw, pb + dir * hw);
        road_polygons.push(Polygon {
            points: vec![start + normal * hw, start - normal * hw, end - normal * hw, end + normal * hw],
        });
        let (inner_a, inner_b) = (pa + dir * hw, pb - dir * hw);
        if (inner_b - inner_a).dot(&dir) <= 0.0 {
            continue;
        }
        lane_polylines.push(LanePolyline { points: vec![inner_a, inner_b], half_width: 0.15 });
        for side in [-1.0, 1.0] {
            let off = normal * (side * (hw - 0.5));
            lane_polylines.push(LanePolyline { points: vec![inner_a + off, inner_b + off], half_width: 0.12 });
        }
    }

    Ok(TownData { seed, spec: spec.clone(), extent, road_polygons, lane_polylines, graph }.into())
}

pub(crate) fn segment_distance(a: &P2, b: &P2, p: &P2) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

pub(crate) fn polyline_distance(points: &[P2], p: &P2) -> f64 {
    match points {
        [] => f64::INFINITY,
        [only] => (p - only).norm(),
        _ => points.windows(2).map(|w| segment_distance(&w[0], &w[1], p)).fold(f64::INFINITY, f64::min),
    }
}

fn bounds_of(points: &[P2], pad: f64) -> (P2, P2) {
    let mut lo = P2::new(f64::INFINITY, f64::INFINITY);
    let mut hi = P2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        lo.x = lo.x.min(p.x);
        lo.y = lo.y.min(p.y);
        hi.x = hi.x.max(p.x);
        hi.y = hi.y.max(p.y);
    }
    (P2::new(lo.x - pad, lo.y - pad), P2::new(hi.x + pad, hi.y + pad))
}

const BUCKET: f64 = 8.0;

/// Uniform bucket grid over the town extent listing the primitives whose
/// bounding boxes touch each bucket.
#[derive(Debug, Clone, PartialEq, Default)]
struct BucketIndex {
    cols: usize,
    rows: usize,
    polygons: Vec<Vec<usize>>,
    lanes: Vec<Vec<usize>>,
}

impl BucketIndex {
    fn build(extent: [f64; 2], polygons: &[Polygon], lanes: &[LanePolyline]) -> Self {
        let cols = (extent[0] / BUCKET).ceil().max(1.0) as usize;
        let rows = (extent[1] / BUCKET).ceil().max(1.0) as usize;
        let mut idx = Self { cols, rows, polygons: vec![Vec::new(); cols * rows], lanes: vec![Vec::new(); cols * rows] };
        for (i, poly) in polygons.iter().enumerate() {
            let (lo, hi) = poly.bounds();
            for b in idx.buckets_in(lo, hi) {
                idx.polygons[b].push(i);
            }
        }
        for (i, lane) in lanes.iter().enumerate() {
            let (lo, hi) = bounds_of(&lane.points, lane.half_width);
            for b in idx.buckets_in(lo, hi) {
                idx.lanes[b].push(i);
            }
        }
        idx
    }

    fn clamp_cell(&self, p: &P2) -> (usize, usize) {
        let c = (p.x / BUCKET).floor().clamp(0.0, (self.cols - 1) as f64) as usize;
        let r = (p.y / BUCKET).floor().clamp(0.0, (self.rows - 1) as f64) as usize;
        (c, r)
    }

    fn buckets_in(&self, lo: P2, hi: P2) -> Vec<usize> {
        let (c0, r0) = self.clamp_cell(&lo);
        let (c1, r1) = self.clamp_cell(&hi);
        (r0..=r1).flat_map(|r| (c0..=c1).map(move |c| r * self.cols + c)).collect()
    }

    fn bucket_of(&self, p: &P2) -> Option<usize> {
        let (x, y) = (p.x / BUCKET, p.y / BUCKET);
        if !(x >= 0.0 && y >= 0.0) {
            return None;
        }
        let (c, r) = (x.floor() as usize, y.floor() as usize);
        (c < self.cols && r < self.rows).then_some(r * self.cols + c)
    }

    fn polygons_near(&self, p: &P2) -> &[usize] {
        self.bucket_of(p).map_or(&[], |b| &self.polygons[b])
    }

    fn lanes_near(&self, p: &P2) -> &[usize] {
        self.bucket_of(p).map_or(&[], |b| &self.lanes[b])
    }
}
