use std::f64::consts::PI;

use petgraph::algo::astar;
use petgraph::graph::{NodeIndex, UnGraph};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::town::{TownMap, P2};
use super::WorldError;

/// A planned route: the node-to-node path through the road graph and the
/// evenly resampled waypoints along it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub nodes: Vec<usize>,
    pub path: Vec<P2>,
    pub waypoints: Vec<P2>,
    pub spacing: f64,
}

impl Route {
    pub fn empty(spacing: f64) -> Self {
        Self { nodes: Vec::new(), path: Vec::new(), waypoints: Vec::new(), spacing }
    }

    /// Path length along the road graph.
    pub fn length(&self) -> f64 {
        polyline_length(&self.path)
    }

    /// Point on the path at arc length `s`, clamped to the path ends.
    pub fn point_at(&self, s: f64) -> P2 {
        point_along(&self.path, s)
    }

    /// Travel direction at arc length `s`, taken from the chord between
    /// `s - lookaround` and `s + lookaround` so that corners are smoothed.
    pub fn heading_at(&self, s: f64, lookaround: f64) -> f64 {
        let len = self.length();
        let a = self.point_at((s - lookaround).max(0.0));
        let b = self.point_at((s + lookaround).min(len));
        let d = b - a;
        if d.norm() == 0.0 {
            return 0.0;
        }
        wrap_angle(d.y.atan2(d.x))
    }
}

/// Maps any angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        -PI
    } else {
        w
    }
}

pub fn polyline_length(points: &[P2]) -> f64 {
    points.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

fn point_along(points: &[P2], s: f64) -> P2 {
    match points {
        [] => P2::origin(),
        [only] => *only,
        _ => {
            let mut remaining = s.max(0.0);
            for w in points.windows(2) {
                let len = (w[1] - w[0]).norm();
                if remaining <= len {
                    return if len == 0.0 { w[0] } else { w[0] + (w[1] - w[0]) * (remaining / len) };
                }
                remaining -= len;
            }
            points[points.len() - 1]
        }
    }
}

/// Resamples a polyline into `round(L / spacing)` equal arc-length steps,
/// keeping both end points.
pub fn resample(points: &[P2], spacing: f64) -> Vec<P2> {
    let len = polyline_length(points);
    if points.len() < 2 || len == 0.0 {
        return points.first().map(|p| vec![*p]).unwrap_or_default();
    }
    let n = ((len / spacing).round() as usize).max(1);
    (0..=n).map(|k| point_along(points, len * k as f64 / n as f64)).collect()
}

fn build_graph(town: &TownMap) -> UnGraph<(), f64> {
    let mut g = UnGraph::<(), f64>::with_capacity(town.graph.nodes.len(), town.graph.edges.len());
    for _ in &town.graph.nodes {
        g.add_node(());
    }
    for &e in &town.graph.edges {
        g.add_edge(NodeIndex::new(e.0), NodeIndex::new(e.1), town.graph.edge_length(e));
    }
    g
}

/// Shortest path from `start` to `goal` over the road graph, resampled at
/// `spacing` meters.
pub fn plan_route(town: &TownMap, start: usize, goal: usize, spacing: f64) -> Result<Route, WorldError> {
    let n = town.graph.nodes.len();
    if start >= n || goal >= n {
        return Err(WorldError::InvalidArgument(format!("node out of range (start {start}, goal {goal}, {n} nodes)")));
    }
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(WorldError::InvalidArgument(format!("spacing must be positive (got {spacing})")));
    }
    let g = build_graph(town);
    let target = town.graph.nodes[goal];
    let (_, node_path) = astar(
        &g,
        NodeIndex::new(start),
        |v| v.index() == goal,
        |e| *e.weight(),
        |v| (town.graph.nodes[v.index()] - target).norm(),
    )
    .ok_or(WorldError::NoRoute { start, goal })?;
    let nodes: Vec<usize> = node_path.into_iter().map(|v| v.index()).collect();
    let path: Vec<P2> = nodes.iter().map(|&i| town.graph.nodes[i]).collect();
    let waypoints = resample(&path, spacing);
    Ok(Route { nodes, path, waypoints, spacing })
}

/// Picks `count` distinct start/goal pairs whose routes are at least
/// `min_length` meters long. Deterministic in `seed`.
pub fn pick_routes(town: &TownMap, count: usize, min_length: f64, spacing: f64, seed: u64) -> Result<Vec<Route>, WorldError> {
    let n = town.graph.nodes.len();
    let mut pairs: Vec<(usize, usize)> =
        (0..n).flat_map(|a| (0..n).filter(move |&b| b != a).map(move |b| (a, b))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs.shuffle(&mut rng);
    let mut routes = Vec::with_capacity(count);
    for (a, b) in pairs {
        if routes.len() == count {
            break;
        }
        let route = plan_route(town, a, b, spacing)?;
        if route.length() >= min_length {
            routes.push(route);
        }
    }
    if routes.len() < count {
        return Err(WorldError::InvalidArgument(format!(
            "town has only {} routes of length >= {min_length} m, {count} requested",
            routes.len()
        )));
    }
    Ok(routes)
}
