use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{list_frames, read_json, write_json, DatasetError, Result, MANIFEST_FILE};
use crate::synthworld::{GridSpec, RigSpec};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RouteId {
    pub town: String,
    pub route: String,
}

impl RouteId {
    pub fn new(town: impl Into<String>, route: impl Into<String>) -> Self {
        Self { town: town.into(), route: route.into() }
    }
}

impl std::fmt::Display for RouteId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.town, self.route)
    }
}

pub fn route_name(index: usize) -> String {
    format!("route{index:02}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = DatasetError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(DatasetError::InvalidArgument(format!("unknown split '{s}' (train|val|test)"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<RouteId>,
    pub val: Vec<RouteId>,
    pub test: Vec<RouteId>,
    pub grid: GridSpec,
    pub rig: RigSpec,
}

/// Train and validation come from the first town (validation is its
/// `val_route`); every route of the remaining towns is test data.
pub fn make_splits(towns: &[String], routes_per_town: usize, val_route: &str) -> Result<SplitManifest> {
    if towns.len() < 2 {
        return Err(DatasetError::InvalidArgument(format!("need at least 2 towns (got {})", towns.len())));
    }
    if routes_per_town < 2 {
        return Err(DatasetError::InvalidArgument(format!("need at least 2 routes per town (got {routes_per_town})")));
    }
    if towns.iter().collect::<BTreeSet<_>>().len() != towns.len() {
        return Err(DatasetError::InvalidArgument(format!("town names must be distinct: {towns:?}")));
    }
    let names: Vec<String> = (0..routes_per_town).map(route_name).collect();
    if !names.iter().any(|n| n == val_route) {
        return Err(DatasetError::InvalidArgument(format!(
            "validation route '{val_route}' is not one of {}'s routes ({}..{})",
            towns[0],
            names[0],
            names[names.len() - 1]
        )));
    }
    let first = &towns[0];
    Ok(SplitManifest {
        train: names.iter().filter(|n| *n != val_route).map(|n| RouteId::new(first, n)).collect(),
        val: vec![RouteId::new(first, val_route)],
        test: towns[1..].iter().flat_map(|t| names.iter().map(move |n| RouteId::new(t, n))).collect(),
        grid: GridSpec::default(),
        rig: RigSpec::default(),
    })
}

impl SplitManifest {
    pub fn routes(&self, split: Split) -> &[RouteId] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// No route in two splits, no test town among training towns.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(r) {
                return Err(DatasetError::InvalidArgument(format!("route {r} appears in two splits")));
            }
        }
        let train_towns: BTreeSet<&String> = self.train.iter().chain(&self.val).map(|r| &r.town).collect();
        if let Some(r) = self.test.iter().find(|r| train_towns.contains(&r.town)) {
            return Err(DatasetError::InvalidArgument(format!("test route {r} is in a training town")));
        }
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let m: Self = read_json(&root.join(MANIFEST_FILE))?;
        m.check_disjoint()?;
        Ok(m)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        write_json(&root.join(MANIFEST_FILE), self)
    }

    /// Frame directories of a split, route by route in manifest order.
    pub fn frames(&self, root: &Path, split: Split) -> Result<Vec<std::path::PathBuf>> {
        let mut out = Vec::new();
        for r in self.routes(split) {
            out.extend(list_frames(root, r)?);
        }
        Ok(out)
    }
}

/// Shuffled mini-batch indices for one epoch; identical for identical
/// `(n, batch_size, seed, epoch)`.
pub fn batch_order(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64));
    idx.shuffle(&mut rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}
