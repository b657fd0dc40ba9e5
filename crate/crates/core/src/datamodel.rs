//! Core domain types shared by every other module.
//!
//! Node features here are already normalized (z-scored); raw physical
//! values live only in the dataset files and in evaluation, which
//! de-normalizes before reporting metrics.

use serde::{Deserialize, Serialize};

/// Geographic coordinate. Longitude is normalized into [-180, 180).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat_deg: f64,
    pub lon_deg: f64,
}

impl LatLon {
    /// Construct with longitude wrapping. Panics on latitude out of
    /// [-90, 90]; latitudes cannot be normalized away.
    pub fn new(lat_deg: f64, lon_deg: f64) -> Self {
        assert!(
            (-90.0..=90.0).contains(&lat_deg),
            "latitude {lat_deg} outside [-90, 90]"
        );
        LatLon {
            lat_deg,
            lon_deg: wrap_lon(lon_deg),
        }
    }
}

/// Wrap a longitude into [-180, 180).
pub fn wrap_lon(lon_deg: f64) -> f64 {
    let w = (lon_deg + 180.0).rem_euclid(360.0) - 180.0;
    // rem_euclid can return exactly 360.0 - epsilon artifacts; the only
    // boundary needing care is +180, which must map to -180.
    if w >= 180.0 {
        w - 360.0
    } else {
        w
    }
}

/// Fixed grid location carrying the full variable vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridNode {
    pub id: u64,
    pub loc: LatLon,
    /// One value per variable, z-scored.
    pub features: Vec<f64>,
}

/// Transient observation. Exists at exactly one time step; its id is not
/// reused meaningfully across steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObsNode {
    pub id: u64,
    pub loc: LatLon,
    /// Index into the dataset's platform-family table.
    pub family: usize,
    /// One value per variable, z-scored; invalid channels hold 0.
    pub values: Vec<f64>,
    /// True where the platform actually reports the channel.
    pub mask: Vec<bool>,
}

/// All nodes and initial (distance-based) edges at one time step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSnapshot {
    pub t: usize,
    pub grid: Vec<GridNode>,
    pub obs: Vec<ObsNode>,
    /// Undirected, stored once per pair.
    pub edges: Vec<(u64, u64)>,
}

/// One rule violation found by [`validate_snapshot`]. Violations are
/// data, not errors: callers decide whether to reject.
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    DanglingEdge { edge: (u64, u64), missing: u64 },
    SelfEdge { id: u64 },
    DuplicateId { id: u64 },
    GridObsIdOverlap { id: u64 },
    LatitudeOutOfRange { id: u64, lat_deg: f64 },
    FeatureWidth { id: u64, got: usize, want: usize },
    MaskWidth { id: u64, got: usize, want: usize },
    AllChannelsMasked { id: u64 },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::DanglingEdge { edge, missing } => {
                write!(f, "edge ({}, {}) references missing id {missing}", edge.0, edge.1)
            }
            Violation::SelfEdge { id } => write!(f, "self-edge on id {id}"),
            Violation::DuplicateId { id } => write!(f, "duplicate node id {id}"),
            Violation::GridObsIdOverlap { id } => {
                write!(f, "id {id} used by both a grid node and an observation")
            }
            Violation::LatitudeOutOfRange { id, lat_deg } => {
                write!(f, "node {id} latitude {lat_deg} outside [-90, 90]")
            }
            Violation::FeatureWidth { id, got, want } => {
                write!(f, "node {id} has {got} features, expected {want}")
            }
            Violation::MaskWidth { id, got, want } => {
                write!(f, "node {id} mask width {got} != feature width {want}")
            }
            Violation::AllChannelsMasked { id } => {
                write!(f, "observation {id} has no valid channel")
            }
        }
    }
}

/// Check every snapshot invariant; an empty result means the snapshot is
/// well formed. `var_count` is the configured number of variables.
pub fn validate_snapshot(s: &GraphSnapshot, var_count: usize) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut grid_ids = std::collections::BTreeSet::new();
    let mut obs_ids = std::collections::BTreeSet::new();

    for g in &s.grid {
        if !grid_ids.insert(g.id) {
            out.push(Violation::DuplicateId { id: g.id });
        }
        if !(-90.0..=90.0).contains(&g.loc.lat_deg) {
            out.push(Violation::LatitudeOutOfRange {
                id: g.id,
                lat_deg: g.loc.lat_deg,
            });
        }
        if g.features.len() != var_count {
            out.push(Violation::FeatureWidth {
                id: g.id,
                got: g.features.len(),
                want: var_count,
            });
        }
    }
    for o in &s.obs {
        if !obs_ids.insert(o.id) {
            out.push(Violation::DuplicateId { id: o.id });
        }
        if grid_ids.contains(&o.id) {
            out.push(Violation::GridObsIdOverlap { id: o.id });
        }
        if !(-90.0..=90.0).contains(&o.loc.lat_deg) {
            out.push(Violation::LatitudeOutOfRange {
                id: o.id,
                lat_deg: o.loc.lat_deg,
            });
        }
        if o.values.len() != var_count {
            out.push(Violation::FeatureWidth {
                id: o.id,
                got: o.values.len(),
                want: var_count,
            });
        }
        if o.mask.len() != o.values.len() {
            out.push(Violation::MaskWidth {
                id: o.id,
                got: o.mask.len(),
                want: o.values.len(),
            });
        } else if !o.mask.iter().any(|&m| m) {
            out.push(Violation::AllChannelsMasked { id: o.id });
        }
    }
    for &(a, b) in &s.edges {
        if a == b {
            out.push(Violation::SelfEdge { id: a });
        }
        for id in [a, b] {
            if !grid_ids.contains(&id) && !obs_ids.contains(&id) {
                out.push(Violation::DanglingEdge {
                    edge: (a, b),
                    missing: id,
                });
            }
        }
    }
    out
}

/// Node kind within a subgraph, with the observation's platform family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Grid,
    Obs { family: usize },
}

/// One node of a per-step subgraph, indexed by its position (local id).
#[derive(Clone, Debug, PartialEq)]
pub struct LocalNode {
    pub global_id: u64,
    pub kind: NodeKind,
    pub loc: LatLon,
    /// z-scored values; zero where masked.
    pub features: Vec<f64>,
    /// All-true for grid nodes.
    pub mask: Vec<bool>,
}

/// Induced k-hop subgraph around the target at one time step. Local ids
/// are positions in `nodes`; `nodes[i].global_id` is the remap table.
#[derive(Clone, Debug, PartialEq)]
pub struct SubgraphSnapshot {
    pub t: usize,
    pub nodes: Vec<LocalNode>,
    /// Undirected local pairs (i < j) with great-circle distance in km.
    pub edges: Vec<(usize, usize, f64)>,
    pub target_local: usize,
}

impl SubgraphSnapshot {
    /// The local-to-global remapping must be a bijection.
    pub fn remap_is_bijection(&self) -> bool {
        let mut seen = std::collections::BTreeSet::new();
        self.nodes.iter().all(|n| seen.insert(n.global_id))
    }
}

/// The unit of training: m per-step subgraphs rooted at one target grid
/// node, plus the next-step label when forecasting.
#[derive(Clone, Debug, PartialEq)]
pub struct SubgraphWindow {
    pub target_id: u64,
    pub snapshots: Vec<SubgraphSnapshot>,
    /// z-scored next-step variables at the target; absent in pretraining.
    pub target_next: Option<Vec<f64>>,
}

impl SubgraphWindow {
    /// Last input time step of the window.
    pub fn t_end(&self) -> usize {
        self.snapshots.last().map(|s| s.t).unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(id: u64, lat: f64, lon: f64) -> GridNode {
        GridNode {
            id,
            loc: LatLon::new(lat, lon),
            features: vec![0.0; 4],
        }
    }

    fn obs(id: u64, lat: f64, lon: f64, mask: Vec<bool>) -> ObsNode {
        ObsNode {
            id,
            loc: LatLon::new(lat, lon),
            family: 0,
            values: vec![0.0; mask.len()],
            mask,
        }
    }

    #[test]
    fn lon_wrapping() {
        assert_eq!(LatLon::new(0.0, 180.0).lon_deg, -180.0);
        assert_eq!(LatLon::new(0.0, -180.0).lon_deg, -180.0);
        assert_eq!(LatLon::new(0.0, 540.0).lon_deg, -180.0);
        assert_eq!(LatLon::new(0.0, 359.0).lon_deg, -1.0);
        assert_eq!(LatLon::new(0.0, 10.0).lon_deg, 10.0);
    }

    #[test]
    #[should_panic(expected = "latitude")]
    fn latitude_bounds_enforced() {
        LatLon::new(91.0, 0.0);
    }

    #[test]
    fn empty_snapshot_is_valid() {
        let s = GraphSnapshot {
            t: 0,
            grid: vec![],
            obs: vec![],
            edges: vec![],
        };
        assert!(validate_snapshot(&s, 4).is_empty());
    }

    #[test]
    fn dangling_edge_reported() {
        let s = GraphSnapshot {
            t: 0,
            grid: vec![grid(0, 0.0, 0.0)],
            obs: vec![],
            edges: vec![(0, 99)],
        };
        let v = validate_snapshot(&s, 4);
        assert_eq!(
            v,
            vec![Violation::DanglingEdge {
                edge: (0, 99),
                missing: 99
            }]
        );
    }

    #[test]
    fn duplicate_grid_id_reported() {
        let s = GraphSnapshot {
            t: 0,
            grid: vec![grid(1, 0.0, 0.0), grid(1, 1.0, 1.0)],
            obs: vec![],
            edges: vec![],
        };
        assert_eq!(validate_snapshot(&s, 4), vec![Violation::DuplicateId { id: 1 }]);
    }

    #[test]
    fn obs_invariants_checked() {
        let s = GraphSnapshot {
            t: 0,
            grid: vec![grid(0, 0.0, 0.0)],
            obs: vec![
                obs(0, 0.0, 0.0, vec![true; 4]),              // id overlap with grid
                obs(10, 0.0, 0.0, vec![false; 4]),            // fully masked
                obs(11, 0.0, 0.0, vec![true, true, true]),    // mask narrower than vars
            ],
            edges: vec![(0, 0)],
        };
        let v = validate_snapshot(&s, 4);
        assert!(v.contains(&Violation::GridObsIdOverlap { id: 0 }));
        assert!(v.contains(&Violation::AllChannelsMasked { id: 10 }));
        assert!(v.contains(&Violation::FeatureWidth { id: 11, got: 3, want: 4 }));
        assert!(v.contains(&Violation::SelfEdge { id: 0 }));
    }

    #[test]
    fn snapshot_json_round_trip_is_exact() {
        // Awkward float values that must survive serialization bit-for-bit.
        let s = GraphSnapshot {
            t: 7,
            grid: vec![GridNode {
                id: 3,
                loc: LatLon::new(0.1 + 0.2, -179.999_999_9),
                features: vec![1.0 / 3.0, f64::MIN_POSITIVE, 1e300, -0.0],
            }],
            obs: vec![ObsNode {
                id: 400,
                loc: LatLon::new(-45.0, 179.5),
                family: 1,
                values: vec![0.1, 0.2, 0.30000000000000004, 2e-308],
                mask: vec![true, false, true, true],
            }],
            edges: vec![(3, 400)],
        };
        let text = serde_json::to_string(&s).unwrap();
        let back: GraphSnapshot = serde_json::from_str(&text).unwrap();
        assert_eq!(s, back);
        for (a, b) in s.grid[0].features.iter().zip(&back.grid[0].features) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
