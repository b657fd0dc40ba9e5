//! Spatial graph construction: great-circle distances, radius edges,
//! k-hop subgraph extraction, and training-window assembly.
//!
//! Local node order is always grid slots first (ascending cell id), then
//! one slot per observation record in dataset order. Edge distances are
//! computed lower-slot-first, which together with the bitwise symmetry of
//! [`haversine_km`] makes every materialized structure reproducible.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::{FRAC_PI_2, PI};

use crate::datamodel::{
    GraphSnapshot, GridNode, LatLon, LocalNode, NodeKind, ObsNode, SubgraphSnapshot,
    SubgraphWindow,
};
use crate::error::{Error, Result};
use crate::noise::{KeyedNoise, NoiseKey, NoiseKind, NoiseSource};
use crate::synthgen::{Dataset, ObsRecord, Split};

pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Kilometres per degree of latitude (and of longitude at the equator).
pub const KM_PER_DEG: f64 = EARTH_RADIUS_KM * PI / 180.0;

/// Great-circle distance in km. Bitwise symmetric in its arguments.
pub fn haversine_km(a: LatLon, b: LatLon) -> f64 {
    let lat1 = a.lat_deg.to_radians();
    let lat2 = b.lat_deg.to_radians();
    let half_dlat = 0.5 * (b.lat_deg - a.lat_deg).to_radians();
    let half_dlon = 0.5 * (b.lon_deg - a.lon_deg).to_radians();
    let s = half_dlat.sin().powi(2) + lat1.cos() * lat2.cos() * half_dlon.sin().powi(2);
    2.0 * EARTH_RADIUS_KM * s.sqrt().min(1.0).asin()
}

/// Lat/lon bucket grid sized so that any two points within `radius_km`
/// fall in the same or adjacent buckets. Columns wrap around the
/// antimeridian; rows do not wrap (latitude cannot).
struct BucketIndex {
    lat_cell_deg: f64,
    lon_cell_deg: f64,
    n_cols: i64,
    buckets: BTreeMap<(i64, i64), Vec<u32>>,
}

impl BucketIndex {
    /// `max_abs_lat_deg` must bound |lat| over indexed AND query points.
    /// The worst-case longitude separation of two points within the
    /// radius occurs when both sit at that latitude, which fixes the
    /// column width rigorously: sin(dlon/2) <= sin(r/2R) / cos(lat).
    fn new(locs: &[LatLon], radius_km: f64, max_abs_lat_deg: f64) -> BucketIndex {
        let radius_km = radius_km.max(1e-9);
        let lat_cell_deg = radius_km / KM_PER_DEG;
        let u = (radius_km / (2.0 * EARTH_RADIUS_KM)).min(FRAC_PI_2).sin()
            / max_abs_lat_deg.abs().min(90.0).to_radians().cos();
        let n_cols = if u >= 1.0 {
            1
        } else {
            let worst_dlon_deg = 2.0 * u.asin().to_degrees();
            ((360.0 / worst_dlon_deg).floor() as i64).max(1)
        };
        let mut index = BucketIndex {
            lat_cell_deg,
            lon_cell_deg: 360.0 / n_cols as f64,
            n_cols,
            buckets: BTreeMap::new(),
        };
        for (i, &loc) in locs.iter().enumerate() {
            let key = index.key_of(loc);
            index.buckets.entry(key).or_default().push(i as u32);
        }
        index
    }

    fn key_of(&self, loc: LatLon) -> (i64, i64) {
        let row = ((loc.lat_deg + 90.0) / self.lat_cell_deg).floor() as i64;
        let col = (((loc.lon_deg + 180.0) / self.lon_cell_deg).floor() as i64)
            .clamp(0, self.n_cols - 1);
        (row, col)
    }

    /// Collect indices of all points in the 3x3 bucket neighborhood of
    /// `loc` into `out` (cleared first). Every point appears at most once.
    fn candidates(&self, loc: LatLon, out: &mut Vec<u32>) {
        out.clear();
        let (row, col) = self.key_of(loc);
        let mut cols = [
            (col - 1).rem_euclid(self.n_cols),
            col,
            (col + 1).rem_euclid(self.n_cols),
        ];
        cols.sort_unstable();
        for (i, &c) in cols.iter().enumerate() {
            if i > 0 && cols[i - 1] == c {
                continue; // collapsed wrap-around column
            }
            for r in row - 1..=row + 1 {
                if let Some(v) = self.buckets.get(&(r, c)) {
                    out.extend_from_slice(v);
                }
            }
        }
    }
}

fn max_abs_lat(locs: &[LatLon]) -> f64 {
    locs.iter().map(|l| l.lat_deg.abs()).fold(0.0, f64::max)
}

/// All pairs within `radius_km` (inclusive), as slice indices i < j plus
/// the distance, sorted by (i, j).
fn radius_edges_indexed(
    locs: &[LatLon],
    radius_km: f64,
    max_abs_lat_deg: f64,
) -> Vec<(u32, u32, f64)> {
    let index = BucketIndex::new(locs, radius_km, max_abs_lat_deg);
    let mut out = Vec::new();
    let mut cand = Vec::new();
    for (i, &loc) in locs.iter().enumerate() {
        index.candidates(loc, &mut cand);
        for &j in &cand {
            if (j as usize) > i {
                let d = haversine_km(loc, locs[j as usize]);
                if d <= radius_km {
                    out.push((i as u32, j, d));
                }
            }
        }
    }
    out.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    out
}

/// Undirected distance edges between all node pairs within `radius_km`
/// (inclusive). Pairs are reported once, in input-position order, with
/// the great-circle distance in km.
pub fn build_radius_edges(nodes: &[(u64, LatLon)], radius_km: f64) -> Vec<(u64, u64, f64)> {
    let locs: Vec<LatLon> = nodes.iter().map(|&(_, l)| l).collect();
    radius_edges_indexed(&locs, radius_km, max_abs_lat(&locs))
        .into_iter()
        .map(|(i, j, d)| (nodes[i as usize].0, nodes[j as usize].0, d))
        .collect()
}

/// Breadth-first expansion to at most `k` hops. Returns visited slots in
/// ascending order; `start` itself is always included.
fn bfs_within_k(adj: &[Vec<(u32, f64)>], start: usize, k: usize) -> Vec<usize> {
    let mut visited = vec![false; adj.len()];
    visited[start] = true;
    let mut frontier = vec![start];
    for _ in 0..k {
        let mut next = Vec::new();
        for &i in &frontier {
            for &(j, _) in &adj[i] {
                if !visited[j as usize] {
                    visited[j as usize] = true;
                    next.push(j as usize);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    (0..adj.len()).filter(|&i| visited[i]).collect()
}

/// Nodes within `k` hops of `target` plus the induced edges, at the id
/// level. Node ids come back sorted ascending; edges keep snapshot order.
/// Edges referencing unknown ids are ignored here; use
/// [`crate::datamodel::validate_snapshot`] to surface them.
pub fn khop_subgraph(
    s: &GraphSnapshot,
    target: u64,
    k: usize,
) -> Result<(Vec<u64>, Vec<(u64, u64)>)> {
    let ids: Vec<u64> = s
        .grid
        .iter()
        .map(|n| n.id)
        .chain(s.obs.iter().map(|n| n.id))
        .collect();
    let index: BTreeMap<u64, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let start = *index
        .get(&target)
        .ok_or_else(|| Error::config(format!("target id {target} not present in snapshot")))?;
    let mut adj: Vec<Vec<(u32, f64)>> = vec![Vec::new(); ids.len()];
    for &(a, b) in &s.edges {
        if let (Some(&ia), Some(&ib)) = (index.get(&a), index.get(&b)) {
            if ia != ib {
                adj[ia].push((ib as u32, 0.0));
                adj[ib].push((ia as u32, 0.0));
            }
        }
    }
    let in_set: BTreeSet<u64> = bfs_within_k(&adj, start, k)
        .into_iter()
        .map(|i| ids[i])
        .collect();
    let edges = s
        .edges
        .iter()
        .copied()
        .filter(|&(a, b)| in_set.contains(&a) && in_set.contains(&b))
        .collect();
    Ok((in_set.into_iter().collect(), edges))
}

/// Graph-side knobs shared by training and evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraphConfig {
    /// Edge radius of the initial distance graph, in km.
    pub radius_km: f64,
    /// Hop count for subgraph extraction around the target.
    pub khop: usize,
    /// Number of input steps per window; the label is the step after.
    pub window: usize,
    /// Whether observations may link to each other, not only to the grid.
    pub obs_obs_edges: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            radius_km: 50.0,
            khop: 3,
            window: 8,
            obs_obs_edges: true,
        }
    }
}

/// Adjacency and observation geometry for one time step. Slot i < grid
/// count is grid cell i; slot grid count + o is observation record o.
pub struct StepGraph {
    /// Sorted neighbor lists with great-circle distances in km.
    pub adj: Vec<Vec<(u32, f64)>>,
    pub obs_locs: Vec<LatLon>,
    pub obs_family: Vec<usize>,
}

/// Per-dataset graph cache: grid geometry once, obs edges per step.
pub struct SnapshotCache {
    pub grid_locs: Vec<LatLon>,
    pub steps: Vec<StepGraph>,
}

/// Build the adjacency cache for every step of the dataset.
pub fn build_cache(ds: &Dataset, gcfg: &GraphConfig) -> Result<SnapshotCache> {
    let g = ds.grid_count();
    let grid_locs: Vec<LatLon> = (0..g)
        .map(|id| {
            let (lat, lon) = ds.cell_latlon(id);
            LatLon::new(lat, lon)
        })
        .collect();
    let worst_lat = max_abs_lat(&grid_locs).max(
        ds.obs_by_step
            .iter()
            .flatten()
            .map(|r| r.lat.abs())
            .fold(0.0, f64::max),
    );
    let grid_index = BucketIndex::new(&grid_locs, gcfg.radius_km, worst_lat);
    let grid_edges = radius_edges_indexed(&grid_locs, gcfg.radius_km, worst_lat);

    let mut steps = Vec::with_capacity(ds.steps());
    for t in 0..ds.steps() {
        let recs = &ds.obs_by_step[t];
        let obs_locs: Vec<LatLon> = recs.iter().map(|r| LatLon::new(r.lat, r.lon)).collect();
        let obs_family = recs
            .iter()
            .map(|r| {
                ds.meta.config.family_of_platform(&r.platform).ok_or_else(|| {
                    Error::config(format!(
                        "observation platform {:?} not in the dataset's platform table",
                        r.platform
                    ))
                })
            })
            .collect::<Result<Vec<usize>>>()?;

        let mut adj: Vec<Vec<(u32, f64)>> = vec![Vec::new(); g + recs.len()];
        for &(a, b, d) in &grid_edges {
            adj[a as usize].push((b, d));
            adj[b as usize].push((a, d));
        }
        let mut cand = Vec::new();
        for (o, &loc) in obs_locs.iter().enumerate() {
            let slot = (g + o) as u32;
            grid_index.candidates(loc, &mut cand);
            for &gi in &cand {
                let d = haversine_km(grid_locs[gi as usize], loc);
                if d <= gcfg.radius_km {
                    adj[gi as usize].push((slot, d));
                    adj[slot as usize].push((gi, d));
                }
            }
        }
        if gcfg.obs_obs_edges {
            for (a, b, d) in radius_edges_indexed(&obs_locs, gcfg.radius_km, worst_lat) {
                adj[g + a as usize].push(((g + b as usize) as u32, d));
                adj[g + b as usize].push(((g + a as usize) as u32, d));
            }
        }
        for list in &mut adj {
            list.sort_unstable_by_key(|&(j, _)| j);
        }
        steps.push(StepGraph {
            adj,
            obs_locs,
            obs_family,
        });
    }
    Ok(SnapshotCache { grid_locs, steps })
}

/// Grid input features at (t, cell): z-scored state plus the configured
/// background-error noise, keyed by the dataset seed so a dataset always
/// renders identically. Forecast labels never get this noise.
fn grid_features(ds: &Dataset, noise: &KeyedNoise, t: usize, cell: usize) -> Vec<f64> {
    let sigma = ds.meta.config.grid_noise_sigma;
    (0..ds.var_count())
        .map(|v| {
            let z = ds.normalize(v, ds.series.get(t, cell, v));
            if sigma > 0.0 {
                z + sigma
                    * noise.normal(NoiseKey::new(
                        NoiseKind::GridError,
                        t as u64,
                        cell as u64,
                        v as u64,
                    ))
            } else {
                z
            }
        })
        .collect()
}

/// z-scored observation values (zero where masked) plus the mask.
fn obs_features(ds: &Dataset, rec: &ObsRecord) -> (Vec<f64>, Vec<bool>) {
    let values = (0..ds.var_count())
        .map(|v| {
            if rec.mask[v] {
                ds.normalize(v, rec.values[v])
            } else {
                0.0
            }
        })
        .collect();
    (values, rec.mask.clone())
}

/// Materialize the full id-level snapshot at step `t`.
pub fn snapshot_at(ds: &Dataset, cache: &SnapshotCache, t: usize) -> GraphSnapshot {
    let g = ds.grid_count();
    let sg = &cache.steps[t];
    let noise = KeyedNoise::new(ds.meta.config.seed);
    let grid = (0..g)
        .map(|cell| GridNode {
            id: cell as u64,
            loc: cache.grid_locs[cell],
            features: grid_features(ds, &noise, t, cell),
        })
        .collect();
    let obs = ds.obs_by_step[t]
        .iter()
        .enumerate()
        .map(|(o, rec)| {
            let (values, mask) = obs_features(ds, rec);
            ObsNode {
                id: rec.id,
                loc: sg.obs_locs[o],
                family: sg.obs_family[o],
                values,
                mask,
            }
        })
        .collect();
    let global = |slot: usize| {
        if slot < g {
            slot as u64
        } else {
            ds.obs_by_step[t][slot - g].id
        }
    };
    let mut edges = Vec::new();
    for (i, list) in sg.adj.iter().enumerate() {
        for &(j, _) in list {
            if (j as usize) > i {
                edges.push((global(i), global(j as usize)));
            }
        }
    }
    GraphSnapshot { t, grid, obs, edges }
}

/// Cheap handle for one training window. Materialization is deferred so
/// an epoch can subsample plans without paying for unused windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowPlan {
    pub target: u64,
    /// Last input step; the forecast label lives at `t_end + 1`.
    pub t_end: usize,
}

/// Every (target, t_end) pair whose inputs AND label fall inside the
/// split: per target that is split length minus window many plans.
pub fn window_plans(
    ds: &Dataset,
    gcfg: &GraphConfig,
    split: Split,
    targets: &[u64],
) -> Vec<WindowPlan> {
    assert!(gcfg.window >= 1, "window must be at least 1");
    let r = ds.meta.split.range(split, ds.steps());
    let mut out = Vec::new();
    if r.len() < gcfg.window + 1 {
        return out;
    }
    for &target in targets {
        for t_end in r.start + gcfg.window - 1..=r.end - 2 {
            out.push(WindowPlan { target, t_end });
        }
    }
    out
}

/// All grid cells, the usual forecast target set.
pub fn all_grid_targets(ds: &Dataset) -> Vec<u64> {
    (0..ds.grid_count() as u64).collect()
}

/// Materialize one window: `window` consecutive k-hop subgraphs around
/// the target, features z-scored, plus the clean next-step label when
/// `with_label` is set (pretraining passes false).
pub fn materialize_window(
    ds: &Dataset,
    cache: &SnapshotCache,
    gcfg: &GraphConfig,
    plan: &WindowPlan,
    with_label: bool,
) -> SubgraphWindow {
    let g = ds.grid_count();
    let target = plan.target as usize;
    assert!(target < g, "target {target} is not a grid cell");
    assert!(plan.t_end < ds.steps(), "t_end {} out of range", plan.t_end);
    assert!(
        plan.t_end + 1 >= gcfg.window,
        "window of {} steps does not fit before t_end {}",
        gcfg.window,
        plan.t_end
    );
    if with_label {
        assert!(plan.t_end + 1 < ds.steps(), "label step out of range");
    }

    let noise = KeyedNoise::new(ds.meta.config.seed);
    let mut snapshots = Vec::with_capacity(gcfg.window);
    for t in plan.t_end + 1 - gcfg.window..=plan.t_end {
        let sg = &cache.steps[t];
        let slots = bfs_within_k(&sg.adj, target, gcfg.khop);
        let mut pos_of = vec![usize::MAX; sg.adj.len()];
        for (p, &s) in slots.iter().enumerate() {
            pos_of[s] = p;
        }
        let nodes = slots
            .iter()
            .map(|&s| {
                if s < g {
                    LocalNode {
                        global_id: s as u64,
                        kind: NodeKind::Grid,
                        loc: cache.grid_locs[s],
                        features: grid_features(ds, &noise, t, s),
                        mask: vec![true; ds.var_count()],
                    }
                } else {
                    let o = s - g;
                    let rec = &ds.obs_by_step[t][o];
                    let (features, mask) = obs_features(ds, rec);
                    LocalNode {
                        global_id: rec.id,
                        kind: NodeKind::Obs {
                            family: sg.obs_family[o],
                        },
                        loc: sg.obs_locs[o],
                        features,
                        mask,
                    }
                }
            })
            .collect();
        let mut edges = Vec::new();
        for &s in &slots {
            for &(j, d) in &sg.adj[s] {
                let j = j as usize;
                if j > s && pos_of[j] != usize::MAX {
                    edges.push((pos_of[s], pos_of[j], d));
                }
            }
        }
        snapshots.push(SubgraphSnapshot {
            t,
            nodes,
            edges,
            target_local: pos_of[target],
        });
    }
    let target_next = with_label.then(|| {
        (0..ds.var_count())
            .map(|v| ds.normalize(v, ds.series.get(plan.t_end + 1, target, v)))
            .collect()
    });
    SubgraphWindow {
        target_id: plan.target,
        snapshots,
        target_next,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::validate_snapshot;
    use crate::synthgen::{build_dataset, Motion, PlatformSpec, SimConfig};
    use proptest::prelude::*;

    fn p(lat: f64, lon: f64) -> LatLon {
        LatLon::new(lat, lon)
    }

    fn tiny_config(grid_noise_sigma: f64) -> SimConfig {
        SimConfig {
            grid_nx: 4,
            grid_ny: 4,
            lat0_deg: 0.0,
            lon0_deg: 10.0,
            cell_deg: 0.345,
            dt_hours: 6.0,
            steps: 20,
            advect_speed_cells: 0.7,
            advect_angle0_deg: 25.0,
            advect_rot_period_steps: 0.0,
            diffusion_cells2: 0.05,
            init_corr_cells: 1.2,
            init_bumps: 6,
            var_names: vec!["U".into(), "V".into(), "T".into(), "Q".into()],
            var_means: vec![10.0, 5.0, 285.0, 0.008],
            var_scales: vec![5.0, 3.0, 8.0, 0.003],
            grid_noise_sigma,
            platforms: vec![
                PlatformSpec {
                    name: "buoys".into(),
                    motion: Motion::Stationary { sites: 2 },
                    variables: vec!["T".into(), "Q".into()],
                    noise_sigma: 0.05,
                },
                PlatformSpec {
                    name: "scanner".into(),
                    motion: Motion::Sweeping {
                        start_lon_deg: 10.1,
                        lon_speed_deg_per_step: 0.21,
                        swath_points: 3,
                        lat_lo_deg: 0.1,
                        lat_hi_deg: 0.9,
                    },
                    variables: vec!["U".into(), "V".into(), "T".into()],
                    noise_sigma: 0.1,
                },
            ],
            seed: 4242,
        }
    }

    fn brute_edges(nodes: &[(u64, LatLon)], radius_km: f64) -> Vec<(u64, u64, f64)> {
        let mut out = Vec::new();
        for i in 0..nodes.len() {
            for j in i + 1..nodes.len() {
                let d = haversine_km(nodes[i].1, nodes[j].1);
                if d <= radius_km {
                    out.push((nodes[i].0, nodes[j].0, d));
                }
            }
        }
        out
    }

    #[test]
    fn haversine_reference_values() {
        assert_eq!(haversine_km(p(12.5, -30.0), p(12.5, -30.0)), 0.0);
        assert!((haversine_km(p(0.0, 0.0), p(0.0, 1.0)) - 111.19492664455873).abs() < 1e-9);
        assert!((haversine_km(p(0.0, 0.0), p(1.0, 0.0)) - 111.19492664455873).abs() < 1e-9);
        // Antipodal points: half the circumference.
        assert!((haversine_km(p(0.0, 0.0), p(0.0, -180.0)) - 20015.086796020572).abs() < 1e-6);
        // One degree across the antimeridian, not 359 degrees.
        assert!((haversine_km(p(0.0, 179.5), p(0.0, -179.5)) - 111.19492664455873).abs() < 1e-9);
        let (a, b) = (p(37.2, -5.4), p(36.1, -4.2));
        assert_eq!(haversine_km(a, b).to_bits(), haversine_km(b, a).to_bits());
    }

    #[test]
    fn radius_cut_is_inclusive_of_the_boundary() {
        let dlat_50km = 50.0 / KM_PER_DEG;
        let near = [(7u64, p(0.0, 0.0)), (9, p(0.999 * dlat_50km, 0.0))];
        let far = [(7u64, p(0.0, 0.0)), (9, p(1.001 * dlat_50km, 0.0))];
        let edges = build_radius_edges(&near, 50.0);
        assert_eq!(edges.len(), 1);
        assert_eq!((edges[0].0, edges[0].1), (7, 9));
        assert!(edges[0].2 <= 50.0);
        assert!(build_radius_edges(&far, 50.0).is_empty());
    }

    #[test]
    fn benchmark_spacing_gives_von_neumann_neighborhoods() {
        // 0.345 degree spacing near the equator: axis neighbors ~38 km
        // (inside 50), diagonals ~54 km (outside).
        let cell = 0.345;
        let mut nodes = Vec::new();
        for iy in 0..5u64 {
            for ix in 0..5u64 {
                nodes.push((
                    iy * 5 + ix,
                    p(iy as f64 * cell, 10.0 + ix as f64 * cell),
                ));
            }
        }
        let edges = build_radius_edges(&nodes, 50.0);
        assert_eq!(edges.len(), 40); // 2*5*5 - 5 - 5 lattice edges
        let mut deg = vec![0usize; 25];
        for &(a, b, d) in &edges {
            assert!(d <= 50.0);
            deg[a as usize] += 1;
            deg[b as usize] += 1;
        }
        for iy in 0..5usize {
            for ix in 0..5usize {
                let want = usize::from(ix > 0)
                    + usize::from(ix < 4)
                    + usize::from(iy > 0)
                    + usize::from(iy < 4);
                assert_eq!(deg[iy * 5 + ix], want, "cell ({ix}, {iy})");
            }
        }
    }

    #[test]
    fn bucket_index_handles_seam_and_high_latitude_clusters() {
        let seam: Vec<(u64, LatLon)> = [
            (0.0, 179.7),
            (0.1, 179.9),
            (-0.05, -179.95),
            (0.2, -179.8),
            (0.15, 179.8),
        ]
        .iter()
        .enumerate()
        .map(|(i, &(lat, lon))| (i as u64, p(lat, lon)))
        .collect();
        assert_eq!(build_radius_edges(&seam, 60.0), brute_edges(&seam, 60.0));
        assert!(!build_radius_edges(&seam, 60.0).is_empty());

        let polar: Vec<(u64, LatLon)> = [
            (84.0, 10.0),
            (84.0, 10.5),
            (84.05, 11.0),
            (83.95, 12.0),
            (84.1, 14.0),
        ]
        .iter()
        .enumerate()
        .map(|(i, &(lat, lon))| (i as u64, p(lat, lon)))
        .collect();
        for radius in [20.0, 45.0, 120.0] {
            assert_eq!(
                build_radius_edges(&polar, radius),
                brute_edges(&polar, radius),
                "radius {radius}"
            );
        }
    }

    #[test]
    fn khop_walks_a_path_graph() {
        let ids = [10u64, 20, 30, 40, 50];
        let s = GraphSnapshot {
            t: 0,
            grid: ids
                .iter()
                .map(|&id| GridNode {
                    id,
                    loc: p(0.0, 0.0),
                    features: vec![0.0; 4],
                })
                .collect(),
            obs: vec![],
            edges: ids.windows(2).map(|w| (w[0], w[1])).collect(),
        };
        let (nodes, edges) = khop_subgraph(&s, 10, 3).unwrap();
        assert_eq!(nodes, vec![10, 20, 30, 40]);
        assert_eq!(edges, vec![(10, 20), (20, 30), (30, 40)]);

        let (nodes, edges) = khop_subgraph(&s, 30, 0).unwrap();
        assert_eq!(nodes, vec![30]);
        assert!(edges.is_empty());

        assert!(khop_subgraph(&s, 99, 2).is_err());
    }

    #[test]
    fn window_plans_stay_inside_their_split() {
        let ds = build_dataset(&tiny_config(0.0)).unwrap();
        // 20 steps split 6:2:2 -> train 12, val 4, test 4.
        let gcfg = GraphConfig {
            window: 3,
            ..GraphConfig::default()
        };
        let targets = all_grid_targets(&ds);
        for (split, len) in [(Split::Train, 12), (Split::Val, 4), (Split::Test, 4)] {
            let plans = window_plans(&ds, &gcfg, split, &targets);
            assert_eq!(plans.len(), targets.len() * (len - gcfg.window));
            let r = ds.meta.split.range(split, ds.steps());
            for plan in &plans {
                assert!(plan.t_end + 1 - gcfg.window >= r.start, "inputs leak left");
                assert!(plan.t_end + 1 <= r.end - 1, "label leaks right");
            }
        }
        // A window longer than the split yields nothing rather than leaking.
        let wide = GraphConfig {
            window: 4,
            ..GraphConfig::default()
        };
        assert!(window_plans(&ds, &wide, Split::Val, &targets).is_empty());
    }

    #[test]
    fn windows_match_the_id_level_subgraph_oracle() {
        let ds = build_dataset(&tiny_config(0.0)).unwrap();
        let gcfg = GraphConfig {
            khop: 2,
            window: 3,
            ..GraphConfig::default()
        };
        let cache = build_cache(&ds, &gcfg).unwrap();
        for &(target, t_end) in &[(5u64, 2usize), (0, 4), (15, 10)] {
            let plan = WindowPlan { target, t_end };
            let win = materialize_window(&ds, &cache, &gcfg, &plan, true);
            assert_eq!(win.target_id, target);
            assert_eq!(win.snapshots.len(), gcfg.window);
            assert_eq!(win.t_end(), t_end);
            for snap in &win.snapshots {
                assert!(snap.remap_is_bijection());
                assert_eq!(snap.nodes[snap.target_local].global_id, target);

                // The slot-level BFS must agree with the id-level one.
                let full = snapshot_at(&ds, &cache, snap.t);
                let (oracle_nodes, _) = khop_subgraph(&full, target, gcfg.khop).unwrap();
                let mut got: Vec<u64> = snap.nodes.iter().map(|n| n.global_id).collect();
                got.sort_unstable();
                assert_eq!(got, oracle_nodes, "step {}", snap.t);

                for &(i, j, d) in &snap.edges {
                    assert!(i < j, "edges stored once, low index first");
                    assert!(d <= gcfg.radius_km);
                    let re = haversine_km(snap.nodes[i].loc, snap.nodes[j].loc);
                    assert_eq!(re.to_bits(), d.to_bits());
                }

                // Observation features: z-scored where valid, zero elsewhere.
                for node in &snap.nodes {
                    if let NodeKind::Obs { family } = node.kind {
                        let rec =
                            &ds.obs_by_step[snap.t][node.global_id as usize - ds.grid_count()];
                        assert_eq!(rec.id, node.global_id);
                        assert_eq!(
                            ds.meta.config.family_of_platform(&rec.platform),
                            Some(family)
                        );
                        assert_eq!(node.mask, rec.mask);
                        for v in 0..ds.var_count() {
                            let want = if rec.mask[v] {
                                ds.normalize(v, rec.values[v])
                            } else {
                                0.0
                            };
                            assert_eq!(node.features[v], want);
                        }
                    }
                }
            }
            let want: Vec<f64> = (0..ds.var_count())
                .map(|v| ds.normalize(v, ds.series.get(t_end + 1, target as usize, v)))
                .collect();
            assert_eq!(win.target_next.as_deref(), Some(&want[..]));

            let unlabeled = materialize_window(&ds, &cache, &gcfg, &plan, false);
            assert_eq!(unlabeled.target_next, None);
            assert_eq!(unlabeled.snapshots, win.snapshots);
        }
    }

    #[test]
    fn materialized_snapshots_pass_validation() {
        let ds = build_dataset(&tiny_config(0.3)).unwrap();
        let cache = build_cache(&ds, &GraphConfig::default()).unwrap();
        for t in [0, 7, 19] {
            let s = snapshot_at(&ds, &cache, t);
            let violations = validate_snapshot(&s, ds.var_count());
            assert!(violations.is_empty(), "step {t}: {violations:?}");
        }
    }

    #[test]
    fn grid_noise_perturbs_inputs_only() {
        let noisy = build_dataset(&tiny_config(0.8)).unwrap();
        let clean = build_dataset(&tiny_config(0.0)).unwrap();
        let gcfg = GraphConfig {
            window: 3,
            ..GraphConfig::default()
        };
        let cache_noisy = build_cache(&noisy, &gcfg).unwrap();
        let cache_clean = build_cache(&clean, &gcfg).unwrap();
        let plan = WindowPlan { target: 5, t_end: 6 };
        let wn = materialize_window(&noisy, &cache_noisy, &gcfg, &plan, true);
        let wc = materialize_window(&clean, &cache_clean, &gcfg, &plan, true);

        // The label and everything structural stay clean.
        assert_eq!(wn.target_next, wc.target_next);
        let mut grid_diffs = 0;
        for (sn, sc) in wn.snapshots.iter().zip(&wc.snapshots) {
            assert_eq!(sn.edges, sc.edges);
            assert_eq!(sn.target_local, sc.target_local);
            for (nn, nc) in sn.nodes.iter().zip(&sc.nodes) {
                match nn.kind {
                    NodeKind::Grid => {
                        if nn.features != nc.features {
                            grid_diffs += 1;
                        }
                    }
                    NodeKind::Obs { .. } => assert_eq!(nn, nc),
                }
            }
        }
        assert!(grid_diffs > 0, "background error never materialized");

        // Same dataset, same plan: bit-identical windows.
        let again = materialize_window(&noisy, &cache_noisy, &gcfg, &plan, true);
        assert_eq!(wn, again);
    }

    #[test]
    fn obs_to_obs_edges_follow_the_flag() {
        let ds = build_dataset(&tiny_config(0.0)).unwrap();
        let count_obs_obs = |obs_obs_edges: bool| {
            let gcfg = GraphConfig {
                obs_obs_edges,
                ..GraphConfig::default()
            };
            let cache = build_cache(&ds, &gcfg).unwrap();
            let g = ds.grid_count() as u64;
            (0..ds.steps())
                .flat_map(|t| snapshot_at(&ds, &cache, t).edges)
                .filter(|&(a, b)| a >= g && b >= g)
                .count()
        };
        assert!(count_obs_obs(true) > 0, "swath points sit within the radius");
        assert_eq!(count_obs_obs(false), 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn bucket_index_matches_brute_force(
            pts in prop::collection::vec((-84.0f64..84.0, -175.0f64..175.0), 2..50),
            radius in 15.0f64..3000.0,
        ) {
            let nodes: Vec<(u64, LatLon)> = pts
                .iter()
                .enumerate()
                .map(|(i, &(lat, lon))| (i as u64, p(lat, lon)))
                .collect();
            prop_assert_eq!(build_radius_edges(&nodes, radius), brute_edges(&nodes, radius));
        }

        #[test]
        fn khop_grows_monotonically_and_stops_at_the_component(
            n in 2usize..25,
            raw_edges in prop::collection::vec((0usize..25, 0usize..25), 0..80),
        ) {
            let edges: Vec<(u64, u64)> = raw_edges
                .iter()
                .filter_map(|&(a, b)| {
                    let (a, b) = (a % n, b % n);
                    (a != b).then(|| (a.min(b) as u64, a.max(b) as u64))
                })
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let s = GraphSnapshot {
                t: 0,
                grid: (0..n as u64)
                    .map(|id| GridNode {
                        id,
                        loc: p(0.0, 0.0),
                        features: vec![0.0; 4],
                    })
                    .collect(),
                obs: vec![],
                edges,
            };
            let mut prev = BTreeSet::new();
            prev.insert(0u64);
            for k in 0..6 {
                let (nodes, induced) = khop_subgraph(&s, 0, k).unwrap();
                let set: BTreeSet<u64> = nodes.iter().copied().collect();
                prop_assert!(prev.is_subset(&set), "k-hop set shrank at k={k}");
                for &(a, b) in &induced {
                    prop_assert!(set.contains(&a) && set.contains(&b));
                }
                prev = set;
            }
            // With k >= n the set is the whole connected component: no edge
            // may cross its boundary.
            let (nodes, _) = khop_subgraph(&s, 0, n).unwrap();
            let set: BTreeSet<u64> = nodes.into_iter().collect();
            for &(a, b) in &s.edges {
                prop_assert_eq!(set.contains(&a), set.contains(&b));
            }
        }
    }
}
