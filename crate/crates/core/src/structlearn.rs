//! Differentiable structure learning. Each node scores its spatial
//! candidates (1-hop neighbors of the distance graph plus itself), a
//! Gumbel relaxation samples soft edge weights per candidate set, a
//! learned per-node budget picks the top candidates, and the directed
//! picks are symmetrized into the adjacency that feeds the encoder.
//!
//! Everything differentiable runs on the [`crate::tape`]; discrete
//! decisions (budgets, picks) are made from forward values and re-enter
//! the graph through a straight-through estimator.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::datamodel::{NodeKind, SubgraphSnapshot};
use crate::noise::{NoiseKey, NoiseKind, NoiseSource};
use crate::tape::{Mat, Tape, VarId};

/// Distances are divided by this (km) before entering the edge scorer,
/// keeping the feature O(1) inside the candidate radius.
pub const DIST_SCALE_KM: f64 = 50.0;

/// How the sampled structure enters the rest of the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdjacencyMode {
    /// Hard top-K picks forward, soft gradients backward.
    HardST,
    /// Fully soft relaxation; used for gradient checking, where a finite
    /// difference through discrete picks would be meaningless.
    Soft,
}

/// Monotone counters proving which code paths ran; each training or
/// evaluation run owns its own instance.
#[derive(Debug, Default)]
pub struct OpCounters {
    pub structure_learning: AtomicU64,
}

impl OpCounters {
    pub fn structure_learning_calls(&self) -> u64 {
        self.structure_learning.load(Ordering::Relaxed)
    }
}

/// Tape handles of the feature-projection parameters.
pub struct ProjParams {
    pub fc_x_w: VarId,
    pub fc_x_b: VarId,
    /// One (weight, bias) pair per platform family; input is the
    /// observation's values (zero where masked) concatenated with the
    /// 0/1 mask.
    pub fc_obs: Vec<(VarId, VarId)>,
}

/// Tape handles of the structure-learning parameters.
pub struct StructParams {
    pub w_c1: VarId,
    pub w_c2: VarId,
    pub w_d: VarId,
    pub fc_p_w: VarId,
    pub fc_p_b: VarId,
    pub fc_mu_w: VarId,
    pub fc_mu_b: VarId,
    pub fc_sigma_w: VarId,
    pub fc_sigma_b: VarId,
    pub fc_k_w: VarId,
    pub fc_k_b: VarId,
}

/// Project every node's raw features into the shared embedding space:
/// grid nodes through the grid head, observations through their family
/// head. Row i of the result belongs to node i of the snapshot.
pub fn project_features(tape: &mut Tape, snap: &SubgraphSnapshot, params: &ProjParams) -> VarId {
    let n = snap.nodes.len();
    let dprime = tape.value(params.fc_x_w).shape().0;
    let vars = snap.nodes.first().map(|nd| nd.features.len()).unwrap_or(0);

    let mut grid_rows = Vec::new();
    let mut grid_idx = Vec::new();
    let mut fam_rows: Vec<(Vec<f64>, Vec<usize>)> =
        vec![(Vec::new(), Vec::new()); params.fc_obs.len()];
    for (i, node) in snap.nodes.iter().enumerate() {
        match node.kind {
            NodeKind::Grid => {
                grid_rows.extend_from_slice(&node.features);
                grid_idx.push(i);
            }
            NodeKind::Obs { family } => {
                assert!(family < params.fc_obs.len(), "family {family} has no head");
                let (rows, idx) = &mut fam_rows[family];
                rows.extend_from_slice(&node.features);
                rows.extend(node.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }));
                idx.push(i);
            }
        }
    }

    let mut out = tape.leaf(Mat::zeros(n, dprime));
    if !grid_idx.is_empty() {
        let x = tape.leaf(Mat::from_vec(grid_idx.len(), vars, grid_rows));
        let h = tape.linear(x, params.fc_x_w);
        let h = tape.add_row(h, params.fc_x_b);
        out = tape.scatter_rows(out, h, &grid_idx);
    }
    for (f, (rows, idx)) in fam_rows.into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let x = tape.leaf(Mat::from_vec(idx.len(), 2 * vars, rows));
        let h = tape.linear(x, params.fc_obs[f].0);
        let h = tape.add_row(h, params.fc_obs[f].1);
        out = tape.scatter_rows(out, h, &idx);
    }
    out
}

/// Scored pairs for one snapshot: each node against its 1-hop neighbors
/// plus itself, center-major with candidates ascending, so segment ids
/// come out sorted.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSets {
    /// (center, candidate), self pair included.
    pub pairs: Vec<(usize, usize)>,
    /// Segment id per pair = the center node.
    pub seg: Vec<usize>,
    /// Great-circle distance per pair in km, 0 for the self pair.
    pub dist_km: Vec<f64>,
    /// Non-self candidate count per node: the hard cap on its budget.
    pub nonself: Vec<usize>,
    pub n: usize,
}

pub fn candidate_sets(snap: &SubgraphSnapshot) -> CandidateSets {
    let n = snap.nodes.len();
    let mut nbrs: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for &(i, j, d) in &snap.edges {
        nbrs[i].push((j, d));
        nbrs[j].push((i, d));
    }
    let mut pairs = Vec::new();
    let mut seg = Vec::new();
    let mut dist_km = Vec::new();
    let mut nonself = Vec::with_capacity(n);
    for (i, list) in nbrs.iter_mut().enumerate() {
        list.push((i, 0.0));
        list.sort_unstable_by(|a, b| a.0.cmp(&b.0));
        nonself.push(list.len() - 1);
        for &(j, d) in list.iter() {
            pairs.push((i, j));
            seg.push(i);
            dist_km.push(d);
        }
    }
    CandidateSets {
        pairs,
        seg,
        dist_km,
        nonself,
        n,
    }
}

/// One sampling site, keying the noise: training passes the true epoch,
/// window, and step indices; evaluation passes [`crate::noise::ZeroNoise`]
/// which ignores the keys entirely.
#[derive(Clone, Copy, Debug)]
pub struct SampleSite {
    pub epoch: u64,
    pub window: u64,
    pub step: u64,
}

/// Knobs of one structure-learning pass.
#[derive(Clone, Copy, Debug)]
pub struct StructureSettings {
    /// Gumbel-Softmax temperature, > 0.
    pub tau: f64,
    /// Feed real pair distances to the scorer; false zeroes that input
    /// without changing any shape.
    pub use_distance: bool,
    pub mode: AdjacencyMode,
    /// OR-symmetrize the directed picks. False keeps the directed matrix.
    pub symmetrize: bool,
}

impl Default for StructureSettings {
    fn default() -> Self {
        StructureSettings {
            tau: 0.5,
            use_distance: true,
            mode: AdjacencyMode::HardST,
            symmetrize: true,
        }
    }
}

/// Structure-learning result for one snapshot.
pub struct StructureOutput {
    /// Symmetrized n x n adjacency on the tape, zero diagonal.
    pub adjacency: VarId,
    /// Soft per-candidate weights, one column, for diagnostics and picks.
    pub edge_soft: VarId,
    /// Per-node KL of the budget posterior against N(0, 1), averaged.
    pub kl: VarId,
    /// Clamped integer budget per node.
    pub degrees: Vec<usize>,
    /// Directed picks (center, candidate), self excluded.
    pub picked: Vec<(usize, usize)>,
}

/// Top-K rows per segment by soft weight, self pairs excluded, ties going
/// to the lower candidate index. Returns the 0/1 mask over all pairs and
/// the picked pairs.
fn pick_top_k(
    soft: &Mat,
    pairs: &[(usize, usize)],
    seg: &[usize],
    degrees: &[usize],
) -> (Mat, Vec<(usize, usize)>) {
    let e = pairs.len();
    let mut hard = Mat::zeros(e, 1);
    let mut picked = Vec::new();
    let mut row = 0;
    for (i, &k) in degrees.iter().enumerate() {
        let start = row;
        while row < e && seg[row] == i {
            row += 1;
        }
        let mut order: Vec<usize> = (start..row).filter(|&r| pairs[r].1 != i).collect();
        order.sort_unstable_by(|&x, &y| {
            soft.get(y, 0)
                .total_cmp(&soft.get(x, 0))
                .then(pairs[x].1.cmp(&pairs[y].1))
        });
        for &r in order.iter().take(k) {
            hard.set(r, 0, 1.0);
            picked.push(pairs[r]);
        }
    }
    (hard, picked)
}

/// Score candidates, sample soft edge weights, budget and pick hard
/// edges, and assemble the adjacency on the tape.
///
/// In `Soft` mode the relaxed weights flow straight into the adjacency;
/// in `HardST` mode the forward value is the 0/1 pick mask with
/// gradients through the soft weights.
pub fn build_adaptive_adjacency(
    tape: &mut Tape,
    params: &StructParams,
    xhat: VarId,
    cands: &CandidateSets,
    settings: StructureSettings,
    noise: &dyn NoiseSource,
    site: SampleSite,
    counters: &OpCounters,
) -> StructureOutput {
    counters.structure_learning.fetch_add(1, Ordering::Relaxed);
    let tau = settings.tau;
    assert!(tau > 0.0, "temperature must be positive");
    let n = cands.n;
    let e = cands.pairs.len();
    assert_eq!(tape.value(xhat).shape().0, n, "one embedding row per node");

    // Pairwise scores: sigmoid of the two projected endpoints plus an
    // embedded distance, squashed by the scoring head.
    let a = tape.linear(xhat, params.w_c1);
    let b = tape.linear(xhat, params.w_c2);
    let idx_i: Vec<usize> = cands.pairs.iter().map(|&(i, _)| i).collect();
    let idx_j: Vec<usize> = cands.pairs.iter().map(|&(_, j)| j).collect();
    let ai = tape.gather_rows(a, &idx_i);
    let bj = tape.gather_rows(b, &idx_j);
    let endpoint_feat = tape.concat_cols(&[ai, bj]);
    let c_feat = tape.sigmoid(endpoint_feat);
    let dists = if settings.use_distance {
        Mat::from_vec(
            e,
            1,
            cands.dist_km.iter().map(|d| d / DIST_SCALE_KM).collect(),
        )
    } else {
        Mat::zeros(e, 1)
    };
    let d_leaf = tape.leaf(dists);
    let d_lin = tape.linear(d_leaf, params.w_d);
    let d_feat = tape.sigmoid(d_lin);
    let score_in = tape.concat_cols(&[c_feat, d_feat]);
    let s_lin = tape.linear(score_in, params.fc_p_w);
    let s = tape.add_row(s_lin, params.fc_p_b);

    // log sigmoid(s) = -softplus(-s), stable at both tails.
    let neg_s = tape.affine(s, -1.0, 0.0);
    let sp = tape.softplus(neg_s);
    let logp = tape.affine(sp, -1.0, 0.0);

    // Relaxed categorical sample over each candidate set.
    let gumbels = Mat::from_fn(e, 1, |r, _| {
        noise.gumbel(NoiseKey::new(
            NoiseKind::EdgeGumbel,
            site.epoch,
            site.window,
            (site.step << 32) | r as u64,
        ))
    });
    let g = tape.leaf(gumbels);
    let perturbed = tape.add(logp, g);
    let scaled = tape.affine(perturbed, 1.0 / tau, 0.0);
    let edge_soft = tape.segment_softmax(scaled, &cands.seg);

    // Learned connection budget per node.
    let l1 = tape.segment_sum(edge_soft, &cands.seg, n);
    let mu_lin = tape.linear(xhat, params.fc_mu_w);
    let mu = tape.add_row(mu_lin, params.fc_mu_b);
    let sg_lin = tape.linear(xhat, params.fc_sigma_w);
    let sg_aff = tape.add_row(sg_lin, params.fc_sigma_b);
    let sigma = tape.softplus(sg_aff);
    let eps = tape.leaf(Mat::from_fn(n, 1, |r, _| {
        noise.normal(NoiseKey::new(
            NoiseKind::DegreeEps,
            site.epoch,
            site.window,
            (site.step << 32) | r as u64,
        ))
    }));
    let eps_scaled = tape.mul(eps, sigma);
    let z = tape.add(mu, eps_scaled);
    let k_in = tape.concat_cols(&[z, l1]);
    let k_lin = tape.linear(k_in, params.fc_k_w);
    let k_raw = tape.add_row(k_lin, params.fc_k_b);

    // KL(N(mu, sigma) || N(0, 1)) per node, averaged over nodes.
    let mu2 = tape.square(mu);
    let sig2 = tape.square(sigma);
    let ln_sig = tape.ln(sigma);
    let sum_sq = tape.add(mu2, sig2);
    let two_ln_p1 = tape.affine(ln_sig, 2.0, 1.0);
    let kl_raw = tape.sub(sum_sq, two_ln_p1);
    let kl_vec = tape.affine(kl_raw, 0.5, 0.0);
    let kl = tape.mean_all(kl_vec);

    // Integer budgets: round half away from zero, at least 1, at most
    // every non-self candidate. The budget head is forward-only; it gets
    // no gradient because its output feeds a discrete choice.
    let degrees: Vec<usize> = (0..n)
        .map(|i| {
            let cap = cands.nonself[i];
            if cap == 0 {
                0
            } else {
                (tape.value(k_raw).get(i, 0).round().max(1.0) as usize).min(cap)
            }
        })
        .collect();

    let (hard, picked) = pick_top_k(tape.value(edge_soft), &cands.pairs, &cands.seg, &degrees);

    // Directed adjacency (self pairs dropped), then probabilistic OR:
    // a + a^T - a .* a^T, which on 0/1 inputs is exactly boolean OR.
    let nonself_rows: Vec<usize> = (0..e).filter(|&r| cands.pairs[r].0 != cands.pairs[r].1).collect();
    let nonself_pairs: Vec<(usize, usize)> = nonself_rows.iter().map(|&r| cands.pairs[r]).collect();
    let soft_nonself = tape.gather_rows(edge_soft, &nonself_rows);
    let directed = match settings.mode {
        AdjacencyMode::HardST => {
            let hard_nonself = Mat::from_vec(
                nonself_rows.len(),
                1,
                nonself_rows.iter().map(|&r| hard.get(r, 0)).collect(),
            );
            tape.straight_through(soft_nonself, hard_nonself)
        }
        AdjacencyMode::Soft => soft_nonself,
    };
    let dir_dense = tape.scatter_to_dense(directed, &nonself_pairs, n);
    let adjacency = if settings.symmetrize {
        let dir_t = tape.transpose_var(dir_dense);
        let sum_d = tape.add(dir_dense, dir_t);
        let prod_d = tape.mul(dir_dense, dir_t);
        tape.sub(sum_d, prod_d)
    } else {
        dir_dense
    };

    StructureOutput {
        adjacency,
        edge_soft,
        kl,
        degrees,
        picked,
    }
}
