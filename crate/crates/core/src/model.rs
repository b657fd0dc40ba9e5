//! The assembled forecaster: a named parameter registry, tape
//! registration, and the per-window forward passes for both training
//! phases. Reconstruction pretraining rebuilds every present node's
//! features at every step from its running hidden state; forecasting
//! finetuning advances only the target node and predicts its next-step
//! feature vector.

use std::collections::BTreeMap;

use crate::datamodel::{NodeKind, SubgraphWindow};
use crate::encoder::{gcn_forward, gru_cell, normalize_adjacency, skip_readout, GcnParams, GruParams};
use crate::noise::{KeyedNoise, NoiseKey, NoiseKind, NoiseSource};
use crate::structlearn::{
    build_adaptive_adjacency, candidate_sets, project_features, AdjacencyMode, OpCounters,
    ProjParams, SampleSite, StructParams, StructureSettings,
};
use crate::tape::{Mat, Tape, VarId};

/// Widths of every tensor in the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelDims {
    /// Variables per node (feature width C).
    pub var_count: usize,
    /// Platform families, each with its own projection and
    /// reconstruction head.
    pub families: usize,
    /// Embedding and GCN width d'.
    pub hidden: usize,
    /// Endpoint-score width inside the edge scorer.
    pub score_dim: usize,
    /// Embedded-distance width inside the edge scorer.
    pub dist_dim: usize,
    /// GCN depth L.
    pub gcn_layers: usize,
}

impl ModelDims {
    pub fn new(var_count: usize, families: usize, hidden: usize) -> Self {
        ModelDims {
            var_count,
            families,
            hidden,
            score_dim: 8,
            dist_dim: 4,
            gcn_layers: 3,
        }
    }
}

fn tensor_specs(d: &ModelDims) -> Vec<(String, usize, usize)> {
    let c = d.var_count;
    let h = d.hidden;
    let mut out = vec![
        ("fc_x_w".into(), h, c),
        ("fc_x_b".into(), 1, h),
    ];
    for f in 0..d.families {
        out.push((format!("fc_obs{f}_w"), h, 2 * c));
        out.push((format!("fc_obs{f}_b"), 1, h));
    }
    out.extend([
        ("w_c1".into(), d.score_dim, h),
        ("w_c2".into(), d.score_dim, h),
        ("w_d".into(), d.dist_dim, 1),
        ("fc_p_w".into(), 1, 2 * d.score_dim + d.dist_dim),
        ("fc_p_b".into(), 1, 1),
        ("fc_mu_w".into(), 1, h),
        ("fc_mu_b".into(), 1, 1),
        ("fc_sigma_w".into(), 1, h),
        ("fc_sigma_b".into(), 1, 1),
        ("fc_k_w".into(), 1, 2),
        ("fc_k_b".into(), 1, 1),
    ]);
    for l in 0..d.gcn_layers {
        out.push((format!("gcn{l}_w"), h, h));
    }
    out.push(("w_r".into(), h, (d.gcn_layers + 1) * h));
    for gate in ["ir", "iz", "in", "hr", "hz", "hn"] {
        out.push((format!("gru_w_{gate}"), h, h));
    }
    for gate in ["ir", "iz", "in", "hr", "hz", "hn"] {
        out.push((format!("gru_b_{gate}"), 1, h));
    }
    out.extend([
        ("fc_fine_w".into(), c, h),
        ("fc_fine_b".into(), 1, c),
        ("fc_pre_grid_w".into(), c, h),
        ("fc_pre_grid_b".into(), 1, c),
    ]);
    for f in 0..d.families {
        out.push((format!("fc_pre_obs{f}_w"), c, h));
        out.push((format!("fc_pre_obs{f}_b"), 1, c));
    }
    out
}

/// Every learnable tensor, named and ordered. The order is the
/// serialization order and the optimizer-slot order.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub dims: ModelDims,
    names: Vec<String>,
    tensors: Vec<Mat>,
    index: BTreeMap<String, usize>,
}

/// Initial weight on the edge-mass input of the degree head. The budget
/// never receives gradients (the rounded edge count sits outside every
/// differentiable path), so this gain alone sets where per-node degrees
/// start: the edge mass is 1 after normalization, and a zero-centered
/// draw would round every budget down to the single-edge floor.
pub const BUDGET_INIT_GAIN: f64 = 4.0;

impl ModelParams {
    /// Xavier-uniform weights (bound sqrt(6 / (fan_in + fan_out))), zero
    /// biases, every draw keyed so initialization replays exactly.
    pub fn init(dims: ModelDims, noise: &KeyedNoise) -> Self {
        let specs = tensor_specs(&dims);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for (t_idx, (name, rows, cols)) in specs.iter().enumerate() {
            let mut mat = if name.ends_with("_b") {
                Mat::zeros(*rows, *cols)
            } else {
                let bound = (6.0 / (rows + cols) as f64).sqrt();
                Mat::from_fn(*rows, *cols, |r, c| {
                    let u = noise.uniform(NoiseKey::new(
                        NoiseKind::ParamInit,
                        t_idx as u64,
                        r as u64,
                        c as u64,
                    ));
                    (2.0 * u - 1.0) * bound
                })
            };
            if name == "fc_k_w" {
                mat.set(0, 1, BUDGET_INIT_GAIN);
            }
            names.push(name.clone());
            tensors.push(mat);
        }
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        ModelParams {
            dims,
            names,
            tensors,
            index,
        }
    }

    /// Rebuild a registry from serialized tensors, checking that names,
    /// order, and shapes all match what `dims` prescribes.
    pub fn from_tensors(
        dims: ModelDims,
        names: Vec<String>,
        tensors: Vec<Mat>,
    ) -> Result<Self, String> {
        let specs = tensor_specs(&dims);
        if names.len() != specs.len() || tensors.len() != specs.len() {
            return Err(format!(
                "expected {} tensors, got {} names and {} payloads",
                specs.len(),
                names.len(),
                tensors.len()
            ));
        }
        for (i, (name, rows, cols)) in specs.iter().enumerate() {
            if &names[i] != name {
                return Err(format!("tensor {i} is named {}, expected {name}", names[i]));
            }
            if tensors[i].shape() != (*rows, *cols) {
                return Err(format!(
                    "tensor {name} has shape {:?}, expected ({rows}, {cols})",
                    tensors[i].shape()
                ));
            }
        }
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(ModelParams {
            dims,
            names,
            tensors,
            index,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
    pub fn tensors(&self) -> &[Mat] {
        &self.tensors
    }
    pub fn tensors_mut(&mut self) -> &mut [Mat] {
        &mut self.tensors
    }
    pub fn len(&self) -> usize {
        self.tensors.len()
    }
    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
    pub fn index_of(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown tensor {name}"))
    }
    pub fn get(&self, name: &str) -> &Mat {
        &self.tensors[self.index_of(name)]
    }
    pub fn get_mut(&mut self, name: &str) -> &mut Mat {
        let i = self.index_of(name);
        &mut self.tensors[i]
    }

    /// Sum of squares over every tensor, the ridge term's raw value.
    pub fn l2_sum_sq(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.iter().map(|x| x * x).sum::<f64>())
            .sum()
    }

    /// Zero matrices with this model's shapes, for optimizer slots.
    pub fn zeros_like(&self) -> Vec<Mat> {
        self.tensors
            .iter()
            .map(|t| Mat::zeros(t.shape().0, t.shape().1))
            .collect()
    }
}

/// Tape handles for one forward pass, grouped into the views each
/// submodule expects. `ids` is aligned with the parameter order.
pub struct ModelLeaves {
    pub ids: Vec<VarId>,
    pub proj: ProjParams,
    pub struc: StructParams,
    pub gcn: GcnParams,
    pub gru: GruParams,
    pub fc_fine: (VarId, VarId),
    pub fc_pre_grid: (VarId, VarId),
    pub fc_pre_obs: Vec<(VarId, VarId)>,
}

impl ModelLeaves {
    pub fn register(tape: &mut Tape, params: &ModelParams) -> ModelLeaves {
        let ids: Vec<VarId> = params
            .tensors()
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect();
        let id = |name: &str| ids[params.index_of(name)];
        let d = &params.dims;
        ModelLeaves {
            proj: ProjParams {
                fc_x_w: id("fc_x_w"),
                fc_x_b: id("fc_x_b"),
                fc_obs: (0..d.families)
                    .map(|f| (id(&format!("fc_obs{f}_w")), id(&format!("fc_obs{f}_b"))))
                    .collect(),
            },
            struc: StructParams {
                w_c1: id("w_c1"),
                w_c2: id("w_c2"),
                w_d: id("w_d"),
                fc_p_w: id("fc_p_w"),
                fc_p_b: id("fc_p_b"),
                fc_mu_w: id("fc_mu_w"),
                fc_mu_b: id("fc_mu_b"),
                fc_sigma_w: id("fc_sigma_w"),
                fc_sigma_b: id("fc_sigma_b"),
                fc_k_w: id("fc_k_w"),
                fc_k_b: id("fc_k_b"),
            },
            gcn: GcnParams {
                layers: (0..d.gcn_layers)
                    .map(|l| id(&format!("gcn{l}_w")))
                    .collect(),
                w_r: id("w_r"),
            },
            gru: GruParams {
                w_ir: id("gru_w_ir"),
                w_iz: id("gru_w_iz"),
                w_in: id("gru_w_in"),
                w_hr: id("gru_w_hr"),
                w_hz: id("gru_w_hz"),
                w_hn: id("gru_w_hn"),
                b_ir: id("gru_b_ir"),
                b_iz: id("gru_b_iz"),
                b_in: id("gru_b_in"),
                b_hr: id("gru_b_hr"),
                b_hz: id("gru_b_hz"),
                b_hn: id("gru_b_hn"),
            },
            fc_fine: (id("fc_fine_w"), id("fc_fine_b")),
            fc_pre_grid: (id("fc_pre_grid_w"), id("fc_pre_grid_b")),
            fc_pre_obs: (0..d.families)
                .map(|f| {
                    (
                        id(&format!("fc_pre_obs{f}_w")),
                        id(&format!("fc_pre_obs{f}_b")),
                    )
                })
                .collect(),
            ids,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl std::str::FromStr for Phase {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "finetune" => Ok(Phase::Finetune),
            other => Err(crate::Error::config(format!(
                "unknown phase {other:?} (expected pretrain or finetune)"
            ))),
        }
    }
}

/// Model variants for the ablation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Learned structure with the distance feature.
    Full,
    /// Learned structure, distance input zeroed.
    NoDist,
    /// The plain radius graph; structure learning never runs.
    FixedGraph,
}

impl std::str::FromStr for Variant {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Variant::Full),
            "no-dist" => Ok(Variant::NoDist),
            "fixed-graph" => Ok(Variant::FixedGraph),
            other => Err(crate::Error::config(format!(
                "unknown variant {other:?} (expected full, no-dist, or fixed-graph)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardCfg {
    pub phase: Phase,
    pub variant: Variant,
    pub tau: f64,
    pub mode: AdjacencyMode,
    pub kl_weight: f64,
}

/// Loss pieces of one window, still on the tape.
pub struct WindowOutput {
    /// data + kl_weight * kl; the training objective without the ridge.
    pub loss: VarId,
    pub data: VarId,
    pub kl: Option<VarId>,
}

/// Encode one snapshot: project, build (or fix) the adjacency,
/// normalize, convolve, read out. Returns per-node representations and
/// the structure KL when structure learning ran.
#[allow(clippy::too_many_arguments)]
fn encode_snapshot(
    tape: &mut Tape,
    leaves: &ModelLeaves,
    snap: &crate::datamodel::SubgraphSnapshot,
    cfg: &ForwardCfg,
    noise: &dyn NoiseSource,
    site: SampleSite,
    counters: &OpCounters,
) -> (VarId, Option<VarId>) {
    let xhat = project_features(tape, snap, &leaves.proj);
    let n = snap.nodes.len();
    let (adj, kl) = match cfg.variant {
        Variant::FixedGraph => {
            let mut m = Mat::zeros(n, n);
            for &(i, j, _) in &snap.edges {
                m.set(i, j, 1.0);
                m.set(j, i, 1.0);
            }
            (tape.leaf(m), None)
        }
        Variant::Full | Variant::NoDist => {
            let cands = candidate_sets(snap);
            let out = build_adaptive_adjacency(
                tape,
                &leaves.struc,
                xhat,
                &cands,
                StructureSettings {
                    tau: cfg.tau,
                    use_distance: cfg.variant == Variant::Full,
                    mode: cfg.mode,
                    symmetrize: true,
                },
                noise,
                site,
                counters,
            );
            (out.adjacency, Some(out.kl))
        }
    };
    let a_norm = normalize_adjacency(tape, adj);
    let outs = gcn_forward(tape, a_norm, xhat, &leaves.gcn.layers);
    let h = skip_readout(tape, &outs, leaves.gcn.w_r);
    (h, kl)
}

fn head(tape: &mut Tape, x: VarId, w: VarId, b: VarId) -> VarId {
    let lin = tape.linear(x, w);
    tape.add_row(lin, b)
}

/// Mean KL across the steps that produced one, if any.
fn mean_kl(tape: &mut Tape, kls: &[VarId]) -> Option<VarId> {
    match kls {
        [] => None,
        [one] => Some(*one),
        many => {
            let mut acc = many[0];
            for &k in &many[1..] {
                acc = tape.add(acc, k);
            }
            Some(tape.affine(acc, 1.0 / many.len() as f64, 0.0))
        }
    }
}

/// The forecasting pass without a loss: encode each snapshot, advance
/// the target node's recurrent state, and return the normalized
/// next-step prediction (1 x C) plus any KL terms the structure sampler
/// produced. Ignores `cfg.phase`.
#[allow(clippy::too_many_arguments)]
pub fn predict_window(
    tape: &mut Tape,
    leaves: &ModelLeaves,
    window: &SubgraphWindow,
    cfg: &ForwardCfg,
    noise: &dyn NoiseSource,
    epoch: u64,
    window_idx: u64,
    counters: &OpCounters,
) -> (VarId, Vec<VarId>) {
    assert!(!window.snapshots.is_empty(), "window must contain steps");
    let hidden = window_hidden(leaves, tape);
    let mut state = tape.leaf(Mat::zeros(1, hidden));
    let mut kls = Vec::new();
    for (t, snap) in window.snapshots.iter().enumerate() {
        let site = SampleSite {
            epoch,
            window: window_idx,
            step: t as u64,
        };
        let (h, kl) = encode_snapshot(tape, leaves, snap, cfg, noise, site, counters);
        if let Some(k) = kl {
            kls.push(k);
        }
        let x = tape.gather_rows(h, &[snap.target_local]);
        state = gru_cell(tape, &leaves.gru, x, state);
    }
    let pred = head(tape, state, leaves.fc_fine.0, leaves.fc_fine.1);
    (pred, kls)
}

/// Forward one window and return its loss on the tape.
///
/// Pretraining: every present node's features are reconstructed at every
/// step from its post-update hidden state; the data term is the mean
/// over (node, step) pairs of the per-node mean absolute residual over
/// contributing channels (all for grid, unmasked for observations).
/// Grid nodes thread their hidden state across steps; observation nodes
/// are per-step records with no cross-step identity, so each starts from
/// a zero hidden state.
///
/// Finetuning: the target's readout sequence runs through the GRU and
/// the final state predicts the next-step feature vector under mean
/// absolute error.
#[allow(clippy::too_many_arguments)]
pub fn forward_window(
    tape: &mut Tape,
    leaves: &ModelLeaves,
    window: &SubgraphWindow,
    cfg: &ForwardCfg,
    noise: &dyn NoiseSource,
    epoch: u64,
    window_idx: u64,
    counters: &OpCounters,
) -> WindowOutput {
    assert!(!window.snapshots.is_empty(), "window must contain steps");
    let hidden = window_hidden(leaves, tape);

    match cfg.phase {
        Phase::Finetune => {
            let label = window
                .target_next
                .as_ref()
                .expect("finetune window must carry a label");
            let (pred, kls) =
                predict_window(tape, leaves, window, cfg, noise, epoch, window_idx, counters);
            let label_leaf = tape.leaf(Mat::from_vec(1, label.len(), label.clone()));
            let resid = tape.sub(pred, label_leaf);
            let abs = tape.abs(resid);
            let data = tape.mean_all(abs);
            assemble(tape, data, &kls, cfg)
        }
        Phase::Pretrain => {
            // Union of grid nodes across the window, for threading state.
            let mut union = std::collections::BTreeSet::new();
            for snap in &window.snapshots {
                for node in &snap.nodes {
                    if node.kind == NodeKind::Grid {
                        union.insert(node.global_id);
                    }
                }
            }
            let union: Vec<u64> = union.into_iter().collect();
            let row_of: BTreeMap<u64, usize> =
                union.iter().enumerate().map(|(r, &g)| (g, r)).collect();
            let mut state = tape.leaf(Mat::zeros(union.len(), hidden));

            let mut kls = Vec::new();
            // Per-(node, step) mean absolute residuals, one column each.
            let mut node_means: Vec<VarId> = Vec::new();
            for (t, snap) in window.snapshots.iter().enumerate() {
                let site = SampleSite {
                    epoch,
                    window: window_idx,
                    step: t as u64,
                };
                let (h, kl) = encode_snapshot(tape, leaves, snap, cfg, noise, site, counters);
                if let Some(k) = kl {
                    kls.push(k);
                }

                // Grid rows come first in every snapshot (nodes are
                // ordered by slot and grid slots precede observations).
                let n_grid = snap
                    .nodes
                    .iter()
                    .take_while(|n| n.kind == NodeKind::Grid)
                    .count();
                assert!(
                    snap.nodes[n_grid..].iter().all(|n| n.kind != NodeKind::Grid),
                    "grid nodes must precede observations"
                );
                let n_obs = snap.nodes.len() - n_grid;
                let union_rows: Vec<usize> =
                    snap.nodes[..n_grid].iter().map(|n| row_of[&n.global_id]).collect();

                let h_prev_grid = tape.gather_rows(state, &union_rows);
                let h_prev = if n_obs == 0 {
                    h_prev_grid
                } else {
                    let zeros = tape.leaf(Mat::zeros(n_obs, hidden));
                    tape.concat_rows(&[h_prev_grid, zeros])
                };
                let h_new = gru_cell(tape, &leaves.gru, h, h_prev);
                let grid_new = tape.gather_rows(h_new, &(0..n_grid).collect::<Vec<_>>());
                state = tape.scatter_rows(state, grid_new, &union_rows);

                // Grid reconstruction: all channels contribute.
                let c = snap.nodes[0].features.len();
                let grid_feats = Mat::from_fn(n_grid, c, |r, ch| snap.nodes[r].features[ch]);
                let pred_g = head(tape, grid_new, leaves.fc_pre_grid.0, leaves.fc_pre_grid.1);
                let gf = tape.leaf(grid_feats);
                let resid = tape.sub(pred_g, gf);
                let abs = tape.abs(resid);
                let rs = tape.row_sum(abs);
                node_means.push(tape.affine(rs, 1.0 / c as f64, 0.0));

                // Observation reconstruction per family, masked channels
                // excluded from both the residual and the count.
                for f in 0..leaves.fc_pre_obs.len() {
                    let rows: Vec<usize> = (n_grid..snap.nodes.len())
                        .filter(|&i| snap.nodes[i].kind == NodeKind::Obs { family: f })
                        .collect();
                    if rows.is_empty() {
                        continue;
                    }
                    let h_f = tape.gather_rows(h_new, &rows);
                    let pred_o = head(tape, h_f, leaves.fc_pre_obs[f].0, leaves.fc_pre_obs[f].1);
                    let feats = Mat::from_fn(rows.len(), c, |r, ch| snap.nodes[rows[r]].features[ch]);
                    let mask = Mat::from_fn(rows.len(), c, |r, ch| {
                        if snap.nodes[rows[r]].mask[ch] {
                            1.0
                        } else {
                            0.0
                        }
                    });
                    let inv_count = Mat::from_fn(rows.len(), 1, |r, _| {
                        let cnt = snap.nodes[rows[r]].mask.iter().filter(|&&m| m).count();
                        assert!(cnt > 0, "observation with no measured channel");
                        1.0 / cnt as f64
                    });
                    let of = tape.leaf(feats);
                    let mk = tape.leaf(mask);
                    let ic = tape.leaf(inv_count);
                    let resid = tape.sub(pred_o, of);
                    let abs = tape.abs(resid);
                    let masked = tape.mul(abs, mk);
                    let rs = tape.row_sum(masked);
                    node_means.push(tape.mul_colvec(rs, ic));
                }
            }
            let total_rows: usize = node_means
                .iter()
                .map(|&v| tape.value(v).shape().0)
                .sum();
            let all = tape.concat_rows(&node_means);
            let s = tape.sum_all(all);
            let data = tape.affine(s, 1.0 / total_rows as f64, 0.0);
            assemble(tape, data, &kls, cfg)
        }
    }
}

fn window_hidden(leaves: &ModelLeaves, tape: &Tape) -> usize {
    tape.value(leaves.gru.w_hr).shape().0
}

fn assemble(tape: &mut Tape, data: VarId, kls: &[VarId], cfg: &ForwardCfg) -> WindowOutput {
    let kl = mean_kl(tape, kls);
    let loss = match kl {
        Some(k) if cfg.kl_weight != 0.0 => {
            let weighted = tape.affine(k, cfg.kl_weight, 0.0);
            tape.add(data, weighted)
        }
        _ => data,
    };
    WindowOutput { loss, data, kl }
}
