//! Two-phase optimization: reconstruction pretraining, then forecasting
//! finetuning. Deterministic end to end: keyed shuffles, keyed sampling
//! noise, ordered parallel reductions, and a checkpoint format whose
//! save -> load -> save round trip is byte-identical.

use std::io::Read;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::graphbuild::{
    all_grid_targets, build_cache, materialize_window, window_plans, GraphConfig, SnapshotCache,
    WindowPlan,
};
use crate::model::{
    forward_window, ForwardCfg, ModelDims, ModelLeaves, ModelParams, Phase, Variant,
};
use crate::noise::{KeyedNoise, NoiseKey, NoiseKind, NoiseSource, ZeroNoise};
use crate::structlearn::{AdjacencyMode, OpCounters};
use crate::synthgen::{Dataset, Split};
use crate::tape::{Mat, Tape};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ASGN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

/// Everything the training loop needs; the serialized form is embedded
/// in run configs and echoed into checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub lr: f64,
    /// Ridge weight λ on the squared parameter norm.
    pub weight_decay: f64,
    pub tau: f64,
    pub hidden: usize,
    /// History length m per window.
    pub window: usize,
    /// Subgraph radius k around the target.
    pub khop: usize,
    pub radius_km: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    /// Weight on the degree-posterior KL; 0 omits the term entirely.
    pub kl_weight: f64,
    /// Consecutive epochs without validation improvement before the loop
    /// stops; 0 disables early stopping.
    pub patience: usize,
    /// Training windows drawn per epoch after the keyed shuffle;
    /// 0 uses every window.
    pub windows_per_epoch: usize,
    /// Validation windows used per epoch; 0 uses every window.
    pub val_windows: usize,
    /// Keep the edge-scoring and degree parameters at their loaded
    /// values during this run.
    pub freeze_structure: bool,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase: Phase::Finetune,
            epochs: 50,
            lr: 1e-3,
            weight_decay: 0.0,
            tau: 0.5,
            hidden: 32,
            window: 8,
            khop: 3,
            radius_km: 50.0,
            batch_size: 8,
            seed: 0,
            optimizer: Optimizer::Adam,
            clip_norm: 5.0,
            kl_weight: 0.0,
            patience: 10,
            windows_per_epoch: 0,
            val_windows: 0,
            freeze_structure: false,
            variant: Variant::Full,
        }
    }
}

impl TrainConfig {
    pub fn graph_config(&self) -> GraphConfig {
        GraphConfig {
            radius_km: self.radius_km,
            khop: self.khop,
            window: self.window,
            obs_obs_edges: true,
        }
    }

    pub fn forward_cfg(&self, mode: AdjacencyMode) -> ForwardCfg {
        ForwardCfg {
            phase: self.phase,
            variant: self.variant,
            tau: self.tau,
            mode,
            kl_weight: self.kl_weight,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be >= 0"));
        }
        if self.tau <= 0.0 {
            return Err(Error::config("tau must be > 0"));
        }
        if self.window < 1 {
            return Err(Error::config("window must be >= 1"));
        }
        if self.hidden < 1 {
            return Err(Error::config("hidden must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// The ridge term λ‖θ‖².
pub fn ridge_value(params: &ModelParams, lambda: f64) -> f64 {
    lambda * params.l2_sum_sq()
}

/// Adam first/second moments (empty under SGD), plus the step counter.
#[derive(Clone, Debug)]
pub struct OptState {
    pub kind: Optimizer,
    pub step: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl OptState {
    pub fn new(kind: Optimizer, params: &ModelParams) -> Self {
        let (m, v) = match kind {
            Optimizer::Sgd => (Vec::new(), Vec::new()),
            Optimizer::Adam => (params.zeros_like(), params.zeros_like()),
        };
        OptState {
            kind,
            step: 0,
            m,
            v,
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One optimizer step in place. `grads` must be dense and aligned with
/// the parameter order; `frozen` marks tensors to leave untouched.
fn apply_step(
    params: &mut ModelParams,
    grads: &mut [Mat],
    state: &mut OptState,
    lr: f64,
    clip_norm: f64,
    frozen: &[bool],
) {
    let active = |i: usize| !frozen[i];
    if clip_norm > 0.0 {
        let norm_sq: f64 = grads
            .iter()
            .enumerate()
            .filter(|&(i, _)| active(i))
            .map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>())
            .sum();
        let norm = norm_sq.sqrt();
        if norm > clip_norm {
            let scale = clip_norm / norm;
            for (i, g) in grads.iter_mut().enumerate() {
                if active(i) {
                    for r in 0..g.shape().0 {
                        for c in 0..g.shape().1 {
                            g.set(r, c, g.get(r, c) * scale);
                        }
                    }
                }
            }
        }
    }
    state.step += 1;
    match state.kind {
        Optimizer::Sgd => {
            for (i, t) in params.tensors_mut().iter_mut().enumerate() {
                if !active(i) {
                    continue;
                }
                for r in 0..t.shape().0 {
                    for c in 0..t.shape().1 {
                        t.set(r, c, t.get(r, c) - lr * grads[i].get(r, c));
                    }
                }
            }
        }
        Optimizer::Adam => {
            let bc1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
            let bc2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
            for (i, t) in params.tensors_mut().iter_mut().enumerate() {
                if !active(i) {
                    continue;
                }
                for r in 0..t.shape().0 {
                    for c in 0..t.shape().1 {
                        let g = grads[i].get(r, c);
                        let m = ADAM_BETA1 * state.m[i].get(r, c) + (1.0 - ADAM_BETA1) * g;
                        let v = ADAM_BETA2 * state.v[i].get(r, c) + (1.0 - ADAM_BETA2) * g * g;
                        state.m[i].set(r, c, m);
                        state.v[i].set(r, c, v);
                        let update = (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
                        t.set(r, c, t.get(r, c) - lr * update);
                    }
                }
            }
        }
    }
}

/// Forward and backward one window, returning the tape loss value and
/// dense gradients aligned with the parameter order.
pub fn window_loss_and_grads(
    params: &ModelParams,
    window: &crate::datamodel::SubgraphWindow,
    cfg: &ForwardCfg,
    noise: &dyn NoiseSource,
    epoch: u64,
    window_idx: u64,
    counters: &OpCounters,
) -> (f64, Vec<Mat>) {
    let mut tape = Tape::new();
    let leaves = ModelLeaves::register(&mut tape, params);
    let out = forward_window(
        &mut tape, &leaves, window, cfg, noise, epoch, window_idx, counters,
    );
    let grads = tape.backward(out.loss);
    let dense = leaves
        .ids
        .iter()
        .zip(params.tensors())
        .map(|(&id, t)| {
            grads
                .get(id)
                .cloned()
                .unwrap_or_else(|| Mat::zeros(t.shape().0, t.shape().1))
        })
        .collect();
    (tape.value(out.loss).get(0, 0), dense)
}

/// Forward one window without gradients, in evaluation mode (hard
/// adjacency, zero noise), returning the data term only.
pub fn window_eval_loss(
    params: &ModelParams,
    window: &crate::datamodel::SubgraphWindow,
    cfg: &ForwardCfg,
    counters: &OpCounters,
) -> f64 {
    let mut tape = Tape::new();
    let leaves = ModelLeaves::register(&mut tape, params);
    let out = forward_window(&mut tape, &leaves, window, cfg, &ZeroNoise, 0, 0, counters);
    tape.value(out.data).get(0, 0)
}

/// Tensors kept fixed by `--freeze-structure`: the edge scorer and the
/// degree heads.
fn frozen_mask(params: &ModelParams, freeze_structure: bool) -> Vec<bool> {
    const STRUCTURE: [&str; 11] = [
        "w_c1", "w_c2", "w_d", "fc_p_w", "fc_p_b", "fc_mu_w", "fc_mu_b", "fc_sigma_w",
        "fc_sigma_b", "fc_k_w", "fc_k_b",
    ];
    params
        .names()
        .iter()
        .map(|n| freeze_structure && STRUCTURE.contains(&n.as_str()))
        .collect()
}

/// Starting parameters for a run: fresh keyed initialization, or the
/// checkpoint's tensors with only the forecasting head re-initialized
/// when moving from pretraining to finetuning.
pub fn initial_params(
    dims: ModelDims,
    cfg: &TrainConfig,
    start: Option<&Checkpoint>,
) -> Result<ModelParams> {
    let noise = KeyedNoise::new(cfg.seed);
    match start {
        None => Ok(ModelParams::init(dims, &noise)),
        Some(ck) => {
            if ck.params.dims != dims {
                return Err(Error::config(format!(
                    "checkpoint dims {:?} do not match the requested model {:?}",
                    ck.params.dims, dims
                )));
            }
            let mut params = ck.params.clone();
            if cfg.phase == Phase::Finetune {
                let fresh = ModelParams::init(dims, &noise);
                *params.get_mut("fc_fine_w") = fresh.get("fc_fine_w").clone();
                *params.get_mut("fc_fine_b") = fresh.get("fc_fine_b").clone();
            }
            Ok(params)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train: f64,
    pub val: f64,
}

pub struct FitOutcome {
    pub params: ModelParams,
    pub opt: OptState,
    pub losses: Vec<EpochRow>,
    pub diverged: bool,
    /// Epoch whose validation loss was best; the returned parameters are
    /// that epoch's snapshot when validation ran.
    pub best_epoch: usize,
}

/// Keyed Fisher-Yates permutation of the plan indices for one epoch.
fn shuffled_indices(n: usize, epoch: u64, noise: &KeyedNoise) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let u = noise.uniform(NoiseKey::new(NoiseKind::Shuffle, epoch, i as u64, 0));
        let j = (u * (i + 1) as f64) as usize;
        idx.swap(i, j.min(i));
    }
    idx
}

/// Fit on explicit window plans. `targets` of the plan list keep their
/// position as the stable sampling key, so a shuffled epoch draws the
/// same noise per window no matter where the window lands.
#[allow(clippy::too_many_arguments)]
pub fn fit_windows(
    ds: &Dataset,
    cache: &SnapshotCache,
    gcfg: &GraphConfig,
    train_plans: &[WindowPlan],
    val_plans: &[WindowPlan],
    cfg: &TrainConfig,
    start: Option<&Checkpoint>,
    counters: &OpCounters,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train_plans.is_empty() {
        return Err(Error::config(format!(
            "no training windows: every split needs at least window+1 = {} steps",
            cfg.window + 1
        )));
    }
    let dims = ModelDims::new(
        ds.var_count(),
        ds.meta.config.family_table().len(),
        cfg.hidden,
    );
    let mut params = initial_params(dims, cfg, start)?;
    let mut opt = match start {
        Some(ck) if ck.opt.kind == cfg.optimizer && cfg.phase == ck.config_phase() => {
            ck.opt.clone()
        }
        _ => OptState::new(cfg.optimizer, &params),
    };
    let frozen = frozen_mask(&params, cfg.freeze_structure);
    let noise = KeyedNoise::new(cfg.seed);
    let with_label = cfg.phase == Phase::Finetune;
    let fwd = cfg.forward_cfg(AdjacencyMode::HardST);

    let val_used = if cfg.val_windows > 0 {
        &val_plans[..cfg.val_windows.min(val_plans.len())]
    } else {
        val_plans
    };

    let mut losses = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_params: Option<ModelParams> = None;
    let mut bad_epochs = 0;

    for epoch in 0..cfg.epochs {
        let snapshot = params.clone();
        let order = shuffled_indices(train_plans.len(), epoch as u64, &noise);
        let take = if cfg.windows_per_epoch > 0 {
            cfg.windows_per_epoch.min(order.len())
        } else {
            order.len()
        };
        let picked = &order[..take];

        let mut epoch_loss_sum = 0.0;
        let mut diverged = false;
        for chunk in picked.chunks(cfg.batch_size) {
            let ridge = ridge_value(&params, cfg.weight_decay);
            let results: Vec<(f64, Vec<Mat>)> = chunk
                .par_iter()
                .map(|&plan_idx| {
                    let window =
                        materialize_window(ds, cache, gcfg, &train_plans[plan_idx], with_label);
                    window_loss_and_grads(
                        &params,
                        &window,
                        &fwd,
                        &noise,
                        epoch as u64,
                        plan_idx as u64,
                        counters,
                    )
                })
                .collect();
            if results
                .iter()
                .any(|(l, g)| !l.is_finite() || g.iter().any(|m| m.iter().any(|x| !x.is_finite())))
            {
                diverged = true;
                break;
            }
            epoch_loss_sum += results.iter().map(|(l, _)| l + ridge).sum::<f64>();

            // Average the batch gradients, then add the ridge gradient.
            let inv = 1.0 / results.len() as f64;
            let mut grads = params.zeros_like();
            for (_, g) in &results {
                for (acc, gi) in grads.iter_mut().zip(g) {
                    for r in 0..acc.shape().0 {
                        for c in 0..acc.shape().1 {
                            acc.set(r, c, acc.get(r, c) + gi.get(r, c) * inv);
                        }
                    }
                }
            }
            if cfg.weight_decay > 0.0 {
                for (g, t) in grads.iter_mut().zip(params.tensors()) {
                    for r in 0..g.shape().0 {
                        for c in 0..g.shape().1 {
                            g.set(r, c, g.get(r, c) + 2.0 * cfg.weight_decay * t.get(r, c));
                        }
                    }
                }
            }
            apply_step(&mut params, &mut grads, &mut opt, cfg.lr, cfg.clip_norm, &frozen);
            if params
                .tensors()
                .iter()
                .any(|t| t.iter().any(|x| !x.is_finite()))
            {
                diverged = true;
                break;
            }
        }

        if diverged {
            log::warn!("non-finite values at epoch {epoch}; rolling back to its start");
            return Ok(FitOutcome {
                params: snapshot,
                opt,
                losses,
                diverged: true,
                best_epoch,
            });
        }

        let train_loss = epoch_loss_sum / take as f64;
        let val_loss = if val_used.is_empty() {
            f64::NAN
        } else {
            // Collect in plan order before summing; a parallel reduction
            // would make the float total depend on scheduling.
            let per_window: Vec<f64> = val_used
                .par_iter()
                .map(|plan| {
                    let window = materialize_window(ds, cache, gcfg, plan, with_label);
                    window_eval_loss(&params, &window, &fwd, counters)
                })
                .collect();
            per_window.iter().sum::<f64>() / per_window.len() as f64
        };
        losses.push(EpochRow {
            epoch,
            train: train_loss,
            val: val_loss,
        });
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");

        if !val_used.is_empty() {
            if val_loss < best_val {
                best_val = val_loss;
                best_epoch = epoch;
                best_params = Some(params.clone());
                bad_epochs = 0;
            } else {
                bad_epochs += 1;
                if cfg.patience > 0 && bad_epochs >= cfg.patience {
                    log::info!("early stop at epoch {epoch} (best {best_epoch})");
                    break;
                }
            }
        }
    }

    Ok(FitOutcome {
        params: best_params.unwrap_or(params),
        opt,
        losses,
        diverged: false,
    best_epoch,
    })
}

/// Fit on a dataset: every grid node is a target, windows stay inside
/// their split, and validation drives early stopping.
pub fn fit(
    ds: &Dataset,
    cfg: &TrainConfig,
    start: Option<&Checkpoint>,
    counters: &OpCounters,
) -> Result<FitOutcome> {
    let gcfg = cfg.graph_config();
    let cache = build_cache(ds, &gcfg)?;
    let targets = all_grid_targets(ds);
    let train_plans = window_plans(ds, &gcfg, Split::Train, &targets);
    let val_plans = window_plans(ds, &gcfg, Split::Val, &targets);
    fit_windows(
        ds,
        &cache,
        &gcfg,
        &train_plans,
        &val_plans,
        cfg,
        start,
        counters,
    )
}

#[derive(Serialize, Deserialize)]
struct TensorSpec {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    dims: ModelDims,
    tensors: Vec<TensorSpec>,
    optimizer: String,
    opt_step: u64,
    /// Number of optimizer slot groups serialized after the tensors
    /// (2 for adam: first moments then second moments).
    opt_slots: usize,
    epoch: usize,
    seed: u64,
    config: TrainConfig,
}

/// A trained (or in-progress) model with optimizer state and the config
/// that produced it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub opt: OptState,
    pub epoch: usize,
    pub config: TrainConfig,
}

impl Checkpoint {
    pub fn new(params: ModelParams, opt: OptState, epoch: usize, config: TrainConfig) -> Self {
        Checkpoint {
            params,
            opt,
            epoch,
            config,
        }
    }

    fn config_phase(&self) -> Phase {
        self.config.phase
    }
}

fn write_mat_f32(out: &mut Vec<u8>, m: &Mat) {
    for &x in m.iter() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

fn read_mat_f32(buf: &[u8], pos: &mut usize, rows: usize, cols: usize) -> Result<Mat> {
    let need = rows * cols * 4;
    if *pos + need > buf.len() {
        return Err(Error::config("checkpoint payload truncated"));
    }
    let mut m = Mat::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let b: [u8; 4] = buf[*pos..*pos + 4].try_into().unwrap();
            m.set(r, c, f32::from_le_bytes(b) as f64);
            *pos += 4;
        }
    }
    Ok(m)
}

/// Serialize: magic, version, header length, JSON header, then f32
/// little-endian payloads in header order (tensors, then optimizer
/// slot groups).
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let header = CheckpointHeader {
        dims: ck.params.dims,
        tensors: ck
            .params
            .names()
            .iter()
            .zip(ck.params.tensors())
            .map(|(n, t)| TensorSpec {
                name: n.clone(),
                rows: t.shape().0,
                cols: t.shape().1,
            })
            .collect(),
        optimizer: match ck.opt.kind {
            Optimizer::Sgd => "sgd".into(),
            Optimizer::Adam => "adam".into(),
        },
        opt_step: ck.opt.step,
        opt_slots: if ck.opt.kind == Optimizer::Adam { 2 } else { 0 },
        epoch: ck.epoch,
        seed: ck.config.seed,
        config: ck.config.clone(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for t in ck.params.tensors() {
        write_mat_f32(&mut out, t);
    }
    for slot in [&ck.opt.m, &ck.opt.v] {
        for t in slot {
            write_mat_f32(&mut out, t);
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::checkpoint(path, reason);
    if buf.len() < 12 || &buf[0..4] != CHECKPOINT_MAGIC {
        return Err(bad("missing ASGN magic"));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    if buf.len() < 12 + header_len {
        return Err(bad("header truncated"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&buf[12..12 + header_len]).map_err(Error::Json)?;

    let mut pos = 12 + header_len;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for spec in &header.tensors {
        tensors.push(read_mat_f32(&buf, &mut pos, spec.rows, spec.cols)?);
    }
    let names: Vec<String> = header.tensors.iter().map(|t| t.name.clone()).collect();
    let params = ModelParams::from_tensors(header.dims, names, tensors)
        .map_err(|e| bad(&format!("tensor layout mismatch: {e}")))?;

    let kind = match header.optimizer.as_str() {
        "sgd" => Optimizer::Sgd,
        "adam" => Optimizer::Adam,
        other => return Err(bad(&format!("unknown optimizer {other}"))),
    };
    let mut opt = OptState::new(kind, &params);
    opt.step = header.opt_step;
    if header.opt_slots == 2 {
        let mut m = Vec::with_capacity(header.tensors.len());
        for spec in &header.tensors {
            m.push(read_mat_f32(&buf, &mut pos, spec.rows, spec.cols)?);
        }
        let mut v = Vec::with_capacity(header.tensors.len());
        for spec in &header.tensors {
            v.push(read_mat_f32(&buf, &mut pos, spec.rows, spec.cols)?);
        }
        opt.m = m;
        opt.v = v;
    }
    if pos != buf.len() {
        return Err(bad("trailing bytes after payload"));
    }
    Ok(Checkpoint {
        params,
        opt,
        epoch: header.epoch,
        config: header.config,
    })
}
