//! Test-split evaluation: per-variable error metrics, variability-index
//! stratification of nodes, the three-variant ablation matrix, and
//! temperature / width sensitivity sweeps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::graphbuild::{
    all_grid_targets, build_cache, materialize_window, window_plans, GraphConfig, SnapshotCache,
};
use crate::model::{predict_window, ForwardCfg, ModelLeaves, ModelParams, Phase, Variant};
use crate::noise::ZeroNoise;
use crate::structlearn::{AdjacencyMode, OpCounters};
use crate::synthgen::{Dataset, Split};
use crate::tape::Tape;
use crate::training::{fit, TrainConfig};
use crate::{Error, Result};

/// Per-variable error summary on de-normalized (physical-unit) values.
/// `r2` is `None` when the truth has zero variance, where the score is
/// undefined.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarMetrics {
    pub rmse: f64,
    pub mae: f64,
    pub r2: Option<f64>,
}

/// Population-convention RMSE / MAE / R-squared per variable. Rows are
/// samples, columns variables; predictions and truth must be the same
/// shape and already in physical units.
pub fn metrics_per_variable(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Vec<VarMetrics> {
    assert_eq!(pred.len(), truth.len(), "sample counts differ");
    assert!(!pred.is_empty(), "need at least one sample");
    let vars = truth[0].len();
    for (p, t) in pred.iter().zip(truth) {
        assert!(
            p.len() == vars && t.len() == vars,
            "ragged metric input rows"
        );
    }
    let n = pred.len() as f64;
    (0..vars)
        .map(|v| {
            let mean_truth = truth.iter().map(|t| t[v]).sum::<f64>() / n;
            let mut ss_res = 0.0;
            let mut abs = 0.0;
            let mut ss_tot = 0.0;
            for (p, t) in pred.iter().zip(truth) {
                let r = p[v] - t[v];
                ss_res += r * r;
                abs += r.abs();
                ss_tot += (t[v] - mean_truth) * (t[v] - mean_truth);
            }
            VarMetrics {
                rmse: (ss_res / n).sqrt(),
                mae: abs / n,
                r2: if ss_tot == 0.0 {
                    None
                } else {
                    Some(1.0 - ss_res / ss_tot)
                },
            }
        })
        .collect()
}

/// Population standard deviation of one node's value series. The series
/// length is part of the contract: callers state how many steps the
/// index is defined over (24 by default) and shorter input is a bug.
pub fn variability_index(series: &[f64], expected_len: usize) -> f64 {
    assert_eq!(
        series.len(),
        expected_len,
        "variability index needs exactly {expected_len} steps"
    );
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    (series.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupLabel {
    Low,
    High,
    None,
}

impl std::fmt::Display for GroupLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GroupLabel::Low => "low",
            GroupLabel::High => "high",
            GroupLabel::None => "none",
        })
    }
}

/// Quartile labels by variability: the `floor(n/4)` lowest-VI nodes are
/// `Low`, the same count from the top are `High`, the middle `None`.
/// Nearest-rank selection with ties broken by node index keeps the
/// labeling deterministic on any platform.
pub fn stratify_nodes(vi: &[f64]) -> Vec<GroupLabel> {
    let n = vi.len();
    assert!(n >= 4, "stratification needs at least 4 nodes, got {n}");
    let quartile = n / 4;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| vi[a].total_cmp(&vi[b]).then(a.cmp(&b)));
    let mut labels = vec![GroupLabel::None; n];
    for &i in &order[..quartile] {
        labels[i] = GroupLabel::Low;
    }
    for &i in &order[n - quartile..] {
        labels[i] = GroupLabel::High;
    }
    labels
}

/// One evaluated forecast: the target grid cell, the last input step,
/// and physical-unit prediction and clean truth for every variable.
#[derive(Clone, Debug)]
pub struct ForecastSample {
    pub target: u64,
    pub t_end: usize,
    pub pred: Vec<f64>,
    pub truth: Vec<f64>,
}

fn denorm_all(ds: &Dataset, z: &[f64]) -> Vec<f64> {
    z.iter()
        .enumerate()
        .map(|(v, &x)| ds.denormalize(v, x))
        .collect()
}

/// Forecast every window of `split` with the model, in evaluation mode:
/// hard adjacency, zero sampling noise.
pub fn forecast_model(
    ds: &Dataset,
    cache: &SnapshotCache,
    gcfg: &GraphConfig,
    params: &ModelParams,
    tau: f64,
    variant: Variant,
    split: Split,
    counters: &OpCounters,
) -> Vec<ForecastSample> {
    let plans = window_plans(ds, gcfg, split, &all_grid_targets(ds));
    let fwd = ForwardCfg {
        phase: Phase::Finetune,
        variant,
        tau,
        mode: AdjacencyMode::HardST,
        kl_weight: 0.0,
    };
    plans
        .par_iter()
        .map(|plan| {
            let window = materialize_window(ds, cache, gcfg, plan, true);
            let mut tape = Tape::new();
            let leaves = ModelLeaves::register(&mut tape, params);
            let (pred, _) =
                predict_window(&mut tape, &leaves, &window, &fwd, &ZeroNoise, 0, 0, counters);
            let pred_z: Vec<f64> = tape.value(pred).iter().copied().collect();
            let label = window.target_next.expect("evaluation windows carry labels");
            ForecastSample {
                target: plan.target,
                t_end: plan.t_end,
                pred: denorm_all(ds, &pred_z),
                truth: denorm_all(ds, &label),
            }
        })
        .collect()
}

/// The no-model baseline: predict that step `t_end + 1` repeats the
/// target's input features at `t_end`, exactly as the model saw them
/// (grid read noise included).
pub fn forecast_persistence(
    ds: &Dataset,
    cache: &SnapshotCache,
    gcfg: &GraphConfig,
    split: Split,
) -> Vec<ForecastSample> {
    let plans = window_plans(ds, gcfg, split, &all_grid_targets(ds));
    plans
        .par_iter()
        .map(|plan| {
            let window = materialize_window(ds, cache, gcfg, plan, true);
            let last = window.snapshots.last().expect("windows are non-empty");
            let pred_z = &last.nodes[last.target_local].features;
            let label = window.target_next.expect("evaluation windows carry labels");
            ForecastSample {
                target: plan.target,
                t_end: plan.t_end,
                pred: denorm_all(ds, pred_z),
                truth: denorm_all(ds, &label),
            }
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Steps the variability index is computed over, taken from the end
    /// of the evaluated split.
    pub vi_steps: usize,
    /// Variable whose per-node variability drives the stratification.
    pub vi_var: String,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            vi_steps: 24,
            vi_var: "T".into(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NodeRow {
    pub node: u64,
    pub vi: f64,
    pub label: GroupLabel,
    pub samples: usize,
    /// Mean absolute residual per variable over this node's windows.
    pub mae: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupRow {
    pub label: GroupLabel,
    pub nodes: usize,
    pub samples: usize,
    /// Mean absolute residual per variable over the group's windows.
    pub mae: Vec<f64>,
}

/// Everything `evaluate` reports: pooled per-variable metrics plus the
/// per-node and per-variability-group breakdowns.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variables: Vec<String>,
    pub per_variable: Vec<VarMetrics>,
    pub samples: usize,
    pub vi_var: String,
    pub vi_steps: usize,
    pub nodes: Vec<NodeRow>,
    pub groups: Vec<GroupRow>,
}

impl MetricsReport {
    pub fn r2(&self, var: &str) -> Option<f64> {
        let v = self.variables.iter().position(|n| n == var)?;
        self.per_variable[v].r2
    }

    pub fn group(&self, label: GroupLabel) -> &GroupRow {
        self.groups
            .iter()
            .find(|g| g.label == label)
            .expect("reports carry all three groups")
    }

    /// Average R-squared over the variables where it is defined.
    pub fn mean_r2(&self) -> f64 {
        let defined: Vec<f64> = self.per_variable.iter().filter_map(|m| m.r2).collect();
        if defined.is_empty() {
            f64::NAN
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        }
    }
}

/// Aggregate forecast samples into the full report: pooled metrics,
/// per-node residuals, VI stratification on the clean truth series, and
/// the group decomposition of MAE.
pub fn build_report(
    ds: &Dataset,
    samples: &[ForecastSample],
    split: Split,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::config(
            "no forecast windows: the split is shorter than window + 1 steps",
        ));
    }
    let vars = ds.var_count();
    let var_names = ds.meta.config.var_names.clone();
    let vi_var = var_names
        .iter()
        .position(|n| n == &opts.vi_var)
        .ok_or_else(|| {
            Error::config(format!(
                "vi_var {:?} is not one of the dataset variables {:?}",
                opts.vi_var, var_names
            ))
        })?;
    let range = ds.meta.split.range(split, ds.steps());
    if range.len() < opts.vi_steps {
        return Err(Error::config(format!(
            "vi_steps = {} but the evaluated split has only {} steps",
            opts.vi_steps,
            range.len()
        )));
    }
    let vi_range = range.end - opts.vi_steps..range.end;

    let pred: Vec<Vec<f64>> = samples.iter().map(|s| s.pred.clone()).collect();
    let truth: Vec<Vec<f64>> = samples.iter().map(|s| s.truth.clone()).collect();
    let per_variable = metrics_per_variable(&pred, &truth);

    // The clean physical series of the stratification variable defines
    // each grid node's variability index.
    let grid = ds.grid_count();
    let vi: Vec<f64> = (0..grid)
        .map(|cell| {
            let series: Vec<f64> = vi_range
                .clone()
                .map(|t| ds.series.get(t, cell, vi_var))
                .collect();
            variability_index(&series, opts.vi_steps)
        })
        .collect();
    let labels = stratify_nodes(&vi);

    let mut abs_sum = vec![vec![0.0; vars]; grid];
    let mut count = vec![0usize; grid];
    for s in samples {
        let cell = s.target as usize;
        assert!(cell < grid, "forecast target {cell} is not a grid cell");
        for v in 0..vars {
            abs_sum[cell][v] += (s.pred[v] - s.truth[v]).abs();
        }
        count[cell] += 1;
    }

    let nodes: Vec<NodeRow> = (0..grid)
        .map(|cell| NodeRow {
            node: cell as u64,
            vi: vi[cell],
            label: labels[cell],
            samples: count[cell],
            mae: abs_sum[cell]
                .iter()
                .map(|&s| {
                    if count[cell] == 0 {
                        f64::NAN
                    } else {
                        s / count[cell] as f64
                    }
                })
                .collect(),
        })
        .collect();

    let groups = [GroupLabel::Low, GroupLabel::High, GroupLabel::None]
        .into_iter()
        .map(|label| {
            let members: Vec<usize> = (0..grid).filter(|&c| labels[c] == label).collect();
            let n_samples: usize = members.iter().map(|&c| count[c]).sum();
            let mae = (0..vars)
                .map(|v| {
                    let total: f64 = members.iter().map(|&c| abs_sum[c][v]).sum();
                    if n_samples == 0 {
                        f64::NAN
                    } else {
                        total / n_samples as f64
                    }
                })
                .collect();
            GroupRow {
                label,
                nodes: members.len(),
                samples: n_samples,
                mae,
            }
        })
        .collect();

    Ok(MetricsReport {
        variables: var_names,
        per_variable,
        samples: samples.len(),
        vi_var: opts.vi_var.clone(),
        vi_steps: opts.vi_steps,
        nodes,
        groups,
    })
}

/// Train (finetune from fresh parameters) and evaluate one variant with
/// one seed on the test split.
fn train_and_evaluate(
    ds: &Dataset,
    base: &TrainConfig,
    variant: Variant,
    seed: u64,
    hidden: usize,
    tau: f64,
    opts: &EvalOptions,
    counters: &OpCounters,
) -> Result<MetricsReport> {
    let cfg = TrainConfig {
        phase: Phase::Finetune,
        variant,
        seed,
        hidden,
        tau,
        ..base.clone()
    };
    let fitted = fit(ds, &cfg, None, counters)?;
    if fitted.diverged {
        return Err(Error::Diverged {
            phase: "finetune".into(),
            epoch: fitted.losses.len(),
        });
    }
    let gcfg = cfg.graph_config();
    let cache = build_cache(ds, &gcfg)?;
    let samples = forecast_model(
        ds,
        &cache,
        &gcfg,
        &fitted.params,
        cfg.tau,
        variant,
        Split::Test,
        counters,
    );
    build_report(ds, &samples, Split::Test, opts)
}

pub const ABLATION_VARIANTS: [Variant; 3] = [Variant::Full, Variant::NoDist, Variant::FixedGraph];

#[derive(Clone, Debug)]
pub struct VariantEval {
    pub variant: Variant,
    pub seed: u64,
    pub report: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub variables: Vec<String>,
    pub evals: Vec<VariantEval>,
    /// Seed-averaged R-squared per variant, aligned with `variables`;
    /// `None` if any seed's score was undefined.
    pub mean_r2: Vec<(Variant, Vec<Option<f64>>)>,
}

impl AblationOutcome {
    pub fn reports(&self, variant: Variant) -> Vec<&MetricsReport> {
        self.evals
            .iter()
            .filter(|e| e.variant == variant)
            .map(|e| &e.report)
            .collect()
    }
}

fn variant_label(v: Variant) -> &'static str {
    match v {
        Variant::Full => "full",
        Variant::NoDist => "no-dist",
        Variant::FixedGraph => "fixed-graph",
    }
}

/// The three-row ablation: full model, distance feature removed, and
/// structure learning replaced by the fixed radius graph. Each variant
/// trains from scratch per seed and is scored on the test split.
pub fn run_ablation(
    ds: &Dataset,
    base: &TrainConfig,
    seeds: &[u64],
    opts: &EvalOptions,
) -> Result<AblationOutcome> {
    assert!(!seeds.is_empty(), "ablation needs at least one seed");
    let vars = ds.var_count();
    let mut evals = Vec::new();
    let mut mean_r2 = Vec::new();
    for variant in ABLATION_VARIANTS {
        let mut sums = vec![Some(0.0); vars];
        for &seed in seeds {
            let counters = OpCounters::default();
            let report = train_and_evaluate(
                ds,
                base,
                variant,
                seed,
                base.hidden,
                base.tau,
                opts,
                &counters,
            )?;
            if variant == Variant::FixedGraph {
                assert_eq!(
                    counters.structure_learning_calls(),
                    0,
                    "the fixed-graph variant must never invoke structure learning"
                );
            }
            for (v, slot) in sums.iter_mut().enumerate() {
                *slot = match (*slot, report.per_variable[v].r2) {
                    (Some(acc), Some(r2)) => Some(acc + r2),
                    _ => None,
                };
            }
            evals.push(VariantEval {
                variant,
                seed,
                report,
            });
        }
        mean_r2.push((
            variant,
            sums.into_iter()
                .map(|s| s.map(|x| x / seeds.len() as f64))
                .collect(),
        ));
    }
    Ok(AblationOutcome {
        variables: ds.meta.config.var_names.clone(),
        evals,
        mean_r2,
    })
}

/// Exactly three rows, one per variant, with a seed-averaged R-squared
/// column per variable.
pub fn ablation_csv(outcome: &AblationOutcome) -> String {
    let mut out = String::from("variant");
    for v in &outcome.variables {
        out.push(',');
        out.push_str(v);
    }
    out.push('\n');
    for (variant, scores) in &outcome.mean_r2 {
        out.push_str(variant_label(*variant));
        for s in scores {
            out.push(',');
            match s {
                Some(x) => out.push_str(&x.to_string()),
                None => out.push_str("nan"),
            }
        }
        out.push('\n');
    }
    out
}

pub const SWEEP_TAUS: [f64; 5] = [0.1, 0.3, 0.5, 1.0, 2.0];
pub const SWEEP_HIDDENS: [usize; 5] = [8, 16, 32, 64, 128];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub param: String,
    pub value: f64,
    pub mean_r2: f64,
    pub std_r2: f64,
}

/// Sensitivity of the mean test R-squared to the sampling temperature
/// and the embedding width: each grid point trains from scratch once
/// per seed; the row reports the seed mean and population standard
/// deviation.
pub fn run_sensitivity(
    ds: &Dataset,
    base: &TrainConfig,
    seeds: &[u64],
    taus: &[f64],
    hiddens: &[usize],
    opts: &EvalOptions,
) -> Result<Vec<SweepPoint>> {
    assert!(!seeds.is_empty(), "sensitivity needs at least one seed");
    let mut rows = Vec::new();
    let mut push_point = |param: &str, value: f64, scores: &[f64]| {
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        rows.push(SweepPoint {
            param: param.into(),
            value,
            mean_r2: mean,
            std_r2: var.sqrt(),
        });
    };
    for &tau in taus {
        let mut scores = Vec::new();
        for &seed in seeds {
            let counters = OpCounters::default();
            let report = train_and_evaluate(
                ds,
                base,
                base.variant,
                seed,
                base.hidden,
                tau,
                opts,
                &counters,
            )?;
            scores.push(report.mean_r2());
        }
        push_point("tau", tau, &scores);
    }
    for &hidden in hiddens {
        let mut scores = Vec::new();
        for &seed in seeds {
            let counters = OpCounters::default();
            let report = train_and_evaluate(
                ds,
                base,
                base.variant,
                seed,
                hidden,
                base.tau,
                opts,
                &counters,
            )?;
            scores.push(report.mean_r2());
        }
        push_point("hidden", hidden as f64, &scores);
    }
    Ok(rows)
}

/// Sweep rows as CSV. The leading comment records the externally
/// reported optimum for orientation; nothing asserts it on synthetic
/// data.
pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out =
        String::from("# reference optimum recorded from prior tuning: tau = 0.5, hidden = 32\n");
    out.push_str("param,value,mean_r2,std_r2\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.param, p.value, p.mean_r2, p.std_r2
        ));
    }
    out
}

/// Line chart of one swept parameter with a shaded mean +/- std band.
/// Pure string assembly; writing the file is the caller's business.
pub fn sensitivity_svg(points: &[SweepPoint], param: &str) -> String {
    let rows: Vec<&SweepPoint> = points.iter().filter(|p| p.param == param).collect();
    assert!(!rows.is_empty(), "no sweep rows for parameter {param}");
    let (w, h, ml, mr, mt, mb) = (640.0, 400.0, 70.0, 20.0, 30.0, 50.0);
    let plot_w = w - ml - mr;
    let plot_h = h - mt - mb;
    let lo = rows
        .iter()
        .map(|p| p.mean_r2 - p.std_r2)
        .fold(f64::INFINITY, f64::min);
    let hi = rows
        .iter()
        .map(|p| p.mean_r2 + p.std_r2)
        .fold(f64::NEG_INFINITY, f64::max);
    let pad = ((hi - lo) * 0.1).max(1e-6);
    let (y0, y1) = (lo - pad, hi + pad);
    let x_of = |i: usize| {
        if rows.len() == 1 {
            ml + plot_w / 2.0
        } else {
            ml + plot_w * i as f64 / (rows.len() - 1) as f64
        }
    };
    let y_of = |v: f64| mt + plot_h * (1.0 - (v - y0) / (y1 - y0));

    let mut band = String::new();
    for (i, p) in rows.iter().enumerate() {
        band.push_str(&format!("{:.2},{:.2} ", x_of(i), y_of(p.mean_r2 + p.std_r2)));
    }
    for (i, p) in rows.iter().enumerate().rev() {
        band.push_str(&format!("{:.2},{:.2} ", x_of(i), y_of(p.mean_r2 - p.std_r2)));
    }
    let mut line = String::new();
    for (i, p) in rows.iter().enumerate() {
        line.push_str(&format!("{:.2},{:.2} ", x_of(i), y_of(p.mean_r2)));
    }

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <polygon points=\"{}\" fill=\"#9ecae1\" fill-opacity=\"0.5\"/>\n\
         <polyline points=\"{}\" fill=\"none\" stroke=\"#08519c\" stroke-width=\"2\"/>\n",
        band.trim_end(),
        line.trim_end()
    );
    for (i, p) in rows.iter().enumerate() {
        svg.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"#08519c\"/>\n\
             <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
            x_of(i),
            y_of(p.mean_r2),
            x_of(i),
            h - mb + 20.0,
            p.value
        ));
    }
    for frac in [0.0, 0.5, 1.0] {
        let v = y0 + (y1 - y0) * frac;
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"end\">{:.3}</text>\n",
            ml - 8.0,
            y_of(v) + 4.0,
            v
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"13\" text-anchor=\"middle\">{param}</text>\n\
         <text x=\"16\" y=\"{:.2}\" font-size=\"13\" text-anchor=\"middle\" \
         transform=\"rotate(-90 16 {:.2})\">mean R2</text>\n</svg>\n",
        ml + plot_w / 2.0,
        h - 12.0,
        mt + plot_h / 2.0,
        mt + plot_h / 2.0
    ));
    svg
}
