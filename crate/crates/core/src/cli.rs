//! The `asgn` command line: dataset simulation, two-phase training,
//! evaluation against baselines, the ablation matrix, and sensitivity
//! sweeps. Every run writes its fully resolved configuration next to
//! its outputs, and no command ever writes into a dataset directory.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::eval::{
    ablation_csv, build_report, forecast_model, forecast_persistence, run_ablation,
    run_sensitivity, sensitivity_svg, sweep_csv, EvalOptions, MetricsReport, SweepPoint,
    SWEEP_HIDDENS, SWEEP_TAUS,
};
use crate::graphbuild::build_cache;
use crate::model::{ModelDims, Phase, Variant};
use crate::structlearn::OpCounters;
use crate::synthgen::{generate_dataset, read_dataset, SimConfig, Split};
use crate::training::{fit, load_checkpoint, save_checkpoint, Checkpoint, TrainConfig};
use crate::{Error, Result};

/// One declarative file drives every command; unknown keys are
/// rejected so typos fail loudly instead of silently using defaults.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Simulator settings; `simulate` requires this section, the other
    /// commands read the dataset directory instead.
    pub sim: Option<SimConfig>,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    /// Seeds used by `ablate` and `sweep`.
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            sim: None,
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            seeds: vec![0, 1, 2],
        }
    }
}

/// Flags shared across subcommands; each one overrides the config file.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed (simulator and training).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training phase: pretrain or finetune.
    #[arg(long)]
    pub phase: Option<Phase>,
    /// Edge-sampling temperature (default 0.5).
    #[arg(long)]
    pub tau: Option<f64>,
    /// Embedding width (default 32).
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Input window length m (default 8).
    #[arg(long)]
    pub window: Option<usize>,
    /// Subgraph radius in hops (default 3).
    #[arg(long)]
    pub khop: Option<usize>,
    /// Candidate-edge radius in kilometers (default 50).
    #[arg(long = "radius-km")]
    pub radius_km: Option<f64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Keep the edge-scorer and degree parameters at their loaded values.
    #[arg(long)]
    pub freeze_structure: bool,
    /// Start finetuning from this reconstruction-phase checkpoint.
    #[arg(long)]
    pub pretrain_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    Persistence,
    FixedGraph,
}

impl std::str::FromStr for Baseline {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "persistence" => Ok(Baseline::Persistence),
            "fixed-graph" => Ok(Baseline::FixedGraph),
            other => Err(Error::config(format!(
                "unknown baseline {other:?} (expected persistence or fixed-graph)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepChoice {
    Tau,
    Hidden,
    Both,
}

impl std::str::FromStr for SweepChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tau" => Ok(SweepChoice::Tau),
            "hidden" => Ok(SweepChoice::Hidden),
            "both" => Ok(SweepChoice::Both),
            other => Err(Error::config(format!(
                "unknown sweep parameter {other:?} (expected tau, hidden, or both)"
            ))),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "asgn",
    version,
    about = "Adaptive sparse graph forecaster for gridded fields with transient observations"
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Generate a synthetic advection-diffusion dataset.
    Simulate {
        #[command(flatten)]
        opts: Overrides,
        /// Dataset directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint.bin and losses.csv.
    Train {
        /// Dataset directory produced by `simulate`.
        dataset: PathBuf,
        #[command(flatten)]
        opts: Overrides,
        /// Run directory for outputs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint or a baseline; writes metrics.json and a
    /// variability-stratified CSV.
    Evaluate {
        dataset: PathBuf,
        #[command(flatten)]
        opts: Overrides,
        #[arg(long)]
        out: PathBuf,
        /// Trained checkpoint (required unless --baseline persistence).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Score a baseline: persistence or fixed-graph.
        #[arg(long)]
        baseline: Option<Baseline>,
        /// Split to score; non-test splits write metrics.<split>.json.
        #[arg(long, default_value = "test")]
        split: Split,
        /// Variable whose variability defines the node groups.
        #[arg(long)]
        vi_var: Option<String>,
        /// Steps in the variability window.
        #[arg(long)]
        vi_steps: Option<usize>,
    },
    /// Train and score the full, no-distance, and fixed-graph variants.
    Ablate {
        dataset: PathBuf,
        #[command(flatten)]
        opts: Overrides,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep the sampling temperature and embedding width.
    Sweep {
        dataset: PathBuf,
        #[command(flatten)]
        opts: Overrides,
        #[arg(long)]
        out: PathBuf,
        /// Which parameter to sweep: tau, hidden, or both.
        #[arg(long, default_value = "both")]
        param: SweepChoice,
        /// Also render an SVG chart per swept parameter.
        #[arg(long)]
        svg: bool,
    },
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::config(format!("{}: {e}", p.display())))
        }
    }
}

fn apply_overrides(rc: &mut RunConfig, o: &Overrides) {
    if let Some(seed) = o.seed {
        rc.train.seed = seed;
        if let Some(sim) = &mut rc.sim {
            sim.seed = seed;
        }
    }
    if let Some(phase) = o.phase {
        rc.train.phase = phase;
    }
    if let Some(tau) = o.tau {
        rc.train.tau = tau;
    }
    if let Some(hidden) = o.hidden {
        rc.train.hidden = hidden;
    }
    if let Some(window) = o.window {
        rc.train.window = window;
    }
    if let Some(khop) = o.khop {
        rc.train.khop = khop;
    }
    if let Some(radius) = o.radius_km {
        rc.train.radius_km = radius;
    }
    if o.freeze_structure {
        rc.train.freeze_structure = true;
    }
}

fn configure_jobs(o: &Overrides) {
    if let Some(jobs) = o.jobs {
        // Fails if a pool already exists (e.g. a second command in one
        // process); the first configuration then stays in effect.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
}

fn prepare_out(out: &Path, rc: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let resolved = serde_json::to_string_pretty(rc)?;
    let path = out.join("config.resolved.json");
    std::fs::write(&path, resolved).map_err(|e| Error::io(path, e))
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

fn stratified_csv(report: &MetricsReport) -> String {
    let mut out = String::from("group,nodes,samples");
    for v in &report.variables {
        out.push_str(&format!(",mae_{v}"));
    }
    out.push('\n');
    for g in &report.groups {
        out.push_str(&format!("{},{},{}", g.label, g.nodes, g.samples));
        for m in &g.mae {
            out.push_str(&format!(",{m}"));
        }
        out.push('\n');
    }
    out
}

fn losses_csv(rows: &[crate::training::EpochRow]) -> String {
    let mut out = String::from("epoch,train,val\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.epoch, r.train, r.val));
    }
    out
}

fn cmd_simulate(opts: &Overrides, out: &Path) -> Result<()> {
    let mut rc = load_run_config(opts.config.as_deref())?;
    apply_overrides(&mut rc, opts);
    let sim = rc.sim.clone().ok_or_else(|| {
        Error::config("simulate needs a `sim` section in the config file")
    })?;
    let ds = generate_dataset(&sim, out)?;
    prepare_out(out, &rc)?;
    let obs_total: usize = ds.obs_by_step.iter().map(|o| o.len()).sum();
    println!(
        "dataset written to {}: {} grid nodes, {} steps, {} observations",
        out.display(),
        ds.grid_count(),
        ds.steps(),
        obs_total
    );
    Ok(())
}

fn cmd_train(dataset: &Path, opts: &Overrides, out: &Path) -> Result<()> {
    let mut rc = load_run_config(opts.config.as_deref())?;
    apply_overrides(&mut rc, opts);
    let ds = read_dataset(dataset)?;
    prepare_out(out, &rc)?;

    let start = match &opts.pretrain_checkpoint {
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    let counters = OpCounters::default();
    let outcome = fit(&ds, &rc.train, start.as_ref(), &counters)?;

    let losses_path = out.join("losses.csv");
    std::fs::write(&losses_path, losses_csv(&outcome.losses))
        .map_err(|e| Error::io(losses_path, e))?;
    let ck = Checkpoint::new(
        outcome.params,
        outcome.opt,
        outcome.best_epoch,
        rc.train.clone(),
    );
    save_checkpoint(&out.join("checkpoint.bin"), &ck)?;

    if outcome.diverged {
        return Err(Error::Diverged {
            phase: match rc.train.phase {
                Phase::Pretrain => "pretrain",
                Phase::Finetune => "finetune",
            },
            epoch: outcome.losses.len(),
        });
    }
    let last = outcome.losses.last().expect("at least one epoch ran");
    println!(
        "trained {} epochs (best validation at epoch {}); final train loss {:.6}",
        outcome.losses.len(),
        outcome.best_epoch,
        last.train
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    dataset: &Path,
    opts: &Overrides,
    out: &Path,
    checkpoint: Option<&Path>,
    baseline: Option<Baseline>,
    split: Split,
    vi_var: Option<&str>,
    vi_steps: Option<usize>,
) -> Result<()> {
    let mut rc = load_run_config(opts.config.as_deref())?;
    apply_overrides(&mut rc, opts);
    let ds = read_dataset(dataset)?;
    prepare_out(out, &rc)?;

    let mut eval_opts = rc.eval.clone();
    if let Some(v) = vi_var {
        eval_opts.vi_var = v.to_string();
    }
    if let Some(s) = vi_steps {
        eval_opts.vi_steps = s;
    }

    let report = match baseline {
        Some(Baseline::Persistence) => {
            let gcfg = rc.train.graph_config();
            let cache = build_cache(&ds, &gcfg)?;
            let samples = forecast_persistence(&ds, &cache, &gcfg, split);
            build_report(&ds, &samples, split, &eval_opts)?
        }
        other => {
            let ck_path = checkpoint.ok_or_else(|| {
                Error::config("--checkpoint is required unless --baseline persistence")
            })?;
            let ck = load_checkpoint(ck_path)?;
            let expected = ModelDims {
                var_count: ds.var_count(),
                families: ds.meta.config.family_table().len(),
                ..ck.params.dims
            };
            if ck.params.dims != expected {
                return Err(Error::Shape {
                    op: "evaluate",
                    detail: format!(
                        "checkpoint was trained for {} variables and {} families, \
                         dataset has {} and {}",
                        ck.params.dims.var_count,
                        ck.params.dims.families,
                        expected.var_count,
                        expected.families
                    ),
                });
            }
            let variant = match other {
                Some(Baseline::FixedGraph) => Variant::FixedGraph,
                _ => ck.config.variant,
            };
            // Graph-building settings come from the checkpoint's own
            // training config so evaluation matches training exactly;
            // explicit flags still win.
            let mut tcfg = ck.config.clone();
            if let Some(t) = opts.tau {
                tcfg.tau = t;
            }
            if let Some(w) = opts.window {
                tcfg.window = w;
            }
            if let Some(k) = opts.khop {
                tcfg.khop = k;
            }
            if let Some(r) = opts.radius_km {
                tcfg.radius_km = r;
            }
            let gcfg = tcfg.graph_config();
            let cache = build_cache(&ds, &gcfg)?;
            let counters = OpCounters::default();
            let samples = forecast_model(
                &ds,
                &cache,
                &gcfg,
                &ck.params,
                tcfg.tau,
                variant,
                split,
                &counters,
            );
            build_report(&ds, &samples, split, &eval_opts)?
        }
    };

    let (metrics_name, strat_name) = match split {
        Split::Test => ("metrics.json".to_string(), "stratified.csv".to_string()),
        s => (
            format!("metrics.{}.json", split_name(s)),
            format!("stratified.{}.csv", split_name(s)),
        ),
    };
    let metrics_path = out.join(metrics_name);
    let json = serde_json::to_string_pretty(&report)?;
    std::fs::write(&metrics_path, json).map_err(|e| Error::io(&metrics_path, e))?;
    let strat_path = out.join(strat_name);
    std::fs::write(&strat_path, stratified_csv(&report))
        .map_err(|e| Error::io(&strat_path, e))?;

    for (name, m) in report.variables.iter().zip(&report.per_variable) {
        match m.r2 {
            Some(r2) => println!("{name}: rmse {:.4} mae {:.4} r2 {:.4}", m.rmse, m.mae, r2),
            None => println!(
                "{name}: rmse {:.4} mae {:.4} r2 undefined (constant truth)",
                m.rmse, m.mae
            ),
        }
    }
    Ok(())
}

fn cmd_ablate(dataset: &Path, opts: &Overrides, out: &Path) -> Result<()> {
    let mut rc = load_run_config(opts.config.as_deref())?;
    apply_overrides(&mut rc, opts);
    let ds = read_dataset(dataset)?;
    prepare_out(out, &rc)?;
    let outcome = run_ablation(&ds, &rc.train, &rc.seeds, &rc.eval)?;
    let csv = ablation_csv(&outcome);
    let path = out.join("ablation.csv");
    std::fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
    print!("{csv}");
    Ok(())
}

fn cmd_sweep(
    dataset: &Path,
    opts: &Overrides,
    out: &Path,
    param: SweepChoice,
    svg: bool,
) -> Result<()> {
    let mut rc = load_run_config(opts.config.as_deref())?;
    apply_overrides(&mut rc, opts);
    let ds = read_dataset(dataset)?;
    prepare_out(out, &rc)?;
    let (taus, hiddens): (&[f64], &[usize]) = match param {
        SweepChoice::Tau => (&SWEEP_TAUS, &[]),
        SweepChoice::Hidden => (&[], &SWEEP_HIDDENS),
        SweepChoice::Both => (&SWEEP_TAUS, &SWEEP_HIDDENS),
    };
    let rows = run_sensitivity(&ds, &rc.train, &rc.seeds, taus, hiddens, &rc.eval)?;
    let path = out.join("sweep.csv");
    std::fs::write(&path, sweep_csv(&rows)).map_err(|e| Error::io(&path, e))?;
    if svg {
        for p in ["tau", "hidden"] {
            if rows.iter().any(|r| r.param == p) {
                let svg_path = out.join(format!("sweep_{p}.svg"));
                std::fs::write(&svg_path, render_svg(&rows, p))
                    .map_err(|e| Error::io(&svg_path, e))?;
            }
        }
    }
    println!("{} sweep rows written to {}", rows.len(), out.display());
    Ok(())
}

fn render_svg(rows: &[SweepPoint], param: &str) -> String {
    sensitivity_svg(rows, param)
}

/// Dispatch a parsed command line. Errors bubble to `main`, which maps
/// divergence and shape mismatches to exit code 2 and the rest to 1.
pub fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Simulate { opts, out } => {
            configure_jobs(opts);
            cmd_simulate(opts, out)
        }
        Cmd::Train { dataset, opts, out } => {
            configure_jobs(opts);
            cmd_train(dataset, opts, out)
        }
        Cmd::Evaluate {
            dataset,
            opts,
            out,
            checkpoint,
            baseline,
            split,
            vi_var,
            vi_steps,
        } => {
            configure_jobs(opts);
            cmd_evaluate(
                dataset,
                opts,
                out,
                checkpoint.as_deref(),
                *baseline,
                *split,
                vi_var.as_deref(),
                *vi_steps,
            )
        }
        Cmd::Ablate { dataset, opts, out } => {
            configure_jobs(opts);
            cmd_ablate(dataset, opts, out)
        }
        Cmd::Sweep {
            dataset,
            opts,
            out,
            param,
            svg,
        } => {
            configure_jobs(opts);
            cmd_sweep(dataset, opts, out, *param, *svg)
        }
    }
}

/// Exit code for a failed run: 2 flags the contract-level failures
/// (training divergence, checkpoint/dataset shape mismatch), 1
/// everything else.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Diverged { .. } | Error::Shape { .. } => 2,
        _ => 1,
    }
}
