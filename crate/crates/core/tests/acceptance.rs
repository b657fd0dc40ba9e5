//! Release gate: the seven checks that must pass before a build ships.
//! Each test prints one `[criterion N] PASS` line with the numbers it
//! verified; run with `--nocapture` to see them on success.
//!
//! The forecast-quality checks (criteria 4 and 5) share one expensive
//! bundle: the benchmark dataset plus the full ablation matrix, built
//! once behind a `OnceLock`.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use asgn_core::cli::RunConfig;
use asgn_core::datamodel::{
    GraphSnapshot, GridNode, LatLon, LocalNode, NodeKind, SubgraphSnapshot,
};
use asgn_core::eval::{
    build_report, forecast_persistence, run_ablation, AblationOutcome, GroupLabel, MetricsReport,
};
use asgn_core::graphbuild::{
    all_grid_targets, build_cache, build_radius_edges, haversine_km, khop_subgraph,
    materialize_window, window_plans, GraphConfig, EARTH_RADIUS_KM,
};
use asgn_core::model::{
    forward_window, ForwardCfg, ModelDims, ModelLeaves, ModelParams, Phase, Variant,
};
use asgn_core::noise::{KeyedNoise, ZeroNoise};
use asgn_core::structlearn::{
    build_adaptive_adjacency, candidate_sets, project_features, AdjacencyMode, OpCounters,
    SampleSite, StructureSettings, DIST_SCALE_KM,
};
use asgn_core::synthgen::{build_dataset, Dataset, Motion, PlatformSpec, SimConfig, Split, SplitBounds};
use asgn_core::tape::{Mat, Tape};
use asgn_core::training::{fit, initial_params, Checkpoint, TrainConfig};

// ---------------------------------------------------------------------
// Criterion 1: graph construction against brute-force oracles.
// ---------------------------------------------------------------------

/// Independent great-circle distance (atan2 form, unlike the library's
/// asin form) so the comparison exercises a genuinely different code
/// path.
fn oracle_haversine_km(a: LatLon, b: LatLon) -> f64 {
    let lat1 = a.lat_deg.to_radians();
    let lat2 = b.lat_deg.to_radians();
    let dlat = (b.lat_deg - a.lat_deg).to_radians();
    let dlon = (b.lon_deg - a.lon_deg).to_radians();
    let s = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * s.sqrt().atan2((1.0 - s).sqrt())
}

/// Plain BFS on an id-keyed adjacency map, capped at `k` hops.
fn oracle_bfs(ids: &[u64], edges: &[(u64, u64, f64)], start: u64, k: usize) -> Vec<u64> {
    use std::collections::{BTreeMap, BTreeSet};
    let mut adj: BTreeMap<u64, Vec<u64>> = ids.iter().map(|&i| (i, Vec::new())).collect();
    for &(a, b, _) in edges {
        adj.get_mut(&a).unwrap().push(b);
        adj.get_mut(&b).unwrap().push(a);
    }
    let mut seen: BTreeSet<u64> = [start].into();
    let mut frontier = vec![start];
    for _ in 0..k {
        let mut next = Vec::new();
        for &i in &frontier {
            for &j in &adj[&i] {
                if seen.insert(j) {
                    next.push(j);
                }
            }
        }
        frontier = next;
    }
    seen.into_iter().collect()
}

#[test]
fn criterion_1_graph_construction_matches_brute_force() {
    let started = Instant::now();

    // Frozen hand values first: one degree of arc at the equator, both
    // along a meridian and across the antimeridian.
    let p = |lat: f64, lon: f64| LatLon {
        lat_deg: lat,
        lon_deg: lon,
    };
    assert!((haversine_km(p(0.0, 0.0), p(0.0, 1.0)) - 111.19492664455873).abs() < 1e-9);
    assert!((haversine_km(p(0.0, 0.0), p(1.0, 0.0)) - 111.19492664455873).abs() < 1e-9);
    assert!((haversine_km(p(0.0, 179.5), p(0.0, -179.5)) - 111.19492664455873).abs() < 1e-9);

    let mut rng = ChaCha8Rng::seed_from_u64(611);
    let mut total_nodes = 0usize;
    let mut total_edges = 0usize;
    for case in 0..100 {
        let n: usize = rng.random_range(2..=200);
        let nodes: Vec<(u64, LatLon)> = (0..n)
            .map(|i| {
                (
                    i as u64 * 7919 + 11,
                    LatLon {
                        lat_deg: rng.random_range(-4.0..4.0),
                        lon_deg: rng.random_range(7.0..19.0),
                    },
                )
            })
            .collect();
        let radius_km: f64 = rng.random_range(10.0..80.0);

        let got = build_radius_edges(&nodes, radius_km);
        let mut want = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let d = oracle_haversine_km(nodes[i].1, nodes[j].1);
                if d <= radius_km {
                    want.push((nodes[i].0, nodes[j].0, d));
                }
            }
        }
        assert_eq!(
            got.len(),
            want.len(),
            "case {case}: {} edges found, oracle has {} (n {n}, radius {radius_km})",
            got.len(),
            want.len()
        );
        for (g, w) in got.iter().zip(&want) {
            assert_eq!((g.0, g.1), (w.0, w.1), "case {case}: edge pair differs");
            assert!(
                (g.2 - w.2).abs() <= 1e-9 * w.2.max(1.0),
                "case {case}: distance {} vs oracle {}",
                g.2,
                w.2
            );
        }

        // Hop-limited subgraph against a plain BFS on the oracle edges.
        let snapshot = GraphSnapshot {
            t: 0,
            grid: nodes
                .iter()
                .map(|&(id, loc)| GridNode {
                    id,
                    loc,
                    features: vec![0.0],
                })
                .collect(),
            obs: Vec::new(),
            edges: want.iter().map(|&(a, b, _)| (a, b)).collect(),
        };
        let ids: Vec<u64> = nodes.iter().map(|&(id, _)| id).collect();
        let target = ids[rng.random_range(0..n)];
        let k: usize = rng.random_range(0..=4);
        let (got_ids, got_edges) = khop_subgraph(&snapshot, target, k).expect("target exists");
        let want_ids = oracle_bfs(&ids, &want, target, k);
        assert_eq!(got_ids, want_ids, "case {case}: {k}-hop set differs");
        let want_edges: Vec<(u64, u64)> = snapshot
            .edges
            .iter()
            .copied()
            .filter(|&(a, b)| want_ids.contains(&a) && want_ids.contains(&b))
            .collect();
        assert_eq!(got_edges, want_edges, "case {case}: induced edges differ");

        total_nodes += n;
        total_edges += want.len();
    }

    let elapsed = started.elapsed();
    assert!(
        elapsed < Duration::from_secs(60),
        "graph oracle comparison took {elapsed:?}, budget is 60 s"
    );
    println!(
        "[criterion 1] PASS: 100 random snapshots ({total_nodes} nodes, {total_edges} edges) \
         match the all-pairs and BFS oracles in {elapsed:.2?}"
    );
}

// ---------------------------------------------------------------------
// Criterion 2: analytic gradients against central finite differences.
// ---------------------------------------------------------------------

fn gradcheck_sim() -> SimConfig {
    SimConfig {
        grid_nx: 2,
        grid_ny: 2,
        lat0_deg: 0.0,
        lon0_deg: 10.0,
        cell_deg: 0.345,
        dt_hours: 6.0,
        steps: 12,
        advect_speed_cells: 0.7,
        advect_angle0_deg: 25.0,
        advect_rot_period_steps: 0.0,
        diffusion_cells2: 0.05,
        init_corr_cells: 1.2,
        init_bumps: 4,
        var_names: vec!["U".into(), "T".into()],
        var_means: vec![0.0, 15.0],
        var_scales: vec![5.0, 8.0],
        grid_noise_sigma: 0.2,
        platforms: vec![PlatformSpec {
            name: "buoy".into(),
            motion: Motion::Stationary { sites: 1 },
            variables: vec!["T".into()],
            noise_sigma: 0.05,
        }],
        seed: 31,
    }
}

#[test]
fn criterion_2_gradients_match_finite_differences() {
    let started = Instant::now();
    let ds = build_dataset(&gradcheck_sim()).expect("gradcheck dataset builds");
    let gcfg = GraphConfig {
        radius_km: 50.0,
        khop: 2,
        window: 2,
        obs_obs_edges: true,
    };
    let cache = build_cache(&ds, &gcfg).expect("cache builds");
    let plans = window_plans(&ds, &gcfg, Split::Train, &all_grid_targets(&ds));
    let window = materialize_window(&ds, &cache, &gcfg, &plans[0], true);
    for snap in &window.snapshots {
        assert!(
            snap.nodes.len() <= 6,
            "gradcheck window must stay small, got {} nodes",
            snap.nodes.len()
        );
    }
    assert_eq!(window.snapshots.len(), 2);

    let dims = ModelDims {
        var_count: ds.var_count(),
        families: ds.meta.config.family_table().len(),
        hidden: 3,
        score_dim: 2,
        dist_dim: 2,
        gcn_layers: 2,
    };
    // Soft adjacency: a finite difference cannot cross a discrete pick,
    // so the check runs on the relaxation the backward pass actually
    // differentiates.
    let phases = [Phase::Finetune, Phase::Pretrain];
    let h = 1e-4;
    let mut checked = 0usize;
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        for phase in phases {
            let cfg = ForwardCfg {
                phase,
                variant: Variant::Full,
                tau: 0.7,
                mode: AdjacencyMode::Soft,
                kl_weight: 0.01,
            };
            let params = ModelParams::init(dims, &KeyedNoise::new(1100 + seed));
            let noise = KeyedNoise::new(2200 + seed);
            let eval = |p: &ModelParams| -> (f64, Vec<Option<Mat>>) {
                let mut tape = Tape::new();
                let leaves = ModelLeaves::register(&mut tape, p);
                let out = forward_window(
                    &mut tape,
                    &leaves,
                    &window,
                    &cfg,
                    &noise,
                    3,
                    7,
                    &OpCounters::default(),
                );
                let grads = tape.backward(out.loss);
                (
                    tape.value(out.loss).get(0, 0),
                    leaves.ids.iter().map(|&id| grads.get(id).cloned()).collect(),
                )
            };
            let (_, analytic) = eval(&params);
            for (ti, name) in params.names().iter().enumerate() {
                let (rows, cols) = params.tensors()[ti].shape();
                for r in 0..rows {
                    for c in 0..cols {
                        let mut up = params.clone();
                        let v = up.tensors()[ti].get(r, c);
                        up.tensors_mut()[ti].set(r, c, v + h);
                        let mut dn = params.clone();
                        dn.tensors_mut()[ti].set(r, c, v - h);
                        let fd = (eval(&up).0 - eval(&dn).0) / (2.0 * h);
                        let an = analytic[ti].as_ref().map_or(0.0, |g| g.get(r, c));
                        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                        assert!(
                            rel < 1e-3,
                            "seed {seed} {phase:?} {name} ({r},{c}): analytic {an} vs fd {fd}"
                        );
                        worst = worst.max(rel);
                        checked += 1;
                    }
                }
            }
        }
    }

    let elapsed = started.elapsed();
    assert!(
        elapsed < Duration::from_secs(300),
        "gradient check took {elapsed:?}, budget is 5 min"
    );
    println!(
        "[criterion 2] PASS: {checked} partial derivatives across 10 seeds and both phases \
         match central differences (worst relative error {worst:.2e}) in {elapsed:.2?}"
    );
}

// ---------------------------------------------------------------------
// Criterion 3: hard pick frequencies follow the scorer's distribution.
// ---------------------------------------------------------------------

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scalar re-derivation of one pair's log selection probability from the
/// raw tensors: projection, endpoint embedding, distance embedding,
/// scoring head, log-sigmoid.
fn oracle_logp(params: &ModelParams, xi: &[f64], xj: &[f64], dist_km: f64) -> f64 {
    let dense = |name: &str, input: &[f64], bias: Option<&str>| -> Vec<f64> {
        let w = params.get(name);
        let (rows, cols) = w.shape();
        assert_eq!(cols, input.len());
        (0..rows)
            .map(|r| {
                let mut acc = 0.0;
                for c in 0..cols {
                    acc += w.get(r, c) * input[c];
                }
                if let Some(b) = bias {
                    acc += params.get(b).get(0, r);
                }
                acc
            })
            .collect()
    };
    let xhat_i = dense("fc_x_w", xi, Some("fc_x_b"));
    let xhat_j = dense("fc_x_w", xj, Some("fc_x_b"));
    let a = dense("w_c1", &xhat_i, None);
    let b = dense("w_c2", &xhat_j, None);
    let mut feat: Vec<f64> = a.iter().chain(&b).map(|&v| sigmoid(v)).collect();
    feat.extend(
        dense("w_d", &[dist_km / DIST_SCALE_KM], None)
            .iter()
            .map(|&v| sigmoid(v)),
    );
    let s = dense("fc_p_w", &feat, Some("fc_p_b"))[0];
    -(-s).exp().ln_1p()
}

#[test]
fn criterion_3_hard_picks_follow_the_soft_distribution() {
    const DRAWS: usize = 20_000;
    let mut worst_sigma: f64 = 0.0;
    for trial in 0..5u64 {
        let n = 4 + trial as usize; // 4..=8 nodes
        let mut rng = ChaCha8Rng::seed_from_u64(4400 + trial);
        // Star geometry: node 0 scores every other node as a candidate.
        let features: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let dists: Vec<f64> = (1..n).map(|_| rng.random_range(8.0..45.0)).collect();
        let nodes: Vec<LocalNode> = (0..n)
            .map(|i| LocalNode {
                global_id: i as u64,
                kind: NodeKind::Grid,
                loc: LatLon {
                    lat_deg: 0.0,
                    lon_deg: 10.0 + i as f64 * 0.1,
                },
                features: features[i].clone(),
                mask: vec![true; 2],
            })
            .collect();
        let snap = SubgraphSnapshot {
            t: 0,
            nodes,
            edges: (1..n).map(|j| (0, j, dists[j - 1])).collect(),
            target_local: 0,
        };
        let cands = candidate_sets(&snap);

        let dims = ModelDims {
            var_count: 2,
            families: 1,
            hidden: 3,
            score_dim: 2,
            dist_dim: 2,
            gcn_layers: 2,
        };
        let mut params = ModelParams::init(dims, &KeyedNoise::new(900 + trial));
        // A zeroed budget head rounds to zero and clamps up to exactly one
        // pick per node, giving clean categorical draws.
        for name in ["fc_k_w", "fc_k_b"] {
            let t = params.get_mut(name);
            let (rows, cols) = t.shape();
            for r in 0..rows {
                for c in 0..cols {
                    t.set(r, c, 0.0);
                }
            }
        }

        // Expected distribution over node 0's non-self candidates.
        let logp: Vec<f64> = (1..n)
            .map(|j| oracle_logp(&params, &features[0], &features[j], dists[j - 1]))
            .collect();
        let max_logp = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logp.iter().map(|l| (l - max_logp).exp()).sum();
        let expect: Vec<f64> = logp.iter().map(|l| (l - max_logp).exp() / z).collect();

        let noise = KeyedNoise::new(3300 + trial);
        let settings = StructureSettings {
            tau: 0.5,
            use_distance: true,
            mode: AdjacencyMode::HardST,
            symmetrize: true,
        };
        let counters = OpCounters::default();
        let mut counts = vec![0usize; n];
        for draw in 0..DRAWS {
            let mut tape = Tape::new();
            let leaves = ModelLeaves::register(&mut tape, &params);
            let xhat =
                asgn_core::structlearn::project_features(&mut tape, &snap, &leaves.proj);
            let out = build_adaptive_adjacency(
                &mut tape,
                &leaves.struc,
                xhat,
                &cands,
                settings,
                &noise,
                SampleSite {
                    epoch: 0,
                    window: draw as u64,
                    step: 0,
                },
                &counters,
            );
            assert_eq!(out.degrees[0], 1, "zeroed budget head must pick exactly one");
            let picks: Vec<usize> = out
                .picked
                .iter()
                .filter(|&&(c, _)| c == 0)
                .map(|&(_, j)| j)
                .collect();
            assert_eq!(picks.len(), 1);
            counts[picks[0]] += 1;
        }

        assert_eq!(counts[0], 0, "the self pair must never be picked");
        for j in 1..n {
            let freq = counts[j] as f64 / DRAWS as f64;
            let p = expect[j - 1];
            let se = (p * (1.0 - p) / DRAWS as f64).sqrt();
            let dev = (freq - p).abs();
            assert!(
                dev <= 3.0 * se,
                "trial {trial} candidate {j}: frequency {freq:.4} vs expected {p:.4} \
                 ({:.1} standard errors)",
                dev / se
            );
            worst_sigma = worst_sigma.max(dev / se.max(1e-12));
        }
    }
    println!(
        "[criterion 3] PASS: hard-pick frequencies over {DRAWS} draws match the scorer's \
         softmax on 5 candidate sets (worst deviation {worst_sigma:.2} standard errors)"
    );
}

// ---------------------------------------------------------------------
// Criteria 4 and 5: forecast quality on the bundled benchmark.
// ---------------------------------------------------------------------

struct Bundle {
    variables: Vec<String>,
    /// Per-variable normalization scales, to put group MAEs of different
    /// variables on one footing.
    scales: Vec<f64>,
    ablation: AblationOutcome,
    persistence: MetricsReport,
    elapsed: Duration,
}

fn benchmark_config() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/benchmark.json");
    let text = fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("reading {}: {e}", path.display()));
    serde_json::from_str(&text).expect("benchmark config parses")
}

fn bundle() -> &'static Bundle {
    static BUNDLE: OnceLock<Bundle> = OnceLock::new();
    BUNDLE.get_or_init(|| {
        let started = Instant::now();
        let rc = benchmark_config();
        let sim = rc.sim.expect("benchmark config carries a sim section");
        let ds = build_dataset(&sim).expect("benchmark dataset builds");
        let ablation =
            run_ablation(&ds, &rc.train, &rc.seeds, &rc.eval).expect("ablation completes");
        let gcfg = rc.train.graph_config();
        let cache = build_cache(&ds, &gcfg).expect("snapshot cache builds");
        let samples = forecast_persistence(&ds, &cache, &gcfg, Split::Test);
        let persistence =
            build_report(&ds, &samples, Split::Test, &rc.eval).expect("persistence report");
        Bundle {
            variables: ds.meta.config.var_names.clone(),
            scales: ds.meta.norm.std.clone(),
            ablation,
            persistence,
            elapsed: started.elapsed(),
        }
    })
}

/// Seed-averaged test R-squared per variable; fails if any is undefined.
fn mean_r2(outcome: &AblationOutcome, variant: Variant) -> Vec<f64> {
    let (_, r2s) = outcome
        .mean_r2
        .iter()
        .find(|(v, _)| *v == variant)
        .expect("variant present");
    r2s.iter()
        .enumerate()
        .map(|(i, r)| r.unwrap_or_else(|| panic!("R2 undefined for variable {i}")))
        .collect()
}

/// High-VI minus low-VI group MAE in normalized units, averaged over
/// variables and then over the variant's seeds.
fn vi_gap(bundle: &Bundle, variant: Variant) -> f64 {
    let reports = bundle.ablation.reports(variant);
    assert!(!reports.is_empty());
    let per_seed: Vec<f64> = reports
        .iter()
        .map(|r| {
            let high = r.group(GroupLabel::High);
            let low = r.group(GroupLabel::Low);
            (0..bundle.scales.len())
                .map(|v| (high.mae[v] - low.mae[v]) / bundle.scales[v])
                .sum::<f64>()
                / bundle.scales.len() as f64
        })
        .collect();
    per_seed.iter().sum::<f64>() / per_seed.len() as f64
}

#[test]
fn criterion_4_full_model_beats_both_baselines() {
    let b = bundle();
    assert!(
        b.elapsed < Duration::from_secs(1800),
        "benchmark bundle took {:?}, budget is 30 min",
        b.elapsed
    );
    let full = mean_r2(&b.ablation, Variant::Full);
    let fixed = mean_r2(&b.ablation, Variant::FixedGraph);
    let nodist = mean_r2(&b.ablation, Variant::NoDist);
    let pers: Vec<f64> = b
        .persistence
        .per_variable
        .iter()
        .enumerate()
        .map(|(i, m)| m.r2.unwrap_or_else(|| panic!("persistence R2 undefined for variable {i}")))
        .collect();

    for (v, name) in b.variables.iter().enumerate() {
        assert!(
            full[v] - pers[v] >= 0.02,
            "{name}: full R2 {:.4} does not beat persistence {:.4} by 0.02",
            full[v],
            pers[v]
        );
        assert!(
            full[v] - fixed[v] >= 0.02,
            "{name}: full R2 {:.4} does not beat fixed-graph {:.4} by 0.02",
            full[v],
            fixed[v]
        );
    }
    let dist_gap: f64 = (0..full.len())
        .map(|v| full[v] - nodist[v])
        .sum::<f64>()
        / full.len() as f64;
    assert!(
        dist_gap >= 0.01,
        "distance ablation gap {dist_gap:.4} is below 0.01"
    );
    println!(
        "[criterion 4] PASS: per-variable R2 margins over persistence {:?} and fixed-graph {:?}, \
         distance gap {dist_gap:.4}, bundle built in {:.0?}",
        b.variables
            .iter()
            .enumerate()
            .map(|(v, _)| format!("{:.3}", full[v] - pers[v]))
            .collect::<Vec<_>>(),
        b.variables
            .iter()
            .enumerate()
            .map(|(v, _)| format!("{:.3}", full[v] - fixed[v]))
            .collect::<Vec<_>>(),
        b.elapsed
    );
}

#[test]
fn criterion_5_adaptive_graphs_close_the_variability_gap() {
    let b = bundle();
    let gap_full = vi_gap(b, Variant::Full);
    let gap_fixed = vi_gap(b, Variant::FixedGraph);
    assert!(
        gap_full <= gap_fixed,
        "high-vs-low variability MAE gap: full {gap_full:.4} exceeds fixed-graph {gap_fixed:.4}"
    );
    println!(
        "[criterion 5] PASS: normalized MAE gap between high- and low-variability nodes is \
         {gap_full:.4} for the full model vs {gap_fixed:.4} for the fixed graph"
    );
}

/// Not a gate: dumps every number behind criteria 4 and 5, for tuning the
/// benchmark configuration. Run with `--ignored --nocapture`.
#[test]
#[ignore = "diagnostic dump; run explicitly with --ignored --nocapture"]
fn benchmark_diagnostics() {
    let b = bundle();
    println!("bundle built in {:?}", b.elapsed);
    print!("{:<14}", "variant/seed");
    for v in &b.variables {
        print!("{v:>10}");
    }
    println!("{:>12}", "vi gap");
    for e in &b.ablation.evals {
        print!("{:<14}", format!("{:?}/{}", e.variant, e.seed));
        for m in &e.report.per_variable {
            match m.r2 {
                Some(r) => print!("{r:>10.4}"),
                None => print!("{:>10}", "undef"),
            }
        }
        let high = e.report.group(GroupLabel::High);
        let low = e.report.group(GroupLabel::Low);
        let gap = (0..b.scales.len())
            .map(|v| (high.mae[v] - low.mae[v]) / b.scales[v])
            .sum::<f64>()
            / b.scales.len() as f64;
        println!("{gap:>12.4}");
    }
    print!("{:<14}", "persistence");
    for m in &b.persistence.per_variable {
        match m.r2 {
            Some(r) => print!("{r:>10.4}"),
            None => print!("{:>10}", "undef"),
        }
    }
    println!();
    for variant in [Variant::Full, Variant::NoDist, Variant::FixedGraph] {
        let means = mean_r2(&b.ablation, variant);
        print!("{:<14}", format!("mean {variant:?}"));
        for m in &means {
            print!("{m:>10.4}");
        }
        println!("{:>12.4}", vi_gap(b, variant));
    }
}

/// Pick shares, budgets, and score peakedness on benchmark test windows,
/// sampled over grid-node segments. Used to see what the edge sampler
/// does before and after training.
fn dump_pick_profile(label: &str, ds: &Dataset, cfg: &TrainConfig, params: &ModelParams) {
    use std::collections::HashMap;
    let gcfg = cfg.graph_config();
    let cache = build_cache(ds, &gcfg).expect("snapshot cache builds");
    let plans = window_plans(ds, &gcfg, Split::Test, &all_grid_targets(ds));
    let settings = StructureSettings {
        tau: cfg.tau,
        use_distance: true,
        mode: AdjacencyMode::HardST,
        symmetrize: true,
    };
    let noise = ZeroNoise;
    let counters = OpCounters::default();
    let mut cand: HashMap<&'static str, usize> = HashMap::new();
    let mut pick: HashMap<&'static str, usize> = HashMap::new();
    let mut noisy_pick: HashMap<&'static str, usize> = HashMap::new();
    let mut grid_degs: Vec<usize> = Vec::new();
    let mut obs_degs: Vec<usize> = Vec::new();
    let mut peak: Vec<f64> = Vec::new();
    for plan in plans.iter().step_by(97) {
        let w = materialize_window(ds, &cache, &gcfg, plan, false);
        let snap = w.snapshots.last().expect("window has snapshots");
        let plat: HashMap<u64, &str> = ds.obs_by_step[snap.t]
            .iter()
            .map(|o| (o.id, o.platform.as_str()))
            .collect();
        let kind_of = |node: &LocalNode| -> &'static str {
            match node.kind {
                NodeKind::Grid => "grid",
                NodeKind::Obs { .. } => {
                    let name = plat.get(&node.global_id).copied().unwrap_or("?");
                    if name.starts_with("sonde") {
                        "clean obs"
                    } else {
                        "noisy obs"
                    }
                }
            }
        };
        let mut tape = Tape::new();
        let leaves = ModelLeaves::register(&mut tape, params);
        let xhat = project_features(&mut tape, snap, &leaves.proj);
        let cands = candidate_sets(snap);
        let out = build_adaptive_adjacency(
            &mut tape,
            &leaves.struc,
            xhat,
            &cands,
            settings,
            &noise,
            SampleSite {
                epoch: 0,
                window: 0,
                step: snap.t as u64,
            },
            &counters,
        );
        for &(i, j) in &cands.pairs {
            if i != j && kind_of(&snap.nodes[i]) == "grid" {
                *cand.entry(kind_of(&snap.nodes[j])).or_insert(0) += 1;
            }
        }
        for &(i, j) in &out.picked {
            match kind_of(&snap.nodes[i]) {
                "grid" => *pick.entry(kind_of(&snap.nodes[j])).or_insert(0) += 1,
                "noisy obs" => *noisy_pick.entry(kind_of(&snap.nodes[j])).or_insert(0) += 1,
                _ => {}
            }
        }
        for (i, node) in snap.nodes.iter().enumerate() {
            if matches!(node.kind, NodeKind::Grid) {
                grid_degs.push(out.degrees[i]);
            } else {
                obs_degs.push(out.degrees[i]);
            }
        }
        let soft = tape.value(out.edge_soft);
        let mut seg_max: HashMap<usize, f64> = HashMap::new();
        for (row, &s) in cands.seg.iter().enumerate() {
            let v = soft.get(row, 0);
            let m = seg_max.entry(s).or_insert(0.0);
            if v > *m {
                *m = v;
            }
        }
        for (s, m) in seg_max {
            if matches!(snap.nodes[s].kind, NodeKind::Grid) {
                peak.push(m);
            }
        }
    }
    let share = |map: &HashMap<&'static str, usize>| -> String {
        let total: usize = map.values().sum::<usize>().max(1);
        let mut rows: Vec<(&str, usize)> = map.iter().map(|(k, v)| (*k, *v)).collect();
        rows.sort();
        rows.iter()
            .map(|(k, v)| format!("{k} {:.1}%", 100.0 * *v as f64 / total as f64))
            .collect::<Vec<_>>()
            .join(", ")
    };
    let mean_usize = |v: &[usize]| v.iter().sum::<usize>() as f64 / v.len().max(1) as f64;
    println!("[{label}] grid candidates: {}", share(&cand));
    println!("[{label}] grid picks:      {}", share(&pick));
    println!("[{label}] noisy-obs picks: {}", share(&noisy_pick));
    println!(
        "[{label}] budgets: grid mean {:.2}, obs mean {:.2}; mean peak soft weight {:.3}",
        mean_usize(&grid_degs),
        mean_usize(&obs_degs),
        peak.iter().sum::<f64>() / peak.len().max(1) as f64,
    );
}

fn dump_loss_curve(label: &str, losses: &[asgn_core::training::EpochRow]) {
    let line: Vec<String> = losses
        .iter()
        .map(|r| format!("{}:{:.4}/{:.4}", r.epoch, r.train, r.val))
        .collect();
    println!("[{label}] epoch:train/val  {}", line.join("  "));
}

/// Not a gate: trains full-variant models on the benchmark (forecasting
/// from scratch, and reconstruction pretraining chained into forecasting)
/// and prints what the edge sampler picks after each stage. Run with
/// `--ignored --nocapture`.
#[test]
#[ignore = "diagnostic dump; run explicitly with --ignored --nocapture"]
fn structure_diagnostics() {
    let rc = benchmark_config();
    let sim = rc.sim.expect("benchmark config carries a sim section");
    let ds = build_dataset(&sim).expect("benchmark dataset builds");
    let mut cfg = rc.train.clone();
    cfg.seed = rc.seeds[0];
    cfg.variant = Variant::Full;
    let dims = ModelDims::new(
        ds.var_count(),
        ds.meta.config.family_table().len(),
        cfg.hidden,
    );
    let init = initial_params(dims, &cfg, None).expect("fresh parameters");
    dump_pick_profile("init", &ds, &cfg, &init);
    let counters = OpCounters::default();

    let t0 = Instant::now();
    let scratch = fit(&ds, &cfg, None, &counters).expect("scratch finetune");
    println!(
        "scratch finetune in {:?} (best epoch {})",
        t0.elapsed(),
        scratch.best_epoch
    );
    dump_loss_curve("scratch", &scratch.losses);
    dump_pick_profile("scratch", &ds, &cfg, &scratch.params);

    let mut pre_cfg = cfg.clone();
    pre_cfg.phase = Phase::Pretrain;
    pre_cfg.epochs = 24;
    let t1 = Instant::now();
    let pre = fit(&ds, &pre_cfg, None, &counters).expect("reconstruction pretrain");
    println!(
        "reconstruction pretrain in {:?} (best epoch {})",
        t1.elapsed(),
        pre.best_epoch
    );
    dump_loss_curve("pretrain", &pre.losses);
    dump_pick_profile("pretrain", &ds, &cfg, &pre.params);

    let warm = Checkpoint::new(pre.params, pre.opt, pre.best_epoch, pre_cfg);
    let t2 = Instant::now();
    let tuned = fit(&ds, &cfg, Some(&warm), &counters).expect("finetune from pretrain");
    println!(
        "finetune from pretrain in {:?} (best epoch {})",
        t2.elapsed(),
        tuned.best_epoch
    );
    dump_loss_curve("two-phase", &tuned.losses);
    dump_pick_profile("two-phase", &ds, &cfg, &tuned.params);
}

// ---------------------------------------------------------------------
// Criterion 6: documented defaults.
// ---------------------------------------------------------------------

#[test]
fn criterion_6_documented_defaults_hold() {
    let g = GraphConfig::default();
    assert_eq!(g.radius_km, 50.0);
    assert_eq!(g.khop, 3);
    assert_eq!(g.window, 8);

    let t = TrainConfig::default();
    assert_eq!(t.radius_km, 50.0);
    assert_eq!(t.khop, 3);
    assert_eq!(t.window, 8);
    assert_eq!(t.tau, 0.5);
    assert_eq!(t.hidden, 32);

    let split = SplitBounds::six_two_two(120);
    assert_eq!(
        split,
        SplitBounds {
            train_end: 72,
            val_end: 96
        }
    );
    assert_eq!(split.range(Split::Train, 120).len(), 72);
    assert_eq!(split.range(Split::Val, 120).len(), 24);
    assert_eq!(split.range(Split::Test, 120).len(), 24);

    // Window of 8 inputs predicting exactly the next step: the label of a
    // materialized window is the clean normalized state at t_end + 1.
    let mut sim = gradcheck_sim();
    sim.grid_nx = 3;
    sim.grid_ny = 3;
    sim.steps = 60;
    let ds = build_dataset(&sim).expect("dataset builds");
    let plans = window_plans(&ds, &g, Split::Test, &all_grid_targets(&ds));
    assert!(!plans.is_empty());
    let plan = plans[0];
    let window = materialize_window(&ds, &build_cache(&ds, &g).unwrap(), &g, &plan, true);
    assert_eq!(window.snapshots.len(), 8, "eight input snapshots");
    let label = window.target_next.expect("labeled window");
    for v in 0..ds.var_count() {
        let clean = ds.normalize(v, ds.series.get(plan.t_end + 1, plan.target as usize, v));
        assert!(
            (label[v] - clean).abs() < 1e-12,
            "label is the next-step state: {} vs {clean}",
            label[v]
        );
    }
    println!(
        "[criterion 6] PASS: 6:2:2 split, 8-step window predicting 1 step ahead, 3-hop \
         subgraphs, 50 km radius all hold as defaults"
    );
}

// ---------------------------------------------------------------------
// Criterion 7: bitwise reproducible training through the binary.
// ---------------------------------------------------------------------

#[test]
fn criterion_7_training_runs_are_byte_identical() {
    let tmp = tempfile::TempDir::new().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.json");
    let cfg = cfg.to_str().unwrap();
    let run = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_asgn"))
            .args(args)
            .output()
            .expect("binary spawns");
        assert!(
            out.status.success(),
            "asgn {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    let ds = tmp.path().join("data");
    let ds = ds.to_str().unwrap();
    run(&["simulate", "--config", cfg, "--out", ds]);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run(&["train", ds, "--config", cfg, "--out", a.to_str().unwrap()]);
    run(&["train", ds, "--config", cfg, "--out", b.to_str().unwrap()]);
    let ck_a = fs::read(a.join("checkpoint.bin")).unwrap();
    let ck_b = fs::read(b.join("checkpoint.bin")).unwrap();
    assert_eq!(ck_a, ck_b, "checkpoints differ between identical runs");
    assert_eq!(
        fs::read(a.join("losses.csv")).unwrap(),
        fs::read(b.join("losses.csv")).unwrap(),
        "loss curves differ between identical runs"
    );
    println!(
        "[criterion 7] PASS: identical config and seed reproduce checkpoint.bin ({} bytes) \
         and losses.csv bitwise",
        ck_a.len()
    );
}
