//! Synthetic dataset generator: an advection-diffusion field over a small
//! lat/lon grid, observed by moving and stationary platforms.
//!
//! The dynamics are deliberately simple enough to check against closed
//! forms (circular shifts, stencil iteration, conserved means) while
//! still producing the data regime the model targets: persistent grid
//! nodes plus observation nodes whose locations and mix change each step.
//!
//! Units: velocities are grid cells per step and the diffusion
//! coefficient is cells^2 per step, decoupling the dynamics from the map
//! scale. `dt_hours` is metadata describing what one step represents.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{KeyedNoise, NoiseKey, NoiseKind, NoiseSource};
use rand::Rng;

pub const DEFAULT_VAR_NAMES: [&str; 4] = ["U", "V", "T", "Q"];

fn default_var_names() -> Vec<String> {
    DEFAULT_VAR_NAMES.iter().map(|s| s.to_string()).collect()
}

fn default_var_means() -> Vec<f64> {
    vec![10.0, 5.0, 285.0, 0.008]
}

fn default_var_scales() -> Vec<f64> {
    vec![5.0, 3.0, 8.0, 0.003]
}

fn default_dt_hours() -> f64 {
    6.0
}

fn default_bumps() -> usize {
    30
}

/// Platform trajectory model. Family encoders are shared per variant:
/// every sweeping platform uses the "sweeping" encoder, every stationary
/// one the "stationary" encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Motion {
    Stationary {
        sites: usize,
    },
    Sweeping {
        start_lon_deg: f64,
        lon_speed_deg_per_step: f64,
        swath_points: usize,
        lat_lo_deg: f64,
        lat_hi_deg: f64,
    },
}

impl Motion {
    pub fn family_name(&self) -> &'static str {
        match self {
            Motion::Stationary { .. } => "stationary",
            Motion::Sweeping { .. } => "sweeping",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlatformSpec {
    pub name: String,
    pub motion: Motion,
    /// Subset of variable names this platform reports.
    pub variables: Vec<String>,
    /// Measurement noise in units of the variable's configured scale.
    pub noise_sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub grid_nx: usize,
    pub grid_ny: usize,
    pub lat0_deg: f64,
    pub lon0_deg: f64,
    /// Grid spacing in degrees along both axes.
    pub cell_deg: f64,
    #[serde(default = "default_dt_hours")]
    pub dt_hours: f64,
    pub steps: usize,
    /// Advection speed in cells per step.
    pub advect_speed_cells: f64,
    /// Initial advection direction, degrees counterclockwise from +x (east).
    #[serde(default)]
    pub advect_angle0_deg: f64,
    /// Full-rotation period of the advection direction in steps; 0 keeps
    /// the direction fixed.
    #[serde(default)]
    pub advect_rot_period_steps: f64,
    /// Diffusion coefficient in cells^2 per step.
    pub diffusion_cells2: f64,
    /// Correlation length of the initial condition, in cells.
    pub init_corr_cells: f64,
    #[serde(default = "default_bumps")]
    pub init_bumps: usize,
    #[serde(default = "default_var_names")]
    pub var_names: Vec<String>,
    #[serde(default = "default_var_means")]
    pub var_means: Vec<f64>,
    #[serde(default = "default_var_scales")]
    pub var_scales: Vec<f64>,
    /// Background-error noise applied to grid node input features at read
    /// time, in z-score units. Labels and stored states stay clean.
    #[serde(default)]
    pub grid_noise_sigma: f64,
    pub platforms: Vec<PlatformSpec>,
    pub seed: u64,
}

impl SimConfig {
    pub fn cells(&self) -> usize {
        self.grid_nx * self.grid_ny
    }

    pub fn var_count(&self) -> usize {
        self.var_names.len()
    }

    /// Domain extent in degrees along lon (x) and lat (y): the span of
    /// cell centers.
    pub fn extent_deg(&self) -> (f64, f64) {
        (
            (self.grid_nx - 1) as f64 * self.cell_deg,
            (self.grid_ny - 1) as f64 * self.cell_deg,
        )
    }

    /// Distinct platform families in first-appearance order. Encoders and
    /// reconstruction heads are shared per family, not per platform.
    pub fn family_table(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        for p in &self.platforms {
            let name = p.motion.family_name();
            if !out.contains(&name) {
                out.push(name);
            }
        }
        out
    }

    /// Family index of a platform, by platform name.
    pub fn family_of_platform(&self, platform: &str) -> Option<usize> {
        let table = self.family_table();
        let spec = self.platforms.iter().find(|p| p.name == platform)?;
        table.iter().position(|&f| f == spec.motion.family_name())
    }

    /// Advection velocity (u, v) in cells/step at step t.
    pub fn velocity_at(&self, t: usize) -> (f64, f64) {
        let mut angle = self.advect_angle0_deg.to_radians();
        if self.advect_rot_period_steps > 0.0 {
            angle += 2.0 * std::f64::consts::PI * t as f64 / self.advect_rot_period_steps;
        }
        (
            self.advect_speed_cells * angle.cos(),
            self.advect_speed_cells * angle.sin(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_nx < 2 || self.grid_ny < 2 {
            return Err(Error::config("grid_nx and grid_ny must be at least 2"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps must be positive"));
        }
        if self.cell_deg <= 0.0 {
            return Err(Error::config("cell_deg must be positive"));
        }
        if !(self.var_names.len() == self.var_means.len()
            && self.var_names.len() == self.var_scales.len())
        {
            return Err(Error::config(
                "var_names, var_means, var_scales must have equal lengths",
            ));
        }
        if self.var_names.is_empty() {
            return Err(Error::config("at least one variable is required"));
        }
        if self.init_corr_cells <= 0.0 {
            return Err(Error::config("init_corr_cells must be positive"));
        }
        if self.grid_noise_sigma < 0.0 {
            return Err(Error::config("grid_noise_sigma must be >= 0"));
        }
        // Explicit diffusion stability: r = kappa * dt * (1/dx^2 + 1/dy^2)
        // with dt = 1 step and dx = dy = 1 cell.
        let r = self.diffusion_cells2 * 2.0;
        if r > 0.5 {
            return Err(Error::config(format!(
                "diffusion number {r:.3} exceeds 0.5 (diffusion_cells2 = {}, dt = 1 step, \
                 dx = dy = 1 cell); reduce diffusion_cells2 to at most 0.25",
                self.diffusion_cells2
            )));
        }
        if self.diffusion_cells2 < 0.0 {
            return Err(Error::config("diffusion_cells2 must be >= 0"));
        }
        for p in &self.platforms {
            if p.variables.is_empty() {
                return Err(Error::config(format!(
                    "platform {} reports no variables",
                    p.name
                )));
            }
            for v in &p.variables {
                if !self.var_names.contains(v) {
                    return Err(Error::config(format!(
                        "platform {} reports unknown variable {v}",
                        p.name
                    )));
                }
            }
            if p.noise_sigma < 0.0 {
                return Err(Error::config(format!(
                    "platform {} has negative noise_sigma",
                    p.name
                )));
            }
            match p.motion {
                Motion::Stationary { sites } if sites == 0 => {
                    return Err(Error::config(format!("platform {} has zero sites", p.name)));
                }
                Motion::Sweeping { swath_points, .. } if swath_points == 0 => {
                    return Err(Error::config(format!(
                        "platform {} has zero swath points",
                        p.name
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Dense ground-truth series, shape [step][cell][variable], cell-major
/// with cell = iy * nx + ix. Values are exactly representable as f32 so
/// the on-disk form round-trips bit-for-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSeries {
    pub nx: usize,
    pub ny: usize,
    pub vars: usize,
    pub steps: usize,
    data: Vec<f64>,
}

impl FieldSeries {
    pub fn new(nx: usize, ny: usize, vars: usize, steps: usize) -> Self {
        FieldSeries {
            nx,
            ny,
            vars,
            steps,
            data: vec![0.0; nx * ny * vars * steps],
        }
    }

    #[inline]
    fn index(&self, t: usize, cell: usize, var: usize) -> usize {
        (t * self.nx * self.ny + cell) * self.vars + var
    }

    #[inline]
    pub fn get(&self, t: usize, cell: usize, var: usize) -> f64 {
        self.data[self.index(t, cell, var)]
    }

    /// Store with rounding to f32 precision.
    #[inline]
    pub fn set(&mut self, t: usize, cell: usize, var: usize, v: f64) {
        let i = self.index(t, cell, var);
        self.data[i] = v as f32 as f64;
    }

    pub fn step_slice(&self, t: usize) -> &[f64] {
        let n = self.nx * self.ny * self.vars;
        &self.data[t * n..(t + 1) * n]
    }
}

/// One semi-Lagrangian advection + explicit diffusion update of a single
/// variable's field, periodic in both directions. Exposed so tests can
/// drive the raw f64 dynamics (e.g. for conservation checks) without the
/// storage rounding of [`simulate_field`].
pub fn advect_diffuse_step(
    field: &[f64],
    nx: usize,
    ny: usize,
    u_cells: f64,
    v_cells: f64,
    kappa: f64,
) -> Vec<f64> {
    assert_eq!(field.len(), nx * ny);
    let mut advected = vec![0.0; nx * ny];

    // Departure point offset is uniform over the grid: the bilinear
    // gather weights are the same for every cell.
    let sx = -u_cells;
    let sy = -v_cells;
    let fx = sx.floor();
    let fy = sy.floor();
    let wx = sx - fx;
    let wy = sy - fy;
    let ix0 = fx as i64;
    let iy0 = fy as i64;
    let wrap = |i: i64, n: usize| -> usize { (i.rem_euclid(n as i64)) as usize };

    for iy in 0..ny {
        let y0 = wrap(iy as i64 + iy0, ny);
        let y1 = wrap(iy as i64 + iy0 + 1, ny);
        for ix in 0..nx {
            let x0 = wrap(ix as i64 + ix0, nx);
            let x1 = wrap(ix as i64 + ix0 + 1, nx);
            advected[iy * nx + ix] = (1.0 - wx) * (1.0 - wy) * field[y0 * nx + x0]
                + wx * (1.0 - wy) * field[y0 * nx + x1]
                + (1.0 - wx) * wy * field[y1 * nx + x0]
                + wx * wy * field[y1 * nx + x1];
        }
    }

    if kappa == 0.0 {
        return advected;
    }
    let mut out = vec![0.0; nx * ny];
    for iy in 0..ny {
        let yn = (iy + ny - 1) % ny;
        let ys = (iy + 1) % ny;
        for ix in 0..nx {
            let xw = (ix + nx - 1) % nx;
            let xe = (ix + 1) % nx;
            let c = advected[iy * nx + ix];
            let lap = advected[yn * nx + ix]
                + advected[ys * nx + ix]
                + advected[iy * nx + xw]
                + advected[iy * nx + xe]
                - 4.0 * c;
            out[iy * nx + ix] = c + kappa * lap;
        }
    }
    out
}

/// Synthesize the initial condition for one variable: a sum of randomly
/// placed periodic Gaussian bumps, standardized to the configured mean
/// and scale.
fn initial_field(cfg: &SimConfig, var: usize, noise: &KeyedNoise) -> Vec<f64> {
    let (nx, ny) = (cfg.grid_nx, cfg.grid_ny);
    let mut rng = noise.stream(NoiseKey::new(NoiseKind::SimInit, 0, 0, var as u64));
    let mut bump = vec![0.0; nx * ny];
    let ell = cfg.init_corr_cells;
    for _ in 0..cfg.init_bumps {
        let cx: f64 = rng.random_range(0.0..nx as f64);
        let cy: f64 = rng.random_range(0.0..ny as f64);
        let amp: f64 = rng.random_range(-1.0..1.0);
        for iy in 0..ny {
            // periodic (torus) distance on each axis
            let dy = {
                let d = (iy as f64 - cy).abs();
                d.min(ny as f64 - d)
            };
            for ix in 0..nx {
                let dx = {
                    let d = (ix as f64 - cx).abs();
                    d.min(nx as f64 - d)
                };
                bump[iy * nx + ix] += amp * (-(dx * dx + dy * dy) / (2.0 * ell * ell)).exp();
            }
        }
    }
    let n = bump.len() as f64;
    let mean = bump.iter().sum::<f64>() / n;
    let var_b = bump.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / n;
    let std_b = var_b.sqrt();
    let (m, s) = (cfg.var_means[var], cfg.var_scales[var]);
    if std_b < 1e-12 {
        return vec![m; bump.len()];
    }
    bump.iter().map(|&b| m + s * (b - mean) / std_b).collect()
}

/// Run the full simulation. The returned series is rounded to f32
/// precision per step (matching the on-disk format) while the internal
/// time stepping stays in f64.
pub fn simulate_field(cfg: &SimConfig) -> Result<FieldSeries> {
    cfg.validate()?;
    let noise = KeyedNoise::new(cfg.seed);
    let (nx, ny, vars) = (cfg.grid_nx, cfg.grid_ny, cfg.var_count());
    let mut series = FieldSeries::new(nx, ny, vars, cfg.steps);

    let mut state: Vec<Vec<f64>> = (0..vars).map(|v| initial_field(cfg, v, &noise)).collect();
    for t in 0..cfg.steps {
        for v in 0..vars {
            for cell in 0..nx * ny {
                series.set(t, cell, v, state[v][cell]);
            }
        }
        if t + 1 < cfg.steps {
            let (u, vv) = cfg.velocity_at(t);
            for v in 0..vars {
                state[v] = advect_diffuse_step(&state[v], nx, ny, u, vv, cfg.diffusion_cells2);
            }
        }
    }
    Ok(series)
}

/// Raw observation record as stored in `obs.jsonl`. Values are physical
/// units, rounded to f32 precision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObsRecord {
    pub t: usize,
    pub id: u64,
    pub lat: f64,
    pub lon: f64,
    pub platform: String,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Bilinear interpolation of a stored field at fractional cell
/// coordinates (x along lon, y along lat), clamped to the grid hull.
pub fn bilinear_at(series: &FieldSeries, t: usize, x: f64, y: f64, var: usize) -> f64 {
    let clamp = |v: f64, hi: usize| v.max(0.0).min((hi - 1) as f64);
    let x = clamp(x, series.nx);
    let y = clamp(y, series.ny);
    let x0 = (x.floor() as usize).min(series.nx - 2);
    let y0 = (y.floor() as usize).min(series.ny - 2);
    let wx = x - x0 as f64;
    let wy = y - y0 as f64;
    let f = |ix: usize, iy: usize| series.get(t, iy * series.nx + ix, var);
    (1.0 - wx) * (1.0 - wy) * f(x0, y0)
        + wx * (1.0 - wy) * f(x0 + 1, y0)
        + (1.0 - wx) * wy * f(x0, y0 + 1)
        + wx * wy * f(x0 + 1, y0 + 1)
}

/// Wrap an offset into [0, width). Used by the sweeping motion model.
fn wrap_offset(x: f64, width: f64) -> f64 {
    x.rem_euclid(width)
}

/// Footprint locations of one platform at step t, as fractional cell
/// coordinates (x, y). Points outside the grid hull are dropped.
fn platform_footprint(cfg: &SimConfig, spec_idx: usize, t: usize, noise: &KeyedNoise) -> Vec<(f64, f64)> {
    let spec = &cfg.platforms[spec_idx];
    let (ext_x, ext_y) = ((cfg.grid_nx - 1) as f64, (cfg.grid_ny - 1) as f64);
    match &spec.motion {
        Motion::Stationary { sites } => {
            // Sites are fixed for the whole run: the stream key ignores t.
            let mut rng = noise.stream(NoiseKey::new(
                NoiseKind::SimPlatform,
                0,
                spec_idx as u64,
                0,
            ));
            (0..*sites)
                .map(|_| {
                    (
                        rng.random_range(0.0..ext_x),
                        rng.random_range(0.0..ext_y),
                    )
                })
                .collect()
        }
        Motion::Sweeping {
            start_lon_deg,
            lon_speed_deg_per_step,
            swath_points,
            lat_lo_deg,
            lat_hi_deg,
        } => {
            let width_deg = ext_x * cfg.cell_deg;
            let lon = cfg.lon0_deg
                + wrap_offset(
                    start_lon_deg - cfg.lon0_deg + lon_speed_deg_per_step * t as f64,
                    width_deg,
                );
            let x = (lon - cfg.lon0_deg) / cfg.cell_deg;
            let n = *swath_points;
            (0..n)
                .filter_map(|i| {
                    let frac = if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
                    let lat = lat_lo_deg + frac * (lat_hi_deg - lat_lo_deg);
                    let y = (lat - cfg.lat0_deg) / cfg.cell_deg;
                    if (0.0..=ext_y).contains(&y) && (0.0..=ext_x).contains(&x) {
                        Some((x, y))
                    } else {
                        None
                    }
                })
                .collect()
        }
    }
}

/// Observations made by every platform at step t. Ids start at the grid
/// node count and restart every step.
pub fn sample_observations(
    series: &FieldSeries,
    cfg: &SimConfig,
    t: usize,
    noise: &KeyedNoise,
) -> Vec<ObsRecord> {
    assert!(t < series.steps, "step {t} out of range");
    let vars = cfg.var_count();
    let mut out = Vec::new();
    let mut next_id = cfg.cells() as u64;
    for (pi, spec) in cfg.platforms.iter().enumerate() {
        let mask: Vec<bool> = cfg
            .var_names
            .iter()
            .map(|name| spec.variables.contains(name))
            .collect();
        for (pt_idx, (x, y)) in platform_footprint(cfg, pi, t, noise).into_iter().enumerate() {
            let mut values = vec![0.0; vars];
            for (v, valid) in mask.iter().enumerate() {
                if !valid {
                    continue;
                }
                let truth = bilinear_at(series, t, x, y, v);
                let eta = noise.normal(NoiseKey::new(
                    NoiseKind::ObsError,
                    t as u64,
                    pi as u64,
                    (pt_idx * vars + v) as u64,
                ));
                let noisy = truth + spec.noise_sigma * cfg.var_scales[v] * eta;
                values[v] = noisy as f32 as f64;
            }
            out.push(ObsRecord {
                t,
                id: next_id,
                lat: cfg.lat0_deg + y * cfg.cell_deg,
                lon: cfg.lon0_deg + x * cfg.cell_deg,
                platform: spec.name.clone(),
                values,
                mask: mask.clone(),
            });
            next_id += 1;
        }
    }
    out
}

/// Per-variable normalization statistics, computed on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Chronological split boundaries in steps: train = [0, train_end),
/// val = [train_end, val_end), test = [val_end, steps).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBounds {
    pub train_end: usize,
    pub val_end: usize,
}

impl SplitBounds {
    /// The 6:2:2 chronological split.
    pub fn six_two_two(steps: usize) -> Self {
        SplitBounds {
            train_end: steps * 6 / 10,
            val_end: steps * 8 / 10,
        }
    }

    pub fn range(&self, split: Split, steps: usize) -> std::ops::Range<usize> {
        match split {
            Split::Train => 0..self.train_end,
            Split::Val => self.train_end..self.val_end,
            Split::Test => self.val_end..steps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split {other:?}"))),
        }
    }
}

/// `meta.json` payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub config: SimConfig,
    pub norm: NormStats,
    pub split: SplitBounds,
    pub grid_count: usize,
}

/// In-memory dataset: metadata, truth series, and per-step observations.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub series: FieldSeries,
    pub obs_by_step: Vec<Vec<ObsRecord>>,
}

impl Dataset {
    pub fn steps(&self) -> usize {
        self.meta.config.steps
    }

    pub fn grid_count(&self) -> usize {
        self.meta.grid_count
    }

    pub fn var_count(&self) -> usize {
        self.meta.config.var_count()
    }

    /// Center coordinates of grid cell `id` (= iy * nx + ix).
    pub fn cell_latlon(&self, id: usize) -> (f64, f64) {
        let cfg = &self.meta.config;
        let ix = id % cfg.grid_nx;
        let iy = id / cfg.grid_nx;
        (
            cfg.lat0_deg + iy as f64 * cfg.cell_deg,
            cfg.lon0_deg + ix as f64 * cfg.cell_deg,
        )
    }

    /// z-score a physical value of variable `var`.
    pub fn normalize(&self, var: usize, physical: f64) -> f64 {
        (physical - self.meta.norm.mean[var]) / self.meta.norm.std[var]
    }

    /// Invert the z-scoring.
    pub fn denormalize(&self, var: usize, z: f64) -> f64 {
        z * self.meta.norm.std[var] + self.meta.norm.mean[var]
    }
}

fn train_split_stats(series: &FieldSeries, split: SplitBounds) -> NormStats {
    let vars = series.vars;
    let cells = series.nx * series.ny;
    let n = (split.train_end * cells) as f64;
    let mut mean = vec![0.0; vars];
    for t in 0..split.train_end {
        for cell in 0..cells {
            for v in 0..vars {
                mean[v] += series.get(t, cell, v);
            }
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; vars];
    for t in 0..split.train_end {
        for cell in 0..cells {
            for v in 0..vars {
                var[v] += (series.get(t, cell, v) - mean[v]).powi(2);
            }
        }
    }
    let std = var
        .iter()
        .map(|&s| {
            let sd = (s / n).sqrt();
            if sd < 1e-9 {
                1.0
            } else {
                sd
            }
        })
        .collect();
    NormStats { mean, std }
}

/// Simulate, sample observations, and compute training-split
/// normalization, all in memory.
pub fn build_dataset(cfg: &SimConfig) -> Result<Dataset> {
    let series = simulate_field(cfg)?;
    let noise = KeyedNoise::new(cfg.seed);
    let obs_by_step: Vec<Vec<ObsRecord>> = (0..cfg.steps)
        .map(|t| sample_observations(&series, cfg, t, &noise))
        .collect();
    let split = SplitBounds::six_two_two(cfg.steps);
    let meta = DatasetMeta {
        config: cfg.clone(),
        norm: train_split_stats(&series, split),
        split,
        grid_count: cfg.cells(),
    };
    Ok(Dataset {
        meta,
        series,
        obs_by_step,
    })
}

/// Generate a complete dataset directory from a config: simulate, sample
/// observations, compute training-split normalization, and write.
pub fn generate_dataset(cfg: &SimConfig, dir: &Path) -> Result<Dataset> {
    let ds = build_dataset(cfg)?;
    write_dataset(&ds, dir)?;
    Ok(ds)
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let io_err = |p: &PathBuf| {
        let p = p.clone();
        move |e: std::io::Error| Error::io(p, e)
    };

    let meta_path = dir.join("meta.json");
    let meta_text = serde_json::to_string_pretty(&ds.meta)?;
    fs::write(&meta_path, meta_text).map_err(io_err(&meta_path))?;

    let grid_path = dir.join("grid.csv");
    let mut grid_out = String::from("id,lat,lon\n");
    for id in 0..ds.grid_count() {
        let (lat, lon) = ds.cell_latlon(id);
        grid_out.push_str(&format!("{id},{lat},{lon}\n"));
    }
    fs::write(&grid_path, grid_out).map_err(io_err(&grid_path))?;

    let states_path = dir.join("states.bin");
    let mut w = BufWriter::new(fs::File::create(&states_path).map_err(io_err(&states_path))?);
    for t in 0..ds.series.steps {
        for &v in ds.series.step_slice(t) {
            w.write_all(&(v as f32).to_le_bytes())
                .map_err(io_err(&states_path))?;
        }
    }
    w.flush().map_err(io_err(&states_path))?;

    let obs_path = dir.join("obs.jsonl");
    let mut w = BufWriter::new(fs::File::create(&obs_path).map_err(io_err(&obs_path))?);
    for step in &ds.obs_by_step {
        for rec in step {
            serde_json::to_writer(&mut w, rec)?;
            w.write_all(b"\n").map_err(io_err(&obs_path))?;
        }
    }
    w.flush().map_err(io_err(&obs_path))?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::dataset(&meta_path, format!("bad meta.json: {e}")))?;
    meta.config.validate()?;

    let cfg = &meta.config;
    let (nx, ny, vars, steps) = (cfg.grid_nx, cfg.grid_ny, cfg.var_count(), cfg.steps);

    let states_path = dir.join("states.bin");
    let mut bytes = Vec::new();
    fs::File::open(&states_path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(&states_path, e))?;
    let want = steps * nx * ny * vars * 4;
    if bytes.len() != want {
        return Err(Error::dataset(
            &states_path,
            format!(
                "expected {want} bytes ({steps} steps x {} cells x {vars} vars x 4), found {}",
                nx * ny,
                bytes.len()
            ),
        ));
    }
    let mut series = FieldSeries::new(nx, ny, vars, steps);
    for t in 0..steps {
        for cell in 0..nx * ny {
            for v in 0..vars {
                let off = ((t * nx * ny + cell) * vars + v) * 4;
                let raw = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
                if !raw.is_finite() {
                    return Err(Error::dataset(
                        &states_path,
                        format!("non-finite value at step {t} cell {cell} var {v}"),
                    ));
                }
                series.set(t, cell, v, raw as f64);
            }
        }
    }

    let obs_path = dir.join("obs.jsonl");
    let file = fs::File::open(&obs_path).map_err(|e| Error::io(&obs_path, e))?;
    let mut obs_by_step: Vec<Vec<ObsRecord>> = vec![Vec::new(); steps];
    for (line_no, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&obs_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ObsRecord = serde_json::from_str(&line).map_err(|e| {
            Error::dataset(&obs_path, format!("record {}: {e}", line_no + 1))
        })?;
        if rec.t >= steps {
            return Err(Error::dataset(
                &obs_path,
                format!("record {}: step {} out of range", line_no + 1, rec.t),
            ));
        }
        if rec.values.len() != vars || rec.mask.len() != vars {
            return Err(Error::dataset(
                &obs_path,
                format!("record {}: expected {vars}-wide values and mask", line_no + 1),
            ));
        }
        obs_by_step[rec.t].push(rec);
    }

    Ok(Dataset {
        meta,
        series,
        obs_by_step,
    })
}
