//! Euler–Maruyama solvers for `dX = b(t, X, law(X_t)) dt + dB`.
//!
//! Two routes to the law argument:
//!
//! * [`simulate_particles`]: the law at step `k` is the empirical measure of
//!   all `N` particles at step `k` (a synchronization point per step);
//! * [`picard_law_iteration`]: freeze a measure flow, solve the resulting
//!   ordinary SDE with [`solve_frozen_law`], replace the flow by the empirical
//!   law of the solution, and repeat with the same noise until successive
//!   flows are within `tol` in [`flow_distance`](crate::measure_flow::flow_distance).
//!
//! Both consume a stored [`NoiseBuffer`]; nothing is resampled.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drift::{Drift, LawStatistics};
use crate::measure_flow::{norm, EmpiricalMeasure, FlowSketch, MeasureFlow};
use crate::noise::NoiseBuffer;
use crate::stats::MeanEstimate;
use crate::{Error, Result};

const CHUNK: usize = 2048;

/// Uniform grid `t_k = k·T/M`, `k = 0..=M`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::param("T", "horizon must be positive and finite"));
        }
        if steps == 0 {
            return Err(Error::param("M", "need at least one step"));
        }
        Ok(TimeGrid { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// `t_k`; the last point is exactly `T`.
    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.horizon / self.steps as f64
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }

    /// Index of the grid point closest to `t`.
    pub fn index_of(&self, t: f64) -> usize {
        ((t / self.dt()).round() as usize).min(self.steps)
    }
}

/// Per-time law statistics of a measure flow, as seen by one drift.
#[derive(Debug, Clone, PartialEq)]
pub struct LawFlow {
    stats: Vec<LawStatistics>,
}

impl LawFlow {
    pub fn from_bundle(drift: &dyn Drift, bundle: &PathBundle) -> Self {
        LawFlow {
            stats: (0..=bundle.grid.steps())
                .into_par_iter()
                .map(|k| drift.law_statistics(&bundle.measure(k)))
                .collect(),
        }
    }

    pub fn from_flow(drift: &dyn Drift, flow: &MeasureFlow) -> Self {
        LawFlow {
            stats: flow
                .measures()
                .par_iter()
                .map(|m| drift.law_statistics(m))
                .collect(),
        }
    }

    /// Statistics of `δ_{x0}` at every grid point.
    pub fn point_mass(x0: &[f64], grid: &TimeGrid) -> Self {
        LawFlow {
            stats: vec![LawStatistics::point_mass(x0); grid.steps() + 1],
        }
    }

    pub fn at(&self, k: usize) -> &LawStatistics {
        &self.stats[k]
    }

    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }
}

/// `N` Euler paths on a [`TimeGrid`] together with the increments that drove them.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    x0: Vec<f64>,
    grid: TimeGrid,
    n_paths: usize,
    states: Vec<f64>,
    noise: Arc<NoiseBuffer>,
}

impl PathBundle {
    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn dim(&self) -> usize {
        self.x0.len()
    }

    pub fn noise(&self) -> &Arc<NoiseBuffer> {
        &self.noise
    }

    pub fn seed(&self) -> u64 {
        self.noise.seed()
    }

    /// `X_{t_k}` of `path`.
    #[inline]
    pub fn state(&self, k: usize, path: usize) -> &[f64] {
        let d = self.dim();
        let at = (k * self.n_paths + path) * d;
        &self.states[at..at + d]
    }

    /// All paths at step `k`, `N × d` row-major.
    pub fn states_at(&self, k: usize) -> &[f64] {
        let w = self.n_paths * self.dim();
        &self.states[k * w..(k + 1) * w]
    }

    /// One path, `(M + 1) × d` row-major.
    pub fn path(&self, path: usize) -> Vec<f64> {
        (0..=self.grid.steps)
            .flat_map(|k| self.state(k, path).iter().copied())
            .collect()
    }

    /// States and increments of one path.
    pub fn sample_path(&self, path: usize) -> SamplePath {
        let d = self.dim();
        SamplePath {
            dim: d,
            states: self.path(path),
            increments: (0..self.grid.steps)
                .flat_map(|k| self.noise.increment(k, path).iter().copied())
                .collect(),
        }
    }

    pub fn terminal(&self, path: usize) -> &[f64] {
        self.state(self.grid.steps, path)
    }

    pub fn measure(&self, k: usize) -> EmpiricalMeasure {
        EmpiricalMeasure::from_trusted(self.dim(), self.states_at(k).to_vec())
    }

    /// Empirical law at every grid point.
    pub fn flow(&self) -> MeasureFlow {
        MeasureFlow::from_trusted(
            self.grid.times(),
            (0..=self.grid.steps).map(|k| self.measure(k)).collect(),
        )
    }

    /// Componentwise ensemble mean at step `k`.
    pub fn mean_at(&self, k: usize, component: usize) -> MeanEstimate {
        let d = self.dim();
        let xs: Vec<f64> = self
            .states_at(k)
            .chunks_exact(d)
            .map(|s| s[component])
            .collect();
        MeanEstimate::from_samples(&xs)
    }

    /// `max_{path,k} (‖X_k − x0 − B_k‖ − bound·t_k)`; non-positive (up to
    /// rounding) whenever `‖b‖ ≤ bound`, since the Euler drift contribution
    /// telescopes to at most `bound·t_k`.
    pub fn max_drift_excess(&self, bound: f64) -> f64 {
        let d = self.dim();
        (0..self.n_paths)
            .into_par_iter()
            .map(|p| {
                let mut b = vec![0.0; d];
                let mut worst = f64::NEG_INFINITY;
                for k in 0..=self.grid.steps {
                    if k > 0 {
                        for (bc, inc) in b.iter_mut().zip(self.noise.increment(k - 1, p)) {
                            *bc += inc;
                        }
                    }
                    let x = self.state(k, p);
                    let gap: Vec<f64> = (0..d).map(|c| x[c] - self.x0[c] - b[c]).collect();
                    worst = worst.max(norm(&gap) - bound * self.grid.time(k));
                }
                worst
            })
            .reduce(|| f64::NEG_INFINITY, f64::max)
    }

    /// Samples of `sup_k ‖X_{t_k}‖^p`, one per path.
    pub fn sup_norm_powers(&self, p: f64) -> Vec<f64> {
        (0..self.n_paths)
            .map(|i| {
                (0..=self.grid.steps)
                    .map(|k| norm(self.state(k, i)))
                    .fold(0.0, f64::max)
                    .powf(p)
            })
            .collect()
    }

    /// Writes `states.bin`, `increments.bin` (little-endian f64, step-major)
    /// and `manifest.json`.
    pub fn write_dump(&self, dir: &Path, drift: serde_json::Value) -> Result<Vec<String>> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("states.bin"), to_le_bytes(&self.states))?;
        let incs: Vec<f64> = (0..self.grid.steps)
            .flat_map(|k| self.noise.step(k).iter().copied())
            .collect();
        fs::write(dir.join("increments.bin"), to_le_bytes(&incs))?;
        let manifest = BundleManifest {
            format_version: BUNDLE_FORMAT_VERSION,
            seed: self.seed(),
            n: self.n_paths,
            m: self.grid.steps,
            t: self.grid.horizon,
            d: self.dim(),
            x0: self.x0.clone(),
            drift,
            layout: "step-major [k][path][component], little-endian f64".into(),
        };
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(vec![
            "states.bin".into(),
            "increments.bin".into(),
            "manifest.json".into(),
        ])
    }

    pub fn read_dump(dir: &Path) -> Result<(Self, BundleManifest)> {
        let manifest: BundleManifest =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.format_version != BUNDLE_FORMAT_VERSION {
            return Err(Error::ShapeMismatch(format!(
                "unsupported bundle format version {}",
                manifest.format_version
            )));
        }
        let grid = TimeGrid::new(manifest.t, manifest.m)?;
        let (n, m, d) = (manifest.n, manifest.m, manifest.d);
        let states = from_le_bytes(&fs::read(dir.join("states.bin"))?);
        let incs = from_le_bytes(&fs::read(dir.join("increments.bin"))?);
        if states.len() != (m + 1) * n * d || incs.len() != m * n * d || manifest.x0.len() != d {
            return Err(Error::ShapeMismatch(
                "bundle files do not match manifest".into(),
            ));
        }
        let noise = NoiseBuffer::from_raw(manifest.seed, n, m, d, grid.dt(), incs);
        Ok((
            PathBundle {
                x0: manifest.x0.clone(),
                grid,
                n_paths: n,
                states,
                noise: Arc::new(noise),
            },
            manifest,
        ))
    }
}

/// One path's states `X_{t_0..t_M}` and increments `ΔB_0..ΔB_{M-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePath {
    dim: usize,
    states: Vec<f64>,
    increments: Vec<f64>,
}

impl SamplePath {
    pub fn new(dim: usize, states: Vec<f64>, increments: Vec<f64>) -> Result<Self> {
        if dim == 0
            || !states.len().is_multiple_of(dim)
            || states.len() / dim != increments.len() / dim + 1
            || !increments.len().is_multiple_of(dim)
        {
            return Err(Error::ShapeMismatch(
                "a path needs M+1 states and M increments of equal dimension".into(),
            ));
        }
        Ok(SamplePath {
            dim,
            states,
            increments,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn steps(&self) -> usize {
        self.increments.len() / self.dim
    }

    #[inline]
    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    #[inline]
    pub fn increment(&self, k: usize) -> &[f64] {
        &self.increments[k * self.dim..(k + 1) * self.dim]
    }
}

pub const BUNDLE_FORMAT_VERSION: u32 = 1;

/// JSON manifest written next to a [`PathBundle`] dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub seed: u64,
    pub n: usize,
    pub m: usize,
    pub t: f64,
    pub d: usize,
    pub x0: Vec<f64>,
    pub drift: serde_json::Value,
    pub layout: String,
}

fn to_le_bytes(xs: &[f64]) -> Vec<u8> {
    xs.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn from_le_bytes(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

fn check_noise(noise: &NoiseBuffer, x0: &[f64], grid: &TimeGrid) -> Result<()> {
    if noise.dim() != x0.len() || noise.n_steps() != grid.steps() {
        return Err(Error::ShapeMismatch(format!(
            "noise is (M={}, d={}), run needs (M={}, d={})",
            noise.n_steps(),
            noise.dim(),
            grid.steps(),
            x0.len()
        )));
    }
    if (noise.dt() - grid.dt()).abs() > 1e-12 * grid.dt() {
        return Err(Error::ShapeMismatch(
            "noise was drawn for a different step size".into(),
        ));
    }
    Ok(())
}

fn check_drift_dim(drift: &dyn Drift, d: usize) -> Result<()> {
    match drift.dim() {
        Some(dd) if dd != d => Err(Error::DimensionMismatch {
            expected: dd,
            found: d,
        }),
        _ => Ok(()),
    }
}

/// Shared Euler loop; `law_at(k, states_k)` supplies the law statistics for step `k`.
fn euler<F>(
    drift: &dyn Drift,
    x0: &[f64],
    grid: &TimeGrid,
    noise: &Arc<NoiseBuffer>,
    law_at: F,
) -> Result<PathBundle>
where
    F: Fn(usize, &[f64]) -> LawStatistics,
{
    let d = x0.len();
    let n = noise.n_paths();
    let w = n * d;
    let dt = grid.dt();
    let mut states = vec![0.0; (grid.steps() + 1) * w];
    for p in 0..n {
        states[p * d..(p + 1) * d].copy_from_slice(x0);
    }
    for k in 0..grid.steps() {
        let (done, rest) = states.split_at_mut((k + 1) * w);
        let current = &done[k * w..];
        let next = &mut rest[..w];
        let law = law_at(k, current);
        let t = grid.time(k);
        let incs = noise.step(k);
        next.par_chunks_mut(CHUNK * d)
            .zip(current.par_chunks(CHUNK * d))
            .zip(incs.par_chunks(CHUNK * d))
            .for_each(|((nx, cur), inc)| {
                let mut b = vec![0.0; d];
                for ((x1, x), db) in nx
                    .chunks_exact_mut(d)
                    .zip(cur.chunks_exact(d))
                    .zip(inc.chunks_exact(d))
                {
                    drift.eval(t, x, &law, &mut b);
                    for c in 0..d {
                        x1[c] = x[c] + b[c] * dt + db[c];
                    }
                }
            });
        if !next.par_iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteState { step: k + 1 });
        }
    }
    Ok(PathBundle {
        x0: x0.to_vec(),
        grid: *grid,
        n_paths: n,
        states,
        noise: noise.clone(),
    })
}

/// Interacting particle system: the law at step `k` is the empirical measure
/// of the `N` particles at step `k`.
pub fn simulate_particles(
    drift: &dyn Drift,
    x0: &[f64],
    grid: &TimeGrid,
    n: usize,
    seed: u64,
) -> Result<(PathBundle, MeasureFlow)> {
    if n < 2 {
        return Err(Error::param(
            "N",
            "particle systems need at least 2 particles",
        ));
    }
    let noise = Arc::new(NoiseBuffer::generate(
        seed,
        n,
        grid.steps(),
        x0.len(),
        grid.dt(),
    ));
    simulate_particles_with_noise(drift, x0, grid, &noise)
}

pub fn simulate_particles_with_noise(
    drift: &dyn Drift,
    x0: &[f64],
    grid: &TimeGrid,
    noise: &Arc<NoiseBuffer>,
) -> Result<(PathBundle, MeasureFlow)> {
    check_noise(noise, x0, grid)?;
    check_drift_dim(drift, x0.len())?;
    let d = x0.len();
    let bundle = euler(drift, x0, grid, noise, |_, states| {
        drift.law_statistics(&EmpiricalMeasure::from_trusted(d, states.to_vec()))
    })?;
    let flow = bundle.flow();
    Ok((bundle, flow))
}

/// Euler solution of `dY = b(t, Y, flow(t)) dt + dB` on the stored increments.
pub fn solve_frozen_law(
    drift: &dyn Drift,
    flow: &MeasureFlow,
    x0: &[f64],
    grid: &TimeGrid,
    noise: &Arc<NoiseBuffer>,
) -> Result<PathBundle> {
    check_flow_grid(flow, grid)?;
    if flow.dim() != x0.len() {
        return Err(Error::DimensionMismatch {
            expected: x0.len(),
            found: flow.dim(),
        });
    }
    let law = LawFlow::from_flow(drift, flow);
    solve_frozen_law_stats(drift, &law, x0, grid, noise)
}

/// As [`solve_frozen_law`], with the law already reduced to statistics.
pub fn solve_frozen_law_stats(
    drift: &dyn Drift,
    law: &LawFlow,
    x0: &[f64],
    grid: &TimeGrid,
    noise: &Arc<NoiseBuffer>,
) -> Result<PathBundle> {
    check_noise(noise, x0, grid)?;
    check_drift_dim(drift, x0.len())?;
    if law.len() != grid.steps() + 1 {
        return Err(Error::GridMismatch(format!(
            "law has {} points, grid {}",
            law.len(),
            grid.steps() + 1
        )));
    }
    euler(drift, x0, grid, noise, |k, _| law.at(k).clone())
}

fn check_flow_grid(flow: &MeasureFlow, grid: &TimeGrid) -> Result<()> {
    let times = grid.times();
    let same = flow.len() == times.len()
        && flow
            .grid()
            .iter()
            .zip(&times)
            .all(|(a, b)| (a - b).abs() <= 1e-12 * grid.horizon());
    if same {
        Ok(())
    } else {
        Err(Error::GridMismatch(format!(
            "flow has {} points on [0, {}], grid has {} on [0, {}]",
            flow.len(),
            flow.horizon(),
            times.len(),
            grid.horizon()
        )))
    }
}

/// Stopping rule for [`picard_law_iteration`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PicardConfig {
    pub tol: f64,
    pub max_iter: usize,
    /// Iterations run even when the tolerance is met earlier.
    #[serde(default = "one")]
    pub min_iter: usize,
}

fn one() -> usize {
    1
}

impl Default for PicardConfig {
    fn default() -> Self {
        PicardConfig {
            tol: 1e-3,
            max_iter: 25,
            min_iter: 1,
        }
    }
}

/// Result of a Picard run: the paths solved against the previous flow, the
/// law statistics of their empirical flow, and the distance trace.
#[derive(Debug, Clone)]
pub struct PicardOutcome {
    pub law: LawFlow,
    pub bundle: PathBundle,
    /// `trace[i] = flow_distance(μ^{i+1}, μ^i)`.
    pub trace: Vec<f64>,
}

impl PicardOutcome {
    /// Empirical flow of the final paths.
    pub fn flow(&self) -> MeasureFlow {
        self.bundle.flow()
    }
}

/// Fixed-point iteration on the measure flow with noise drawn from `seed`.
pub fn picard_law_iteration(
    drift: &dyn Drift,
    x0: &[f64],
    grid: &TimeGrid,
    n: usize,
    config: &PicardConfig,
    seed: u64,
) -> Result<PicardOutcome> {
    if n < 1 {
        return Err(Error::param("N", "need at least one path"));
    }
    let noise = Arc::new(NoiseBuffer::generate(
        seed,
        n,
        grid.steps(),
        x0.len(),
        grid.dt(),
    ));
    picard_with_noise(drift, x0, grid, &noise, None, config)
}

/// Picard iteration on given noise. Without `initial`, `μ⁰` is the law of the
/// driftless ensemble `x0 + B` built from the same increments.
pub fn picard_with_noise(
    drift: &dyn Drift,
    x0: &[f64],
    grid: &TimeGrid,
    noise: &Arc<NoiseBuffer>,
    initial: Option<&MeasureFlow>,
    config: &PicardConfig,
) -> Result<PicardOutcome> {
    if !(config.tol > 0.0) {
        return Err(Error::param("tol", "must be positive"));
    }
    if config.max_iter == 0 {
        return Err(Error::param("max_iter", "must be at least 1"));
    }
    check_noise(noise, x0, grid)?;
    check_drift_dim(drift, x0.len())?;
    if config.min_iter > config.max_iter {
        return Err(Error::param("min_iter", "must not exceed max_iter"));
    }
    let (mut law, mut sketch) = match initial {
        Some(flow) => {
            check_flow_grid(flow, grid)?;
            if flow.n_atoms() != noise.n_paths() || flow.dim() != x0.len() {
                return Err(Error::ShapeMismatch(
                    "initial flow must have the same (N, d) as the noise".into(),
                ));
            }
            (LawFlow::from_flow(drift, flow), FlowSketch::of(flow))
        }
        None => {
            let free = driftless(x0, grid, noise);
            (
                LawFlow::from_bundle(drift, &free),
                FlowSketch::of_states(free.n_paths, x0.len(), &free.states),
            )
        }
    };
    let mut trace = Vec::new();
    loop {
        let bundle = solve_frozen_law_stats(drift, &law, x0, grid, noise)?;
        let dist = sketch.advance(&bundle.states);
        trace.push(dist);
        law = LawFlow::from_bundle(drift, &bundle);
        let converged = dist < config.tol && trace.len() >= config.min_iter;
        if converged || trace.len() >= config.max_iter {
            let outcome = PicardOutcome {
                law,
                bundle,
                trace: trace.clone(),
            };
            return if converged {
                Ok(outcome)
            } else {
                Err(Error::PicardNotConverged {
                    trace,
                    outcome: Box::new(outcome),
                })
            };
        }
    }
}

/// `x0 + B` on the stored increments.
pub fn driftless(x0: &[f64], grid: &TimeGrid, noise: &Arc<NoiseBuffer>) -> PathBundle {
    let d = x0.len();
    let n = noise.n_paths();
    let w = n * d;
    let mut states = vec![0.0; (grid.steps() + 1) * w];
    for p in 0..n {
        states[p * d..(p + 1) * d].copy_from_slice(x0);
    }
    for k in 0..grid.steps() {
        let (done, rest) = states.split_at_mut((k + 1) * w);
        let inc = noise.step(k);
        for ((x1, x), db) in rest[..w].iter_mut().zip(&done[k * w..]).zip(inc) {
            *x1 = x + db;
        }
    }
    PathBundle {
        x0: x0.to_vec(),
        grid: *grid,
        n_paths: n,
        states,
        noise: noise.clone(),
    }
}
