//! Empirical probability measures, time-indexed measure flows, and the
//! Kantorovich (Wasserstein-1) distance between equal-mass clouds.
//!
//! For two clouds of `N` equally weighted atoms an optimal transport plan can
//! be taken to be a permutation, so the exact distance is a minimum-cost
//! perfect matching. That is solved exactly up to [`EXACT_LIMIT`] atoms; above
//! it a sliced estimate over random projections is returned and flagged as
//! approximate. In one dimension the distance is always exact: the mean
//! absolute difference of the sorted samples.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::stats::pairwise_sum;
use crate::{Error, Result};

/// Largest atom count solved by exact matching.
pub const EXACT_LIMIT: usize = 512;
/// Number of projections in sliced mode.
pub const SLICED_PROJECTIONS: usize = 64;
const PROJECTION_SEED: u64 = 0x5e_ed0f_d15c;

/// `N` atoms in `ℝ^d` with mass `1/N` each, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    atoms: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(dim: usize, atoms: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidMeasure("dimension must be positive".into()));
        }
        if atoms.is_empty() || !atoms.len().is_multiple_of(dim) {
            return Err(Error::InvalidMeasure(format!(
                "{} coordinates do not form a non-empty set of {dim}-dimensional atoms",
                atoms.len()
            )));
        }
        if let Some(i) = atoms.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidMeasure(format!(
                "atom {} has a non-finite coordinate",
                i / dim
            )));
        }
        Ok(EmpiricalMeasure { dim, atoms })
    }

    /// Build from a list of points.
    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let dim = points.first().map_or(0, Vec::len);
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::InvalidMeasure("points of mixed dimension".into()));
        }
        Self::new(dim, points.concat())
    }

    /// `n` atoms all at `point`: the empirical version of a Dirac mass.
    pub fn point_mass(point: &[f64], n: usize) -> Result<Self> {
        Self::new(point.len(), point.repeat(n))
    }

    pub(crate) fn from_trusted(dim: usize, atoms: Vec<f64>) -> Self {
        debug_assert!(atoms.len().is_multiple_of(dim) && !atoms.is_empty());
        EmpiricalMeasure { dim, atoms }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.atoms.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.atoms[i * self.dim..(i + 1) * self.dim]
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.atoms.chunks_exact(self.dim)
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.len() as f64;
        (0..self.dim)
            .map(|c| {
                let col: Vec<f64> = self.iter().map(|a| a[c]).collect();
                pairwise_sum(&col) / n
            })
            .collect()
    }

    /// `K(μ, δ₀)`: mean Euclidean norm of the atoms.
    pub fn first_moment(&self) -> f64 {
        let norms: Vec<f64> = self.iter().map(norm).collect();
        pairwise_sum(&norms) / self.len() as f64
    }

    /// Every atom shifted by `v`.
    pub fn translated(&self, v: &[f64]) -> Result<Self> {
        check_dim(self.dim, v.len())?;
        let atoms = self
            .iter()
            .flat_map(|a| a.iter().zip(v).map(|(x, s)| x + s))
            .collect();
        Self::new(self.dim, atoms)
    }

    /// One atom per row, `d` columns, with a `x0,…,x{d-1}` header.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        self.write_csv_annotated(path, None)
    }

    /// As [`EmpiricalMeasure::write_csv`], preceded by a `# comment` line.
    pub fn write_csv_annotated(&self, path: &Path, comment: Option<&str>) -> Result<()> {
        let mut file = std::io::BufWriter::new(fs::File::create(path)?);
        if let Some(c) = comment {
            use std::io::Write;
            writeln!(file, "# {c}")?;
        }
        let mut w = csv::Writer::from_writer(file);
        w.write_record((0..self.dim).map(|c| format!("x{c}")))?;
        for a in self.iter() {
            w.write_record(a.iter().map(|v| format!("{v:e}")))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_path(path)?;
        let dim = r.headers()?.len();
        let mut atoms = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            for field in rec.iter() {
                atoms.push(
                    field
                        .trim()
                        .parse::<f64>()
                        .map_err(|e| Error::InvalidMeasure(format!("{}: {e}", path.display())))?,
                );
            }
        }
        Self::new(dim, atoms)
    }
}

/// A Wasserstein-1 value and whether it came from the sliced approximation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Distance {
    pub value: f64,
    pub approximate: bool,
}

/// `K(μ, δ₀)`.
pub fn first_moment(mu: &EmpiricalMeasure) -> f64 {
    mu.first_moment()
}

/// Wasserstein-1 distance between two equal-size empirical measures.
pub fn kantorovich(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<Distance> {
    check_pair(mu, nu)?;
    Ok(Sketch::of(mu).distance(&Sketch::of(nu)))
}

/// Exact Wasserstein-1 via minimum-cost perfect matching, regardless of size.
pub fn kantorovich_exact(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    check_pair(mu, nu)?;
    if mu.dim == 1 {
        return Ok(sorted_gap(&sorted_coords(mu), &sorted_coords(nu)));
    }
    Ok(matching_cost(mu, nu))
}

/// Sliced Wasserstein-1 estimate with `projections` random directions.
///
/// The averaged projected distance is divided by `E|⟨θ, e₁⟩|` for `θ`
/// uniform on the sphere, so a pure translation by `v` maps to `‖v‖`.
pub fn kantorovich_sliced(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    projections: usize,
) -> Result<f64> {
    check_pair(mu, nu)?;
    let dirs = directions(mu.dim, projections);
    let a = sliced_sketch(mu, &dirs);
    let b = sliced_sketch(nu, &dirs);
    Ok(sliced_value(mu.dim, &a, &b))
}

fn check_pair(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<()> {
    check_dim(mu.dim, nu.dim)?;
    if mu.len() != nu.len() {
        return Err(Error::AtomCountMismatch {
            left: mu.len(),
            right: nu.len(),
        });
    }
    Ok(())
}

fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}

#[inline]
pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn sorted_coords(mu: &EmpiricalMeasure) -> Vec<f64> {
    let mut v = mu.atoms.clone();
    sort_f64(&mut v);
    v
}

fn sort_f64(v: &mut [f64]) {
    radsort::sort(v);
}

fn sorted_gap(a: &[f64], b: &[f64]) -> f64 {
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect();
    pairwise_sum(&diffs) / a.len() as f64
}

fn directions(dim: usize, count: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            out.push(v.iter().map(|x| x / n).collect());
        }
    }
    out
}

/// `E|θ₁|` for `θ` uniform on the unit sphere of `ℝ^d`:
/// `Γ(d/2) / (√π Γ((d+1)/2))`.
pub fn sliced_scale(dim: usize) -> f64 {
    // ratio Γ(d/2)/Γ((d+1)/2) by the recursion r(d+2) = r(d)·d/(d+1)
    let (mut r, mut k) = if dim % 2 == 1 {
        (std::f64::consts::PI.sqrt(), 1) // Γ(1/2)/Γ(1)
    } else {
        (2.0 / std::f64::consts::PI.sqrt(), 2) // Γ(1)/Γ(3/2)
    };
    while k < dim {
        r *= k as f64 / (k as f64 + 1.0);
        k += 2;
    }
    r / std::f64::consts::PI.sqrt()
}

fn sliced_sketch(mu: &EmpiricalMeasure, dirs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    dirs.iter()
        .map(|theta| {
            let mut p: Vec<f64> = mu
                .iter()
                .map(|a| a.iter().zip(theta).map(|(x, t)| x * t).sum())
                .collect();
            sort_f64(&mut p);
            p
        })
        .collect()
}

fn sliced_value(dim: usize, a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let per: Vec<f64> = a.iter().zip(b).map(|(x, y)| sorted_gap(x, y)).collect();
    pairwise_sum(&per) / per.len() as f64 / sliced_scale(dim)
}

fn matching_cost(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> f64 {
    let n = mu.len();
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        let a = mu.atom(i);
        for j in 0..n {
            let b = nu.atom(j);
            cost[i * n + j] = a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
        }
    }
    let assignment = min_cost_assignment(n, &cost);
    let matched: Vec<f64> = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .collect();
    pairwise_sum(&matched) / n as f64
}

/// Minimum-cost perfect matching on an `n×n` cost matrix (row-major).
///
/// Shortest augmenting paths with row/column potentials (Jonker–Volgenant
/// style); returns `assignment[row] = column`. `O(n³)`.
pub fn min_cost_assignment(n: usize, cost: &[f64]) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    // 1-based arrays with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        col_owner[0] = row;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[col_owner[j] - 1] = j - 1;
    }
    assignment
}

/// Precomputed per-measure data for repeated distance evaluations.
///
/// Sliced sketches keep their sorted projections in single precision: at
/// `N = 10⁵` a flow of 64 projections per time point is otherwise several
/// gigabytes. The rounding is far below any Picard tolerance.
pub(crate) enum Sketch {
    Sorted(Vec<f64>),
    Atoms(EmpiricalMeasure),
    /// `P × N` sorted projections.
    Sliced {
        dim: usize,
        n: usize,
        sorted: Vec<f32>,
    },
}

impl Sketch {
    pub(crate) fn of(mu: &EmpiricalMeasure) -> Self {
        Self::of_atoms(mu.dim, &mu.atoms)
    }

    pub(crate) fn of_atoms(dim: usize, atoms: &[f64]) -> Self {
        let n = atoms.len() / dim;
        if dim == 1 {
            let mut v = atoms.to_vec();
            sort_f64(&mut v);
            Sketch::Sorted(v)
        } else if n <= EXACT_LIMIT {
            Sketch::Atoms(EmpiricalMeasure::from_trusted(dim, atoms.to_vec()))
        } else {
            let dirs = directions(dim, SLICED_PROJECTIONS);
            let mut sorted = Vec::with_capacity(dirs.len() * n);
            for theta in &dirs {
                let mut p: Vec<f32> = atoms
                    .chunks_exact(dim)
                    .map(|a| a.iter().zip(theta).map(|(x, t)| x * t).sum::<f64>() as f32)
                    .collect();
                radsort::sort(&mut p);
                sorted.extend_from_slice(&p);
            }
            Sketch::Sliced { dim, n, sorted }
        }
    }

    /// Both sketches must come from measures of equal `(N, d)`.
    pub(crate) fn distance(&self, other: &Sketch) -> Distance {
        match (self, other) {
            (Sketch::Sorted(a), Sketch::Sorted(b)) => Distance {
                value: sorted_gap(a, b),
                approximate: false,
            },
            (Sketch::Atoms(a), Sketch::Atoms(b)) => Distance {
                value: matching_cost(a, b),
                approximate: false,
            },
            (Sketch::Sliced { dim, n, sorted: a }, Sketch::Sliced { sorted: b, .. }) => {
                let per: Vec<f64> = a
                    .chunks_exact(*n)
                    .zip(b.chunks_exact(*n))
                    .map(|(x, y)| {
                        let diffs: Vec<f64> = x
                            .iter()
                            .zip(y)
                            .map(|(u, v)| (*u as f64 - *v as f64).abs())
                            .collect();
                        pairwise_sum(&diffs) / *n as f64
                    })
                    .collect();
                Distance {
                    value: pairwise_sum(&per) / per.len() as f64 / sliced_scale(*dim),
                    approximate: true,
                }
            }
            _ => unreachable!("sketches of measures with different shapes"),
        }
    }
}

/// Time-indexed measures on a grid `0 = t₀ < … < t_M = T`, all of equal `(N, d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureFlow {
    grid: Vec<f64>,
    measures: Vec<EmpiricalMeasure>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FlowIndex {
    grid: Vec<f64>,
    n: usize,
    d: usize,
    files: Vec<String>,
}

impl MeasureFlow {
    pub fn new(grid: Vec<f64>, measures: Vec<EmpiricalMeasure>) -> Result<Self> {
        if grid.len() < 2 || grid.len() != measures.len() {
            return Err(Error::GridMismatch(format!(
                "{} grid points for {} measures (need ≥ 2, equal)",
                grid.len(),
                measures.len()
            )));
        }
        if grid[0] != 0.0 {
            return Err(Error::GridMismatch(format!("grid starts at {}", grid[0])));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::GridMismatch("grid not strictly increasing".into()));
        }
        let (n, d) = (measures[0].len(), measures[0].dim());
        for m in &measures[1..] {
            check_dim(d, m.dim())?;
            if m.len() != n {
                return Err(Error::AtomCountMismatch {
                    left: n,
                    right: m.len(),
                });
            }
        }
        Ok(MeasureFlow { grid, measures })
    }

    /// The same measure at every grid point.
    pub fn constant(grid: Vec<f64>, mu: EmpiricalMeasure) -> Result<Self> {
        let measures = vec![mu; grid.len()];
        Self::new(grid, measures)
    }

    pub(crate) fn from_trusted(grid: Vec<f64>, measures: Vec<EmpiricalMeasure>) -> Self {
        MeasureFlow { grid, measures }
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn horizon(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    pub fn measures(&self) -> &[EmpiricalMeasure] {
        &self.measures
    }

    pub fn measure(&self, k: usize) -> &EmpiricalMeasure {
        &self.measures[k]
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn n_atoms(&self) -> usize {
        self.measures[0].len()
    }

    pub fn dim(&self) -> usize {
        self.measures[0].dim()
    }

    /// Per-time CSVs `t00000.csv …` plus `index.json` with `{grid, n, d, files}`.
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<String>> {
        self.write_dir_annotated(dir, None)
    }

    /// As [`MeasureFlow::write_dir`], with a `# comment` line atop every CSV.
    pub fn write_dir_annotated(&self, dir: &Path, comment: Option<&str>) -> Result<Vec<String>> {
        fs::create_dir_all(dir)?;
        let files: Vec<String> = (0..self.len()).map(|k| format!("t{k:05}.csv")).collect();
        for (mu, f) in self.measures.iter().zip(&files) {
            mu.write_csv_annotated(&dir.join(f), comment)?;
        }
        let index = FlowIndex {
            grid: self.grid.clone(),
            n: self.n_atoms(),
            d: self.dim(),
            files: files.clone(),
        };
        fs::write(
            dir.join("index.json"),
            serde_json::to_string_pretty(&index)?,
        )?;
        let mut out = files;
        out.push("index.json".into());
        Ok(out)
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let index: FlowIndex = serde_json::from_str(&fs::read_to_string(dir.join("index.json"))?)?;
        let measures = index
            .files
            .iter()
            .map(|f| EmpiricalMeasure::read_csv(&dir.join(f)))
            .collect::<Result<Vec<_>>>()?;
        let flow = Self::new(index.grid, measures)?;
        if flow.n_atoms() != index.n || flow.dim() != index.d {
            return Err(Error::ShapeMismatch(format!(
                "index declares ({}, {}), files hold ({}, {})",
                index.n,
                index.d,
                flow.n_atoms(),
                flow.dim()
            )));
        }
        Ok(flow)
    }
}

/// Sketches of every measure of a flow, for repeated flow distances.
pub(crate) struct FlowSketch {
    shape: (usize, usize),
    sketches: Vec<Sketch>,
}

impl FlowSketch {
    pub(crate) fn of(flow: &MeasureFlow) -> Self {
        use rayon::prelude::*;
        FlowSketch {
            shape: (flow.n_atoms(), flow.dim()),
            sketches: flow.measures.par_iter().map(Sketch::of).collect(),
        }
    }

    /// Sketch of a step-major state array (`(M+1) × N × d`).
    pub(crate) fn of_states(n: usize, d: usize, states: &[f64]) -> Self {
        use rayon::prelude::*;
        FlowSketch {
            sketches: states
                .par_chunks_exact(n * d)
                .map(|s| Sketch::of_atoms(d, s))
                .collect(),
            shape: (n, d),
        }
    }

    /// Replaces every sketch by that of `states` (same layout and shape) and
    /// returns the flow distance between the old and new flows. Only one
    /// time point per worker is held twice.
    pub(crate) fn advance(&mut self, states: &[f64]) -> f64 {
        use rayon::prelude::*;
        let (n, d) = self.shape;
        self.sketches
            .par_iter_mut()
            .zip(states.par_chunks_exact(n * d))
            .map(|(old, s)| {
                let new = Sketch::of_atoms(d, s);
                let v = new.distance(old).value;
                *old = new;
                v
            })
            .reduce(|| 0.0, f64::max)
    }
}

/// `max_k K(f_k, g_k)` over a common grid.
pub fn flow_distance(f: &MeasureFlow, g: &MeasureFlow) -> Result<f64> {
    if f.grid != g.grid {
        return Err(Error::GridMismatch(
            "flows sampled on different grids".into(),
        ));
    }
    check_pair(&f.measures[0], &g.measures[0])?;
    use rayon::prelude::*;
    Ok(f.measures
        .par_iter()
        .zip(&g.measures)
        .map(|(a, b)| Sketch::of(a).distance(&Sketch::of(b)).value)
        .reduce(|| 0.0, f64::max))
}
