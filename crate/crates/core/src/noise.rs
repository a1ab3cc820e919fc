//! Stored Brownian increments.
//!
//! Increments are drawn once per experiment and never regenerated. Path `p`
//! draws from its own ChaCha stream `(seed, p)`; within the stream the
//! position counter runs over `(step, component)`. Any increment is therefore
//! a pure function of `(seed, path, step, component)`, independent of thread
//! scheduling and of how many other paths exist.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

/// Brownian increments `ΔB` for `n_paths × n_steps × dim`, step-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBuffer {
    seed: u64,
    n_paths: usize,
    n_steps: usize,
    dim: usize,
    dt: f64,
    data: Vec<f64>,
}

const PATH_CHUNK: usize = 1024;

impl NoiseBuffer {
    pub fn generate(seed: u64, n_paths: usize, n_steps: usize, dim: usize, dt: f64) -> Self {
        let per_path = n_steps * dim;
        let sd = dt.sqrt();
        let mut path_major = vec![0.0; n_paths * per_path];
        path_major
            .par_chunks_mut(PATH_CHUNK * per_path.max(1))
            .enumerate()
            .for_each(|(chunk, buf)| {
                for (local, path) in buf.chunks_mut(per_path.max(1)).enumerate() {
                    let mut rng = stream(seed, (chunk * PATH_CHUNK + local) as u64);
                    for v in path.iter_mut() {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *v = sd * z;
                    }
                }
            });
        let mut data = vec![0.0; n_paths * per_path];
        for p in 0..n_paths {
            for k in 0..n_steps {
                let src = p * per_path + k * dim;
                let dst = (k * n_paths + p) * dim;
                data[dst..dst + dim].copy_from_slice(&path_major[src..src + dim]);
            }
        }
        NoiseBuffer {
            seed,
            n_paths,
            n_steps,
            dim,
            dt,
            data,
        }
    }

    pub(crate) fn from_raw(
        seed: u64,
        n_paths: usize,
        n_steps: usize,
        dim: usize,
        dt: f64,
        data: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(data.len(), n_paths * n_steps * dim);
        NoiseBuffer {
            seed,
            n_paths,
            n_steps,
            dim,
            dt,
            data,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// `ΔB` of `path` over `[t_step, t_{step+1}]`.
    #[inline]
    pub fn increment(&self, step: usize, path: usize) -> &[f64] {
        let at = (step * self.n_paths + path) * self.dim;
        &self.data[at..at + self.dim]
    }

    /// All paths' increments at `step`, `n_paths × dim`.
    #[inline]
    pub fn step(&self, step: usize) -> &[f64] {
        let w = self.n_paths * self.dim;
        &self.data[step * w..(step + 1) * w]
    }

    /// Brownian path `B_{t_0..t_M}` of one path, `(n_steps + 1) × dim`, starting at 0.
    pub fn brownian_path(&self, path: usize) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; (self.n_steps + 1) * d];
        for k in 0..self.n_steps {
            let inc = self.increment(k, path);
            for c in 0..d {
                out[(k + 1) * d + c] = out[k * d + c] + inc[c];
            }
        }
        out
    }
}

fn stream(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}
