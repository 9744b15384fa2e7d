// SPDX-License-Identifier: Apache-2.0

//! Reproducible per-path random streams and fine Brownian grids.
//!
//! Every Monte-Carlo path owns a ChaCha8 stream keyed by the master seed and
//! selected by the path index, so a path's draws do not depend on which worker
//! runs it or in what order.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("span {span} is not an integer multiple of the fine step {h}")]
    GridMismatch { span: f64, h: f64 },
}

/// Independent random stream of one Monte-Carlo path.
#[derive(Debug, Clone)]
pub struct PathStream {
    master_seed: u64,
    path_index: u64,
    rng: ChaCha8Rng,
}

impl PathStream {
    pub fn new(master_seed: u64, path_index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        rng.set_stream(path_index);
        PathStream {
            master_seed,
            path_index,
            rng,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn path_index(&self) -> u64 {
        self.path_index
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.rng.sample(StandardNormal);
        }
    }

    /// Stream restarted from its seed.
    pub fn rewound(&self) -> Self {
        PathStream::new(self.master_seed, self.path_index)
    }
}

impl RngCore for PathStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

pub fn make_path_streams(master_seed: u64, n_paths: usize) -> Vec<PathStream> {
    assert!(n_paths >= 1, "need at least one path");
    (0..n_paths as u64)
        .map(|i| PathStream::new(master_seed, i))
        .collect()
}

/// Number of fine steps of size `h` in `span`, or `GridMismatch`.
pub fn grid_count(span: f64, h: f64) -> Result<usize, NoiseError> {
    let ratio = span / h;
    let n = ratio.round();
    if !(h > 0.0) || n < 1.0 || (ratio - n).abs() > 1e-9 * n.max(1.0) {
        return Err(NoiseError::GridMismatch { span, h });
    }
    Ok(n as usize)
}

/// Brownian increments on a uniform fine grid, increment-major:
/// component `k` of increment `j` sits at `j * dim + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianGrid {
    pub h: f64,
    pub dim: usize,
    pub increments: Vec<f64>,
}

impl BrownianGrid {
    pub fn len(&self) -> usize {
        self.increments.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.increments.is_empty()
    }

    pub fn span(&self) -> f64 {
        self.len() as f64 * self.h
    }

    pub fn increment(&self, j: usize) -> &[f64] {
        &self.increments[j * self.dim..(j + 1) * self.dim]
    }

    /// Increments `[start, start + count)` as one slice.
    pub fn window(&self, start: usize, count: usize) -> &[f64] {
        &self.increments[start * self.dim..(start + count) * self.dim]
    }

    /// `W(t_end) - W(t_start)` over a window of increments.
    pub fn displacement(&self, start: usize, count: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for chunk in self.window(start, count).chunks(self.dim) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        out
    }
}

/// Draws `span / h` increments of an `dim`-dimensional Brownian motion.
pub fn brownian_grid(
    stream: &mut PathStream,
    h: f64,
    span: f64,
    dim: usize,
) -> Result<BrownianGrid, NoiseError> {
    let n = grid_count(span, h)?;
    let scale = h.sqrt();
    let mut increments = vec![0.0; n * dim];
    stream.fill_normal(&mut increments);
    for v in &mut increments {
        *v *= scale;
    }
    Ok(BrownianGrid { h, dim, increments })
}
