//! Counter-based Brownian increments.
//!
//! Every increment is a pure function of `(seed, iteration, path, step, coordinate)`.
//! The generator is ChaCha12 keyed by the master seed, with the iteration index
//! selecting the stream and the path index selecting the word offset inside it.
//! Within a path the `N * d` normals are laid out step-major and produced in
//! Box-Muller pairs: `(u1, u2)` from two consecutive 64-bit words,
//!
//! ```text
//! u1 = ((w1 >> 11) + 1) * 2^-53        in (0, 1]
//! u2 = (w2 >> 11) * 2^-53              in [0, 1)
//! z0 = sqrt(-2 ln u1) cos(2 pi u2),   z1 = sqrt(-2 ln u1) sin(2 pi u2)
//! ```
//!
//! An odd trailing normal discards its `z1`. Since nothing is shared between
//! paths, any partition of the paths across workers gives the same bytes.

use std::f64::consts::TAU;
use std::ops::Range;

use ndarray::{Array3, ArrayView2, Axis};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

const INV_2_53: f64 = 1.0 / 9_007_199_254_740_992.0;

/// A batch of `M` paths of `N` increments each, every increment in R^d.
#[derive(Clone, Debug, PartialEq)]
pub struct PathBatch {
    pub dt: f64,
    /// Shape `(M, N, d)`; entry `[p, k, l]` is `W^l_{t_{k+1}} - W^l_{t_k}` on path `p`.
    pub increments: Array3<f64>,
}

impl PathBatch {
    pub fn batch_size(&self) -> usize {
        self.increments.len_of(Axis(0))
    }

    pub fn steps(&self) -> usize {
        self.increments.len_of(Axis(1))
    }

    pub fn dim(&self) -> usize {
        self.increments.len_of(Axis(2))
    }

    /// The `N x d` increments of one path.
    pub fn path(&self, p: usize) -> ArrayView2<'_, f64> {
        self.increments.index_axis(Axis(0), p)
    }

    pub fn increment(&self, path: usize, step: usize, coord: usize) -> f64 {
        self.increments[[path, step, coord]]
    }
}

/// Position of the first 32-bit word of `path` in its stream.
#[inline]
fn word_offset(path: u64, normals_per_path: usize) -> u128 {
    let pairs = normals_per_path.div_ceil(2) as u128;
    // two u64 per pair, two u32 words per u64
    path as u128 * pairs * 4
}

/// Fills `out` (length `N * d`, step-major) with the standard normals of one path.
pub fn fill_standard_normals(seed: u64, iteration: u64, path: u64, out: &mut [f64]) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    rng.set_word_pos(word_offset(path, out.len()));
    let mut chunks = out.chunks_exact_mut(2);
    for pair in &mut chunks {
        let (z0, z1) = box_muller(&mut rng);
        pair[0] = z0;
        pair[1] = z1;
    }
    if let [last] = chunks.into_remainder() {
        *last = box_muller(&mut rng).0;
    }
}

#[inline]
fn box_muller(rng: &mut ChaCha12Rng) -> (f64, f64) {
    let u1 = ((rng.next_u64() >> 11) + 1) as f64 * INV_2_53;
    let u2 = (rng.next_u64() >> 11) as f64 * INV_2_53;
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (TAU * u2).sin_cos();
    (r * c, r * s)
}

fn check_args(steps: usize, dim: usize, horizon: f64) -> Result<f64> {
    if steps == 0 || dim == 0 {
        return Err(Error::domain(format!(
            "need N, d >= 1, got N={steps}, d={dim}"
        )));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::domain(format!("T must be positive, got {horizon}")));
    }
    Ok(horizon / steps as f64)
}

/// Generates paths `paths.start..paths.end` of the batch for `(seed, iteration)`.
pub fn generate_range(
    seed: u64,
    iteration: u64,
    paths: Range<usize>,
    steps: usize,
    dim: usize,
    horizon: f64,
) -> Result<PathBatch> {
    let dt = check_args(steps, dim, horizon)?;
    let count = paths.len();
    let per_path = steps * dim;
    let scale = dt.sqrt();
    let mut data = vec![0.0; count * per_path];
    if per_path > 0 {
        data.par_chunks_mut(per_path)
            .enumerate()
            .for_each(|(i, out)| {
                fill_standard_normals(seed, iteration, (paths.start + i) as u64, out);
                out.iter_mut().for_each(|v| *v *= scale);
            });
    }
    let increments = Array3::from_shape_vec((count, steps, dim), data)
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(PathBatch { dt, increments })
}

/// Generates the `M`-path batch used at `iteration` of a run keyed by `seed`.
pub fn generate(
    seed: u64,
    iteration: u64,
    batch_size: usize,
    steps: usize,
    dim: usize,
    horizon: f64,
) -> Result<PathBatch> {
    if batch_size == 0 {
        return Err(Error::domain("batch size must be at least 1"));
    }
    generate_range(seed, iteration, 0..batch_size, steps, dim, horizon)
}
