//! Independent checks: a plain Monte Carlo bond pricer and finite-difference
//! gradients of the rollout loss.
//!
//! Nothing in here is used by training.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{sqrt_plus, CirParams, FbsdeProblem};
use crate::net::NetParams;
use crate::paths::{fill_standard_normals, PathBatch};
use crate::rollout::{self, tree_reduce};

/// Paths per reduction chunk of the Monte Carlo pricer.
const MC_CHUNK: usize = 1000;

/// Denominator floor of [`relative_error`].
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
    pub paths: usize,
    pub steps: usize,
}

impl McEstimate {
    /// `|value - reference|` in units of the standard error.
    pub fn z_score(&self, reference: f64) -> f64 {
        let diff = (self.value - reference).abs();
        if diff == 0.0 {
            0.0
        } else {
            diff / self.std_error
        }
    }
}

/// Monte Carlo price of the zero-coupon bond `E[exp(-int_0^T max_i X^i_s ds)]`.
///
/// The rates follow the same fully truncated Euler scheme as the solver, with
/// component `i` driven by Brownian coordinate `i mod d`. The time integral is
/// the trapezoidal rule on the Euler grid. Path `p` uses the increments of path
/// `p`, iteration 0, of the generator in [`crate::paths`].
pub fn mc_bond_price(
    params: &CirParams,
    d: usize,
    horizon: f64,
    x0: &[f64],
    paths: usize,
    steps: usize,
    seed: u64,
) -> Result<McEstimate> {
    params.validate()?;
    let n = params.len();
    if x0.len() != n {
        return Err(Error::Shape(format!(
            "x0 has {} components, parameters have {n}",
            x0.len()
        )));
    }
    if paths < 100 || steps < 10 {
        return Err(Error::domain(format!(
            "need at least 100 paths and 10 steps, got {paths} and {steps}"
        )));
    }
    if d == 0 || !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::domain("need d >= 1 and T > 0"));
    }
    let dt = horizon / steps as f64;
    let sqrt_dt = dt.sqrt();

    let discount = |p: usize| {
        let mut normals = vec![0.0; steps * d];
        fill_standard_normals(seed, 0, p as u64, &mut normals);
        let mut x = x0.to_vec();
        let rate = |x: &[f64]| x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut prev = rate(&x);
        let mut integral = 0.0;
        for k in 0..steps {
            let dw = &normals[k * d..(k + 1) * d];
            for i in 0..n {
                let drift = params.a[i] * (params.b[i] - x[i]);
                let noise = params.sigma[i] * sqrt_plus(x[i]) * dw[i % d] * sqrt_dt;
                x[i] += drift * dt + noise;
            }
            let r = rate(&x);
            integral += 0.5 * (prev + r) * dt;
            prev = r;
        }
        (-integral).exp()
    };

    let starts: Vec<usize> = (0..paths).step_by(MC_CHUNK).collect();
    let values: Vec<Vec<f64>> = starts
        .par_iter()
        .map(|&s| (s..(s + MC_CHUNK).min(paths)).map(discount).collect())
        .collect();
    let sums = values.iter().map(|c| c.iter().sum()).collect();
    let mean = tree_reduce(sums, |a, b| a + b).unwrap_or(0.0) / paths as f64;
    let sq = values
        .iter()
        .map(|c| c.iter().map(|v| (v - mean).powi(2)).sum())
        .collect();
    let var = tree_reduce(sq, |a, b| a + b).unwrap_or(0.0) / (paths - 1) as f64;
    Ok(McEstimate {
        value: mean,
        std_error: (var / paths as f64).sqrt(),
        paths,
        steps,
    })
}

/// Central difference of the batch loss along one flat parameter coordinate.
pub fn fd_gradient(
    problem: &FbsdeProblem,
    params: &NetParams,
    batch: &PathBatch,
    coordinate: usize,
    h: f64,
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::domain(format!("step must be positive, got {h}")));
    }
    if coordinate >= params.len() {
        return Err(Error::domain(format!(
            "coordinate {coordinate} out of range for {} parameters",
            params.len()
        )));
    }
    let mut plus = params.clone();
    plus.as_mut_slice()[coordinate] += h;
    let mut minus = params.clone();
    minus.as_mut_slice()[coordinate] -= h;
    let lp = rollout::loss(problem, &plus, batch)?.loss;
    let lm = rollout::loss(problem, &minus, batch)?.loss;
    Ok((lp - lm) / (2.0 * h))
}

/// `|a - b| / max(|a|, |b|, REL_ERROR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateCheck {
    pub coordinate: usize,
    pub reverse: f64,
    pub finite_difference: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checks: Vec<CoordinateCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `count` distinct coordinates drawn uniformly from `0..len`, always including
/// coordinate 0 (the first component of `alpha`).
pub fn sample_coordinates(len: usize, count: usize, seed: u64) -> Vec<usize> {
    let count = count.min(len);
    if count == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = sample(&mut rng, len - 1, count - 1)
        .into_iter()
        .map(|i| i + 1)
        .collect();
    picked.insert(0, 0);
    picked
}

/// Compares the reverse-mode gradient against central differences.
pub fn grad_check(
    problem: &FbsdeProblem,
    params: &NetParams,
    batch: &PathBatch,
    coordinates: &[usize],
    h: f64,
) -> Result<GradCheckReport> {
    let (_, tape) = rollout::simulate(problem, params, batch)?;
    let grads = rollout::backward(problem, params, &tape)?;
    let checks = coordinates
        .iter()
        .map(|&c| {
            let fd = fd_gradient(problem, params, batch, c, h)?;
            let bp = grads.as_slice()[c];
            Ok(CoordinateCheck {
                coordinate: c,
                reverse: bp,
                finite_difference: fd,
                rel_error: relative_error(bp, fd),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport { checks })
}
