//! Coupled forward-backward SDE problems.
//!
//! A problem is the forward system
//!
//! ```text
//! dX_t = b(t, X_t, Y_t) dt + sigma(t, X_t) dW_t,        X_0 = x0
//! dY_t = -f(t, X_t, Y_t, Z_t) dt + Z_t dW_t,            Y_T should equal g(X_T)
//! ```
//!
//! with `X` in R^n, `Y` in R^m, `Z` in R^{m x d} and `W` a d-dimensional Brownian
//! motion. The diffusion is supplied row by row: row `i` may only depend on `t`
//! and `x_i`, which is what lets square-root (CIR-type) coefficients in.
//!
//! Besides evaluating the coefficients, every problem supplies vector-Jacobian
//! products so that the rollout can be differentiated end to end.

use std::fmt;
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

/// Below this threshold the derivative of `sqrt(max(x, 0))` is taken to be zero.
pub const SQRT_GRAD_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    /// Forward state dimension.
    pub n: usize,
    /// Backward state dimension.
    pub m: usize,
    /// Brownian dimension.
    pub d: usize,
}

impl Dims {
    pub fn new(n: usize, m: usize, d: usize) -> Result<Self> {
        if n == 0 || m == 0 || d == 0 {
            return Err(Error::domain(format!(
                "dimensions must be positive, got n={n}, m={m}, d={d}"
            )));
        }
        Ok(Dims { n, m, d })
    }
}

/// Coefficient evaluators of an FBSDE together with their adjoints.
///
/// All `*_vjp` methods *accumulate* into their output slices. `z` is always the
/// row-major flattening of the `m x d` matrix.
pub trait Coefficients: Send + Sync + fmt::Debug {
    fn drift(&self, t: f64, x: &[f64], y: &[f64], out: &mut [f64]);

    fn drift_vjp(
        &self,
        t: f64,
        x: &[f64],
        y: &[f64],
        adj: &[f64],
        adj_x: &mut [f64],
        adj_y: &mut [f64],
    );

    /// Row `i` of the diffusion matrix (length `d`), as a function of `x_i` only.
    fn diffusion_row(&self, i: usize, t: f64, xi: f64, row: &mut [f64]);

    /// Derivative of [`Coefficients::diffusion_row`] with respect to `x_i`.
    fn diffusion_row_dx(&self, i: usize, t: f64, xi: f64, row: &mut [f64]);

    fn driver(&self, t: f64, x: &[f64], y: &[f64], z: &[f64], out: &mut [f64]);

    #[allow(clippy::too_many_arguments)]
    fn driver_vjp(
        &self,
        t: f64,
        x: &[f64],
        y: &[f64],
        z: &[f64],
        adj: &[f64],
        adj_x: &mut [f64],
        adj_y: &mut [f64],
        adj_z: &mut [f64],
    );

    fn terminal(&self, x: &[f64], out: &mut [f64]);

    fn terminal_vjp(&self, x: &[f64], adj: &[f64], adj_x: &mut [f64]);

    /// Decoupling field `u(t, x)` with `Y_t = u(t, X_t)`, when known in closed form.
    fn analytic(&self, _t: f64, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

/// An FBSDE instance: dimensions, horizon, initial state and coefficients.
///
/// Immutable once built; clones share the coefficient object.
#[derive(Clone, Debug)]
pub struct FbsdeProblem {
    pub dims: Dims,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub coeffs: Arc<dyn Coefficients>,
}

impl FbsdeProblem {
    pub fn new(
        dims: Dims,
        horizon: f64,
        x0: Vec<f64>,
        coeffs: Arc<dyn Coefficients>,
    ) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::domain(format!(
                "terminal time must be positive, got {horizon}"
            )));
        }
        if x0.len() != dims.n {
            return Err(Error::Shape(format!(
                "x0 has length {}, expected n={}",
                x0.len(),
                dims.n
            )));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("x0 must be finite"));
        }
        Ok(FbsdeProblem {
            dims,
            horizon,
            x0,
            coeffs,
        })
    }

    pub fn drift(&self, t: f64, x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dims.n];
        self.coeffs.drift(t, x, y, &mut out);
        out
    }

    /// Full `n x d` diffusion matrix assembled from its rows.
    pub fn diffusion(&self, t: f64, x: &[f64]) -> Array2<f64> {
        let Dims { n, d, .. } = self.dims;
        let mut out = Array2::zeros((n, d));
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let slice = row.as_slice_mut().expect("standard layout");
            self.coeffs.diffusion_row(i, t, x[i], slice);
        }
        out
    }

    pub fn driver(&self, t: f64, x: &[f64], y: &[f64], z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dims.m];
        self.coeffs.driver(t, x, y, z, &mut out);
        out
    }

    pub fn terminal(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dims.m];
        self.coeffs.terminal(x, &mut out);
        out
    }

    pub fn analytic(&self, t: f64, x: &[f64]) -> Option<Vec<f64>> {
        self.coeffs.analytic(t, x)
    }

    /// Analytic `Y_0 = u(0, x0)` if available.
    pub fn analytic_y0(&self) -> Option<Vec<f64>> {
        self.analytic(0.0, &self.x0)
    }
}

/// `sqrt(max(x, 0))`.
#[inline]
pub fn sqrt_plus(x: f64) -> f64 {
    x.max(0.0).sqrt()
}

/// Derivative used for `sqrt(max(x, 0))` in the reverse pass.
///
/// Zero at and below [`SQRT_GRAD_EPS`], so the value is capped at
/// `1 / (2 sqrt(SQRT_GRAD_EPS))`.
#[inline]
pub fn sqrt_plus_dx(x: f64) -> f64 {
    if x > SQRT_GRAD_EPS {
        0.5 / x.sqrt()
    } else {
        0.0
    }
}

/// How square roots of the state are taken in the CIR diffusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SqrtRule {
    /// `sqrt(max(x, 0))`.
    #[default]
    FullTruncation,
    /// Plain `sqrt(x)`; NaN for negative states. Only useful for comparisons.
    Raw,
}

impl SqrtRule {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            SqrtRule::FullTruncation => sqrt_plus(x),
            SqrtRule::Raw => x.sqrt(),
        }
    }

    #[inline]
    fn dx(self, x: f64) -> f64 {
        match self {
            SqrtRule::FullTruncation => sqrt_plus_dx(x),
            SqrtRule::Raw => 0.5 / x.sqrt(),
        }
    }
}

/// Per-component CIR parameters `dX^i = a_i (b_i - X^i) dt + sigma_i sqrt(X^i) dW`.
#[derive(Clone, Debug, PartialEq)]
pub struct CirParams {
    /// Mean-reversion speed.
    pub a: Vec<f64>,
    /// Long-run mean.
    pub b: Vec<f64>,
    /// Volatility of the rate.
    pub sigma: Vec<f64>,
}

impl CirParams {
    pub fn new(a: Vec<f64>, b: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        let p = CirParams { a, b, sigma };
        p.validate()?;
        Ok(p)
    }

    pub fn scalar(a: f64, b: f64, sigma: f64) -> Result<Self> {
        Self::new(vec![a], vec![b], vec![sigma])
    }

    /// Draws every `a_i`, `b_i`, `sigma_i` uniformly from `[0, 1]`.
    ///
    /// The draw order is all of `a`, then all of `b`, then all of `sigma`, from a
    /// ChaCha12 stream keyed by `seed`.
    pub fn sample_unit(n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::domain("n must be at least 1"));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut draw = || (0..n).map(|_| rng.gen::<f64>()).collect::<Vec<_>>();
        let a = draw();
        let b = draw();
        let sigma = draw();
        Self::new(a, b, sigma)
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.a.len();
        if n == 0 || self.b.len() != n || self.sigma.len() != n {
            return Err(Error::Shape(format!(
                "CIR parameter vectors must be non-empty and of equal length (a={}, b={}, sigma={})",
                self.a.len(),
                self.b.len(),
                self.sigma.len()
            )));
        }
        for (name, v) in [("a", &self.a), ("b", &self.b), ("sigma", &self.sigma)] {
            if let Some(bad) = v.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
                return Err(Error::domain(format!(
                    "CIR parameter {name} must be finite and nonnegative, got {bad}"
                )));
            }
        }
        Ok(())
    }
}

/// Zero-coupon bond under (multi-dimensional) CIR short rates.
///
/// The rate is `max_i X^i`, the driver is `f = -rate * y` and the payoff is 1.
/// Row `i` of the diffusion is `sigma_i sqrt(x_i)` in column `i mod d`.
#[derive(Clone, Debug)]
pub struct CirBond {
    params: CirParams,
    d: usize,
    horizon: f64,
    sqrt_rule: SqrtRule,
}

impl CirBond {
    pub fn params(&self) -> &CirParams {
        &self.params
    }

    pub fn with_sqrt_rule(mut self, rule: SqrtRule) -> Self {
        self.sqrt_rule = rule;
        self
    }

    #[inline]
    fn rate(x: &[f64]) -> (usize, f64) {
        x.iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, v)| {
                if v > best.1 {
                    (i, v)
                } else {
                    best
                }
            })
    }
}

impl Coefficients for CirBond {
    fn drift(&self, _t: f64, x: &[f64], _y: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.params.a[i] * (self.params.b[i] - x[i]);
        }
    }

    fn drift_vjp(
        &self,
        _t: f64,
        _x: &[f64],
        _y: &[f64],
        adj: &[f64],
        adj_x: &mut [f64],
        _adj_y: &mut [f64],
    ) {
        for (i, g) in adj_x.iter_mut().enumerate() {
            *g -= self.params.a[i] * adj[i];
        }
    }

    fn diffusion_row(&self, i: usize, _t: f64, xi: f64, row: &mut [f64]) {
        row.fill(0.0);
        row[i % self.d] = self.params.sigma[i] * self.sqrt_rule.apply(xi);
    }

    fn diffusion_row_dx(&self, i: usize, _t: f64, xi: f64, row: &mut [f64]) {
        row.fill(0.0);
        row[i % self.d] = self.params.sigma[i] * self.sqrt_rule.dx(xi);
    }

    fn driver(&self, _t: f64, x: &[f64], y: &[f64], _z: &[f64], out: &mut [f64]) {
        let (_, r) = Self::rate(x);
        for (o, yj) in out.iter_mut().zip(y) {
            *o = -r * yj;
        }
    }

    fn driver_vjp(
        &self,
        _t: f64,
        x: &[f64],
        y: &[f64],
        _z: &[f64],
        adj: &[f64],
        adj_x: &mut [f64],
        adj_y: &mut [f64],
        _adj_z: &mut [f64],
    ) {
        let (k, r) = Self::rate(x);
        let mut gx = 0.0;
        for j in 0..y.len() {
            adj_y[j] -= r * adj[j];
            gx -= y[j] * adj[j];
        }
        adj_x[k] += gx;
    }

    fn terminal(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(1.0);
    }

    fn terminal_vjp(&self, _x: &[f64], _adj: &[f64], _adj_x: &mut [f64]) {}

    fn analytic(&self, t: f64, x: &[f64]) -> Option<Vec<f64>> {
        if self.params.len() != 1 {
            return None;
        }
        analytic_bond_price(&self.params, t, self.horizon, x[0])
            .ok()
            .map(|v| vec![v])
    }
}

/// Builds the one-dimensional CIR bond problem (`n = m = d = 1`).
pub fn make_cir_bond_1d(params: CirParams, horizon: f64, x0: f64) -> Result<FbsdeProblem> {
    params.validate()?;
    if params.len() != 1 {
        return Err(Error::Shape(format!(
            "one-dimensional bond needs scalar parameters, got {} components",
            params.len()
        )));
    }
    make_cir_bond_multi(params, 1, 1, horizon, vec![x0])
}

/// Builds the multi-dimensional CIR bond problem with the max-rate driver.
pub fn make_cir_bond_multi(
    params: CirParams,
    n: usize,
    d: usize,
    horizon: f64,
    x0: Vec<f64>,
) -> Result<FbsdeProblem> {
    if n == 0 {
        return Err(Error::domain("n must be at least 1"));
    }
    params.validate()?;
    if params.len() != n {
        return Err(Error::Shape(format!(
            "expected {n} CIR components, got {}",
            params.len()
        )));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::domain(format!(
            "terminal time must be positive, got {horizon}"
        )));
    }
    if let Some(bad) = x0.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::domain(format!(
            "initial rate must be nonnegative, got {bad}"
        )));
    }
    let dims = Dims::new(n, 1, d)?;
    let coeffs = CirBond {
        params,
        d,
        horizon,
        sqrt_rule: SqrtRule::FullTruncation,
    };
    FbsdeProblem::new(dims, horizon, x0, Arc::new(coeffs))
}

/// Like [`make_cir_bond_multi`] but with an explicit square-root rule.
pub fn make_cir_bond_with_rule(
    params: CirParams,
    d: usize,
    horizon: f64,
    x0: Vec<f64>,
    rule: SqrtRule,
) -> Result<FbsdeProblem> {
    let n = params.len();
    let base = make_cir_bond_multi(params.clone(), n, d, horizon, x0.clone())?;
    let coeffs = CirBond {
        params,
        d,
        horizon,
        sqrt_rule: rule,
    };
    FbsdeProblem::new(base.dims, horizon, x0, Arc::new(coeffs))
}

/// Trivial dynamics: `b = sigma = f = 0`, `g = c`.
#[derive(Clone, Debug)]
pub struct Frozen {
    pub c: Vec<f64>,
}

impl Coefficients for Frozen {
    fn drift(&self, _t: f64, _x: &[f64], _y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn drift_vjp(&self, _: f64, _: &[f64], _: &[f64], _: &[f64], _: &mut [f64], _: &mut [f64]) {}
    fn diffusion_row(&self, _i: usize, _t: f64, _xi: f64, row: &mut [f64]) {
        row.fill(0.0);
    }
    fn diffusion_row_dx(&self, _i: usize, _t: f64, _xi: f64, row: &mut [f64]) {
        row.fill(0.0);
    }
    fn driver(&self, _t: f64, _x: &[f64], _y: &[f64], _z: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn driver_vjp(
        &self,
        _: f64,
        _: &[f64],
        _: &[f64],
        _: &[f64],
        _: &[f64],
        _: &mut [f64],
        _: &mut [f64],
        _: &mut [f64],
    ) {
    }
    fn terminal(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.c);
    }
    fn terminal_vjp(&self, _x: &[f64], _adj: &[f64], _adj_x: &mut [f64]) {}
    fn analytic(&self, _t: f64, _x: &[f64]) -> Option<Vec<f64>> {
        Some(self.c.clone())
    }
}

pub fn make_frozen(c: Vec<f64>, x0: Vec<f64>, horizon: f64, d: usize) -> Result<FbsdeProblem> {
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("terminal constant must be finite"));
    }
    let dims = Dims::new(x0.len(), c.len(), d)?;
    FbsdeProblem::new(dims, horizon, x0, Arc::new(Frozen { c }))
}

/// A smooth, fully coupled test problem with constant diffusion.
///
/// ```text
/// b_i   = -0.5 x_i + 0.3 sin(y_{i mod m}) + 0.1 t
/// s_il  = 0.3 if l == i mod d else 0.075
/// f_j   = -0.2 y_j tanh(x_{j mod n}) + 0.1 |z_j|^2 + 0.05 cos t
/// g_j   = (1/n) sum_i cos(x_i + j)
/// ```
#[derive(Clone, Debug)]
pub struct SmoothSurrogate {
    dims: Dims,
}

impl Coefficients for SmoothSurrogate {
    fn drift(&self, t: f64, x: &[f64], y: &[f64], out: &mut [f64]) {
        let m = self.dims.m;
        for (i, o) in out.iter_mut().enumerate() {
            *o = -0.5 * x[i] + 0.3 * y[i % m].sin() + 0.1 * t;
        }
    }

    fn drift_vjp(
        &self,
        _t: f64,
        _x: &[f64],
        y: &[f64],
        adj: &[f64],
        adj_x: &mut [f64],
        adj_y: &mut [f64],
    ) {
        let m = self.dims.m;
        for i in 0..adj_x.len() {
            adj_x[i] -= 0.5 * adj[i];
            adj_y[i % m] += 0.3 * y[i % m].cos() * adj[i];
        }
    }

    fn diffusion_row(&self, i: usize, _t: f64, _xi: f64, row: &mut [f64]) {
        let d = self.dims.d;
        for (l, r) in row.iter_mut().enumerate() {
            *r = if l == i % d { 0.3 } else { 0.075 };
        }
    }

    fn diffusion_row_dx(&self, _i: usize, _t: f64, _xi: f64, row: &mut [f64]) {
        row.fill(0.0);
    }

    fn driver(&self, t: f64, x: &[f64], y: &[f64], z: &[f64], out: &mut [f64]) {
        let Dims { n, d, .. } = self.dims;
        for (j, o) in out.iter_mut().enumerate() {
            let zz: f64 = z[j * d..(j + 1) * d].iter().map(|v| v * v).sum();
            *o = -0.2 * y[j] * x[j % n].tanh() + 0.1 * zz + 0.05 * t.cos();
        }
    }

    fn driver_vjp(
        &self,
        _t: f64,
        x: &[f64],
        y: &[f64],
        z: &[f64],
        adj: &[f64],
        adj_x: &mut [f64],
        adj_y: &mut [f64],
        adj_z: &mut [f64],
    ) {
        let Dims { n, d, .. } = self.dims;
        for j in 0..adj.len() {
            let th = x[j % n].tanh();
            adj_y[j] -= 0.2 * th * adj[j];
            adj_x[j % n] -= 0.2 * y[j] * (1.0 - th * th) * adj[j];
            for l in 0..d {
                adj_z[j * d + l] += 0.2 * z[j * d + l] * adj[j];
            }
        }
    }

    fn terminal(&self, x: &[f64], out: &mut [f64]) {
        let n = x.len() as f64;
        for (j, o) in out.iter_mut().enumerate() {
            *o = x.iter().map(|xi| (xi + j as f64).cos()).sum::<f64>() / n;
        }
    }

    fn terminal_vjp(&self, x: &[f64], adj: &[f64], adj_x: &mut [f64]) {
        let n = x.len() as f64;
        for (i, g) in adj_x.iter_mut().enumerate() {
            for (j, a) in adj.iter().enumerate() {
                *g -= (x[i] + j as f64).sin() / n * a;
            }
        }
    }
}

pub fn make_smooth_surrogate(n: usize, m: usize, d: usize) -> Result<FbsdeProblem> {
    let dims = Dims::new(n, m, d)?;
    let x0 = (0..n).map(|i| 0.5 + 0.1 * i as f64).collect();
    FbsdeProblem::new(dims, 1.0, x0, Arc::new(SmoothSurrogate { dims }))
}

fn check_bond_args(params: &CirParams, t: f64, horizon: f64, x: f64) -> Result<()> {
    if params.len() != 1 {
        return Err(Error::Shape("bond price needs scalar CIR parameters".into()));
    }
    params.validate()?;
    if !(t >= 0.0 && t <= horizon && horizon.is_finite()) {
        return Err(Error::domain(format!(
            "need 0 <= t <= T, got t={t}, T={horizon}"
        )));
    }
    if !(x >= 0.0 && x.is_finite()) {
        return Err(Error::domain(format!("rate must be nonnegative, got {x}")));
    }
    Ok(())
}

/// Returns `(ln A, B)` with `P = A exp(B x)` for time to maturity `tau`.
fn bond_affine_coeffs(a: f64, b: f64, sigma: f64, tau: f64) -> (f64, f64) {
    if tau == 0.0 {
        return (0.0, 0.0);
    }
    if sigma == 0.0 {
        // deterministic rate x(s) = b + (x - b) e^{-a s}
        let decay = if a == 0.0 {
            tau
        } else {
            -(-a * tau).exp_m1() / a
        };
        return (-b * (tau - decay), -decay);
    }
    let gamma = (a * a + 2.0 * sigma * sigma).sqrt();
    // everything divided through by e^{gamma tau}
    let e = (-gamma * tau).exp();
    let denom = (gamma - a) * e + (gamma + a);
    let ln_base = (2.0 * gamma).ln() + 0.5 * (a - gamma) * tau - denom.ln();
    let ln_a = 2.0 * a * b / (sigma * sigma) * ln_base;
    let coef_b = 2.0 * (-gamma * tau).exp_m1() / denom;
    (ln_a, coef_b)
}

/// Closed-form CIR zero-coupon bond price `E[exp(-int_t^T X_s ds) | X_t = x]`.
pub fn analytic_bond_price(params: &CirParams, t: f64, horizon: f64, x: f64) -> Result<f64> {
    check_bond_args(params, t, horizon, x)?;
    let (ln_a, coef_b) =
        bond_affine_coeffs(params.a[0], params.b[0], params.sigma[0], horizon - t);
    Ok((ln_a + coef_b * x).exp())
}

/// Derivative of [`analytic_bond_price`] with respect to the rate `x`.
pub fn analytic_bond_price_dx(params: &CirParams, t: f64, horizon: f64, x: f64) -> Result<f64> {
    check_bond_args(params, t, horizon, x)?;
    let (ln_a, coef_b) =
        bond_affine_coeffs(params.a[0], params.b[0], params.sigma[0], horizon - t);
    Ok(coef_b * (ln_a + coef_b * x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn unit() -> CirParams {
        CirParams::scalar(1.0, 1.0, 1.0).unwrap()
    }

    /// Direct transcription of the textbook formula, for cross-checking.
    fn naive_price(a: f64, b: f64, s: f64, tau: f64, x: f64) -> f64 {
        let g = (a * a + 2.0 * s * s).sqrt();
        let den = (g - a) + (g + a) * (g * tau).exp();
        let base = 2.0 * g * ((g + a) * tau / 2.0).exp() / den;
        base.powf(2.0 * a * b / (s * s)) * (2.0 * (1.0 - (g * tau).exp()) * x / den).exp()
    }

    #[test]
    fn unit_parameters_give_reference_price() {
        let p = analytic_bond_price(&unit(), 0.0, 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(p, 0.39647, epsilon = 5e-6);
    }

    #[test]
    fn stable_form_matches_direct_formula() {
        for &(a, b, s, tau, x) in &[
            (1.0, 1.0, 1.0, 1.0, 1.0),
            (2.0, 0.5, 0.3, 1.0, 1.0),
            (0.3, 0.05, 0.1, 5.0, 0.02),
            (0.0, 0.7, 0.4, 2.0, 0.3),
        ] {
            let p = CirParams::scalar(a, b, s).unwrap();
            let stable = analytic_bond_price(&p, 0.0, tau, x).unwrap();
            assert_abs_diff_eq!(stable, naive_price(a, b, s, tau, x), epsilon = 1e-12);
        }
    }

    #[test]
    fn long_maturity_does_not_overflow() {
        let p = CirParams::scalar(1.0, 0.05, 1.0).unwrap();
        let v = analytic_bond_price(&p, 0.0, 2000.0, 0.1).unwrap();
        assert!(v.is_finite() && v > 0.0 && v < 1.0);
    }

    #[test]
    fn deterministic_rate_limits() {
        let p = CirParams::scalar(0.0, 0.0, 0.0).unwrap();
        let v = analytic_bond_price(&p, 0.0, 2.0, 0.3).unwrap();
        assert_eq!(v, (-0.6f64).exp());
        let p = CirParams::scalar(0.5, 0.2, 0.0).unwrap();
        let v = analytic_bond_price(&p, 0.0, 1.0, 0.1).unwrap();
        let integral = 0.2 + (0.1 - 0.2) * (1.0 - (-0.5f64).exp()) / 0.5;
        assert_abs_diff_eq!(v, (-integral).exp(), epsilon = 1e-15);
    }

    #[test]
    fn price_at_maturity_is_one() {
        for x in [0.0, 0.3, 5.0] {
            assert_eq!(analytic_bond_price(&unit(), 2.0, 2.0, x).unwrap(), 1.0);
        }
    }

    #[test]
    fn price_domain_errors() {
        assert!(analytic_bond_price(&unit(), 1.5, 1.0, 1.0).is_err());
        assert!(analytic_bond_price(&unit(), 0.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn price_derivative_matches_central_difference() {
        let p = CirParams::scalar(2.0, 0.5, 0.3).unwrap();
        let h = 1e-6;
        let fd = (analytic_bond_price(&p, 0.2, 1.0, 0.5 + h).unwrap()
            - analytic_bond_price(&p, 0.2, 1.0, 0.5 - h).unwrap())
            / (2.0 * h);
        let exact = analytic_bond_price_dx(&p, 0.2, 1.0, 0.5).unwrap();
        assert_abs_diff_eq!(fd, exact, epsilon = 1e-8);
    }

    #[test]
    fn one_dimensional_bond_coefficients() {
        let prob = make_cir_bond_1d(unit(), 1.0, 1.0).unwrap();
        assert_eq!(prob.dims, Dims { n: 1, m: 1, d: 1 });
        assert_eq!(prob.terminal(&[7.3]), vec![1.0]);
        assert_eq!(prob.driver(0.0, &[2.0], &[3.0], &[0.0]), vec![-6.0]);
        assert_eq!(prob.drift(0.0, &[0.25], &[0.0]), vec![0.75]);
        assert_abs_diff_eq!(prob.diffusion(0.0, &[4.0])[[0, 0]], 2.0);
        assert_abs_diff_eq!(prob.analytic_y0().unwrap()[0], 0.39647, epsilon = 5e-6);
    }

    #[test]
    fn bond_constructor_errors() {
        assert!(make_cir_bond_1d(unit(), 0.0, 1.0).is_err());
        assert!(make_cir_bond_1d(unit(), -1.0, 1.0).is_err());
        assert!(make_cir_bond_1d(unit(), 1.0, -0.5).is_err());
        assert!(make_cir_bond_multi(unit(), 0, 1, 1.0, vec![]).is_err());
        assert!(CirParams::scalar(-1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn multi_bond_driver_uses_max_rate() {
        let p = CirParams::sample_unit(3, 0).unwrap();
        let prob = make_cir_bond_multi(p, 3, 1, 1.0, vec![1.0; 3]).unwrap();
        let f = prob.driver(0.0, &[0.2, 0.9, 0.4], &[2.0], &[0.0]);
        assert_abs_diff_eq!(f[0], -1.8, epsilon = 1e-15);
        assert!(prob.analytic_y0().is_none());
    }

    #[test]
    fn multi_bond_with_one_component_matches_1d() {
        let p = CirParams::scalar(0.7, 0.3, 0.4).unwrap();
        let one = make_cir_bond_1d(p.clone(), 1.0, 0.5).unwrap();
        let multi = make_cir_bond_multi(p, 1, 1, 1.0, vec![0.5]).unwrap();
        for x in [-0.2, 0.0, 0.3, 1.7] {
            assert_eq!(one.drift(0.1, &[x], &[0.4]), multi.drift(0.1, &[x], &[0.4]));
            assert_eq!(one.diffusion(0.1, &[x]), multi.diffusion(0.1, &[x]));
            assert_eq!(
                one.driver(0.1, &[x], &[0.4], &[0.2]),
                multi.driver(0.1, &[x], &[0.4], &[0.2])
            );
        }
        assert_eq!(one.analytic_y0(), multi.analytic_y0());
    }

    #[test]
    fn diffusion_placement_follows_driver_dimension() {
        let p = CirParams::new(vec![1.0; 3], vec![1.0; 3], vec![1.0, 2.0, 3.0]).unwrap();
        let shared = make_cir_bond_multi(p.clone(), 3, 1, 1.0, vec![1.0; 3]).unwrap();
        let s = shared.diffusion(0.0, &[1.0, 1.0, 1.0]);
        assert_eq!(s.shape(), &[3, 1]);
        assert_eq!(s.column(0).to_vec(), vec![1.0, 2.0, 3.0]);
        let indep = make_cir_bond_multi(p, 3, 3, 1.0, vec![1.0; 3]).unwrap();
        let s = indep.diffusion(0.0, &[1.0, 1.0, 1.0]);
        assert_eq!(s, ndarray::arr2(&[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]]));
    }

    #[test]
    fn sampled_parameters_are_in_unit_interval_and_reproducible() {
        let p = CirParams::sample_unit(100, 0).unwrap();
        assert_eq!(p, CirParams::sample_unit(100, 0).unwrap());
        assert_ne!(p, CirParams::sample_unit(100, 1).unwrap());
        for v in p.a.iter().chain(&p.b).chain(&p.sigma) {
            assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn sqrt_derivative_is_capped() {
        assert_eq!(sqrt_plus_dx(0.0), 0.0);
        assert_eq!(sqrt_plus_dx(-1.0), 0.0);
        assert_eq!(sqrt_plus_dx(SQRT_GRAD_EPS), 0.0);
        assert!(sqrt_plus_dx(2.0 * SQRT_GRAD_EPS) <= 0.5 / SQRT_GRAD_EPS.sqrt());
        assert_abs_diff_eq!(sqrt_plus_dx(4.0), 0.25);
    }

    #[test]
    fn surrogate_vjps_match_finite_differences() {
        let prob = make_smooth_surrogate(3, 2, 2).unwrap();
        let c = &prob.coeffs;
        let x = [0.3, -0.4, 0.8];
        let y = [0.5, -0.2];
        let z = [0.1, -0.3, 0.25, 0.4];
        let adj = [0.7, -1.1];
        let h = 1e-6;
        let mut ax = [0.0; 3];
        let mut ay = [0.0; 2];
        let mut az = [0.0; 4];
        c.driver_vjp(0.3, &x, &y, &z, &adj, &mut ax, &mut ay, &mut az);
        let dot = |x: &[f64], y: &[f64], z: &[f64]| {
            let mut o = [0.0; 2];
            c.driver(0.3, x, y, z, &mut o);
            o[0] * adj[0] + o[1] * adj[1]
        };
        for i in 0..3 {
            let (mut xp, mut xm) = (x, x);
            xp[i] += h;
            xm[i] -= h;
            let fd = (dot(&xp, &y, &z) - dot(&xm, &y, &z)) / (2.0 * h);
            assert_abs_diff_eq!(fd, ax[i], epsilon = 1e-8);
        }
        for j in 0..2 {
            let (mut yp, mut ym) = (y, y);
            yp[j] += h;
            ym[j] -= h;
            let fd = (dot(&x, &yp, &z) - dot(&x, &ym, &z)) / (2.0 * h);
            assert_abs_diff_eq!(fd, ay[j], epsilon = 1e-8);
        }
        for k in 0..4 {
            let (mut zp, mut zm) = (z, z);
            zp[k] += h;
            zm[k] -= h;
            let fd = (dot(&x, &y, &zp) - dot(&x, &y, &zm)) / (2.0 * h);
            assert_abs_diff_eq!(fd, az[k], epsilon = 1e-8);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn truncation_is_idempotent(
                xs in proptest::collection::vec(-5.0f64..5.0, 1..6),
                t in 0.0f64..1.0,
            ) {
                let n = xs.len();
                let p = CirParams::sample_unit(n, 3).unwrap();
                let prob = make_cir_bond_multi(p, n, 1, 1.0, vec![1.0; n]).unwrap();
                let plus: Vec<f64> = xs.iter().map(|v| v.max(0.0)).collect();
                let s = prob.diffusion(t, &xs);
                prop_assert!(s.iter().all(|v| v.is_finite()));
                prop_assert_eq!(s, prob.diffusion(t, &plus));
            }

            #[test]
            fn price_decreases_in_rate(
                a in 0.0f64..3.0, b in 0.0f64..1.0, s in 0.01f64..1.5,
                x in 0.0f64..3.0, dx in 1e-3f64..1.0, tau in 0.01f64..10.0,
            ) {
                let p = CirParams::scalar(a, b, s).unwrap();
                let lo = analytic_bond_price(&p, 0.0, tau, x).unwrap();
                let hi = analytic_bond_price(&p, 0.0, tau, x + dx).unwrap();
                prop_assert!(hi < lo);
                prop_assert!(lo > 0.0 && lo <= 1.0);
            }

            #[test]
            fn price_is_one_at_maturity(
                a in 0.0f64..3.0, b in 0.0f64..1.0, s in 0.0f64..1.5,
                x in 0.0f64..3.0, horizon in 0.0f64..10.0,
            ) {
                let p = CirParams::scalar(a, b, s).unwrap();
                prop_assert_eq!(analytic_bond_price(&p, horizon, horizon, x).unwrap(), 1.0);
            }

            // -x*y is only locally Lipschitz; on a box |y| <= L it is L-Lipschitz in x.
            #[test]
            fn driver_lipschitz_on_bounded_box(
                x in -2.0f64..2.0, x2 in -2.0f64..2.0, y in -3.0f64..3.0,
            ) {
                let prob = make_cir_bond_1d(CirParams::scalar(1.0, 1.0, 1.0).unwrap(), 1.0, 1.0).unwrap();
                let f1 = prob.driver(0.0, &[x], &[y], &[0.0])[0];
                let f2 = prob.driver(0.0, &[x2], &[y], &[0.0])[0];
                prop_assert!((f1 - f2).abs() <= 3.0 * (x - x2).abs() + 1e-12);
            }
        }
    }
}
