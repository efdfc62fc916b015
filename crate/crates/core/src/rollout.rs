//! Euler rollout of the controlled forward system and its exact reverse pass.
//!
//! For each path, starting from `X_0 = x0`, `Y_0 = alpha`:
//!
//! ```text
//! Z_k     = Phi(t_k / T, X_k)
//! X_{k+1} = X_k + b(t_k, X_k, Y_k) dt + sigma(t_k, X_k) dW_k
//! Y_{k+1} = Y_k - f(t_k, X_k, Y_k, Z_k) dt + Z_k dW_k
//! ```
//!
//! for `k = 0..N-1`, and the batch loss is `(1/M) sum_p |g(X_N) - Y_N|^2`. The
//! network is never evaluated at `t_N`.
//!
//! Paths are processed in fixed chunks of [`PATH_CHUNK`]. Chunks are independent
//! and may run on any worker; their partial losses and gradients are combined
//! by a pairwise tree in chunk order, so results do not depend on the number of
//! threads.

use std::ops::Range;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Dims, FbsdeProblem};
use crate::net::{backward_batch, forward_batch, Activations, NetParams};
use crate::paths::PathBatch;

/// Number of paths per independently processed chunk.
pub const PATH_CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    /// `(1/M) sum_p |g(X_T^p) - Y_T^p|^2`.
    pub loss: f64,
    /// `|g(X_T^p) - Y_T^p|^2` for each path.
    pub mismatches: Vec<f64>,
    /// `Y_0`, i.e. `alpha`.
    pub y0: Vec<f64>,
}

/// Everything the reverse pass needs for one chunk of paths.
#[derive(Clone, Debug)]
pub struct ChunkTape {
    pub paths: Range<usize>,
    /// `N + 1` states, each `(B, n)`.
    pub x: Vec<Array2<f64>>,
    /// `N + 1` states, each `(B, m)`.
    pub y: Vec<Array2<f64>>,
    /// `N` controls, each `(B, m*d)`.
    pub z: Vec<Array2<f64>>,
    /// `N` network activation records.
    pub acts: Vec<Activations>,
    /// `g(X_N) - Y_N`, `(B, m)`.
    pub residual: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct RolloutTape<'a> {
    pub batch: &'a PathBatch,
    pub chunks: Vec<ChunkTape>,
}

impl RolloutTape<'_> {
    /// Number of stored states per path (`N + 1`).
    pub fn len(&self) -> usize {
        self.chunks.first().map_or(0, |c| c.x.len())
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    /// Smallest forward-state component seen on any path at any time.
    pub fn min_state(&self) -> f64 {
        self.chunks
            .iter()
            .flat_map(|c| c.x.iter())
            .flat_map(|x| x.iter().copied())
            .fold(f64::INFINITY, f64::min)
    }

    /// How many (path, step, component) states had `x <= 0`, i.e. were truncated
    /// in the square-root diffusion.
    pub fn truncated_count(&self) -> usize {
        self.chunks
            .iter()
            .flat_map(|c| c.x[..c.x.len() - 1].iter())
            .map(|x| x.iter().filter(|v| **v <= 0.0).count())
            .sum()
    }

    pub fn terminal_state(&self, path: usize) -> Option<ArrayView1<'_, f64>> {
        self.chunks
            .iter()
            .find(|c| c.paths.contains(&path))
            .map(|c| c.x.last().expect("non-empty tape").row(path - c.paths.start))
    }
}

fn chunk_ranges(batch_size: usize) -> Vec<Range<usize>> {
    (0..batch_size)
        .step_by(PATH_CHUNK)
        .map(|s| s..(s + PATH_CHUNK).min(batch_size))
        .collect()
}

fn check_shapes(problem: &FbsdeProblem, params: &NetParams, batch: &PathBatch) -> Result<()> {
    let dims = problem.dims;
    if params.shape().dims != dims {
        return Err(Error::Shape(format!(
            "network built for {:?}, problem has {:?}",
            params.shape().dims,
            dims
        )));
    }
    if batch.dim() != dims.d {
        return Err(Error::Shape(format!(
            "batch has Brownian dimension {}, problem needs d={}",
            batch.dim(),
            dims.d
        )));
    }
    if batch.batch_size() == 0 || batch.steps() == 0 {
        return Err(Error::Shape("empty path batch".into()));
    }
    Ok(())
}

/// Scratch buffers for per-path coefficient evaluation.
struct Scratch {
    drift: Vec<f64>,
    row: Vec<f64>,
    driver: Vec<f64>,
}

impl Scratch {
    fn new(dims: Dims) -> Self {
        Scratch {
            drift: vec![0.0; dims.n],
            row: vec![0.0; dims.d],
            driver: vec![0.0; dims.m],
        }
    }
}

/// One explicit Euler step for a single path; returns false on a non-finite state.
#[allow(clippy::too_many_arguments)]
fn euler_step(
    problem: &FbsdeProblem,
    t: f64,
    dt: f64,
    x: &[f64],
    y: &[f64],
    z: &[f64],
    dw: &[f64],
    x_next: &mut [f64],
    y_next: &mut [f64],
    s: &mut Scratch,
) -> bool {
    let c = &*problem.coeffs;
    let d = dw.len();
    c.drift(t, x, y, &mut s.drift);
    let mut finite = true;
    for i in 0..x.len() {
        c.diffusion_row(i, t, x[i], &mut s.row);
        let noise: f64 = s.row.iter().zip(dw).map(|(a, b)| a * b).sum();
        x_next[i] = x[i] + s.drift[i] * dt + noise;
        finite &= x_next[i].is_finite();
    }
    c.driver(t, x, y, z, &mut s.driver);
    for j in 0..y.len() {
        let zdw: f64 = z[j * d..(j + 1) * d]
            .iter()
            .zip(dw)
            .map(|(a, b)| a * b)
            .sum();
        y_next[j] = y[j] - s.driver[j] * dt + zdw;
        finite &= y_next[j].is_finite();
    }
    finite
}

#[inline]
fn increment_slice(inc: &[f64], path: usize, step: usize, steps: usize, d: usize) -> &[f64] {
    let start = (path * steps + step) * d;
    &inc[start..start + d]
}

fn std_slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn row(a: &Array2<f64>, p: usize) -> &[f64] {
    a.row(p).to_slice().expect("standard layout")
}

fn forward_chunk(
    problem: &FbsdeProblem,
    params: &NetParams,
    batch: &PathBatch,
    paths: Range<usize>,
) -> Result<ChunkTape> {
    let dims = problem.dims;
    let Dims { n, m, d } = dims;
    let b = paths.len();
    let steps = batch.steps();
    let dt = batch.dt;
    let inc = batch.increments.as_slice().expect("standard layout");

    let mut x = Array2::zeros((b, n));
    for mut r in x.rows_mut() {
        r.assign(&ArrayView1::from(&problem.x0));
    }
    let mut y = Array2::zeros((b, m));
    for mut r in y.rows_mut() {
        r.assign(&ArrayView1::from(params.alpha()));
    }
    let mut xs = Vec::with_capacity(steps + 1);
    let mut ys = Vec::with_capacity(steps + 1);
    let mut zs = Vec::with_capacity(steps);
    let mut acts = Vec::with_capacity(steps);
    let mut scratch = Scratch::new(dims);

    for k in 0..steps {
        let t = k as f64 * dt;
        let (z, a) = forward_batch(params, k as f64 / steps as f64, x.view());
        let mut x_next = Array2::zeros((b, n));
        let mut y_next = Array2::zeros((b, m));
        {
            let xs_now = x.as_slice().expect("standard layout");
            let ys_now = y.as_slice().expect("standard layout");
            let zs_now = z.as_slice().expect("standard layout");
            let xn = x_next.as_slice_mut().expect("standard layout");
            let yn = y_next.as_slice_mut().expect("standard layout");
            let md = m * d;
            for p in 0..b {
                let zp = &zs_now[p * md..(p + 1) * md];
                if zp.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Divergence {
                        what: "network output",
                        step: k,
                        path: paths.start + p,
                    });
                }
                let ok = euler_step(
                    problem,
                    t,
                    dt,
                    &xs_now[p * n..(p + 1) * n],
                    &ys_now[p * m..(p + 1) * m],
                    zp,
                    increment_slice(inc, paths.start + p, k, steps, d),
                    &mut xn[p * n..(p + 1) * n],
                    &mut yn[p * m..(p + 1) * m],
                    &mut scratch,
                );
                if !ok {
                    return Err(Error::Divergence {
                        what: "state",
                        step: k + 1,
                        path: paths.start + p,
                    });
                }
            }
        }
        xs.push(std::mem::replace(&mut x, x_next));
        ys.push(std::mem::replace(&mut y, y_next));
        zs.push(z);
        acts.push(a);
    }

    let mut residual = Array2::zeros((b, m));
    let mut g = vec![0.0; m];
    for p in 0..b {
        problem.coeffs.terminal(row(&x, p), &mut g);
        for j in 0..m {
            residual[[p, j]] = g[j] - y[[p, j]];
        }
    }
    xs.push(x);
    ys.push(y);
    Ok(ChunkTape {
        paths,
        x: xs,
        y: ys,
        z: zs,
        acts,
        residual,
    })
}

fn chunk_mismatches(tape: &ChunkTape) -> Vec<f64> {
    tape.residual
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v * v).sum())
        .collect()
}

/// Reverse pass over one chunk; gradients of `(1/batch_size) sum |r|^2`.
fn backward_chunk(
    problem: &FbsdeProblem,
    params: &NetParams,
    batch: &PathBatch,
    tape: &ChunkTape,
) -> Result<NetParams> {
    let dims = problem.dims;
    let Dims { n, m, d } = dims;
    let c = &*problem.coeffs;
    let b = tape.paths.len();
    let steps = tape.z.len();
    let dt = batch.dt;
    let scale = 2.0 / batch.batch_size() as f64;
    let inc = batch.increments.as_slice().expect("standard layout");

    let mut grads = NetParams::zeros(params.shape());
    let mut adj_x = Array2::<f64>::zeros((b, n));
    let mut adj_y = Array2::<f64>::zeros((b, m));
    let x_term = tape.x.last().expect("tape has states");
    let mut buf_m = vec![0.0; m];
    for p in 0..b {
        for j in 0..m {
            buf_m[j] = scale * tape.residual[[p, j]];
            adj_y[[p, j]] = -buf_m[j];
        }
        c.terminal_vjp(
            row(x_term, p),
            &buf_m,
            adj_x.row_mut(p).into_slice().expect("standard layout"),
        );
    }

    let mut buf_n = vec![0.0; n];
    let mut deriv = vec![0.0; d];
    for k in (0..steps).rev() {
        let t = k as f64 * dt;
        let (xk, yk, zk) = (&tape.x[k], &tape.y[k], &tape.z[k]);
        let mut new_x = adj_x.clone();
        let mut new_y = adj_y.clone();
        let mut adj_z = Array2::<f64>::zeros((b, m * d));
        {
            let (xs, ys, zs) = (std_slice(xk), std_slice(yk), std_slice(zk));
            let (axs, ays) = (std_slice(&adj_x), std_slice(&adj_y));
            let nxs = new_x.as_slice_mut().expect("standard layout");
            let nys = new_y.as_slice_mut().expect("standard layout");
            let azs = adj_z.as_slice_mut().expect("standard layout");
            let md = m * d;
            for p in 0..b {
                let (pn, pm, pz) = (p * n..(p + 1) * n, p * m..(p + 1) * m, p * md..(p + 1) * md);
                let (x, y, z) = (&xs[pn.clone()], &ys[pm.clone()], &zs[pz.clone()]);
                let (ax, ay) = (&axs[pn.clone()], &ays[pm.clone()]);
                let dw = increment_slice(inc, tape.paths.start + p, k, steps, d);
                let nx = &mut nxs[pn];
                let ny = &mut nys[pm];
                let az = &mut azs[pz];

                for i in 0..n {
                    buf_n[i] = ax[i] * dt;
                }
                c.drift_vjp(t, x, y, &buf_n, nx, ny);
                for i in 0..n {
                    c.diffusion_row_dx(i, t, x[i], &mut deriv);
                    let s: f64 = deriv.iter().zip(dw).map(|(a, b)| a * b).sum();
                    nx[i] += ax[i] * s;
                }
                for j in 0..m {
                    buf_m[j] = -dt * ay[j];
                }
                c.driver_vjp(t, x, y, z, &buf_m, nx, ny, az);
                for j in 0..m {
                    for l in 0..d {
                        az[j * d + l] += ay[j] * dw[l];
                    }
                }
            }
        }
        backward_batch(params, &tape.acts[k], adj_z.view(), &mut grads, new_x.view_mut());
        for p in 0..b {
            let bad = std_slice(&new_x)[p * n..(p + 1) * n]
                .iter()
                .chain(&std_slice(&new_y)[p * m..(p + 1) * m])
                .any(|v| !v.is_finite());
            if bad {
                return Err(Error::Divergence {
                    what: "adjoint",
                    step: k,
                    path: tape.paths.start + p,
                });
            }
        }
        adj_x = new_x;
        adj_y = new_y;
    }
    let ga = grads.alpha_mut();
    for (j, g) in ga.iter_mut().enumerate() {
        *g += sum_tree(adj_y.column(j).to_vec());
    }
    if !grads.is_finite() {
        return Err(Error::Divergence {
            what: "parameter gradient",
            step: 0,
            path: tape.paths.start,
        });
    }
    Ok(grads)
}

/// Pairwise reduction in index order: `((0+1)+(2+3))+...`.
pub(crate) fn tree_reduce<T>(mut items: Vec<T>, combine: impl Fn(T, T) -> T) -> Option<T> {
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(combine(a, b)),
                None => next.push(a),
            }
        }
        items = next;
    }
    items.pop()
}

fn sum_tree(values: Vec<f64>) -> f64 {
    tree_reduce(values, |a, b| a + b).unwrap_or(0.0)
}

fn first_error<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    results.into_iter().collect()
}

/// Runs the forward recursion over the whole batch.
pub fn simulate<'a>(
    problem: &FbsdeProblem,
    params: &NetParams,
    batch: &'a PathBatch,
) -> Result<(LossReport, RolloutTape<'a>)> {
    check_shapes(problem, params, batch)?;
    let chunks = first_error(
        chunk_ranges(batch.batch_size())
            .into_par_iter()
            .map(|r| forward_chunk(problem, params, batch, r))
            .collect(),
    )?;
    let mismatches: Vec<f64> = chunks.iter().flat_map(chunk_mismatches).collect();
    let partial: Vec<f64> = chunks
        .iter()
        .map(|c| sum_tree(chunk_mismatches(c)))
        .collect();
    let loss = sum_tree(partial) / batch.batch_size() as f64;
    let report = LossReport {
        loss,
        mismatches,
        y0: params.alpha().to_vec(),
    };
    Ok((report, RolloutTape { batch, chunks }))
}

/// Exact gradient of the batch loss with respect to every parameter.
pub fn backward(
    problem: &FbsdeProblem,
    params: &NetParams,
    tape: &RolloutTape<'_>,
) -> Result<NetParams> {
    check_shapes(problem, params, tape.batch)?;
    let parts = first_error(
        tape.chunks
            .par_iter()
            .map(|c| backward_chunk(problem, params, tape.batch, c))
            .collect(),
    )?;
    Ok(reduce_grads(parts, params))
}

fn reduce_grads(parts: Vec<NetParams>, params: &NetParams) -> NetParams {
    tree_reduce(parts, |mut a, b| {
        a.add_assign(&b);
        a
    })
    .unwrap_or_else(|| NetParams::zeros(params.shape()))
}

/// Loss and gradient in one pass, dropping each chunk's tape as soon as it
/// has been differentiated. Bit-identical to [`simulate`] followed by [`backward`].
pub fn loss_and_grad(
    problem: &FbsdeProblem,
    params: &NetParams,
    batch: &PathBatch,
) -> Result<(LossReport, NetParams)> {
    check_shapes(problem, params, batch)?;
    let parts = first_error(
        chunk_ranges(batch.batch_size())
            .into_par_iter()
            .map(|r| {
                let tape = forward_chunk(problem, params, batch, r)?;
                let g = backward_chunk(problem, params, batch, &tape)?;
                Ok((chunk_mismatches(&tape), g))
            })
            .collect(),
    )?;
    let mut mismatches = Vec::with_capacity(batch.batch_size());
    let mut partial = Vec::with_capacity(parts.len());
    let mut grads = Vec::with_capacity(parts.len());
    for (mm, g) in parts {
        partial.push(sum_tree(mm.clone()));
        mismatches.extend(mm);
        grads.push(g);
    }
    let loss = sum_tree(partial) / batch.batch_size() as f64;
    let report = LossReport {
        loss,
        mismatches,
        y0: params.alpha().to_vec(),
    };
    Ok((report, reduce_grads(grads, params)))
}

/// Batch loss only.
pub fn loss(problem: &FbsdeProblem, params: &NetParams, batch: &PathBatch) -> Result<LossReport> {
    simulate(problem, params, batch).map(|(r, _)| r)
}

/// Forward recursion driven by an arbitrary control `Z = control(t, x)` instead
/// of the network, e.g. the exact `Z = u_x sigma` when the decoupling field is known.
pub fn simulate_with_control<F>(
    problem: &FbsdeProblem,
    y0: &[f64],
    control: F,
    batch: &PathBatch,
) -> Result<LossReport>
where
    F: Fn(f64, &[f64]) -> Vec<f64> + Sync,
{
    let Dims { n, m, d } = problem.dims;
    if y0.len() != m || batch.dim() != d {
        return Err(Error::Shape("control rollout: y0 or batch has the wrong shape".into()));
    }
    let steps = batch.steps();
    let dt = batch.dt;
    let mismatches = first_error(
        (0..batch.batch_size())
            .into_par_iter()
            .map(|p| {
                let mut s = Scratch::new(problem.dims);
                let mut x = problem.x0.clone();
                let mut y = y0.to_vec();
                let mut xn = vec![0.0; n];
                let mut yn = vec![0.0; m];
                for k in 0..steps {
                    let t = k as f64 * dt;
                    let z = control(t, &x);
                    if z.len() != m * d {
                        return Err(Error::Shape("control returned wrong length".into()));
                    }
                    let dw = batch.increments.slice(ndarray::s![p, k, ..]);
                    let dw = dw.as_slice().expect("contiguous increments");
                    if !euler_step(problem, t, dt, &x, &y, &z, dw, &mut xn, &mut yn, &mut s) {
                        return Err(Error::Divergence {
                            what: "state",
                            step: k + 1,
                            path: p,
                        });
                    }
                    std::mem::swap(&mut x, &mut xn);
                    std::mem::swap(&mut y, &mut yn);
                }
                let g = problem.terminal(&x);
                Ok(g.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            })
            .collect(),
    )?;
    let partial: Vec<f64> = mismatches
        .chunks(PATH_CHUNK)
        .map(|c| sum_tree(c.to_vec()))
        .collect();
    Ok(LossReport {
        loss: sum_tree(partial) / batch.batch_size() as f64,
        mismatches,
        y0: y0.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_cir_bond_1d, make_frozen, CirParams};
    use crate::net::NetShape;
    use crate::paths;
    use approx::assert_abs_diff_eq;

    #[test]
    fn frozen_dynamics_loss_and_gradient_are_closed_form() {
        let prob = make_frozen(vec![0.8], vec![0.3], 1.0, 1).unwrap();
        let mut params = NetParams::init(4, prob.dims);
        params.alpha_mut()[0] = 0.25;
        let batch = paths::generate(1, 0, 256, 10, 1, 1.0).unwrap();
        let (report, tape) = simulate(&prob, &params, &batch).unwrap();
        assert_eq!(tape.len(), 11);
        // Z dW still moves Y unless the network is zero; use a zero network
        let mut zero = NetParams::zeros(params.shape());
        zero.alpha_mut()[0] = 0.25;
        let (report0, tape0) = simulate(&prob, &zero, &batch).unwrap();
        assert_eq!(report0.loss, (0.8f64 - 0.25).powi(2));
        assert_eq!(tape0.terminal_state(17).unwrap()[0], 0.3);
        let g = backward(&prob, &zero, &tape0).unwrap();
        assert_abs_diff_eq!(g.alpha()[0], 2.0 * (0.25 - 0.8), epsilon = 1e-15);
        // only the output bias feeds Y_T = alpha + b3 * sum dW
        let last = g.len() - 1;
        assert!(g.as_slice()[1..last].iter().all(|v| *v == 0.0));
        let dw_mean = batch.increments.sum() / 256.0;
        assert_abs_diff_eq!(g.as_slice()[last], -2.0 * (0.8 - 0.25) * dw_mean, epsilon = 1e-14);
        assert!(report.loss > 0.0);
    }

    #[test]
    fn doubling_terminal_quadruples_frozen_loss() {
        let batch = paths::generate(2, 0, 50, 5, 1, 1.0).unwrap();
        let p1 = make_frozen(vec![0.6], vec![0.0], 1.0, 1).unwrap();
        let p2 = make_frozen(vec![1.2], vec![0.0], 1.0, 1).unwrap();
        let params = NetParams::zeros(NetShape::for_dims(p1.dims));
        let l1 = loss(&p1, &params, &batch).unwrap().loss;
        let l2 = loss(&p2, &params, &batch).unwrap().loss;
        assert_eq!(l2, 4.0 * l1);
    }

    #[test]
    fn one_cir_step_by_hand() {
        let cir = CirParams::scalar(0.8, 0.4, 0.5).unwrap();
        let prob = make_cir_bond_1d(cir, 1.0, 0.9).unwrap();
        let mut params = NetParams::init(3, prob.dims);
        params.alpha_mut()[0] = 0.6;
        let mut batch = paths::generate(0, 0, 1, 1, 1, 1.0).unwrap();
        batch.increments[[0, 0, 0]] = 0.3;
        let (z, _) = crate::net::forward(&params, 0.0, &[0.9]);
        let z0 = z[[0, 0]];
        let (_, tape) = simulate(&prob, &params, &batch).unwrap();
        let x1 = 0.9 + 0.8 * (0.4 - 0.9) * 1.0 + 0.5 * 0.9f64.sqrt() * 0.3;
        let y1 = 0.6 + 0.9 * 0.6 * 1.0 + z0 * 0.3;
        assert_abs_diff_eq!(tape.chunks[0].x[1][[0, 0]], x1, epsilon = 1e-15);
        assert_abs_diff_eq!(tape.chunks[0].y[1][[0, 0]], y1, epsilon = 1e-15);
        assert_eq!(tape.chunks[0].z.len(), 1);
    }

    #[test]
    fn fused_pass_matches_separate_passes() {
        let prob = make_cir_bond_1d(CirParams::scalar(1.0, 1.0, 1.0).unwrap(), 1.0, 1.0).unwrap();
        let params = NetParams::init(9, prob.dims);
        let batch = paths::generate(9, 3, 300, 20, 1, 1.0).unwrap();
        let (r1, tape) = simulate(&prob, &params, &batch).unwrap();
        let g1 = backward(&prob, &params, &tape).unwrap();
        let (r2, g2) = loss_and_grad(&prob, &params, &batch).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let prob = make_frozen(vec![1.0], vec![0.0], 1.0, 2).unwrap();
        let params = NetParams::zeros(NetShape::for_dims(prob.dims));
        let batch = paths::generate(0, 0, 4, 4, 1, 1.0).unwrap();
        assert!(matches!(simulate(&prob, &params, &batch), Err(Error::Shape(_))));
    }

    #[test]
    fn divergence_reports_location() {
        let prob = make_frozen(vec![1.0], vec![0.0], 1.0, 1).unwrap();
        let mut params = NetParams::zeros(NetShape::for_dims(prob.dims));
        params.bias_mut(2)[0] = f64::INFINITY;
        let batch = paths::generate(0, 0, 4, 4, 1, 1.0).unwrap();
        match simulate(&prob, &params, &batch) {
            Err(Error::Divergence { step, path, .. }) => {
                assert_eq!(step, 0);
                assert_eq!(path, 0);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn tree_reduce_order() {
        let v = vec!["a", "b", "c", "d", "e"]
            .into_iter()
            .map(String::from)
            .collect();
        let r = tree_reduce(v, |a, b| format!("({a}{b})")).unwrap();
        assert_eq!(r, "(((ab)(cd))e)");
    }
}
