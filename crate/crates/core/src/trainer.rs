//! The training loop: fresh Brownian batch per iteration, exact gradient of the
//! terminal mismatch, Adam update of `(alpha, beta)`. Repeated independent runs
//! are aggregated at fixed checkpoint steps.

use rayon::prelude::*;

use crate::adam::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::model::FbsdeProblem;
use crate::net::NetParams;
use crate::paths;
use crate::rollout;

pub const DEFAULT_CHECKPOINTS: [usize; 4] = [500, 1000, 2000, 3000];

/// What `Y_0` is compared against.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum Reference {
    /// The closed-form `u(0, x0)` if the problem has one, otherwise `SelfLimit`.
    #[default]
    Auto,
    /// The problem's closed-form `u(0, x0)`; none if unavailable.
    Analytic,
    /// Cross-run mean of the final `Y_0`.
    SelfLimit,
    Value(f64),
    None,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub problem: FbsdeProblem,
    /// Paths per iteration (`M`).
    pub batch_size: usize,
    /// Time steps (`N`).
    pub steps: usize,
    pub iterations: usize,
    pub repeats: usize,
    pub adam: AdamConfig,
    /// Master seed; run `r` uses `seed + r`.
    pub seed: u64,
    pub record_every: usize,
    pub checkpoints: Vec<usize>,
    pub reference: Reference,
}

impl TrainConfig {
    /// Defaults: 1000 paths, 100 steps, 3000 iterations, 10 runs.
    pub fn new(problem: FbsdeProblem) -> Self {
        TrainConfig {
            problem,
            batch_size: 1000,
            steps: 100,
            iterations: 3000,
            repeats: 10,
            adam: AdamConfig::default(),
            seed: 0,
            record_every: 1,
            checkpoints: DEFAULT_CHECKPOINTS.to_vec(),
            reference: Reference::Auto,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps == 0 || self.repeats == 0 || self.record_every == 0
        {
            return Err(Error::config(
                "M, N, repeats and record_every must all be at least 1",
            ));
        }
        self.adam.validate()
    }

    pub fn run_seed(&self, run: usize) -> u64 {
        self.seed.wrapping_add(run as u64)
    }

    /// Checkpoints inside the iteration budget; the final step if none are.
    pub fn effective_checkpoints(&self) -> Vec<usize> {
        let mut cps: Vec<usize> = self
            .checkpoints
            .iter()
            .copied()
            .filter(|c| *c <= self.iterations)
            .collect();
        cps.sort_unstable();
        cps.dedup();
        if cps.is_empty() {
            cps.push(self.iterations);
        }
        cps
    }

    fn records(&self, iteration: usize) -> bool {
        iteration % self.record_every == 0
            || iteration == self.iterations
            || self.checkpoints.contains(&iteration)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    /// Number of Adam updates applied before this row was taken.
    pub iteration: usize,
    /// Batch loss at the current parameters.
    pub loss: f64,
    /// First component of `alpha`.
    pub y0: f64,
}

/// Result of a single training run.
#[derive(Clone, Debug)]
pub struct RunTrace {
    pub run: usize,
    pub seed: u64,
    pub rows: Vec<TraceRow>,
    pub params: NetParams,
    /// Whether the divergence retry (learning rate halved) was used.
    pub lr_halved: bool,
}

impl RunTrace {
    pub fn at(&self, iteration: usize) -> Option<&TraceRow> {
        self.rows
            .binary_search_by_key(&iteration, |r| r.iteration)
            .ok()
            .map(|i| &self.rows[i])
    }

    pub fn last(&self) -> &TraceRow {
        self.rows.last().expect("a run records at least its initial state")
    }
}

/// One run of the training loop.
///
/// Iteration `s` draws the batch for counter `s`, evaluates the loss at the current
/// parameters, records it, then (for `s < iterations`) applies one Adam update. So
/// `iterations = 0` evaluates the initial parameters only.
///
/// A non-finite state, adjoint or update rolls back to the start of the previous
/// iteration and continues with half the learning rate. A second divergence
/// fails the run.
pub fn train(config: &TrainConfig, run: usize) -> Result<RunTrace> {
    config.validate()?;
    let problem = &config.problem;
    let seed = config.run_seed(run);
    let mut params = NetParams::init(seed, problem.dims);
    let mut adam = AdamState::new(config.adam, params.len());
    let mut saved: Option<(NetParams, AdamState)> = None;
    let mut lr_halved = false;
    let mut rows: Vec<TraceRow> = Vec::new();

    let mut it = 0;
    while it <= config.iterations {
        let batch = paths::generate(
            seed,
            it as u64,
            config.batch_size,
            config.steps,
            problem.dims.d,
            problem.horizon,
        )?;
        let before = (params.clone(), adam.clone());
        let outcome = if it < config.iterations {
            rollout::loss_and_grad(problem, &params, &batch)
                .and_then(|(report, grads)| adam.step(&mut params, &grads).map(|_| report))
        } else {
            rollout::loss(problem, &params, &batch)
        };
        match outcome {
            Ok(report) => {
                if config.records(it) {
                    rows.push(TraceRow {
                        iteration: it,
                        loss: report.loss,
                        y0: report.y0[0],
                    });
                }
                saved = Some(before);
                it += 1;
            }
            Err(e) if e.is_numerical() && !lr_halved => {
                lr_halved = true;
                if let Some((p, a)) = saved.take() {
                    params = p;
                    adam = a;
                    it -= 1;
                    rows.retain(|r| r.iteration < it);
                }
                adam.config.lr *= 0.5;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(RunTrace {
        run,
        seed,
        rows,
        params,
        lr_halved,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SummaryRow {
    pub step: usize,
    pub mean_y0: f64,
    pub std_y0: f64,
    pub mean_loss: f64,
    pub std_loss: f64,
}

#[derive(Clone, Debug)]
pub struct RunFailure {
    pub run: usize,
    pub seed: u64,
    pub message: String,
}

/// Aggregate of repeated runs.
#[derive(Clone, Debug)]
pub struct RunStats {
    pub runs: Vec<RunTrace>,
    pub failures: Vec<RunFailure>,
    pub summary: Vec<SummaryRow>,
    /// Reference `Y_0` used for relative errors, if any.
    pub reference: Option<f64>,
    /// Time steps `N` of the runs.
    pub steps: usize,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs `repeats` independent trainings (seeds `seed + r`) and aggregates them.
pub fn train_repeated(config: &TrainConfig) -> Result<RunStats> {
    config.validate()?;
    let results: Vec<Result<RunTrace>> = (0..config.repeats)
        .into_par_iter()
        .map(|r| train(config, r))
        .collect();
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(t) => runs.push(t),
            Err(e) => failures.push(RunFailure {
                run: r,
                seed: config.run_seed(r),
                message: e.to_string(),
            }),
        }
    }
    if failures.len() * 2 > config.repeats {
        return Err(Error::TooManyFailures {
            failed: failures.len(),
            total: config.repeats,
        });
    }

    let summary = config
        .effective_checkpoints()
        .into_iter()
        .map(|step| {
            let (y0s, losses): (Vec<f64>, Vec<f64>) = runs
                .iter()
                .filter_map(|r| r.at(step))
                .map(|row| (row.y0, row.loss))
                .unzip();
            let (mean_y0, std_y0) = mean_std(&y0s);
            let (mean_loss, std_loss) = mean_std(&losses);
            SummaryRow {
                step,
                mean_y0,
                std_y0,
                mean_loss,
                std_loss,
            }
        })
        .collect();

    let analytic = || config.problem.analytic_y0().map(|v| v[0]);
    let self_limit = || {
        let finals: Vec<f64> = runs.iter().map(|r| r.last().y0).collect();
        Some(mean_std(&finals).0)
    };
    let reference = match config.reference {
        Reference::Auto => analytic().or_else(self_limit),
        Reference::Analytic => analytic(),
        Reference::SelfLimit => self_limit(),
        Reference::Value(v) => Some(v),
        Reference::None => None,
    };

    Ok(RunStats {
        runs,
        failures,
        summary,
        reference,
        steps: config.steps,
    })
}

/// `sqrt(loss + 1 / ln N)`: the posterior error bound without its constant.
pub fn posterior_bound(loss: f64, steps: usize) -> Result<f64> {
    if steps < 2 {
        return Err(Error::domain(format!("need N >= 2, got {steps}")));
    }
    if !(loss >= 0.0) {
        return Err(Error::domain(format!("loss must be nonnegative, got {loss}")));
    }
    Ok((loss + 1.0 / (steps as f64).ln()).sqrt())
}

/// Empirical check of the posterior-bound shape on one run.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundCheck {
    /// `|Y_0 - Y_0*| / sqrt(loss + 1/ln N)` at the first checkpoint.
    pub kappa: f64,
    /// `(step, error, kappa * bound)` at every later checkpoint.
    pub later: Vec<(usize, f64, f64)>,
}

impl BoundCheck {
    pub fn holds(&self) -> bool {
        self.later.iter().all(|(_, err, bound)| err <= bound)
    }
}

/// Fits `kappa` at the first checkpoint and evaluates the bound at the rest.
pub fn check_posterior_bound(
    run: &RunTrace,
    reference: f64,
    steps: usize,
    checkpoints: &[usize],
) -> Result<BoundCheck> {
    let row = |c: usize| {
        run.at(c)
            .ok_or_else(|| Error::domain(format!("run {} has no row at step {c}", run.run)))
    };
    let (first, rest) = checkpoints
        .split_first()
        .ok_or_else(|| Error::domain("no checkpoints"))?;
    let r0 = row(*first)?;
    let kappa = (r0.y0 - reference).abs() / posterior_bound(r0.loss, steps)?;
    let later = rest
        .iter()
        .map(|&c| {
            let r = row(c)?;
            Ok((
                c,
                (r.y0 - reference).abs(),
                kappa * posterior_bound(r.loss, steps)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BoundCheck { kappa, later })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::make_frozen;
    use approx::assert_abs_diff_eq;

    fn frozen_config(c: f64) -> TrainConfig {
        let problem = make_frozen(vec![c], vec![0.0], 1.0, 1).unwrap();
        let mut cfg = TrainConfig::new(problem);
        cfg.batch_size = 64;
        cfg.steps = 5;
        cfg.repeats = 1;
        cfg.checkpoints = vec![100, 500];
        cfg
    }

    #[test]
    fn zero_iterations_records_initial_state_only() {
        let mut cfg = frozen_config(0.7);
        cfg.iterations = 0;
        let run = train(&cfg, 0).unwrap();
        assert_eq!(run.rows.len(), 1);
        assert_eq!(run.rows[0].iteration, 0);
        assert_eq!(run.params, NetParams::init(cfg.seed, cfg.problem.dims));
        let stats = train_repeated(&cfg).unwrap();
        assert_eq!(stats.summary.len(), 1);
        assert_eq!(stats.summary[0].step, 0);
        assert_eq!(stats.summary[0].std_y0, 0.0);
    }

    #[test]
    fn frozen_alpha_converges_to_terminal_constant() {
        let mut cfg = frozen_config(0.3);
        cfg.iterations = 500;
        let run = train(&cfg, 0).unwrap();
        assert!((run.last().y0 - 0.3).abs() <= 1e-3, "alpha {}", run.last().y0);
        assert_eq!(run.rows.len(), 501);
        assert!(!run.lr_halved);
    }

    #[test]
    fn single_repeat_has_zero_spread() {
        let mut cfg = frozen_config(0.5);
        cfg.iterations = 100;
        let stats = train_repeated(&cfg).unwrap();
        assert_eq!(stats.summary.len(), 1);
        let row = stats.summary[0];
        let run = stats.runs[0].at(100).unwrap();
        assert_eq!(row.mean_y0, run.y0);
        assert_eq!(row.mean_loss, run.loss);
        assert_eq!(row.std_y0, 0.0);
        assert_eq!(row.std_loss, 0.0);
        assert_eq!(stats.reference, Some(0.5));
    }

    #[test]
    fn record_stride_keeps_checkpoints() {
        let mut cfg = frozen_config(0.5);
        cfg.iterations = 120;
        cfg.record_every = 50;
        cfg.checkpoints = vec![7, 120];
        let run = train(&cfg, 0).unwrap();
        let its: Vec<usize> = run.rows.iter().map(|r| r.iteration).collect();
        assert_eq!(its, vec![0, 7, 50, 100, 120]);
    }

    #[test]
    fn runs_are_reproducible() {
        let mut cfg = frozen_config(0.5);
        cfg.iterations = 20;
        let a = train(&cfg, 3).unwrap();
        let b = train(&cfg, 3).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.seed, 3);
    }

    #[test]
    fn posterior_bound_values() {
        assert_abs_diff_eq!(
            posterior_bound(5.80e-4, 100).unwrap(),
            (5.80e-4 + 1.0 / 100f64.ln()).sqrt()
        );
        // sqrt(5.80e-4 + 0.2171472) = 0.466613
        assert_abs_diff_eq!(posterior_bound(5.80e-4, 100).unwrap(), 0.466613, epsilon = 1e-6);
        assert_abs_diff_eq!(
            posterior_bound(0.0, 100).unwrap(),
            1.0 / 100f64.ln().sqrt()
        );
        let mut prev = f64::INFINITY;
        for n in [2, 10, 100, 1000, 100_000] {
            let b = posterior_bound(0.0, n).unwrap();
            assert!(b < prev);
            prev = b;
        }
        assert!(posterior_bound(0.1, 1).is_err());
        assert!(posterior_bound(-0.1, 10).is_err());
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn bound_check_fits_kappa_at_first_checkpoint() {
        let rows = vec![
            TraceRow { iteration: 10, loss: 0.5, y0: 0.9 },
            TraceRow { iteration: 20, loss: 0.1, y0: 0.6 },
            TraceRow { iteration: 30, loss: 0.1, y0: 0.45 },
        ];
        let run = RunTrace {
            run: 0,
            seed: 0,
            rows,
            params: NetParams::init(0, crate::model::Dims::new(1, 1, 1).unwrap()),
            lr_halved: false,
        };
        let chk = check_posterior_bound(&run, 0.5, 100, &[10, 20, 30]).unwrap();
        assert_abs_diff_eq!(chk.kappa, 0.4 / posterior_bound(0.5, 100).unwrap());
        assert!(chk.later[0].1 <= chk.later[0].2);
        assert!(chk.holds());
        let mut bad = run.clone();
        bad.rows[2].y0 = 0.2;
        assert!(!check_posterior_bound(&bad, 0.5, 100, &[10, 20, 30]).unwrap().holds());
        assert!(check_posterior_bound(&run, 0.5, 100, &[10, 40]).is_err());
    }
}
