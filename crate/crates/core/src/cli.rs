//! Command-line front end.
//!
//! Exit codes:
//!
//! | code | meaning                                      |
//! |------|----------------------------------------------|
//! | 0    | success                                      |
//! | 1    | a validation or gradient check failed        |
//! | 2    | bad arguments or configuration               |
//! | 3    | numerical failure (divergence, too many failed runs) |
//! | 4    | I/O error                                    |

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint;
use crate::config::{self, ProblemKind, Resolved};
use crate::error::{Error, Result};
use crate::model::{analytic_bond_price, make_smooth_surrogate, FbsdeProblem};
use crate::net::NetParams;
use crate::oracle::{self, GradCheckReport, McEstimate};
use crate::paths::{self, PathBatch};
use crate::report;
use crate::rollout;
use crate::trainer::{self, RunStats};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Worker-count variable; never changes results.
pub const THREADS_ENV: &str = "DEEP_BSDE_THREADS";

pub const MC_PATHS: usize = 100_000;
pub const MC_STEPS: usize = 1_000;
pub const MC_TOLERANCE_SE: f64 = 3.0;

pub const GRAD_COORDINATES: usize = 100;
pub const GRAD_STEP: f64 = 1e-5;
pub const SMOOTH_THRESHOLD: f64 = 1e-4;
pub const CIR_THRESHOLD: f64 = 1e-3;
pub const GRAD_PATHS: usize = 64;
pub const GRAD_STEPS: usize = 20;
/// Smallest forward state allowed in a CIR gradient check batch.
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(name = "deep-bsde", version, about = "Deep BSDE solver for CIR bond pricing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Override `train.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override `output.dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train `repeats` independent runs and write trace and summary CSVs.
    Run { config: PathBuf },
    /// Compare the closed-form bond price with a Monte Carlo estimate.
    ValidateAnalytic { config: PathBuf },
    /// Compare reverse-mode gradients with central finite differences.
    GradCheck { config: PathBuf },
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } => EXIT_IO,
        e if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_CONFIG,
    }
}

fn load_resolved(path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<Resolved> {
    let mut cfg = config::load(path)?;
    if let Some(s) = seed {
        cfg.train.seed = Some(s);
    }
    if let Some(o) = out {
        cfg.output.dir = Some(o.to_path_buf());
    }
    cfg.resolve()
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Trains and writes `trace_run<r>.csv`, `params_run<r>.txt`, `summary.csv` and
/// `resolved.toml` into the output directory.
pub fn run(resolved: &Resolved, log: &mut impl Write) -> Result<RunStats> {
    let dir = &resolved.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("resolved.toml"), &config::render_resolved(resolved))?;
    let stats = trainer::train_repeated(&resolved.train)?;
    for r in &stats.runs {
        write_file(
            &dir.join(format!("trace_run{}.csv", r.run)),
            &report::trace_csv(r, stats.reference, stats.steps),
        )?;
        checkpoint::save(&r.params, &dir.join(format!("params_run{}.txt", r.run)))?;
    }
    write_file(&dir.join("summary.csv"), &report::summary_csv(&stats))?;
    let _ = write!(log, "{}", report::summary_table(&stats));
    let _ = writeln!(log, "wrote {}", dir.display());
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticCheck {
    pub analytic: f64,
    pub mc: McEstimate,
    pub passed: bool,
}

/// Closed-form price against the Monte Carlo oracle. `analytic_offset` is added
/// to the closed form; it exists for negative-control tests.
pub fn validate_analytic(
    resolved: &Resolved,
    paths: usize,
    steps: usize,
    analytic_offset: f64,
) -> Result<AnalyticCheck> {
    let problem = resolved.problem();
    let cir = match (&resolved.cir, problem.dims.n) {
        (Some(c), 1) => c,
        _ => {
            return Err(Error::config(
                "validate-analytic needs a one-dimensional CIR problem",
            ))
        }
    };
    let x0 = problem.x0[0];
    let analytic = analytic_bond_price(cir, 0.0, problem.horizon, x0)? + analytic_offset;
    let mc = oracle::mc_bond_price(
        cir,
        problem.dims.d,
        problem.horizon,
        &problem.x0,
        paths,
        steps,
        resolved.train.seed,
    )?;
    // rounding floor for the zero-variance case
    let tolerance = MC_TOLERANCE_SE * mc.std_error + 1e-12;
    Ok(AnalyticCheck {
        analytic,
        mc,
        passed: (analytic - mc.value).abs() <= tolerance,
    })
}

#[derive(Clone, Debug)]
pub struct GradCheckOutcome {
    pub label: String,
    pub report: GradCheckReport,
    pub threshold: f64,
    pub passed: bool,
}

impl GradCheckOutcome {
    pub fn line(&self) -> String {
        let worst = self.report.worst();
        format!(
            "{} {}: max rel error {:.3e} over {} coordinates (threshold {:.0e}){}",
            if self.passed { "PASS" } else { "FAIL" },
            self.label,
            self.report.max_rel_error(),
            self.report.checks.len(),
            self.threshold,
            worst
                .map(|w| format!(
                    ", worst #{}: reverse {:.6e}, fd {:.6e}",
                    w.coordinate, w.reverse, w.finite_difference
                ))
                .unwrap_or_default()
        )
    }
}

/// Gradient check of `problem` at `params` on `batch` over sampled coordinates.
pub fn grad_check_on(
    label: &str,
    problem: &FbsdeProblem,
    params: &NetParams,
    batch: &PathBatch,
    seed: u64,
    threshold: f64,
) -> Result<GradCheckOutcome> {
    let coords = oracle::sample_coordinates(params.len(), GRAD_COORDINATES, seed);
    let report = oracle::grad_check(problem, params, batch, &coords, GRAD_STEP)?;
    let passed = report.max_rel_error() <= threshold;
    Ok(GradCheckOutcome {
        label: label.to_string(),
        report,
        threshold,
        passed,
    })
}

/// The smooth surrogate (`n = 3`, `m = 2`, `d = 2`) at freshly initialized parameters.
pub fn smooth_grad_check(seed: u64) -> Result<GradCheckOutcome> {
    let problem = make_smooth_surrogate(3, 2, 2)?;
    let params = NetParams::init(seed, problem.dims);
    let batch = paths::generate(seed, 0, GRAD_PATHS, GRAD_STEPS, 2, problem.horizon)?;
    grad_check_on("smooth surrogate", &problem, &params, &batch, seed, SMOOTH_THRESHOLD)
}

/// First batch (by iteration counter) whose forward states stay above
/// [`KINK_MARGIN`] under `params`.
pub fn batch_away_from_kink(
    problem: &FbsdeProblem,
    params: &NetParams,
    seed: u64,
    attempts: u64,
) -> Result<PathBatch> {
    for it in 0..attempts {
        let batch = paths::generate(seed, it, GRAD_PATHS, GRAD_STEPS, problem.dims.d, problem.horizon)?;
        let (_, tape) = rollout::simulate(problem, params, &batch)?;
        if tape.min_state() > KINK_MARGIN {
            return Ok(batch);
        }
    }
    Err(Error::domain(format!(
        "no batch in {attempts} attempts keeps every state above {KINK_MARGIN}"
    )))
}

/// The problem of `resolved`: CIR at initialized parameters on a batch away from
/// the truncation kink, frozen dynamics at the all-zero parameter point.
pub fn problem_grad_check(resolved: &Resolved) -> Result<GradCheckOutcome> {
    let problem = resolved.problem();
    let seed = resolved.train.seed;
    match resolved.kind {
        ProblemKind::FrozenTest => {
            let params = NetParams::zeros(crate::net::NetShape::for_dims(problem.dims));
            let batch = paths::generate(seed, 0, GRAD_PATHS, GRAD_STEPS, problem.dims.d, problem.horizon)?;
            grad_check_on("frozen dynamics at zero", problem, &params, &batch, seed, CIR_THRESHOLD)
        }
        ProblemKind::Cir1d | ProblemKind::CirMulti => {
            let params = NetParams::init(seed, problem.dims);
            let batch = batch_away_from_kink(problem, &params, seed, 100)?;
            grad_check_on("CIR bond", problem, &params, &batch, seed, CIR_THRESHOLD)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| Error::config(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    // an already-initialized pool (tests calling twice) is not an error
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
    Ok(())
}

fn dispatch(cli: &Cli, out: &mut impl Write) -> Result<i32> {
    configure_threads()?;
    let (seed, dir) = (cli.seed, cli.out.as_deref());
    match &cli.command {
        Command::Run { config } => {
            let resolved = load_resolved(config, seed, dir)?;
            run(&resolved, out)?;
            Ok(EXIT_OK)
        }
        Command::ValidateAnalytic { config } => {
            let resolved = load_resolved(config, seed, dir)?;
            let c = validate_analytic(&resolved, MC_PATHS, MC_STEPS, 0.0)?;
            let _ = writeln!(
                out,
                "{} analytic {:.8} vs monte carlo {:.8} (se {:.2e}, {} paths, N = {}, |diff| = {:.2} se)",
                if c.passed { "PASS" } else { "FAIL" },
                c.analytic,
                c.mc.value,
                c.mc.std_error,
                c.mc.paths,
                c.mc.steps,
                c.mc.z_score(c.analytic)
            );
            Ok(if c.passed { EXIT_OK } else { EXIT_CHECK_FAILED })
        }
        Command::GradCheck { config } => {
            let resolved = load_resolved(config, seed, dir)?;
            let checks = [smooth_grad_check(resolved.train.seed)?, problem_grad_check(&resolved)?];
            for c in &checks {
                let _ = writeln!(out, "{}", c.line());
            }
            Ok(if checks.iter().all(|c| c.passed) {
                EXIT_OK
            } else {
                EXIT_CHECK_FAILED
            })
        }
    }
}

/// Runs the command line and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let mut stdout = std::io::stdout().lock();
    match dispatch(&cli, &mut stdout) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse;

    #[test]
    fn exit_codes_are_distinct() {
        let codes = [
            exit_code(&Error::config("x")),
            exit_code(&Error::OptimizerDiverged(0)),
            exit_code(&Error::io("p", std::io::Error::other("x"))),
        ];
        assert_eq!(codes, [EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO]);
        assert_ne!(EXIT_CHECK_FAILED, EXIT_OK);
    }

    #[test]
    fn parses_flags_after_subcommand() {
        let cli = Cli::try_parse_from(["deep-bsde", "run", "c.cfg", "--seed", "7", "--out", "o"]).unwrap();
        assert_eq!(cli.seed, Some(7));
        assert_eq!(cli.out.as_deref(), Some(Path::new("o")));
        assert!(matches!(cli.command, Command::Run { .. }));
        assert!(Cli::try_parse_from(["deep-bsde", "fly", "c.cfg"]).is_err());
    }

    #[test]
    fn deterministic_rate_validates_exactly() {
        let r = parse("[problem]\na = 0\nsigma = 0\nx0 = 0.05\nT = 2\n").unwrap().resolve().unwrap();
        let c = validate_analytic(&r, 1000, 50, 0.0).unwrap();
        assert!(c.passed);
        assert!((c.analytic - (-0.1f64).exp()).abs() < 1e-15);
        assert!((c.mc.value - (-0.1f64).exp()).abs() < 1e-13, "{c:?}");
        assert!(!validate_analytic(&r, 1000, 50, 0.01).unwrap().passed);
    }

    #[test]
    fn multi_dimensional_problems_have_no_analytic_check() {
        let r = parse("[problem]\nkind = 'cir_multi'\nn = 3\n").unwrap().resolve().unwrap();
        assert!(matches!(validate_analytic(&r, 1000, 50, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn frozen_zero_point_matches_exactly() {
        let r = parse("[problem]\nkind = 'frozen_test'\nc = 0.3\n").unwrap().resolve().unwrap();
        let c = problem_grad_check(&r).unwrap();
        assert!(c.passed, "{}", c.line());
        assert!(c.report.max_rel_error() < 1e-9, "{}", c.line());
    }
}
