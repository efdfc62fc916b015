//! CSV and text output for training runs.

use std::fmt::Write as _;

use crate::oracle::REL_ERROR_FLOOR;
use crate::trainer::{posterior_bound, RunStats, RunTrace};

pub const TRACE_HEADER: &str = "iteration,loss,y0,rel_error,posterior_bound";
pub const SUMMARY_HEADER: &str = "step,mean_y0,std_y0,mean_loss,std_loss";

/// Significant digits written for every real number.
const SIG_DIGITS: i32 = 10;

/// Plain decimal notation (no exponent) with ten significant digits.
pub fn decimal(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}").to_lowercase();
    }
    if v == 0.0 {
        return "0".into();
    }
    let exp = v.abs().log10().floor() as i32;
    let places = (SIG_DIGITS - 1 - exp).clamp(0, 340) as usize;
    let s = format!("{v:.places$}");
    // rounding may carry into a new leading digit; one extra place is harmless
    if s.contains('.') {
        let s = s.trim_end_matches('0');
        s.trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// `|y0 - reference| / max(|reference|, REL_ERROR_FLOOR)`.
pub fn rel_error(y0: f64, reference: f64) -> f64 {
    (y0 - reference).abs() / reference.abs().max(REL_ERROR_FLOOR)
}

pub fn trace_csv(run: &RunTrace, reference: Option<f64>, steps: usize) -> String {
    let mut out = String::with_capacity(64 * (run.rows.len() + 1));
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for row in &run.rows {
        let rel = reference
            .map(|r| decimal(rel_error(row.y0, r)))
            .unwrap_or_default();
        let bound = posterior_bound(row.loss, steps)
            .map(decimal)
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{rel},{bound}",
            row.iteration,
            decimal(row.loss),
            decimal(row.y0)
        );
    }
    out
}

pub fn summary_csv(stats: &RunStats) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in &stats.summary {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.step,
            decimal(r.mean_y0),
            decimal(r.std_y0),
            decimal(r.mean_loss),
            decimal(r.std_loss)
        );
    }
    out
}

/// The summary as an aligned table with loss columns in scientific notation.
pub fn summary_table(stats: &RunStats) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>6}  {:>10}  {:>10}  {:>10}  {:>10}",
        "step", "mean Y0", "std Y0", "mean loss", "std loss"
    );
    for r in &stats.summary {
        let _ = writeln!(
            out,
            "{:>6}  {:>10.5}  {:>10.2e}  {:>10.2e}  {:>10.2e}",
            r.step, r.mean_y0, r.std_y0, r.mean_loss, r.std_loss
        );
    }
    let ok = stats.runs.len();
    let total = ok + stats.failures.len();
    let _ = writeln!(out, "runs: {ok} of {total} succeeded");
    if let Some(reference) = stats.reference {
        let _ = writeln!(out, "reference Y0: {}", decimal(reference));
    }
    for f in &stats.failures {
        let _ = writeln!(out, "run {} (seed {}) failed: {}", f.run, f.seed, f.message);
    }
    out
}
