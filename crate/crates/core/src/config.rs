//! Run configuration files (TOML). Unknown keys are rejected.
//!
//! ```toml
//! [problem]
//! kind = "cir1d"        # cir1d | cir_multi | frozen_test
//! a = 1.0
//! b = 1.0
//! sigma = 1.0
//! x0 = 1.0
//! T = 1.0
//!
//! [train]
//! M = 1000
//! N = 100
//! iterations = 3000
//!
//! [output]
//! dir = "out/cir1d"
//! ```
//!
//! For `cir_multi`, `a`, `b`, `sigma` and `x0` take a scalar (broadcast) or a
//! vector of length `n`; omitted CIR parameters are drawn from `U[0,1]` with
//! `param_seed`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adam::AdamConfig;
use crate::error::{Error, Result};
use crate::model::{self, CirParams, FbsdeProblem};
use crate::trainer::{Reference, TrainConfig, DEFAULT_CHECKPOINTS};

pub const MAX_STATE_DIM: usize = 10_000;
pub const MAX_BROWNIAN_DIM: usize = 1_000;
pub const MAX_PATHS: usize = 1_000_000;
pub const MAX_STEPS: usize = 100_000;
/// Bound on `M * N * d`, the size of one Brownian batch.
pub const MAX_BATCH_ENTRIES: usize = 200_000_000;
pub const MAX_ITERATIONS: usize = 10_000_000;
pub const MAX_REPEATS: usize = 1_000;
pub const MAX_CHECKPOINTS: usize = 1_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    #[default]
    Cir1d,
    CirMulti,
    FrozenTest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Values {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl Values {
    fn expand(&self, n: usize, key: &str) -> Result<Vec<f64>> {
        match self {
            Values::Scalar(v) => Ok(vec![*v; n]),
            Values::Vector(v) if v.len() == n => Ok(v.clone()),
            Values::Vector(v) => Err(Error::config(format!(
                "problem.{key} has {} entries, n = {n}",
                v.len()
            ))),
        }
    }

    fn scalar(&self, key: &str) -> Result<f64> {
        match self {
            Values::Scalar(v) => Ok(*v),
            Values::Vector(v) if v.len() == 1 => Ok(v[0]),
            Values::Vector(_) => Err(Error::config(format!("problem.{key} must be a scalar"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    #[serde(default)]
    pub kind: ProblemKind,
    pub a: Option<Values>,
    pub b: Option<Values>,
    pub sigma: Option<Values>,
    pub x0: Option<Values>,
    #[serde(rename = "T")]
    pub horizon: Option<f64>,
    pub n: Option<usize>,
    pub d: Option<usize>,
    pub param_seed: Option<u64>,
    /// Terminal constant of `frozen_test`.
    pub c: Option<Values>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ReferenceSpec {
    Named(String),
    Value(f64),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(rename = "M")]
    pub batch_size: Option<usize>,
    #[serde(rename = "N")]
    pub steps: Option<usize>,
    pub iterations: Option<usize>,
    pub repeats: Option<usize>,
    pub seed: Option<u64>,
    pub lr: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    pub record_every: Option<usize>,
    pub checkpoints: Option<Vec<usize>>,
    /// `"auto"`, `"analytic"`, `"self"`, `"none"` or a number.
    pub reference: Option<ReferenceSpec>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub problem: ProblemSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub output: OutputSection,
}

/// A configuration with every default filled in and the problem built.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub kind: ProblemKind,
    /// CIR parameters after broadcasting and sampling; `None` for `frozen_test`.
    pub cir: Option<CirParams>,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
}

impl Resolved {
    pub fn problem(&self) -> &FbsdeProblem {
        &self.train.problem
    }
}

pub fn parse(text: &str) -> Result<Config> {
    toml::from_str(text).map_err(|e| Error::config(e.to_string()))
}

pub fn load(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text)
}

fn bounded(value: usize, lo: usize, hi: usize, key: &str) -> Result<usize> {
    if (lo..=hi).contains(&value) {
        Ok(value)
    } else {
        Err(Error::config(format!("{key} = {value} is outside {lo}..={hi}")))
    }
}

impl Config {
    /// Applies defaults, checks bounds and builds the problem.
    pub fn resolve(&self) -> Result<Resolved> {
        let p = &self.problem;
        let horizon = p.horizon.unwrap_or(1.0);
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::config(format!("problem.T must be positive, got {horizon}")));
        }
        let (problem, cir) = match p.kind {
            ProblemKind::Cir1d => {
                if p.n.is_some_and(|n| n != 1) || p.d.is_some_and(|d| d != 1) {
                    return Err(Error::config("cir1d has n = d = 1; use cir_multi"));
                }
                if p.c.is_some() || p.param_seed.is_some() {
                    return Err(Error::config("cir1d takes a, b, sigma, x0 and T only"));
                }
                let get = |v: &Option<Values>, key| v.as_ref().map_or(Ok(1.0), |v| v.scalar(key));
                let params = CirParams::scalar(get(&p.a, "a")?, get(&p.b, "b")?, get(&p.sigma, "sigma")?)?;
                let x0 = get(&p.x0, "x0")?;
                (model::make_cir_bond_1d(params.clone(), horizon, x0)?, Some(params))
            }
            ProblemKind::CirMulti => {
                if p.c.is_some() {
                    return Err(Error::config("problem.c only applies to frozen_test"));
                }
                let n = bounded(p.n.unwrap_or(100), 1, MAX_STATE_DIM, "problem.n")?;
                let d = bounded(p.d.unwrap_or(1), 1, MAX_BROWNIAN_DIM, "problem.d")?;
                let sampled = CirParams::sample_unit(n, p.param_seed.unwrap_or(0))?;
                let pick = |v: &Option<Values>, key, fallback: &[f64]| {
                    v.as_ref().map_or(Ok(fallback.to_vec()), |v| v.expand(n, key))
                };
                let params = CirParams::new(
                    pick(&p.a, "a", &sampled.a)?,
                    pick(&p.b, "b", &sampled.b)?,
                    pick(&p.sigma, "sigma", &sampled.sigma)?,
                )?;
                let x0 = pick(&p.x0, "x0", &vec![1.0; n])?;
                (
                    model::make_cir_bond_multi(params.clone(), n, d, horizon, x0)?,
                    Some(params),
                )
            }
            ProblemKind::FrozenTest => {
                if p.a.is_some() || p.b.is_some() || p.sigma.is_some() || p.param_seed.is_some() {
                    return Err(Error::config("frozen_test takes c, x0, n, d and T only"));
                }
                let n = bounded(p.n.unwrap_or(1), 1, MAX_STATE_DIM, "problem.n")?;
                let d = bounded(p.d.unwrap_or(1), 1, MAX_BROWNIAN_DIM, "problem.d")?;
                let c = match &p.c {
                    None => vec![0.5],
                    Some(Values::Scalar(v)) => vec![*v],
                    Some(Values::Vector(v)) if !v.is_empty() && v.len() <= MAX_STATE_DIM => {
                        v.clone()
                    }
                    Some(Values::Vector(_)) => {
                        return Err(Error::config("problem.c needs 1 to 10000 entries"))
                    }
                };
                let x0 = p.x0.as_ref().map_or(Ok(vec![0.0; n]), |v| v.expand(n, "x0"))?;
                (model::make_frozen(c, x0, horizon, d)?, None)
            }
        };

        let t = &self.train;
        let defaults = AdamConfig::default();
        let adam = AdamConfig {
            lr: t.lr.unwrap_or(defaults.lr),
            beta1: t.beta1.unwrap_or(defaults.beta1),
            beta2: t.beta2.unwrap_or(defaults.beta2),
            eps: t.eps.unwrap_or(defaults.eps),
        };
        let mut train = TrainConfig::new(problem);
        train.batch_size = bounded(t.batch_size.unwrap_or(train.batch_size), 1, MAX_PATHS, "train.M")?;
        train.steps = bounded(t.steps.unwrap_or(train.steps), 1, MAX_STEPS, "train.N")?;
        train.iterations = bounded(
            t.iterations.unwrap_or(train.iterations),
            0,
            MAX_ITERATIONS,
            "train.iterations",
        )?;
        train.repeats = bounded(t.repeats.unwrap_or(train.repeats), 1, MAX_REPEATS, "train.repeats")?;
        train.seed = t.seed.unwrap_or(0);
        train.record_every = bounded(
            t.record_every.unwrap_or(1),
            1,
            MAX_ITERATIONS,
            "train.record_every",
        )?;
        train.adam = adam;
        train.checkpoints = t
            .checkpoints
            .clone()
            .unwrap_or_else(|| DEFAULT_CHECKPOINTS.to_vec());
        if train.checkpoints.len() > MAX_CHECKPOINTS {
            return Err(Error::config(format!(
                "at most {MAX_CHECKPOINTS} checkpoints"
            )));
        }
        train.reference = match &t.reference {
            None => Reference::Auto,
            Some(ReferenceSpec::Value(v)) if v.is_finite() => Reference::Value(*v),
            Some(ReferenceSpec::Value(v)) => {
                return Err(Error::config(format!("train.reference must be finite, got {v}")))
            }
            Some(ReferenceSpec::Named(s)) => match s.as_str() {
                "auto" => Reference::Auto,
                "analytic" => Reference::Analytic,
                "self" => Reference::SelfLimit,
                "none" => Reference::None,
                other => {
                    return Err(Error::config(format!(
                        "train.reference `{other}`: expected auto, analytic, self, none or a number"
                    )))
                }
            },
        };
        let entries = train
            .batch_size
            .saturating_mul(train.steps)
            .saturating_mul(train.problem.dims.d);
        if entries > MAX_BATCH_ENTRIES {
            return Err(Error::config(format!(
                "M * N * d = {entries} exceeds {MAX_BATCH_ENTRIES}"
            )));
        }
        train.validate()?;

        Ok(Resolved {
            kind: p.kind,
            cir,
            train,
            out_dir: self.output.dir.clone().unwrap_or_else(|| PathBuf::from("out")),
        })
    }
}

/// Renders the fully resolved problem and training setup, sampled CIR
/// parameters included, as a config that reproduces the run.
pub fn render_resolved(r: &Resolved) -> String {
    let prob = r.problem();
    let t = &r.train;
    let vec_or_scalar = |v: &[f64]| {
        if v.len() == 1 {
            Values::Scalar(v[0])
        } else {
            Values::Vector(v.to_vec())
        }
    };
    let mut problem = ProblemSection {
        kind: r.kind,
        x0: Some(vec_or_scalar(&prob.x0)),
        horizon: Some(prob.horizon),
        ..ProblemSection::default()
    };
    if r.kind != ProblemKind::Cir1d {
        problem.n = Some(prob.dims.n);
        problem.d = Some(prob.dims.d);
    }
    if let Some(c) = &r.cir {
        problem.a = Some(vec_or_scalar(&c.a));
        problem.b = Some(vec_or_scalar(&c.b));
        problem.sigma = Some(vec_or_scalar(&c.sigma));
    }
    if r.kind == ProblemKind::FrozenTest {
        problem.c = prob.analytic_y0().map(|c| vec_or_scalar(&c));
    }
    let reference = match t.reference {
        Reference::Auto => ReferenceSpec::Named("auto".into()),
        Reference::Analytic => ReferenceSpec::Named("analytic".into()),
        Reference::SelfLimit => ReferenceSpec::Named("self".into()),
        Reference::None => ReferenceSpec::Named("none".into()),
        Reference::Value(v) => ReferenceSpec::Value(v),
    };
    let cfg = Config {
        problem,
        train: TrainSection {
            batch_size: Some(t.batch_size),
            steps: Some(t.steps),
            iterations: Some(t.iterations),
            repeats: Some(t.repeats),
            seed: Some(t.seed),
            lr: Some(t.adam.lr),
            beta1: Some(t.adam.beta1),
            beta2: Some(t.adam.beta2),
            eps: Some(t.adam.eps),
            record_every: Some(t.record_every),
            checkpoints: Some(t.checkpoints.clone()),
            reference: Some(reference),
        },
        output: OutputSection {
            dir: Some(r.out_dir.clone()),
        },
    };
    toml::to_string(&cfg).unwrap_or_default()
}
