//! Flat `key = value` run configuration.
//!
//! One assignment per line; `#` starts a comment; keys may appear once.
//! Unknown and duplicate keys are rejected so a typo cannot silently fall
//! back to a default.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use mfld::{
    AdjointMode, BrownianPaths, FlowConfig, InitSampler, LqParams, ParticleControl, Problem,
    TimeGrid,
};

use crate::problems::scalar_tanh_policy;

/// A malformed or inconsistent configuration. Maps to exit code 2.
#[derive(Debug, Clone)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

/// Which problem family the run optimizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProblemKind {
    /// Linear state, quadratic cost; every reference quantity is closed
    /// form, so this is the family the verification battery runs on.
    Lq(LqParams),
    /// Scalar single-layer tanh policy demo.
    Nn,
}

/// Which backward solver refreshes the costate during the flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjointChoice {
    Riccati,
    Regression,
}

/// A fully validated run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub problem: ProblemKind,
    /// Physical horizon T of the control problem.
    pub horizon: f64,
    /// Time steps K.
    pub steps: usize,
    /// Outer Monte Carlo paths M.
    pub outer: usize,
    /// Particles per cloud N.
    pub inner: usize,
    /// State dimension d.
    pub state_dim: usize,
    /// Action dimension p.
    pub action_dim: usize,
    pub sigma: f64,
    /// Exponent of the path-space Wasserstein metric.
    pub q_metric: f64,
    /// Flow step size.
    pub ds: f64,
    /// Flow horizon.
    pub total_s: f64,
    /// Langevin steps between forward/backward refreshes.
    pub refresh_stride: usize,
    /// Langevin steps between trace checkpoints.
    pub checkpoint_stride: usize,
    pub adjoint_mode: AdjointChoice,
    /// Master seed; see [`RunConfig::outer_seed`] and friends for the
    /// derived streams.
    pub seed: u64,
    /// Initial state of the forward process, length `state_dim`.
    pub xi: Vec<f64>,
    /// Multiplier on every numeric tolerance of the verification battery.
    /// Wall-clock bounds are not scaled.
    pub tol_scale: f64,
}

/// Keys the parser accepts. Anything else is an error.
const KNOWN_KEYS: &[&str] = &[
    "problem",
    "T",
    "K",
    "M",
    "N",
    "d",
    "p",
    "sigma",
    "q_metric",
    "ds",
    "total_s",
    "refresh_stride",
    "checkpoint_stride",
    "adjoint_mode",
    "seed",
    "xi",
    "b",
    "c",
    "q_run",
    "r_run",
    "g_term_quad",
    "g_term_lin",
    "gamma",
    "tol_scale",
];

const LQ_KEYS: &[&str] = &["b", "c", "q_run", "r_run", "g_term_quad", "g_term_lin", "gamma"];

struct Raw<'a> {
    map: BTreeMap<&'a str, &'a str>,
}

impl<'a> Raw<'a> {
    fn require(&self, key: &str) -> Result<&'a str, ConfigError> {
        match self.map.get(key) {
            Some(v) => Ok(v),
            None => err(format!("missing key: {key}")),
        }
    }

    fn f64_req(&self, key: &str) -> Result<f64, ConfigError> {
        parse_f64(key, self.require(key)?)
    }

    fn f64_opt(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.map.get(key) {
            Some(v) => parse_f64(key, v),
            None => Ok(default),
        }
    }

    fn usize_req(&self, key: &str) -> Result<usize, ConfigError> {
        parse_usize(key, self.require(key)?)
    }

    fn usize_opt(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        match self.map.get(key) {
            Some(v) => parse_usize(key, v),
            None => Ok(default),
        }
    }
}

fn parse_f64(key: &str, raw: &str) -> Result<f64, ConfigError> {
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => err(format!("invalid value for {key}: '{raw}'")),
    }
}

fn parse_usize(key: &str, raw: &str) -> Result<usize, ConfigError> {
    match raw.parse::<usize>() {
        Ok(v) => Ok(v),
        _ => err(format!("invalid value for {key}: '{raw}'")),
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut map: BTreeMap<&str, &str> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = match line.find('#') {
                Some(pos) => &line[..pos],
                None => line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return err(format!("line {}: expected key = value, got '{line}'", lineno + 1));
            };
            let (key, value) = (key.trim(), value.trim());
            if !KNOWN_KEYS.contains(&key) {
                return err(format!("unknown key: {key}"));
            }
            if value.is_empty() {
                return err(format!("empty value for {key}"));
            }
            if map.insert(key, value).is_some() {
                return err(format!("duplicate key: {key}"));
            }
        }
        let raw = Raw { map };

        let problem_name = raw.require("problem")?;
        let state_dim = raw.usize_opt("d", 1)?;
        let action_dim = raw.usize_opt("p", 1)?;

        let problem = match problem_name {
            "lq" => {
                if state_dim != 1 || action_dim != 1 {
                    return err("problem lq supports d = 1 and p = 1 only");
                }
                ProblemKind::Lq(LqParams {
                    b: raw.f64_req("b")?,
                    c: raw.f64_req("c")?,
                    q_run: raw.f64_req("q_run")?,
                    r_run: raw.f64_req("r_run")?,
                    g_term_quad: raw.f64_req("g_term_quad")?,
                    g_term_lin: raw.f64_req("g_term_lin")?,
                    gamma: raw.f64_opt("gamma", 1.0)?,
                })
            }
            "nn" => {
                for key in LQ_KEYS {
                    if raw.map.contains_key(key) {
                        return err(format!("key {key}: only valid for problem=lq"));
                    }
                }
                if state_dim != 1 || action_dim != 1 {
                    return err("problem nn supports d = 1 and p = 1 only");
                }
                ProblemKind::Nn
            }
            other => return err(format!("invalid value for problem: '{other}'")),
        };

        let adjoint_mode = match raw.map.get("adjoint_mode") {
            Some(&"riccati") => AdjointChoice::Riccati,
            Some(&"regression") => AdjointChoice::Regression,
            Some(other) => return err(format!("invalid value for adjoint_mode: '{other}'")),
            None => match problem {
                ProblemKind::Lq(_) => AdjointChoice::Riccati,
                ProblemKind::Nn => AdjointChoice::Regression,
            },
        };
        if adjoint_mode == AdjointChoice::Riccati && problem == ProblemKind::Nn {
            return err("adjoint_mode riccati requires problem=lq");
        }

        let xi = match raw.map.get("xi") {
            Some(v) => {
                let parts: Result<Vec<f64>, _> =
                    v.split(',').map(|p| parse_f64("xi", p.trim())).collect();
                let parts = parts?;
                if parts.len() != state_dim {
                    return err(format!("xi needs {state_dim} components, got {}", parts.len()));
                }
                parts
            }
            None => vec![0.0; state_dim],
        };

        let cfg = RunConfig {
            problem,
            horizon: raw.f64_req("T")?,
            steps: raw.usize_req("K")?,
            outer: raw.usize_req("M")?,
            inner: raw.usize_req("N")?,
            state_dim,
            action_dim,
            sigma: raw.f64_req("sigma")?,
            q_metric: raw.f64_opt("q_metric", 2.0)?,
            ds: raw.f64_req("ds")?,
            total_s: raw.f64_req("total_s")?,
            refresh_stride: raw.usize_opt("refresh_stride", 1)?,
            checkpoint_stride: raw.usize_req("checkpoint_stride")?,
            adjoint_mode,
            seed: raw
                .require("seed")?
                .parse::<u64>()
                .map_err(|_| ConfigError(format!("invalid value for seed: '{}'", raw.map["seed"])))?,
            xi,
            tol_scale: raw.f64_opt("tol_scale", 1.0)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.horizon <= 0.0 {
            return err("T must be positive");
        }
        if self.steps == 0 {
            return err("K must be at least 1");
        }
        if self.outer < 2 {
            return err("M must be at least 2");
        }
        if self.inner < 2 {
            return err("N must be at least 2");
        }
        if self.state_dim == 0 || self.action_dim == 0 {
            return err("d and p must be at least 1");
        }
        if self.sigma < 0.0 {
            return err("sigma must be nonnegative");
        }
        if self.q_metric < 1.0 {
            return err("q_metric must be at least 1");
        }
        if self.ds <= 0.0 {
            return err("ds must be positive");
        }
        if self.total_s < 0.0 {
            return err("total_s must be nonnegative");
        }
        if self.refresh_stride == 0 || self.checkpoint_stride == 0 {
            return err("refresh_stride and checkpoint_stride must be at least 1");
        }
        if self.tol_scale <= 0.0 {
            return err("tol_scale must be positive");
        }
        Ok(())
    }

    /// The linear-quadratic parameters, if this is an LQ run.
    pub fn lq_params(&self) -> Option<LqParams> {
        match self.problem {
            ProblemKind::Lq(p) => Some(p),
            ProblemKind::Nn => None,
        }
    }

    pub fn build_problem(&self) -> mfld::Result<Problem> {
        match self.problem {
            ProblemKind::Lq(params) => Problem::linear_quadratic(params),
            ProblemKind::Nn => scalar_tanh_policy(),
        }
    }

    pub fn adjoint(&self) -> AdjointMode {
        match (self.adjoint_mode, self.problem) {
            (AdjointChoice::Riccati, ProblemKind::Lq(params)) => AdjointMode::Riccati(params),
            _ => AdjointMode::regression_default(),
        }
    }

    /// Seed of the outer Brownian paths.
    pub fn outer_seed(&self) -> u64 {
        self.seed
    }

    /// Seed of the initial parameter clouds.
    pub fn init_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    /// Seed of the Langevin noise streams.
    pub fn inner_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }

    pub fn time_grid(&self) -> mfld::Result<TimeGrid> {
        TimeGrid::new(self.horizon, self.steps)
    }

    pub fn sample_noise(&self) -> mfld::Result<BrownianPaths> {
        BrownianPaths::sample(self.time_grid()?, self.outer, self.state_dim, self.outer_seed())
    }

    /// Initial control: i.i.d. standard Gaussian clouds, matching the
    /// prior of both problem families.
    pub fn sample_init(&self) -> mfld::Result<ParticleControl> {
        ParticleControl::sample(
            &InitSampler::Gaussian { mean: vec![0.0; self.action_dim], sd: 1.0 },
            self.outer,
            self.steps,
            self.inner,
            self.action_dim,
            self.q_metric,
            self.init_seed(),
        )
    }

    pub fn flow_config(&self) -> FlowConfig {
        FlowConfig {
            sigma: self.sigma,
            ds: self.ds,
            total_s: self.total_s,
            refresh_stride: self.refresh_stride,
            checkpoint_stride: self.checkpoint_stride,
            adjoint: self.adjoint(),
            inner_seed: self.inner_seed(),
        }
    }
}
