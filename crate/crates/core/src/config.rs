//! Run configuration: `[model] [mc] [solver] [output] [verify]` sections of
//! `key = value` lines (TOML syntax).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fixpoint::{PicardOptions, T0Policy};
use crate::model::{InitialDensity, LinearChain, ModelSpec, ProbePlan, TrigPerturbation};
use crate::particle::McConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// `F_1 = 0`, `F_i = x_{i-1}`.
    Kolmogorov,
    /// `n = 1`, `F = -rate (x - y)`.
    MeanReverting,
    /// `F = A x + B y + c`, matrices row-major.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub n: Option<usize>,
    pub rate: Option<f64>,
    pub a: Option<Vec<f64>>,
    pub b: Option<Vec<f64>>,
    pub c: Option<Vec<f64>>,
    #[serde(default = "one")]
    pub sigma0: f64,
    #[serde(default)]
    pub drift_amp: f64,
    #[serde(default = "one")]
    pub drift_freq: f64,
    #[serde(default)]
    pub sigma_amp: f64,
    #[serde(default = "one")]
    pub sigma_freq: f64,
    pub alpha: Option<Vec<f64>>,
    #[serde(default = "one")]
    pub horizon: f64,
    pub kappa: Option<f64>,
    pub eta: Option<f64>,
    pub lambda: Option<f64>,
    /// Mean of the Gaussian initial density (default 0).
    pub init_mean: Option<Vec<f64>>,
    /// Variances of the Gaussian initial density (default 1).
    pub init_var: Option<Vec<f64>>,
    /// Hypothesis probe box for `x`.
    #[serde(default = "probe_radius")]
    pub probe_radius: f64,
    /// Hypothesis probe box for `y`.
    pub probe_y_radius: Option<f64>,
    #[serde(default = "probe_points")]
    pub probe_points: usize,
}

fn one() -> f64 {
    1.0
}

fn probe_radius() -> f64 {
    10.0
}

fn probe_points() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    #[serde(default = "default_particles")]
    pub n_particles: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_thin")]
    pub thin: usize,
}

fn default_particles() -> usize {
    100_000
}

fn default_dt() -> f64 {
    1e-3
}

fn default_thin() -> usize {
    10
}

impl Default for McSection {
    fn default() -> Self {
        Self {
            n_particles: default_particles(),
            dt: default_dt(),
            seed: 0,
            thin: default_thin(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum T0Kind {
    Fixed,
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "default_policy")]
    pub t0_policy: T0Kind,
    /// Interval length for the fixed policy.
    #[serde(default = "default_t0")]
    pub t0: f64,
    /// Stability constant for the auto policy; estimated when absent.
    pub c0: Option<f64>,
    #[serde(default = "default_target_l")]
    pub target_l: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Skip the hypothesis probe before solving.
    #[serde(default)]
    pub skip_hypotheses: bool,
}

fn default_policy() -> T0Kind {
    T0Kind::Fixed
}

fn default_t0() -> f64 {
    0.25
}

fn default_target_l() -> f64 {
    0.5
}

fn default_tol() -> f64 {
    5e-3
}

fn default_max_iter() -> usize {
    10
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            t0_policy: default_policy(),
            t0: default_t0(),
            c0: None,
            target_l: default_target_l(),
            tol: default_tol(),
            max_iter: default_max_iter(),
            skip_hypotheses: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    /// Times at which grid-density snapshots of the solution are written.
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
    #[serde(default = "default_snapshot_nodes")]
    pub snapshot_nodes: usize,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_snapshot_nodes() -> usize {
    64
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            snapshot_times: Vec::new(),
            snapshot_nodes: default_snapshot_nodes(),
        }
    }
}

/// Names accepted in `[verify] checks`.
pub const CHECKS: [&str; 7] = ["hypotheses", "flow", "scaling", "bounds", "tail", "lower_bound", "stability"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    #[serde(default = "default_checks")]
    pub checks: Vec<String>,
    /// Time grid of the scaling check.
    #[serde(default = "default_times")]
    pub times: Vec<f64>,
    /// Time grid of the tail, lower-bound and stability checks (defaults to `times`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family_times: Option<Vec<f64>>,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Offsets of the constant omega family around the initial quantile.
    #[serde(default = "default_offsets")]
    pub omega_offsets: Vec<f64>,
    #[serde(default = "default_bound_time")]
    pub bound_time: f64,
    #[serde(default = "default_mask")]
    pub mask: f64,
}

fn default_checks() -> Vec<String> {
    CHECKS.iter().map(|s| s.to_string()).collect()
}

fn default_times() -> Vec<f64> {
    (1..=10).map(|k| k as f64 / 10.0).collect()
}

fn default_eps() -> f64 {
    0.05
}

fn default_offsets() -> Vec<f64> {
    vec![0.0, 0.5, -0.5]
}

fn default_bound_time() -> f64 {
    0.5
}

fn default_mask() -> f64 {
    6.0
}

impl VerifySection {
    pub fn family_times(&self) -> &[f64] {
        self.family_times.as_deref().unwrap_or(&self.times)
    }
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            checks: default_checks(),
            times: default_times(),
            family_times: None,
            eps: default_eps(),
            omega_offsets: default_offsets(),
            bound_time: default_bound_time(),
            mask: default_mask(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub mc: McSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub verify: VerifySection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Parse(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Dimension implied by the model section.
    pub fn n(&self) -> usize {
        match self.model.kind {
            ModelKind::MeanReverting => 1,
            _ => self.model.n.unwrap_or(1),
        }
    }

    fn field(name: &str, why: &str) -> Error {
        Error::Configuration(format!("{name}: {why}"))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let m = &self.model;
        if n == 0 {
            return Err(Self::field("model.n", "must be at least 1"));
        }
        if m.kind == ModelKind::MeanReverting && m.n.is_some_and(|v| v != 1) {
            return Err(Self::field("model.n", "mean_reverting is one-dimensional"));
        }
        if m.kind == ModelKind::Linear && m.a.is_none() {
            return Err(Self::field("model.a", "required for a linear model"));
        }
        if !(m.horizon > 0.0) {
            return Err(Self::field("model.horizon", "must be positive"));
        }
        if let Some(a) = &m.alpha {
            if a.len() != n || a.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
                return Err(Self::field("model.alpha", "needs n entries in (0,1)"));
            }
        }
        for (name, v) in [("model.init_mean", &m.init_mean), ("model.init_var", &m.init_var)] {
            if v.as_ref().is_some_and(|v| v.len() != n) {
                return Err(Self::field(name, "needs n entries"));
            }
        }
        if m.init_var.as_ref().is_some_and(|v| v.iter().any(|x| !(*x > 0.0))) {
            return Err(Self::field("model.init_var", "must be positive"));
        }
        if self.mc.n_particles < 100 {
            return Err(Self::field("mc.n_particles", "must be at least 100"));
        }
        if !(self.mc.dt > 0.0) {
            return Err(Self::field("mc.dt", "must be positive"));
        }
        if self.mc.thin == 0 {
            return Err(Self::field("mc.thin", "must be at least 1"));
        }
        let s = &self.solver;
        if !(s.tol > 0.0) {
            return Err(Self::field("solver.tol", "must be positive"));
        }
        if s.max_iter == 0 {
            return Err(Self::field("solver.max_iter", "must be at least 1"));
        }
        if s.t0_policy == T0Kind::Fixed {
            if !(s.t0 > 0.0) {
                return Err(Self::field("solver.t0", "must be positive"));
            }
            if self.mc.dt > s.t0 / 10.0 {
                return Err(Self::field("mc.dt", "must be at most t0 / 10"));
            }
        }
        if !(s.target_l > 0.0 && s.target_l < 1.0) {
            return Err(Self::field("solver.target_l", "must lie in (0,1)"));
        }
        if s.c0.is_some_and(|c| !(c >= 0.0)) {
            return Err(Self::field("solver.c0", "must be nonnegative"));
        }
        for c in &self.verify.checks {
            if !CHECKS.contains(&c.as_str()) {
                return Err(Self::field("verify.checks", &format!("unknown check '{c}'")));
            }
        }
        let v = &self.verify;
        if v.times.is_empty()
            || v.times.iter().any(|t| !(*t > 0.0 && *t <= m.horizon))
            || v.times.windows(2).any(|w| !(w[1] > w[0]))
        {
            return Err(Self::field("verify.times", "must be increasing in (0, horizon]"));
        }
        if let Some(ft) = &v.family_times {
            if ft.is_empty()
                || ft.iter().any(|t| !(*t > 0.0 && *t <= m.horizon))
                || ft.windows(2).any(|w| !(w[1] > w[0]))
            {
                return Err(Self::field("verify.family_times", "must be increasing in (0, horizon]"));
            }
        }
        if !(v.eps > 0.0 && v.eps < 1.0) {
            return Err(Self::field("verify.eps", "must lie in (0,1)"));
        }
        if !(v.bound_time > 0.0 && v.bound_time <= m.horizon) {
            return Err(Self::field("verify.bound_time", "must lie in (0, horizon]"));
        }
        if self.output.snapshot_times.iter().any(|t| !(*t > 0.0 && *t <= m.horizon)) {
            return Err(Self::field("output.snapshot_times", "must lie in (0, horizon]"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialisation of the effective configuration,
    /// excluding the output directory.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.output.dir = PathBuf::new();
        let text = toml::to_string(&canon).expect("config serialises");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn chain(&self) -> Result<LinearChain> {
        let m = &self.model;
        let n = self.n();
        let mut chain = match m.kind {
            ModelKind::Kolmogorov => LinearChain::kolmogorov(n),
            ModelKind::MeanReverting => LinearChain::mean_reverting(m.rate.unwrap_or(1.0)),
            ModelKind::Linear => LinearChain::new(n, m.a.clone().unwrap_or_default()),
        };
        if let Some(b) = &m.b {
            chain.b = b.clone();
        }
        if let Some(c) = &m.c {
            chain.c = c.clone();
        }
        chain.sigma0 = m.sigma0;
        chain.trig = TrigPerturbation {
            drift_amp: m.drift_amp,
            drift_freq: m.drift_freq,
            sigma_amp: m.sigma_amp,
            sigma_freq: m.sigma_freq,
        };
        Ok(chain)
    }

    pub fn spec(&self) -> Result<ModelSpec> {
        let m = &self.model;
        let n = self.n();
        let mut b = self.chain()?.builder()?.horizon(m.horizon).alpha(m.alpha.clone().unwrap_or_else(|| vec![0.5; n]));
        if let Some(k) = m.kappa {
            b = b.kappa(k);
        }
        if let Some(e) = m.eta {
            b = b.eta(e);
        }
        if let Some(l) = m.lambda {
            b = b.lambda(l);
        }
        b.build()
    }

    pub fn init(&self) -> Result<InitialDensity> {
        let n = self.n();
        InitialDensity::gaussian(
            self.model.init_mean.clone().unwrap_or_else(|| vec![0.0; n]),
            self.model.init_var.clone().unwrap_or_else(|| vec![1.0; n]),
        )
    }

    pub fn mc(&self) -> McConfig {
        McConfig {
            n_particles: self.mc.n_particles,
            dt: self.mc.dt,
            seed: self.mc.seed,
            thin: self.mc.thin,
        }
    }

    pub fn picard(&self) -> PicardOptions {
        PicardOptions {
            tol: self.solver.tol,
            max_iter: self.solver.max_iter,
        }
    }

    /// The fixed policy, or the auto policy with the given constant.
    pub fn policy(&self, c0: Option<f64>) -> T0Policy {
        match self.solver.t0_policy {
            T0Kind::Fixed => T0Policy::Fixed(self.solver.t0),
            T0Kind::Auto => T0Policy::Auto {
                c0: c0.or(self.solver.c0).unwrap_or(0.0),
                target_l: self.solver.target_l,
                subsample: 5000,
            },
        }
    }

    pub fn probe_plan(&self) -> ProbePlan {
        ProbePlan {
            points: self.model.probe_points,
            radius: self.model.probe_radius,
            y_radius: self.model.probe_y_radius,
            seed: self.mc.seed,
            ..ProbePlan::default()
        }
    }
}

/// Bundled example configurations by name.
pub fn example(name: &str) -> Option<&'static str> {
    match name {
        "kolmogorov" => Some(include_str!("../configs/kolmogorov.toml")),
        "toy" => Some(include_str!("../configs/toy.toml")),
        _ => None,
    }
}
