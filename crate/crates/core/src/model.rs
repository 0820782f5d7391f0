//! Problem instances: coefficients, constants, initial densities.
//!
//! A [`ModelSpec`] holds the drift `F(t, y, x)` and the scalar diffusion
//! `sigma(t, y, x)` of the chain system, where `y` is the quantile vector
//! plugged into the coefficients and `x` the state. From these it derives the
//! Fokker-Planck triple
//!
//! ```text
//! a = sigma^2
//! b = -F + e_1 * da/dx_1
//! c = -sum_i dF_i/dx_i + 1/2 d^2a/dx_1^2
//! ```
//!
//! Derivative callbacks are optional. Missing ones fall back to central
//! differences unless the fallback has been disabled on the builder.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result, Witness};
use crate::rng::{substream, Purpose};

/// `(t, y, x, out)`; writes a vector of length `n` (or `n*n`, row-major, for Jacobians).
pub type VectorField = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `(t, y, x) -> value`.
pub type ScalarField = Arc<dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync>;

/// Optional analytic derivatives. Anything left as `None` is differenced numerically.
#[derive(Clone, Default)]
pub struct Derivatives {
    /// Row-major `J[i*n + j] = dF_i/dx_j`.
    pub drift_jacobian: Option<VectorField>,
    /// `d sigma / dx_j` for all `j`.
    pub sigma_grad: Option<VectorField>,
    pub a_dx1: Option<ScalarField>,
    pub a_dx1x1: Option<ScalarField>,
    /// Gradient of `da/dx_1` with respect to all of `x`.
    pub a_dx1_grad: Option<VectorField>,
    pub c_grad: Option<VectorField>,
}

/// Central-difference step for first derivatives.
#[inline]
pub(crate) fn fd_step(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

/// Step for second differences and for differencing already-differenced quantities.
#[inline]
fn fd_step_coarse(x: f64) -> f64 {
    1e-4 * x.abs().max(1.0)
}

/// Scratch buffers for derivative evaluation in hot loops.
#[derive(Debug, Clone)]
pub struct Workspace {
    jac: Vec<f64>,
    vec: Vec<f64>,
    vec2: Vec<f64>,
    probe: Vec<f64>,
}

impl Workspace {
    pub fn new(n: usize) -> Self {
        Self {
            jac: vec![0.0; n * n],
            vec: vec![0.0; n],
            vec2: vec![0.0; n],
            probe: vec![0.0; n],
        }
    }
}

/// A problem instance of the quantile-dependent chain system (block dimension 1).
#[derive(Clone)]
pub struct ModelSpec {
    n: usize,
    horizon: f64,
    alpha: Vec<f64>,
    eta: f64,
    kappa: f64,
    lambda: f64,
    h5_floor: f64,
    finite_differences: bool,
    drift: VectorField,
    sigma: ScalarField,
    derivs: Derivatives,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("n", &self.n)
            .field("horizon", &self.horizon)
            .field("alpha", &self.alpha)
            .field("eta", &self.eta)
            .field("kappa", &self.kappa)
            .field("lambda", &self.lambda)
            .field("h5_floor", &self.h5_floor)
            .finish_non_exhaustive()
    }
}

pub struct ModelBuilder {
    n: usize,
    horizon: f64,
    alpha: Option<Vec<f64>>,
    eta: f64,
    kappa: f64,
    lambda: f64,
    h5_floor: f64,
    finite_differences: bool,
    drift: VectorField,
    sigma: ScalarField,
    derivs: Derivatives,
}

impl ModelBuilder {
    pub fn horizon(mut self, horizon: f64) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn alpha(mut self, alpha: Vec<f64>) -> Self {
        self.alpha = Some(alpha);
        self
    }

    pub fn eta(mut self, eta: f64) -> Self {
        self.eta = eta;
        self
    }

    pub fn kappa(mut self, kappa: f64) -> Self {
        self.kappa = kappa;
        self
    }

    pub fn lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    /// Lower bound `m` for `|dF_i/dx_{i-1}|`, `i >= 2`.
    pub fn h5_floor(mut self, floor: f64) -> Self {
        self.h5_floor = floor;
        self
    }

    pub fn finite_differences(mut self, enabled: bool) -> Self {
        self.finite_differences = enabled;
        self
    }

    pub fn derivatives(mut self, derivs: Derivatives) -> Self {
        self.derivs = derivs;
        self
    }

    pub fn drift_jacobian<G>(mut self, g: G) -> Self
    where
        G: Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.derivs.drift_jacobian = Some(Arc::new(g));
        self
    }

    pub fn sigma_grad<G>(mut self, g: G) -> Self
    where
        G: Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.derivs.sigma_grad = Some(Arc::new(g));
        self
    }

    pub fn build(self) -> Result<ModelSpec> {
        let n = self.n;
        if n == 0 {
            return Err(Error::Configuration("n must be positive".into()));
        }
        let alpha = self.alpha.unwrap_or_else(|| vec![0.5; n]);
        if alpha.len() != n {
            return Err(Error::Configuration(format!(
                "alpha has {} components, expected {n}",
                alpha.len()
            )));
        }
        if let Some(a) = alpha.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(Error::Configuration(format!(
                "alpha component {a} is not in (0,1)"
            )));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Configuration("horizon T must be positive".into()));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::Configuration("eta must lie in (0,1]".into()));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::Configuration("kappa must be positive".into()));
        }
        if !(self.lambda >= 1.0 && self.lambda.is_finite()) {
            return Err(Error::Configuration("Lambda must be >= 1".into()));
        }
        if !(self.h5_floor > 0.0) {
            return Err(Error::Configuration("h5 floor must be positive".into()));
        }
        Ok(ModelSpec {
            n,
            horizon: self.horizon,
            alpha,
            eta: self.eta,
            kappa: self.kappa,
            lambda: self.lambda,
            h5_floor: self.h5_floor,
            finite_differences: self.finite_differences,
            drift: self.drift,
            sigma: self.sigma,
            derivs: self.derivs,
        })
    }
}

impl ModelSpec {
    pub fn builder<F, S>(n: usize, drift: F, sigma: S) -> ModelBuilder
    where
        F: Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        S: Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync + 'static,
    {
        ModelBuilder {
            n,
            horizon: 1.0,
            alpha: None,
            eta: 1.0,
            kappa: 1.0,
            lambda: 1.0,
            h5_floor: 1e-3,
            finite_differences: true,
            drift: Arc::new(drift),
            sigma: Arc::new(sigma),
            derivs: Derivatives::default(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn h5_floor(&self) -> f64 {
        self.h5_floor
    }

    /// Copy of this spec with a different declared kappa.
    pub fn with_kappa(&self, kappa: f64) -> Self {
        Self {
            kappa,
            ..self.clone()
        }
    }

    /// Copy of this spec with a different quantile level.
    pub fn with_alpha(&self, alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() != self.n || alpha.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::Configuration(format!("invalid alpha {alpha:?}")));
        }
        Ok(Self {
            alpha,
            ..self.clone()
        })
    }

    /// Copy of this spec with a different horizon.
    pub fn with_horizon(&self, horizon: f64) -> Self {
        Self {
            horizon,
            ..self.clone()
        }
    }

    #[inline]
    pub fn drift(&self, t: f64, y: &[f64], x: &[f64], out: &mut [f64]) {
        (self.drift)(t, y, x, out)
    }

    #[inline]
    pub fn sigma(&self, t: f64, y: &[f64], x: &[f64]) -> f64 {
        (self.sigma)(t, y, x)
    }

    #[inline]
    pub fn a(&self, t: f64, y: &[f64], x: &[f64]) -> f64 {
        let s = self.sigma(t, y, x);
        s * s
    }

    /// Errors with a configuration error when a derivative has no callback and
    /// differencing has been disabled.
    pub fn ensure_derivatives(&self) -> Result<()> {
        if self.finite_differences {
            return Ok(());
        }
        let d = &self.derivs;
        let mut missing = Vec::new();
        if d.drift_jacobian.is_none() {
            missing.push("drift_jacobian");
        }
        if d.a_dx1.is_none() && d.sigma_grad.is_none() {
            missing.push("a_dx1");
        }
        if d.a_dx1x1.is_none() {
            missing.push("a_dx1x1");
        }
        if d.sigma_grad.is_none() {
            missing.push("sigma_grad");
        }
        if d.a_dx1_grad.is_none() {
            missing.push("a_dx1_grad");
        }
        if d.c_grad.is_none() {
            missing.push("c_grad");
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Configuration(format!(
                "derivative callbacks missing and finite differences disabled: {}",
                missing.join(", ")
            )))
        }
    }

    fn require(&self, present: bool, name: &str) -> Result<()> {
        if present || self.finite_differences {
            Ok(())
        } else {
            Err(Error::Configuration(format!(
                "{name} callback unavailable and finite-difference fallback disabled"
            )))
        }
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if (0.0..=self.horizon * (1.0 + 1e-12)).contains(&t) {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "time {t} outside [0, {}]",
                self.horizon
            )))
        }
    }

    /// Spatial Jacobian of the drift, row-major.
    pub fn drift_jacobian_into(
        &self,
        t: f64,
        y: &[f64],
        x: &[f64],
        out: &mut [f64],
        ws: &mut Workspace,
    ) {
        if let Some(g) = &self.derivs.drift_jacobian {
            g(t, y, x, out);
            return;
        }
        let n = self.n;
        ws.probe.copy_from_slice(x);
        for j in 0..n {
            let h = fd_step(x[j]);
            ws.probe[j] = x[j] + h;
            self.drift(t, y, &ws.probe, &mut ws.vec);
            ws.probe[j] = x[j] - h;
            self.drift(t, y, &ws.probe, &mut ws.vec2);
            ws.probe[j] = x[j];
            for i in 0..n {
                out[i * n + j] = (ws.vec[i] - ws.vec2[i]) / (2.0 * h);
            }
        }
    }

    pub fn sigma_grad_into(&self, t: f64, y: &[f64], x: &[f64], out: &mut [f64], ws: &mut Workspace) {
        if let Some(g) = &self.derivs.sigma_grad {
            g(t, y, x, out);
            return;
        }
        ws.probe.copy_from_slice(x);
        for j in 0..self.n {
            let h = fd_step(x[j]);
            ws.probe[j] = x[j] + h;
            let up = self.sigma(t, y, &ws.probe);
            ws.probe[j] = x[j] - h;
            let down = self.sigma(t, y, &ws.probe);
            ws.probe[j] = x[j];
            out[j] = (up - down) / (2.0 * h);
        }
    }

    pub fn a_dx1_with(&self, t: f64, y: &[f64], x: &[f64], ws: &mut Workspace) -> f64 {
        if let Some(g) = &self.derivs.a_dx1 {
            return g(t, y, x);
        }
        if let Some(g) = &self.derivs.sigma_grad {
            g(t, y, x, &mut ws.vec);
            return 2.0 * self.sigma(t, y, x) * ws.vec[0];
        }
        ws.probe.copy_from_slice(x);
        let h = fd_step(x[0]);
        ws.probe[0] = x[0] + h;
        let up = self.a(t, y, &ws.probe);
        ws.probe[0] = x[0] - h;
        let down = self.a(t, y, &ws.probe);
        (up - down) / (2.0 * h)
    }

    pub fn a_dx1x1_with(&self, t: f64, y: &[f64], x: &[f64], ws: &mut Workspace) -> f64 {
        if let Some(g) = &self.derivs.a_dx1x1 {
            return g(t, y, x);
        }
        if self.derivs.a_dx1.is_some() || self.derivs.sigma_grad.is_some() {
            let h = fd_step_coarse(x[0]);
            let mut p = x.to_vec();
            p[0] = x[0] + h;
            let up = self.a_dx1_with(t, y, &p, ws);
            p[0] = x[0] - h;
            let down = self.a_dx1_with(t, y, &p, ws);
            return (up - down) / (2.0 * h);
        }
        ws.probe.copy_from_slice(x);
        let h = fd_step_coarse(x[0]);
        let mid = self.a(t, y, x);
        ws.probe[0] = x[0] + h;
        let up = self.a(t, y, &ws.probe);
        ws.probe[0] = x[0] - h;
        let down = self.a(t, y, &ws.probe);
        (up - 2.0 * mid + down) / (h * h)
    }

    /// Gradient of `da/dx_1` with respect to the full state.
    pub fn a_dx1_grad_into(&self, t: f64, y: &[f64], x: &[f64], out: &mut [f64], ws: &mut Workspace) {
        if let Some(g) = &self.derivs.a_dx1_grad {
            g(t, y, x, out);
            return;
        }
        let mut p = x.to_vec();
        for j in 0..self.n {
            let h = fd_step_coarse(x[j]);
            p[j] = x[j] + h;
            let up = self.a_dx1_with(t, y, &p, ws);
            p[j] = x[j] - h;
            let down = self.a_dx1_with(t, y, &p, ws);
            p[j] = x[j];
            out[j] = (up - down) / (2.0 * h);
        }
    }

    /// Drift of the Fokker-Planck operator.
    pub fn b_into(&self, t: f64, y: &[f64], x: &[f64], out: &mut [f64], ws: &mut Workspace) {
        self.drift(t, y, x, out);
        for v in out.iter_mut() {
            *v = -*v;
        }
        out[0] += self.a_dx1_with(t, y, x, ws);
    }

    /// Jacobian of `b`, row-major.
    pub fn b_jacobian_into(&self, t: f64, y: &[f64], x: &[f64], out: &mut [f64], ws: &mut Workspace) {
        let n = self.n;
        self.drift_jacobian_into(t, y, x, out, ws);
        for v in out.iter_mut() {
            *v = -*v;
        }
        let mut g = vec![0.0; n];
        self.a_dx1_grad_into(t, y, x, &mut g, ws);
        for j in 0..n {
            out[j] += g[j];
        }
    }

    /// Zeroth-order coefficient of the Fokker-Planck operator.
    pub fn c_with(&self, t: f64, y: &[f64], x: &[f64], ws: &mut Workspace) -> f64 {
        let n = self.n;
        let mut jac = std::mem::take(&mut ws.jac);
        self.drift_jacobian_into(t, y, x, &mut jac, ws);
        let trace: f64 = (0..n).map(|i| jac[i * n + i]).sum();
        ws.jac = jac;
        -trace + 0.5 * self.a_dx1x1_with(t, y, x, ws)
    }

    pub fn c_grad_into(&self, t: f64, y: &[f64], x: &[f64], out: &mut [f64], ws: &mut Workspace) {
        if let Some(g) = &self.derivs.c_grad {
            g(t, y, x, out);
            return;
        }
        let mut p = x.to_vec();
        for j in 0..self.n {
            let h = 1e-3 * x[j].abs().max(1.0);
            p[j] = x[j] + h;
            let up = self.c_with(t, y, &p, ws);
            p[j] = x[j] - h;
            let down = self.c_with(t, y, &p, ws);
            p[j] = x[j];
            out[j] = (up - down) / (2.0 * h);
        }
    }

    /// `a = sigma^2`, checked against the ellipticity band `[1/Lambda, Lambda]`.
    pub fn eval_a(&self, t: f64, y: &[f64], x: &[f64]) -> Result<f64> {
        self.check_time(t)?;
        let a = self.a(t, y, x);
        let tol = 1e-12;
        if !(a >= 1.0 / self.lambda - tol && a <= self.lambda + tol) {
            return Err(Error::HypothesisViolation {
                what: "ellipticity (H2)",
                value: a,
                witness: Witness {
                    t,
                    y: y.to_vec(),
                    x: x.to_vec(),
                },
            });
        }
        Ok(a)
    }

    pub fn eval_b(&self, t: f64, y: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check_time(t)?;
        self.require(
            self.derivs.a_dx1.is_some() || self.derivs.sigma_grad.is_some(),
            "da/dx1",
        )?;
        let mut out = vec![0.0; self.n];
        self.b_into(t, y, x, &mut out, &mut Workspace::new(self.n));
        Ok(out)
    }

    /// `c`, checked against the bound `|c| <= 2 kappa`.
    pub fn eval_c(&self, t: f64, y: &[f64], x: &[f64]) -> Result<f64> {
        self.check_time(t)?;
        self.require(self.derivs.drift_jacobian.is_some(), "drift Jacobian")?;
        self.require(
            self.derivs.a_dx1x1.is_some()
                || self.derivs.a_dx1.is_some()
                || self.derivs.sigma_grad.is_some(),
            "d2a/dx1^2",
        )?;
        let c = self.c_with(t, y, x, &mut Workspace::new(self.n));
        if c.abs() > 2.0 * self.kappa * (1.0 + 1e-9) {
            return Err(Error::HypothesisViolation {
                what: "|c| <= 2 kappa",
                value: c,
                witness: Witness {
                    t,
                    y: y.to_vec(),
                    x: x.to_vec(),
                },
            });
        }
        Ok(c)
    }
}

/// Drift and diffusion trigonometric perturbation of a linear chain.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TrigPerturbation {
    /// `F_i += drift_amp * sin(drift_freq * x_i)`.
    pub drift_amp: f64,
    pub drift_freq: f64,
    /// `sigma = sigma0 * (1 + sigma_amp * sin(sigma_freq * x_1))`.
    pub sigma_amp: f64,
    pub sigma_freq: f64,
}

/// `F(t, y, x) = A x + B y + c` (+ trigonometric terms), `sigma = sigma0 (1 + ...)`.
///
/// Matrices are row-major `n x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearChain {
    pub n: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub sigma0: f64,
    pub trig: TrigPerturbation,
}

impl LinearChain {
    pub fn new(n: usize, a: Vec<f64>) -> Self {
        Self {
            n,
            a,
            b: vec![0.0; n * n],
            c: vec![0.0; n],
            sigma0: 1.0,
            trig: TrigPerturbation::default(),
        }
    }

    /// `F_1 = 0`, `F_i = x_{i-1}`: iterated integrals of Brownian motion.
    pub fn kolmogorov(n: usize) -> Self {
        let mut a = vec![0.0; n * n];
        for i in 1..n {
            a[i * n + (i - 1)] = 1.0;
        }
        Self::new(n, a)
    }

    /// `n = 1`, `F(t, y, x) = -(x - y)`.
    pub fn mean_reverting(rate: f64) -> Self {
        Self {
            n: 1,
            a: vec![-rate],
            b: vec![rate],
            c: vec![0.0],
            sigma0: 1.0,
            trig: TrigPerturbation::default(),
        }
    }

    /// A Lipschitz bound for `(F, sigma)` in `(x, y)`, usable as kappa.
    pub fn lipschitz_bound(&self) -> f64 {
        let fro = |m: &[f64]| m.iter().map(|v| v * v).sum::<f64>().sqrt();
        fro(&self.a)
            + fro(&self.b)
            + (self.trig.drift_amp * self.trig.drift_freq).abs()
            + (self.sigma0 * self.trig.sigma_amp * self.trig.sigma_freq).abs()
    }

    fn validate(&self) -> Result<()> {
        let n = self.n;
        if n == 0 || self.a.len() != n * n || self.b.len() != n * n || self.c.len() != n {
            return Err(Error::Configuration(format!(
                "linear chain needs A, B of length {} and c of length {n}",
                n * n
            )));
        }
        for i in 1..n {
            for j in 0..i.saturating_sub(1) {
                if self.a[i * n + j] != 0.0 {
                    return Err(Error::Configuration(format!(
                        "A[{i}][{j}] != 0 breaks the chain structure (F_{} may not depend on x_{})",
                        i + 1,
                        j + 1
                    )));
                }
            }
        }
        if !(self.sigma0 > 0.0) || self.trig.sigma_amp.abs() >= 1.0 {
            return Err(Error::Configuration(
                "sigma0 must be positive and |sigma_amp| < 1".into(),
            ));
        }
        Ok(())
    }

    /// Builder with analytic derivatives for every Fokker-Planck coefficient.
    pub fn builder(&self) -> Result<ModelBuilder> {
        self.validate()?;
        let n = self.n;
        let this = Arc::new(self.clone());

        let me = this.clone();
        let drift = move |_t: f64, y: &[f64], x: &[f64], out: &mut [f64]| {
            let tr = &me.trig;
            for i in 0..n {
                let mut v = me.c[i];
                let row = &me.a[i * n..(i + 1) * n];
                let brow = &me.b[i * n..(i + 1) * n];
                for j in 0..n {
                    v += row[j] * x[j] + brow[j] * y[j];
                }
                if tr.drift_amp != 0.0 {
                    v += tr.drift_amp * (tr.drift_freq * x[i]).sin();
                }
                out[i] = v;
            }
        };
        let me = this.clone();
        let sigma = move |_t: f64, _y: &[f64], x: &[f64]| {
            let tr = &me.trig;
            me.sigma0 * (1.0 + tr.sigma_amp * (tr.sigma_freq * x[0]).sin())
        };

        // sigma and its first three x_1-derivatives.
        let sig = {
            let me = this.clone();
            move |x1: f64| -> [f64; 4] {
                let (s0, am, fr) = (me.sigma0, me.trig.sigma_amp, me.trig.sigma_freq);
                let (sn, cs) = (fr * x1).sin_cos();
                [
                    s0 * (1.0 + am * sn),
                    s0 * am * fr * cs,
                    -s0 * am * fr * fr * sn,
                    -s0 * am * fr * fr * fr * cs,
                ]
            }
        };
        let sig = Arc::new(sig);

        let me = this.clone();
        let jac = move |_t: f64, _y: &[f64], x: &[f64], out: &mut [f64]| {
            out.copy_from_slice(&me.a);
            let tr = &me.trig;
            if tr.drift_amp != 0.0 {
                for i in 0..n {
                    out[i * n + i] += tr.drift_amp * tr.drift_freq * (tr.drift_freq * x[i]).cos();
                }
            }
        };
        let s = sig.clone();
        let sigma_grad = move |_t: f64, _y: &[f64], x: &[f64], out: &mut [f64]| {
            out.iter_mut().for_each(|v| *v = 0.0);
            out[0] = s(x[0])[1];
        };
        let s = sig.clone();
        let a_dx1 = move |_t: f64, _y: &[f64], x: &[f64]| {
            let d = s(x[0]);
            2.0 * d[0] * d[1]
        };
        let s = sig.clone();
        let a_dx1x1 = move |_t: f64, _y: &[f64], x: &[f64]| {
            let d = s(x[0]);
            2.0 * d[1] * d[1] + 2.0 * d[0] * d[2]
        };
        let s = sig.clone();
        let a_dx1_grad = move |_t: f64, _y: &[f64], x: &[f64], out: &mut [f64]| {
            let d = s(x[0]);
            out.iter_mut().for_each(|v| *v = 0.0);
            out[0] = 2.0 * d[1] * d[1] + 2.0 * d[0] * d[2];
        };
        let s = sig;
        let me = this.clone();
        let c_grad = move |_t: f64, _y: &[f64], x: &[f64], out: &mut [f64]| {
            let tr = &me.trig;
            for j in 0..n {
                out[j] = if tr.drift_amp != 0.0 {
                    tr.drift_amp * tr.drift_freq * tr.drift_freq * (tr.drift_freq * x[j]).sin()
                } else {
                    0.0
                };
            }
            let d = s(x[0]);
            // d/dx1 of (1/2) a'' = (1/2)(6 s' s'' + 2 s s''')
            out[0] += 3.0 * d[1] * d[2] + d[0] * d[3];
        };

        let derivs = Derivatives {
            drift_jacobian: Some(Arc::new(jac)),
            sigma_grad: Some(Arc::new(sigma_grad)),
            a_dx1: Some(Arc::new(a_dx1)),
            a_dx1x1: Some(Arc::new(a_dx1x1)),
            a_dx1_grad: Some(Arc::new(a_dx1_grad)),
            c_grad: Some(Arc::new(c_grad)),
        };
        let sup_a = (self.sigma0 * (1.0 + self.trig.sigma_amp.abs())).powi(2);
        let inf_a = (self.sigma0 * (1.0 - self.trig.sigma_amp.abs())).powi(2);
        let lambda = sup_a.max(1.0 / inf_a).max(1.0);
        Ok(ModelSpec::builder(n, drift, sigma)
            .derivatives(derivs)
            .kappa(self.lipschitz_bound().max(1e-6))
            .lambda(lambda))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Hypothesis {
    H1,
    H2,
    H3,
    H4,
    /// Sign-definite floor on `dF_i/dx_{i-1}`.
    H5,
    /// Hölder continuity of `dF_i/dx_{i-1}` in `x_{i-1}`.
    H5Holder,
    /// `F_i` does not depend on `x_1..x_{i-2}`.
    Chain,
}

impl fmt::Display for Hypothesis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Hypothesis::H1 => "H1",
            Hypothesis::H2 => "H2",
            Hypothesis::H3 => "H3",
            Hypothesis::H4 => "H4",
            Hypothesis::H5 => "H5",
            Hypothesis::H5Holder => "H5-holder",
            Hypothesis::Chain => "chain",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct HypothesisCheck {
    pub hypothesis: Hypothesis,
    pub passed: bool,
    /// Worst observed constant (a lower floor for H5, an upper constant otherwise).
    pub worst: f64,
    /// The declared constant it was compared against.
    pub bound: f64,
    pub witness: Option<Witness>,
}

/// Outcome of probing the hypotheses at sampled points. Passing means
/// "no violation found among the probes", never a proof.
#[derive(Debug, Clone)]
pub struct HypothesisReport {
    pub checks: Vec<HypothesisCheck>,
    pub probed_points: usize,
}

impl HypothesisReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, h: Hypothesis) -> &HypothesisCheck {
        self.checks
            .iter()
            .find(|c| c.hypothesis == h)
            .expect("every hypothesis is reported")
    }

    pub fn failures(&self) -> impl Iterator<Item = &HypothesisCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for HypothesisReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "probed_points = {}", self.probed_points)?;
        for c in &self.checks {
            write!(
                f,
                "{} = {} (probed) worst={} bound={}",
                c.hypothesis,
                if c.passed { "pass" } else { "fail" },
                c.worst,
                c.bound
            )?;
            if let Some(w) = &c.witness {
                write!(f, " witness: {w}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Sampling plan for [`validate_hypotheses`].
#[derive(Debug, Clone)]
pub struct ProbePlan {
    pub points: usize,
    /// Half-width of the box the states `x` are drawn from.
    pub radius: f64,
    /// Half-width of the box for the quantile argument `y` (defaults to `radius`).
    pub y_radius: Option<f64>,
    /// Size of the perturbation used for Lipschitz/Hölder ratios.
    pub pair_step: f64,
    pub seed: u64,
}

impl Default for ProbePlan {
    fn default() -> Self {
        Self {
            points: 10_000,
            radius: 10.0,
            y_radius: None,
            pair_step: 1e-3,
            seed: 0,
        }
    }
}

struct Tracker {
    worst: f64,
    witness: Option<Witness>,
    maximize: bool,
}

impl Tracker {
    fn max() -> Self {
        Self {
            worst: 0.0,
            witness: None,
            maximize: true,
        }
    }

    fn min() -> Self {
        Self {
            worst: f64::INFINITY,
            witness: None,
            maximize: false,
        }
    }

    fn offer(&mut self, v: f64, t: f64, y: &[f64], x: &[f64]) {
        let better = if self.maximize { v > self.worst } else { v < self.worst };
        if better || v.is_nan() {
            self.worst = v;
            self.witness = Some(Witness {
                t,
                y: y.to_vec(),
                x: x.to_vec(),
            });
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Probe (H1)-(H5) and the chain structure at random points of a box.
///
/// Violations are reported, never returned as errors.
pub fn validate_hypotheses(spec: &ModelSpec, probe: &ProbePlan) -> HypothesisReport {
    let n = spec.n;
    let kappa = spec.kappa;
    let r = probe.radius;
    let ry = probe.y_radius.unwrap_or(r);
    let step = probe.pair_step;
    let mut rng = substream(probe.seed, Purpose::Probe, 0);
    let mut ws = Workspace::new(n);

    let mut h1 = Tracker::max();
    let mut a_max = Tracker::max();
    let mut a_min = Tracker::min();
    let mut h3 = Tracker::max();
    let mut h4 = Tracker::max();
    let mut h5 = Tracker::min();
    let mut h5h = Tracker::max();
    let mut chain = Tracker::max();

    let zero = vec![0.0; n];
    let mut f0 = vec![0.0; n];
    let mut f1 = vec![0.0; n];
    let mut f2 = vec![0.0; n];
    let mut jac = vec![0.0; n * n];
    let mut jac2 = vec![0.0; n * n];

    for _ in 0..probe.points {
        let t = rng.gen::<f64>() * spec.horizon;
        let y: Vec<f64> = (0..n).map(|_| ry * (2.0 * rng.gen::<f64>() - 1.0)).collect();
        let x: Vec<f64> = (0..n).map(|_| r * (2.0 * rng.gen::<f64>() - 1.0)).collect();
        let dx: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let dy: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let (sx, sy) = (norm(&dx).max(1e-300), norm(&dy).max(1e-300));
        let xb: Vec<f64> = x.iter().zip(&dx).map(|(a, d)| a + step * d / sx).collect();
        let yb: Vec<f64> = y.iter().zip(&dy).map(|(a, d)| a + step * d / sy).collect();

        // H1
        spec.drift(t, &y, &zero, &mut f0);
        h1.offer(norm(&f0), t, &y, &zero);

        // H2
        let a = spec.a(t, &y, &x);
        a_max.offer(a, t, &y, &x);
        a_min.offer(a, t, &y, &x);

        // H3: x and y perturbed separately, so each ratio is a directional slope.
        spec.drift(t, &y, &x, &mut f1);
        let s0 = spec.sigma(t, &y, &x);
        let mut ratio = 0.0f64;
        for (xp, yp) in [(&xb, &y), (&x, &yb)] {
            spec.drift(t, yp, xp, &mut f2);
            let df = norm(&f1.iter().zip(&f2).map(|(a, b)| a - b).collect::<Vec<_>>());
            let ds = (s0 - spec.sigma(t, yp, xp)).abs();
            ratio = ratio.max((df + ds) / step);
        }
        h3.offer(ratio, t, &y, &x);
        let dist = 2.0 * step;

        // H4
        let app = spec.a_dx1x1_with(t, &y, &x, &mut ws);
        let app_b = spec.a_dx1x1_with(t, &yb, &xb, &mut ws);
        spec.drift_jacobian_into(t, &y, &x, &mut jac, &mut ws);
        spec.drift_jacobian_into(t, &yb, &xb, &mut jac2, &mut ws);
        let ddiag: f64 = (0..n).map(|i| (jac[i * n + i] - jac2[i * n + i]).abs()).sum();
        let h4_val = app.abs().max((app - app_b).abs() / dist).max(ddiag / dist);
        h4.offer(h4_val, t, &y, &x);

        // H5 and chain structure
        for i in 1..n {
            let g = jac[i * n + (i - 1)];
            h5.offer(g.abs(), t, &y, &x);

            let mut xs = x.clone();
            xs[i - 1] += step;
            spec.drift_jacobian_into(t, &y, &xs, &mut jac2, &mut ws);
            let g2 = jac2[i * n + (i - 1)];
            h5h.offer((g2 - g).abs() / step.powf(spec.eta), t, &y, &x);

            if i >= 2 {
                let mut xc = x.clone();
                for v in xc.iter_mut().take(i - 1) {
                    *v += 2.0 * rng.gen::<f64>() - 1.0;
                }
                spec.drift(t, &y, &xc, &mut f2);
                let rel = (f2[i] - f1[i]).abs() / (1.0 + f1[i].abs());
                chain.offer(rel, t, &y, &x);
            }
        }
    }

    let lam = spec.lambda;
    let tol = 1e-9;
    let h2_worst = a_max.worst.max(1.0 / a_min.worst);
    let h2_witness = if a_max.worst >= 1.0 / a_min.worst {
        a_max.witness
    } else {
        a_min.witness
    };
    let floor_bound = spec.h5_floor;
    let checks = vec![
        HypothesisCheck {
            hypothesis: Hypothesis::H1,
            passed: h1.worst <= kappa * (1.0 + tol),
            worst: h1.worst,
            bound: kappa,
            witness: h1.witness,
        },
        HypothesisCheck {
            hypothesis: Hypothesis::H2,
            passed: h2_worst <= lam * (1.0 + tol),
            worst: h2_worst,
            bound: lam,
            witness: h2_witness,
        },
        HypothesisCheck {
            hypothesis: Hypothesis::H3,
            passed: h3.worst <= kappa * (1.0 + 1e-6),
            worst: h3.worst,
            bound: kappa,
            witness: h3.witness,
        },
        HypothesisCheck {
            hypothesis: Hypothesis::H4,
            passed: h4.worst <= kappa * (1.0 + 1e-6),
            worst: h4.worst,
            bound: kappa,
            witness: h4.witness,
        },
        HypothesisCheck {
            hypothesis: Hypothesis::H5,
            passed: h5.worst >= floor_bound,
            worst: h5.worst,
            bound: floor_bound,
            witness: h5.witness,
        },
        HypothesisCheck {
            hypothesis: Hypothesis::H5Holder,
            passed: h5h.worst <= kappa * (1.0 + 1e-6),
            worst: h5h.worst,
            bound: kappa,
            witness: h5h.witness,
        },
        HypothesisCheck {
            hypothesis: Hypothesis::Chain,
            passed: chain.worst <= 1e-12,
            worst: chain.worst,
            bound: 1e-12,
            witness: chain.witness,
        },
    ];
    HypothesisReport {
        checks,
        probed_points: probe.points,
    }
}

pub type DensityFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type GradientFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type InverseCdf = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone)]
enum Sampler {
    /// Independent coordinates, each drawn by inverse CDF.
    Product(Vec<InverseCdf>),
    /// Rejection against `N(mean, sd^2 I)`, valid when `f <= bound * envelope`.
    Rejection { mean: Vec<f64>, sd: f64, bound: f64 },
}

/// Density of `X_0` together with its gradient and a seedable sampler.
#[derive(Clone)]
pub struct InitialDensity {
    n: usize,
    f: DensityFn,
    grad: GradientFn,
    sampler: Sampler,
}

impl fmt::Debug for InitialDensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("InitialDensity").field("n", &self.n).finish_non_exhaustive()
    }
}

fn open_unit(rng: &mut impl Rng) -> f64 {
    ((rng.gen::<u64>() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

impl InitialDensity {
    /// Product Gaussian `N(mean, diag(var))`.
    pub fn gaussian(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        let n = mean.len();
        if n == 0 || var.len() != n || var.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Configuration(
                "gaussian initial density needs matching mean/var with var > 0".into(),
            ));
        }
        let norm_const: f64 = var
            .iter()
            .map(|v| 1.0 / (2.0 * std::f64::consts::PI * v).sqrt())
            .product();
        let (m1, v1) = (mean.clone(), var.clone());
        let f = move |x: &[f64]| {
            let q: f64 = x
                .iter()
                .zip(&m1)
                .zip(&v1)
                .map(|((x, m), v)| (x - m) * (x - m) / v)
                .sum();
            norm_const * (-0.5 * q).exp()
        };
        let (m2, v2) = (mean.clone(), var.clone());
        let grad = move |x: &[f64], out: &mut [f64]| {
            let q: f64 = x
                .iter()
                .zip(&m2)
                .zip(&v2)
                .map(|((x, m), v)| (x - m) * (x - m) / v)
                .sum();
            let fx = norm_const * (-0.5 * q).exp();
            for j in 0..out.len() {
                out[j] = -fx * (x[j] - m2[j]) / v2[j];
            }
        };
        let inv: Vec<InverseCdf> = mean
            .iter()
            .zip(&var)
            .map(|(m, v)| {
                let d = Normal::new(*m, v.sqrt()).expect("validated parameters");
                Arc::new(move |u: f64| d.inverse_cdf(u)) as InverseCdf
            })
            .collect();
        Ok(Self {
            n,
            f: Arc::new(f),
            grad: Arc::new(grad),
            sampler: Sampler::Product(inv),
        })
    }

    /// Standard normal on `R^n`.
    pub fn standard_gaussian(n: usize) -> Self {
        Self::gaussian(vec![0.0; n], vec![1.0; n]).expect("valid parameters")
    }

    /// Density with independent coordinates given per-coordinate inverse CDFs.
    pub fn product<F, G>(f: F, grad: G, inverse_cdfs: Vec<InverseCdf>) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
        G: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            n: inverse_cdfs.len(),
            f: Arc::new(f),
            grad: Arc::new(grad),
            sampler: Sampler::Product(inverse_cdfs),
        }
    }

    /// General positive density sampled by rejection from a Gaussian envelope
    /// `N(mean, sd^2 I)`; `bound` must satisfy `f <= bound * envelope`.
    pub fn with_envelope<F, G>(n: usize, f: F, grad: G, mean: Vec<f64>, sd: f64, bound: f64) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
        G: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            n,
            f: Arc::new(f),
            grad: Arc::new(grad),
            sampler: Sampler::Rejection { mean, sd, bound },
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn density(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }

    #[inline]
    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        (self.grad)(x, out)
    }

    /// Draw particle `index` of the sample keyed by `seed`.
    pub fn draw_into(&self, seed: u64, index: u64, out: &mut [f64]) -> Result<()> {
        let mut rng = substream(seed, Purpose::Initial, index);
        match &self.sampler {
            Sampler::Product(inv) => {
                for (o, q) in out.iter_mut().zip(inv) {
                    *o = q(open_unit(&mut rng));
                }
                Ok(())
            }
            Sampler::Rejection { mean, sd, bound } => {
                let n = self.n;
                let norm_const = (2.0 * std::f64::consts::PI * sd * sd).powf(-(n as f64) / 2.0);
                for _ in 0..1_000_000 {
                    let mut q = 0.0;
                    for j in 0..n {
                        let z: f64 = rng.sample(StandardNormal);
                        out[j] = mean[j] + sd * z;
                        q += z * z;
                    }
                    let g = norm_const * (-0.5 * q).exp();
                    let u: f64 = rng.gen();
                    if u * bound * g <= self.density(out) {
                        return Ok(());
                    }
                }
                Err(Error::Configuration(
                    "rejection sampler failed to accept within 1e6 proposals".into(),
                ))
            }
        }
    }

    /// `count` i.i.d. draws, row-major `count x n`.
    pub fn sample(&self, count: usize, seed: u64) -> Result<Vec<f64>> {
        let n = self.n;
        let mut out = vec![0.0; count * n];
        out.par_chunks_mut(n)
            .enumerate()
            .try_for_each(|(i, row)| self.draw_into(seed, i as u64, row))?;
        Ok(out)
    }
}

/// Radial quadrature plan for the integrability functional.
#[derive(Debug, Clone)]
pub struct RadialPlan {
    pub radial_points: usize,
    pub r_min: f64,
    pub r_max: f64,
    /// Directions sampled per radius (n >= 2; for n = 1 the two signs are used).
    pub directions: usize,
    /// Relative size of the truncated integrand at `r_max` above which the
    /// integral is declared non-convergent.
    pub tail_tolerance: f64,
}

impl Default for RadialPlan {
    fn default() -> Self {
        Self {
            radial_points: 400,
            r_min: 1e-4,
            r_max: 50.0,
            directions: 64,
            tail_tolerance: 1e-3,
        }
    }
}

impl RadialPlan {
    /// `0` followed by a geometric grid from `r_min` to `r_max`.
    pub fn radii(&self) -> Vec<f64> {
        let m = self.radial_points.max(2);
        let ratio = (self.r_max / self.r_min).ln();
        std::iter::once(0.0)
            .chain((0..m).map(|k| self.r_min * (ratio * k as f64 / (m - 1) as f64).exp()))
            .collect()
    }

    /// Deterministic unit directions in `R^n`.
    pub fn directions(&self, n: usize) -> Vec<Vec<f64>> {
        match n {
            1 => vec![vec![1.0], vec![-1.0]],
            2 => (0..self.directions)
                .map(|k| {
                    let th = 2.0 * std::f64::consts::PI * k as f64 / self.directions as f64;
                    vec![th.cos(), th.sin()]
                })
                .collect(),
            _ => {
                let mut rng = substream(0x5eed, Purpose::Quadrature, n as u64);
                let mut dirs: Vec<Vec<f64>> = (0..n)
                    .flat_map(|j| {
                        let mut e = vec![0.0; n];
                        e[j] = 1.0;
                        let mut m = vec![0.0; n];
                        m[j] = -1.0;
                        [e, m]
                    })
                    .collect();
                while dirs.len() < self.directions.max(2 * n) {
                    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                    let s = norm(&v);
                    dirs.push(v.into_iter().map(|a| a / s).collect());
                }
                dirs
            }
        }
    }
}

/// Integral of a radial sup-envelope against the weight `r^{4n-1+eps} + r^{n-1}`.
///
/// `envelope[k]` is the directional maximum at `radii[k]`; the sup over
/// `|z| >= r` is taken as the suffix maximum on the grid.
pub(crate) fn radial_sup_integral(
    radii: &[f64],
    envelope: &[f64],
    n: usize,
    eps: f64,
    tail_tolerance: f64,
    what: &str,
) -> Result<f64> {
    let m = radii.len();
    let mut sup = vec![0.0; m];
    let mut run: f64 = 0.0;
    for k in (0..m).rev() {
        run = run.max(envelope[k]);
        sup[k] = run;
    }
    let nf = n as f64;
    let integrand: Vec<f64> = radii
        .iter()
        .zip(&sup)
        .map(|(&r, &s)| {
            let w = if r == 0.0 {
                if n == 1 {
                    1.0
                } else {
                    0.0
                }
            } else {
                r.powf(4.0 * nf - 1.0 + eps) + r.powf(nf - 1.0)
            };
            s * w
        })
        .collect();
    if integrand.iter().any(|v| !v.is_finite()) {
        return Err(Error::IntegrabilityViolation(format!(
            "{what}: non-finite integrand"
        )));
    }
    let peak = integrand.iter().cloned().fold(0.0, f64::max);
    let last = integrand[m - 1];
    if peak > 0.0 && last > tail_tolerance * peak {
        return Err(Error::IntegrabilityViolation(format!(
            "{what}: integrand at r={} is {last:.3e} (peak {peak:.3e}); tail not decaying",
            radii[m - 1]
        )));
    }
    Ok(radii
        .windows(2)
        .zip(integrand.windows(2))
        .map(|(r, v)| 0.5 * (r[1] - r[0]) * (v[0] + v[1]))
        .sum())
}

/// Numerical value of the integrability functional of the initial density:
/// radial sup-envelopes of `f^2` and `|grad f|^4` against
/// `r^{4n-1+eps} + r^{n-1}`, truncated at `plan.r_max`.
pub fn compute_u(init: &InitialDensity, plan: &RadialPlan, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::Configuration("eps must be positive".into()));
    }
    let n = init.n;
    let radii = plan.radii();
    let dirs = plan.directions(n);
    let mut env_f = Vec::with_capacity(radii.len());
    let mut env_g = Vec::with_capacity(radii.len());
    let mut z = vec![0.0; n];
    let mut g = vec![0.0; n];
    for &r in &radii {
        let (mut mf, mut mg) = (0.0f64, 0.0f64);
        for d in &dirs {
            for j in 0..n {
                z[j] = r * d[j];
            }
            let fv = init.density(&z);
            init.gradient(&z, &mut g);
            mf = mf.max(fv * fv);
            mg = mg.max(norm(&g).powi(4));
        }
        env_f.push(mf);
        env_g.push(mg);
    }
    let a = radial_sup_integral(&radii, &env_f, n, eps, plan.tail_tolerance, "f^2 term")?;
    let b = radial_sup_integral(&radii, &env_g, n, eps, plan.tail_tolerance, "|grad f|^4 term")?;
    Ok(a + b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn zero_drift(n: usize) -> ModelSpec {
        ModelSpec::builder(n, |_, _, _, out: &mut [f64]| out.fill(0.0), |_, _, _| 1.0)
            .build()
            .unwrap()
    }

    #[test]
    fn a_for_identity_and_trig_sigma() {
        let spec = zero_drift(2);
        assert_eq!(spec.eval_a(0.5, &[0.0, 0.0], &[3.0, -1.0]).unwrap(), 1.0);

        let spec = ModelSpec::builder(
            1,
            |_, _, _, out: &mut [f64]| out.fill(0.0),
            |_, _, x: &[f64]| 1.0 + 0.1 * x[0].sin(),
        )
        .lambda(2.0)
        .build()
        .unwrap();
        assert_eq!(spec.eval_a(0.0, &[0.0], &[0.0]).unwrap(), 1.0);
        assert_relative_eq!(
            spec.eval_a(0.0, &[0.0], &[std::f64::consts::FRAC_PI_2]).unwrap(),
            1.21,
            epsilon = 1e-14
        );
    }

    #[test]
    fn a_outside_band_is_a_violation() {
        let spec = ModelSpec::builder(1, |_, _, _, o: &mut [f64]| o.fill(0.0), |_, _, _| 3.0)
            .lambda(2.0)
            .build()
            .unwrap();
        match spec.eval_a(0.0, &[0.0], &[1.0]) {
            Err(Error::HypothesisViolation { witness, .. }) => assert_eq!(witness.x, vec![1.0]),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(spec.eval_a(2.0, &[0.0], &[1.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn b_examples() {
        assert_eq!(zero_drift(3).eval_b(0.0, &[0.0; 3], &[1.0, 2.0, 3.0]).unwrap(), vec![0.0; 3]);

        let spec = ModelSpec::builder(
            2,
            |_, _, x: &[f64], o: &mut [f64]| {
                o[0] = -x[0];
                o[1] = x[0];
            },
            |_, _, _| 1.0,
        )
        .build()
        .unwrap();
        assert_eq!(spec.eval_b(0.0, &[0.0, 0.0], &[1.5, 0.3]).unwrap(), vec![1.5, -1.5]);

        let spec = ModelSpec::builder(
            1,
            |_, _, _, o: &mut [f64]| o.fill(0.0),
            |_, _, x: &[f64]| 1.0 + 0.1 * x[0],
        )
        .lambda(2.0)
        .build()
        .unwrap();
        assert_relative_eq!(spec.eval_b(0.0, &[0.0], &[0.0]).unwrap()[0], 0.2, epsilon = 1e-9);
    }

    #[test]
    fn b_without_fallback_is_a_configuration_error() {
        let spec = ModelSpec::builder(1, |_, _, _, o: &mut [f64]| o.fill(0.0), |_, _, _| 1.0)
            .finite_differences(false)
            .build()
            .unwrap();
        assert!(matches!(
            spec.eval_b(0.0, &[0.0], &[0.0]),
            Err(Error::Configuration(_))
        ));
        assert!(spec.ensure_derivatives().is_err());
    }

    #[test]
    fn c_examples() {
        assert_eq!(zero_drift(2).eval_c(0.0, &[0.0; 2], &[0.4, 0.2]).unwrap(), 0.0);

        // F = A x with constant A: c = -trace(A)
        let a = [0.3, 0.0, 0.7, -0.5];
        let spec = ModelSpec::builder(
            2,
            move |_, _, x: &[f64], o: &mut [f64]| {
                o[0] = a[0] * x[0] + a[1] * x[1];
                o[1] = a[2] * x[0] + a[3] * x[1];
            },
            |_, _, _| 1.0,
        )
        .build()
        .unwrap();
        assert_relative_eq!(spec.eval_c(0.0, &[0.0; 2], &[1.0, 2.0]).unwrap(), 0.2, epsilon = 1e-8);

        let spec = ModelSpec::builder(
            2,
            |_, _, x: &[f64], o: &mut [f64]| {
                o[0] = -x[0];
                o[1] = x[0];
            },
            |_, _, _| 1.0,
        )
        .build()
        .unwrap();
        assert_relative_eq!(spec.eval_c(0.0, &[0.0; 2], &[0.5, 0.5]).unwrap(), 1.0, epsilon = 1e-8);
    }

    #[test]
    fn c_beyond_two_kappa_is_reported() {
        let spec = ModelSpec::builder(1, |_, _, x: &[f64], o: &mut [f64]| o[0] = -5.0 * x[0], |_, _, _| 1.0)
            .kappa(1.0)
            .build()
            .unwrap();
        assert!(matches!(
            spec.eval_c(0.0, &[0.0], &[0.0]),
            Err(Error::HypothesisViolation { .. })
        ));
    }

    #[test]
    fn analytic_c_matches_finite_differences() {
        let chain = LinearChain {
            trig: TrigPerturbation {
                drift_amp: 0.2,
                drift_freq: 1.3,
                sigma_amp: 0.3,
                sigma_freq: 0.7,
            },
            ..LinearChain::kolmogorov(3)
        };
        let analytic = chain.builder().unwrap().build().unwrap();
        let drift_chain = chain.clone();
        let numeric = ModelSpec::builder(
            3,
            move |t, y, x, o: &mut [f64]| {
                let s = drift_chain.builder().unwrap().build().unwrap();
                s.drift(t, y, x, o)
            },
            move |_, _, x: &[f64]| 1.0 + 0.3 * (0.7 * x[0]).sin(),
        )
        .build()
        .unwrap();
        let mut rng = substream(11, Purpose::Probe, 0);
        let mut ws = Workspace::new(3);
        let mut g1 = [0.0; 3];
        let mut g2 = [0.0; 3];
        for _ in 0..100 {
            let x: Vec<f64> = (0..3).map(|_| 4.0 * rng.gen::<f64>() - 2.0).collect();
            let y = [0.0; 3];
            let c1 = analytic.c_with(0.1, &y, &x, &mut ws);
            let c2 = numeric.c_with(0.1, &y, &x, &mut ws);
            assert!((c1 - c2).abs() < 1e-6, "{c1} vs {c2}");
            analytic.c_grad_into(0.1, &y, &x, &mut g1, &mut ws);
            numeric.c_grad_into(0.1, &y, &x, &mut g2, &mut ws);
            for j in 0..3 {
                assert!((g1[j] - g2[j]).abs() < 1e-4, "{g1:?} vs {g2:?}");
            }
        }
    }

    #[test]
    fn chain_structure_is_enforced() {
        let mut chain = LinearChain::kolmogorov(3);
        chain.a[2 * 3] = 1.0; // F_3 depending on x_1
        assert!(chain.builder().is_err());
    }

    #[test]
    fn hypotheses_pass_for_trivial_model() {
        let spec = zero_drift(1);
        let report = validate_hypotheses(&spec, &ProbePlan { points: 2000, ..Default::default() });
        assert!(report.all_passed(), "{report}");
    }

    #[test]
    fn quadratic_drift_fails_lipschitz_near_the_box_edge() {
        let spec = ModelSpec::builder(1, |_, _, x: &[f64], o: &mut [f64]| o[0] = x[0] * x[0], |_, _, _| 1.0)
            .kappa(1.0)
            .build()
            .unwrap();
        let report = validate_hypotheses(&spec, &ProbePlan::default());
        let h3 = report.get(Hypothesis::H3);
        assert!(!h3.passed);
        assert!(h3.worst > 19.0 && h3.worst < 20.1, "{}", h3.worst);
        assert!(h3.witness.as_ref().unwrap().x[0].abs() > 9.5);
    }

    #[test]
    fn kolmogorov_chain_has_unit_h5_floor() {
        let spec = LinearChain::kolmogorov(2).builder().unwrap().build().unwrap();
        let report = validate_hypotheses(&spec, &ProbePlan { points: 1000, ..Default::default() });
        let h5 = report.get(Hypothesis::H5);
        assert!(h5.passed);
        assert_eq!(h5.worst, 1.0);
        assert!(report.all_passed(), "{report}");
    }

    #[test]
    fn gaussian_sampler_moments() {
        let init = InitialDensity::gaussian(vec![1.0, -2.0], vec![0.25, 4.0]).unwrap();
        let s = init.sample(20_000, 3).unwrap();
        let m0 = s.iter().step_by(2).sum::<f64>() / 20_000.0;
        let m1 = s.iter().skip(1).step_by(2).sum::<f64>() / 20_000.0;
        assert!((m0 - 1.0).abs() < 0.02);
        assert!((m1 + 2.0).abs() < 0.06);
        assert_eq!(s, init.sample(20_000, 3).unwrap());
    }

    #[test]
    fn rejection_sampler_reproduces_density() {
        // Laplace-like smooth density on R: f = sech(x)/pi.
        let f = |x: &[f64]| 1.0 / (std::f64::consts::PI * x[0].cosh());
        let g = |x: &[f64], o: &mut [f64]| {
            o[0] = -x[0].tanh() / (std::f64::consts::PI * x[0].cosh())
        };
        let init = InitialDensity::with_envelope(1, f, g, vec![0.0], 3.0, 3.0);
        let s = init.sample(20_000, 9).unwrap();
        let inside = s.iter().filter(|v| v.abs() < 1.0).count() as f64 / 20_000.0;
        // P(|X| < 1) = (4/pi) atan(tanh(1/2))
        let exact = 4.0 / std::f64::consts::PI * (0.5f64).tanh().atan();
        assert!((inside - exact).abs() < 0.015, "{inside} vs {exact}");
    }

    #[test]
    fn u_of_gaussian_converges_under_refinement() {
        let init = InitialDensity::standard_gaussian(2);
        let coarse = compute_u(&init, &RadialPlan { radial_points: 200, ..Default::default() }, 1.0).unwrap();
        let fine = compute_u(&init, &RadialPlan { radial_points: 400, ..Default::default() }, 1.0).unwrap();
        assert!(coarse.is_finite() && coarse > 0.0);
        assert!((coarse - fine).abs() / fine < 0.01, "{coarse} vs {fine}");
        // independent scipy quadrature of the same envelopes: 0.161101
        assert!((fine - 0.161101).abs() / 0.161101 < 0.01, "{fine}");
    }

    #[test]
    fn u_detects_heavy_tails() {
        let pi = std::f64::consts::PI;
        let f = move |x: &[f64]| 1.0 / (pi * (1.0 + x[0] * x[0]));
        let g = move |x: &[f64], o: &mut [f64]| {
            o[0] = -2.0 * x[0] / (pi * (1.0 + x[0] * x[0]).powi(2))
        };
        let init = InitialDensity::with_envelope(1, f, g, vec![0.0], 5.0, 10.0);
        assert!(matches!(
            compute_u(&init, &RadialPlan::default(), 1.0),
            Err(Error::IntegrabilityViolation(_))
        ));
    }

    #[test]
    fn u_shrinks_for_concentrated_gaussian_in_three_dimensions() {
        let wide = InitialDensity::standard_gaussian(3);
        let narrow = InitialDensity::gaussian(vec![0.0; 3], vec![0.25; 3]).unwrap();
        let plan = RadialPlan::default();
        let uw = compute_u(&wide, &plan, 1.0).unwrap();
        let un = compute_u(&narrow, &plan, 1.0).unwrap();
        // scipy: 0.58240 (unit) vs 0.04260 (variance 0.25)
        assert!(un < uw);
        assert!((uw - 0.58240).abs() / 0.58240 < 0.02, "{uw}");
        assert!((un - 0.04260).abs() / 0.04260 < 0.02, "{un}");
    }
}
