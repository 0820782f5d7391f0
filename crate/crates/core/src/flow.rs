//! Deterministic characteristic flow `d theta/dt = F(t, omega_t, theta)`.
//!
//! The Jacobian determinant is carried along the trajectory through
//! Liouville's formula, `log det grad theta = int tr grad F`, so no matrix
//! ODE is solved.

use std::io::Write;

use rand::Rng;

use crate::error::{Error, Result, Witness};
use crate::model::{ModelSpec, Workspace};
use crate::path::QuantilePath;
use crate::rng::{substream, Purpose};

#[derive(Debug, Clone, Copy)]
pub struct FlowConfig {
    /// Upper bound on the RK4 step; the actual step is `t / ceil(t / max_step)`.
    pub max_step: f64,
    pub record_path: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            max_step: 0.01,
            record_path: false,
        }
    }
}

/// Trajectory recorded at every RK4 step.
#[derive(Debug, Clone, Default)]
pub struct FlowPath {
    pub times: Vec<f64>,
    /// Row-major, `n` values per time.
    pub states: Vec<f64>,
    pub log_jac_det: Vec<f64>,
}

impl FlowPath {
    /// CSV with columns `t, theta1..thetan, log_jac_det`.
    pub fn write_csv<W: Write>(&self, n: usize, mut w: W) -> std::io::Result<()> {
        let cols: Vec<String> = (1..=n).map(|i| format!("theta{i}")).collect();
        writeln!(w, "t,{},log_jac_det", cols.join(","))?;
        for (k, t) in self.times.iter().enumerate() {
            write!(w, "{t}")?;
            for v in &self.states[k * n..(k + 1) * n] {
                write!(w, ",{v}")?;
            }
            writeln!(w, ",{}", self.log_jac_det[k])?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FlowResult {
    pub theta: Vec<f64>,
    pub log_jac_det: f64,
    pub path: Option<FlowPath>,
}

struct Rk4<'a> {
    spec: &'a ModelSpec,
    omega: &'a QuantilePath,
    ws: Workspace,
    jac: Vec<f64>,
    y: Vec<f64>,
    f: Vec<f64>,
}

impl<'a> Rk4<'a> {
    fn new(spec: &'a ModelSpec, omega: &'a QuantilePath) -> Self {
        let n = spec.n();
        Self {
            spec,
            omega,
            ws: Workspace::new(n),
            jac: vec![0.0; n * n],
            y: vec![0.0; n],
            f: vec![0.0; n],
        }
    }

    /// Right-hand side of the augmented system `(theta, log det)`.
    fn rhs(&mut self, s: f64, state: &[f64], out: &mut [f64]) {
        let n = self.spec.n();
        self.omega.eval_into(s, &mut self.y);
        self.spec.drift(s, &self.y, &state[..n], &mut self.f);
        out[..n].copy_from_slice(&self.f);
        self.spec
            .drift_jacobian_into(s, &self.y, &state[..n], &mut self.jac, &mut self.ws);
        out[n] = (0..n).map(|i| self.jac[i * n + i]).sum();
    }

    /// Integrate from `s0` to `s1` (either direction) with `steps` equal steps.
    fn run(&mut self, s0: f64, s1: f64, x: &[f64], steps: usize, mut path: Option<&mut FlowPath>) -> Result<Vec<f64>> {
        let n = self.spec.n();
        let m = n + 1;
        let h = (s1 - s0) / steps as f64;
        let mut state = x.to_vec();
        state.push(0.0);
        let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
        let mut tmp = vec![0.0; m];
        let record = |p: &mut Option<&mut FlowPath>, s: f64, st: &[f64]| {
            if let Some(p) = p.as_deref_mut() {
                p.times.push(s);
                p.states.extend_from_slice(&st[..n]);
                p.log_jac_det.push(st[n]);
            }
        };
        record(&mut path, s0, &state);
        for k in 0..steps {
            let s = s0 + k as f64 * h;
            self.rhs(s, &state, &mut k1);
            for i in 0..m {
                tmp[i] = state[i] + 0.5 * h * k1[i];
            }
            self.rhs(s + 0.5 * h, &tmp, &mut k2);
            for i in 0..m {
                tmp[i] = state[i] + 0.5 * h * k2[i];
            }
            self.rhs(s + 0.5 * h, &tmp, &mut k3);
            for i in 0..m {
                tmp[i] = state[i] + h * k3[i];
            }
            self.rhs(s + h, &tmp, &mut k4);
            for i in 0..m {
                tmp[i] = state[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            if tmp.iter().any(|v| !v.is_finite()) {
                return Err(Error::IntegrationFailure { last_good_time: s });
            }
            state.copy_from_slice(&tmp);
            let s_next = if k + 1 == steps { s1 } else { s0 + (k + 1) as f64 * h };
            record(&mut path, s_next, &state);
        }
        Ok(state)
    }
}

fn step_count(t: f64, cfg: &FlowConfig) -> usize {
    if t == 0.0 {
        0
    } else {
        (t / cfg.max_step - 1e-9).ceil().max(1.0) as usize
    }
}

fn check_inputs(spec: &ModelSpec, omega: &QuantilePath, x: &[f64], t: f64) -> Result<()> {
    if x.len() != spec.n() || omega.n() != spec.n() {
        return Err(Error::Configuration("dimension mismatch in flow".into()));
    }
    if !(0.0..=spec.horizon() * (1.0 + 1e-12)).contains(&t) {
        return Err(Error::Domain(format!("flow time {t} outside [0, T]")));
    }
    spec.ensure_derivatives()?;
    omega.require_cover(0.0, t)
}

/// `theta^omega(t, x)` and `log det grad theta^omega(t, x)`.
pub fn forward_flow(
    spec: &ModelSpec,
    omega: &QuantilePath,
    x: &[f64],
    t: f64,
    cfg: &FlowConfig,
) -> Result<FlowResult> {
    check_inputs(spec, omega, x, t)?;
    let n = spec.n();
    let mut path = cfg.record_path.then(FlowPath::default);
    let state = Rk4::new(spec, omega).run(0.0, t, x, step_count(t, cfg), path.as_mut())?;
    Ok(FlowResult {
        theta: state[..n].to_vec(),
        log_jac_det: state[n],
        path,
    })
}

/// The preimage `x` with `theta^omega(t, x) = xi`, together with
/// `log det grad (theta^omega)^{-1}(t, xi)`, from the backward ODE.
pub fn inverse_flow_with_det(
    spec: &ModelSpec,
    omega: &QuantilePath,
    xi: &[f64],
    t: f64,
    cfg: &FlowConfig,
) -> Result<(Vec<f64>, f64)> {
    check_inputs(spec, omega, xi, t)?;
    let n = spec.n();
    let state = Rk4::new(spec, omega).run(t, 0.0, xi, step_count(t, cfg), None)?;
    // Integrating from t down to 0 accumulates -int_0^t tr grad F along the
    // backward trajectory, which is the log det of the inverse map.
    Ok((state[..n].to_vec(), state[n]))
}

pub fn inverse_flow(
    spec: &ModelSpec,
    omega: &QuantilePath,
    xi: &[f64],
    t: f64,
    cfg: &FlowConfig,
) -> Result<Vec<f64>> {
    inverse_flow_with_det(spec, omega, xi, t, cfg).map(|r| r.0)
}

/// Random `(x, t, omega)` probes for [`check_flow_bounds`].
#[derive(Debug, Clone)]
pub struct FlowProbe {
    pub points: usize,
    /// `x` is drawn uniformly from `[-radius, radius]^n`.
    pub radius: f64,
    pub seed: u64,
}

impl Default for FlowProbe {
    fn default() -> Self {
        Self {
            points: 1000,
            radius: 5.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowBound {
    /// `e^{-kt}|x| - kt <= |theta|`
    NormLower,
    /// `|theta| <= (|x| + kt) e^{kt}`
    NormUpper,
    /// `|log det grad theta| <= n k t`
    Det,
    /// `|log det grad theta^{-1}| <= n k t`
    InverseDet,
}

#[derive(Debug, Clone)]
pub struct BoundSummary {
    pub bound: FlowBound,
    pub violations: usize,
    /// Smallest observed slack (negative means violated).
    pub worst_margin: f64,
    pub witness: Option<Witness>,
}

#[derive(Debug, Clone)]
pub struct FlowBoundReport {
    pub probes: usize,
    pub bounds: Vec<BoundSummary>,
    /// `max |inverse(forward(x)) - x|` over the probes.
    pub max_roundtrip_error: f64,
}

impl FlowBoundReport {
    pub fn violations(&self) -> usize {
        self.bounds.iter().map(|b| b.violations).sum()
    }

    pub fn get(&self, bound: FlowBound) -> &BoundSummary {
        self.bounds.iter().find(|b| b.bound == bound).expect("all bounds reported")
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Evaluate the norm and determinant bounds of the flow and its inverse at
/// random probes. Each probe picks one path from `omegas` and a time in `(0, T]`
/// covered by it.
pub fn check_flow_bounds(
    spec: &ModelSpec,
    omegas: &[QuantilePath],
    probe: &FlowProbe,
    cfg: &FlowConfig,
) -> Result<FlowBoundReport> {
    if omegas.is_empty() {
        return Err(Error::Configuration("at least one omega path is required".into()));
    }
    let n = spec.n();
    let kappa = spec.kappa();
    let mut rng = substream(probe.seed, Purpose::Probe, 1);
    let kinds = [FlowBound::NormLower, FlowBound::NormUpper, FlowBound::Det, FlowBound::InverseDet];
    let mut bounds: Vec<BoundSummary> = kinds
        .iter()
        .map(|&bound| BoundSummary {
            bound,
            violations: 0,
            worst_margin: f64::INFINITY,
            witness: None,
        })
        .collect();
    let mut max_roundtrip: f64 = 0.0;

    for _ in 0..probe.points {
        let omega = &omegas[rng.gen_range(0..omegas.len())];
        let t_max = spec.horizon().min(omega.end());
        let t = t_max * (1.0 - rng.gen::<f64>()).max(1e-3);
        let x: Vec<f64> = (0..n).map(|_| probe.radius * (2.0 * rng.gen::<f64>() - 1.0)).collect();
        let fwd = forward_flow(spec, omega, &x, t, cfg)?;
        let (back, inv_log_det) = inverse_flow_with_det(spec, omega, &fwd.theta, t, cfg)?;
        let roundtrip = norm(&back.iter().zip(&x).map(|(a, b)| a - b).collect::<Vec<_>>());
        max_roundtrip = max_roundtrip.max(roundtrip);

        let nx = norm(&x);
        let nt = norm(&fwd.theta);
        let kt = kappa * t;
        let det_bound = n as f64 * kt;
        let margins = [
            (nt - ((-kt).exp() * nx - kt), nt),
            (((nx + kt) * kt.exp()) - nt, nt),
            (det_bound - fwd.log_jac_det.abs(), det_bound),
            (det_bound - inv_log_det.abs(), det_bound),
        ];
        for (b, (margin, scale)) in bounds.iter_mut().zip(margins) {
            let tol = 1e-9 * (1.0 + scale.abs());
            if margin < -tol {
                b.violations += 1;
            }
            if margin < b.worst_margin {
                b.worst_margin = margin;
                b.witness = Some(Witness {
                    t,
                    y: omega.eval(t)?,
                    x: x.clone(),
                });
            }
        }
    }
    Ok(FlowBoundReport {
        probes: probe.points,
        bounds,
        max_roundtrip_error: max_roundtrip,
    })
}
