//! The quantile map `M(omega) = Q_alpha(u^omega)`, its Picard iteration on a
//! short interval, and chaining of intervals up to the horizon.

use std::io::Write;

use crate::density::{find_s_params, l1_distance, DensityEstimate, L1Quadrature};
use crate::error::{Error, Result};
use crate::model::{InitialDensity, ModelSpec};
use crate::particle::{evolve, simulate_auxiliary, simulate_mckean, Drive, Evolution, McConfig, ParticleEnsemble, Start};
use crate::path::QuantilePath;
use crate::rng::derive_seed;

/// One application of the quantile map on `[t0, t1]`: simulate the auxiliary SDE
/// under the frozen `omega` and record the empirical quantile at every node.
pub fn apply_m(
    spec: &ModelSpec,
    start: Start<'_>,
    omega: &QuantilePath,
    t0: f64,
    t1: f64,
    mc: &McConfig,
) -> Result<Evolution> {
    evolve(spec, start, t0, t1, Drive::Frozen(omega), mc)
}

/// Largest `t0 <= cap` with `A (t0 + sqrt t0) <= target_l`, where
/// `A = c0 sqrt(n) (2K)^{1-n} / delta`. Solved exactly as a quadratic in `sqrt t0`.
pub fn choose_t0(c0: f64, k: f64, delta: f64, n: usize, target_l: f64, floor: f64, cap: f64) -> Result<f64> {
    if !(c0 >= 0.0 && k > 0.0 && delta > 0.0 && n >= 1 && target_l > 0.0 && cap > 0.0) {
        return Err(Error::Configuration(
            "choose_t0 needs c0 >= 0 and positive K, delta, target L and cap".into(),
        ));
    }
    let a = c0 * (n as f64).sqrt() * (2.0 * k).powi(1 - n as i32) / delta;
    if a == 0.0 {
        return Ok(cap);
    }
    let s = 0.5 * (-1.0 + (1.0 + 4.0 * target_l / a).sqrt());
    let t0 = (s * s).min(cap);
    if t0 < floor {
        return Err(Error::ConstantTooLarge(format!(
            "C0 sqrt(n)(2K)^(1-n)/delta = {a:.4e} forces t0 = {t0:.3e} below the floor {floor:.3e}; re-estimate C0"
        )));
    }
    Ok(t0)
}

/// One measured point of the stability inequality.
#[derive(Debug, Clone, Copy)]
pub struct StabilityPoint {
    pub t: f64,
    /// `(t + sqrt t) sup_{[0,t]} |omega1 - omega2|`.
    pub x: f64,
    /// `|u^{omega1}_t - u^{omega2}_t|_{L1}`.
    pub l1: f64,
}

#[derive(Debug, Clone)]
pub struct C0Estimate {
    /// Least-squares slope through the origin times the safety factor.
    pub c0: f64,
    pub slope: f64,
    pub points: Vec<StabilityPoint>,
}

pub const C0_SAFETY: f64 = 1.5;

fn sup_on(a: &QuantilePath, b: &QuantilePath, t: f64) -> f64 {
    let grid: Vec<f64> = a
        .times()
        .iter()
        .chain(b.times())
        .copied()
        .filter(|s| *s <= t)
        .chain(std::iter::once(t))
        .collect();
    let mut u = vec![0.0; a.n()];
    let mut v = vec![0.0; a.n()];
    grid.iter()
        .map(|&s| {
            a.eval_into(s, &mut u);
            b.eval_into(s, &mut v);
            u.iter().zip(&v).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
        })
        .fold(0.0, f64::max)
}

/// Measure `|u^{omega1}_t - u^{omega2}_t|_{L1}` for every pair and probe time,
/// with both members of a pair simulated on the same seed (kernel estimates,
/// Silverman bandwidth).
pub fn stability_points(
    spec: &ModelSpec,
    init: &InitialDensity,
    t_probe: &[f64],
    pairs: &[(QuantilePath, QuantilePath)],
    mc: &McConfig,
    quad: &L1Quadrature,
) -> Result<Vec<StabilityPoint>> {
    let mut out = Vec::new();
    for (k, (w1, w2)) in pairs.iter().enumerate() {
        for (m, &t) in t_probe.iter().enumerate() {
            let cfg = mc.with_seed(derive_seed(mc.seed, (k * t_probe.len() + m) as u64));
            let e1 = simulate_auxiliary(spec, w1, init, t, &cfg)?;
            let e2 = simulate_auxiliary(spec, w2, init, t, &cfg)?;
            let l1 = if e1.states() == e2.states() {
                0.0
            } else {
                let h = crate::density::silverman_bandwidth(e1.states(), e1.n());
                let d1 = DensityEstimate::kde(&e1, Some(&h))?;
                let d2 = DensityEstimate::kde(&e2, Some(&h))?;
                l1_distance(&d1, &d2, quad)?
            };
            out.push(StabilityPoint {
                t,
                x: (t + t.sqrt()) * sup_on(w1, w2, t),
                l1,
            });
        }
    }
    Ok(out)
}

/// Slope through the origin of `l1` against `x`, times [`C0_SAFETY`].
pub fn fit_c0(points: &[StabilityPoint]) -> Result<C0Estimate> {
    let mut xs: Vec<f64> = points.iter().map(|p| p.x).filter(|x| *x > 0.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs());
    if xs.len() < 3 {
        return Err(Error::Precondition {
            predicate: "at least 3 omega-pairs with distinct sup-distances".into(),
        });
    }
    let sxy: f64 = points.iter().map(|p| p.x * p.l1).sum();
    let sxx: f64 = points.iter().map(|p| p.x * p.x).sum();
    if !(sxx > 0.0) || !sxy.is_finite() {
        return Err(Error::InsufficientSignal("no usable stability points".into()));
    }
    let slope = (sxy / sxx).max(0.0);
    Ok(C0Estimate {
        c0: C0_SAFETY * slope,
        slope,
        points: points.to_vec(),
    })
}

pub fn estimate_c0(
    spec: &ModelSpec,
    init: &InitialDensity,
    t_probe: &[f64],
    pairs: &[(QuantilePath, QuantilePath)],
    mc: &McConfig,
    quad: &L1Quadrature,
) -> Result<C0Estimate> {
    fit_c0(&stability_points(spec, init, t_probe, pairs, mc, quad)?)
}

#[derive(Debug, Clone, Copy)]
pub struct PicardOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self { tol: 5e-3, max_iter: 10 }
    }
}

#[derive(Debug, Clone)]
pub struct FixedPointReport {
    /// Applications of the map; the returned path is the last iterate.
    pub iterations: usize,
    /// `|omega^{k+1} - omega^k|_inf`.
    pub deltas: Vec<f64>,
    /// Geometric fit to the deltas (0 when fewer than two are positive).
    pub l_hat: f64,
    pub t_start: f64,
    pub t_end: f64,
    pub converged: bool,
    /// Distance between the fixed point and its image under a fresh seed.
    pub recheck_delta: f64,
}

/// `exp` of the least-squares slope of `ln delta_k` against `k`, over positive deltas.
pub fn geometric_rate(deltas: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = deltas
        .iter()
        .enumerate()
        .filter(|(_, d)| **d > 0.0)
        .map(|(k, d)| (k as f64, d.ln()))
        .collect();
    if pts.len() < 2 {
        return 0.0;
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (sxy / sxx).exp()
}

/// Output of a Picard run: the fixed point, the report, and the terminal ensemble of
/// the last iterate.
#[derive(Debug, Clone)]
pub struct PicardSolution {
    pub path: QuantilePath,
    pub report: FixedPointReport,
    pub ensemble: ParticleEnsemble,
}

/// Iterate `omega <- M(omega)` on `[t_start, t_end]` from the constant path at the
/// starting quantile. Every iteration reuses `mc.seed`.
pub fn picard_solve(
    spec: &ModelSpec,
    start: Start<'_>,
    t_start: f64,
    t_end: f64,
    opts: &PicardOptions,
    mc: &McConfig,
) -> Result<PicardSolution> {
    if !(opts.tol > 0.0) {
        return Err(Error::Configuration("tol must be positive".into()));
    }
    if opts.max_iter == 0 {
        return Err(Error::Configuration("max_iter must be at least 1".into()));
    }
    if !(t_end > t_start && t_start >= 0.0 && t_end <= spec.horizon() * (1.0 + 1e-12)) {
        return Err(Error::Domain(format!(
            "Picard interval [{t_start}, {t_end}] outside [0, {}]",
            spec.horizon()
        )));
    }
    // The constant start is the quantile of the very particles the iterates begin from.
    let q0 = evolve(spec, start, t_start, t_start, Drive::SelfConsistent, mc)?
        .ensemble
        .quantile(spec.alpha())?;
    let initial = QuantilePath::constant(&q0, t_start, t_end);
    picard_solve_from(spec, start, &initial, t_start, t_end, opts, mc)
}

/// [`picard_solve`] from an arbitrary initial path covering `[t_start, t_end]`.
pub fn picard_solve_from(
    spec: &ModelSpec,
    start: Start<'_>,
    initial: &QuantilePath,
    t_start: f64,
    t_end: f64,
    opts: &PicardOptions,
    mc: &McConfig,
) -> Result<PicardSolution> {
    if !(opts.tol > 0.0) {
        return Err(Error::Configuration("tol must be positive".into()));
    }
    if opts.max_iter == 0 {
        return Err(Error::Configuration("max_iter must be at least 1".into()));
    }
    initial.require_cover(t_start, t_end)?;
    let mut omega = initial.clone();
    let mut deltas = Vec::new();
    let mut last: Option<Evolution> = None;
    let mut converged = false;
    for _ in 0..opts.max_iter {
        let next = apply_m(spec, start, &omega, t_start, t_end, mc)?;
        let d = next.quantiles.sup_distance(&omega);
        deltas.push(d);
        omega = next.quantiles.clone();
        last = Some(next);
        if d <= opts.tol {
            converged = true;
            break;
        }
    }
    if !converged && deltas.last() >= deltas.first() {
        return Err(Error::NonContraction { interval: 0, deltas });
    }
    let fresh = apply_m(spec, start, &omega, t_start, t_end, &mc.with_seed(derive_seed(mc.seed, 0x5eed)))?;
    let recheck_delta = fresh.quantiles.sup_distance(&omega);
    let last = last.expect("at least one iteration");
    Ok(PicardSolution {
        path: omega,
        report: FixedPointReport {
            iterations: deltas.len(),
            l_hat: geometric_rate(&deltas),
            deltas,
            t_start,
            t_end,
            converged,
            recheck_delta,
        },
        ensemble: last.ensemble,
    })
}

/// How interval lengths are picked.
#[derive(Debug, Clone, Copy)]
pub enum T0Policy {
    Fixed(f64),
    /// `choose_t0` per interval, with `K` and `delta` measured on a kernel estimate
    /// of the interval's starting particles.
    Auto {
        c0: f64,
        target_l: f64,
        /// Particles used for the kernel estimate.
        subsample: usize,
    },
}

#[derive(Debug, Clone)]
pub struct GlobalReport {
    pub intervals: Vec<FixedPointReport>,
    /// `|omega(t_j^-) - omega(t_j^+)|` at every junction.
    pub junction_gaps: Vec<f64>,
    pub terminal: ParticleEnsemble,
}

impl GlobalReport {
    pub fn converged(&self) -> bool {
        self.intervals.iter().all(|r| r.converged)
    }

    pub fn total_iterations(&self) -> usize {
        self.intervals.iter().map(|r| r.iterations).sum()
    }

    /// Key-value text report.
    pub fn write_report<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let fmt = |v: &[f64]| v.iter().map(|d| format!("{d:.6e}")).collect::<Vec<_>>().join(",");
        writeln!(w, "intervals = {}", self.intervals.len())?;
        writeln!(w, "converged = {}", self.converged())?;
        writeln!(w, "total_iterations = {}", self.total_iterations())?;
        for (k, r) in self.intervals.iter().enumerate() {
            writeln!(w, "interval.{k}.start = {}", r.t_start)?;
            writeln!(w, "interval.{k}.end = {}", r.t_end)?;
            writeln!(w, "interval.{k}.iterations = {}", r.iterations)?;
            writeln!(w, "interval.{k}.deltas = {}", fmt(&r.deltas))?;
            writeln!(w, "interval.{k}.l_hat = {:.6}", r.l_hat)?;
            writeln!(w, "interval.{k}.converged = {}", r.converged)?;
            writeln!(w, "interval.{k}.recheck_delta = {:.6e}", r.recheck_delta)?;
        }
        writeln!(w, "junction_gaps = {}", fmt(&self.junction_gaps))?;
        Ok(())
    }
}

fn interval_length(spec: &ModelSpec, ens: &ParticleEnsemble, policy: &T0Policy, floor: f64, cap: f64) -> Result<f64> {
    match *policy {
        T0Policy::Fixed(t0) => {
            if !(t0 > 0.0) {
                return Err(Error::Configuration("t0 must be positive".into()));
            }
            Ok(t0.min(cap))
        }
        T0Policy::Auto { c0, target_l, subsample } => {
            let stride = (ens.len() / subsample.max(1)).max(1);
            let kde = DensityEstimate::kde(&ens.thinned(stride), None)?;
            let s = find_s_params(std::slice::from_ref(&kde), spec.alpha())?;
            choose_t0(c0, s.k, s.delta, spec.n(), target_l, floor.min(cap), cap)
        }
    }
}

/// Chain Picard solves over `[0, t0], [t0, t0 + t1], ...` up to `horizon`, passing the
/// terminal particle ensemble of each interval to the next. Interval `k` uses seed
/// `derive_seed(mc.seed, k)`.
pub fn solve_global(
    spec: &ModelSpec,
    init: &InitialDensity,
    horizon: f64,
    policy: &T0Policy,
    opts: &PicardOptions,
    mc: &McConfig,
) -> Result<(QuantilePath, GlobalReport)> {
    if !(horizon > 0.0 && horizon <= spec.horizon() * (1.0 + 1e-12)) {
        return Err(Error::Domain(format!("horizon {horizon} outside (0, {}]", spec.horizon())));
    }
    let floor = 10.0 * mc.dt;
    let mut t = 0.0;
    let mut idx = 0usize;
    let mut path: Option<QuantilePath> = None;
    let mut intervals = Vec::new();
    let mut gaps = Vec::new();
    let mut ens: Option<ParticleEnsemble> = None;
    while t < horizon - 1e-12 {
        let cfg = mc.with_seed(derive_seed(mc.seed, idx as u64));
        let start = match &ens {
            Some(e) => Start::Ensemble(e),
            None => Start::Density(init),
        };
        let cap = horizon - t;
        let len = match &ens {
            Some(e) => interval_length(spec, e, policy, floor, cap)?,
            None => {
                let e0 = evolve(spec, start, 0.0, 0.0, Drive::SelfConsistent, &cfg)?.ensemble;
                interval_length(spec, &e0, policy, floor, cap)?
            }
        };
        // Avoid a sliver at the end.
        let end = if horizon - (t + len) < 0.5 * floor { horizon } else { t + len };
        let sol = picard_solve(spec, start, t, end, opts, &cfg).map_err(|e| match e {
            Error::NonContraction { deltas, .. } => Error::NonContraction { interval: idx, deltas },
            other => other,
        })?;
        path = Some(match path {
            None => sol.path,
            Some(p) => {
                let mut a = vec![0.0; p.n()];
                let mut b = vec![0.0; p.n()];
                p.eval_into(t, &mut a);
                sol.path.eval_into(t, &mut b);
                gaps.push(a.iter().zip(&b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt());
                p.concat(&sol.path)?
            }
        });
        intervals.push(sol.report);
        ens = Some(sol.ensemble);
        t = end;
        idx += 1;
    }
    Ok((
        path.expect("at least one interval"),
        GlobalReport {
            intervals,
            junction_gaps: gaps,
            terminal: ens.expect("at least one interval"),
        },
    ))
}

/// Discrepancy between a fixed-point path and an independent self-consistent run.
#[derive(Debug, Clone)]
pub struct CrossValidation {
    pub discrepancy: f64,
    /// `sqrt(se_1^2 + se_2^2)` of the terminal quantiles.
    pub combined_stderr: f64,
    pub mckean_path: QuantilePath,
}

/// Run the self-consistent particle system on seed `derive_seed(mc.seed, 0xc0de)`
/// and compare its recorded path with `path` in sup norm.
pub fn cross_validate(
    spec: &ModelSpec,
    init: &InitialDensity,
    path: &QuantilePath,
    terminal: &ParticleEnsemble,
    mc: &McConfig,
) -> Result<CrossValidation> {
    let (ens, mck) = simulate_mckean(spec, init, path.end(), &mc.with_seed(derive_seed(mc.seed, 0xc0de)))?;
    let se1 = terminal.quantile_stderr(spec.alpha())?;
    let se2 = ens.quantile_stderr(spec.alpha())?;
    let combined = se1
        .iter()
        .zip(&se2)
        .map(|(a, b)| a * a + b * b)
        .sum::<f64>()
        .sqrt();
    Ok(CrossValidation {
        discrepancy: path.sup_distance(&mck),
        combined_stderr: combined,
        mckean_path: mck,
    })
}
