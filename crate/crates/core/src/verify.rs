//! Property checks: anisotropic variance scaling, two-sided Gaussian bounds,
//! uniform tails, density floors on a box and the stability inequality.
//!
//! Every check returns a report with a pass flag and margins, and can write
//! itself as key = value text.

use std::io::Write;

use crate::density::{l1_distance, lattice_points, silverman_bandwidth, DensityEstimate, L1Quadrature};
use crate::error::{Error, Result};
use crate::fixpoint::{fit_c0, stability_points, StabilityPoint};
use crate::flow::{forward_flow, FlowConfig};
use crate::model::{InitialDensity, ModelSpec};
use crate::particle::{evolve, simulate_auxiliary, Drive, McConfig, ParticleEnsemble, Start};
use crate::path::QuantilePath;
use crate::rng::derive_seed;

/// Smallest ensemble any statistical check accepts.
pub const MIN_PARTICLES: usize = 100;

fn guard(mc: &McConfig) -> Result<()> {
    if mc.n_particles < MIN_PARTICLES {
        return Err(Error::Configuration(format!(
            "checks need at least {MIN_PARTICLES} particles, got {}",
            mc.n_particles
        )));
    }
    Ok(())
}

fn csv_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.6e}")).collect::<Vec<_>>().join(",")
}

/// Common interface of the check reports.
pub trait CheckReport {
    fn name(&self) -> &'static str;
    fn passed(&self) -> bool;
    /// Key = value lines (without the name and pass lines).
    fn write_body(&self, w: &mut dyn Write) -> std::io::Result<()>;

    fn write_report(&self, w: &mut dyn Write) -> std::io::Result<()> {
        writeln!(w, "check = {}", self.name())?;
        writeln!(w, "passed = {}", self.passed())?;
        self.write_body(w)
    }
}

/// Ensembles at each time of an increasing grid, from one run split into segments.
/// Segment `k` uses seed `derive_seed(mc.seed, k)`.
pub fn snapshots(
    spec: &ModelSpec,
    start: Start<'_>,
    omega: &QuantilePath,
    times: &[f64],
    mc: &McConfig,
) -> Result<Vec<ParticleEnsemble>> {
    if times.windows(2).any(|w| !(w[1] > w[0])) || times.first().is_some_and(|t| *t < 0.0) {
        return Err(Error::Configuration("snapshot times must be increasing and nonnegative".into()));
    }
    let mut out: Vec<ParticleEnsemble> = Vec::with_capacity(times.len());
    let mut t_prev = 0.0;
    for (k, &t) in times.iter().enumerate() {
        let cfg = mc.with_seed(derive_seed(mc.seed, k as u64));
        let st = match out.last() {
            Some(e) => Start::Ensemble(e),
            None => start,
        };
        let e = evolve(spec, st, t_prev, t, Drive::Frozen(omega), &cfg)?.ensemble;
        out.push(e);
        t_prev = t;
    }
    Ok(out)
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

#[derive(Debug, Clone)]
pub struct ScalingReport {
    pub times: Vec<f64>,
    /// `variances[k][i]` is `Var(X^i)` at `times[k]`.
    pub variances: Vec<Vec<f64>>,
    pub slopes: Vec<f64>,
    pub expected: Vec<f64>,
    pub tolerance: f64,
}

impl ScalingReport {
    pub fn margins(&self) -> Vec<f64> {
        self.slopes
            .iter()
            .zip(&self.expected)
            .map(|(s, e)| self.tolerance - (s - e).abs())
            .collect()
    }

    /// Columns `coordinate,slope,expected,tolerance`.
    pub fn write_slopes_csv(&self, w: &mut dyn Write) -> std::io::Result<()> {
        writeln!(w, "coordinate,slope,expected,tolerance")?;
        for (i, (s, e)) in self.slopes.iter().zip(&self.expected).enumerate() {
            writeln!(w, "{},{s},{e},{}", i + 1, self.tolerance)?;
        }
        Ok(())
    }
}

impl CheckReport for ScalingReport {
    fn name(&self) -> &'static str {
        "scaling"
    }

    fn passed(&self) -> bool {
        self.margins().iter().all(|m| *m >= 0.0)
    }

    fn write_body(&self, w: &mut dyn Write) -> std::io::Result<()> {
        writeln!(w, "times = {}", csv_list(&self.times))?;
        writeln!(w, "slopes = {}", csv_list(&self.slopes))?;
        writeln!(w, "expected = {}", csv_list(&self.expected))?;
        writeln!(w, "tolerance = {}", self.tolerance)?;
        writeln!(w, "margins = {}", csv_list(&self.margins()))
    }
}

/// Default slope tolerance for an `n`-coordinate chain: 0.05 n.
pub fn scaling_tolerance(n: usize) -> f64 {
    0.05 * n as f64
}

/// Regress `log Var(X^i_t)` on `log t` from `X_0 = 0`; coordinate `i` (1-based)
/// should have slope `2i - 1`.
pub fn check_anisotropic_scaling(
    spec: &ModelSpec,
    omega: &QuantilePath,
    times: &[f64],
    tolerance: f64,
    mc: &McConfig,
) -> Result<ScalingReport> {
    guard(mc)?;
    if times.len() < 2 || times.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::Configuration("scaling needs at least two positive times".into()));
    }
    let n = spec.n();
    let origin = vec![0.0; n];
    let ens = snapshots(spec, Start::Point(&origin), omega, times, mc)?;
    let variances: Vec<Vec<f64>> = ens.iter().map(|e| (0..n).map(|j| e.mean_var(j).1).collect()).collect();
    let lt: Vec<f64> = times.iter().map(|t| t.ln()).collect();
    let slopes = (0..n)
        .map(|j| {
            let lv: Vec<f64> = variances.iter().map(|v| v[j].ln()).collect();
            slope(&lt, &lv)
        })
        .collect();
    Ok(ScalingReport {
        times: times.to_vec(),
        variances,
        slopes,
        expected: (1..=n).map(|i| (2 * i - 1) as f64).collect(),
        tolerance,
    })
}

/// One probe of the two-sided Gaussian bound.
#[derive(Debug, Clone)]
pub struct BoundPoint {
    pub y: Vec<f64>,
    /// `|T_t^{-1}(theta_t(x) - y)|`.
    pub z: f64,
    pub density: f64,
    /// Smallest `C >= 1` satisfying both sides at this point (`inf` if none).
    pub c_min: f64,
    /// Outside the validity mask; not asserted.
    pub masked: bool,
    /// Kernel estimate too noisy (relative standard error above [`MAX_RELATIVE_SE`]); not asserted.
    pub unresolved: bool,
}

pub const MAX_RELATIVE_SE: f64 = 0.5;

impl BoundPoint {
    pub fn asserted(&self) -> bool {
        !self.masked && !self.unresolved
    }
}

#[derive(Debug, Clone)]
pub struct BoundReport {
    pub t: f64,
    pub x: Vec<f64>,
    pub theta: Vec<f64>,
    pub c: f64,
    pub points: Vec<BoundPoint>,
    pub mask: f64,
}

impl BoundReport {
    pub fn unfittable(&self) -> Vec<&BoundPoint> {
        self.points
            .iter()
            .filter(|p| p.asserted() && !p.c_min.is_finite())
            .collect()
    }

    pub fn asserted(&self) -> usize {
        self.points.iter().filter(|p| p.asserted()).count()
    }

    /// Columns `y1..yn,z,density,c_min,masked,unresolved`.
    pub fn write_margins_csv(&self, w: &mut dyn Write) -> std::io::Result<()> {
        let n = self.x.len();
        let cols: Vec<String> = (1..=n).map(|j| format!("y{j}")).collect();
        writeln!(w, "{},z,density,c_min,masked,unresolved", cols.join(","))?;
        for p in &self.points {
            let ys: Vec<String> = p.y.iter().map(|v| v.to_string()).collect();
            writeln!(
                w,
                "{},{},{},{},{},{}",
                ys.join(","),
                p.z,
                p.density,
                p.c_min,
                p.masked,
                p.unresolved
            )?;
        }
        Ok(())
    }
}

impl CheckReport for BoundReport {
    fn name(&self) -> &'static str {
        "gaussian_bounds"
    }

    fn passed(&self) -> bool {
        self.c.is_finite() && self.asserted() > 0 && self.unfittable().is_empty()
    }

    fn write_body(&self, w: &mut dyn Write) -> std::io::Result<()> {
        writeln!(w, "t = {}", self.t)?;
        writeln!(w, "x = {}", csv_list(&self.x))?;
        writeln!(w, "theta = {}", csv_list(&self.theta))?;
        writeln!(w, "c = {}", self.c)?;
        writeln!(w, "mask = {}", self.mask)?;
        writeln!(w, "probes = {}", self.points.len())?;
        writeln!(w, "masked = {}", self.points.iter().filter(|p| p.masked).count())?;
        writeln!(w, "unresolved = {}", self.points.iter().filter(|p| !p.masked && p.unresolved).count())?;
        writeln!(w, "unfittable = {}", self.unfittable().len())
    }
}

/// Smallest `C >= 1` with `e^{-C z^2} / C <= s <= C e^{-z^2 / C}`, where
/// `s = t^{n^2/2} p` is the scaled density. Both sides are increasing in `C`.
pub fn fit_bound_constant(scaled_density: f64, z: f64) -> f64 {
    if !(scaled_density > 0.0) || !scaled_density.is_finite() {
        return f64::INFINITY;
    }
    let ls = scaled_density.ln();
    let z2 = z * z;
    let lower = |c: f64| c.ln() + c * z2 + ls >= 0.0;
    let upper = |c: f64| c.ln() - z2 / c - ls >= 0.0;
    let ok = |c: f64| lower(c) && upper(c);
    if ok(1.0) {
        return 1.0;
    }
    let mut hi = 2.0;
    while !ok(hi) {
        hi *= 2.0;
        if hi > 1e300 {
            return f64::INFINITY;
        }
    }
    let mut lo = hi / 2.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-12 * hi {
            break;
        }
    }
    hi
}

/// Simulate from the point `x`, estimate the transition density at `probes` with a
/// kernel estimate and fit the Gaussian-bound constant. Probes with
/// `|T_t^{-1}(theta - y)| > mask`, or where the estimate is unresolved, are excluded.
pub fn check_gaussian_bounds(
    spec: &ModelSpec,
    omega: &QuantilePath,
    x: &[f64],
    t: f64,
    probes: &[Vec<f64>],
    mask: f64,
    mc: &McConfig,
) -> Result<BoundReport> {
    guard(mc)?;
    let n = spec.n();
    let ens = evolve(spec, Start::Point(x), 0.0, t, Drive::Frozen(omega), mc)?.ensemble;
    let kde = DensityEstimate::kde(&ens, None)?;
    let theta = forward_flow(spec, omega, x, t, &FlowConfig::default())?.theta;
    let scale = t.powf((n * n) as f64 / 2.0);
    let points: Vec<BoundPoint> = probes
        .iter()
        .map(|y| {
            let z = (0..n)
                .map(|i| ((theta[i] - y[i]) / t.powf(i as f64 + 0.5)).powi(2))
                .sum::<f64>()
                .sqrt();
            let (density, se) = kde.eval_with_se(y);
            let masked = z > mask;
            let unresolved = !(density > 0.0 && se <= MAX_RELATIVE_SE * density);
            BoundPoint {
                y: y.clone(),
                z,
                density,
                c_min: if masked || unresolved {
                    f64::NAN
                } else {
                    fit_bound_constant(scale * density, z)
                },
                masked,
                unresolved,
            }
        })
        .collect();
    let c = points
        .iter()
        .filter(|p| p.asserted())
        .map(|p| p.c_min)
        .fold(1.0, f64::max);
    Ok(BoundReport {
        t,
        x: x.to_vec(),
        theta,
        c,
        points,
        mask,
    })
}

#[derive(Debug, Clone)]
pub struct TailReport {
    pub eps: f64,
    /// Smallest multiple of 0.05 working for every member, or `inf`.
    pub k: f64,
    /// `(omega index, t, tail mass at k, its standard error)`.
    pub members: Vec<(usize, f64, f64, f64)>,
}

impl CheckReport for TailReport {
    fn name(&self) -> &'static str {
        "tail"
    }

    fn passed(&self) -> bool {
        self.k.is_finite()
    }

    fn write_body(&self, w: &mut dyn Write) -> std::io::Result<()> {
        writeln!(w, "eps = {}", self.eps)?;
        writeln!(w, "k = {}", self.k)?;
        let worst = self.members.iter().map(|m| m.2).fold(0.0, f64::max);
        writeln!(w, "worst_tail = {worst:.6e}")?;
        writeln!(w, "members = {}", self.members.len())
    }
}

fn empirical_tail(e: &ParticleEnsemble, k: f64) -> f64 {
    let out = (0..e.len())
        .filter(|&i| e.row(i).iter().any(|v| v.abs() >= k))
        .count();
    out as f64 / e.len() as f64
}

/// Ensembles of the auxiliary SDE for every `(omega, t)`; omega `m` uses seed
/// `derive_seed(mc.seed, m)`.
pub fn family_ensembles(
    spec: &ModelSpec,
    init: &InitialDensity,
    family: &[QuantilePath],
    times: &[f64],
    mc: &McConfig,
) -> Result<Vec<(usize, f64, ParticleEnsemble)>> {
    let mut out = Vec::new();
    for (m, w) in family.iter().enumerate() {
        let cfg = mc.with_seed(derive_seed(mc.seed, m as u64));
        for (t, e) in times.iter().zip(snapshots(spec, Start::Density(init), w, times, &cfg)?) {
            out.push((m, *t, e));
        }
    }
    Ok(out)
}

/// Smallest `K` (multiple of 0.05, at most 50) with empirical tail mass at most
/// `eps` for every member.
pub fn check_tail_uniformity(members: &[(usize, f64, ParticleEnsemble)], eps: f64) -> Result<TailReport> {
    if members.is_empty() {
        return Err(Error::Configuration("tail check needs a nonempty family".into()));
    }
    let ok = |k: f64| members.iter().all(|(_, _, e)| empirical_tail(e, k) <= eps);
    let k = (1..=1000).map(|i| i as f64 * 0.05).find(|&k| ok(k)).unwrap_or(f64::INFINITY);
    let kk = if k.is_finite() { k } else { 50.0 };
    Ok(TailReport {
        eps,
        k,
        members: members
            .iter()
            .map(|(m, t, e)| {
                let p = empirical_tail(e, kk);
                (*m, *t, p, (p * (1.0 - p) / e.len() as f64).sqrt())
            })
            .collect(),
    })
}

#[derive(Debug, Clone)]
pub struct LowerBoundReport {
    pub k: f64,
    pub delta: f64,
    pub delta_se: f64,
    pub argmin: Vec<f64>,
    /// Member (omega index, t) attaining the minimum.
    pub attained_at: (usize, f64),
    /// Exact lattice minimum, when an oracle is supplied.
    pub oracle_delta: Option<f64>,
    /// Allowed relative deviation from the oracle.
    pub oracle_tolerance: f64,
}

impl LowerBoundReport {
    /// `delta` in units of its standard error.
    pub fn signal_to_noise(&self) -> f64 {
        if !(self.delta > 0.0) {
            0.0
        } else if self.delta_se > 0.0 {
            self.delta / self.delta_se
        } else {
            f64::INFINITY
        }
    }

    pub fn oracle_relative_error(&self) -> Option<f64> {
        self.oracle_delta.map(|o| (self.delta - o).abs() / o)
    }
}

impl CheckReport for LowerBoundReport {
    fn name(&self) -> &'static str {
        "lower_bound"
    }

    fn passed(&self) -> bool {
        self.signal_to_noise() > 2.0
            && self
                .oracle_relative_error()
                .is_none_or(|r| r <= self.oracle_tolerance)
    }

    fn write_body(&self, w: &mut dyn Write) -> std::io::Result<()> {
        writeln!(w, "k = {}", self.k)?;
        writeln!(w, "delta = {:.6e}", self.delta)?;
        writeln!(w, "delta_se = {:.6e}", self.delta_se)?;
        writeln!(w, "argmin = {}", csv_list(&self.argmin))?;
        writeln!(w, "attained_omega = {}", self.attained_at.0)?;
        writeln!(w, "attained_t = {}", self.attained_at.1)?;
        if let Some(o) = self.oracle_delta {
            writeln!(w, "oracle_delta = {o:.6e}")?;
            writeln!(w, "oracle_relative_error = {:.4}", self.oracle_relative_error().unwrap_or(f64::NAN))?;
        }
        Ok(())
    }
}

/// Minimum over members of the kernel-estimate density on the `K`-box lattice.
/// `oracle(omega index, t, y)` gives the exact density when known.
pub fn check_lower_bound(
    members: &[(usize, f64, ParticleEnsemble)],
    k: f64,
    oracle: Option<&dyn Fn(usize, f64, &[f64]) -> f64>,
) -> Result<LowerBoundReport> {
    if members.is_empty() {
        return Err(Error::Configuration("lower-bound check needs a nonempty family".into()));
    }
    if !(k > 0.0) {
        return Err(Error::Configuration("K must be positive".into()));
    }
    let n = members[0].2.n();
    let per_axis = lattice_points(n);
    let mut best: Option<(f64, f64, Vec<f64>, (usize, f64))> = None;
    for (m, t, e) in members {
        let kde = DensityEstimate::kde(e, None)?;
        let (v, se, at) = kde.lattice_min(k, per_axis);
        if best.as_ref().is_none_or(|b| v < b.0) {
            best = Some((v, se, at, (*m, *t)));
        }
    }
    let (delta, delta_se, argmin, attained_at) = best.expect("nonempty");
    let oracle_delta = oracle.map(|f| {
        let mut lo = f64::INFINITY;
        for (m, t, _) in members {
            let total = per_axis.pow(n as u32);
            for mut flat in 0..total {
                let mut y = vec![0.0; n];
                for j in (0..n).rev() {
                    let i = flat % per_axis;
                    flat /= per_axis;
                    y[j] = -k + 2.0 * k * i as f64 / (per_axis - 1) as f64;
                }
                lo = lo.min(f(*m, *t, &y));
            }
        }
        lo
    });
    Ok(LowerBoundReport {
        k,
        delta,
        delta_se,
        argmin,
        attained_at,
        oracle_delta,
        oracle_tolerance: 0.2,
    })
}

#[derive(Debug, Clone)]
pub struct PairVerdict {
    /// `sup_{s <= t} |u^1_s - u^2_s|_{L1}` over the grid, per grid time.
    pub lhs: Vec<f64>,
    /// `C0 (t + sqrt t) sup_{[0,t]} |omega1 - omega2|`, per grid time.
    pub rhs: Vec<f64>,
}

impl PairVerdict {
    pub fn holds(&self) -> bool {
        self.lhs.iter().zip(&self.rhs).all(|(l, r)| l <= r)
    }
}

#[derive(Debug, Clone)]
pub struct StabilityReport {
    pub c0: f64,
    pub times: Vec<f64>,
    pub fit_points: Vec<StabilityPoint>,
    pub holdout: Vec<PairVerdict>,
}

impl StabilityReport {
    pub fn holdout_passes(&self) -> usize {
        self.holdout.iter().filter(|p| p.holds()).count()
    }
}

impl CheckReport for StabilityReport {
    fn name(&self) -> &'static str {
        "stability"
    }

    fn passed(&self) -> bool {
        self.holdout_passes() == self.holdout.len()
    }

    fn write_body(&self, w: &mut dyn Write) -> std::io::Result<()> {
        writeln!(w, "c0 = {:.6e}", self.c0)?;
        writeln!(w, "times = {}", csv_list(&self.times))?;
        writeln!(w, "fit_points = {}", self.fit_points.len())?;
        writeln!(w, "holdout_pairs = {}", self.holdout.len())?;
        writeln!(w, "holdout_passed = {}", self.holdout_passes())?;
        for (k, p) in self.holdout.iter().enumerate() {
            writeln!(w, "holdout.{k}.lhs = {}", csv_list(&p.lhs))?;
            writeln!(w, "holdout.{k}.rhs = {}", csv_list(&p.rhs))?;
        }
        Ok(())
    }
}

/// Fit `C0` on `fit_pairs`, then verify the stability inequality on `holdout_pairs`
/// (a different seed) at every grid time.
pub fn check_stability(
    spec: &ModelSpec,
    init: &InitialDensity,
    fit_pairs: &[(QuantilePath, QuantilePath)],
    holdout_pairs: &[(QuantilePath, QuantilePath)],
    times: &[f64],
    mc: &McConfig,
    quad: &L1Quadrature,
) -> Result<StabilityReport> {
    guard(mc)?;
    let fit_points = stability_points(spec, init, times, fit_pairs, mc, quad)?;
    let c0 = fit_c0(&fit_points)?.c0;
    let held = mc.with_seed(derive_seed(mc.seed, 0x401d));
    let mut holdout = Vec::new();
    for (k, (w1, w2)) in holdout_pairs.iter().enumerate() {
        let cfg = held.with_seed(derive_seed(held.seed, k as u64));
        let mut lhs = Vec::new();
        let mut rhs = Vec::new();
        let mut run: f64 = 0.0;
        for &t in times {
            let e1 = simulate_auxiliary(spec, w1, init, t, &cfg)?;
            let e2 = simulate_auxiliary(spec, w2, init, t, &cfg)?;
            let d = if e1.states() == e2.states() {
                0.0
            } else {
                let h = silverman_bandwidth(e1.states(), e1.n());
                l1_distance(&DensityEstimate::kde(&e1, Some(&h))?, &DensityEstimate::kde(&e2, Some(&h))?, quad)?
            };
            run = run.max(d);
            lhs.push(run);
            let sup = QuantilePath::sup_distance(
                &restrict(w1, t),
                &restrict(w2, t),
            );
            rhs.push(c0 * (t + t.sqrt()) * sup);
        }
        holdout.push(PairVerdict { lhs, rhs });
    }
    Ok(StabilityReport {
        c0,
        times: times.to_vec(),
        fit_points,
        holdout,
    })
}

/// The path on `[start, t]`, with a node inserted at `t`.
fn restrict(w: &QuantilePath, t: f64) -> QuantilePath {
    let mut times: Vec<f64> = w.times().iter().copied().filter(|s| *s < t).collect();
    times.push(t);
    let n = w.n();
    QuantilePath::from_fn(n, times, |s, out| w.eval_into(s, out)).expect("valid restriction")
}
