//! Pointwise Feynman-Kac evaluation of `u_t^omega(x)` and its gradient.

use std::io::{BufRead, Write};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{radial_sup_integral, InitialDensity, ModelSpec, RadialPlan};
use crate::particle::{simulate_backward_fk, FkSamples, McConfig};
use crate::path::QuantilePath;
use crate::rng::derive_seed;

/// Monte Carlo estimate of `u_t(x)`.
#[derive(Debug, Clone)]
pub struct FkEstimate {
    pub value: f64,
    /// Sample standard deviation over `sqrt(N)`.
    pub stderr: f64,
    pub n_samples: usize,
    pub x: Vec<f64>,
    pub t: f64,
    /// `max_i |int c|` over the paths; bounded by `2 kappa t` under the hypotheses.
    pub max_abs_exponent: f64,
    /// `t < 10 dt`: time discretisation bias is elevated.
    pub near_initial: bool,
}

/// Monte Carlo estimate of `grad u_t(x)`, with `u_t(x)` from the same paths.
#[derive(Debug, Clone)]
pub struct FkGradient {
    pub value: FkEstimate,
    pub grad: Vec<f64>,
    pub stderr: Vec<f64>,
}

fn mean_se(sum: f64, sum_sq: f64, m: usize) -> (f64, f64) {
    let mf = m as f64;
    let mean = sum / mf;
    if m < 2 {
        return (mean, 0.0);
    }
    let var = ((sum_sq - mf * mean * mean) / (mf - 1.0)).max(0.0);
    (mean, (var / mf).sqrt())
}

fn weights(init: &InitialDensity, s: &FkSamples) -> Vec<f64> {
    (0..s.len())
        .into_par_iter()
        .with_min_len(1024)
        .map(|i| init.density(s.terminal(i)) * s.exponent[i].exp())
        .collect()
}

fn estimate_from(s: &FkSamples, w: &[f64]) -> FkEstimate {
    let sum: f64 = w.iter().sum();
    let sum_sq: f64 = w.iter().map(|v| v * v).sum();
    let (value, stderr) = mean_se(sum, sum_sq, w.len());
    FkEstimate {
        value,
        stderr,
        n_samples: w.len(),
        x: s.x.clone(),
        t: s.t,
        max_abs_exponent: s.exponent.iter().fold(0.0, |m, e| m.max(e.abs())),
        near_initial: s.t < 10.0 * s.dt,
    }
}

fn check_inputs(spec: &ModelSpec, init: &InitialDensity, x: &[f64]) -> Result<()> {
    if init.n() != spec.n() || x.len() != spec.n() {
        return Err(Error::Configuration("dimension mismatch between model, density and point".into()));
    }
    Ok(())
}

/// `u_t(x) = E[f(X_t) exp(int_0^t c ds)]` over backward paths started at `x`.
pub fn evaluate_u(
    spec: &ModelSpec,
    omega: &QuantilePath,
    init: &InitialDensity,
    t: f64,
    x: &[f64],
    mc: &McConfig,
) -> Result<FkEstimate> {
    check_inputs(spec, init, x)?;
    let s = simulate_backward_fk(spec, omega, t, x, mc, false)?;
    let w = weights(init, &s);
    Ok(estimate_from(&s, &w))
}

/// Pathwise gradient: mean of `exp(E) [grad f(X_t) . J + f(X_t) G]`, where `J` is the
/// Jacobian of the terminal state in `x` and `G = int grad c . J ds`.
pub fn evaluate_grad_u(
    spec: &ModelSpec,
    omega: &QuantilePath,
    init: &InitialDensity,
    t: f64,
    x: &[f64],
    mc: &McConfig,
) -> Result<FkGradient> {
    check_inputs(spec, init, x)?;
    let n = spec.n();
    let s = simulate_backward_fk(spec, omega, t, x, mc, true)?;
    let w = weights(init, &s);
    let value = estimate_from(&s, &w);
    let per_path: Vec<f64> = (0..s.len())
        .into_par_iter()
        .with_min_len(512)
        .flat_map_iter(|i| {
            let mut gf = vec![0.0; n];
            init.gradient(s.terminal(i), &mut gf);
            let j = s.jacobian(i).expect("jacobian requested");
            let g = s.c_grad(i).expect("c gradient requested");
            let e = s.exponent[i].exp();
            let f = w[i] / e;
            (0..n)
                .map(|c| {
                    let mut acc = f * g[c];
                    for r in 0..n {
                        acc += gf[r] * j[r * n + c];
                    }
                    e * acc
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let (grad, stderr) = (0..n)
        .map(|c| {
            let col = per_path.iter().skip(c).step_by(n);
            let (s1, s2) = col.fold((0.0, 0.0), |(a, b), v| (a + v, b + v * v));
            mean_se(s1, s2, s.len())
        })
        .unzip();
    Ok(FkGradient { value, grad, stderr })
}

/// Central finite-difference gradient `(u(x + h e_j) - u(x - h e_j)) / 2h` with
/// common random numbers; the standard error is that of the paired differences.
pub fn fd_gradient(
    spec: &ModelSpec,
    omega: &QuantilePath,
    init: &InitialDensity,
    t: f64,
    x: &[f64],
    h: f64,
    mc: &McConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_inputs(spec, init, x)?;
    if !(h > 0.0) {
        return Err(Error::Configuration("finite-difference step must be positive".into()));
    }
    let n = spec.n();
    let mut grad = vec![0.0; n];
    let mut se = vec![0.0; n];
    for j in 0..n {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h;
        xm[j] -= h;
        let sp = simulate_backward_fk(spec, omega, t, &xp, mc, false)?;
        let sm = simulate_backward_fk(spec, omega, t, &xm, mc, false)?;
        let wp = weights(init, &sp);
        let wm = weights(init, &sm);
        let (s1, s2) = wp
            .iter()
            .zip(&wm)
            .map(|(a, b)| (a - b) / (2.0 * h))
            .fold((0.0, 0.0), |(a, b), d| (a + d, b + d * d));
        let (m, e) = mean_se(s1, s2, wp.len());
        grad[j] = m;
        se[j] = e;
    }
    Ok((grad, se))
}

/// Pathwise gradient against the common-random-number finite difference.
#[derive(Debug, Clone)]
pub struct GradientComparison {
    pub x: Vec<f64>,
    pub pathwise: Vec<f64>,
    pub finite_difference: Vec<f64>,
    /// `sqrt(se_pathwise^2 + se_fd^2)` per component.
    pub joint_stderr: Vec<f64>,
}

impl GradientComparison {
    /// Largest `|pathwise - fd| / joint_stderr` over components.
    pub fn worst_z(&self) -> f64 {
        self.pathwise
            .iter()
            .zip(&self.finite_difference)
            .zip(&self.joint_stderr)
            .map(|((a, b), s)| {
                let d = (a - b).abs();
                if d == 0.0 {
                    0.0
                } else {
                    d / s
                }
            })
            .fold(0.0, f64::max)
    }

    pub fn agrees(&self, k: f64) -> bool {
        self.worst_z() <= k
    }
}

pub fn compare_gradient(
    spec: &ModelSpec,
    omega: &QuantilePath,
    init: &InitialDensity,
    t: f64,
    x: &[f64],
    h: f64,
    mc: &McConfig,
) -> Result<GradientComparison> {
    let g = evaluate_grad_u(spec, omega, init, t, x, mc)?;
    let (fd, fd_se) = fd_gradient(spec, omega, init, t, x, h, mc)?;
    let joint_stderr = g.stderr.iter().zip(&fd_se).map(|(a, b)| a.hypot(*b)).collect();
    Ok(GradientComparison {
        x: x.to_vec(),
        pathwise: g.grad,
        finite_difference: fd,
        joint_stderr,
    })
}

/// Rows `t,x1..xn` in, rows `t,x1..xn,value,stderr` out. Point `k` uses seed
/// `derive_seed(mc.seed, k)`.
pub fn evaluate_batch_csv<R: BufRead, W: Write>(
    spec: &ModelSpec,
    omega: &QuantilePath,
    init: &InitialDensity,
    mc: &McConfig,
    input: R,
    mut out: W,
) -> Result<usize> {
    let n = spec.n();
    let cols: Vec<String> = (1..=n).map(|j| format!("x{j}")).collect();
    writeln!(out, "t,{},value,stderr", cols.join(","))?;
    let mut k = 0u64;
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with('t') {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> = line.split(',').map(|s| s.trim().parse::<f64>()).collect();
        let row = row.map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
        if row.len() != n + 1 {
            return Err(Error::Parse(format!("line {}: expected {} columns", lineno + 1, n + 1)));
        }
        let est = evaluate_u(spec, omega, init, row[0], &row[1..], &mc.with_seed(derive_seed(mc.seed, k)))?;
        let xs: Vec<String> = row[1..].iter().map(|v| v.to_string()).collect();
        writeln!(out, "{},{},{},{}", row[0], xs.join(","), est.value, est.stderr)?;
        k += 1;
    }
    Ok(k as usize)
}

/// Truncated value of the `U'` functional over a finite set of times.
#[derive(Debug, Clone)]
pub struct UprimeEstimate {
    pub value: f64,
    /// Sup over times of the `u^2` term.
    pub u_term: f64,
    /// Sup over times of the `|grad u|^4` term.
    pub grad_term: f64,
    pub r_max: f64,
    pub times: Vec<f64>,
    pub points_evaluated: usize,
}

/// `{t0} ∪` a geometric grid up to `t` with `count` points in total.
pub fn uprime_times(t0: f64, t: f64, count: usize) -> Vec<f64> {
    if count <= 1 || t <= t0 {
        return vec![t0];
    }
    let r = (t / t0).ln();
    (0..count)
        .map(|k| t0 * (r * k as f64 / (count - 1) as f64).exp())
        .collect()
}

/// Sup over `times` of the radial functional of `u_s` (`s` in `times`), with `u` and
/// `grad u` from Feynman-Kac on the radial grid. Radius `r_k` along direction `d`
/// uses seed `derive_seed(mc.seed, k * dirs + d)`.
pub fn estimate_uprime(
    spec: &ModelSpec,
    omega: &QuantilePath,
    init: &InitialDensity,
    times: &[f64],
    plan: &RadialPlan,
    eps: f64,
    mc: &McConfig,
) -> Result<UprimeEstimate> {
    if times.is_empty() || times.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::Configuration("U' needs positive times".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::Configuration("eps must be positive".into()));
    }
    let n = spec.n();
    let radii = plan.radii();
    let dirs = plan.directions(n);
    let mut u_term: f64 = 0.0;
    let mut grad_term: f64 = 0.0;
    let mut points = 0;
    for &t in times {
        let mut env_u = Vec::with_capacity(radii.len());
        let mut env_g = Vec::with_capacity(radii.len());
        for (k, &r) in radii.iter().enumerate() {
            let (mut mu, mut mg) = (0.0f64, 0.0f64);
            for (d, dir) in dirs.iter().enumerate() {
                let z: Vec<f64> = dir.iter().map(|v| r * v).collect();
                let seed = derive_seed(mc.seed, (k * dirs.len() + d) as u64);
                let g = evaluate_grad_u(spec, omega, init, t, &z, &mc.with_seed(seed))?;
                points += 1;
                mu = mu.max(g.value.value.powi(2));
                mg = mg.max(g.grad.iter().map(|v| v * v).sum::<f64>().powi(2));
                if r == 0.0 {
                    break;
                }
            }
            env_u.push(mu);
            env_g.push(mg);
        }
        let what = format!("u^2 term at t={t}");
        u_term = u_term.max(radial_sup_integral(&radii, &env_u, n, eps, plan.tail_tolerance, &what)?);
        let what = format!("|grad u|^4 term at t={t}");
        grad_term = grad_term.max(radial_sup_integral(&radii, &env_g, n, eps, plan.tail_tolerance, &what)?);
    }
    Ok(UprimeEstimate {
        value: u_term + grad_term,
        u_term,
        grad_term,
        r_max: plan.r_max,
        times: times.to_vec(),
        points_evaluated: points,
    })
}
