//! Euler-Maruyama engines: the frozen-path auxiliary SDE, the self-consistent
//! quantile-coupled system, and the backward Feynman-Kac process with its
//! variational equation.
//!
//! Particle `i` always draws from `substream(seed, purpose, i)`, so ensembles
//! are a pure function of the inputs no matter how rayon splits the work.

use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{InitialDensity, ModelSpec, Workspace};
use crate::path::QuantilePath;
use crate::rng::{substream, Purpose};

/// Particles per rayon task.
const CHUNK: usize = 256;

/// Monte Carlo settings shared by the simulation-based operations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McConfig {
    pub n_particles: usize,
    pub dt: f64,
    pub seed: u64,
    /// Quantile nodes are recorded every `thin` steps.
    pub thin: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n_particles: 100_000,
            dt: 1e-3,
            seed: 0,
            thin: 10,
        }
    }
}

impl McConfig {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..*self }
    }

    pub fn with_particles(&self, n_particles: usize) -> Self {
        Self { n_particles, ..*self }
    }

    fn validate(&self) -> Result<()> {
        if self.n_particles == 0 {
            return Err(Error::Configuration("N must be at least 1".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Configuration("dt must be positive".into()));
        }
        if self.thin == 0 {
            return Err(Error::Configuration("thin must be at least 1".into()));
        }
        Ok(())
    }
}

/// Terminal states of `N` particles at a common time.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    n: usize,
    /// Row-major `N x n`.
    states: Vec<f64>,
    pub t: f64,
    pub seed: u64,
    pub dt: f64,
}

const MAGIC: &[u8; 4] = b"QMKV";

impl ParticleEnsemble {
    pub fn new(n: usize, states: Vec<f64>, t: f64, seed: u64, dt: f64) -> Result<Self> {
        if n == 0 || states.len() % n != 0 {
            return Err(Error::Configuration("ensemble length is not a multiple of n".into()));
        }
        if let Some(i) = states.iter().position(|v| !v.is_finite()) {
            return Err(Error::BlowUp { step: 0, particle: i / n });
        }
        Ok(Self { n, states, t, seed, dt })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.n
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.states[i * self.n..(i + 1) * self.n]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.states.iter().skip(j).step_by(self.n).copied().collect()
    }

    /// Component-wise empirical quantile (order statistic `ceil(alpha_j N)`).
    pub fn quantile(&self, alpha: &[f64]) -> Result<Vec<f64>> {
        if self.is_empty() {
            return Err(Error::Domain("quantile of an empty ensemble".into()));
        }
        if alpha.len() != self.n {
            return Err(Error::Configuration("alpha has the wrong dimension".into()));
        }
        let mut buf = Vec::with_capacity(self.len());
        Ok(ensemble_quantile(&self.states, self.n, alpha, &mut buf))
    }

    /// Asymptotic standard error of the empirical quantile,
    /// `sqrt(alpha(1-alpha)/N) / p(q)`, with the density at the quantile taken
    /// from the spacing of the order statistics at `alpha +- h`.
    pub fn quantile_stderr(&self, alpha: &[f64]) -> Result<Vec<f64>> {
        if self.len() < 2 {
            return Err(Error::Domain("quantile error needs at least two particles".into()));
        }
        if alpha.len() != self.n {
            return Err(Error::Configuration("alpha has the wrong dimension".into()));
        }
        let m = self.len() as f64;
        let h = (m.powf(-1.0 / 3.0)).clamp(1e-3, 0.05);
        Ok((0..self.n)
            .map(|j| {
                let a = alpha[j];
                let (lo, hi) = ((a - h).max(1e-6), (a + h).min(1.0 - 1e-6));
                let mut col = self.column(j);
                let q_hi = empirical_quantile(&mut col, hi);
                let q_lo = empirical_quantile(&mut col, lo);
                let inv_density = (q_hi - q_lo) / (hi - lo);
                (a * (1.0 - a) / m).sqrt() * inv_density
            })
            .collect())
    }

    /// Sample mean and (unbiased) variance of coordinate `j`.
    pub fn mean_var(&self, j: usize) -> (f64, f64) {
        mean_var(&self.column(j))
    }

    /// Every `stride`-th particle.
    pub fn thinned(&self, stride: usize) -> Self {
        let stride = stride.max(1);
        let states = (0..self.len())
            .step_by(stride)
            .flat_map(|i| self.row(i).iter().copied())
            .collect();
        Self { states, ..self.clone() }
    }

    /// CSV with header `particle_id,x1..xn`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let cols: Vec<String> = (1..=self.n).map(|j| format!("x{j}")).collect();
        writeln!(w, "particle_id,{}", cols.join(","))?;
        for i in 0..self.len() {
            write!(w, "{i}")?;
            for v in self.row(i) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Binary dump: 16-byte header (`QMKV`, u32 N, u32 n, 4 reserved bytes)
    /// followed by little-endian f64 rows.
    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        w.write_all(&(self.n as u32).to_le_bytes())?;
        w.write_all(&[0u8; 4])?;
        for v in &self.states {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut head = [0u8; 16];
        r.read_exact(&mut head)?;
        if &head[..4] != MAGIC {
            return Err(Error::Parse("bad ensemble magic".into()));
        }
        let count = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
        let n = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
        let mut bytes = vec![0u8; count * n * 8];
        r.read_exact(&mut bytes)?;
        let states = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Self::new(n, states, f64::NAN, 0, f64::NAN)
    }
}

pub(crate) fn mean_var(v: &[f64]) -> (f64, f64) {
    let m = v.len() as f64;
    let mean = v.iter().sum::<f64>() / m;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m - 1.0).max(1.0);
    (mean, var)
}

/// 1-based order-statistic index `ceil(alpha N)`, robust to `alpha N` landing a
/// rounding error above an integer.
pub fn order_index(alpha: f64, count: usize) -> usize {
    let x = alpha * count as f64;
    let k = (x - 1e-9 * x.max(1.0)).ceil() as usize;
    k.clamp(1, count)
}

/// Order statistic `ceil(alpha N)` of `values` (reordered in place).
pub fn empirical_quantile(values: &mut [f64], alpha: f64) -> f64 {
    let k = order_index(alpha, values.len());
    let (_, v, _) = values.select_nth_unstable_by(k - 1, f64::total_cmp);
    *v
}

fn ensemble_quantile(states: &[f64], n: usize, alpha: &[f64], buf: &mut Vec<f64>) -> Vec<f64> {
    (0..n)
        .map(|j| {
            buf.clear();
            buf.extend(states.iter().skip(j).step_by(n));
            empirical_quantile(buf, alpha[j])
        })
        .collect()
}

/// Where the particles start.
#[derive(Debug, Clone, Copy)]
pub enum Start<'a> {
    Density(&'a InitialDensity),
    Point(&'a [f64]),
    Ensemble(&'a ParticleEnsemble),
}

/// What is plugged into the `y` argument of the coefficients.
#[derive(Debug, Clone, Copy)]
pub enum Drive<'a> {
    /// A frozen quantile path.
    Frozen(&'a QuantilePath),
    /// The current empirical quantile of the ensemble itself.
    SelfConsistent,
}

/// Output of [`evolve`]: terminal ensemble and the empirical quantile
/// recorded at every node.
#[derive(Debug, Clone)]
pub struct Evolution {
    pub ensemble: ParticleEnsemble,
    pub quantiles: QuantilePath,
}

/// Uniform step grid on `[t0, t1]` with nodes every `thin` steps plus the end.
#[derive(Debug, Clone)]
pub struct StepGrid {
    pub t0: f64,
    pub steps: usize,
    pub dt: f64,
    /// Step indices at which quantiles are recorded.
    pub nodes: Vec<usize>,
}

impl StepGrid {
    pub fn new(t0: f64, t1: f64, dt: f64, thin: usize) -> Self {
        let span = t1 - t0;
        let steps = if span <= 0.0 {
            0
        } else {
            ((span / dt) - 1e-9).ceil().max(1.0) as usize
        };
        let dt = if steps == 0 { dt } else { span / steps as f64 };
        let mut nodes: Vec<usize> = (0..=steps).step_by(thin.max(1)).collect();
        if *nodes.last().unwrap() != steps {
            nodes.push(steps);
        }
        Self { t0, steps, dt, nodes }
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn end(&self) -> f64 {
        self.time(self.steps)
    }

    pub fn node_times(&self) -> Vec<f64> {
        self.nodes.iter().map(|&k| self.time(k)).collect()
    }
}

fn initial_states(start: Start<'_>, n: usize, count: usize, seed: u64) -> Result<Vec<f64>> {
    match start {
        Start::Density(init) => {
            if init.n() != n {
                return Err(Error::Configuration("initial density has the wrong dimension".into()));
            }
            init.sample(count, seed)
        }
        Start::Point(x) => {
            if x.len() != n {
                return Err(Error::Configuration("start point has the wrong dimension".into()));
            }
            Ok(x.iter().copied().cycle().take(count * n).collect())
        }
        Start::Ensemble(e) => {
            if e.n() != n {
                return Err(Error::Configuration("start ensemble has the wrong dimension".into()));
            }
            Ok(e.states().to_vec())
        }
    }
}

fn first_non_finite(states: &[f64], n: usize) -> Option<usize> {
    states.iter().position(|v| !v.is_finite()).map(|i| i / n)
}

/// Advance every particle through steps `k0..k1` of `grid`, with `ys` holding
/// the plug-in vector for each of those steps.
fn advance(
    spec: &ModelSpec,
    states: &mut [f64],
    rngs: &mut [ChaCha8Rng],
    grid: &StepGrid,
    k0: usize,
    k1: usize,
    ys: &[f64],
) {
    let n = spec.n();
    let dt = grid.dt;
    let sq = dt.sqrt();
    states
        .par_chunks_mut(n * CHUNK)
        .zip(rngs.par_chunks_mut(CHUNK))
        .for_each(|(st, rg)| {
            let mut f = vec![0.0; n];
            for (x, rng) in st.chunks_exact_mut(n).zip(rg.iter_mut()) {
                for k in k0..k1 {
                    let s = grid.time(k);
                    let y = &ys[(k - k0) * n..(k - k0 + 1) * n];
                    spec.drift(s, y, x, &mut f);
                    let sig = spec.sigma(s, y, x);
                    let z: f64 = rng.sample(StandardNormal);
                    for j in 0..n {
                        x[j] += f[j] * dt;
                    }
                    x[0] += sig * sq * z;
                }
            }
        });
}

/// Simulate from `t0` to `t1` under `drive`, recording the empirical
/// `alpha`-quantile at the grid nodes.
pub fn evolve(
    spec: &ModelSpec,
    start: Start<'_>,
    t0: f64,
    t1: f64,
    drive: Drive<'_>,
    mc: &McConfig,
) -> Result<Evolution> {
    mc.validate()?;
    let n = spec.n();
    if let Drive::Frozen(omega) = drive {
        if omega.n() != n {
            return Err(Error::Configuration("omega has the wrong dimension".into()));
        }
        omega.require_cover(t0, t1)?;
    }
    let count = match start {
        Start::Ensemble(e) => e.len(),
        _ => mc.n_particles,
    };
    let grid = StepGrid::new(t0, t1, mc.dt, mc.thin);
    let mut states = initial_states(start, n, count, mc.seed)?;
    if let Some(p) = first_non_finite(&states, n) {
        return Err(Error::BlowUp { step: 0, particle: p });
    }
    let mut rngs: Vec<ChaCha8Rng> = (0..count)
        .map(|i| substream(mc.seed, Purpose::Noise, i as u64))
        .collect();
    let alpha = spec.alpha();
    let mut buf = Vec::with_capacity(count);
    let mut recorded = Vec::with_capacity(grid.nodes.len() * n);
    recorded.extend(ensemble_quantile(&states, n, alpha, &mut buf));

    let mut ys = Vec::new();
    for w in grid.nodes.windows(2) {
        let (a, b) = (w[0], w[1]);
        match drive {
            Drive::Frozen(omega) => {
                ys.resize((b - a) * n, 0.0);
                for k in a..b {
                    omega.eval_into(grid.time(k), &mut ys[(k - a) * n..(k - a + 1) * n]);
                }
                advance(spec, &mut states, &mut rngs, &grid, a, b, &ys);
            }
            Drive::SelfConsistent => {
                for k in a..b {
                    let y = if k == a {
                        recorded[recorded.len() - n..].to_vec()
                    } else {
                        ensemble_quantile(&states, n, alpha, &mut buf)
                    };
                    advance(spec, &mut states, &mut rngs, &grid, k, k + 1, &y);
                }
            }
        }
        if let Some(p) = first_non_finite(&states, n) {
            return Err(Error::BlowUp { step: b, particle: p });
        }
        recorded.extend(ensemble_quantile(&states, n, alpha, &mut buf));
    }

    let quantiles = QuantilePath::new(n, grid.node_times(), recorded)?;
    let ensemble = ParticleEnsemble {
        n,
        states,
        t: t1,
        seed: mc.seed,
        dt: grid.dt,
    };
    Ok(Evolution { ensemble, quantiles })
}

/// The auxiliary SDE driven by a frozen path `omega`, from `X_0 ~ init` to time `t`.
pub fn simulate_auxiliary(
    spec: &ModelSpec,
    omega: &QuantilePath,
    init: &InitialDensity,
    t: f64,
    mc: &McConfig,
) -> Result<ParticleEnsemble> {
    evolve(spec, Start::Density(init), 0.0, t, Drive::Frozen(omega), mc).map(|e| e.ensemble)
}

/// The self-consistent system: at every step the coefficients see the current
/// empirical quantile. Returns the terminal ensemble and the recorded path.
pub fn simulate_mckean(
    spec: &ModelSpec,
    init: &InitialDensity,
    t: f64,
    mc: &McConfig,
) -> Result<(ParticleEnsemble, QuantilePath)> {
    let e = evolve(spec, Start::Density(init), 0.0, t, Drive::SelfConsistent, mc)?;
    Ok((e.ensemble, e.quantiles))
}

/// Paths of the backward Feynman-Kac process started at `x`, stored flat.
#[derive(Debug, Clone)]
pub struct FkSamples {
    pub n: usize,
    pub t: f64,
    pub x: Vec<f64>,
    /// `N x n`.
    pub terminal: Vec<f64>,
    /// `int_0^t c(t-s, omega_{t-s}, X_s) ds`, one per path.
    pub exponent: Vec<f64>,
    /// `N x n x n`, row-major per path; empty unless requested.
    pub jacobian: Vec<f64>,
    /// `int_0^t grad c(X_s) . grad X_s ds`, `N x n`; empty unless requested.
    pub c_grad: Vec<f64>,
    pub dt: f64,
}

impl FkSamples {
    pub fn len(&self) -> usize {
        self.exponent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponent.is_empty()
    }

    pub fn terminal(&self, i: usize) -> &[f64] {
        &self.terminal[i * self.n..(i + 1) * self.n]
    }

    pub fn jacobian(&self, i: usize) -> Option<&[f64]> {
        let nn = self.n * self.n;
        self.jacobian.get(i * nn..(i + 1) * nn)
    }

    pub fn c_grad(&self, i: usize) -> Option<&[f64]> {
        self.c_grad.get(i * self.n..(i + 1) * self.n)
    }
}

struct FkScratch {
    ws: Workspace,
    y: Vec<f64>,
    b: Vec<f64>,
    bj: Vec<f64>,
    sg: Vec<f64>,
    cg: Vec<f64>,
    jn: Vec<f64>,
}

/// One backward path. Writes terminal state, exponent and (optionally) the
/// Jacobian and the `grad c` path integral.
#[allow(clippy::too_many_arguments)]
fn fk_path(
    spec: &ModelSpec,
    omega: &QuantilePath,
    grid: &StepGrid,
    t: f64,
    rng: &mut ChaCha8Rng,
    x: &mut [f64],
    jac: Option<(&mut [f64], &mut [f64])>,
    sc: &mut FkScratch,
) -> f64 {
    let n = spec.n();
    let dt = grid.dt;
    let sq = dt.sqrt();
    let mut e = 0.0;
    let mut jac = jac;
    if let Some((j, g)) = jac.as_mut() {
        j.fill(0.0);
        for i in 0..n {
            j[i * n + i] = 1.0;
        }
        g.fill(0.0);
    }
    for k in 0..grid.steps {
        let tau = (t - grid.time(k)).max(0.0);
        omega.eval_into(tau, &mut sc.y);
        let y = &sc.y;
        e += spec.c_with(tau, y, x, &mut sc.ws) * dt;
        spec.b_into(tau, y, x, &mut sc.b, &mut sc.ws);
        let sig = spec.sigma(tau, y, x);
        let dw = sq * rng.sample::<f64, _>(StandardNormal);
        if let Some((j, g)) = jac.as_mut() {
            spec.c_grad_into(tau, y, x, &mut sc.cg, &mut sc.ws);
            spec.b_jacobian_into(tau, y, x, &mut sc.bj, &mut sc.ws);
            spec.sigma_grad_into(tau, y, x, &mut sc.sg, &mut sc.ws);
            for c in 0..n {
                let mut acc = 0.0;
                for r in 0..n {
                    acc += sc.cg[r] * j[r * n + c];
                }
                g[c] += acc * dt;
            }
            for r in 0..n {
                for c in 0..n {
                    let mut acc = 0.0;
                    for m in 0..n {
                        acc += sc.bj[r * n + m] * j[m * n + c];
                    }
                    sc.jn[r * n + c] = j[r * n + c] + acc * dt;
                }
            }
            for c in 0..n {
                let mut acc = 0.0;
                for m in 0..n {
                    acc += sc.sg[m] * j[m * n + c];
                }
                sc.jn[c] += acc * dw;
            }
            j.copy_from_slice(&sc.jn);
        }
        for i in 0..n {
            x[i] += sc.b[i] * dt;
        }
        x[0] += sig * dw;
    }
    e
}

/// Backward process `dX_s = b(t-s, omega_{t-s}, X_s) ds + D sigma dW_s`, `X_0 = x`,
/// with the exponent `int c` and, if `with_jacobian`, the variational equation.
pub fn simulate_backward_fk(
    spec: &ModelSpec,
    omega: &QuantilePath,
    t: f64,
    x: &[f64],
    mc: &McConfig,
    with_jacobian: bool,
) -> Result<FkSamples> {
    mc.validate()?;
    let n = spec.n();
    if !(t > 0.0 && t <= spec.horizon() * (1.0 + 1e-12)) {
        return Err(Error::Domain(format!("Feynman-Kac time {t} outside (0, T]")));
    }
    if x.len() != n || omega.n() != n {
        return Err(Error::Configuration("dimension mismatch in Feynman-Kac".into()));
    }
    omega.require_cover(0.0, t)?;
    spec.ensure_derivatives()?;
    let grid = StepGrid::new(0.0, t, mc.dt, 1);
    let count = mc.n_particles;
    let nn = n * n;
    let mut terminal: Vec<f64> = x.iter().copied().cycle().take(count * n).collect();
    let mut exponent = vec![0.0; count];
    let (mut jacobian, mut c_grad) = if with_jacobian {
        (vec![0.0; count * nn], vec![0.0; count * n])
    } else {
        (Vec::new(), Vec::new())
    };

    let scratch = || FkScratch {
        ws: Workspace::new(n),
        y: vec![0.0; n],
        b: vec![0.0; n],
        bj: vec![0.0; nn],
        sg: vec![0.0; n],
        cg: vec![0.0; n],
        jn: vec![0.0; nn],
    };
    let base = |chunk: usize| chunk * CHUNK;
    if with_jacobian {
        terminal
            .par_chunks_mut(n * CHUNK)
            .zip(exponent.par_chunks_mut(CHUNK))
            .zip(jacobian.par_chunks_mut(nn * CHUNK))
            .zip(c_grad.par_chunks_mut(n * CHUNK))
            .enumerate()
            .for_each(|(ci, (((st, ex), jc), cg))| {
                let mut sc = scratch();
                for (p, e) in ex.iter_mut().enumerate() {
                    let mut rng = substream(mc.seed, Purpose::FeynmanKac, (base(ci) + p) as u64);
                    let xs = &mut st[p * n..(p + 1) * n];
                    let j = &mut jc[p * nn..(p + 1) * nn];
                    let g = &mut cg[p * n..(p + 1) * n];
                    *e = fk_path(spec, omega, &grid, t, &mut rng, xs, Some((j, g)), &mut sc);
                }
            });
    } else {
        terminal
            .par_chunks_mut(n * CHUNK)
            .zip(exponent.par_chunks_mut(CHUNK))
            .enumerate()
            .for_each(|(ci, (st, ex))| {
                let mut sc = scratch();
                for (p, e) in ex.iter_mut().enumerate() {
                    let mut rng = substream(mc.seed, Purpose::FeynmanKac, (base(ci) + p) as u64);
                    let xs = &mut st[p * n..(p + 1) * n];
                    *e = fk_path(spec, omega, &grid, t, &mut rng, xs, None, &mut sc);
                }
            });
    }
    if let Some(p) = first_non_finite(&terminal, n) {
        return Err(Error::BlowUp { step: grid.steps, particle: p });
    }
    if let Some(p) = exponent.iter().position(|v| !v.is_finite()) {
        return Err(Error::BlowUp { step: grid.steps, particle: p });
    }
    Ok(FkSamples {
        n,
        t,
        x: x.to_vec(),
        terminal,
        exponent,
        jacobian,
        c_grad,
        dt: grid.dt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LinearChain;
    use proptest::prelude::*;

    fn kolmogorov(n: usize) -> ModelSpec {
        LinearChain::kolmogorov(n).builder().unwrap().horizon(2.0).build().unwrap()
    }

    fn zero_path(n: usize) -> QuantilePath {
        QuantilePath::constant(&vec![0.0; n], 0.0, 2.0)
    }

    fn mc(n: usize, dt: f64, seed: u64) -> McConfig {
        McConfig { n_particles: n, dt, seed, thin: 10 }
    }

    #[test]
    fn brownian_variance() {
        let spec = kolmogorov(1);
        let e = evolve(&spec, Start::Point(&[0.0]), 0.0, 1.0, Drive::Frozen(&zero_path(1)), &mc(20_000, 1e-2, 1)).unwrap();
        let (_, v) = e.ensemble.mean_var(0);
        assert!((v - 1.0).abs() < 3.0 * (2.0 / 20_000f64).sqrt(), "{v}");
    }

    #[test]
    fn integrated_brownian_variance() {
        let spec = kolmogorov(2);
        let n = 20_000;
        let e = evolve(&spec, Start::Point(&[0.0, 0.0]), 0.0, 1.0, Drive::Frozen(&zero_path(2)), &mc(n, 1e-3, 2)).unwrap();
        let (_, v) = e.ensemble.mean_var(1);
        // Var of the sample variance of a Gaussian is 2 sigma^4 / (N - 1).
        let se = (1.0 / 3.0) * (2.0 / n as f64).sqrt();
        assert!((v - 1.0 / 3.0).abs() < 3.0 * se + 1e-3, "{v}");
    }

    #[test]
    fn y_independent_coefficients_ignore_omega() {
        let spec = kolmogorov(2);
        let init = InitialDensity::standard_gaussian(2);
        let other = QuantilePath::constant(&[3.0, -1.0], 0.0, 2.0);
        let c = mc(500, 1e-2, 7);
        let a = simulate_auxiliary(&spec, &zero_path(2), &init, 1.0, &c).unwrap();
        let b = simulate_auxiliary(&spec, &other, &init, 1.0, &c).unwrap();
        assert_eq!(a, b);
        let (m, _) = simulate_mckean(&spec, &init, 1.0, &c).unwrap();
        assert_eq!(a.states(), m.states());
    }

    #[test]
    fn recorded_path_starts_at_initial_quantile() {
        let spec = LinearChain::mean_reverting(1.0).builder().unwrap().alpha(vec![0.7]).build().unwrap();
        let init = InitialDensity::standard_gaussian(1);
        let c = mc(1000, 1e-2, 3);
        let (_, path) = simulate_mckean(&spec, &init, 0.5, &c).unwrap();
        let mut x0 = init.sample(1000, 3).unwrap();
        assert_eq!(path.node(0)[0], empirical_quantile(&mut x0, 0.7));
        assert_eq!(path.times().len(), 6);
    }

    #[test]
    fn symmetric_median_stays_near_zero() {
        let spec = LinearChain::mean_reverting(1.0).builder().unwrap().build().unwrap();
        let init = InitialDensity::standard_gaussian(1);
        let (_, path) = simulate_mckean(&spec, &init, 1.0, &mc(40_000, 1e-2, 4)).unwrap();
        // Median SE at unit scale ~ 1.2533 / sqrt(N).
        let tol = 4.0 * 1.2533 / 200.0;
        for k in 0..path.len() {
            assert!(path.node(k)[0].abs() < tol, "{:?}", path.node(k));
        }
    }

    #[test]
    fn same_result_for_any_thread_count() {
        let spec = LinearChain::mean_reverting(1.0).builder().unwrap().alpha(vec![0.3]).build().unwrap();
        let init = InitialDensity::standard_gaussian(1);
        let c = mc(3000, 1e-2, 5);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| simulate_mckean(&spec, &init, 0.5, &c).unwrap())
        };
        let (a, pa) = run(1);
        let (b, pb) = run(3);
        assert_eq!(a, b);
        assert_eq!(pa, pb);
    }

    #[test]
    fn blow_up_is_an_error() {
        let spec = ModelSpec::builder(1, |_, _, x: &[f64], o: &mut [f64]| o[0] = x[0] * x[0] * x[0], |_, _, _| 1.0)
            .build()
            .unwrap();
        let r = evolve(&spec, Start::Point(&[5.0]), 0.0, 1.0, Drive::Frozen(&zero_path(1)), &mc(10, 0.1, 0));
        assert!(matches!(r, Err(Error::BlowUp { .. })), "{r:?}");
    }

    #[test]
    fn uncovered_omega_is_a_domain_error() {
        let spec = kolmogorov(1);
        let short = QuantilePath::constant(&[0.0], 0.0, 0.5);
        let init = InitialDensity::standard_gaussian(1);
        assert!(matches!(
            simulate_auxiliary(&spec, &short, &init, 1.0, &mc(10, 0.1, 0)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn weak_error_is_first_order() {
        // Kolmogorov chain with a drift perturbation so the scheme is not exact.
        let chain = LinearChain {
            trig: crate::model::TrigPerturbation { drift_amp: 0.5, drift_freq: 1.0, ..Default::default() },
            ..LinearChain::kolmogorov(2)
        };
        let spec = chain.builder().unwrap().horizon(2.0).build().unwrap();
        let m2 = |dt: f64| {
            let e = evolve(&spec, Start::Point(&[0.5, 0.0]), 0.0, 1.0, Drive::Frozen(&zero_path(2)), &mc(40_000, dt, 9)).unwrap();
            let c = e.ensemble.column(1);
            c.iter().map(|v| v * v).sum::<f64>() / c.len() as f64
        };
        let (a, b) = (m2(0.04), m2(0.02));
        assert!((a - b).abs() < 0.05, "{a} {b}");
    }

    #[test]
    fn fk_constant_coefficients() {
        let spec = kolmogorov(1);
        let s = simulate_backward_fk(&spec, &zero_path(1), 1.0, &[0.3], &mc(2000, 1e-2, 1), true).unwrap();
        assert!(s.exponent.iter().all(|e| *e == 0.0));
        assert!(s.jacobian.iter().all(|j| *j == 1.0));
        let (m, v) = mean_var(&s.terminal);
        assert!((m - 0.3).abs() < 0.1 && (v - 1.0).abs() < 0.15);
    }

    #[test]
    fn fk_kolmogorov_jacobian() {
        // b = (0, -x1), so dJ21 = -J11 dt and J21(t) = -t; the shear entry has
        // magnitude t with the sign set by the time reversal.
        let spec = kolmogorov(2);
        let s = simulate_backward_fk(&spec, &zero_path(2), 0.7, &[0.0, 0.0], &mc(10, 1e-3, 1), true).unwrap();
        for i in 0..s.len() {
            let j = s.jacobian(i).unwrap();
            assert_eq!(j[0], 1.0);
            assert_eq!(j[3], 1.0);
            assert_eq!(j[1], 0.0);
            assert!((j[2] + 0.7).abs() < 1e-9, "{j:?}");
        }
    }

    #[test]
    fn binary_round_trip() {
        let e = ParticleEnsemble::new(2, vec![1.0, 2.0, -3.5, 4.25], 1.0, 3, 0.1).unwrap();
        let mut buf = Vec::new();
        e.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 32);
        assert_eq!(&buf[..4], b"QMKV");
        let back = ParticleEnsemble::read_binary(&buf[..]).unwrap();
        assert_eq!(back.states(), e.states());
        let mut csv = Vec::new();
        e.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap(), "particle_id,x1,x2\n0,1,2\n1,-3.5,4.25\n");
    }

    #[test]
    fn order_statistic_index() {
        assert_eq!(order_index(0.7, 100_000), 70_000);
        assert_eq!(order_index(0.5, 3), 2);
        assert_eq!(order_index(0.01, 10), 1);
        let mut v = vec![0.4, 0.1, 0.3, 0.2];
        assert_eq!(empirical_quantile(&mut v, 0.5), 0.2);
        assert_eq!(empirical_quantile(&mut v, 0.51), 0.3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn fk_exponent_within_two_kappa_t(
            amp in 0.0..0.5f64,
            freq in 0.5..2.0f64,
            t in 0.05..1.0f64,
            x in -2.0..2.0f64,
        ) {
            let chain = LinearChain {
                trig: crate::model::TrigPerturbation { drift_amp: amp, drift_freq: freq, sigma_amp: 0.2, sigma_freq: 0.5 },
                ..LinearChain::kolmogorov(2)
            };
            let spec = chain.builder().unwrap().horizon(2.0).kappa(2.0).build().unwrap();
            let s = simulate_backward_fk(&spec, &zero_path(2), t, &[x, 0.0], &mc(50, 1e-2, 3), false).unwrap();
            let bound = 2.0 * spec.kappa() * t;
            prop_assert!(s.exponent.iter().all(|e| e.abs() <= bound + 1e-12));
        }

        #[test]
        fn quantile_shift_equivariance(
            v in prop::collection::vec(-10.0..10.0f64, 1..200),
            alpha in 0.01..0.99f64,
            c in -5.0..5.0f64,
        ) {
            let e = ParticleEnsemble::new(1, v.clone(), 0.0, 0, 0.0).unwrap();
            let shifted = ParticleEnsemble::new(1, v.iter().map(|x| x + c).collect(), 0.0, 0, 0.0).unwrap();
            let q = e.quantile(&[alpha]).unwrap()[0];
            let qs = shifted.quantile(&[alpha]).unwrap()[0];
            prop_assert_eq!(qs, q + c);
        }

        #[test]
        fn noise_enters_only_first_coordinate(seed in 0u64..1000) {
            let spec = ModelSpec::builder(3, |_, _, _, o: &mut [f64]| o.fill(0.0), |_, _, _| 1.0).build().unwrap();
            let e = evolve(&spec, Start::Point(&[1.0, 2.0, 3.0]), 0.0, 0.01, Drive::Frozen(&zero_path(3)), &mc(20, 0.01, seed)).unwrap();
            for i in 0..20 {
                prop_assert_eq!(&e.ensemble.row(i)[1..], &[2.0, 3.0][..]);
            }
        }
    }
}
