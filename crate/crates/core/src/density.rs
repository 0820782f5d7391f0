//! Density estimates, L1 arithmetic, tail mass, quantiles and the set of
//! "well-spread" densities used by the quantile-Lipschitz bound.
//!
//! Kernel estimates are mixtures of product Gaussians with a common bandwidth.
//! An exact Gaussian is the one-component case. Grid estimates are
//! piecewise-constant on the cells of a box.

use std::io::{BufRead, Write};
use std::sync::OnceLock;

use rand::Rng;
use rayon::prelude::*;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::particle::{mean_var, ParticleEnsemble};
use crate::rng::{substream, Purpose};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub(crate) fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Kernel support is cut at this many bandwidths.
const KERNEL_CUTOFF: f64 = 8.0;

/// Axis-aligned box.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Bounds {
    pub fn cube(n: usize, k: f64) -> Self {
        Self {
            lo: vec![-k; n],
            hi: vec![k; n],
        }
    }

    fn union(&self, other: &Bounds) -> Bounds {
        Bounds {
            lo: self.lo.iter().zip(&other.lo).map(|(a, b)| a.min(*b)).collect(),
            hi: self.hi.iter().zip(&other.hi).map(|(a, b)| a.max(*b)).collect(),
        }
    }

    fn intersects(&self, other: &Bounds) -> bool {
        (0..self.lo.len()).all(|j| self.lo[j] < other.hi[j] && other.lo[j] < self.hi[j])
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DensityKind {
    Kernel,
    Grid,
    Blend,
}

#[derive(Debug, Clone)]
struct Mixture {
    n: usize,
    /// Row-major, sorted by the first coordinate.
    centers: Vec<f64>,
    bandwidth: Vec<f64>,
    /// Whether the centers are random samples (a kernel estimate) rather than exact parameters.
    estimated: bool,
}

impl Mixture {
    fn count(&self) -> usize {
        self.centers.len() / self.n
    }

    fn center(&self, i: usize) -> &[f64] {
        &self.centers[i * self.n..(i + 1) * self.n]
    }

    fn window(&self, x0: f64) -> std::ops::Range<usize> {
        let n = self.n;
        let reach = KERNEL_CUTOFF * self.bandwidth[0];
        let count = self.count();
        let lo = partition(count, |i| self.centers[i * n] < x0 - reach);
        let hi = partition(count, |i| self.centers[i * n] <= x0 + reach);
        lo..hi
    }

    /// `(sum_i k_i, sum_i k_i^2)` over components within the kernel window.
    fn kernel_sums(&self, x: &[f64]) -> (f64, f64) {
        let n = self.n;
        let norm: f64 = self.bandwidth.iter().map(|h| INV_SQRT_2PI / h).product();
        let inv: Vec<f64> = self.bandwidth.iter().map(|h| 1.0 / h).collect();
        let cut = KERNEL_CUTOFF * KERNEL_CUTOFF;
        let (mut s1, mut s2) = (0.0, 0.0);
        for i in self.window(x[0]) {
            let c = self.center(i);
            let mut q = 0.0;
            for j in 0..n {
                let z = (x[j] - c[j]) * inv[j];
                q += z * z;
            }
            if q < 2.0 * cut {
                let k = norm * (-0.5 * q).exp();
                s1 += k;
                s2 += k * k;
            }
        }
        (s1, s2)
    }

    fn eval_with_se(&self, x: &[f64]) -> (f64, f64) {
        let m = self.count() as f64;
        let (s1, s2) = self.kernel_sums(x);
        let mean = s1 / m;
        if !self.estimated || self.count() < 2 {
            return (mean, 0.0);
        }
        let var = (s2 / m - mean * mean).max(0.0);
        (mean, (var / m).sqrt())
    }

    fn marginal_cdf(&self, j: usize, q: f64) -> f64 {
        let h = self.bandwidth[j];
        let s: f64 = (0..self.count())
            .map(|i| normal_cdf((q - self.centers[i * self.n + j]) / h))
            .sum();
        s / self.count() as f64
    }

    fn marginal_pdf(&self, j: usize, q: f64) -> f64 {
        let h = self.bandwidth[j];
        let s: f64 = (0..self.count())
            .map(|i| {
                let z = (q - self.centers[i * self.n + j]) / h;
                INV_SQRT_2PI / h * (-0.5 * z * z).exp()
            })
            .sum();
        s / self.count() as f64
    }

    fn inside_mass(&self, k: f64) -> f64 {
        let n = self.n;
        let s: f64 = (0..self.count())
            .into_par_iter()
            .with_min_len(4096)
            .map(|i| {
                let c = self.center(i);
                (0..n)
                    .map(|j| {
                        let h = self.bandwidth[j];
                        normal_cdf((k - c[j]) / h) - normal_cdf((-k - c[j]) / h)
                    })
                    .product::<f64>()
            })
            .collect::<Vec<f64>>()
            .iter()
            .sum();
        s / self.count() as f64
    }

    fn support(&self, sigmas: f64) -> Bounds {
        let n = self.n;
        let mut lo = vec![0.0; n];
        let mut hi = vec![0.0; n];
        for j in 0..n {
            let col: Vec<f64> = self.centers.iter().skip(j).step_by(n).copied().collect();
            let (m, v) = if col.len() > 1 { mean_var(&col) } else { (col[0], 0.0) };
            let s = (v + self.bandwidth[j].powi(2)).sqrt();
            lo[j] = m - sigmas * s;
            hi[j] = m + sigmas * s;
        }
        Bounds { lo, hi }
    }

    /// Values at the cell midpoints of a tensor grid, by linear binning followed by
    /// separable convolution with the kernel. Exact-density mixtures with few
    /// components are evaluated directly.
    fn tabulate(&self, b: &Bounds, nodes: usize) -> Vec<f64> {
        let n = self.n;
        let total = nodes.pow(n as u32);
        if self.count() <= 64 {
            return (0..total)
                .into_par_iter()
                .map(|flat| self.eval_with_se(&midpoint(b, nodes, flat)).0)
                .collect();
        }
        let d: Vec<f64> = (0..n).map(|j| (b.hi[j] - b.lo[j]) / nodes as f64).collect();
        let mut grid = vec![0.0; total];
        let w = 1.0 / self.count() as f64;
        let mut idx = vec![0usize; n];
        let mut frac = vec![0.0; n];
        'outer: for i in 0..self.count() {
            let c = self.center(i);
            for j in 0..n {
                let u = (c[j] - b.lo[j]) / d[j] - 0.5;
                if !(u >= 0.0 && u < (nodes - 1) as f64) {
                    // Outside the grid: drop (box covers 6 sigma of the estimate).
                    continue 'outer;
                }
                let f = u.floor();
                idx[j] = f as usize;
                frac[j] = u - f;
            }
            for corner in 0..(1usize << n) {
                let mut flat = 0;
                let mut wt = w;
                for j in 0..n {
                    let up = (corner >> j) & 1;
                    flat = flat * nodes + idx[j] + up;
                    wt *= if up == 1 { frac[j] } else { 1.0 - frac[j] };
                }
                grid[flat] += wt;
            }
        }
        for j in 0..n {
            let h = self.bandwidth[j];
            let reach = ((KERNEL_CUTOFF * h) / d[j]).ceil() as usize;
            let taps: Vec<f64> = (0..=reach)
                .map(|m| {
                    let z = m as f64 * d[j] / h;
                    INV_SQRT_2PI / h * (-0.5 * z * z).exp()
                })
                .collect();
            grid = convolve_axis(&grid, n, nodes, j, &taps);
        }
        grid
    }
}

fn partition(len: usize, pred: impl Fn(usize) -> bool) -> usize {
    let (mut lo, mut hi) = (0, len);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if pred(mid) {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Symmetric convolution along `axis` of a `nodes^n` grid (last axis fastest).
fn convolve_axis(grid: &[f64], n: usize, nodes: usize, axis: usize, taps: &[f64]) -> Vec<f64> {
    let stride = nodes.pow((n - 1 - axis) as u32);
    let block = stride * nodes;
    let mut out = vec![0.0; grid.len()];
    out.par_chunks_mut(block)
        .zip(grid.par_chunks(block))
        .for_each(|(o, g)| {
            for inner in 0..stride {
                for k in 0..nodes {
                    let mut acc = g[k * stride + inner] * taps[0];
                    for (m, t) in taps.iter().enumerate().skip(1) {
                        if k >= m {
                            acc += g[(k - m) * stride + inner] * t;
                        }
                        if k + m < nodes {
                            acc += g[(k + m) * stride + inner] * t;
                        }
                    }
                    o[k * stride + inner] = acc;
                }
            }
        });
    out
}

fn midpoint(b: &Bounds, nodes: usize, mut flat: usize) -> Vec<f64> {
    let n = b.lo.len();
    let mut x = vec![0.0; n];
    for j in (0..n).rev() {
        let k = flat % nodes;
        flat /= nodes;
        x[j] = b.lo[j] + (k as f64 + 0.5) * (b.hi[j] - b.lo[j]) / nodes as f64;
    }
    x
}

#[derive(Debug, Clone)]
struct Grid {
    bounds: Bounds,
    cells: Vec<usize>,
    /// Cell values, last axis fastest.
    values: Vec<f64>,
}

impl Grid {
    fn n(&self) -> usize {
        self.cells.len()
    }

    fn width(&self, j: usize) -> f64 {
        (self.bounds.hi[j] - self.bounds.lo[j]) / self.cells[j] as f64
    }

    fn cell_volume(&self) -> f64 {
        (0..self.n()).map(|j| self.width(j)).product()
    }

    fn locate(&self, x: &[f64]) -> Option<usize> {
        let mut flat = 0;
        for j in 0..self.n() {
            let u = (x[j] - self.bounds.lo[j]) / self.width(j);
            if !(u >= 0.0 && u < self.cells[j] as f64) {
                return None;
            }
            flat = flat * self.cells[j] + u as usize;
        }
        Some(flat)
    }

    fn unflatten(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.n()];
        for j in (0..self.n()).rev() {
            idx[j] = flat % self.cells[j];
            flat /= self.cells[j];
        }
        idx
    }

    fn marginal_masses(&self, j: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.cells[j]];
        let vol = self.cell_volume();
        for (flat, v) in self.values.iter().enumerate() {
            m[self.unflatten(flat)[j]] += v * vol;
        }
        m
    }

    fn marginal_cdf(&self, j: usize, q: f64) -> f64 {
        let m = self.marginal_masses(j);
        let w = self.width(j);
        let u = (q - self.bounds.lo[j]) / w;
        if u <= 0.0 {
            return 0.0;
        }
        let full = (u.floor() as usize).min(m.len());
        let mut acc: f64 = m[..full].iter().sum();
        if full < m.len() {
            acc += m[full] * (u - full as f64);
        }
        acc
    }

    fn inside_mass(&self, k: f64) -> f64 {
        let vol = self.cell_volume();
        self.values
            .iter()
            .enumerate()
            .map(|(flat, v)| {
                let idx = self.unflatten(flat);
                let frac: f64 = (0..self.n())
                    .map(|j| {
                        let a = self.bounds.lo[j] + idx[j] as f64 * self.width(j);
                        let b = a + self.width(j);
                        ((b.min(k) - a.max(-k)).max(0.0)) / self.width(j)
                    })
                    .product();
                v * vol * frac
            })
            .sum()
    }
}

#[derive(Debug, Clone)]
enum Inner {
    Mixture(Mixture),
    Grid(Grid),
    Blend(Box<DensityEstimate>, Box<DensityEstimate>, f64),
}

/// A density on `R^n`: kernel estimate, exact Gaussian, grid, or a convex blend.
#[derive(Debug, Clone)]
pub struct DensityEstimate {
    inner: Inner,
    mass: OnceLock<f64>,
}

/// Silverman's rule per coordinate, `sd_j (4 / ((n + 2) N))^{1/(n+4)}`.
pub fn silverman_bandwidth(samples: &[f64], n: usize) -> Vec<f64> {
    let count = samples.len() / n;
    let factor = (4.0 / ((n as f64 + 2.0) * count as f64)).powf(1.0 / (n as f64 + 4.0));
    (0..n)
        .map(|j| {
            let col: Vec<f64> = samples.iter().skip(j).step_by(n).copied().collect();
            let (_, v) = mean_var(&col);
            v.sqrt().max(1e-12) * factor
        })
        .collect()
}

impl DensityEstimate {
    fn from_inner(inner: Inner) -> Self {
        Self {
            inner,
            mass: OnceLock::new(),
        }
    }

    /// Gaussian kernel estimate from row-major samples. Silverman bandwidth unless given.
    pub fn kde_from_samples(n: usize, samples: Vec<f64>, bandwidth: Option<&[f64]>) -> Result<Self> {
        if n == 0 || samples.is_empty() || samples.len() % n != 0 {
            return Err(Error::Domain("kernel estimate needs a nonempty sample".into()));
        }
        let bandwidth = match bandwidth {
            Some(h) if h.len() == n && h.iter().all(|v| *v > 0.0) => h.to_vec(),
            Some(_) => return Err(Error::Configuration("bandwidth must be positive, one per coordinate".into())),
            None => silverman_bandwidth(&samples, n),
        };
        let mut rows: Vec<&[f64]> = samples.chunks_exact(n).collect();
        rows.sort_by(|a, b| a[0].total_cmp(&b[0]));
        let centers = rows.concat();
        Ok(Self::from_inner(Inner::Mixture(Mixture {
            n,
            centers,
            bandwidth,
            estimated: true,
        })))
    }

    pub fn kde(ens: &ParticleEnsemble, bandwidth: Option<&[f64]>) -> Result<Self> {
        Self::kde_from_samples(ens.n(), ens.states().to_vec(), bandwidth)
    }

    /// Exact product Gaussian `N(mean, diag(sd^2))`.
    pub fn gaussian(mean: Vec<f64>, sd: Vec<f64>) -> Result<Self> {
        if mean.is_empty() || sd.len() != mean.len() || sd.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Configuration("gaussian needs positive sd per coordinate".into()));
        }
        Ok(Self::from_inner(Inner::Mixture(Mixture {
            n: mean.len(),
            centers: mean,
            bandwidth: sd,
            estimated: false,
        })))
    }

    /// Piecewise-constant density on the cells of `bounds`.
    pub fn grid(bounds: Bounds, cells: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n = cells.len();
        if n == 0
            || bounds.lo.len() != n
            || bounds.hi.len() != n
            || cells.iter().any(|c| *c == 0)
            || values.len() != cells.iter().product::<usize>()
            || (0..n).any(|j| !(bounds.hi[j] > bounds.lo[j]))
        {
            return Err(Error::Configuration("inconsistent grid density".into()));
        }
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Domain("grid density values must be finite and nonnegative".into()));
        }
        Ok(Self::from_inner(Inner::Grid(Grid { bounds, cells, values })))
    }

    /// `beta * a + (1 - beta) * b`.
    pub fn blend(a: &DensityEstimate, b: &DensityEstimate, beta: f64) -> Result<Self> {
        if a.n() != b.n() || !(0.0..=1.0).contains(&beta) {
            return Err(Error::Configuration("blend needs equal dimensions and beta in [0,1]".into()));
        }
        Ok(Self::from_inner(Inner::Blend(Box::new(a.clone()), Box::new(b.clone()), beta)))
    }

    pub fn n(&self) -> usize {
        match &self.inner {
            Inner::Mixture(m) => m.n,
            Inner::Grid(g) => g.n(),
            Inner::Blend(a, _, _) => a.n(),
        }
    }

    pub fn kind(&self) -> DensityKind {
        match &self.inner {
            Inner::Mixture(_) => DensityKind::Kernel,
            Inner::Grid(_) => DensityKind::Grid,
            Inner::Blend(..) => DensityKind::Blend,
        }
    }

    /// Kernel bandwidth (the standard deviations for an exact Gaussian).
    pub fn bandwidth(&self) -> Option<&[f64]> {
        match &self.inner {
            Inner::Mixture(m) => Some(&m.bandwidth),
            _ => None,
        }
    }

    /// Number of samples behind a kernel estimate (1 for exact densities).
    pub fn sample_count(&self) -> usize {
        match &self.inner {
            Inner::Mixture(m) if m.estimated => m.count(),
            _ => 1,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.eval_with_se(x).0
    }

    /// Value and Monte Carlo standard error (zero for exact densities and grids).
    pub fn eval_with_se(&self, x: &[f64]) -> (f64, f64) {
        match &self.inner {
            Inner::Mixture(m) => m.eval_with_se(x),
            Inner::Grid(g) => (g.locate(x).map_or(0.0, |i| g.values[i]), 0.0),
            Inner::Blend(a, b, beta) => {
                let (va, sa) = a.eval_with_se(x);
                let (vb, sb) = b.eval_with_se(x);
                (
                    beta * va + (1.0 - beta) * vb,
                    ((beta * sa).powi(2) + ((1.0 - beta) * sb).powi(2)).sqrt(),
                )
            }
        }
    }

    /// A box holding essentially all of the mass (`sigmas` standard deviations for mixtures).
    pub fn support(&self, sigmas: f64) -> Bounds {
        match &self.inner {
            Inner::Mixture(m) => m.support(sigmas),
            Inner::Grid(g) => g.bounds.clone(),
            Inner::Blend(a, b, _) => a.support(sigmas).union(&b.support(sigmas)),
        }
    }

    fn is_grid_only(&self) -> bool {
        match &self.inner {
            Inner::Grid(_) => true,
            Inner::Mixture(_) => false,
            Inner::Blend(a, b, _) => a.is_grid_only() && b.is_grid_only(),
        }
    }

    /// Midpoint values on a `nodes^n` tensor grid over `b`.
    pub fn tabulate(&self, b: &Bounds, nodes: usize) -> Vec<f64> {
        match &self.inner {
            Inner::Mixture(m) => m.tabulate(b, nodes),
            Inner::Grid(g) => (0..nodes.pow(g.n() as u32))
                .map(|flat| g.locate(&midpoint(b, nodes, flat)).map_or(0.0, |i| g.values[i]))
                .collect(),
            Inner::Blend(x, y, beta) => x
                .tabulate(b, nodes)
                .into_iter()
                .zip(y.tabulate(b, nodes))
                .map(|(u, v)| beta * u + (1.0 - beta) * v)
                .collect(),
        }
    }

    /// Grid representation on `b` with `nodes` cells per axis.
    pub fn to_grid(&self, b: &Bounds, nodes: usize) -> Result<Self> {
        Self::grid(b.clone(), vec![nodes; self.n()], self.tabulate(b, nodes))
    }

    /// Numerical integral over the support box (cached).
    pub fn mass(&self) -> f64 {
        *self.mass.get_or_init(|| match &self.inner {
            Inner::Grid(g) => g.values.iter().sum::<f64>() * g.cell_volume(),
            _ => {
                let n = self.n();
                if n > 3 {
                    return self.tail_free_mass();
                }
                let nodes = default_nodes(n).unwrap_or(64);
                let b = self.support(6.0);
                let cell = b.volume() / nodes.pow(n as u32) as f64;
                self.tabulate(&b, nodes).iter().sum::<f64>() * cell
            }
        })
    }

    /// Exact total mass for mixtures and blends in high dimension.
    fn tail_free_mass(&self) -> f64 {
        match &self.inner {
            Inner::Mixture(_) => 1.0,
            Inner::Grid(g) => g.values.iter().sum::<f64>() * g.cell_volume(),
            Inner::Blend(a, b, beta) => beta * a.tail_free_mass() + (1.0 - beta) * b.tail_free_mass(),
        }
    }

    /// Mass of `{max_j |x_j| >= k}`.
    pub fn tail_mass(&self, k: f64) -> f64 {
        (self.tail_free_mass() - self.inside_mass(k)).max(0.0)
    }

    fn inside_mass(&self, k: f64) -> f64 {
        match &self.inner {
            Inner::Mixture(m) => m.inside_mass(k),
            Inner::Grid(g) => g.inside_mass(k),
            Inner::Blend(a, b, beta) => beta * a.inside_mass(k) + (1.0 - beta) * b.inside_mass(k),
        }
    }

    pub fn marginal_cdf(&self, j: usize, q: f64) -> f64 {
        match &self.inner {
            Inner::Mixture(m) => m.marginal_cdf(j, q),
            Inner::Grid(g) => g.marginal_cdf(j, q) / (g.values.iter().sum::<f64>() * g.cell_volume()),
            Inner::Blend(a, b, beta) => beta * a.marginal_cdf(j, q) + (1.0 - beta) * b.marginal_cdf(j, q),
        }
    }

    fn marginal_pdf(&self, j: usize, q: f64) -> f64 {
        match &self.inner {
            Inner::Mixture(m) => m.marginal_pdf(j, q),
            Inner::Grid(g) => {
                let mm = g.marginal_masses(j);
                let u = ((q - g.bounds.lo[j]) / g.width(j)).floor();
                if u < 0.0 || u as usize >= mm.len() {
                    0.0
                } else {
                    mm[u as usize] / g.width(j)
                }
            }
            Inner::Blend(a, b, beta) => beta * a.marginal_pdf(j, q) + (1.0 - beta) * b.marginal_pdf(j, q),
        }
    }

    /// Component-wise marginal quantile, `inf {q : F_j(q) >= alpha_j}`, by bisection.
    pub fn quantile(&self, alpha: &[f64]) -> Result<Vec<f64>> {
        let n = self.n();
        if alpha.len() != n || alpha.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::Configuration("alpha must have n components in (0,1)".into()));
        }
        let b = self.support(12.0);
        Ok((0..n)
            .map(|j| {
                let (mut lo, mut hi) = (b.lo[j], b.hi[j]);
                while self.marginal_cdf(j, lo) > alpha[j] {
                    lo -= hi - lo;
                }
                while self.marginal_cdf(j, hi) < alpha[j] {
                    hi += hi - lo;
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if mid <= lo || mid >= hi {
                        break;
                    }
                    if self.marginal_cdf(j, mid) >= alpha[j] {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                hi
            })
            .collect())
    }

    /// Standard error of the quantile estimate, `sqrt(alpha(1-alpha)/N) / p_j(q_j)`.
    /// Zero for exact densities.
    pub fn quantile_stderr(&self, alpha: &[f64]) -> Result<Vec<f64>> {
        let q = self.quantile(alpha)?;
        Ok((0..self.n())
            .map(|j| self.quantile_stderr_at(j, alpha[j], q[j]))
            .collect())
    }

    fn quantile_stderr_at(&self, j: usize, alpha: f64, q: f64) -> f64 {
        match &self.inner {
            Inner::Mixture(m) if m.estimated => {
                (alpha * (1.0 - alpha) / m.count() as f64).sqrt() / m.marginal_pdf(j, q).max(1e-300)
            }
            Inner::Blend(a, b, beta) => {
                // Blend noise comes from both components' samples.
                let pa = a.marginal_pdf(j, q);
                let pb = b.marginal_pdf(j, q);
                let p = (beta * pa + (1.0 - beta) * pb).max(1e-300);
                let va = (beta * a.cdf_se(j, q)).powi(2);
                let vb = ((1.0 - beta) * b.cdf_se(j, q)).powi(2);
                (va + vb).sqrt() / p
            }
            _ => 0.0,
        }
    }

    /// Standard error of the empirical marginal CDF at `q`.
    fn cdf_se(&self, j: usize, q: f64) -> f64 {
        match &self.inner {
            Inner::Mixture(m) if m.estimated => {
                let f = m.marginal_cdf(j, q);
                (f * (1.0 - f) / m.count() as f64).sqrt()
            }
            Inner::Blend(a, b, beta) => {
                ((beta * a.cdf_se(j, q)).powi(2) + ((1.0 - beta) * b.cdf_se(j, q)).powi(2)).sqrt()
            }
            _ => 0.0,
        }
    }

    /// Minimum over a lattice with `per_axis` points per axis on `[-k, k]^n`:
    /// `(value, standard error at the argmin, argmin)`.
    pub fn lattice_min(&self, k: f64, per_axis: usize) -> (f64, f64, Vec<f64>) {
        let n = self.n();
        let per_axis = per_axis.max(2);
        let total = per_axis.pow(n as u32);
        let point = |mut flat: usize| {
            let mut x = vec![0.0; n];
            for j in (0..n).rev() {
                let i = flat % per_axis;
                flat /= per_axis;
                x[j] = -k + 2.0 * k * i as f64 / (per_axis - 1) as f64;
            }
            x
        };
        let best = (0..total)
            .into_par_iter()
            .map(|flat| {
                let x = point(flat);
                let (v, se) = self.eval_with_se(&x);
                (v, se, flat)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)))
            .expect("nonempty lattice");
        (best.0, best.1, point(best.2))
    }

    /// CSV with columns `x1..xn,value` at the cell midpoints of a grid density.
    pub fn write_grid_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let g = match &self.inner {
            Inner::Grid(g) => g,
            _ => return Err(Error::Configuration("only grid densities export to CSV; call to_grid first".into())),
        };
        let n = g.n();
        let cols: Vec<String> = (1..=n).map(|j| format!("x{j}")).collect();
        writeln!(w, "{},value", cols.join(","))?;
        for (flat, v) in g.values.iter().enumerate() {
            let idx = g.unflatten(flat);
            for j in 0..n {
                let x = g.bounds.lo[j] + (idx[j] as f64 + 0.5) * g.width(j);
                write!(w, "{x},")?;
            }
            writeln!(w, "{v}")?;
        }
        Ok(())
    }

    /// Inverse of [`write_grid_csv`]; comment lines starting with `#` are skipped.
    pub fn read_grid_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut n = 0;
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if n == 0 {
                n = line.split(',').count() - 1;
                continue;
            }
            let row: std::result::Result<Vec<f64>, _> = line.split(',').map(|s| s.trim().parse::<f64>()).collect();
            let row = row.map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
            if row.len() != n + 1 {
                return Err(Error::Parse(format!("line {}: expected {} columns", lineno + 1, n + 1)));
            }
            rows.push(row);
        }
        if n == 0 || rows.is_empty() {
            return Err(Error::Parse("empty grid CSV".into()));
        }
        let mut lo = vec![0.0; n];
        let mut hi = vec![0.0; n];
        let mut cells = vec![0; n];
        for j in 0..n {
            let mut xs: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            xs.sort_by(f64::total_cmp);
            xs.dedup();
            let w = if xs.len() > 1 { xs[1] - xs[0] } else { 1.0 };
            lo[j] = xs[0] - 0.5 * w;
            hi[j] = xs[xs.len() - 1] + 0.5 * w;
            cells[j] = xs.len();
        }
        if rows.len() != cells.iter().product::<usize>() {
            return Err(Error::Parse("grid CSV is not a full tensor grid".into()));
        }
        let values = rows.iter().map(|r| r[n]).collect();
        Self::grid(Bounds { lo, hi }, cells, values)
    }
}

/// Anything with component-wise quantiles.
pub trait QuantileSource {
    fn quantile_vector(&self, alpha: &[f64]) -> Result<Vec<f64>>;
}

impl QuantileSource for ParticleEnsemble {
    fn quantile_vector(&self, alpha: &[f64]) -> Result<Vec<f64>> {
        self.quantile(alpha)
    }
}

impl QuantileSource for DensityEstimate {
    fn quantile_vector(&self, alpha: &[f64]) -> Result<Vec<f64>> {
        self.quantile(alpha)
    }
}

/// Component-wise quantile of an ensemble or a density.
pub fn quantile<Q: QuantileSource + ?Sized>(source: &Q, alpha: &[f64]) -> Result<Vec<f64>> {
    source.quantile_vector(alpha)
}

fn default_nodes(n: usize) -> Option<usize> {
    match n {
        1 | 2 => Some(256),
        3 => Some(64),
        _ => None,
    }
}

/// Quadrature for L1 distances.
#[derive(Debug, Clone)]
pub struct L1Quadrature {
    /// Midpoint nodes per axis; `None` picks 256 (n <= 2), 64 (n = 3), or Monte Carlo.
    pub nodes_per_axis: Option<usize>,
    pub mc_points: usize,
    pub seed: u64,
    /// Half-width of the integration box in standard deviations.
    pub sigmas: f64,
}

impl Default for L1Quadrature {
    fn default() -> Self {
        Self {
            nodes_per_axis: None,
            mc_points: 200_000,
            seed: 0x11,
            sigmas: 6.0,
        }
    }
}

/// `int |u1 - u2|` over a box covering both densities.
pub fn l1_distance(u1: &DensityEstimate, u2: &DensityEstimate, quad: &L1Quadrature) -> Result<f64> {
    let n = u1.n();
    if u2.n() != n {
        return Err(Error::Configuration("L1 distance between densities of different dimension".into()));
    }
    let (b1, b2) = (u1.support(quad.sigmas), u2.support(quad.sigmas));
    if u1.is_grid_only() && u2.is_grid_only() && !b1.intersects(&b2) {
        return Err(Error::Domain("densities live on disjoint boxes".into()));
    }
    let b = b1.union(&b2);
    match quad.nodes_per_axis.or_else(|| default_nodes(n)) {
        Some(nodes) => {
            let cell = b.volume() / nodes.pow(n as u32) as f64;
            let a = u1.tabulate(&b, nodes);
            let c = u2.tabulate(&b, nodes);
            Ok(a.iter().zip(&c).map(|(x, y)| (x - y).abs()).sum::<f64>() * cell)
        }
        None => {
            // Common random numbers: the same points for any pair of densities.
            let vol = b.volume();
            let s: f64 = (0..quad.mc_points)
                .into_par_iter()
                .map(|i| {
                    let mut rng = substream(quad.seed, Purpose::Quadrature, i as u64);
                    let x: Vec<f64> = (0..n).map(|j| b.lo[j] + (b.hi[j] - b.lo[j]) * rng.gen::<f64>()).collect();
                    (u1.eval(&x) - u2.eval(&x)).abs()
                })
                .collect::<Vec<f64>>()
                .iter()
                .sum();
            Ok(vol * s / quad.mc_points as f64)
        }
    }
}

/// Constants `(K, delta, eps)` describing a set of well-spread densities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SParams {
    pub k: f64,
    pub delta: f64,
    pub eps: f64,
}

impl SParams {
    /// Lipschitz constant of the quantile map on the set: `sqrt(n) (2K)^{-(n-1)} / delta`.
    pub fn quantile_lipschitz_constant(&self, n: usize) -> f64 {
        (n as f64).sqrt() * (2.0 * self.k).powi(1 - n as i32) / self.delta
    }
}

/// Lattice points per axis used for density floors on the K-box.
pub fn lattice_points(n: usize) -> usize {
    match n {
        1 => 129,
        2 => 33,
        3 => 11,
        _ => 5,
    }
}

/// `eps <- min_j min(alpha_j, 1 - alpha_j) / 2`, `K <-` smallest multiple of 0.05
/// with family-wide tail mass at most `eps` and all quantiles inside the box,
/// `delta <-` family-wide lattice minimum of the density on the K-box.
pub fn find_s_params(family: &[DensityEstimate], alpha: &[f64]) -> Result<SParams> {
    if family.is_empty() {
        return Err(Error::DegenerateFamily("empty family".into()));
    }
    let n = family[0].n();
    let eps = 0.5
        * alpha
            .iter()
            .map(|a| a.min(1.0 - a))
            .fold(f64::INFINITY, f64::min);
    let mut qmax: f64 = 0.0;
    for h in family {
        for q in h.quantile(alpha)? {
            qmax = qmax.max(q.abs());
        }
    }
    const STEP: f64 = 0.05;
    const LAST: usize = 1000;
    let tail_ok = |idx: usize| {
        let k = idx as f64 * STEP;
        family.iter().all(|h| h.tail_mass(k) <= eps)
    };
    let first = ((qmax / STEP).ceil() as usize).max(1);
    if first > LAST || !tail_ok(LAST) {
        return Err(Error::DegenerateFamily(format!(
            "no K <= {} keeps the tail mass below eps = {eps}",
            LAST as f64 * STEP
        )));
    }
    let (mut lo, mut hi) = (first, LAST);
    if tail_ok(lo) {
        hi = lo;
    }
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if tail_ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let k = hi as f64 * STEP;
    let per_axis = lattice_points(n);
    let delta = family
        .iter()
        .map(|h| h.lattice_min(k, per_axis).0)
        .fold(f64::INFINITY, f64::min);
    if !(delta > 0.0) {
        return Err(Error::DegenerateFamily(format!(
            "density floor on the K-box is zero (K = {k})"
        )));
    }
    Ok(SParams { k, delta, eps })
}

/// Margins of the three membership predicates (positive means satisfied).
#[derive(Debug, Clone)]
pub struct Membership {
    pub tail_mass: f64,
    pub max_abs_quantile: f64,
    pub floor: f64,
    pub floor_se: f64,
    pub tail_margin: f64,
    pub quantile_margin: f64,
    pub floor_margin: f64,
}

impl Membership {
    pub fn is_member(&self) -> bool {
        self.failed_predicate().is_none()
    }

    /// Name of the first failed predicate, if any.
    pub fn failed_predicate(&self) -> Option<String> {
        let tol = 1e-12;
        if self.tail_margin < -tol {
            Some(format!("tail_mass(K) <= eps (tail {:.6e}, margin {:.3e})", self.tail_mass, self.tail_margin))
        } else if self.quantile_margin < -tol {
            Some(format!("|Q_alpha| <= K (max |Q| {:.6}, margin {:.3e})", self.max_abs_quantile, self.quantile_margin))
        } else if self.floor_margin < -tol * self.floor.abs().max(1e-300) {
            Some(format!("density >= delta on the K-box (floor {:.6e}, margin {:.3e})", self.floor, self.floor_margin))
        } else {
            None
        }
    }
}

pub fn membership(h: &DensityEstimate, s: &SParams, alpha: &[f64]) -> Result<Membership> {
    let tail = h.tail_mass(s.k);
    let qmax = h.quantile(alpha)?.iter().fold(0.0f64, |m, q| m.max(q.abs()));
    let (floor, floor_se, _) = h.lattice_min(s.k, lattice_points(h.n()));
    Ok(Membership {
        tail_mass: tail,
        max_abs_quantile: qmax,
        floor,
        floor_se,
        tail_margin: s.eps - tail,
        quantile_margin: s.k - qmax,
        floor_margin: floor - s.delta,
    })
}

#[derive(Debug, Clone)]
pub struct LipschitzCheck {
    /// `|Q(h1) - Q(h2)|`.
    pub lhs: f64,
    /// `constant * |h1 - h2|_{L1}`.
    pub rhs: f64,
    pub l1: f64,
    pub constant: f64,
    pub noise_budget: f64,
    pub passed: bool,
}

/// Verify `|Q(h1) - Q(h2)| <= sqrt(n) (2K)^{-(n-1)} delta^{-1} |h1 - h2|_{L1}`,
/// allowing `noise_budget` for estimator noise on the left side.
pub fn check_quantile_lipschitz(
    h1: &DensityEstimate,
    h2: &DensityEstimate,
    s: &SParams,
    alpha: &[f64],
    noise_budget: f64,
    quad: &L1Quadrature,
) -> Result<LipschitzCheck> {
    for (name, h) in [("h1", h1), ("h2", h2)] {
        if let Some(p) = membership(h, s, alpha)?.failed_predicate() {
            return Err(Error::Precondition {
                predicate: format!("{name}: {p}"),
            });
        }
    }
    let q1 = h1.quantile(alpha)?;
    let q2 = h2.quantile(alpha)?;
    let lhs = q1.iter().zip(&q2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let l1 = l1_distance(h1, h2, quad)?;
    let constant = s.quantile_lipschitz_constant(h1.n());
    let rhs = constant * l1;
    Ok(LipschitzCheck {
        lhs,
        rhs,
        l1,
        constant,
        noise_budget,
        passed: lhs <= rhs + noise_budget,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InitialDensity;
    use proptest::prelude::*;

    fn std_normal_samples(n: usize, count: usize, seed: u64) -> Vec<f64> {
        InitialDensity::standard_gaussian(n).sample(count, seed).unwrap()
    }

    #[test]
    fn ensemble_quantiles() {
        let n = 40_000;
        let s = std_normal_samples(2, n, 1);
        let e = ParticleEnsemble::new(2, s, 0.0, 1, 0.0).unwrap();
        let q = quantile(&e, &[0.5, 0.5]).unwrap();
        let tol = 3.0 * 1.2533 / (n as f64).sqrt();
        assert!(q[0].abs() < tol && q[1].abs() < tol, "{q:?}");
        let q9 = quantile(&e, &[0.9, 0.9]).unwrap();
        assert!((q9[0] - 1.28155).abs() < 0.03, "{q9:?}");

        let u: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        let eu = ParticleEnsemble::new(1, u, 0.0, 0, 0.0).unwrap();
        assert!((quantile(&eu, &[0.25]).unwrap()[0] - 0.25).abs() < 1e-3);

        let empty = ParticleEnsemble::new(1, vec![], 0.0, 0, 0.0).unwrap();
        assert!(matches!(quantile(&empty, &[0.5]), Err(Error::Domain(_))));
    }

    #[test]
    fn exact_gaussian_quantile_and_tail() {
        let g = DensityEstimate::gaussian(vec![0.0], vec![1.0]).unwrap();
        assert!((g.quantile(&[0.9]).unwrap()[0] - 1.281_551_565_5).abs() < 1e-8);
        assert!((g.tail_mass(2.0) - 0.045_500_263_9).abs() < 1e-9);
        assert_eq!(g.tail_mass(60.0), 0.0);
        assert_eq!(g.quantile_stderr(&[0.9]).unwrap(), vec![0.0]);
    }

    #[test]
    fn l1_of_shifted_gaussians() {
        let a = DensityEstimate::gaussian(vec![0.0], vec![1.0]).unwrap();
        let b = DensityEstimate::gaussian(vec![0.1], vec![1.0]).unwrap();
        let q = L1Quadrature::default();
        assert_eq!(l1_distance(&a, &a, &q).unwrap(), 0.0);
        // 2 (Phi(0.05) - Phi(-0.05)) = 0.0797871
        let d = l1_distance(&a, &b, &q).unwrap();
        assert!((d - 0.079_787_1).abs() < 2e-4, "{d}");
        assert!((l1_distance(&b, &a, &q).unwrap() - d).abs() < 1e-15);
    }

    #[test]
    fn l1_of_far_apart_gaussians_is_two() {
        let a = DensityEstimate::gaussian(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let b = DensityEstimate::gaussian(vec![50.0, 0.0], vec![1.0, 1.0]).unwrap();
        let d = l1_distance(&a, &b, &L1Quadrature::default()).unwrap();
        assert!(d <= 2.0 + 1e-3 && d > 1.9, "{d}");
    }

    #[test]
    fn l1_in_four_dimensions_uses_monte_carlo() {
        let a = DensityEstimate::gaussian(vec![0.0; 4], vec![1.0; 4]).unwrap();
        let b = DensityEstimate::gaussian(vec![0.1, 0.0, 0.0, 0.0], vec![1.0; 4]).unwrap();
        let d = l1_distance(&a, &b, &L1Quadrature::default()).unwrap();
        assert!((d - 0.0798).abs() < 0.02, "{d}");
    }

    #[test]
    fn disjoint_grids_are_a_domain_error() {
        let a = DensityEstimate::grid(Bounds { lo: vec![0.0], hi: vec![1.0] }, vec![4], vec![1.0; 4]).unwrap();
        let b = DensityEstimate::grid(Bounds { lo: vec![2.0], hi: vec![3.0] }, vec![4], vec![1.0; 4]).unwrap();
        assert!(matches!(l1_distance(&a, &b, &L1Quadrature::default()), Err(Error::Domain(_))));
    }

    #[test]
    fn kde_mass_and_binned_tabulation() {
        let s = std_normal_samples(2, 20_000, 3);
        let k = DensityEstimate::kde_from_samples(2, s, None).unwrap();
        assert!((k.mass() - 1.0).abs() < 0.01, "{}", k.mass());
        // Binned grid values agree with direct evaluation.
        let b = k.support(6.0);
        let tab = k.tabulate(&b, 256);
        for flat in [256 * 128 + 128, 256 * 100 + 140, 256 * 150 + 90] {
            let x = midpoint(&b, 256, flat);
            let direct = k.eval(&x);
            assert!((tab[flat] - direct).abs() < 0.01 * direct.max(1e-3), "{} vs {direct}", tab[flat]);
        }
    }

    #[test]
    fn kde_l1_to_truth_shrinks_with_n() {
        let truth = DensityEstimate::gaussian(vec![0.0], vec![1.0]).unwrap();
        let q = L1Quadrature::default();
        let d: Vec<f64> = [1_000, 10_000, 100_000]
            .iter()
            .map(|&m| {
                let k = DensityEstimate::kde_from_samples(1, std_normal_samples(1, m, 4), None).unwrap();
                l1_distance(&k, &truth, &q).unwrap()
            })
            .collect();
        assert!(d[0] > d[1] && d[1] > d[2], "{d:?}");
    }

    #[test]
    fn grid_tail_and_quantile() {
        // uniform on [-1, 1]
        let g = DensityEstimate::grid(Bounds { lo: vec![-1.0], hi: vec![1.0] }, vec![200], vec![0.5; 200]).unwrap();
        assert!((g.mass() - 1.0).abs() < 1e-12);
        assert!((g.quantile(&[0.25]).unwrap()[0] + 0.5).abs() < 1e-9);
        assert!((g.tail_mass(0.5) - 0.5).abs() < 1e-12);
        assert_eq!(g.tail_mass(1.0), 0.0);
        let s = find_s_params(&[g], &[0.5]).unwrap();
        assert!(s.k <= 1.0 && s.delta > 0.0 && s.eps == 0.25);
    }

    #[test]
    fn grid_csv_round_trip() {
        let g = DensityEstimate::gaussian(vec![0.0, 0.5], vec![1.0, 0.5]).unwrap();
        let grid = g.to_grid(&Bounds { lo: vec![-3.0, -1.0], hi: vec![3.0, 2.0] }, 8).unwrap();
        let mut buf = Vec::new();
        grid.write_grid_csv(&mut buf).unwrap();
        let back = DensityEstimate::read_grid_csv(&buf[..]).unwrap();
        for x in [[0.1, 0.2], [-2.0, 1.5], [2.9, -0.9]] {
            assert!((back.eval(&x) - grid.eval(&x)).abs() < 1e-12);
        }
    }

    #[test]
    fn s_params_for_standard_gaussian() {
        let g = DensityEstimate::gaussian(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let s = find_s_params(std::slice::from_ref(&g), &[0.5, 0.5]).unwrap();
        assert_eq!(s.eps, 0.25);
        assert!(s.k <= 2.5 && s.k > 0.0, "{s:?}");
        // floor on the K-box is attained at a corner: phi(K)^2
        let corner = (INV_SQRT_2PI * (-0.5 * s.k * s.k).exp()).powi(2);
        assert!((s.delta - corner).abs() / corner < 1e-9, "{s:?}");
        assert!(membership(&g, &s, &[0.5, 0.5]).unwrap().is_member());
    }

    #[test]
    fn lipschitz_bound_for_close_gaussians() {
        let a = DensityEstimate::gaussian(vec![0.0], vec![1.0]).unwrap();
        let b = DensityEstimate::gaussian(vec![0.05], vec![1.0]).unwrap();
        let floor = INV_SQRT_2PI * (-0.5f64 * 3.05 * 3.05).exp();
        let s = SParams { k: 3.0, delta: floor, eps: 0.25 };
        let c = check_quantile_lipschitz(&a, &b, &s, &[0.5], 0.0, &L1Quadrature::default()).unwrap();
        assert!(c.passed && c.rhs > 10.0 * c.lhs, "{c:?}");
        assert!((c.lhs - 0.05).abs() < 1e-8);

        let same = check_quantile_lipschitz(&a, &a, &s, &[0.5], 0.0, &L1Quadrature::default()).unwrap();
        assert_eq!(same.lhs, 0.0);
        assert_eq!(same.rhs, 0.0);
        assert!(same.passed);

        for beta in [0.25, 0.5, 0.75] {
            let mix = DensityEstimate::blend(&a, &b, beta).unwrap();
            assert!(membership(&mix, &s, &[0.5]).unwrap().is_member());
        }
    }

    #[test]
    fn non_member_is_a_precondition_error() {
        let a = DensityEstimate::gaussian(vec![0.0], vec![1.0]).unwrap();
        let far = DensityEstimate::gaussian(vec![5.0], vec![1.0]).unwrap();
        let s = SParams { k: 3.0, delta: 1e-3, eps: 0.25 };
        match check_quantile_lipschitz(&a, &far, &s, &[0.5], 0.0, &L1Quadrature::default()) {
            Err(Error::Precondition { predicate }) => assert!(predicate.starts_with("h2: tail_mass"), "{predicate}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn kde_quantile_stderr_is_reasonable() {
        let k = DensityEstimate::kde_from_samples(1, std_normal_samples(1, 10_000, 8), None).unwrap();
        let se = k.quantile_stderr(&[0.5]).unwrap()[0];
        let expect = 1.2533 / 100.0;
        assert!((se - expect).abs() / expect < 0.1, "{se}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn tail_mass_is_monotone(k1 in 0.1..4.0f64, dk in 0.0..2.0f64, m in -1.0..1.0f64, s in 0.3..2.0f64) {
            let g = DensityEstimate::gaussian(vec![m, -m], vec![s, 1.0]).unwrap();
            prop_assert!(g.tail_mass(k1) >= g.tail_mass(k1 + dk) - 1e-15);
        }

        #[test]
        fn l1_symmetric_bounded_and_triangular(
            m1 in -1.0..1.0f64, m2 in -1.0..1.0f64, m3 in -1.0..1.0f64,
            s1 in 0.5..2.0f64, s2 in 0.5..2.0f64, s3 in 0.5..2.0f64,
        ) {
            let q = L1Quadrature::default();
            let a = DensityEstimate::gaussian(vec![m1], vec![s1]).unwrap();
            let b = DensityEstimate::gaussian(vec![m2], vec![s2]).unwrap();
            let c = DensityEstimate::gaussian(vec![m3], vec![s3]).unwrap();
            let ab = l1_distance(&a, &b, &q).unwrap();
            let ba = l1_distance(&b, &a, &q).unwrap();
            let ac = l1_distance(&a, &c, &q).unwrap();
            let bc = l1_distance(&b, &c, &q).unwrap();
            prop_assert!((ab - ba).abs() < 1e-3);
            prop_assert!(ab <= 2.0 + 1e-3);
            prop_assert!(ac <= ab + bc + 1e-3);
        }

        #[test]
        fn density_quantile_shift_equivariance(c in -3.0..3.0f64, a in 0.05..0.95f64) {
            let g = DensityEstimate::gaussian(vec![0.0], vec![1.0]).unwrap();
            let h = DensityEstimate::gaussian(vec![c], vec![1.0]).unwrap();
            let d = h.quantile(&[a]).unwrap()[0] - g.quantile(&[a]).unwrap()[0];
            prop_assert!((d - c).abs() < 1e-9);
        }
    }
}
