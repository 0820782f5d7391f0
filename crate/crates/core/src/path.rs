//! Piecewise-linear quantile paths `omega: [t_first, t_last] -> R^n`.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

/// Time-gridded candidate path, linearly interpolated between nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantilePath {
    n: usize,
    times: Vec<f64>,
    /// Row-major, one row of length `n` per node.
    values: Vec<f64>,
}

/// Slack allowed when asking for a time just outside the node range.
const TIME_SLACK: f64 = 1e-9;

impl QuantilePath {
    pub fn new(n: usize, times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if n == 0 || times.is_empty() || values.len() != times.len() * n {
            return Err(Error::Configuration(format!(
                "quantile path needs {} values for {} nodes of dimension {n}",
                times.len() * n,
                times.len()
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Configuration(
                "quantile path times must be strictly increasing".into(),
            ));
        }
        if times.iter().chain(&values).any(|v| !v.is_finite()) {
            return Err(Error::Configuration("quantile path has non-finite entries".into()));
        }
        Ok(Self { n, times, values })
    }

    /// Constant path on `[t0, t1]` (two nodes, or one if `t0 == t1`).
    pub fn constant(value: &[f64], t0: f64, t1: f64) -> Self {
        let times = if t1 > t0 { vec![t0, t1] } else { vec![t0] };
        let values = times.iter().flat_map(|_| value.iter().copied()).collect();
        Self {
            n: value.len(),
            times,
            values,
        }
    }

    /// Path sampled from a function on the given grid.
    pub fn from_fn(n: usize, times: Vec<f64>, mut f: impl FnMut(f64, &mut [f64])) -> Result<Self> {
        let mut values = vec![0.0; times.len() * n];
        for (k, &t) in times.iter().enumerate() {
            f(t, &mut values[k * n..(k + 1) * n]);
        }
        Self::new(n, times, values)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn node(&self, k: usize) -> &[f64] {
        &self.values[k * self.n..(k + 1) * self.n]
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    /// True when `[a, b]` lies inside the node range.
    pub fn covers(&self, a: f64, b: f64) -> bool {
        a >= self.start() - TIME_SLACK && b <= self.end() + TIME_SLACK
    }

    pub fn require_cover(&self, a: f64, b: f64) -> Result<()> {
        if self.covers(a, b) {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "quantile path defined on [{}, {}] but [{a}, {b}] is needed",
                self.start(),
                self.end()
            )))
        }
    }

    /// Linear interpolation; times outside the range are clamped to the end nodes.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        let n = self.n;
        let m = self.times.len();
        if m == 1 || t <= self.times[0] {
            out.copy_from_slice(self.node(0));
            return;
        }
        if t >= self.times[m - 1] {
            out.copy_from_slice(self.node(m - 1));
            return;
        }
        let k = self.times.partition_point(|&s| s <= t) - 1;
        let (t0, t1) = (self.times[k], self.times[k + 1]);
        let w = (t - t0) / (t1 - t0);
        for j in 0..n {
            let a = self.values[k * n + j];
            let b = self.values[(k + 1) * n + j];
            out[j] = a + w * (b - a);
        }
    }

    /// Checked evaluation.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        self.require_cover(t, t)?;
        let mut out = vec![0.0; self.n];
        self.eval_into(t, &mut out);
        Ok(out)
    }

    /// `sup_t |self(t) - other(t)|` (Euclidean norm) over the union of both node sets
    /// restricted to the common range. Exact for piecewise-linear paths.
    pub fn sup_distance(&self, other: &QuantilePath) -> f64 {
        let lo = self.start().max(other.start());
        let hi = self.end().min(other.end());
        let mut ts: Vec<f64> = self
            .times
            .iter()
            .chain(&other.times)
            .copied()
            .filter(|t| *t >= lo && *t <= hi)
            .collect();
        ts.push(lo);
        ts.push(hi);
        let mut a = vec![0.0; self.n];
        let mut b = vec![0.0; self.n];
        ts.iter()
            .map(|&t| {
                self.eval_into(t, &mut a);
                other.eval_into(t, &mut b);
                a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
            })
            .fold(0.0, f64::max)
    }

    /// CSV with columns `t,q1..qn`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let cols: Vec<String> = (1..=self.n).map(|j| format!("q{j}")).collect();
        writeln!(w, "t,{}", cols.join(","))?;
        for (k, t) in self.times.iter().enumerate() {
            let vals: Vec<String> = self.node(k).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{t},{}", vals.join(","))?;
        }
        Ok(())
    }

    /// Inverse of [`write_csv`](Self::write_csv); `#` comment lines are skipped.
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut n = 0;
        let mut times = Vec::new();
        let mut values = Vec::new();
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
            times.push(row[0]);
            values.extend_from_slice(&row[1..]);
        }
        Self::new(n, times, values)
    }

    /// Append `next`, whose first node must sit at this path's last time.
    /// The shared junction node is taken from `next`.
    pub fn concat(&self, next: &QuantilePath) -> Result<Self> {
        if next.n != self.n || (next.start() - self.end()).abs() > 1e-9 * self.end().abs().max(1.0) {
            return Err(Error::Domain("paths do not meet at a common junction".into()));
        }
        let keep = self.times.len() - 1;
        let mut times = self.times[..keep].to_vec();
        let mut values = self.values[..keep * self.n].to_vec();
        times.extend_from_slice(&next.times);
        values.extend_from_slice(&next.values);
        Self::new(self.n, times, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn interpolates_linearly_and_clamps() {
        let p = QuantilePath::new(1, vec![0.0, 1.0, 2.0], vec![0.0, 2.0, 0.0]).unwrap();
        assert_eq!(p.eval(0.5).unwrap(), vec![1.0]);
        assert_eq!(p.eval(1.5).unwrap(), vec![1.0]);
        assert!(p.eval(2.5).is_err());
        let mut o = [0.0];
        p.eval_into(5.0, &mut o);
        assert_eq!(o, [0.0]);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(QuantilePath::new(1, vec![0.0, 0.0], vec![1.0, 1.0]).is_err());
        assert!(QuantilePath::new(1, vec![0.0, 1.0], vec![1.0, f64::NAN]).is_err());
        assert!(QuantilePath::new(2, vec![0.0, 1.0], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn concat_keeps_junction_from_next() {
        let a = QuantilePath::new(1, vec![0.0, 1.0], vec![0.0, 1.0]).unwrap();
        let b = QuantilePath::new(1, vec![1.0, 2.0], vec![1.0, 3.0]).unwrap();
        let c = a.concat(&b).unwrap();
        assert_eq!(c.times(), &[0.0, 1.0, 2.0]);
        assert_eq!(c.values(), &[0.0, 1.0, 3.0]);
    }

    #[test]
    fn csv_round_trip() {
        let p = QuantilePath::new(2, vec![0.0, 0.5], vec![0.1, -0.2, 0.3, 1e-17]).unwrap();
        let mut buf = b"# comment\n".to_vec();
        p.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).contains("t,q1,q2\n"));
        assert_eq!(QuantilePath::read_csv(&buf[..]).unwrap(), p);
    }

    proptest! {
        #[test]
        fn sup_distance_is_a_metric(
            a in prop::collection::vec(-5.0..5.0f64, 4),
            b in prop::collection::vec(-5.0..5.0f64, 4),
            c in prop::collection::vec(-5.0..5.0f64, 4),
        ) {
            let t = vec![0.0, 0.3, 0.7, 1.0];
            let pa = QuantilePath::new(1, t.clone(), a).unwrap();
            let pb = QuantilePath::new(1, t.clone(), b).unwrap();
            let pc = QuantilePath::new(1, t, c).unwrap();
            prop_assert_eq!(pa.sup_distance(&pa), 0.0);
            prop_assert!((pa.sup_distance(&pb) - pb.sup_distance(&pa)).abs() < 1e-12);
            prop_assert!(pa.sup_distance(&pc) <= pa.sup_distance(&pb) + pb.sup_distance(&pc) + 1e-12);
        }

        #[test]
        fn interpolant_stays_within_node_hull(
            v in prop::collection::vec(-5.0..5.0f64, 3),
            t in 0.0..2.0f64,
        ) {
            let p = QuantilePath::new(1, vec![0.0, 1.0, 2.0], v.clone()).unwrap();
            let x = p.eval(t).unwrap()[0];
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
        }
    }
}
