//! Command-line front end.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success (converged, all checks passed) |
//! | 1 | a check failed, or another runtime error |
//! | 2 | configuration or parse error, unknown check name |
//! | 3 | non-contraction or hypothesis violation |
//! | 4 | simulation blow-up or ODE integration failure |

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::config::{self, RunConfig, T0Kind, CHECKS};
use crate::density::{find_s_params, DensityEstimate, L1Quadrature};
use crate::error::{Error, Result};
use crate::fixpoint::{choose_t0, cross_validate, estimate_c0, picard_solve, solve_global};
use crate::flow::{check_flow_bounds, forward_flow, FlowConfig, FlowProbe};
use crate::model::{validate_hypotheses, InitialDensity, ModelSpec};
use crate::particle::{simulate_mckean, McConfig, Start};
use crate::path::QuantilePath;
use crate::verify::{
    check_anisotropic_scaling, check_gaussian_bounds, check_lower_bound, check_stability, check_tail_uniformity,
    family_ensembles, scaling_tolerance, snapshots, CheckReport,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CONTRACTION: i32 = 3;
pub const EXIT_BLOWUP: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "qmkv", version, about = "Quantile-dependent McKean-Vlasov solver and verification suite")]
pub struct Cli {
    /// Configuration file, or the name of a bundled example (`kolmogorov`, `toy`).
    #[arg(long, global = true, default_value = "kolmogorov")]
    pub config: String,
    /// Output directory (overrides `output.dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Master seed (overrides `mc.seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses the rayon default.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve for the quantile path by chained Picard iteration.
    Solve,
    /// Simulate the self-consistent particle system.
    Simulate,
    /// Run verification checks.
    Verify {
        /// Check to run (repeatable); defaults to `verify.checks`.
        #[arg(long = "check")]
        checks: Vec<String>,
    },
    /// Measure the contraction rate on the first interval.
    Contraction,
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Configuration(_) | Error::Parse(_) => EXIT_CONFIG,
        Error::NonContraction { .. }
        | Error::HypothesisViolation { .. }
        | Error::IntegrabilityViolation(_)
        | Error::ConstantTooLarge(_) => EXIT_CONTRACTION,
        Error::BlowUp { .. } | Error::IntegrationFailure { .. } => EXIT_BLOWUP,
        _ => EXIT_FAILED,
    }
}

/// Parse `args` (including the program name) and run.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(&cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            code
        }
    }
}

pub fn run(cli: &Cli) -> i32 {
    let result = if cli.threads > 0 {
        match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
            Ok(pool) => pool.install(|| dispatch(cli)),
            Err(e) => Err(Error::Configuration(format!("threads: {e}"))),
        }
    } else {
        dispatch(cli)
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Read the configuration, applying command-line overrides.
pub fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = Path::new(&cli.config);
    let mut cfg = if !path.exists() {
        match config::example(&cli.config) {
            Some(text) => RunConfig::parse(text)?,
            None => return Err(Error::Parse(format!("{}: no such file or bundled example", cli.config))),
        }
    } else {
        RunConfig::load(path)?
    };
    if let Some(s) = cli.seed {
        cfg.mc.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output.dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let cfg = load_config(cli)?;
    let ctx = Context::new(cfg)?;
    match &cli.command {
        Command::Solve => ctx.solve(),
        Command::Simulate => ctx.simulate(),
        Command::Verify { checks } => ctx.verify(checks),
        Command::Contraction => ctx.contraction(),
    }
}

struct Context {
    cfg: RunConfig,
    spec: ModelSpec,
    init: InitialDensity,
    mc: McConfig,
    hash: String,
    dir: PathBuf,
}

impl Context {
    fn new(cfg: RunConfig) -> Result<Self> {
        let spec = cfg.spec()?;
        let init = cfg.init()?;
        let mc = cfg.mc();
        let hash = cfg.hash();
        let dir = cfg.output.dir.clone();
        fs::create_dir_all(&dir)?;
        Ok(Self { cfg, spec, init, mc, hash, dir })
    }

    fn provenance(&self) -> String {
        format!("# config_hash={} seed={}", self.hash, self.mc.seed)
    }

    fn csv(&self, name: &str, body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
        let mut w = BufWriter::new(File::create(self.dir.join(name))?);
        writeln!(w, "{}", self.provenance())?;
        body(&mut w)?;
        w.flush()?;
        Ok(())
    }

    fn report(&self, name: &str, body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
        let mut w = BufWriter::new(File::create(self.dir.join(name))?);
        writeln!(w, "config_hash = {}", self.hash)?;
        writeln!(w, "seed = {}", self.mc.seed)?;
        body(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Componentwise alpha-quantile of the (Gaussian) initial density.
    fn initial_quantile(&self) -> Vec<f64> {
        let n = self.spec.n();
        let m = &self.cfg.model;
        let mean = m.init_mean.clone().unwrap_or_else(|| vec![0.0; n]);
        let var = m.init_var.clone().unwrap_or_else(|| vec![1.0; n]);
        let std = Normal::new(0.0, 1.0).expect("standard normal");
        (0..n)
            .map(|j| mean[j] + var[j].sqrt() * std.inverse_cdf(self.spec.alpha()[j]))
            .collect()
    }

    fn constant(&self, offset: f64, t1: f64) -> QuantilePath {
        let v: Vec<f64> = self.initial_quantile().iter().map(|q| q + offset).collect();
        QuantilePath::constant(&v, 0.0, t1)
    }

    fn pairs(&self, offsets: &[f64], t1: f64) -> Vec<(QuantilePath, QuantilePath)> {
        offsets.iter().map(|&d| (self.constant(0.0, t1), self.constant(d, t1))).collect()
    }

    fn hypotheses_ok(&self) -> Result<bool> {
        let rep = validate_hypotheses(&self.spec, &self.cfg.probe_plan());
        self.report("hypotheses_report.txt", |w| {
            writeln!(w, "check = hypotheses")?;
            writeln!(w, "passed = {}", rep.all_passed())?;
            write!(w, "{rep}")
        })?;
        for c in rep.failures() {
            eprintln!("hypothesis {} violated: worst {} > declared {}", c.hypothesis, c.worst, c.bound);
            if let Some(wit) = &c.witness {
                eprintln!("  witness: {wit}");
            }
        }
        Ok(rep.all_passed())
    }

    fn measured_c0(&self) -> Result<f64> {
        if let Some(c0) = self.cfg.solver.c0 {
            return Ok(c0);
        }
        let times = [0.05, 0.1];
        let mc = self.mc.with_particles(self.mc.n_particles.min(20_000));
        let est = estimate_c0(
            &self.spec,
            &self.init,
            &times,
            &self.pairs(&[0.1, 0.2, 0.4], 0.1),
            &mc,
            &L1Quadrature::default(),
        )?;
        Ok(est.c0)
    }

    fn solve(&self) -> Result<i32> {
        if !self.cfg.solver.skip_hypotheses && !self.hypotheses_ok()? {
            return Ok(EXIT_CONTRACTION);
        }
        let c0 = match self.cfg.solver.t0_policy {
            T0Kind::Auto => Some(self.measured_c0()?),
            T0Kind::Fixed => None,
        };
        let horizon = self.spec.horizon();
        let (path, rep) = solve_global(
            &self.spec,
            &self.init,
            horizon,
            &self.cfg.policy(c0),
            &self.cfg.picard(),
            &self.mc,
        )?;
        let cv = cross_validate(&self.spec, &self.init, &path, &rep.terminal, &self.mc)?;
        self.csv("quantile_path.csv", |w| path.write_csv(w))?;
        self.csv("mckean_path.csv", |w| cv.mckean_path.write_csv(w))?;
        let snaps: Vec<f64> = self.cfg.output.snapshot_times.iter().copied().filter(|t| *t <= horizon).collect();
        if !snaps.is_empty() {
            let ens = snapshots(&self.spec, Start::Density(&self.init), &path, &snaps, &self.mc)?;
            for (t, e) in snaps.iter().zip(&ens) {
                let kde = DensityEstimate::kde(e, None)?;
                let grid = kde.to_grid(&kde.support(4.0), self.cfg.output.snapshot_nodes)?;
                let mut buf = Vec::new();
                grid.write_grid_csv(&mut buf)?;
                self.csv(&format!("snapshot_t{t}.csv"), |w| w.write_all(&buf))?;
            }
        }
        self.report("solve_report.txt", |w| {
            if let Some(c) = c0 {
                writeln!(w, "c0 = {c:.6e}")?;
            }
            rep.write_report(&mut *w)?;
            writeln!(w, "cross_validation.discrepancy = {:.6e}", cv.discrepancy)?;
            writeln!(w, "cross_validation.combined_stderr = {:.6e}", cv.combined_stderr)?;
            writeln!(w, "terminal_quantile = {}", join(&path.node(path.len() - 1).to_vec()))
        })?;
        Ok(if rep.converged() { EXIT_OK } else { EXIT_CONTRACTION })
    }

    fn simulate(&self) -> Result<i32> {
        let (ens, path) = simulate_mckean(&self.spec, &self.init, self.spec.horizon(), &self.mc)?;
        self.csv("ensemble.csv", |w| ens.write_csv(w))?;
        self.csv("quantile_path.csv", |w| path.write_csv(w))?;
        let q = ens.quantile(self.spec.alpha())?;
        let se = ens.quantile_stderr(self.spec.alpha())?;
        self.report("simulate_report.txt", |w| {
            writeln!(w, "particles = {}", ens.len())?;
            writeln!(w, "t = {}", self.spec.horizon())?;
            writeln!(w, "terminal_quantile = {}", join(&q))?;
            writeln!(w, "terminal_quantile_stderr = {}", join(&se))
        })?;
        Ok(EXIT_OK)
    }

    fn contraction(&self) -> Result<i32> {
        let n = self.spec.n();
        let c0 = self.measured_c0()?;
        let m = &self.cfg.model;
        let mean = m.init_mean.clone().unwrap_or_else(|| vec![0.0; n]);
        let sd = m.init_var.clone().unwrap_or_else(|| vec![1.0; n]).iter().map(|v| v.sqrt()).collect();
        let s = find_s_params(&[DensityEstimate::gaussian(mean, sd)?], self.spec.alpha())?;
        let t0 = choose_t0(
            c0,
            s.k,
            s.delta,
            n,
            self.cfg.solver.target_l,
            10.0 * self.mc.dt,
            self.spec.horizon(),
        )?;
        let sol = picard_solve(&self.spec, Start::Density(&self.init), 0.0, t0, &self.cfg.picard(), &self.mc)?;
        let r = &sol.report;
        self.csv("contraction_deltas.csv", |w| {
            writeln!(w, "iteration,delta")?;
            for (k, d) in r.deltas.iter().enumerate() {
                writeln!(w, "{},{}", k + 1, d)?;
            }
            Ok(())
        })?;
        let contracting = r.converged && !(r.l_hat >= 1.0);
        self.report("contraction_report.txt", |w| {
            writeln!(w, "c0 = {c0:.6e}")?;
            writeln!(w, "k = {}", s.k)?;
            writeln!(w, "delta = {:.6e}", s.delta)?;
            writeln!(w, "eps = {}", s.eps)?;
            writeln!(w, "t0 = {t0:.6e}")?;
            writeln!(w, "iterations = {}", r.iterations)?;
            writeln!(w, "deltas = {}", join(&r.deltas))?;
            writeln!(w, "l_hat = {:.6}", r.l_hat)?;
            writeln!(w, "converged = {}", r.converged)?;
            writeln!(w, "recheck_delta = {:.6e}", r.recheck_delta)?;
            writeln!(w, "contracting = {contracting}")
        })?;
        Ok(if contracting { EXIT_OK } else { EXIT_CONTRACTION })
    }

    fn verify(&self, requested: &[String]) -> Result<i32> {
        let names: Vec<String> = if requested.is_empty() {
            self.cfg.verify.checks.clone()
        } else {
            requested.to_vec()
        };
        if let Some(bad) = names.iter().find(|c| !CHECKS.contains(&c.as_str())) {
            return Err(Error::Configuration(format!(
                "unknown check `{bad}` (known: {})",
                CHECKS.join(", ")
            )));
        }
        let want = |c: &str| names.iter().any(|s| s == c);
        let v = &self.cfg.verify;
        let ft = v.family_times();
        let t_max = self.spec.horizon();
        let family: Vec<QuantilePath> = v.omega_offsets.iter().map(|&d| self.constant(d, t_max)).collect();
        let mut verdicts: Vec<(&'static str, bool)> = Vec::new();

        for &check in CHECKS.iter().filter(|c| want(c)) {
            let passed = match check {
                "hypotheses" => self.hypotheses_ok()?,
                "flow" => self.verify_flow(&family)?,
                "scaling" => {
                    let rep = check_anisotropic_scaling(
                        &self.spec,
                        &family[0],
                        &v.times,
                        scaling_tolerance(self.spec.n()),
                        &self.mc,
                    )?;
                    self.csv("scaling_slopes.csv", |w| rep.write_slopes_csv(w))?;
                    self.write_check(&rep)?
                }
                "bounds" => self.verify_bounds()?,
                "tail" | "lower_bound" => {
                    if verdicts.iter().any(|(c, _)| *c == "tail" || *c == "lower_bound") {
                        continue;
                    }
                    let members = family_ensembles(&self.spec, &self.init, &family, ft, &self.mc)?;
                    let tail = check_tail_uniformity(&members, v.eps)?;
                    if want("tail") {
                        verdicts.push(("tail", self.write_check(&tail)?));
                    }
                    if want("lower_bound") {
                        let lb = check_lower_bound(&members, if tail.k.is_finite() { tail.k } else { 50.0 }, None)?;
                        verdicts.push(("lower_bound", self.write_check(&lb)?));
                    }
                    continue;
                }
                "stability" => {
                    let rep = check_stability(
                        &self.spec,
                        &self.init,
                        &self.pairs(&[0.1, 0.2, 0.4], t_max),
                        &self.pairs(&[0.15, 0.3], t_max),
                        ft,
                        &self.mc,
                        &L1Quadrature::default(),
                    )?;
                    self.write_check(&rep)?
                }
                _ => unreachable!("validated above"),
            };
            verdicts.push((check, passed));
        }

        let all = verdicts.iter().all(|(_, p)| *p);
        self.report("verify_report.txt", |w| {
            for (c, p) in &verdicts {
                writeln!(w, "{c} = {}", if *p { "pass" } else { "fail" })?;
            }
            writeln!(w, "all_passed = {all}")
        })?;
        for (c, p) in &verdicts {
            println!("{c}: {}", if *p { "pass" } else { "FAIL" });
        }
        Ok(if all { EXIT_OK } else { EXIT_FAILED })
    }

    fn write_check(&self, rep: &dyn CheckReport) -> Result<bool> {
        self.report(&format!("{}_report.txt", rep.name()), |w| rep.write_report(w))?;
        Ok(rep.passed())
    }

    fn verify_flow(&self, family: &[QuantilePath]) -> Result<bool> {
        let probe = FlowProbe {
            points: 1000,
            radius: self.cfg.model.probe_radius,
            seed: self.mc.seed,
        };
        let rep = check_flow_bounds(&self.spec, family, &probe, &FlowConfig::default())?;
        let passed = rep.violations() == 0 && rep.max_roundtrip_error <= 1e-8;
        self.report("flow_report.txt", |w| {
            writeln!(w, "check = flow")?;
            writeln!(w, "passed = {passed}")?;
            writeln!(w, "probes = {}", rep.probes)?;
            writeln!(w, "violations = {}", rep.violations())?;
            writeln!(w, "max_roundtrip_error = {:.3e}", rep.max_roundtrip_error)?;
            for b in &rep.bounds {
                write!(w, "{:?} = {} worst_margin={:.6e}", b.bound, b.violations, b.worst_margin)?;
                if let Some(wit) = &b.witness {
                    write!(w, " witness: {wit}")?;
                }
                writeln!(w)?;
            }
            Ok(())
        })?;
        Ok(passed)
    }

    fn verify_bounds(&self) -> Result<bool> {
        let v = &self.cfg.verify;
        let n = self.spec.n();
        let t = v.bound_time;
        let omega = self.constant(0.0, t);
        let x = self.cfg.model.init_mean.clone().unwrap_or_else(|| vec![0.0; n]);
        let theta = forward_flow(&self.spec, &omega, &x, t, &FlowConfig::default())?.theta;
        let mut probes = Vec::new();
        let mut idx = vec![0usize; n];
        loop {
            probes.push(
                (0..n)
                    .map(|i| theta[i] + (idx[i] as f64 - 2.0) * t.powf(i as f64 + 0.5))
                    .collect::<Vec<f64>>(),
            );
            let mut j = 0;
            while j < n {
                idx[j] += 1;
                if idx[j] < 5 {
                    break;
                }
                idx[j] = 0;
                j += 1;
            }
            if j == n {
                break;
            }
        }
        let rep = check_gaussian_bounds(&self.spec, &omega, &x, t, &probes, v.mask, &self.mc)?;
        self.csv("bounds_margins.csv", |w| rep.write_margins_csv(w))?;
        self.write_check(&rep)
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Witness;

    #[test]
    fn error_classes_map_to_documented_codes() {
        let w = Witness { t: 0.0, y: vec![], x: vec![] };
        assert_eq!(exit_code(&Error::Configuration("x".into())), 2);
        assert_eq!(exit_code(&Error::Parse("x".into())), 2);
        assert_eq!(exit_code(&Error::NonContraction { interval: 0, deltas: vec![] }), 3);
        assert_eq!(
            exit_code(&Error::HypothesisViolation { what: "H1", value: 1.0, witness: w }),
            3
        );
        assert_eq!(exit_code(&Error::BlowUp { step: 1, particle: 0 }), 4);
        assert_eq!(exit_code(&Error::IntegrationFailure { last_good_time: 0.1 }), 4);
        assert_eq!(exit_code(&Error::Domain("x".into())), 1);
    }

    #[test]
    fn overrides_are_applied_before_validation() {
        let cli = Cli::try_parse_from(["qmkv", "--config", "toy", "--seed", "5", "--out", "somewhere", "solve"]).unwrap();
        let cfg = load_config(&cli).unwrap();
        assert_eq!(cfg.mc.seed, 5);
        assert_eq!(cfg.output.dir, PathBuf::from("somewhere"));
        let cli = Cli::try_parse_from(["qmkv", "simulate", "--config", "missing-example"]).unwrap();
        assert!(matches!(load_config(&cli), Err(Error::Parse(_))));
    }
}
