//! Experiment harness and command-line surface.
//!
//! CSV outputs:
//! - sweep: `kappa,policy,seed,hit_epochs,hit_steps` (`NOT_HIT` / `ERROR` when no time is available)
//! - sweep summary: `kappa,policy,runs,hits,errors,mean_hit_epochs,mean_hit_steps,sd_hit_steps`
//! - kernel: `i,j,action,i2,j2,num,den`
//! - values: `i,j,value` with exact rational values
//! - policy: `i,j,action`, one row per optimal action

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use rayon::prelude::*;
use thiserror::Error;

use crate::auxmdp::{
    audit_kernel_default, aux_states, build_explicit_mdp, critical_lambda, optimal_decision_set, verify_bellman_inequalities,
    write_kernel_csv, AuxError, AuxState, InequalityReport, KernelAuditRow, Relation, KERNEL_CLASSES,
};
use crate::dynamics::{ExactDistribution, MetropolisSampler};
use crate::lattice::{circumscribed_rectangle, Configuration, LatticeError, ModelParams, Rect, TorusCoord};
use crate::lifting::{step_policy, LatticePolicy, LiftError, PolicyKind};
use crate::mdpsolver::{periodic_policy_evaluation, solve_exact, ExactSolution, SolverError};
use crate::rng::{derive_seed, stream_rng};

pub const OUT_DIR_ENV: &str = "ISING_STMDP_OUT";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("invalid value for {key}: {msg}")]
    Invalid { key: String, msg: String },
    #[error("epoch {epoch}: {source}")]
    Epoch { epoch: u64, source: LiftError },
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Aux(#[from] AuxError),
    #[error(transparent)]
    Lift(#[from] LiftError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

fn invalid(key: &str, msg: impl Into<String>) -> CliError {
    CliError::Invalid { key: key.to_string(), msg: msg.into() }
}

/// Parses "p/q" or a decimal such as "0.9" into an exact rational.
pub fn parse_rational(s: &str) -> Result<BigRational, CliError> {
    let s = s.trim();
    let bad = || invalid("rational", format!("cannot parse {s:?}"));
    if let Some((p, q)) = s.split_once('/') {
        let p: BigInt = p.trim().parse().map_err(|_| bad())?;
        let q: BigInt = q.trim().parse().map_err(|_| bad())?;
        if q.is_zero() {
            return Err(bad());
        }
        return Ok(BigRational::new(p, q));
    }
    let (int, frac) = s.split_once('.').unwrap_or((s, ""));
    if !frac.chars().all(|c| c.is_ascii_digit()) || (int.is_empty() && frac.is_empty()) {
        return Err(bad());
    }
    let digits = format!("{}{}", if int.is_empty() { "0" } else { int }, frac);
    let num: BigInt = digits.parse().map_err(|_| bad())?;
    let den = num_traits::pow(BigInt::from(10), frac.len());
    Ok(BigRational::new(num, den))
}

fn parse_discount(s: &str) -> Result<BigRational, CliError> {
    let l = parse_rational(s)?;
    if l <= BigRational::zero() || l >= BigRational::one() {
        return Err(invalid("lambda", "must lie strictly between 0 and 1"));
    }
    Ok(l)
}

fn parse_list<T>(key: &str, s: &str, f: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, CliError> {
    let v: Result<Vec<T>, String> = s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(f).collect();
    let v = v.map_err(|m| invalid(key, m))?;
    if v.is_empty() {
        return Err(invalid(key, "empty list"));
    }
    Ok(v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub n: usize,
    pub h: f64,
    pub beta: f64,
    pub kappa: u64,
    pub kappas: Vec<u64>,
    pub policy: PolicyKind,
    pub policies: Vec<PolicyKind>,
    pub lambda: BigRational,
    pub max_epochs: u64,
    pub replications: u64,
    pub master_seed: u64,
    pub start: Option<PathBuf>,
    /// Side of the square start rectangle when no snapshot is given.
    pub start_side: usize,
    pub output_dir: PathBuf,
    pub threads: Option<usize>,
    pub snapshot_every: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n: 20,
            h: 0.4,
            beta: 10.0,
            kappa: 1000,
            kappas: vec![500, 1000, 2000],
            policy: PolicyKind::LiftedOptimal,
            policies: PolicyKind::ALL.to_vec(),
            lambda: BigRational::new(9.into(), 10.into()),
            max_epochs: 500,
            replications: 20,
            master_seed: 20240601,
            start: None,
            start_side: 3,
            output_dir: PathBuf::from("out"),
            threads: None,
            snapshot_every: 0,
        }
    }
}

impl ExperimentConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        let num = |k: &str| -> Result<u64, CliError> { v.parse().map_err(|_| invalid(k, format!("{v:?}"))) };
        let float = |k: &str| -> Result<f64, CliError> { v.parse().map_err(|_| invalid(k, format!("{v:?}"))) };
        match key.trim() {
            "n" => self.n = num("n")? as usize,
            "h" => self.h = float("h")?,
            "beta" => self.beta = float("beta")?,
            "kappa" => self.kappa = num("kappa")?,
            "kappas" => self.kappas = parse_list("kappas", v, |x| x.parse().map_err(|_| x.to_string()))?,
            "policy" => self.policy = v.parse()?,
            "policies" => {
                self.policies = parse_list("policies", v, |x| x.parse::<PolicyKind>().map_err(|e| e.to_string()))?
            }
            "lambda" => self.lambda = parse_discount(v)?,
            "max_epochs" => self.max_epochs = num("max_epochs")?,
            "replications" | "reps" => self.replications = num("replications")?,
            "seed" | "master_seed" => self.master_seed = num("seed")?,
            "start" => self.start = Some(PathBuf::from(v)),
            "start_side" => self.start_side = num("start_side")? as usize,
            "output_dir" | "out" => self.output_dir = PathBuf::from(v),
            "threads" => self.threads = Some(num("threads")? as usize),
            "snapshot_every" => self.snapshot_every = num("snapshot_every")?,
            other => return Err(invalid(other, "unknown key")),
        }
        Ok(())
    }

    /// Flat `key = value` text; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config { line: k + 1, msg: "expected key = value".into() })?;
            self.set(key, value).map_err(|e| CliError::Config { line: k + 1, msg: e.to_string() })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(&fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.n < 6 {
            return Err(invalid("n", "must be at least 6"));
        }
        ModelParams::new(self.h, self.beta)?;
        if self.kappa == 0 || self.kappas.contains(&0) {
            return Err(invalid("kappa", "must be at least 1"));
        }
        if self.replications == 0 {
            return Err(invalid("replications", "must be at least 1"));
        }
        if self.start.is_none() && !(2..=self.n - 2).contains(&self.start_side) {
            return Err(invalid("start_side", "must lie in 2..=n-2"));
        }
        Ok(())
    }

    pub fn params(&self) -> Result<ModelParams, CliError> {
        Ok(ModelParams::new(self.h, self.beta)?)
    }

    pub fn start_config(&self) -> Result<Configuration, CliError> {
        match &self.start {
            Some(path) => {
                let (cfg, _) = Configuration::from_snapshot(&fs::read_to_string(path)?)?;
                if cfg.n() != self.n {
                    return Err(invalid("start", format!("snapshot has N = {}, config has {}", cfg.n(), self.n)));
                }
                Ok(cfg)
            }
            None => {
                let s = self.start_side;
                let a = (self.n - s) / 2;
                Ok(Configuration::with_rectangle(self.n, Rect::new(s, s, TorusCoord::new(a, a)))?)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunRecord {
    pub seed: u64,
    pub kappa: u64,
    pub hit_epoch: Option<u64>,
    /// Bounding-box size after each epoch, starting with the initial configuration.
    pub sizes: Vec<(usize, usize)>,
    /// Epochs whose bounding box was not an auxiliary state (no flip made).
    pub fallback_epochs: Vec<u64>,
    /// Epochs where plus spins met every row and column without filling the torus;
    /// the covering rectangle is the whole torus, so no flip is made.
    pub wrap_epochs: Vec<u64>,
    pub snapshots: Vec<PathBuf>,
}

impl RunRecord {
    pub fn hit_steps(&self) -> Option<u64> {
        self.hit_epoch.map(|e| e * self.kappa)
    }
}

fn box_size(config: &Configuration) -> (usize, usize) {
    match circumscribed_rectangle(config) {
        Ok(Some(r)) => (r.width, r.height),
        Ok(None) => (0, 0),
        Err(_) => (config.n(), config.n()),
    }
}

/// One controlled run: at every epoch the policy flips (at most) one spin, then
/// `kappa` Metropolis steps follow. Stops at all-plus or after `max_epochs`.
pub fn run_simulation(
    cfg: &ExperimentConfig,
    policy: &LatticePolicy,
    kappa: u64,
    seed: u64,
    snapshot_dir: Option<&Path>,
) -> Result<RunRecord, CliError> {
    let sampler = MetropolisSampler::new(&cfg.params()?);
    let mut rng = stream_rng(seed, 0);
    let mut config = cfg.start_config()?;
    let mut rec = RunRecord {
        seed,
        kappa,
        hit_epoch: None,
        sizes: vec![box_size(&config)],
        fallback_epochs: Vec::new(),
        wrap_epochs: Vec::new(),
        snapshots: Vec::new(),
    };
    let snap = |t: u64, c: &Configuration, rec: &mut RunRecord| -> Result<(), CliError> {
        if let Some(dir) = snapshot_dir {
            if cfg.snapshot_every > 0 && t.is_multiple_of(cfg.snapshot_every) {
                fs::create_dir_all(dir)?;
                let p = dir.join(format!("seed{seed}_epoch{t}.txt"));
                fs::write(&p, c.to_snapshot(cfg.h))?;
                rec.snapshots.push(p);
            }
        }
        Ok(())
    };
    for t in 0..cfg.max_epochs {
        snap(t, &config, &mut rec)?;
        if config.is_all_plus() {
            rec.hit_epoch = Some(t);
            return Ok(rec);
        }
        match step_policy(&config, t, policy) {
            Ok(d) => {
                if d.fallback {
                    rec.fallback_epochs.push(t);
                }
                if let Some(c) = d.target {
                    config.flip(c);
                }
            }
            Err(LiftError::Lattice(LatticeError::AmbiguousWrap)) => rec.wrap_epochs.push(t),
            Err(e) => return Err(CliError::Epoch { epoch: t, source: e }),
        }
        sampler.run(&mut config, kappa, &mut rng);
        rec.sizes.push(box_size(&config));
    }
    snap(cfg.max_epochs, &config, &mut rec)?;
    if config.is_all_plus() {
        rec.hit_epoch = Some(cfg.max_epochs);
    }
    Ok(rec)
}

/// Seed of replication `rep` in sweep cell (kappa, policy).
pub fn cell_seed(master: u64, kappa: u64, policy: PolicyKind, rep: u64) -> u64 {
    derive_seed(master, &[kappa, policy.label(), rep])
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub kappa: u64,
    pub policy: PolicyKind,
    pub rep: u64,
    pub seed: u64,
    pub outcome: Result<RunRecord, String>,
}

/// All (kappa, policy, replication) runs, in a fixed order independent of the worker count.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>, CliError> {
    cfg.validate()?;
    let mut cells = Vec::new();
    for &kappa in &cfg.kappas {
        for &policy in &cfg.policies {
            for rep in 0..cfg.replications {
                cells.push((kappa, policy, rep));
            }
        }
    }
    let policies: BTreeMap<PolicyKind, LatticePolicy> = cfg
        .policies
        .iter()
        .map(|&k| Ok((k, LatticePolicy::new(k, cfg.n, &cfg.lambda)?)))
        .collect::<Result<_, CliError>>()?;
    let work = || -> Vec<SweepRow> {
        cells
            .par_iter()
            .map(|&(kappa, policy, rep)| {
                let seed = cell_seed(cfg.master_seed, kappa, policy, rep);
                let outcome = run_simulation(cfg, &policies[&policy], kappa, seed, None).map_err(|e| e.to_string());
                SweepRow { kappa, policy, rep, seed, outcome }
            })
            .collect()
    };
    match cfg.threads {
        Some(t) => Ok(rayon::ThreadPoolBuilder::new().num_threads(t).build()?.install(work)),
        None => Ok(work()),
    }
}

pub fn write_sweep_csv<W: io::Write>(rows: &[SweepRow], out: W) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["kappa", "policy", "seed", "hit_epochs", "hit_steps"])?;
    for r in rows {
        let (e, s) = match &r.outcome {
            Ok(rec) => match rec.hit_epoch {
                Some(e) => (e.to_string(), (e * r.kappa).to_string()),
                None => ("NOT_HIT".to_string(), "NOT_HIT".to_string()),
            },
            Err(_) => ("ERROR".to_string(), "ERROR".to_string()),
        };
        w.write_record([r.kappa.to_string(), r.policy.name().to_string(), r.seed.to_string(), e, s])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSummary {
    pub kappa: u64,
    pub policy: PolicyKind,
    pub runs: usize,
    pub hits: usize,
    pub errors: usize,
    /// Means over completed runs, with runs that never hit counted at `max_epochs`.
    pub mean_hit_epochs: f64,
    pub mean_hit_steps: f64,
    pub sd_hit_steps: f64,
}

pub fn summarize(rows: &[SweepRow], max_epochs: u64) -> Vec<SweepSummary> {
    let mut groups: BTreeMap<(u64, PolicyKind), Vec<&SweepRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.kappa, r.policy)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((kappa, policy), rs)| {
            let epochs: Vec<f64> = rs
                .iter()
                .filter_map(|r| r.outcome.as_ref().ok())
                .map(|rec| rec.hit_epoch.unwrap_or(max_epochs) as f64)
                .collect();
            let hits = rs.iter().filter(|r| matches!(&r.outcome, Ok(rec) if rec.hit_epoch.is_some())).count();
            let m = epochs.len().max(1) as f64;
            let mean_e = epochs.iter().sum::<f64>() / m;
            let var = if epochs.len() > 1 {
                epochs.iter().map(|e| (e - mean_e).powi(2)).sum::<f64>() / (epochs.len() - 1) as f64
            } else {
                0.0
            };
            SweepSummary {
                kappa,
                policy,
                runs: rs.len(),
                hits,
                errors: rs.len() - epochs.len(),
                mean_hit_epochs: mean_e,
                mean_hit_steps: mean_e * kappa as f64,
                sd_hit_steps: var.sqrt() * kappa as f64,
            }
        })
        .collect()
}

pub fn write_summary_csv<W: io::Write>(summary: &[SweepSummary], out: W) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["kappa", "policy", "runs", "hits", "errors", "mean_hit_epochs", "mean_hit_steps", "sd_hit_steps"])?;
    for s in summary {
        w.write_record([
            s.kappa.to_string(),
            s.policy.name().to_string(),
            s.runs.to_string(),
            s.hits.to_string(),
            s.errors.to_string(),
            format!("{:.4}", s.mean_hit_epochs),
            format!("{:.4}", s.mean_hit_steps),
            format!("{:.4}", s.sd_hit_steps),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per kappa, whether the lifted optimal policy has the strictly smallest mean.
pub fn ordering_holds(summary: &[SweepSummary]) -> BTreeMap<u64, bool> {
    let mut by_kappa: BTreeMap<u64, Vec<&SweepSummary>> = BTreeMap::new();
    for s in summary {
        by_kappa.entry(s.kappa).or_default().push(s);
    }
    by_kappa
        .into_iter()
        .map(|(k, ss)| {
            let opt = ss.iter().find(|s| s.policy == PolicyKind::LiftedOptimal);
            let ok = match opt {
                Some(o) => ss
                    .iter()
                    .filter(|s| s.policy != PolicyKind::LiftedOptimal)
                    .all(|s| o.errors == 0 && o.mean_hit_steps < s.mean_hit_steps),
                None => false,
            };
            (k, ok)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct AuditOutcome {
    pub rows: Vec<KernelAuditRow>,
    pub failed_classes: Vec<usize>,
}

impl AuditOutcome {
    pub fn verified_classes(&self) -> usize {
        let mut c: Vec<usize> = self.rows.iter().map(|r| r.class).collect();
        c.dedup();
        c.len() - self.failed_classes.len()
    }
}

/// "i:j=p" terms joined by spaces.
fn law_string(d: &ExactDistribution<AuxState>) -> String {
    d.iter().map(|(s, p)| format!("{}:{}={p}", s.i, s.j)).collect::<Vec<_>>().join(" ")
}

/// Kernel audit; writes `kernel.csv` and `kernel_audit.csv` when `out` is given.
pub fn run_audit(n: usize, out: Option<&Path>) -> Result<AuditOutcome, CliError> {
    let rows = audit_kernel_default(n)?;
    let mut failed: Vec<usize> = rows.iter().filter(|r| !r.matches()).map(|r| r.class).collect();
    failed.dedup();
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_kernel_csv(n, fs::File::create(dir.join("kernel.csv"))?)?;
        let mut w = csv::Writer::from_path(dir.join("kernel_audit.csv"))?;
        w.write_record([
            "class", "description", "i", "j", "action", "spin", "match", "injective", "expected", "observed",
        ])?;
        for r in &rows {
            w.write_record([
                r.class.to_string(),
                KERNEL_CLASSES[r.class - 1].to_string(),
                r.state.i.to_string(),
                r.state.j.to_string(),
                r.action.name().to_string(),
                r.spin.to_string(),
                r.matches().to_string(),
                r.injective.to_string(),
                law_string(&r.expected),
                law_string(&r.observed),
            ])?;
        }
        w.flush()?;
    }
    Ok(AuditOutcome { rows, failed_classes: failed })
}

fn write_values<W: io::Write>(values: &[(AuxState, BigRational)], out: W) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["i", "j", "value"])?;
    for (s, v) in values {
        w.write_record([s.i.to_string(), s.j.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Exact optimal values and optimal action sets; writes `values.csv` and `policy.csv`.
pub fn run_solve(n: usize, lambda: &BigRational, out: Option<&Path>) -> Result<(Vec<AuxState>, ExactSolution), CliError> {
    let mdp = build_explicit_mdp(n)?;
    let sol = solve_exact(&mdp, lambda)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let vals: Vec<_> = mdp.states().iter().copied().zip(sol.values.iter().cloned()).collect();
        write_values(&vals, fs::File::create(dir.join("values.csv"))?)?;
        let mut w = csv::Writer::from_path(dir.join("policy.csv"))?;
        w.write_record(["i", "j", "action"])?;
        for (k, s) in mdp.states().iter().enumerate() {
            for &a in &sol.optimal_sets[k] {
                w.write_record([s.i.to_string(), s.j.to_string(), mdp.actions(k)[a].action.name().to_string()])?;
            }
        }
        w.flush()?;
    }
    Ok((mdp.states().to_vec(), sol))
}

/// Optimal action sets of a solution, per state in solver order.
pub fn optimal_action_names(n: usize, sol: &ExactSolution) -> Result<Vec<Vec<crate::auxmdp::AuxAction>>, CliError> {
    let mdp = build_explicit_mdp(n)?;
    Ok(sol
        .optimal_sets
        .iter()
        .enumerate()
        .map(|(k, set)| set.iter().map(|&a| mdp.actions(k)[a].action).collect())
        .collect())
}

/// Exact values of a named auxiliary policy (phase 0 for the alternating benchmarks).
pub fn run_values(
    n: usize,
    lambda: &BigRational,
    kind: PolicyKind,
    out: Option<&Path>,
) -> Result<Vec<(AuxState, BigRational)>, CliError> {
    let mdp = build_explicit_mdp(n)?;
    let pol = LatticePolicy::new(kind, n, lambda)?;
    let idx = pol.aux.indices(&mdp)?;
    let v: Vec<Vec<BigRational>> = periodic_policy_evaluation(&mdp, &idx, lambda)?;
    let vals: Vec<_> = mdp.states().iter().copied().zip(v[0].iter().cloned()).collect();
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_values(&vals, fs::File::create(dir.join(format!("values_{}.csv", kind.name())))?)?;
    }
    Ok(vals)
}

/// Human-readable per-family summary of an inequality report.
pub fn inequality_summary(rep: &InequalityReport) -> String {
    let mut s = String::new();
    let mut fams: BTreeMap<u8, (usize, usize, Relation)> = BTreeMap::new();
    for c in &rep.checks {
        let e = fams.entry(c.family).or_insert((0, 0, c.relation));
        e.0 += 1;
        if c.holds() {
            e.1 += 1;
        }
    }
    for (f, (total, ok, rel)) in fams {
        let what = match rel {
            Relation::Positive => "strict inequalities",
            Relation::Zero => "exact equalities",
        };
        let status = if ok == total { "ok" } else { "VIOLATED" };
        let _ = writeln!(s, "family ({f}): {ok}/{total} {what} {status}");
    }
    s
}

#[derive(Parser, Debug)]
#[command(name = "ising-stmdp", version, about = "Controlled Ising nucleation and its auxiliary rectangle MDP")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run replications of one lifted policy at one kappa.
    Simulate(ExperimentArgs),
    /// Hitting-time sweep over kappas and policies.
    Sweep(ExperimentArgs),
    /// Recompute every kernel class from the lattice dynamics.
    AuditKernel(AuxArgs),
    /// Exact optimal values and optimal actions of the auxiliary MDP.
    Solve(AuxArgs),
    /// Check the optimality inequality families on exact values.
    VerifyInequalities(AuxArgs),
    /// Exact values of a named auxiliary policy.
    Values(AuxArgs),
}

#[derive(Args, Debug, Default)]
pub struct ExperimentArgs {
    /// Flat key = value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub h: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub kappa: Option<u64>,
    /// Comma separated.
    #[arg(long)]
    pub kappas: Option<String>,
    #[arg(long)]
    pub policy: Option<String>,
    /// Comma separated.
    #[arg(long)]
    pub policies: Option<String>,
    /// "p/q" or decimal.
    #[arg(long)]
    pub lambda: Option<String>,
    #[arg(long)]
    pub max_epochs: Option<u64>,
    #[arg(long)]
    pub reps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Start snapshot file.
    #[arg(long)]
    pub start: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub snapshot_every: Option<u64>,
}

impl ExperimentArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
            if !dir.is_empty() {
                cfg.output_dir = PathBuf::from(dir);
            }
        }
        let pairs: [(&str, Option<String>); 15] = [
            ("n", self.n.map(|x| x.to_string())),
            ("h", self.h.map(|x| x.to_string())),
            ("beta", self.beta.map(|x| x.to_string())),
            ("kappa", self.kappa.map(|x| x.to_string())),
            ("kappas", self.kappas.clone()),
            ("policy", self.policy.clone()),
            ("policies", self.policies.clone()),
            ("lambda", self.lambda.clone()),
            ("max_epochs", self.max_epochs.map(|x| x.to_string())),
            ("replications", self.reps.map(|x| x.to_string())),
            ("seed", self.seed.map(|x| x.to_string())),
            ("start", self.start.as_ref().map(|p| p.display().to_string())),
            ("output_dir", self.out.as_ref().map(|p| p.display().to_string())),
            ("threads", self.threads.map(|x| x.to_string())),
            ("snapshot_every", self.snapshot_every.map(|x| x.to_string())),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct AuxArgs {
    #[arg(long, default_value_t = 12)]
    pub n: usize,
    /// "p/q" or decimal.
    #[arg(long, default_value = "9/10")]
    pub lambda: String,
    /// Policy for `values`: opt, pi1 or pi2.
    #[arg(long, default_value = "opt")]
    pub policy: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl AuxArgs {
    fn out_dir(&self) -> PathBuf {
        if let Some(o) = &self.out {
            return o.clone();
        }
        match std::env::var(OUT_DIR_ENV) {
            Ok(d) if !d.is_empty() => PathBuf::from(d),
            _ => PathBuf::from("out"),
        }
    }
}

/// Runs a parsed command, writing human-readable output to `log`. Returns the exit code.
pub fn execute<W: io::Write>(cli: Cli, log: &mut W) -> Result<i32, CliError> {
    match cli.command {
        Command::Simulate(args) => {
            let cfg = args.resolve()?;
            let policy = LatticePolicy::new(cfg.policy, cfg.n, &cfg.lambda)?;
            let dir = cfg.output_dir.clone();
            fs::create_dir_all(&dir)?;
            let snaps = dir.join("snapshots");
            let mut rows = Vec::new();
            let mut sizes = csv::Writer::from_path(dir.join("sizes.csv"))?;
            sizes.write_record(["seed", "epoch", "width", "height"])?;
            for rep in 0..cfg.replications {
                let seed = cell_seed(cfg.master_seed, cfg.kappa, cfg.policy, rep);
                let rec = run_simulation(&cfg, &policy, cfg.kappa, seed, Some(&snaps))?;
                for (t, (w, h)) in rec.sizes.iter().enumerate() {
                    sizes.write_record([seed.to_string(), t.to_string(), w.to_string(), h.to_string()])?;
                }
                writeln!(
                    log,
                    "seed {seed}: hit epoch {} ({} fallback epochs, {} wrap epochs)",
                    rec.hit_epoch.map_or("NOT_HIT".to_string(), |e| e.to_string()),
                    rec.fallback_epochs.len(),
                    rec.wrap_epochs.len()
                )?;
                rows.push(SweepRow { kappa: cfg.kappa, policy: cfg.policy, rep, seed, outcome: Ok(rec) });
            }
            sizes.flush()?;
            write_sweep_csv(&rows, fs::File::create(dir.join("simulate.csv"))?)?;
            Ok(0)
        }
        Command::Sweep(args) => {
            let cfg = args.resolve()?;
            let rows = run_sweep(&cfg)?;
            fs::create_dir_all(&cfg.output_dir)?;
            write_sweep_csv(&rows, fs::File::create(cfg.output_dir.join("sweep.csv"))?)?;
            let summary = summarize(&rows, cfg.max_epochs);
            write_summary_csv(&summary, fs::File::create(cfg.output_dir.join("sweep_summary.csv"))?)?;
            for s in &summary {
                writeln!(
                    log,
                    "kappa {:>6} {:>4}: mean {:.1} epochs ({:.0} steps), {}/{} hit",
                    s.kappa, s.policy, s.mean_hit_epochs, s.mean_hit_steps, s.hits, s.runs
                )?;
            }
            for (k, ok) in ordering_holds(&summary) {
                writeln!(log, "kappa {k}: opt fastest: {ok}")?;
            }
            Ok(0)
        }
        Command::AuditKernel(args) => {
            let dir = args.out_dir();
            let outcome = run_audit(args.n, Some(&dir))?;
            if outcome.failed_classes.is_empty() {
                writeln!(log, "all {} kernel equation classes verified", outcome.verified_classes())?;
                Ok(0)
            } else {
                writeln!(log, "kernel mismatch in classes {:?}", outcome.failed_classes)?;
                Ok(1)
            }
        }
        Command::Solve(args) => {
            let lambda = parse_discount(&args.lambda)?;
            let dir = args.out_dir();
            let (states, sol) = run_solve(args.n, &lambda, Some(&dir))?;
            let actions = optimal_action_names(args.n, &sol)?;
            let mut agree = true;
            for (k, s) in states.iter().enumerate() {
                agree &= actions[k] == optimal_decision_set(*s, &lambda, args.n)?;
            }
            writeln!(log, "solved N = {} at lambda = {lambda}: {} states", args.n, states.len())?;
            writeln!(log, "optimal set sizes agree with the structural theorem: {agree}")?;
            Ok(0)
        }
        Command::VerifyInequalities(args) => {
            let lambda = parse_discount(&args.lambda)?;
            let rep = verify_bellman_inequalities(&lambda, args.n)?;
            write!(log, "{}", inequality_summary(&rep))?;
            if lambda == critical_lambda() {
                writeln!(log, "critical discount: both regimes checked")?;
            }
            Ok(if rep.all_hold() { 0 } else { 1 })
        }
        Command::Values(args) => {
            let lambda = parse_discount(&args.lambda)?;
            let kind: PolicyKind = args.policy.parse()?;
            let dir = args.out_dir();
            let vals = run_values(args.n, &lambda, kind, Some(&dir))?;
            if let Some((_, v)) = vals.iter().find(|(s, _)| *s == AuxState::new(3, 3)) {
                writeln!(log, "value of {kind} at (3,3): {v}")?;
            }
            writeln!(log, "{} states written to {}", aux_states(args.n)?.len(), dir.display())?;
            Ok(0)
        }
    }
}

/// Entry point used by the binary.
pub fn run_from_env() -> i32 {
    let cli = Cli::parse();
    let mut out = io::stdout();
    match execute(cli, &mut out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rationals() {
        assert_eq!(parse_rational("15/17").unwrap(), crate::dynamics::ratio(15, 17));
        assert_eq!(parse_rational("0.9").unwrap(), crate::dynamics::ratio(9, 10));
        assert_eq!(parse_rational(".85").unwrap(), crate::dynamics::ratio(17, 20));
        assert!(parse_rational("1/0").is_err());
        assert!(parse_rational("abc").is_err());
        assert!(parse_discount("1").is_err());
    }

    #[test]
    fn config_text_and_validation() {
        let mut c = ExperimentConfig::default();
        c.apply_text("# comment\nn = 12\nkappas = 10, 20\npolicies = opt,pi2\nlambda = 15/17\n").unwrap();
        assert_eq!(c.n, 12);
        assert_eq!(c.kappas, vec![10, 20]);
        assert_eq!(c.policies, vec![PolicyKind::LiftedOptimal, PolicyKind::LiftedPi2]);
        assert!(c.validate().is_ok());
        assert!(matches!(c.apply_text("bogus = 1"), Err(CliError::Config { line: 1, .. })));
        c.set("h", "1.5").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn all_plus_start_hits_at_zero() {
        let dir = std::env::temp_dir().join(format!("ising_stmdp_cli_{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let p = dir.join("plus.txt");
        fs::write(&p, Configuration::all_plus(8).unwrap().to_snapshot(0.4)).unwrap();
        let mut c = ExperimentConfig { n: 8, start: Some(p), ..Default::default() };
        c.validate().unwrap();
        let pol = LatticePolicy::new(PolicyKind::LiftedOptimal, 8, &c.lambda).unwrap();
        let r = run_simulation(&c, &pol, 10, 1, None).unwrap();
        assert_eq!(r.hit_epoch, Some(0));
        assert_eq!(r.sizes.len(), 1);
        c.start = None;
        c.max_epochs = 3;
        let r = run_simulation(&c, &pol, 1, 1, None).unwrap();
        assert_eq!(r.sizes.len(), 4);
    }

    #[test]
    fn simulation_is_deterministic() {
        let c = ExperimentConfig { n: 10, max_epochs: 60, ..Default::default() };
        let pol = LatticePolicy::new(PolicyKind::LiftedPi1, 10, &c.lambda).unwrap();
        let a = run_simulation(&c, &pol, 200, 7, None).unwrap();
        let b = run_simulation(&c, &pol, 200, 7, None).unwrap();
        assert_eq!(a, b);
    }
}
