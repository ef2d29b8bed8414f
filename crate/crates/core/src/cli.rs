//! Command-line drivers: configuration, replicate farming and output files.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bdconst::{self, BdError};
use crate::engine::{self, EngineError, VariantId};
use crate::genealogy::{generate_with, GenealogyError, GenerateOptions, DEFAULT_EVENT_CAP};
use crate::kernels::{self, KernelError, LazyWalkStep};
use crate::lattice::{make_config, scaling_n_of_r, scaling_r_of_n, LatticeConfig, LatticeError, Site};
use crate::rng::{derive_seed, purpose, seeded, stream};
use crate::stats::{self, InitMode, SbmParams, StatsError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RESOURCE: i32 = 3;
pub const EXIT_IO: i32 = 4;

pub const ENV_OUTPUT_DIR: &str = "SIRLAB_OUTPUT_DIR";
pub const ENV_THREADS: &str = "SIRLAB_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Resource(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Resource(_) => EXIT_RESOURCE,
            CliError::Io(_) => EXIT_IO,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Validation(_) => "validation",
            CliError::Resource(_) => "resource_cap",
            CliError::Io(_) => "io",
        }
    }

    pub fn to_json(&self) -> Value {
        json!({ "error": { "kind": self.kind(), "code": self.exit_code(), "message": self.to_string() } })
    }
}

impl From<LatticeError> for CliError {
    fn from(e: LatticeError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<GenealogyError> for CliError {
    fn from(e: GenealogyError) -> Self {
        match e {
            GenealogyError::CapExceeded { .. } => CliError::Resource(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<StatsError> for CliError {
    fn from(e: StatsError) -> Self {
        match e {
            StatsError::Genealogy(g) => g.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<BdError> for CliError {
    fn from(e: BdError) -> Self {
        match e {
            BdError::Unreachable { .. } => CliError::Resource(e.to_string()),
            BdError::Genealogy(g) => g.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<KernelError> for CliError {
    fn from(e: KernelError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

/// Full configuration of a `simulate` run, written as `run_config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub d: usize,
    #[serde(rename = "N")]
    pub n: u64,
    pub theta: f64,
    pub t_max: f64,
    pub x0_mass: f64,
    pub init_mode: InitMode,
    #[serde(rename = "K0")]
    pub k0: Vec<Vec<i32>>,
    pub variants: Vec<VariantId>,
    pub snapshot_times: Vec<f64>,
    pub replicates: u64,
    pub seed: u64,
    pub event_cap: u64,
    pub output_dir: PathBuf,
}

impl RunConfig {
    /// Checks every field and returns the lattice configuration and `K0` sites.
    pub fn validate(&self) -> Result<(LatticeConfig, Vec<Site>), CliError> {
        let cfg = make_config(self.d, self.n, self.theta)?;
        let bad = |m: String| Err(CliError::Validation(m));
        if self.replicates == 0 {
            return bad("replicates must be at least 1".into());
        }
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return bad(format!("t_max must be positive and finite, got {}", self.t_max));
        }
        if !(self.x0_mass > 0.0 && self.x0_mass.is_finite()) {
            return bad(format!("x0_mass must be positive and finite, got {}", self.x0_mass));
        }
        if self.variants.is_empty() {
            return bad("at least one variant is required".into());
        }
        if self.event_cap == 0 {
            return bad("event_cap must be positive".into());
        }
        if let Some(t) = self.snapshot_times.iter().find(|t| !(0.0..=self.t_max).contains(*t)) {
            return bad(format!("snapshot time {t} is outside [0, {}]", self.t_max));
        }
        let mut k0 = Vec::with_capacity(self.k0.len());
        for s in &self.k0 {
            if s.len() != self.d {
                return bad(format!("K0 site {s:?} does not have {} coordinates", self.d));
            }
            k0.push(Site::from_slice(s));
        }
        Ok((cfg, k0))
    }
}

#[derive(Debug, Parser)]
#[command(name = "sirlab", version, about = "Long-range SIR epidemic and coupled branching random walks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate replicates of the coupled variants and write trajectories.
    Simulate(SimulateArgs),
    /// Evaluate the drift constant b_d.
    Bd(BdArgs),
    /// Empirical kernel envelopes for the lazy walks.
    Kernels(KernelsArgs),
    /// Mass moments against the super-Brownian oracle.
    Mpcheck(MpcheckArgs),
    /// Convert between N and R.
    Scaling(ScalingArgs),
}

fn parse_count(s: &str) -> Result<u64, String> {
    let x: f64 = s.parse().map_err(|_| format!("not a number: {s}"))?;
    if x < 0.0 || x.fract() != 0.0 || x > 9.0e15 {
        return Err(format!("not a non-negative integer: {s}"));
    }
    Ok(x as u64)
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, CliError> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse().map_err(|_| CliError::Validation(format!("bad list entry: {x}"))))
        .collect()
}

fn parse_variants(s: &str) -> Result<Vec<VariantId>, CliError> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| VariantId::parse(x).ok_or_else(|| CliError::Validation(format!("unknown variant: {x}"))))
        .collect()
}

fn parse_init_mode(s: &str) -> Result<InitMode, CliError> {
    match s {
        "box" => Ok(InitMode::Box),
        "origin" => Ok(InitMode::Origin),
        _ => Err(CliError::Validation(format!("unknown init mode: {s}"))),
    }
}

fn parse_sites(s: &str) -> Result<Vec<Vec<i32>>, CliError> {
    s.split(';').map(str::trim).filter(|x| !x.is_empty()).map(parse_list).collect()
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Read the whole configuration from a run_config.json.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub d: usize,
    #[arg(long = "N", default_value_t = 100)]
    pub n: u64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub theta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub t_max: f64,
    #[arg(long = "x0", default_value_t = 1.0)]
    pub x0_mass: f64,
    /// `box` or `origin`.
    #[arg(long, default_value = "box")]
    pub init_mode: String,
    /// Recovered sites, e.g. `1,0,0,0,0;0,2,0,0,0`.
    #[arg(long = "k0", default_value = "", allow_hyphen_values = true)]
    pub k0: String,
    #[arg(long, default_value = "BRW0,SIR,LOWER1,UPPER2")]
    pub variants: String,
    #[arg(long, default_value = "")]
    pub snapshot_times: String,
    #[arg(long, default_value = "1", value_parser = parse_count)]
    pub replicates: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_EVENT_CAP, value_parser = parse_count)]
    pub event_cap: u64,
    /// Overrides the directory stored in `--config`; defaults to `sirlab-out`.
    #[arg(long, env = ENV_OUTPUT_DIR)]
    pub output_dir: Option<PathBuf>,
}

impl SimulateArgs {
    pub fn to_run_config(&self) -> Result<RunConfig, CliError> {
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)?;
            let mut cfg: RunConfig =
                serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            if let Some(dir) = &self.output_dir {
                cfg.output_dir = dir.clone();
            }
            return Ok(cfg);
        }
        Ok(RunConfig {
            d: self.d,
            n: self.n,
            theta: self.theta,
            t_max: self.t_max,
            x0_mass: self.x0_mass,
            init_mode: parse_init_mode(&self.init_mode)?,
            k0: parse_sites(&self.k0)?,
            variants: parse_variants(&self.variants)?,
            snapshot_times: parse_list(&self.snapshot_times)?,
            replicates: self.replicates,
            seed: self.seed,
            event_cap: self.event_cap,
            output_dir: self.output_dir.clone().unwrap_or_else(|| PathBuf::from("sirlab-out")),
        })
    }
}

#[derive(Debug, Args)]
pub struct BdArgs {
    #[arg(long)]
    pub d: usize,
    /// `value`, `series`, `mc` or `tau`.
    #[arg(long, default_value = "value")]
    pub mode: String,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value = "1e6", value_parser = parse_count)]
    pub samples: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scale for `tau` mode.
    #[arg(long = "N", default_value_t = 400)]
    pub n: u64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub theta: f64,
    /// Cutoff time for `tau` mode; defaults to the standard cutoff.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, default_value = "10000", value_parser = parse_count)]
    pub replicates: u64,
    #[arg(long, env = ENV_OUTPUT_DIR)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct KernelsArgs {
    #[arg(long, default_value_t = 4)]
    pub d: usize,
    /// Use the lattice walk at this scale; the continuum walk when absent.
    #[arg(long = "N")]
    pub n: Option<u64>,
    /// `envelope`, `clt` or `tail`.
    #[arg(long, default_value = "envelope")]
    pub mode: String,
    #[arg(long, default_value = "4,16,64")]
    pub n_grid: String,
    /// Point `x` for `clt` mode; the origin when empty.
    #[arg(long, default_value = "", allow_hyphen_values = true)]
    pub x: String,
    /// Threshold for `tail` mode.
    #[arg(long, default_value_t = 30.0)]
    pub z: f64,
    #[arg(long, default_value = "100000", value_parser = parse_count)]
    pub samples: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, env = ENV_OUTPUT_DIR, default_value = "sirlab-out")]
    pub output_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct MpcheckArgs {
    #[arg(long, default_value_t = 5)]
    pub d: usize,
    #[arg(long = "N", default_value_t = 100)]
    pub n: u64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub theta: f64,
    #[arg(long = "x0", default_value_t = 1.0)]
    pub x0_mass: f64,
    #[arg(long, default_value = "box")]
    pub init_mode: String,
    #[arg(long, default_value = "0.25,0.5,1")]
    pub times: String,
    #[arg(long, default_value = "LOWER1")]
    pub variants: String,
    /// `auto`, `limit` or `brw`. `auto` uses the exact branching-walk law for BRW0.
    #[arg(long, default_value = "auto")]
    pub oracle: String,
    #[arg(long, default_value = "100", value_parser = parse_count)]
    pub replicates: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_EVENT_CAP, value_parser = parse_count)]
    pub event_cap: u64,
    #[arg(long, env = ENV_OUTPUT_DIR, default_value = "sirlab-out")]
    pub output_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScalingArgs {
    #[arg(long)]
    pub d: usize,
    #[arg(long = "R", conflicts_with = "n")]
    pub r: Option<u64>,
    #[arg(long = "N")]
    pub n: Option<f64>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_file(dir: &Path, name: &str, contents: &[u8]) -> Result<(), CliError> {
    fs::write(dir.join(name), contents).map_err(|e| CliError::Io(format!("{}: {e}", dir.join(name).display())))
}

fn to_pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn number(x: f64) -> Value {
    if x.fract() == 0.0 && x.abs() < 9.0e15 {
        json!(x as i64)
    } else {
        json!(x)
    }
}

struct ReplicateOutput {
    trajectories: String,
    snapshots: String,
    mass_t_max: Vec<f64>,
    blocked: Vec<u64>,
    probe_hits: Vec<u64>,
    events: usize,
    checks: u64,
    violations: u64,
}

/// Runs `simulate`: writes `run_config.json`, `trajectories.csv`,
/// `snapshots.csv`, `summary.json` and `timing.json`, returning the summary.
pub fn run_simulate(rc: &RunConfig) -> Result<Value, CliError> {
    let (cfg, k0) = rc.validate()?;
    let start = Instant::now();
    let variants = engine::implied_variants(&rc.variants);
    let d = cfg.d();
    let outputs = stats::par_replicates(rc.replicates, |r| -> Result<ReplicateOutput, CliError> {
        let mut rng = stream(rc.seed, r, purpose::INITIAL_SITES);
        let init = stats::initial_sites(&cfg, rc.x0_mass, rc.init_mode, &mut rng)?;
        let log = generate_with(
            &cfg,
            &init,
            rc.t_max,
            derive_seed(rc.seed, r, purpose::GENEALOGY),
            GenerateOptions { event_cap: rc.event_cap },
        )?;
        let run = engine::run_coupled(&log, &variants, &k0, &rc.snapshot_times)?;
        let mut out = ReplicateOutput {
            trajectories: String::new(),
            snapshots: String::new(),
            mass_t_max: Vec::new(),
            blocked: Vec::new(),
            probe_hits: Vec::new(),
            events: log.events.len(),
            checks: run.audit.checks,
            violations: run.audit.violations,
        };
        for traj in run.trajectories.values() {
            engine::write_trajectory_rows(&mut out.trajectories, r, traj);
            engine::write_snapshot_rows(&mut out.snapshots, r, d, traj);
            let last = traj.points.last().expect("initial point");
            out.mass_t_max.push(traj.mass_at(rc.t_max)?);
            out.blocked.push(last.blocked);
            out.probe_hits.push(last.probe_hits);
        }
        Ok(out)
    })?;

    let mut traj_csv = String::from(engine::TRAJECTORY_HEADER);
    traj_csv.push('\n');
    let mut snap_csv = engine::snapshot_header(d);
    snap_csv.push('\n');
    for o in &outputs {
        traj_csv.push_str(&o.trajectories);
        snap_csv.push_str(&o.snapshots);
    }

    let sorted: Vec<VariantId> = {
        let mut v = variants.clone();
        v.sort();
        v
    };
    let mut per_variant = serde_json::Map::new();
    for (i, v) in sorted.iter().enumerate() {
        let masses: Vec<f64> = outputs.iter().map(|o| o.mass_t_max[i]).collect();
        let m = stats::sample_moments(&masses);
        per_variant.insert(
            v.name().to_string(),
            json!({
                "mass_mean_t_max": m.mean,
                "mass_se_t_max": if outputs.len() > 1 { json!(m.mean_se) } else { Value::Null },
                "collisions_total": outputs.iter().map(|o| o.blocked[i]).sum::<u64>(),
                "probe_hits_total": outputs.iter().map(|o| o.probe_hits[i]).sum::<u64>(),
                "extinct_fraction": masses.iter().filter(|&&x| x == 0.0).count() as f64 / masses.len() as f64,
            }),
        );
    }
    let summary = json!({
        "config": cfg.echo(),
        "t_max": rc.t_max,
        "x0_mass": rc.x0_mass,
        "replicates": rc.replicates,
        "seed": rc.seed,
        "variants": per_variant,
        "audit": {
            "checks": outputs.iter().map(|o| o.checks).sum::<u64>(),
            "violations": outputs.iter().map(|o| o.violations).sum::<u64>(),
        },
        "events_total": outputs.iter().map(|o| o.events as u64).sum::<u64>(),
        "checksums": {
            "trajectories.csv": sha256_hex(traj_csv.as_bytes()),
            "snapshots.csv": sha256_hex(snap_csv.as_bytes()),
        },
    });
    let timing = json!({ "wall_seconds": start.elapsed().as_secs_f64() });

    let dir = &rc.output_dir;
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    write_file(dir, "run_config.json", to_pretty(&serde_json::to_value(rc).expect("serializable")).as_bytes())?;
    write_file(dir, "trajectories.csv", traj_csv.as_bytes())?;
    write_file(dir, "snapshots.csv", snap_csv.as_bytes())?;
    write_file(dir, "summary.json", to_pretty(&summary).as_bytes())?;
    write_file(dir, "timing.json", to_pretty(&timing).as_bytes())?;
    Ok(summary)
}

pub fn run_bd(a: &BdArgs) -> Result<Value, CliError> {
    let out = match a.mode.as_str() {
        "value" => json!({
            "config": { "d": a.d, "mode": "value" },
            "value": bdconst::bd_value(a.d)?,
        }),
        "series" => {
            let s = bdconst::bd_series(a.d, a.tol)?;
            json!({
                "config": { "d": a.d, "mode": "series", "tol": a.tol },
                "value": s.value,
                "tail_bound": s.tail_bound,
                "lower": s.lower,
                "upper": s.upper,
                "partial_sum": s.partial_sum,
                "terms": s.terms,
            })
        }
        "mc" => {
            let m = bdconst::bd_mc(a.d, a.samples, a.seed)?;
            json!({
                "config": { "d": a.d, "mode": "mc", "samples": a.samples, "seed": a.seed },
                "value": m.estimate,
                "se": m.se,
                "head": m.head,
                "tail": m.tail,
            })
        }
        "tau" => {
            let cfg = make_config(a.d, a.n, a.theta)?;
            let tau = a.tau.unwrap_or_else(|| bdconst::default_tau(&cfg));
            let e = bdconst::bd_tau_estimate(&cfg, tau, a.replicates, a.seed)?;
            json!({
                "config": { "lattice": cfg.echo(), "mode": "tau", "tau": tau, "replicates": a.replicates, "seed": a.seed },
                "value": e.ratio,
                "se": e.se,
                "numerator": e.numerator,
                "numerator_se": e.numerator_se,
                "denominator": e.denominator,
                "denominator_se": e.denominator_se,
            })
        }
        other => return Err(CliError::Validation(format!("unknown bd mode: {other}"))),
    };
    if let Some(dir) = &a.output_dir {
        fs::create_dir_all(dir)?;
        write_file(dir, "bd.json", to_pretty(&out).as_bytes())?;
    }
    Ok(out)
}

pub const KERNELS_HEADER: &str = "n,estimate,se,bound,pass";

pub fn run_kernels(a: &KernelsArgs) -> Result<Value, CliError> {
    let step = match a.n {
        Some(n) => LazyWalkStep::Discrete { cfg: make_config(a.d, n, 0.0)? },
        None => {
            crate::lattice::make_config(a.d, 3, 0.0)?;
            LazyWalkStep::Continuum { d: a.d }
        }
    };
    let ns: Vec<u64> = parse_list(&a.n_grid)?;
    let mut rng = seeded(derive_seed(a.seed, 0, purpose::KERNEL));
    let mut csv = format!("{KERNELS_HEADER}\n");
    let mut rows = Vec::new();
    let mut push = |n: u64, est: f64, se: f64, bound: f64, pass: bool| {
        csv.push_str(&format!(
            "{n},{},{},{},{pass}\n",
            crate::genealogy::fmt_float(est),
            crate::genealogy::fmt_float(se),
            crate::genealogy::fmt_float(bound)
        ));
        rows.push(json!({ "n": n, "estimate": est, "se": se, "bound": bound, "pass": pass }));
    };
    match a.mode.as_str() {
        "envelope" => {
            for r in kernels::box_envelope_grid(&step, &ns, a.samples, &mut rng)? {
                let scale = r.scaled / r.estimate.max(f64::MIN_POSITIVE);
                push(r.n, r.scaled, r.se * scale, r.bound, r.pass);
            }
        }
        "clt" => {
            let x: Vec<f64> = if a.x.is_empty() { vec![0.0; a.d] } else { parse_list(&a.x)? };
            for &n in &ns {
                let c = kernels::local_clt_check(&step, n, &x, a.samples, &mut rng)?;
                push(n, c.lhs, c.lhs_se, c.rhs, (0.85..=1.15).contains(&c.ratio));
            }
        }
        "tail" => {
            for &n in &ns {
                let t = kernels::gaussian_tail_check(&step, n, a.z, a.samples, &mut rng)?;
                push(n, t.estimate, t.se, t.bound, t.pass);
            }
        }
        other => return Err(CliError::Validation(format!("unknown kernels mode: {other}"))),
    }
    let out = json!({
        "config": {
            "d": a.d,
            "N": a.n,
            "walk": if a.n.is_some() { "discrete" } else { "continuum" },
            "mode": a.mode,
            "samples": a.samples,
            "seed": a.seed,
            "z": if a.mode == "tail" { json!(a.z) } else { Value::Null },
        },
        "rows": rows,
        "checksums": { "kernels.csv": sha256_hex(csv.as_bytes()) },
    });
    fs::create_dir_all(&a.output_dir)?;
    write_file(&a.output_dir, "kernels.csv", csv.as_bytes())?;
    write_file(&a.output_dir, "kernels.json", to_pretty(&out).as_bytes())?;
    Ok(out)
}

pub fn run_mpcheck(a: &MpcheckArgs) -> Result<Value, CliError> {
    let cfg = make_config(a.d, a.n, a.theta)?;
    let mode = parse_init_mode(&a.init_mode)?;
    let variants = parse_variants(&a.variants)?;
    let times: Vec<f64> = parse_list(&a.times)?;
    if variants.is_empty() || times.is_empty() {
        return Err(CliError::Validation("need at least one variant and one time".into()));
    }
    if times.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
        return Err(CliError::Validation("times must be positive".into()));
    }
    if (a.replicates as usize) < stats::MIN_REPLICATES {
        return Err(StatsError::TooFewReplicates { min: stats::MIN_REPLICATES, got: a.replicates as usize }.into());
    }
    let t_max = times.iter().copied().fold(0.0, f64::max);
    let x0 = (cfg.n_f64() * a.x0_mass).floor() / cfg.n_f64();
    let b_d = bdconst::bd_value(a.d)?;
    let params = |v: VariantId| -> Result<SbmParams, CliError> {
        match (a.oracle.as_str(), v) {
            ("auto", VariantId::Brw0) | ("brw", _) => Ok(SbmParams::branching_walk(&cfg, x0)),
            ("auto", _) | ("limit", _) => Ok(SbmParams::scaling_limit(a.theta, b_d, x0)),
            (other, _) => Err(CliError::Validation(format!("unknown oracle: {other}"))),
        }
    };
    let masses = stats::par_replicates(a.replicates, |r| -> Result<Vec<Vec<f64>>, CliError> {
        let mut rng = stream(a.seed, r, purpose::INITIAL_SITES);
        let init = stats::initial_sites(&cfg, a.x0_mass, mode, &mut rng)?;
        let log = generate_with(
            &cfg,
            &init,
            t_max,
            derive_seed(a.seed, r, purpose::GENEALOGY),
            GenerateOptions { event_cap: a.event_cap },
        )?;
        let run = engine::run_coupled_with(&log, &variants, &[], &[], &engine::EngineOptions { suppression: true, audit: false })?;
        variants
            .iter()
            .map(|&v| Ok(stats::masses_at(run.trajectory(v)?, &times)?))
            .collect()
    })?;
    let mut csv = format!("{}\n", stats::MPCHECK_HEADER);
    let mut reports = serde_json::Map::new();
    for (i, &v) in variants.iter().enumerate() {
        let per_rep: Vec<Vec<f64>> = masses.iter().map(|m| m[i].clone()).collect();
        let p = params(v)?;
        let rows = stats::compare_masses_to_sbm(&per_rep, &times, &p)?;
        stats::write_mpcheck_rows(&mut csv, v, &rows);
        reports.insert(v.name().into(), json!({ "oracle": p, "reports": rows }));
    }
    let out = json!({
        "config": {
            "lattice": cfg.echo(),
            "x0_mass": a.x0_mass,
            "init_mode": mode,
            "times": times,
            "replicates": a.replicates,
            "seed": a.seed,
            "b_d": b_d,
        },
        "variants": reports,
        "checksums": { "mpcheck.csv": sha256_hex(csv.as_bytes()) },
    });
    fs::create_dir_all(&a.output_dir)?;
    write_file(&a.output_dir, "mpcheck.csv", csv.as_bytes())?;
    write_file(&a.output_dir, "mpcheck.json", to_pretty(&out).as_bytes())?;
    Ok(out)
}

pub fn run_scaling(a: &ScalingArgs) -> Result<Value, CliError> {
    match (a.r, a.n) {
        (Some(r), None) => Ok(json!({
            "config": { "d": a.d, "R": r },
            "N": number(scaling_n_of_r(a.d, r)?),
        })),
        (None, Some(n)) => {
            let mut out = json!({
                "config": { "d": a.d, "N": number(n) },
                "R": scaling_r_of_n(a.d, n)?,
            });
            if n.fract() == 0.0 && n >= 3.0 {
                let cfg = make_config(a.d, n as u64, 0.0)?;
                out["M"] = json!(cfg.m());
                out["psi"] = json!(cfg.psi());
                out["psi0"] = json!(cfg.psi0());
            }
            Ok(out)
        }
        _ => Err(CliError::Validation("give exactly one of --R or --N".into())),
    }
}

fn configure_threads() -> Result<(), CliError> {
    if let Ok(s) = std::env::var(ENV_THREADS) {
        let n: usize = s.trim().parse().map_err(|_| CliError::Validation(format!("{ENV_THREADS} must be a positive integer")))?;
        if n == 0 {
            return Err(CliError::Validation(format!("{ENV_THREADS} must be a positive integer")));
        }
        #[cfg(feature = "parallel")]
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok();
    }
    Ok(())
}

pub fn dispatch(cli: &Cli) -> Result<Value, CliError> {
    configure_threads()?;
    match &cli.command {
        Command::Simulate(a) => run_simulate(&a.to_run_config()?),
        Command::Bd(a) => run_bd(a),
        Command::Kernels(a) => run_kernels(a),
        Command::Mpcheck(a) => run_mpcheck(a),
        Command::Scaling(a) => run_scaling(a),
    }
}

/// Parses `args`, runs the command, prints JSON and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            let err = CliError::Validation(e.to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return err.exit_code();
        }
    };
    match dispatch(&cli) {
        Ok(v) => {
            use std::io::Write;
            let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string(&v).expect("serializable"));
            EXIT_OK
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}
