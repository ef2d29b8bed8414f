//! Filters one event log into the four coupled processes.
//!
//! `BRW0` keeps every birth. `SIR` blocks births onto sites it has itself
//! visited. `LOWER1` blocks births onto sites `BRW0` visited, and `UPPER2`
//! blocks births onto sites `LOWER1` visited. Every variant also blocks the
//! initially recovered set `K0`. A blocked child is never born, so its whole
//! subtree is absent from that variant; the continuing particle survives.
//!
//! Forbidden sets are read as they stood strictly before the current event:
//! all admission decisions for an event are made first, then the visited
//! sets are updated.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rustc_hash::FxHashSet;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::genealogy::{fmt_float, EventKind, EventLog, LabelId};
use crate::lattice::{in_neighborhood, Site};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VariantId {
    #[serde(rename = "BRW0")]
    Brw0,
    #[serde(rename = "SIR")]
    Sir,
    #[serde(rename = "LOWER1")]
    Lower1,
    #[serde(rename = "UPPER2")]
    Upper2,
}

impl VariantId {
    pub const ALL: [VariantId; 4] = [VariantId::Brw0, VariantId::Sir, VariantId::Lower1, VariantId::Upper2];

    pub fn name(self) -> &'static str {
        match self {
            VariantId::Brw0 => "BRW0",
            VariantId::Sir => "SIR",
            VariantId::Lower1 => "LOWER1",
            VariantId::Upper2 => "UPPER2",
        }
    }

    pub fn parse(s: &str) -> Option<VariantId> {
        VariantId::ALL.into_iter().find(|v| v.name().eq_ignore_ascii_case(s))
    }

    /// The variant whose visited set is this variant's forbidden set.
    pub fn forbidden_source(self) -> VariantId {
        match self {
            VariantId::Brw0 | VariantId::Lower1 => VariantId::Brw0,
            VariantId::Sir => VariantId::Sir,
            VariantId::Upper2 => VariantId::Lower1,
        }
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

/// Closes a requested variant set under its dependencies and sorts it in sweep order.
pub fn implied_variants(requested: &[VariantId]) -> Vec<VariantId> {
    let mut set = [false; 4];
    for &v in requested {
        set[v as usize] = true;
    }
    if set[VariantId::Upper2 as usize] {
        set[VariantId::Lower1 as usize] = true;
    }
    if set[VariantId::Lower1 as usize] {
        set[VariantId::Brw0 as usize] = true;
    }
    // BRW0, LOWER1, UPPER2 must run in this order; SIR is independent.
    [VariantId::Brw0, VariantId::Lower1, VariantId::Upper2, VariantId::Sir]
        .into_iter()
        .filter(|v| set[*v as usize])
        .collect()
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("no variants requested")]
    NoVariants,
    #[error("snapshot time {t} lies outside [0, {horizon}]")]
    SnapshotOutOfRange { t: f64, horizon: f64 },
    #[error("time {t} lies outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },
    #[error("the initially recovered set overlaps the initial particles at {0:?}")]
    RecoveredOverlapsInitial(Vec<i32>),
    #[error("variant {0} was not part of this run")]
    MissingVariant(&'static str),
    #[error("the collision functional is defined for LOWER1 and UPPER2 only, not {0}")]
    CollisionVariant(&'static str),
}

/// Cumulative counters of one variant right after an event that touched it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathPoint {
    pub time: f64,
    pub alive: u64,
    pub visited: u64,
    /// Births blocked by the forbidden set. For `BRW0` nothing is blocked and
    /// this counts births landing on its own visited set instead.
    pub blocked: u64,
    /// Events (birth or death) of live lineages whose probe target
    /// `B^β + W^β` lay in the forbidden set.
    pub probe_hits: u64,
    /// Birth events of live lineages.
    pub births: u64,
    /// Death events of live lineages.
    pub deaths: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasureSnapshot {
    pub time: f64,
    pub variant: VariantId,
    pub atoms: Vec<(Site, u32)>,
    pub mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantTrajectory {
    pub variant: VariantId,
    pub n: u64,
    pub eps_n: f64,
    pub birth_probability: f64,
    pub horizon: f64,
    pub points: Vec<PathPoint>,
    pub snapshots: Vec<MeasureSnapshot>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub checks: u64,
    pub violations: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoupledRun {
    pub trajectories: BTreeMap<VariantId, VariantTrajectory>,
    pub audit: AuditReport,
    /// Per arena label, the variants in which that label was ever alive.
    pub membership: Vec<u8>,
}

impl CoupledRun {
    pub fn was_alive(&self, label: LabelId, variant: VariantId) -> bool {
        self.membership[label as usize] & variant.bit() != 0
    }

    pub fn trajectory(&self, variant: VariantId) -> Result<&VariantTrajectory, EngineError> {
        self.trajectories.get(&variant).ok_or(EngineError::MissingVariant(variant.name()))
    }
}

#[derive(Clone, Debug)]
pub struct EngineOptions {
    /// When false every variant admits every birth and ignores `K0`.
    pub suppression: bool,
    /// Check alive-set and visited-set inclusions after every event.
    pub audit: bool,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions {
            suppression: true,
            audit: true,
        }
    }
}

struct VariantState {
    id: VariantId,
    visited: FxHashSet<Site>,
    point: PathPoint,
    points: Vec<PathPoint>,
    snapshots: Vec<MeasureSnapshot>,
    /// Occupied sites, tracked under audit for the single-occupancy variants.
    occupied: Option<FxHashSet<Site>>,
}

pub fn run_coupled(
    log: &EventLog,
    variants: &[VariantId],
    k0: &[Site],
    snapshot_times: &[f64],
) -> Result<CoupledRun, EngineError> {
    run_coupled_with(log, variants, k0, snapshot_times, &EngineOptions::default())
}

pub fn run_coupled_with(
    log: &EventLog,
    variants: &[VariantId],
    k0: &[Site],
    snapshot_times: &[f64],
    opts: &EngineOptions,
) -> Result<CoupledRun, EngineError> {
    if variants.is_empty() {
        return Err(EngineError::NoVariants);
    }
    for &t in snapshot_times {
        if !(0.0..=log.horizon).contains(&t) {
            return Err(EngineError::SnapshotOutOfRange { t, horizon: log.horizon });
        }
    }
    let d = log.config.d();
    let k0: FxHashSet<Site> = if opts.suppression { k0.iter().copied().collect() } else { FxHashSet::default() };
    for (s, _) in &log.initial_sites {
        if k0.contains(s) {
            return Err(EngineError::RecoveredOverlapsInitial(s.coords(d).to_vec()));
        }
    }
    let order = implied_variants(variants);
    let mut snaps: Vec<f64> = snapshot_times.to_vec();
    snaps.sort_by(f64::total_cmp);
    snaps.dedup();

    let n_initial = log.initial_sites.len() as u64;
    let initial_visited: FxHashSet<Site> = log.initial_sites.iter().map(|(s, _)| *s).collect();
    let mut states: Vec<VariantState> = order
        .iter()
        .map(|&id| {
            let point = PathPoint {
                time: 0.0,
                alive: n_initial,
                visited: initial_visited.len() as u64,
                blocked: 0,
                probe_hits: 0,
                births: 0,
                deaths: 0,
            };
            VariantState {
                id,
                visited: initial_visited.clone(),
                point,
                points: vec![point],
                snapshots: Vec::new(),
                occupied: (opts.audit
                    && matches!(id, VariantId::Sir | VariantId::Lower1)
                    && initial_visited.len() as u64 == n_initial)
                    .then(|| initial_visited.clone()),
            }
        })
        .collect();
    let slot = |v: VariantId| order.iter().position(|&o| o == v);
    let source_slot: Vec<usize> = order.iter().map(|v| slot(v.forbidden_source()).expect("closed set")).collect();
    let all_bits: u8 = order.iter().fold(0, |acc, v| acc | v.bit());

    let mut alive: Vec<u8> = vec![0; log.nodes.len()];
    for id in 0..log.initial_sites.len() {
        alive[id] = all_bits;
    }
    let mut membership = alive.clone();

    let mut audit = AuditReport::default();
    let mut next_snap = 0;
    let mut decisions: [(bool, bool, bool); 4] = [(false, false, false); 4];

    for ev in &log.events {
        while next_snap < snaps.len() && snaps[next_snap] < ev.time {
            take_snapshots(log, &alive, &mut states, snaps[next_snap]);
            next_snap += 1;
        }
        let beta = ev.label as usize;
        let mask = alive[beta];
        if mask == 0 {
            continue;
        }
        let site = log.nodes[beta].site;
        let target = site.offset(&ev.displacement);
        let is_birth = ev.kind == EventKind::Birth;

        // Decide against the visited sets as they stood before this event.
        for (i, st) in states.iter().enumerate() {
            let live = mask & st.id.bit() != 0;
            if !live {
                decisions[i] = (false, false, false);
                continue;
            }
            let hit = states[source_slot[i]].visited.contains(&target) || k0.contains(&target);
            let admit = is_birth && (!opts.suppression || st.id == VariantId::Brw0 || !hit);
            decisions[i] = (true, hit, admit);
        }

        let mut new_mask_child = 0u8;
        let mut new_mask_cont = 0u8;
        for (i, st) in states.iter_mut().enumerate() {
            let (live, hit, admit) = decisions[i];
            if !live {
                continue;
            }
            let p = &mut st.point;
            p.time = ev.time;
            if hit {
                p.probe_hits += 1;
            }
            if is_birth {
                p.births += 1;
                new_mask_cont |= st.id.bit();
                if admit {
                    new_mask_child |= st.id.bit();
                    p.alive += 1;
                    if let Some(occ) = st.occupied.as_mut() {
                        audit.checks += 1;
                        if !occ.insert(target) {
                            audit.violations += 1;
                        }
                    }
                    if st.visited.insert(target) {
                        p.visited += 1;
                    }
                    if st.id == VariantId::Brw0 && hit {
                        p.blocked += 1;
                    }
                } else {
                    p.blocked += 1;
                }
            } else {
                p.deaths += 1;
                p.alive -= 1;
                if let Some(occ) = st.occupied.as_mut() {
                    audit.checks += 1;
                    if !occ.remove(&site) {
                        audit.violations += 1;
                    }
                }
            }
            st.points.push(*p);
        }
        alive[beta] = 0;
        if let Some((child, cont)) = ev.successors {
            alive[child as usize] = new_mask_child;
            alive[cont as usize] = new_mask_cont;
            membership[child as usize] = new_mask_child;
            membership[cont as usize] = new_mask_cont;
            if opts.audit {
                audit.checks += 1;
                if !nested(new_mask_child, all_bits) || !nested(new_mask_cont, all_bits) || !visited_nested(&states, &target)
                    || !in_neighborhood(&log.config, &ev.displacement)
                {
                    audit.violations += 1;
                }
            }
        }
        if opts.audit {
            audit.checks += 1;
            if !counts_nested(&states) {
                audit.violations += 1;
            }
        }
    }
    while next_snap < snaps.len() {
        take_snapshots(log, &alive, &mut states, snaps[next_snap]);
        next_snap += 1;
    }

    if opts.audit {
        // The final alive sets must match a recount from scratch.
        for st in &states {
            audit.checks += 1;
            let recount = alive.iter().filter(|&&m| m & st.id.bit() != 0).count() as u64;
            if recount != st.point.alive || st.visited.len() as u64 != st.point.visited {
                audit.violations += 1;
            }
        }
    }

    let cfg = &log.config;
    let trajectories = states
        .into_iter()
        .map(|st| {
            (
                st.id,
                VariantTrajectory {
                    variant: st.id,
                    n: cfg.n(),
                    eps_n: cfg.eps_n(),
                    birth_probability: cfg.birth_probability(),
                    horizon: log.horizon,
                    points: st.points,
                    snapshots: st.snapshots,
                },
            )
        })
        .collect();
    Ok(CoupledRun { trajectories, audit, membership })
}

const CHAIN: [VariantId; 4] = [VariantId::Lower1, VariantId::Sir, VariantId::Upper2, VariantId::Brw0];

/// `LOWER1 ⊆ SIR ⊆ UPPER2 ⊆ BRW0` for one label's membership mask,
/// restricted to the variants present in the run.
fn nested(mask: u8, present: u8) -> bool {
    let chain: Vec<bool> = CHAIN
        .iter()
        .filter(|v| present & v.bit() != 0)
        .map(|v| mask & v.bit() != 0)
        .collect();
    chain.windows(2).all(|w| !w[0] || w[1])
}

fn visited_nested(states: &[VariantState], site: &Site) -> bool {
    let has = |v: VariantId| states.iter().find(|s| s.id == v).map(|s| s.visited.contains(site));
    let present: Vec<bool> = CHAIN.iter().filter_map(|&v| has(v)).collect();
    present.windows(2).all(|w| !w[0] || w[1])
}

fn counts_nested(states: &[VariantState]) -> bool {
    let get = |v: VariantId| states.iter().find(|s| s.id == v).map(|s| s.point.alive);
    let chain: Vec<u64> = CHAIN
        .iter()
        .filter_map(|&v| get(v))
        .collect();
    chain.windows(2).all(|w| w[0] <= w[1])
}

fn take_snapshots(log: &EventLog, alive: &[u8], states: &mut [VariantState], t: f64) {
    let n = log.config.n_f64();
    for st in states.iter_mut() {
        let mut atoms: BTreeMap<Site, u32> = BTreeMap::new();
        for (id, &m) in alive.iter().enumerate() {
            if m & st.id.bit() != 0 {
                *atoms.entry(log.nodes[id].site).or_insert(0) += 1;
            }
        }
        let total: u64 = atoms.values().map(|&c| c as u64).sum();
        st.snapshots.push(MeasureSnapshot {
            time: t,
            variant: st.id,
            atoms: atoms.into_iter().collect(),
            mass: total as f64 / n,
        });
    }
}

impl VariantTrajectory {
    /// Counters in force at time `t` (the last update at or before `t`).
    pub fn point_at(&self, t: f64) -> Result<&PathPoint, EngineError> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(EngineError::TimeOutOfRange { t, horizon: self.horizon });
        }
        let idx = self.points.partition_point(|p| p.time <= t);
        Ok(&self.points[idx.max(1) - 1])
    }

    /// `X_t(1)`.
    pub fn mass_at(&self, t: f64) -> Result<f64, EngineError> {
        Ok(self.point_at(t)?.alive as f64 / self.n as f64)
    }

    /// The piecewise-constant mass path as `(time, mass)` change points.
    pub fn mass_path(&self) -> Vec<(f64, f64)> {
        let n = self.n as f64;
        self.points.iter().map(|p| (p.time, p.alive as f64 / n)).collect()
    }
}

/// `∫₀ᵗ X_r(1) dr`, exact for the piecewise-constant path.
pub fn mass_integral(traj: &VariantTrajectory, t: f64) -> Result<f64, EngineError> {
    if !(0.0..=traj.horizon).contains(&t) {
        return Err(EngineError::TimeOutOfRange { t, horizon: traj.horizon });
    }
    let mut acc = 0.0;
    for (i, p) in traj.points.iter().enumerate() {
        if p.time >= t {
            break;
        }
        let end = traj.points.get(i + 1).map_or(t, |q| q.time.min(t));
        acc += p.alive as f64 * (end - p.time);
    }
    Ok(acc / traj.n as f64)
}

/// `K_t^n(1) = ((N+θ)/(2N+θ))·(1/N)·#{events of live lineages probing a forbidden site}`.
pub fn collision_functional(traj: &VariantTrajectory, t: f64) -> Result<f64, EngineError> {
    match traj.variant {
        VariantId::Lower1 | VariantId::Upper2 => {}
        v => return Err(EngineError::CollisionVariant(v.name())),
    }
    let p = traj.point_at(t)?;
    Ok(traj.birth_probability * p.probe_hits as f64 / traj.n as f64)
}

/// `(1/N)·#{BRW0 events probing a BRW0-visited site}`, which dominates `K_t^n(1)`.
pub fn brw_collision_bound(brw0: &VariantTrajectory, t: f64) -> Result<f64, EngineError> {
    if brw0.variant != VariantId::Brw0 {
        return Err(EngineError::MissingVariant("BRW0"));
    }
    Ok(brw0.point_at(t)?.probe_hits as f64 / brw0.n as f64)
}

/// `M_t^n(1) = (1/N)·Σ (δ_β − ε_N)` over events of lineages alive in the variant.
pub fn martingale_increment_sum(traj: &VariantTrajectory, t: f64) -> Result<f64, EngineError> {
    let p = traj.point_at(t)?;
    let (b, dth) = (p.births as f64, p.deaths as f64);
    Ok((b - dth - traj.eps_n * (b + dth)) / traj.n as f64)
}

/// Trajectory CSV header.
pub const TRAJECTORY_HEADER: &str = "replicate,variant,time,alive_count,visited_count,collisions";

/// Appends trajectory rows for one replicate.
pub fn write_trajectory_rows(out: &mut String, replicate: u64, traj: &VariantTrajectory) {
    for p in &traj.points {
        let _ = writeln!(
            out,
            "{replicate},{},{},{},{},{}",
            traj.variant.name(),
            fmt_float(p.time),
            p.alive,
            p.visited,
            p.blocked
        );
    }
}

pub fn snapshot_header(d: usize) -> String {
    let mut h = String::from("replicate,variant,time");
    for i in 1..=d {
        let _ = write!(h, ",site_{i}");
    }
    h.push_str(",count");
    h
}

pub fn write_snapshot_rows(out: &mut String, replicate: u64, d: usize, traj: &VariantTrajectory) {
    for s in &traj.snapshots {
        for (site, count) in &s.atoms {
            let _ = write!(out, "{replicate},{},{}", traj.variant.name(), fmt_float(s.time));
            for c in site.coords(d) {
                let _ = write!(out, ",{c}");
            }
            let _ = writeln!(out, ",{count}");
        }
    }
}
