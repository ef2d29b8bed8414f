//! Moment oracles for the super-Brownian limit and estimators over replicates.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{run_coupled_with, CoupledRun, EngineError, EngineOptions, MeasureSnapshot, VariantId, VariantTrajectory};
use crate::genealogy::{fmt_float, generate_with, GenealogyError, GenerateOptions};
use crate::lattice::{LatticeConfig, Site};
use crate::rng::{derive_seed, purpose, seeded};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("need at least {min} replicates, got {got}")]
    TooFewReplicates { min: usize, got: usize },
    #[error("every replicate is extinct at t = {0}")]
    AllExtinct(f64),
    #[error("time {0} is below the minimum 0.1 for the spread estimator")]
    TimeTooSmall(f64),
    #[error("initial mass {0} gives no particles")]
    NoParticles(f64),
    #[error("initial mass {x0} needs {need} distinct sites but the box holds {have}")]
    BoxTooSmall { x0: f64, need: u64, have: u64 },
    #[error("all configurations in a gap experiment must share d and theta")]
    MixedGrid,
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Genealogy(#[from] GenealogyError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SbmParams {
    pub gamma0: f64,
    pub sigma0_sq: f64,
    pub theta0: f64,
    pub x0_mass: f64,
}

impl SbmParams {
    /// The limit `(γ₀, σ₀², θ₀) = (2, 1/3, θ - b_d)`.
    pub fn scaling_limit(theta: f64, b_d: f64, x0_mass: f64) -> SbmParams {
        SbmParams { gamma0: 2.0, sigma0_sq: 1.0 / 3.0, theta0: theta - b_d, x0_mass }
    }

    /// Exact total-mass law of the branching random walk: `γ = 2 + θ/N`, drift `θ`.
    pub fn branching_walk(cfg: &LatticeConfig, x0_mass: f64) -> SbmParams {
        SbmParams {
            gamma0: 2.0 + cfg.theta() / cfg.n_f64(),
            sigma0_sq: 1.0 / 3.0,
            theta0: cfg.theta(),
            x0_mass,
        }
    }
}

/// First and second moments of the total mass at time `t`.
pub fn sbm_mass_moments(p: &SbmParams, t: f64) -> (f64, f64) {
    let x0 = p.x0_mass;
    let m1 = x0 * (p.theta0 * t).exp();
    let m2 = if p.theta0.abs() < 1e-8 {
        x0 * x0 + p.gamma0 * x0 * t
    } else {
        let e2 = (2.0 * p.theta0 * t).exp();
        x0 * x0 * e2 - p.gamma0 * x0 * e2 * (-p.theta0 * t).exp_m1() / p.theta0
    };
    (m1, m2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EulerMoments {
    pub mean: f64,
    pub mean_se: f64,
    pub second: f64,
    pub second_se: f64,
}

/// Euler–Maruyama for `dZ = θ₀ Z dt + √(γ₀ Z) dW`, absorbed at 0.
pub fn sbm_mass_euler(p: &SbmParams, t: f64, steps: usize, paths: usize, seed: u64) -> EulerMoments {
    let dt = t / steps as f64;
    let sq = dt.sqrt();
    let mut rng = seeded(derive_seed(seed, 0, purpose::SBM_ORACLE));
    let (mut s1, mut s2, mut s4) = (0.0, 0.0, 0.0);
    for _ in 0..paths {
        let mut z = p.x0_mass;
        for _ in 0..steps {
            if z <= 0.0 {
                z = 0.0;
                break;
            }
            let xi: f64 = StandardNormal.sample(&mut rng);
            z = (z + p.theta0 * z * dt + (p.gamma0 * z).sqrt() * sq * xi).max(0.0);
        }
        s1 += z;
        s2 += z * z;
        s4 += z * z * z * z;
    }
    let n = paths as f64;
    let (m1, m2) = (s1 / n, s2 / n);
    EulerMoments {
        mean: m1,
        mean_se: ((m2 - m1 * m1).max(0.0) / n).sqrt(),
        second: m2,
        second_se: ((s4 / n - m2 * m2).max(0.0) / n).sqrt(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub time: f64,
    pub empirical_mean: f64,
    pub empirical_var: f64,
    pub oracle_mean: f64,
    pub oracle_var: f64,
    pub n_replicates: usize,
    /// `(z_mean, z_var)` with replicate-level standard errors.
    pub z_scores: (f64, f64),
}

/// Mean, unbiased variance, and standard errors of both.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMoments {
    pub n: usize,
    pub mean: f64,
    pub var: f64,
    pub mean_se: f64,
    pub var_se: f64,
}

pub fn sample_moments(xs: &[f64]) -> SampleMoments {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    let var = m2 * n / (n - 1.0).max(1.0);
    SampleMoments {
        n: xs.len(),
        mean,
        var,
        mean_se: (var / n).sqrt(),
        var_se: ((m4 - m2 * m2).max(0.0) / n).sqrt(),
    }
}

pub fn moment_report(samples: &[f64], time: f64, oracle_mean: f64, oracle_var: f64) -> MomentReport {
    let m = sample_moments(samples);
    let z = |diff: f64, se: f64| if se > 0.0 { diff / se } else if diff == 0.0 { 0.0 } else { f64::INFINITY };
    MomentReport {
        time,
        empirical_mean: m.mean,
        empirical_var: m.var,
        oracle_mean,
        oracle_var,
        n_replicates: m.n,
        z_scores: (z(m.mean - oracle_mean, m.mean_se), z(m.var - oracle_var, m.var_se)),
    }
}

pub const MIN_REPLICATES: usize = 100;

/// Empirical `X_t(1)` moments of one variant against the oracle at each time.
pub fn compare_mass_to_sbm(
    runs: &[CoupledRun],
    variant: VariantId,
    times: &[f64],
    p: &SbmParams,
) -> Result<Vec<MomentReport>, StatsError> {
    if runs.len() < MIN_REPLICATES {
        return Err(StatsError::TooFewReplicates { min: MIN_REPLICATES, got: runs.len() });
    }
    let masses: Vec<Vec<f64>> = runs
        .iter()
        .map(|r| masses_at(r.trajectory(variant)?, times))
        .collect::<Result<_, StatsError>>()?;
    compare_masses_to_sbm(&masses, times, p)
}

/// `X_t(1)` at each of `times`.
pub fn masses_at(traj: &VariantTrajectory, times: &[f64]) -> Result<Vec<f64>, StatsError> {
    Ok(times.iter().map(|&t| traj.mass_at(t)).collect::<Result<_, _>>()?)
}

/// As [`compare_mass_to_sbm`], from per-replicate masses already sampled at `times`.
pub fn compare_masses_to_sbm(masses: &[Vec<f64>], times: &[f64], p: &SbmParams) -> Result<Vec<MomentReport>, StatsError> {
    if masses.len() < MIN_REPLICATES {
        return Err(StatsError::TooFewReplicates { min: MIN_REPLICATES, got: masses.len() });
    }
    Ok(times
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let xs: Vec<f64> = masses.iter().map(|m| m[i]).collect();
            let (m1, m2) = sbm_mass_moments(p, t);
            moment_report(&xs, t, m1, m2 - m1 * m1)
        })
        .collect())
}

/// Maps `f` over replicate ids `0..n`, in parallel when enabled, keeping id order.
pub fn par_replicates<T, E, F>(n: u64, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(u64) -> Result<T, E> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

pub const MPCHECK_HEADER: &str = "variant,time,n_rep,emp_mean,emp_var,oracle_mean,oracle_var,z_mean,z_var";

pub fn write_mpcheck_rows(out: &mut String, variant: VariantId, reports: &[MomentReport]) {
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            variant.name(),
            fmt_float(r.time),
            r.n_replicates,
            fmt_float(r.empirical_mean),
            fmt_float(r.empirical_var),
            fmt_float(r.oracle_mean),
            fmt_float(r.oracle_var),
            fmt_float(r.z_scores.0),
            fmt_float(r.z_scores.1)
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpreadEstimate {
    pub sigma_sq_hat: f64,
    pub se: f64,
    pub replicates_used: usize,
}

/// Per-coordinate spread rate of the empirical measure about `origin`:
/// `Σ_r Σ_atoms count·|x - origin|² / (d · t · Σ_r mass_r)`, in physical units.
///
/// A ratio of totals over replicates, so it estimates the ratio of
/// expectations without conditioning on survival.
pub fn diffusion_coefficient_estimate(
    snapshots: &[&MeasureSnapshot],
    cfg: &LatticeConfig,
    origin: &Site,
    t: f64,
) -> Result<SpreadEstimate, StatsError> {
    if t < 0.1 {
        return Err(StatsError::TimeTooSmall(t));
    }
    let d = cfg.d();
    let a2 = cfg.spacing() * cfg.spacing();
    let mut pairs = Vec::with_capacity(snapshots.len());
    for s in snapshots {
        let mut num = 0.0;
        let mut den = 0.0;
        for (site, count) in &s.atoms {
            let diff = site.diff(origin);
            let r2: f64 = diff.coords(d).iter().map(|&c| (c as f64).powi(2)).sum();
            num += *count as f64 * r2 * a2 / d as f64;
            den += *count as f64;
        }
        pairs.push((num, den));
    }
    if pairs.iter().all(|p| p.1 == 0.0) {
        return Err(StatsError::AllExtinct(t));
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let ratio = mx / my;
    let resid = pairs.iter().map(|p| (p.0 - ratio * p.1).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(SpreadEstimate {
        sigma_sq_hat: ratio / t,
        se: (resid / n).sqrt() / my / t,
        replicates_used: pairs.iter().filter(|p| p.1 > 0.0).count(),
    })
}

/// Exact finite-N spread rate `(N+θ) E[(W¹)²]` in physical units.
pub fn exact_spread_rate(cfg: &LatticeConfig) -> f64 {
    (cfg.n_f64() + cfg.theta()) * cfg.step_second_moment() * cfg.spacing() * cfg.spacing()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// `⌊N x0⌋` distinct uniform sites in a box of physical side 1.
    Box,
    /// `⌊N x0⌋` particles on the origin.
    Origin,
}

/// Initial particle sites for total mass `x0_mass`.
pub fn initial_sites<R: Rng + ?Sized>(
    cfg: &LatticeConfig,
    x0_mass: f64,
    mode: InitMode,
    rng: &mut R,
) -> Result<Vec<Site>, StatsError> {
    let count = (cfg.n_f64() * x0_mass).floor();
    if !(count >= 1.0) {
        return Err(StatsError::NoParticles(x0_mass));
    }
    let count = count as u64;
    match mode {
        InitMode::Origin => Ok(vec![Site::ORIGIN; count as usize]),
        InitMode::Box => {
            let side = (1.0 / cfg.spacing()).round().max(1.0) as i64;
            let have = (side as u64).saturating_pow(cfg.d() as u32);
            if have < 2 * count {
                return Err(StatsError::BoxTooSmall { x0: x0_mass, need: count, have });
            }
            let half = side / 2;
            let mut seen = rustc_hash::FxHashSet::default();
            let mut out = Vec::with_capacity(count as usize);
            while (out.len() as u64) < count {
                let mut s = [0i32; crate::lattice::MAX_DIM];
                for c in s.iter_mut().take(cfg.d()) {
                    *c = (rng.random_range(0..side) - half) as i32;
                }
                let site = Site(s);
                if seen.insert(site) {
                    out.push(site);
                }
            }
            Ok(out)
        }
    }
}

/// `sup_{t<=T} |X_t^2(1) - X_t^1(1)|` over the merged step paths.
pub fn sup_gap(upper: &VariantTrajectory, lower: &VariantTrajectory, t_max: f64) -> f64 {
    let (a, b) = (&upper.points, &lower.points);
    let (mut i, mut j) = (0usize, 0usize);
    let mut best: u64 = a[0].alive.abs_diff(b[0].alive);
    loop {
        let ta = a.get(i + 1).map_or(f64::INFINITY, |p| p.time);
        let tb = b.get(j + 1).map_or(f64::INFINITY, |p| p.time);
        let next = ta.min(tb);
        if next > t_max || next.is_infinite() {
            break;
        }
        if ta == next {
            i += 1;
        }
        if tb == next {
            j += 1;
        }
        best = best.max(a[i].alive.abs_diff(b[j].alive));
    }
    best as f64 / upper.n as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    #[serde(rename = "N")]
    pub n: u64,
    pub replicates: usize,
    pub mean: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Replicates with no blocked birth in either variant.
    pub zero_collision_replicates: usize,
    /// Moments of `X_T^1(1)` over the same replicates.
    pub lower_mass: SampleMoments,
}

/// Monte Carlo `E sup_{t<=T} |X_t^2(1) - X_t^1(1)|` for each configuration.
pub fn prop_gap_experiment(
    cfgs: &[LatticeConfig],
    replicates: usize,
    t_max: f64,
    x0_mass: f64,
    seed: u64,
) -> Result<Vec<GapRow>, StatsError> {
    if let Some(first) = cfgs.first() {
        if cfgs.iter().any(|c| c.d() != first.d() || c.theta() != first.theta()) {
            return Err(StatsError::MixedGrid);
        }
    }
    cfgs.iter()
        .map(|cfg| {
            let one = |r: u64| -> Result<(f64, bool, f64), StatsError> {
                let mut rng = seeded(derive_seed(seed ^ cfg.n(), r, purpose::INITIAL_SITES));
                let init = initial_sites(cfg, x0_mass, InitMode::Box, &mut rng)?;
                let log = generate_with(cfg, &init, t_max, derive_seed(seed ^ cfg.n(), r, purpose::GENEALOGY), GenerateOptions::default())?;
                let run = run_coupled_with(&log, &[VariantId::Upper2], &[], &[], &EngineOptions { suppression: true, audit: false })?;
                let up = run.trajectory(VariantId::Upper2)?;
                let lo = run.trajectory(VariantId::Lower1)?;
                let quiet = up.points.last().map_or(0, |p| p.blocked) == 0 && lo.points.last().map_or(0, |p| p.blocked) == 0;
                Ok((sup_gap(up, lo, t_max), quiet, lo.mass_at(t_max)?))
            };
            let res = par_replicates(replicates as u64, one)?;
            let gaps: Vec<f64> = res.iter().map(|r| r.0).collect();
            let m = sample_moments(&gaps);
            Ok(GapRow {
                n: cfg.n(),
                replicates,
                mean: m.mean,
                se: m.mean_se,
                ci_low: m.mean - 1.96 * m.mean_se,
                ci_high: m.mean + 1.96 * m.mean_se,
                zero_collision_replicates: res.iter().filter(|r| r.1).count(),
                lower_mass: sample_moments(&res.iter().map(|r| r.2).collect::<Vec<_>>()),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::make_config;

    #[test]
    fn critical_moments() {
        let p = SbmParams { gamma0: 2.0, sigma0_sq: 1.0 / 3.0, theta0: 0.0, x0_mass: 1.0 };
        assert_eq!(sbm_mass_moments(&p, 1.0), (1.0, 3.0));
        let p = SbmParams { x0_mass: 0.7, gamma0: 1.3, ..p };
        let (m1, m2) = sbm_mass_moments(&p, 2.0);
        assert_eq!(m1, 0.7);
        assert!((m2 - (0.49 + 1.3 * 0.7 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn small_drift_is_continuous_at_the_switch() {
        let base = SbmParams { gamma0: 2.0, sigma0_sq: 1.0 / 3.0, theta0: 0.0, x0_mass: 1.3 };
        let (a1, a2) = sbm_mass_moments(&base, 1.5);
        let (b1, b2) = sbm_mass_moments(&SbmParams { theta0: 2e-8, ..base }, 1.5);
        assert!((a1 - b1).abs() < 1e-6 && (a2 - b2).abs() < 1e-6);
    }

    #[test]
    fn moments_solve_their_odes() {
        // RK4 on m1' = θ m1 and m2' = 2θ m2 + γ m1.
        for theta in [-0.5, 0.0, 0.5] {
            let p = SbmParams { gamma0: 2.0, sigma0_sq: 1.0 / 3.0, theta0: theta, x0_mass: 1.0 };
            let f = |y: [f64; 2]| [theta * y[0], 2.0 * theta * y[1] + p.gamma0 * y[0]];
            let mut y = [1.0, 1.0];
            let h = 1e-3;
            for _ in 0..1000 {
                let k1 = f(y);
                let k2 = f([y[0] + 0.5 * h * k1[0], y[1] + 0.5 * h * k1[1]]);
                let k3 = f([y[0] + 0.5 * h * k2[0], y[1] + 0.5 * h * k2[1]]);
                let k4 = f([y[0] + h * k3[0], y[1] + h * k3[1]]);
                for i in 0..2 {
                    y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
            let (m1, m2) = sbm_mass_moments(&p, 1.0);
            assert!((y[0] - m1).abs() < 1e-9 && (y[1] - m2).abs() < 1e-9, "theta={theta}");
        }
    }

    #[test]
    fn report_z_scores() {
        let xs: Vec<f64> = (0..1000).map(|i| (i % 10) as f64).collect();
        let r = moment_report(&xs, 1.0, 4.5, 8.25);
        assert!(r.z_scores.0.abs() < 1e-9);
        assert!(r.z_scores.1.abs() < 0.1);
        assert_eq!(r.n_replicates, 1000);
    }

    #[test]
    fn initial_box_sites_are_distinct() {
        let cfg = make_config(5, 200, 0.0).unwrap();
        let mut rng = seeded(5);
        let sites = initial_sites(&cfg, 1.0, InitMode::Box, &mut rng).unwrap();
        assert_eq!(sites.len(), 200);
        let set: std::collections::HashSet<_> = sites.iter().collect();
        assert_eq!(set.len(), 200);
        let half = (1.0 / cfg.spacing()).round() as i32 / 2 + 1;
        assert!(sites.iter().all(|s| s.sup_norm() <= half));
        assert!(matches!(initial_sites(&cfg, 0.001, InitMode::Box, &mut rng), Err(StatsError::NoParticles(_))));
    }

    #[test]
    fn exact_spread_rate_values() {
        let cfg = make_config(5, 200, 0.0).unwrap();
        // M = 2: E[k₁²] = 5^4 · 10 / 3124; spacing² = 1/(N R²).
        let ek2 = 625.0 * 10.0 / 3124.0;
        let expect = ek2 / 200f64.powf(0.4);
        assert!((exact_spread_rate(&cfg) - expect).abs() < 1e-12);
        assert!((exact_spread_rate(&cfg) - 0.2403).abs() < 1e-3);
    }
}
