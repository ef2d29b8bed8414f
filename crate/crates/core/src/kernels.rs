//! Lazy long-range random walks and empirical kernel envelopes.
//!
//! A lazy step is `0` with probability 1/2 and otherwise uniform: on
//! `[-1,1]^d` for the continuum walk `V_n`, or on the scaled neighborhood
//! `{k/R : 0 < ‖k‖∞ <= M}` for the lattice walk `V_n^N`.

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::{sample_displacement, LatticeConfig};

/// Pinned envelope for `(1+n)^{d/2} P(V_n^N ∈ x + [-1,1]^d)`.
pub const BOX_ENVELOPE: f64 = 30.0;
/// Pinned constants for `P(|V_n^N| >= z) <= C exp(-c z²/n)`.
pub const TAIL_C: f64 = 10.0;
pub const TAIL_SMALL_C: f64 = 0.05;
/// Range `0 <= z/n < δ₀` on which the tail envelope is asserted.
pub const TAIL_DELTA0: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("need at least {min} samples, got {got}")]
    TooFewSamples { min: u64, got: u64 },
    #[error("point has {got} components, walk has dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("z/n = {ratio} is outside [0, {TAIL_DELTA0})")]
    TailRange { ratio: f64 },
    #[error("the local CLT check needs n >= 25, got {0}")]
    StepsTooFew(u64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LazyWalkStep {
    Continuum { d: usize },
    Discrete { cfg: LatticeConfig },
}

impl LazyWalkStep {
    pub fn d(&self) -> usize {
        match self {
            LazyWalkStep::Continuum { d } => *d,
            LazyWalkStep::Discrete { cfg } => cfg.d(),
        }
    }

    /// Per-coordinate variance of one lazy step.
    pub fn step_variance(&self) -> f64 {
        match self {
            LazyWalkStep::Continuum { .. } => 1.0 / 6.0,
            LazyWalkStep::Discrete { cfg } => 0.5 * cfg.step_second_moment() / (cfg.range() * cfg.range()),
        }
    }

    /// Adds one uniform (non-lazy) jump to `v`.
    fn jump<R: Rng + ?Sized>(&self, v: &mut [f64], rng: &mut R) {
        match self {
            LazyWalkStep::Continuum { .. } => {
                for c in v.iter_mut() {
                    *c += rng.random::<f64>() * 2.0 - 1.0;
                }
            }
            LazyWalkStep::Discrete { cfg } => {
                let k = sample_displacement(cfg, rng);
                let r = cfg.range();
                for (c, ki) in v.iter_mut().zip(k.0.iter()) {
                    *c += *ki as f64 / r;
                }
            }
        }
    }
}

/// `V_n` together with the number of non-lazy steps taken.
pub fn sample_vn_with_count<R: Rng + ?Sized>(step: &LazyWalkStep, n: u64, rng: &mut R) -> (Vec<f64>, u64) {
    let mut v = vec![0.0; step.d()];
    let mut moves = 0;
    for _ in 0..n {
        if rng.random::<bool>() {
            moves += 1;
            step.jump(&mut v, rng);
        }
    }
    (v, moves)
}

/// `V_n`, the sum of `n` independent lazy steps.
pub fn sample_vn<R: Rng + ?Sized>(step: &LazyWalkStep, n: u64, rng: &mut R) -> Vec<f64> {
    sample_vn_with_count(step, n, rng).0
}

/// Whether `shift + V_n ∈ [-1,1]^d` for one draw of `V_n`.
///
/// Draws the number of non-lazy steps from `Bin(n, 1/2)` first. For the
/// continuum walk the coordinates are then independent sums of uniforms,
/// so the draw stops at the first coordinate that leaves the box.
fn box_hit<R: Rng + ?Sized>(step: &LazyWalkStep, n: u64, shift: &[f64], rng: &mut R) -> bool {
    let moves = if n == 0 { 0 } else { Binomial::new(n, 0.5).expect("valid binomial").sample(rng) };
    match step {
        LazyWalkStep::Continuum { .. } => shift.iter().all(|&s| {
            let mut c = s;
            for _ in 0..moves {
                c += rng.random::<f64>() * 2.0 - 1.0;
            }
            c.abs() <= 1.0
        }),
        LazyWalkStep::Discrete { .. } => {
            let mut v = shift.to_vec();
            for _ in 0..moves {
                step.jump(&mut v, rng);
            }
            v.iter().all(|c| c.abs() <= 1.0)
        }
    }
}

fn check_point(step: &LazyWalkStep, x: &[f64]) -> Result<(), KernelError> {
    if x.len() != step.d() {
        return Err(KernelError::DimensionMismatch { expected: step.d(), got: x.len() });
    }
    Ok(())
}

/// Monte Carlo `P(V_n ∈ x + [-1,1]^d)` with its binomial standard error.
pub fn prob_box<R: Rng + ?Sized>(
    step: &LazyWalkStep,
    n: u64,
    x: &[f64],
    n_samples: u64,
    rng: &mut R,
) -> Result<(f64, f64), KernelError> {
    check_point(step, x)?;
    if n_samples < 1000 {
        return Err(KernelError::TooFewSamples { min: 1000, got: n_samples });
    }
    // V ∈ x + B  ⇔  V - x ∈ B.
    let shift: Vec<f64> = x.iter().map(|c| -c).collect();
    let hits = (0..n_samples).filter(|_| box_hit(step, n, &shift, rng)).count() as f64;
    let p = hits / n_samples as f64;
    Ok((p, (p * (1.0 - p) / n_samples as f64).sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalClt {
    pub lhs: f64,
    pub lhs_se: f64,
    pub rhs: f64,
    pub ratio: f64,
}

/// `n^{d/2} P(x√n + V_n ∈ [-1,1]^d)` against `2^d (2πσ²)^{-d/2} e^{-|x|²/(2σ²)}`, `σ² = 1/6`.
pub fn local_clt_check<R: Rng + ?Sized>(
    step: &LazyWalkStep,
    n: u64,
    x: &[f64],
    n_samples: u64,
    rng: &mut R,
) -> Result<LocalClt, KernelError> {
    check_point(step, x)?;
    if n < 25 {
        return Err(KernelError::StepsTooFew(n));
    }
    if n_samples < 1000 {
        return Err(KernelError::TooFewSamples { min: 1000, got: n_samples });
    }
    let d = step.d() as f64;
    let sqrt_n = (n as f64).sqrt();
    let shift: Vec<f64> = x.iter().map(|c| c * sqrt_n).collect();
    let hits = (0..n_samples).filter(|_| box_hit(step, n, &shift, rng)).count() as f64;
    let p = hits / n_samples as f64;
    let scale = (n as f64).powf(d / 2.0);
    let sigma2 = 1.0 / 6.0;
    let x2: f64 = x.iter().map(|c| c * c).sum();
    let rhs = 2f64.powf(d) * (2.0 * std::f64::consts::PI * sigma2).powf(-d / 2.0) * (-x2 / (2.0 * sigma2)).exp();
    let lhs = scale * p;
    Ok(LocalClt {
        lhs,
        lhs_se: scale * (p * (1.0 - p) / n_samples as f64).sqrt(),
        rhs,
        ratio: lhs / rhs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailCheck {
    pub n: u64,
    pub z: f64,
    pub estimate: f64,
    pub se: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Checks `P(|V_n| >= z) <= C exp(-c z²/n)` with the pinned `(C, c)`.
///
/// `z = 0` passes trivially since the bound exceeds 1. A point passes when
/// the estimate minus three standard errors stays below the bound.
pub fn gaussian_tail_check<R: Rng + ?Sized>(
    step: &LazyWalkStep,
    n: u64,
    z: f64,
    n_samples: u64,
    rng: &mut R,
) -> Result<TailCheck, KernelError> {
    let ratio = if n == 0 { f64::INFINITY } else { z / n as f64 };
    if !(z >= 0.0 && ratio < TAIL_DELTA0) {
        return Err(KernelError::TailRange { ratio });
    }
    let bound = TAIL_C * (-TAIL_SMALL_C * z * z / n as f64).exp();
    if z == 0.0 {
        return Ok(TailCheck { n, z, estimate: 1.0, se: 0.0, bound, pass: true });
    }
    if n_samples < 1000 {
        return Err(KernelError::TooFewSamples { min: 1000, got: n_samples });
    }
    let z2 = z * z;
    let hits = (0..n_samples)
        .filter(|_| sample_vn(step, n, rng).iter().map(|c| c * c).sum::<f64>() >= z2)
        .count() as f64;
    let p = hits / n_samples as f64;
    let se = (p * (1.0 - p) / n_samples as f64).sqrt();
    Ok(TailCheck { n, z, estimate: p, se, bound, pass: p - 3.0 * se <= bound })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxEnvelopeRow {
    pub n: u64,
    pub estimate: f64,
    pub se: f64,
    /// `(1+n)^{d/2}` times the estimate.
    pub scaled: f64,
    pub bound: f64,
    pub pass: bool,
}

/// The box-probability envelope on a grid of `n` at `x = 0`.
pub fn box_envelope_grid<R: Rng + ?Sized>(
    step: &LazyWalkStep,
    ns: &[u64],
    n_samples: u64,
    rng: &mut R,
) -> Result<Vec<BoxEnvelopeRow>, KernelError> {
    let d = step.d();
    let x = vec![0.0; d];
    ns.iter()
        .map(|&n| {
            let (p, se) = prob_box(step, n, &x, n_samples, rng)?;
            let scaled = p * (1.0 + n as f64).powf(d as f64 / 2.0);
            Ok(BoxEnvelopeRow { n, estimate: p, se, scaled, bound: BOX_ENVELOPE, pass: scaled <= BOX_ENVELOPE })
        })
        .collect()
}
