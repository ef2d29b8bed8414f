//! The rescaled fine lattice, its displacement neighborhood, and the scaling
//! functions tying the range `R` to the scale parameter `N`.
//!
//! Sites are integer vectors in lattice units. One lattice unit is
//! `N^{-1/2} / R` in physical coordinates, where `R = N^{1/d}` for `d >= 5`
//! and `R = (N ln N)^{1/4}` for `d = 4`. The neighborhood is every nonzero
//! integer vector with `‖k‖_∞ <= M`, `M = ⌊R⌋`, so it has
//! `ψ(N) = (2M+1)^d - 1` elements.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest supported dimension. Sites are stored inline, zero padded.
pub const MAX_DIM: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatticeError {
    #[error("dimension {0} is below 4; only d >= 4 is supported")]
    DimensionTooLow(usize),
    #[error("dimension {0} exceeds the supported maximum {MAX_DIM}")]
    DimensionTooHigh(usize),
    #[error("scale N = {0} is too small (need N >= 3)")]
    ScaleTooSmall(u64),
    #[error("N = {n} must exceed 2|theta| = {}", 2.0 * theta.abs())]
    DriftTooLarge { n: u64, theta: f64 },
    #[error("drift theta must be finite")]
    NonFiniteDrift,
    #[error("vector has {got} components, lattice has dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("range R = {0} is too small (need R >= 2)")]
    RangeTooSmall(f64),
    #[error("neighborhood size overflows for d = {d}, M = {m}")]
    Overflow { d: usize, m: i64 },
}

/// An integer vector: a lattice site or a displacement, in lattice units.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Site(pub [i32; MAX_DIM]);

/// Displacements share the representation of sites.
pub type Displacement = Site;

impl Site {
    pub const ORIGIN: Site = Site([0; MAX_DIM]);

    pub fn from_slice(coords: &[i32]) -> Site {
        assert!(coords.len() <= MAX_DIM, "at most {MAX_DIM} coordinates");
        let mut s = [0; MAX_DIM];
        s[..coords.len()].copy_from_slice(coords);
        Site(s)
    }

    pub fn coords(&self, d: usize) -> &[i32] {
        &self.0[..d]
    }

    #[inline]
    pub fn offset(&self, by: &Site) -> Site {
        let mut s = self.0;
        for (a, b) in s.iter_mut().zip(by.0.iter()) {
            *a += *b;
        }
        Site(s)
    }

    #[inline]
    pub fn diff(&self, other: &Site) -> Site {
        let mut s = self.0;
        for (a, b) in s.iter_mut().zip(other.0.iter()) {
            *a -= *b;
        }
        Site(s)
    }

    #[inline]
    pub fn sup_norm(&self) -> i32 {
        self.0.iter().map(|c| c.abs()).max().unwrap_or(0)
    }

    pub fn is_origin(&self) -> bool {
        self.0.iter().all(|&c| c == 0)
    }
}

/// Configuration of the rescaled lattice at scale `N` in dimension `d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeConfig {
    d: usize,
    n: u64,
    theta: f64,
    m: i64,
    psi: u64,
    eps_n: f64,
    range: f64,
}

/// The `{d, N, theta, M, psi, eps_N}` block echoed into every output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub d: usize,
    #[serde(rename = "N")]
    pub n: u64,
    pub theta: f64,
    #[serde(rename = "M")]
    pub m: i64,
    pub psi: u64,
    #[serde(rename = "eps_N")]
    pub eps_n: f64,
}

fn check_dimension(d: usize) -> Result<(), LatticeError> {
    if d < 4 {
        return Err(LatticeError::DimensionTooLow(d));
    }
    if d > MAX_DIM {
        return Err(LatticeError::DimensionTooHigh(d));
    }
    Ok(())
}

/// Largest integer `m >= 0` with `m^d <= n`, computed exactly.
fn integer_root(n: u64, d: u32) -> i64 {
    let mut m = (n as f64).powf(1.0 / d as f64).floor() as u64;
    let pow = |x: u64| x.checked_pow(d);
    while m > 0 && pow(m).is_none_or(|p| p > n) {
        m -= 1;
    }
    while pow(m + 1).is_some_and(|p| p <= n) {
        m += 1;
    }
    m as i64
}

/// Builds the lattice configuration for dimension `d`, scale `N` and drift `theta`.
pub fn make_config(d: usize, n: u64, theta: f64) -> Result<LatticeConfig, LatticeError> {
    check_dimension(d)?;
    if n < 3 {
        return Err(LatticeError::ScaleTooSmall(n));
    }
    if !theta.is_finite() {
        return Err(LatticeError::NonFiniteDrift);
    }
    if (n as f64) <= 2.0 * theta.abs() {
        return Err(LatticeError::DriftTooLarge { n, theta });
    }
    let nf = n as f64;
    let (m, range) = if d == 4 {
        let target = nf * nf.ln();
        let mut m = target.powf(0.25).floor() as i64;
        while m > 0 && ((m as f64).powi(4)) > target {
            m -= 1;
        }
        while ((m + 1) as f64).powi(4) <= target {
            m += 1;
        }
        (m, target.powf(0.25))
    } else {
        (integer_root(n, d as u32), nf.powf(1.0 / d as f64))
    };
    let side = (2 * m + 1) as u64;
    let psi = side
        .checked_pow(d as u32)
        .ok_or(LatticeError::Overflow { d, m })?
        - 1;
    Ok(LatticeConfig {
        d,
        n,
        theta,
        m,
        psi,
        eps_n: theta / (2.0 * nf + theta),
        range,
    })
}

impl LatticeConfig {
    pub fn d(&self) -> usize {
        self.d
    }
    pub fn n(&self) -> u64 {
        self.n
    }
    pub fn n_f64(&self) -> f64 {
        self.n as f64
    }
    pub fn theta(&self) -> f64 {
        self.theta
    }
    /// Neighborhood radius in lattice units.
    pub fn m(&self) -> i64 {
        self.m
    }
    /// Neighborhood size `ψ(N)`.
    pub fn psi(&self) -> u64 {
        self.psi
    }
    /// `ψ₀(N) = ψ(N) / N`.
    pub fn psi0(&self) -> f64 {
        self.psi as f64 / self.n as f64
    }
    /// `ε_N = θ / (2N + θ)`.
    pub fn eps_n(&self) -> f64 {
        self.eps_n
    }
    /// Real-valued range `R` with `R^d = N` (d >= 5) or `R^4 = N ln N` (d = 4).
    pub fn range(&self) -> f64 {
        self.range
    }
    /// Total per-particle event rate `2N + θ`.
    pub fn event_rate(&self) -> f64 {
        2.0 * self.n as f64 + self.theta
    }
    /// Probability that an event is a death, `N / (2N + θ)`.
    pub fn death_probability(&self) -> f64 {
        self.n as f64 / self.event_rate()
    }
    /// Probability that an event is a birth, `(N + θ) / (2N + θ)`.
    pub fn birth_probability(&self) -> f64 {
        (self.n as f64 + self.theta) / self.event_rate()
    }
    /// Physical length of one lattice unit, `N^{-1/2} / R`.
    pub fn spacing(&self) -> f64 {
        1.0 / ((self.n as f64).sqrt() * self.range)
    }

    pub fn echo(&self) -> ConfigEcho {
        ConfigEcho {
            d: self.d,
            n: self.n,
            theta: self.theta,
            m: self.m,
            psi: self.psi,
            eps_n: self.eps_n,
        }
    }

    /// Physical coordinates of a site.
    pub fn physical(&self, site: &Site) -> Vec<f64> {
        let a = self.spacing();
        site.coords(self.d).iter().map(|&c| c as f64 * a).collect()
    }

    /// Exact per-coordinate second moment of a uniform neighborhood step, in lattice units².
    pub fn step_second_moment(&self) -> f64 {
        let m = self.m as f64;
        let side = (2 * self.m + 1) as f64;
        // Sum of k_1^2 over the full box, divided by the number of nonzero vectors.
        side.powi(self.d as i32 - 1) * m * (m + 1.0) * side / 3.0 / self.psi as f64
    }
}

/// Whether `k` lies in the displacement neighborhood, `0 < ‖k‖_∞ <= M`.
pub fn neighborhood_contains(cfg: &LatticeConfig, k: &[i32]) -> Result<bool, LatticeError> {
    if k.len() != cfg.d {
        return Err(LatticeError::DimensionMismatch {
            expected: cfg.d,
            got: k.len(),
        });
    }
    let sup = k.iter().map(|c| c.abs() as i64).max().unwrap_or(0);
    Ok(sup > 0 && sup <= cfg.m)
}

#[inline]
pub(crate) fn in_neighborhood(cfg: &LatticeConfig, k: &Site) -> bool {
    let sup = k.sup_norm() as i64;
    sup > 0 && sup <= cfg.m
}

/// Draws a displacement uniformly from the `ψ(N)` neighborhood vectors.
///
/// An index in `0..ψ` is drawn, shifted past the origin's index in the
/// base-`(2M+1)` enumeration of the box, and decoded digit by digit.
pub fn sample_displacement<R: Rng + ?Sized>(cfg: &LatticeConfig, rng: &mut R) -> Displacement {
    let side = (2 * cfg.m + 1) as u64;
    let origin_index = cfg.psi / 2;
    let mut idx = rng.random_range(0..cfg.psi);
    if idx >= origin_index {
        idx += 1;
    }
    let mut out = [0i32; MAX_DIM];
    for c in out.iter_mut().take(cfg.d) {
        *c = (idx % side) as i32 - cfg.m as i32;
        idx /= side;
    }
    Site(out)
}

/// `N` as a function of the range: `R^d` for `d >= 5`, the root of `N ln N = R^4` for `d = 4`.
pub fn scaling_n_of_r(d: usize, r: u64) -> Result<f64, LatticeError> {
    check_dimension(d)?;
    if r < 2 {
        return Err(LatticeError::RangeTooSmall(r as f64));
    }
    let rf = r as f64;
    if d >= 5 {
        return Ok(rf.powi(d as i32));
    }
    let target = rf.powi(4);
    // Newton on f(N) = N ln N - target, which is increasing and convex for N > 1.
    let mut x = (target / target.ln()).max(2.0);
    for _ in 0..100 {
        let f = x * x.ln() - target;
        let step = f / (x.ln() + 1.0);
        let next = (x - step).max(1.0 + 1e-12);
        if ((next - x) / x).abs() < 1e-15 {
            x = next;
            break;
        }
        x = next;
    }
    Ok(x)
}

/// Inverse of [`scaling_n_of_r`]: `N^{1/d}` for `d >= 5`, `(N ln N)^{1/4}` for `d = 4`.
pub fn scaling_r_of_n(d: usize, n: f64) -> Result<f64, LatticeError> {
    check_dimension(d)?;
    if n.is_nan() || n < 2.0 {
        return Err(LatticeError::RangeTooSmall(n));
    }
    Ok(if d >= 5 {
        n.powf(1.0 / d as f64)
    } else {
        (n * n.ln()).powf(0.25)
    })
}

/// `I(t) = 1 + ∫₀ᵗ (1+s)^{1-d/2} ds` in closed form.
pub fn i_integral(d: usize, t: f64) -> f64 {
    assert!(t >= 0.0, "I(t) needs t >= 0");
    assert!(d >= 4, "I(t) needs d >= 4");
    match d {
        4 => 1.0 + t.ln_1p(),
        _ => {
            let a = d as f64 / 2.0 - 2.0;
            1.0 + (1.0 - (1.0 + t).powf(-a)) / a
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn brute_force_psi(d: usize, m: i64) -> u64 {
        let side = 2 * m + 1;
        let total = side.pow(d as u32);
        let mut count = 0;
        for idx in 0..total {
            let mut i = idx;
            let mut sup = 0;
            for _ in 0..d {
                sup = sup.max(((i % side) - m).abs());
                i /= side;
            }
            if sup > 0 && sup <= m {
                count += 1;
            }
        }
        count
    }

    #[test]
    fn config_examples() {
        let c = make_config(5, 1000, 0.0).unwrap();
        assert_eq!(c.m(), 3);
        assert_eq!(c.psi(), 16806);
        let c = make_config(4, 100, 0.0).unwrap();
        assert_eq!(c.m(), 4);
        assert_eq!(c.psi(), 6560);
        let c = make_config(5, 32, 1.0).unwrap();
        assert!((c.eps_n() - 1.0 / 65.0).abs() < 1e-15);
        assert!((c.eps_n() * (64.0 + 1.0) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn exact_powers_do_not_lose_a_unit() {
        assert_eq!(make_config(5, 1024, 0.0).unwrap().m(), 4);
        assert_eq!(make_config(5, 1023, 0.0).unwrap().m(), 3);
        assert_eq!(make_config(6, 729, 0.0).unwrap().m(), 3);
        assert_eq!(make_config(5, 243, 0.0).unwrap().m(), 3);
    }

    #[test]
    fn config_rejections() {
        assert_eq!(make_config(3, 100, 0.0), Err(LatticeError::DimensionTooLow(3)));
        assert!(matches!(make_config(5, 10, 5.0), Err(LatticeError::DriftTooLarge { .. })));
        assert!(matches!(make_config(5, 10, -5.0), Err(LatticeError::DriftTooLarge { .. })));
        assert!(make_config(5, 11, 5.0).is_ok());
        assert_eq!(make_config(5, 2, 0.0), Err(LatticeError::ScaleTooSmall(2)));
    }

    #[test]
    fn psi_matches_brute_force() {
        for &(d, n) in &[(4usize, 10u64), (4, 60), (4, 100), (5, 50), (5, 243), (6, 100), (5, 3)] {
            let c = make_config(d, n, 0.0).unwrap();
            assert_eq!(c.psi(), brute_force_psi(d, c.m()), "d={d} N={n}");
        }
    }

    #[test]
    fn psi_over_n_approaches_two_to_the_d() {
        // Along exact powers N = R^5 the ratio is ((2R+1)^5 - 1)/(32 R^5), which
        // decreases to 1 but only enters the 10% band once R >= 26.
        let mut prev = f64::INFINITY;
        for r in [2u64, 4, 10, 26, 50, 100] {
            let c = make_config(5, r.pow(5), 0.0).unwrap();
            let ratio = c.psi0() / 32.0;
            assert!(ratio < prev);
            prev = ratio;
            if r >= 26 {
                assert!((ratio - 1.0).abs() < 0.10, "R={r} ratio {ratio}");
            }
        }
        let c = make_config(5, 100_000, 0.0).unwrap();
        assert_eq!(c.psi(), 21u64.pow(5) - 1);
    }

    #[test]
    fn neighborhood_membership() {
        let c = make_config(5, 1000, 0.0).unwrap();
        assert!(!neighborhood_contains(&c, &[0, 0, 0, 0, 0]).unwrap());
        assert!(neighborhood_contains(&c, &[3, -3, 0, 1, 2]).unwrap());
        assert!(!neighborhood_contains(&c, &[4, 0, 0, 0, 0]).unwrap());
        assert!(matches!(
            neighborhood_contains(&c, &[1, 0]),
            Err(LatticeError::DimensionMismatch { expected: 5, got: 2 })
        ));
    }

    #[test]
    fn displacement_chi_square_uniform() {
        // d = 4, M = 1: 80 cells.
        let c = make_config(4, 4, 0.0).unwrap();
        assert_eq!(c.m(), 1);
        assert_eq!(c.psi(), 80);
        let mut rng = seeded(11);
        let draws = 1_000_000u64;
        let mut counts = std::collections::HashMap::new();
        for _ in 0..draws {
            let k = sample_displacement(&c, &mut rng);
            assert!(in_neighborhood(&c, &k));
            *counts.entry(k).or_insert(0u64) += 1;
        }
        assert_eq!(counts.len(), 80);
        let expected = draws as f64 / 80.0;
        let chi2: f64 = counts
            .values()
            .map(|&o| (o as f64 - expected).powi(2) / expected)
            .sum();
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let p = 1.0 - ChiSquared::new(79.0).unwrap().cdf(chi2);
        assert!(p > 1e-3, "chi2 = {chi2}, p = {p}");
    }

    #[test]
    fn displacement_streams_are_deterministic() {
        let c = make_config(5, 200, 0.0).unwrap();
        let (mut a, mut b) = (seeded(5), seeded(5));
        for _ in 0..1000 {
            assert_eq!(sample_displacement(&c, &mut a), sample_displacement(&c, &mut b));
        }
    }

    #[test]
    fn scaling_examples() {
        assert_eq!(scaling_n_of_r(5, 4).unwrap(), 1024.0);
        let n = scaling_n_of_r(4, 4).unwrap();
        assert!((n * n.ln() - 256.0).abs() < 1e-9);
        assert!((scaling_r_of_n(4, n).unwrap() - 4.0).abs() < 1e-8);
        assert!((scaling_r_of_n(6, 729.0).unwrap() - 3.0).abs() < 1e-12);
        assert!(scaling_n_of_r(4, 1).is_err());
    }

    #[test]
    fn scaling_round_trip() {
        for d in 4..=6 {
            for r in 2..=50u64 {
                let n = scaling_n_of_r(d, r).unwrap();
                let back = scaling_r_of_n(d, n).unwrap();
                assert!((back - r as f64).abs() < 1e-8, "d={d} R={r} back={back}");
            }
        }
    }

    #[test]
    fn i_integral_closed_forms() {
        assert_eq!(i_integral(4, 0.0), 1.0);
        assert!((i_integral(4, std::f64::consts::E - 1.0) - 2.0).abs() < 1e-15);
        let mut prev = 1.0;
        for k in 1..200 {
            let v = i_integral(6, k as f64 * 0.5);
            assert!(v > prev && v < 2.0);
            prev = v;
        }
        assert!((i_integral(6, 1e12) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn i_integral_matches_quadrature() {
        // Composite Simpson on the integrand, an independent route.
        fn simpson(d: usize, t: f64) -> f64 {
            let n = 20_000;
            let h = t / n as f64;
            let f = |s: f64| (1.0 + s).powf(1.0 - d as f64 / 2.0);
            let mut acc = f(0.0) + f(t);
            for i in 1..n {
                acc += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            1.0 + acc * h / 3.0
        }
        for d in [4usize, 5, 6, 7] {
            for t in [0.3, 1.0, 5.0, 40.0] {
                let exact = i_integral(d, t);
                assert!((exact - simpson(d, t)).abs() < 1e-9, "d={d} t={t}");
            }
        }
    }

    #[test]
    fn step_second_moment_matches_enumeration() {
        let c = make_config(5, 200, 0.0).unwrap();
        let m = c.m();
        let side = 2 * m + 1;
        let mut acc = 0i64;
        for idx in 0..side.pow(5) {
            acc += ((idx % side) - m).pow(2);
        }
        let exact = acc as f64 / c.psi() as f64;
        assert!((c.step_second_moment() - exact).abs() < 1e-12);
    }
}
