//! The limit drift constant `b_d`.
//!
//! For `d >= 5`,
//! `b_d = 2^{-d} Σ_{l≥0} P(V_{l+1} ∈ B∖{0})
//!      + 2^{-d} Σ_{l≥0} Σ_{j≥0} 2^{-(l+j+1)} C(l+j, j) Σ_{m=0}^{j} P(W₀ + V_{l+m} ∈ B)`
//! with `B = [-1,1]^d`, `V_n` the lazy walk with uniform jumps on `B`, and
//! `W₀` uniform on `B`. Coordinates of the continuum walk are independent,
//! so every probability is a binomial mixture of `p_k^d` where
//! `p_k = P(|U₁+⋯+U_k| <= 1)` for `U_i` uniform on `[-1,1]`.
//!
//! Exchanging the order of summation collapses the double series to
//! `b_d = 2^{-d} Σ_{k≥1} (2k+3) p_k^d`. This uses
//! `Σ_{n≥k} C(n,k) 2^{-n} = 2` and the weight identity
//! `c(n) = Σ_{l=0}^{n} P(NB_l ≥ n-l) = n/2 + 1`, where `NB_l` has the
//! negative binomial law `j ↦ 2^{-(l+j+1)} C(l+j, j)`.
//!
//! Truncation bounds. With `n = k+1` and `p_k = (2/π)∫₀^∞ sinc^n(u) du`,
//! `ln sinc u <= -u²/6 - u⁴/180` on `(0, π)` gives
//! `p_k <= √(6/(πn)) (1 - 0.15/n + 0.13125/n²) + (2/π) π^{1-n}/(n-1)`,
//! and `ln sinc u >= -u²/6 - u⁴/150` on `(0, π/2]` gives
//! `p_k >= √(6/(πn)) (1 - 0.18/n) - (2/π)[6e^{-nπ²/24}/(nπ) + π^{1-n}/(n-1)]`.
//! The remainder `Σ_{k>K} (2k+3) p_k^d` is then bracketed by closed-form
//! integrals of `n^{1-d/2}`-type envelopes.

use std::sync::OnceLock;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::genealogy::{generate_with, GenealogyError, GenerateOptions};
use crate::lattice::{LatticeConfig, Site};
use crate::rng::{derive_seed, purpose, seeded};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BdError {
    #[error("dimension {0} is below 4")]
    DimensionTooLow(usize),
    #[error("the series is used for d >= 5 only; d = 4 has the closed form 9/(2π²)")]
    SeriesAtFour,
    #[error("tolerance {0} must be positive")]
    BadTolerance(f64),
    #[error("tolerance {tol} not reached with {terms} terms (bracket half-width {reached})")]
    Unreachable { tol: f64, terms: usize, reached: f64 },
    #[error("sample count must be positive")]
    NoSamples,
    #[error("tau must be positive and finite, got {0}")]
    BadTau(f64),
    #[error(transparent)]
    Genealogy(#[from] GenealogyError),
}

/// Exact rational `p_k`.
pub fn irwin_hall_exact(k: u32) -> BigRational {
    if k == 0 {
        return BigRational::one();
    }
    // 2^k k! p_k = Σ_j (-1)^j C(k,j) [(k+1-2j)_+^k - (k-1-2j)_+^k].
    let mut acc = BigInt::zero();
    let mut binom = BigInt::one();
    for j in 0..=k {
        let hi = k as i64 + 1 - 2 * j as i64;
        let lo = k as i64 - 1 - 2 * j as i64;
        let mut term = BigInt::zero();
        if hi > 0 {
            term += BigInt::from(hi).pow(k);
        }
        if lo > 0 {
            term -= BigInt::from(lo).pow(k);
        }
        if j % 2 == 0 {
            acc += &binom * term;
        } else {
            acc -= &binom * term;
        }
        binom = binom * BigInt::from(k - j) / BigInt::from(j + 1);
    }
    let mut denom = BigInt::one() << k;
    for i in 2..=k {
        denom *= BigInt::from(i);
    }
    BigRational::new(acc, denom)
}

/// Largest `k` evaluated in exact arithmetic.
pub const EXACT_LIMIT: u32 = 60;

fn exact_table() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        (0..=EXACT_LIMIT)
            .map(|k| {
                let r = irwin_hall_exact(k);
                debug_assert!(r.is_positive());
                r.to_f64().expect("p_k is a finite rational")
            })
            .collect()
    })
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for m in 2..=n {
                let p2 = ((2 * m - 1) as f64 * z * p1 - (m - 1) as f64 * p0) / m as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

fn gl32() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(32))
}

/// `(2/π) ∫₀^π sinc^n(u) du` by composite Gauss–Legendre. The neglected
/// part beyond `π` is at most `(2/π) π^{1-n}/(n-1)`.
fn sinc_power_integral(n: u32) -> f64 {
    let nf = n as f64;
    // sinc^n <= exp(-n u²/6), which is below e^{-60} past this point.
    let b = (360.0 / nf).sqrt().min(std::f64::consts::PI);
    let (x, w) = gl32();
    let panels = 8;
    let h = b / panels as f64;
    let mut acc = 0.0;
    for p in 0..panels {
        let a = p as f64 * h;
        for (xi, wi) in x.iter().zip(w.iter()) {
            let u = a + 0.5 * h * (xi + 1.0);
            let s = u.sin() / u;
            acc += wi * s.powi(n as i32);
        }
    }
    acc * 0.5 * h * 2.0 / std::f64::consts::PI
}

/// `p_k = P(|U₁+⋯+U_k| <= 1)`, `U_i` uniform on `[-1,1]`; `p₀ = 1`.
///
/// Exact rational arithmetic for `k <= 60`; above that the integral
/// representation `p_k = (2/π)∫₀^∞ sinc^{k+1}` by quadrature, whose
/// truncation is below `10^{-30}`.
pub fn irwin_hall_p(k: u32) -> f64 {
    if k <= EXACT_LIMIT {
        exact_table()[k as usize]
    } else {
        sinc_power_integral(k + 1)
    }
}

/// `min(1, √(6/(πk)))`, a simple upper envelope for `p_k`.
pub fn p_simple_envelope(k: u32) -> f64 {
    if k == 0 {
        return 1.0;
    }
    (6.0 / (std::f64::consts::PI * k as f64)).sqrt().min(1.0)
}

fn sinc_tail(n: f64) -> f64 {
    let pi = std::f64::consts::PI;
    (2.0 / pi) * pi.powf(1.0 - n) / (n - 1.0)
}

/// Certified upper envelope for `p_k`, valid for `k >= 1`.
pub fn p_upper_envelope(k: u32) -> f64 {
    let n = k as f64 + 1.0;
    let lead = (6.0 / (std::f64::consts::PI * n)).sqrt();
    lead * (1.0 - 0.15 / n + 0.13125 / (n * n)) + sinc_tail(n)
}

/// Certified lower envelope for `p_k`, valid for `k >= 1`.
pub fn p_lower_envelope(k: u32) -> f64 {
    let pi = std::f64::consts::PI;
    let n = k as f64 + 1.0;
    let lead = (6.0 / (pi * n)).sqrt();
    lead * (1.0 - 0.18 / n) - (2.0 / pi) * 6.0 * (-n * pi * pi / 24.0).exp() / (n * pi) - sinc_tail(n)
}

/// `ln n!`: a table below 2^16, Stirling's series above.
pub fn ln_factorial(n: u64) -> f64 {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    const SIZE: usize = 1 << 16;
    let table = TABLE.get_or_init(|| {
        let mut t = Vec::with_capacity(SIZE);
        let mut acc = 0.0f64;
        t.push(0.0);
        for i in 1..SIZE {
            acc += (i as f64).ln();
            t.push(acc);
        }
        t
    });
    if (n as usize) < SIZE {
        return table[n as usize];
    }
    let x = n as f64 + 1.0;
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    (x - 0.5) * x.ln() - x + 0.5 * (2.0 * std::f64::consts::PI).ln()
        + inv * (1.0 / 12.0 - inv2 * (1.0 / 360.0 - inv2 / 1260.0))
}

fn ln_binom(n: u64, k: u64) -> f64 {
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

/// `2^{-(l+j+1)} C(l+j, j)`, the negative binomial weight.
pub fn negbin_weight(l: u64, j: u64) -> f64 {
    (ln_binom(l + j, j) - (l + j + 1) as f64 * std::f64::consts::LN_2).exp()
}

/// Range of `k` carrying all but `e^{-200}` of the `Bin(n, 1/2)` mass.
fn binomial_window(n: u64) -> (u64, u64) {
    let half = n as f64 / 2.0;
    let spread = 10.0 * (n as f64).sqrt() + 1.0;
    let lo = (half - spread).floor().max(0.0) as u64;
    let hi = ((half + spread).ceil() as u64).min(n);
    (lo, hi)
}

fn binomial_mixture(n: u64, shift: u32, skip_zero: bool, d: usize) -> f64 {
    binomial_mixture_with(n, shift, skip_zero, |k| irwin_hall_p(k).powi(d as i32))
}

/// `Σ_k C(n,k) 2^{-n} f(k + shift)` over the binomial window.
fn binomial_mixture_with(n: u64, shift: u32, skip_zero: bool, f: impl Fn(u32) -> f64) -> f64 {
    let (lo, hi) = binomial_window(n);
    let ln2n = n as f64 * std::f64::consts::LN_2;
    let mut acc = 0.0;
    for k in lo..=hi {
        if skip_zero && k == 0 {
            continue;
        }
        let w = (ln_binom(n, k) - ln2n).exp();
        acc += w * f(k as u32 + shift);
    }
    acc
}

/// `P(V_n ∈ [-1,1]^d ∖ {0}) = Σ_{k=1}^{n} C(n,k) 2^{-n} p_k^d`.
pub fn prob_v_in_box(d: usize, n: u64) -> f64 {
    binomial_mixture(n, 0, true, d)
}

/// `P(W₀ + V_n ∈ [-1,1]^d) = Σ_{k=0}^{n} C(n,k) 2^{-n} p_{k+1}^d`.
pub fn prob_w_plus_v_in_box(d: usize, n: u64) -> f64 {
    binomial_mixture(n, 1, false, d)
}

/// `c(n) = Σ_{l=0}^{n} P(NB_l ≥ n-l)` by direct summation of weights.
pub fn c_weight_direct(n: u64) -> f64 {
    (0..=n)
        .map(|l| {
            let below: f64 = (0..n - l).map(|j| negbin_weight(l, j)).sum();
            1.0 - below
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesResult {
    pub d: usize,
    /// Midpoint of the certified bracket.
    pub value: f64,
    /// Half-width of the bracket; `|b_d - value| <= tail_bound`.
    pub tail_bound: f64,
    pub lower: f64,
    pub upper: f64,
    /// `2^{-d} Σ_{k<=K} (2k+3) p_k^d`.
    pub partial_sum: f64,
    /// Number of collapsed terms `K`.
    pub terms: usize,
}

/// Certified bracket for `Σ_{k>K} (2k+3) p_k^d`, `K >= 60`.
pub fn remainder_bracket(d: usize, terms: usize) -> (f64, f64) {
    assert!(terms >= 60, "envelopes are used past the exact range");
    let pi = std::f64::consts::PI;
    let s = d as f64 / 2.0;
    let c = (6.0 / pi).powf(s);
    let n0 = terms as f64 + 2.0;
    // Upper: (2n+1)(6/(πn))^{d/2}(1+ν)^d is decreasing, so Σ_{n≥n0} <= f(n0) + ∫_{n0}^∞.
    let nu = sinc_tail(n0) / (6.0 / (pi * n0)).sqrt();
    let up_factor = (d as f64 * nu).exp();
    let int_a = |a: f64| 2.0 * a.powf(2.0 - s) / (s - 2.0) + a.powf(1.0 - s) / (s - 1.0);
    let int_b = |a: f64| 2.0 * a.powf(1.0 - s) / (s - 1.0) + a.powf(-s) / s;
    let f_n0 = (2.0 * n0 + 1.0) * c * n0.powf(-s);
    let upper = up_factor * c * int_a(n0) + up_factor * f_n0;
    // Lower: p_k >= √(6/(πn))(1 - 0.18/n - η) with η decreasing in n.
    let eta = ((2.0 / pi) * 6.0 * (-n0 * pi * pi / 24.0).exp() / (n0 * pi) + sinc_tail(n0)) / (6.0 / (pi * n0)).sqrt();
    let lower = c * ((1.0 - d as f64 * eta) * int_a(n0) - 0.18 * d as f64 * int_b(n0));
    (lower.max(0.0), upper)
}

/// Bracket for `b_d` after `K` collapsed terms.
pub fn bd_series_terms(d: usize, terms: usize) -> Result<SeriesResult, BdError> {
    if d < 4 {
        return Err(BdError::DimensionTooLow(d));
    }
    if d == 4 {
        return Err(BdError::SeriesAtFour);
    }
    let terms = terms.max(60);
    let scale = 0.5f64.powi(d as i32);
    let partial: f64 = (1..=terms as u32)
        .rev()
        .map(|k| (2.0 * k as f64 + 3.0) * irwin_hall_p(k).powi(d as i32))
        .sum();
    let (lo, hi) = remainder_bracket(d, terms);
    let lower = scale * (partial + lo);
    let upper = scale * (partial + hi);
    Ok(SeriesResult {
        d,
        value: 0.5 * (lower + upper),
        tail_bound: 0.5 * (upper - lower),
        lower,
        upper,
        partial_sum: scale * partial,
        terms,
    })
}

const MAX_TERMS: usize = 1 << 22;

/// Evaluates `b_d` for `d >= 5`, doubling the number of terms until the
/// bracket half-width is at most `tol`.
pub fn bd_series(d: usize, tol: f64) -> Result<SeriesResult, BdError> {
    if !(tol > 0.0) {
        return Err(BdError::BadTolerance(tol));
    }
    if d < 4 {
        return Err(BdError::DimensionTooLow(d));
    }
    if d == 4 {
        return Err(BdError::SeriesAtFour);
    }
    let scale = 0.5f64.powi(d as i32);
    let mut partial = 0.0;
    let mut done = 0usize;
    let mut terms = 64usize;
    loop {
        // Accumulate new terms smallest first.
        let block: f64 = ((done + 1) as u32..=terms as u32)
            .rev()
            .map(|k| (2.0 * k as f64 + 3.0) * irwin_hall_p(k).powi(d as i32))
            .sum();
        partial += block;
        done = terms;
        let (lo, hi) = remainder_bracket(d, terms);
        let lower = scale * (partial + lo);
        let upper = scale * (partial + hi);
        let half = 0.5 * (upper - lower);
        if half <= tol {
            return Ok(SeriesResult {
                d,
                value: 0.5 * (lower + upper),
                tail_bound: half,
                lower,
                upper,
                partial_sum: scale * partial,
                terms,
            });
        }
        if terms >= MAX_TERMS {
            return Err(BdError::Unreachable { tol, terms, reached: half });
        }
        terms *= 2;
    }
}

/// The double series itself, truncated at `l <= l_max`, `j <= j_max`
/// (and the first sum at `l <= l_max`). Used to cross-check the collapse.
pub fn bd_series_direct(d: usize, l_max: u64, j_max: u64) -> f64 {
    let scale = 0.5f64.powi(d as i32);
    let first: f64 = (0..=l_max).map(|l| prob_v_in_box(d, l + 1)).sum();
    let pw: Vec<f64> = (0..=l_max + j_max).map(|n| prob_w_plus_v_in_box(d, n)).collect();
    let mut second = 0.0;
    for l in 0..=l_max {
        let mut inner = 0.0;
        let mut prefix = 0.0;
        for j in 0..=j_max {
            prefix += pw[(l + j) as usize];
            inner += negbin_weight(l, j) * prefix;
        }
        second += inner;
    }
    scale * (first + second)
}

/// `b_4 = 9/(2π²)`; the series value for `d >= 5` at tolerance `10^{-6}`.
pub fn bd_value(d: usize) -> Result<f64, BdError> {
    match d {
        0..=3 => Err(BdError::DimensionTooLow(d)),
        4 => Ok(9.0 / (2.0 * std::f64::consts::PI * std::f64::consts::PI)),
        _ => {
            static CACHE: OnceLock<std::sync::Mutex<Vec<(usize, f64)>>> = OnceLock::new();
            let cache = CACHE.get_or_init(Default::default);
            if let Some(&(_, v)) = cache.lock().unwrap().iter().find(|(k, _)| *k == d) {
                return Ok(v);
            }
            let v = bd_series(d, 1e-6)?.value;
            cache.lock().unwrap().push((d, v));
            Ok(v)
        }
    }
}

/// Number of walk steps simulated per sample in [`bd_mc`].
pub const MC_CUTOFF: usize = 48;
/// Terms from `MC_CUTOFF+1` to this index are summed from the binomial mixtures.
const MC_MIXTURE_LIMIT: u64 = 20_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McTerm {
    pub n: usize,
    pub estimate: f64,
    pub se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub d: usize,
    pub estimate: f64,
    pub se: f64,
    pub samples: u64,
    /// Simulated contribution of `n <= MC_CUTOFF`, scaled by `2^{-d}`.
    pub head: f64,
    /// Deterministic contribution of `n > MC_CUTOFF`, scaled by `2^{-d}`.
    pub tail: f64,
    /// Per-term estimates of `P(V_n ∈ B∖{0})`, `n = 1..=MC_CUTOFF`.
    pub first_terms: Vec<McTerm>,
    /// Per-term estimates of `P(W₀ + V_n ∈ B)`, `n = 0..=MC_CUTOFF`.
    pub second_terms: Vec<McTerm>,
}

#[derive(Clone, Default)]
struct McAccum {
    n: u64,
    sum: f64,
    sum_sq: f64,
    first: Vec<(f64, f64)>,
    second: Vec<(f64, f64)>,
}

impl McAccum {
    fn new() -> McAccum {
        McAccum {
            first: vec![(0.0, 0.0); MC_CUTOFF + 1],
            second: vec![(0.0, 0.0); MC_CUTOFF + 1],
            ..Default::default()
        }
    }

    fn merge(mut self, other: McAccum) -> McAccum {
        self.n += other.n;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
        for (a, b) in self.first.iter_mut().zip(other.first) {
            a.0 += b.0;
            a.1 += b.1;
        }
        for (a, b) in self.second.iter_mut().zip(other.second) {
            a.0 += b.0;
            a.1 += b.1;
        }
        self
    }
}

fn mc_chunk(d: usize, samples: u64, seed: u64, c: &[f64]) -> McAccum {
    let mut rng = seeded(seed);
    let mut acc = McAccum::new();
    let mut v = [0.0f64; crate::lattice::MAX_DIM];
    for _ in 0..samples {
        v[..d].fill(0.0);
        let mut moved = false;
        // n = 0: W₀ alone is in the box.
        let mut x = c[0];
        acc.second[0].0 += 1.0;
        acc.second[0].1 += 1.0;
        let mut bits: u64 = rng.random();
        for n in 1..=MC_CUTOFF {
            if n % 64 == 0 {
                bits = rng.random();
            }
            if bits & 1 == 1 {
                moved = true;
                for vi in v[..d].iter_mut() {
                    *vi += rng.random::<f64>() * 2.0 - 1.0;
                }
            }
            bits >>= 1;
            let mut inside = true;
            // E[1(W₀ + v ∈ B) | v] = Π max(0, 1 - |v_i|/2).
            let mut cond = 1.0;
            for &vi in &v[..d] {
                let a = vi.abs();
                if a > 1.0 {
                    inside = false;
                }
                cond *= (1.0 - 0.5 * a).max(0.0);
            }
            if inside && moved {
                x += 1.0;
                acc.first[n].0 += 1.0;
                acc.first[n].1 += 1.0;
            }
            x += c[n] * cond;
            acc.second[n].0 += cond;
            acc.second[n].1 += cond * cond;
        }
        acc.n += 1;
        acc.sum += x;
        acc.sum_sq += x * x;
    }
    acc
}

/// Deterministic part of the Monte Carlo oracle: terms `n > MC_CUTOFF`.
fn mc_tail(d: usize) -> f64 {
    let pd: Vec<f64> = (0..=MC_MIXTURE_LIMIT as u32 + 1).map(|k| irwin_hall_p(k).powi(d as i32)).collect();
    let f = |k: u32| pd[k as usize];
    let mut tail = 0.0;
    for n in (MC_CUTOFF as u64 + 1)..=MC_MIXTURE_LIMIT {
        let c = n as f64 / 2.0 + 1.0;
        tail += binomial_mixture_with(n, 0, true, f) + c * binomial_mixture_with(n, 1, false, f);
    }
    // Beyond the mixture range: p_k ≈ √(6/(π(k+1))) at k ≈ n/2, integrated
    // from the midpoint past the last summed index.
    let s = d as f64 / 2.0;
    let c = (6.0 / std::f64::consts::PI).powf(s);
    let a = (MC_MIXTURE_LIMIT as f64 + 0.5) / 2.0;
    let second = 2.0 * ((a + 2.0).powf(2.0 - s) / (s - 2.0) - (a + 2.0).powf(1.0 - s) / (s - 1.0));
    let first = 2.0 * (a + 1.0).powf(1.0 - s) / (s - 1.0);
    tail + c * (first + second)
}

/// Monte Carlo oracle for `b_d`, `d >= 5`.
///
/// Each sample simulates `MC_CUTOFF` steps of the continuum lazy walk and
/// scores `Σ_n 1(V_n ∈ B∖{0}) + Σ_n c(n) P(W₀ + V_n ∈ B | V_n)`, with the
/// weights `c(n)` summed directly from the negative binomial law. Later
/// terms are added deterministically from the binomial mixtures.
pub fn bd_mc(d: usize, n_samples: u64, seed: u64) -> Result<McResult, BdError> {
    if d < 5 {
        return Err(if d == 4 { BdError::SeriesAtFour } else { BdError::DimensionTooLow(d) });
    }
    if n_samples == 0 {
        return Err(BdError::NoSamples);
    }
    let c: Vec<f64> = (0..=MC_CUTOFF as u64).map(c_weight_direct).collect();
    const CHUNK: u64 = 1 << 16;
    let chunks = n_samples.div_ceil(CHUNK);
    let run = |i: u64| {
        let size = CHUNK.min(n_samples - i * CHUNK);
        mc_chunk(d, size, derive_seed(seed, i, purpose::BD_MC), &c)
    };
    #[cfg(feature = "parallel")]
    let parts: Vec<McAccum> = {
        use rayon::prelude::*;
        (0..chunks).into_par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<McAccum> = (0..chunks).map(run).collect();
    let acc = parts.into_iter().fold(McAccum::new(), McAccum::merge);

    let n = acc.n as f64;
    let mean = acc.sum / n;
    let var = (acc.sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
    let scale = 0.5f64.powi(d as i32);
    let term = |(s, s2): (f64, f64), i: usize| {
        let m = s / n;
        let v = (s2 / n - m * m).max(0.0);
        McTerm { n: i, estimate: m, se: (v / n).sqrt() }
    };
    let tail = scale * mc_tail(d);
    Ok(McResult {
        d,
        estimate: scale * mean + tail,
        se: scale * (var / n).sqrt(),
        samples: acc.n,
        head: scale * mean,
        tail,
        first_terms: acc.first.iter().enumerate().skip(1).map(|(i, &x)| term(x, i)).collect(),
        second_terms: acc.second.iter().enumerate().map(|(i, &x)| term(x, i)).collect(),
    })
}

/// Default cutoff time: `N^{-1/2}` for `d >= 5`, `1/ln N` for `d = 4`.
pub fn default_tau(cfg: &LatticeConfig) -> f64 {
    if cfg.d() == 4 {
        1.0 / cfg.n_f64().ln()
    } else {
        cfg.n_f64().powf(-0.5)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauEstimate {
    pub tau: f64,
    pub replicates: u64,
    /// Mean of `Z₁(τ)`.
    pub numerator: f64,
    pub numerator_se: f64,
    /// Mean of `|{1}_τ|`, the number of descendants alive at `τ`.
    pub denominator: f64,
    pub denominator_se: f64,
    pub ratio: f64,
    /// Delta-method standard error of the ratio.
    pub se: f64,
}

/// `Z₁(τ)` and `|{1}_τ|` for one single-ancestor run.
fn tau_replicate(cfg: &LatticeConfig, tau: f64, seed: u64, cap: u64) -> Result<(f64, f64), BdError> {
    let log = generate_with(cfg, &[Site::ORIGIN], tau, seed, GenerateOptions { event_cap: cap })?;
    let m = cfg.m() as i32;
    let alive: Vec<Site> = log.nodes.iter().filter(|n| n.end_time > tau).map(|n| n.site).collect();
    // Every materialized label was born before τ and has a defined position.
    let mut pairs: u64 = 0;
    for b in &alive {
        for g in &log.nodes {
            let diff = b.diff(&g.site).sup_norm();
            if diff > 0 && diff <= m {
                pairs += 1;
            }
        }
    }
    Ok((pairs as f64 / cfg.psi0(), alive.len() as f64))
}

/// Simulation estimate of `b_d^τ = E Z₁(τ) / E|{1}_τ|`.
pub fn bd_tau_estimate(cfg: &LatticeConfig, tau: f64, replicates: u64, seed: u64) -> Result<TauEstimate, BdError> {
    bd_tau_estimate_with(cfg, tau, replicates, seed, crate::genealogy::DEFAULT_EVENT_CAP)
}

pub fn bd_tau_estimate_with(
    cfg: &LatticeConfig,
    tau: f64,
    replicates: u64,
    seed: u64,
    event_cap: u64,
) -> Result<TauEstimate, BdError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(BdError::BadTau(tau));
    }
    if replicates == 0 {
        return Err(BdError::NoSamples);
    }
    let run = |r: u64| tau_replicate(cfg, tau, derive_seed(seed, r, purpose::BD_TAU), event_cap);
    #[cfg(feature = "parallel")]
    let results: Vec<Result<(f64, f64), BdError>> = {
        use rayon::prelude::*;
        (0..replicates).into_par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<(f64, f64), BdError>> = (0..replicates).map(run).collect();
    let pairs: Vec<(f64, f64)> = results.into_iter().collect::<Result<_, _>>()?;

    let n = pairs.len() as f64;
    let mz = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let ma = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let denom = (n - 1.0).max(1.0);
    let vz = pairs.iter().map(|p| (p.0 - mz).powi(2)).sum::<f64>() / denom;
    let va = pairs.iter().map(|p| (p.1 - ma).powi(2)).sum::<f64>() / denom;
    let cov = pairs.iter().map(|p| (p.0 - mz) * (p.1 - ma)).sum::<f64>() / denom;
    let ratio = if ma > 0.0 { mz / ma } else { 0.0 };
    let se = if ma > 0.0 {
        ((vz - 2.0 * ratio * cov + ratio * ratio * va).max(0.0) / n).sqrt() / ma
    } else {
        f64::INFINITY
    };
    Ok(TauEstimate {
        tau,
        replicates,
        numerator: mz,
        numerator_se: (vz / n).sqrt(),
        denominator: ma,
        denominator_se: (va / n).sqrt(),
        ratio,
        se,
    })
}
