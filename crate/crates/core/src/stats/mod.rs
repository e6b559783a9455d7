//! Detection statistics. Every statistic is oriented so that larger values
//! are stronger evidence of a watermark.

mod detector;
mod huber;

pub use detector::{scan_max, Detector, PairScores, ScanAlignment, StatParams, TextEvidence};
pub use huber::{huber_max, huber_objective};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::keygen::{ItsKey, KeyAccess, Scheme};
use crate::lm::{text_distributions, DistributionSource, ProbVector, Token};
use crate::Scalar;

/// Floor applied to next-token probabilities before they are inverted.
pub const NTP_FLOOR: f64 = 1e-12;

/// Floor applied to `xi` and `1 - xi` before taking logarithms.
pub const XI_FLOOR: f64 = 1e-300;

/// Stable statistic identifiers used in configs and on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StatisticKind {
    #[serde(rename = "ems-base")]
    EmsBase,
    #[serde(rename = "ems-lr")]
    EmsLr,
    #[serde(rename = "ems-shrink")]
    EmsShrink,
    #[serde(rename = "ems-onemlog")]
    EmsOneMinusLog,
    #[serde(rename = "its-base")]
    ItsBase,
    #[serde(rename = "its-weighted")]
    ItsWeighted,
    #[serde(rename = "its-huber")]
    ItsHuber,
}

impl StatisticKind {
    pub const ALL: [StatisticKind; 7] = [
        StatisticKind::EmsBase,
        StatisticKind::EmsLr,
        StatisticKind::EmsShrink,
        StatisticKind::EmsOneMinusLog,
        StatisticKind::ItsBase,
        StatisticKind::ItsWeighted,
        StatisticKind::ItsHuber,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StatisticKind::EmsBase => "ems-base",
            StatisticKind::EmsLr => "ems-lr",
            StatisticKind::EmsShrink => "ems-shrink",
            StatisticKind::EmsOneMinusLog => "ems-onemlog",
            StatisticKind::ItsBase => "its-base",
            StatisticKind::ItsWeighted => "its-weighted",
            StatisticKind::ItsHuber => "its-huber",
        }
    }

    pub fn scheme(self) -> Scheme {
        match self {
            StatisticKind::EmsBase
            | StatisticKind::EmsLr
            | StatisticKind::EmsShrink
            | StatisticKind::EmsOneMinusLog => Scheme::Ems,
            StatisticKind::ItsBase | StatisticKind::ItsWeighted | StatisticKind::ItsHuber => Scheme::Its,
        }
    }
}

impl fmt::Display for StatisticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StatisticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StatisticKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = StatisticKind::ALL.iter().map(|k| k.name()).collect();
                Error::InvalidInput(format!("unknown statistic `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

/// Nonnegative per-position weights.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector<T>(Vec<T>);

impl<T: Scalar> WeightVector<T> {
    pub fn new(w: Vec<T>) -> Result<Self> {
        if let Some((i, x)) = w.iter().enumerate().find(|(_, x)| !(**x >= T::zero()) || !x.is_finite()) {
            return invalid(format!("weight {i} is {x}; weights must be finite and nonnegative"));
        }
        Ok(Self(w))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![T::one(); n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    /// `max_i w_i^2`.
    pub fn omega_max(&self) -> T {
        self.0.iter().map(|&w| w * w).fold(T::zero(), T::max)
    }

    pub fn scaled(&self, c: T) -> Result<Self> {
        Self::new(self.0.iter().map(|&w| w * c).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NtpProvenance {
    Exact,
    EstimatedEmptyPrompt,
    Trace,
}

/// Per-position next-token probabilities, each in `(0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NtpVector<T> {
    p: Vec<T>,
    provenance: NtpProvenance,
}

impl<T: Scalar> NtpVector<T> {
    pub fn new(p: Vec<T>, provenance: NtpProvenance) -> Result<Self> {
        if let Some((i, x)) = p.iter().enumerate().find(|(_, x)| !(**x > T::zero() && **x <= T::one())) {
            return invalid(format!("NTP {i} is {x}; expected a value in (0, 1]"));
        }
        Ok(Self { p, provenance })
    }

    /// Clamps raw probabilities into `[NTP_FLOOR, 1]`.
    pub fn floored(raw: &[T], provenance: NtpProvenance) -> Self {
        let floor = T::of(NTP_FLOOR);
        Self {
            p: raw.iter().map(|&x| x.max(floor).min(T::one())).collect(),
            provenance,
        }
    }

    pub fn as_slice(&self) -> &[T] {
        &self.p
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn provenance(&self) -> NtpProvenance {
        self.provenance
    }
}

/// Likelihood-ratio weights `w_i = (1 - p_i) / p_i`.
pub fn lr_weights<T: Scalar>(ntp: &NtpVector<T>) -> WeightVector<T> {
    WeightVector(ntp.p.iter().map(|&p| (T::one() - p) / p).collect())
}

/// Shrinks estimated NTPs toward a baseline: `lambda * q + (1 - lambda) * p0`.
pub fn shrink_ntp<T: Scalar>(q: &[T], lambda: T, p0: &[T], provenance: NtpProvenance) -> Result<NtpVector<T>> {
    if !(lambda > T::zero() && lambda < T::one()) {
        return invalid(format!("shrinkage lambda must lie in (0, 1), got {lambda}"));
    }
    if q.len() != p0.len() {
        return invalid("estimate and baseline lengths differ");
    }
    if q.iter().any(|x| !(*x >= T::zero() && *x <= T::one())) {
        return invalid("estimated NTPs must lie in [0, 1]");
    }
    if p0.iter().any(|x| !(*x > T::zero() && *x < T::one())) {
        return invalid("baseline probabilities must lie in (0, 1)");
    }
    let p = q
        .iter()
        .zip(p0)
        .map(|(&q, &b)| lambda * q + (T::one() - lambda) * b)
        .collect();
    NtpVector::new(p, provenance)
}

/// Centered EMS term `log(xi) + 1`; zero mean under a null key.
#[inline]
pub fn ems_term<T: Scalar>(xi: T) -> (T, bool) {
    let floor = T::of(XI_FLOOR);
    if xi < floor {
        (floor.ln() + T::one(), true)
    } else {
        (xi.ln() + T::one(), false)
    }
}

/// `-log(1 - xi)`; Exp(1) under a null key.
#[inline]
pub fn onemlog_term<T: Scalar>(xi: T) -> (T, bool) {
    let floor = T::of(XI_FLOOR);
    let gap = T::one() - xi;
    if gap < floor {
        (-floor.ln(), true)
    } else {
        (-gap.ln(), false)
    }
}

/// ITS term `(u - 1/2) * (rank / (V - 1) - 1/2)` with a zero-based rank.
#[inline]
pub fn its_term<T: Scalar>(u: T, rank: u32, vocab: usize) -> T {
    let h = T::half();
    (u - h) * (T::of(rank as f64) / T::of_usize(vocab - 1) - h)
}

/// A statistic value along with how many logarithm arguments were floored.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Phi<T> {
    pub value: T,
    pub clamped: usize,
}

fn check_aligned<T: Scalar, K: KeyAccess<T> + ?Sized>(
    keys: &K,
    text: &[Token],
    weights: &WeightVector<T>,
    scheme: Scheme,
) -> Result<()> {
    if keys.scheme() != scheme {
        return invalid(format!("statistic needs {scheme} keys, got {}", keys.scheme()));
    }
    if text.is_empty() {
        return invalid("cannot score an empty text");
    }
    if keys.len() < text.len() || weights.len() != text.len() {
        return invalid(format!(
            "misaligned inputs: {} keys, {} tokens, {} weights",
            keys.len(),
            text.len(),
            weights.len()
        ));
    }
    if let Some(&t) = text.iter().find(|&&t| t as usize >= keys.vocab()) {
        return invalid(format!("token {t} outside vocabulary of size {}", keys.vocab()));
    }
    Ok(())
}

fn weighted_mean<T: Scalar>(
    text: &[Token],
    weights: &WeightVector<T>,
    mut term: impl FnMut(usize, Token) -> (T, bool),
) -> Phi<T> {
    let mut total = T::zero();
    let mut clamped = 0;
    for (i, (&y, &w)) in text.iter().zip(weights.as_slice()).enumerate() {
        let (t, c) = term(i, y);
        total = total + w * t;
        clamped += c as usize;
    }
    Phi {
        value: total / T::of_usize(text.len()),
        clamped,
    }
}

/// Weighted EMS statistic `(1/n) sum w_i (log xi_{i, y_i} + 1)`.
pub fn phi_ems<T: Scalar, K: KeyAccess<T> + ?Sized>(
    keys: &K,
    text: &[Token],
    weights: &WeightVector<T>,
) -> Result<Phi<T>> {
    check_aligned(keys, text, weights, Scheme::Ems)?;
    Ok(weighted_mean(text, weights, |i, y| ems_term(keys.ems_component(i, y))))
}

/// `(1/n) sum w_i (-log(1 - xi_{i, y_i}))`.
pub fn phi_ems_onemlog<T: Scalar, K: KeyAccess<T> + ?Sized>(
    keys: &K,
    text: &[Token],
    weights: &WeightVector<T>,
) -> Result<Phi<T>> {
    check_aligned(keys, text, weights, Scheme::Ems)?;
    Ok(weighted_mean(text, weights, |i, y| onemlog_term(keys.ems_component(i, y))))
}

/// Weighted ITS statistic `(1/n) sum w_i (u_i - 1/2)(rank_i(y_i)/(V-1) - 1/2)`.
pub fn phi_its<T: Scalar, K: KeyAccess<T> + ?Sized>(keys: &K, text: &[Token], weights: &WeightVector<T>) -> Result<T> {
    check_aligned(keys, text, weights, Scheme::Its)?;
    let vocab = keys.vocab();
    Ok(weighted_mean(text, weights, |i, y| {
        let key = keys.its_key(i);
        (its_term(key.u(), key.rank(y), vocab), false)
    })
    .value)
}

/// Per-position ITS evidence: the realized token's rank, the key uniform,
/// the token's interval in permuted cumulative order, and whether the
/// uniform falls inside it.
#[derive(Clone, Debug, PartialEq)]
pub struct ItsEvidence<T> {
    pub rank: Vec<u32>,
    pub u: Vec<T>,
    pub lower: Vec<T>,
    pub mass: Vec<T>,
    pub hit: Vec<bool>,
}

impl<T: Scalar> ItsEvidence<T> {
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }
}

/// Interval `[lower, lower + mu(y)]` of token `y` under key `key`, summed in
/// the same order the decoder uses.
pub fn its_interval<T: Scalar>(key: &ItsKey<T>, mu: &ProbVector<T>, y: Token) -> (T, T) {
    its_interval_ordered(&key.order(), mu, y)
}

pub(crate) fn its_interval_ordered<T: Scalar>(order: &[Token], mu: &ProbVector<T>, y: Token) -> (T, T) {
    let mut lower = T::zero();
    for &t in order {
        if t == y {
            break;
        }
        let p = mu.prob(t);
        if p > T::zero() {
            lower = lower + p;
        }
    }
    (lower, lower + mu.prob(y))
}

/// Evidence against per-position distributions already computed for the
/// text.
pub fn its_evidence_from<T: Scalar, K: KeyAccess<T> + ?Sized>(
    keys: &K,
    text: &[Token],
    dists: &[ProbVector<T>],
) -> Result<ItsEvidence<T>> {
    if keys.scheme() != Scheme::Its {
        return invalid("ITS evidence needs ITS keys");
    }
    if keys.len() < text.len() || dists.len() != text.len() {
        return invalid("keys, text and distributions must be aligned");
    }
    let n = text.len();
    let mut ev = ItsEvidence {
        rank: Vec::with_capacity(n),
        u: Vec::with_capacity(n),
        lower: Vec::with_capacity(n),
        mass: Vec::with_capacity(n),
        hit: Vec::with_capacity(n),
    };
    for (i, (&y, mu)) in text.iter().zip(dists).enumerate() {
        let key = keys.its_key(i);
        let (lo, hi) = its_interval(&key, mu, y);
        let u = key.u();
        ev.rank.push(key.rank(y));
        ev.u.push(u);
        ev.lower.push(lo);
        ev.mass.push(mu.prob(y));
        ev.hit.push(lo <= u && u <= hi);
    }
    Ok(ev)
}

/// Evidence with `mu_i` taken from `source` under an empty initial prompt.
pub fn its_evidence<T: Scalar, K: KeyAccess<T> + ?Sized, S: DistributionSource<T> + ?Sized>(
    keys: &K,
    text: &[Token],
    source: &S,
) -> Result<ItsEvidence<T>> {
    let dists = text_distributions(source, &[], text)?;
    its_evidence_from(keys, text, &dists)
}

/// Huber-contamination statistic
/// `max_eps sum_i log((1 - eps) / p_i * hit_i + eps)`.
pub fn phi_its_huber<T: Scalar>(evidence: &ItsEvidence<T>) -> Result<T> {
    if let Some((i, p)) = evidence.mass.iter().enumerate().find(|(_, p)| !(**p > T::zero())) {
        return invalid(format!("interval mass {i} is {p}; must be positive"));
    }
    Ok(huber_max(evidence.hit.iter().copied().zip(evidence.mass.iter().copied())))
}
