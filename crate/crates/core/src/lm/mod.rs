//! Vocabularies, next-token distributions and the sources that produce them.

mod markov;
mod trace;

pub use markov::{MarkovLm, MarkovSpec};
pub use trace::{
    read_trace, read_trace_from, write_trace, write_trace_to, NtpTraceRecord, TraceHeader, TraceProbs, TraceSource,
    TRACE_VERSION,
};

use crate::error::{invalid, Result};
use crate::Scalar;

/// Token id. Ids are zero based: a vocabulary of size `V` holds `0..V`.
pub type Token = u32;

/// Vocabulary of size `V >= 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Vocab(usize);

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return invalid(format!("vocabulary size must be at least 2, got {size}"));
        }
        if size > Token::MAX as usize {
            return invalid(format!("vocabulary size {size} exceeds the token id range"));
        }
        Ok(Self(size))
    }

    #[inline]
    pub fn size(self) -> usize {
        self.0
    }

    pub fn check(self, token: Token) -> Result<()> {
        if (token as usize) < self.0 {
            Ok(())
        } else {
            invalid(format!("token id {token} outside vocabulary of size {}", self.0))
        }
    }
}

/// Probability vector over a vocabulary: nonnegative, sums to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector<T> {
    probs: Vec<T>,
}

impl<T: Scalar> ProbVector<T> {
    /// Validates `probs` without renormalizing.
    pub fn new(probs: Vec<T>) -> Result<Self> {
        if probs.len() < 2 {
            return invalid("probability vector needs at least two entries");
        }
        let mut total = T::zero();
        for (k, &p) in probs.iter().enumerate() {
            if !(p >= T::zero()) || !p.is_finite() {
                return invalid(format!("probability entry {k} is {p}"));
            }
            total = total + p;
        }
        if (total - T::one()).abs() > T::mass_tolerance(probs.len()) {
            return invalid(format!("probabilities sum to {total}, expected 1"));
        }
        Ok(Self { probs })
    }

    /// Rescales nonnegative weights to unit mass.
    pub fn normalized(weights: Vec<T>) -> Result<Self> {
        let total: T = weights.iter().copied().sum();
        if !(total > T::zero()) || !total.is_finite() {
            return invalid("weights have no positive finite mass");
        }
        if weights.iter().any(|w| !(*w >= T::zero())) {
            return invalid("weights must be nonnegative");
        }
        Self::new(weights.into_iter().map(|w| w / total).collect())
    }

    pub fn uniform(size: usize) -> Result<Self> {
        Vocab::new(size)?;
        let p = T::one() / T::of_usize(size);
        Ok(Self { probs: vec![p; size] })
    }

    pub fn one_hot(size: usize, token: Token) -> Result<Self> {
        Vocab::new(size)?.check(token)?;
        let mut probs = vec![T::zero(); size];
        probs[token as usize] = T::one();
        Ok(Self { probs })
    }

    /// Tempered distribution proportional to `p^(1/temperature)`.
    ///
    /// As the temperature goes to zero the mass concentrates on the argmax;
    /// tied maxima share it equally.
    pub fn with_temperature(&self, temperature: T) -> Result<Self> {
        if !(temperature > T::zero()) || !temperature.is_finite() {
            return invalid(format!("temperature must be positive, got {temperature}"));
        }
        if temperature == T::one() {
            return Ok(self.clone());
        }
        let max_log = self
            .probs
            .iter()
            .filter(|p| **p > T::zero())
            .map(|p| p.ln())
            .fold(T::neg_infinity(), T::max);
        let scaled: Vec<T> = self
            .probs
            .iter()
            .map(|&p| {
                if p > T::zero() {
                    ((p.ln() - max_log) / temperature).exp()
                } else {
                    T::zero()
                }
            })
            .collect();
        Self::normalized(scaled)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    #[inline]
    pub fn prob(&self, token: Token) -> T {
        self.probs[token as usize]
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.probs
    }

    pub fn into_vec(self) -> Vec<T> {
        self.probs
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> T {
        self.probs
            .iter()
            .filter(|p| **p > T::zero())
            .map(|&p| -p * p.ln())
            .sum()
    }

    pub fn argmax(&self) -> Token {
        let mut best = 0;
        for (k, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = k;
            }
        }
        best as Token
    }
}

/// Deterministic map from a context to the next-token distribution.
///
/// Implementations are immutable after construction; identical contexts
/// always yield identical distributions.
pub trait DistributionSource<T: Scalar>: Send + Sync {
    fn vocab(&self) -> Vocab;

    /// Distribution of the token following `context`. An empty context is
    /// the empty-prompt start state.
    fn next_distribution(&self, context: &[Token]) -> Result<ProbVector<T>>;
}

impl<T: Scalar, S: DistributionSource<T> + ?Sized> DistributionSource<T> for &S {
    fn vocab(&self) -> Vocab {
        (**self).vocab()
    }

    fn next_distribution(&self, context: &[Token]) -> Result<ProbVector<T>> {
        (**self).next_distribution(context)
    }
}

/// Per-position distributions `mu_i = p(. | prompt, text[..i])`.
pub fn text_distributions<T: Scalar, S: DistributionSource<T> + ?Sized>(
    source: &S,
    prompt: &[Token],
    text: &[Token],
) -> Result<Vec<ProbVector<T>>> {
    let mut context = Vec::with_capacity(prompt.len() + text.len());
    context.extend_from_slice(prompt);
    let mut out = Vec::with_capacity(text.len());
    for &y in text {
        out.push(source.next_distribution(&context)?);
        context.push(y);
    }
    Ok(out)
}

/// Probability each realized token had under its own distribution.
pub fn realized_probs<T: Scalar>(dists: &[ProbVector<T>], text: &[Token]) -> Vec<T> {
    dists.iter().zip(text).map(|(mu, &y)| mu.prob(y)).collect()
}

/// Empirical mean of `1 - p_i`; `sqrt(n)` times this is the watermark
/// potential of the sequence.
pub fn mean_potential<T: Scalar>(ntps: &[T]) -> T {
    if ntps.is_empty() {
        return T::zero();
    }
    ntps.iter().map(|&p| T::one() - p).sum::<T>() / T::of_usize(ntps.len())
}
