//! Watermark key sequences for the EMS and ITS schemes.
//!
//! Keys are counter based: the key for step `i` of stream `s` under master
//! seed `seed` is read from a ChaCha8 stream `s` at a word offset fixed by
//! `i`. Any single key can therefore be regenerated without touching the
//! others, and replicate streams evaluated in any order or on any thread
//! produce identical values. Stream 0 is reserved for the detection key;
//! randomization replicates `t >= 1` use stream `t`.

use std::borrow::Cow;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::lm::{Token, Vocab};
use crate::Scalar;

/// Words reserved per step inside a stream.
const STEP_SHIFT: u32 = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Ems,
    Its,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Ems => "ems",
            Scheme::Its => "its",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ems" => Ok(Scheme::Ems),
            "its" => Ok(Scheme::Its),
            other => Err(Error::InvalidInput(format!("unknown scheme `{other}`; expected ems or its"))),
        }
    }
}

/// One uniform per vocabulary entry.
#[derive(Clone, Debug, PartialEq)]
pub struct EmsKey<T> {
    xi: Vec<T>,
}

impl<T: Scalar> EmsKey<T> {
    pub fn new(xi: Vec<T>) -> Result<Self> {
        if xi.iter().any(|x| !(*x >= T::zero() && *x <= T::one())) {
            return invalid("EMS key components must lie in [0, 1]");
        }
        Ok(Self { xi })
    }

    #[inline]
    pub fn component(&self, token: Token) -> T {
        self.xi[token as usize]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.xi
    }
}

/// A permutation of the vocabulary together with a uniform.
///
/// `rank[k]` is the zero-based position of token `k` in the permuted order.
#[derive(Clone, Debug, PartialEq)]
pub struct ItsKey<T> {
    rank: Vec<u32>,
    u: T,
}

impl<T: Scalar> ItsKey<T> {
    pub fn new(rank: Vec<u32>, u: T) -> Result<Self> {
        let mut seen = vec![false; rank.len()];
        for &r in &rank {
            if r as usize >= rank.len() || std::mem::replace(&mut seen[r as usize], true) {
                return invalid("ITS ranks must form a permutation");
            }
        }
        if !(u >= T::zero() && u <= T::one()) {
            return invalid(format!("ITS uniform must lie in [0, 1], got {u}"));
        }
        Ok(Self { rank, u })
    }

    pub fn identity(vocab: usize, u: T) -> Result<Self> {
        Self::new((0..vocab as u32).collect(), u)
    }

    #[inline]
    pub fn rank(&self, token: Token) -> u32 {
        self.rank[token as usize]
    }

    #[inline]
    pub fn u(&self) -> T {
        self.u
    }

    pub fn ranks(&self) -> &[u32] {
        &self.rank
    }

    pub fn vocab(&self) -> usize {
        self.rank.len()
    }

    /// Tokens listed in permuted order.
    pub fn order(&self) -> Vec<Token> {
        let mut order = vec![0; self.rank.len()];
        for (token, &r) in self.rank.iter().enumerate() {
            order[r as usize] = token as Token;
        }
        order
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Keys<T> {
    Ems(Vec<EmsKey<T>>),
    Its(Vec<ItsKey<T>>),
}

/// Materialized key sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct KeySeq<T> {
    vocab: usize,
    seed: u64,
    stream: u64,
    keys: Keys<T>,
}

impl<T: Scalar> KeySeq<T> {
    /// Wraps hand-built keys. Seed and stream are informational only.
    pub fn from_keys(vocab: usize, seed: u64, keys: Keys<T>) -> Result<Self> {
        Vocab::new(vocab)?;
        let ok = match &keys {
            Keys::Ems(k) => k.iter().all(|k| k.xi.len() == vocab),
            Keys::Its(k) => k.iter().all(|k| k.rank.len() == vocab),
        };
        if !ok {
            return invalid("key width does not match vocabulary size");
        }
        Ok(Self {
            vocab,
            seed,
            stream: 0,
            keys,
        })
    }

    pub fn scheme(&self) -> Scheme {
        match self.keys {
            Keys::Ems(_) => Scheme::Ems,
            Keys::Its(_) => Scheme::Its,
        }
    }

    pub fn len(&self) -> usize {
        match &self.keys {
            Keys::Ems(k) => k.len(),
            Keys::Its(k) => k.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn keys(&self) -> &Keys<T> {
        &self.keys
    }

    pub fn ems(&self) -> Option<&[EmsKey<T>]> {
        match &self.keys {
            Keys::Ems(k) => Some(k),
            Keys::Its(_) => None,
        }
    }

    pub fn its(&self) -> Option<&[ItsKey<T>]> {
        match &self.keys {
            Keys::Its(k) => Some(k),
            Keys::Ems(_) => None,
        }
    }

    /// Keys at positions `start..start + len`.
    pub fn slice(&self, start: usize, len: usize) -> Self {
        let keys = match &self.keys {
            Keys::Ems(k) => Keys::Ems(k[start..start + len].to_vec()),
            Keys::Its(k) => Keys::Its(k[start..start + len].to_vec()),
        };
        Self { keys, ..*self }
    }
}

/// Lazily evaluated key stream `(scheme, V, seed, stream)`.
#[derive(Clone, Debug)]
pub struct KeyStream {
    scheme: Scheme,
    vocab: Vocab,
    seed: u64,
    stream: u64,
    base: ChaCha8Rng,
}

impl KeyStream {
    pub fn new(scheme: Scheme, vocab: usize, seed: u64, stream: u64) -> Result<Self> {
        let mut base = ChaCha8Rng::seed_from_u64(seed);
        base.set_stream(stream);
        Ok(Self {
            scheme,
            vocab: Vocab::new(vocab)?,
            seed,
            stream,
            base,
        })
    }

    /// Stream 0: the key used for watermarking.
    pub fn detection(scheme: Scheme, vocab: usize, seed: u64) -> Result<Self> {
        Self::new(scheme, vocab, seed, 0)
    }

    /// Stream `t` for randomization replicate `t >= 1`.
    pub fn null(scheme: Scheme, vocab: usize, seed: u64, replicate: u64) -> Result<Self> {
        if replicate == 0 {
            return invalid("null replicates are numbered from 1");
        }
        Self::new(scheme, vocab, seed, replicate)
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn vocab(&self) -> usize {
        self.vocab.size()
    }

    fn step_rng(&self, step: usize, word: u128) -> ChaCha8Rng {
        let mut rng = self.base.clone();
        rng.set_word_pos(((step as u128) << STEP_SHIFT) + word);
        rng
    }

    /// `xi_{step, token}` without materializing the rest of the row.
    pub fn ems_component<T: Scalar>(&self, step: usize, token: Token) -> T {
        let mut rng = self.step_rng(step, 2 * token as u128);
        T::of(open_unit(rng.next_u64()))
    }

    /// Components `xi_{step, k}` for every `k` in `tokens`.
    pub fn ems_components<T: Scalar>(&self, step: usize, tokens: &[Token], out: &mut [T]) {
        if tokens.len() * 8 >= self.vocab.size() {
            let mut rng = self.step_rng(step, 0);
            let row: Vec<f64> = (0..self.vocab.size()).map(|_| open_unit(rng.next_u64())).collect();
            for (o, &t) in out.iter_mut().zip(tokens) {
                *o = T::of(row[t as usize]);
            }
        } else {
            for (o, &t) in out.iter_mut().zip(tokens) {
                *o = self.ems_component(step, t);
            }
        }
    }

    pub fn ems_key<T: Scalar>(&self, step: usize) -> EmsKey<T> {
        let mut rng = self.step_rng(step, 0);
        EmsKey {
            xi: (0..self.vocab.size()).map(|_| T::of(open_unit(rng.next_u64()))).collect(),
        }
    }

    pub fn its_key<T: Scalar>(&self, step: usize) -> ItsKey<T> {
        let mut rng = self.step_rng(step, 0);
        let u = T::of(open_unit(rng.next_u64()));
        let mut order: Vec<u32> = (0..self.vocab.size() as u32).collect();
        order.shuffle(&mut rng);
        let mut rank = vec![0u32; order.len()];
        for (r, &token) in order.iter().enumerate() {
            rank[token as usize] = r as u32;
        }
        ItsKey { rank, u }
    }

    pub fn materialize<T: Scalar>(&self, n: usize) -> KeySeq<T> {
        let keys = match self.scheme {
            Scheme::Ems => Keys::Ems((0..n).map(|i| self.ems_key(i)).collect()),
            Scheme::Its => Keys::Its((0..n).map(|i| self.its_key(i)).collect()),
        };
        KeySeq {
            vocab: self.vocab.size(),
            seed: self.seed,
            stream: self.stream,
            keys,
        }
    }

    /// View of the first `n` keys usable wherever a [`KeyAccess`] is expected.
    pub fn bounded(&self, n: usize) -> BoundedStream<'_> {
        BoundedStream { stream: self, n }
    }
}

/// Maps 64 random bits to the open interval (0, 1).
#[inline]
fn open_unit(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Detection keys for `n` steps.
pub fn generate_keys<T: Scalar>(scheme: Scheme, n: usize, vocab: usize, seed: u64) -> Result<KeySeq<T>> {
    if n == 0 {
        return invalid("key sequence length must be at least 1");
    }
    Ok(KeyStream::detection(scheme, vocab, seed)?.materialize(n))
}

/// Keys of randomization replicate `replicate`, independent of the
/// detection keys and of every other replicate.
pub fn generate_null_keys<T: Scalar>(
    scheme: Scheme,
    n: usize,
    vocab: usize,
    replicate: u64,
    seed: u64,
) -> Result<KeySeq<T>> {
    if n == 0 {
        return invalid("key sequence length must be at least 1");
    }
    Ok(KeyStream::null(scheme, vocab, seed, replicate)?.materialize(n))
}

/// Read access to a key sequence as needed by the detection statistics.
pub trait KeyAccess<T: Scalar>: Sync {
    fn scheme(&self) -> Scheme;
    fn len(&self) -> usize;
    fn vocab(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// EMS component `xi_{step, token}`.
    fn ems_component(&self, step: usize, token: Token) -> T;

    fn ems_components(&self, step: usize, tokens: &[Token], out: &mut [T]) {
        for (o, &t) in out.iter_mut().zip(tokens) {
            *o = self.ems_component(step, t);
        }
    }

    fn its_key(&self, step: usize) -> Cow<'_, ItsKey<T>>;
}

impl<T: Scalar> KeyAccess<T> for KeySeq<T> {
    fn scheme(&self) -> Scheme {
        KeySeq::scheme(self)
    }

    fn len(&self) -> usize {
        KeySeq::len(self)
    }

    fn vocab(&self) -> usize {
        self.vocab
    }

    fn ems_component(&self, step: usize, token: Token) -> T {
        match &self.keys {
            Keys::Ems(k) => k[step].component(token),
            Keys::Its(_) => panic!("EMS component requested from an ITS key sequence"),
        }
    }

    fn its_key(&self, step: usize) -> Cow<'_, ItsKey<T>> {
        match &self.keys {
            Keys::Its(k) => Cow::Borrowed(&k[step]),
            Keys::Ems(_) => panic!("ITS key requested from an EMS key sequence"),
        }
    }
}

/// First `n` keys of a [`KeyStream`], evaluated on demand.
#[derive(Clone, Copy, Debug)]
pub struct BoundedStream<'a> {
    stream: &'a KeyStream,
    n: usize,
}

impl<T: Scalar> KeyAccess<T> for BoundedStream<'_> {
    fn scheme(&self) -> Scheme {
        self.stream.scheme
    }

    fn len(&self) -> usize {
        self.n
    }

    fn vocab(&self) -> usize {
        self.stream.vocab()
    }

    fn ems_component(&self, step: usize, token: Token) -> T {
        self.stream.ems_component(step, token)
    }

    fn ems_components(&self, step: usize, tokens: &[Token], out: &mut [T]) {
        self.stream.ems_components(step, tokens, out)
    }

    fn its_key(&self, step: usize) -> Cow<'_, ItsKey<T>> {
        Cow::Owned(self.stream.its_key(step))
    }
}

/// Key file contents. Keys are regenerated from the seed, so the file holds
/// four fields regardless of length.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeySpec {
    pub scheme: Scheme,
    pub n: usize,
    #[serde(rename = "V")]
    pub vocab: usize,
    pub seed: u64,
}

impl KeySpec {
    pub fn generate<T: Scalar>(&self) -> Result<KeySeq<T>> {
        generate_keys(self.scheme, self.n, self.vocab, self.seed)
    }

    pub fn stream(&self) -> Result<KeyStream> {
        KeyStream::detection(self.scheme, self.vocab, self.seed)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut line = serde_json::to_string(self).map_err(std::io::Error::from)?;
        line.push('\n');
        fs::write(path, line)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let line = text.lines().next().unwrap_or("");
        let spec: Self = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?;
        Vocab::new(spec.vocab)?;
        if spec.n == 0 {
            return invalid("key file declares zero keys");
        }
        Ok(spec)
    }
}
