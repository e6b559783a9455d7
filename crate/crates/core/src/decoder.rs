//! Unbiased watermarked decoding, plain sampling and text attacks.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::keygen::{EmsKey, ItsKey, KeySeq, Keys};
use crate::lm::{DistributionSource, ProbVector, Token, Vocab};
use crate::Scalar;

/// Ground truth for one token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    /// Produced by the decoder from key `key` (zero-based key index).
    Watermarked { key: usize },
    Plain,
}

impl Label {
    pub fn is_watermarked(self) -> bool {
        matches!(self, Label::Watermarked { .. })
    }
}

/// Token sequence with optional per-token ground truth.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TokenSeq {
    pub tokens: Vec<Token>,
    pub labels: Option<Vec<Label>>,
    /// Prompt the text was generated from; its length is `n0`.
    pub prompt: Vec<Token>,
}

impl TokenSeq {
    pub fn unlabeled(tokens: Vec<Token>) -> Self {
        Self {
            tokens,
            labels: None,
            prompt: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n0(&self) -> usize {
        self.prompt.len()
    }

    /// Prompt followed by the first `end` tokens of the text.
    fn context(&self, end: usize) -> Vec<Token> {
        let mut ctx = Vec::with_capacity(self.prompt.len() + end);
        ctx.extend_from_slice(&self.prompt);
        ctx.extend_from_slice(&self.tokens[..end]);
        ctx
    }

    /// One-based indices where a new segment starts, i.e. positions whose
    /// watermark status differs from the previous token.
    pub fn label_boundaries(&self) -> Vec<usize> {
        let Some(labels) = &self.labels else {
            return Vec::new();
        };
        labels
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[0].is_watermarked() != w[1].is_watermarked())
            .map(|(i, _)| i + 2)
            .collect()
    }

    pub fn write(&self, path: impl AsRef<Path>, vocab: usize) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?), vocab)
    }

    pub fn write_to<W: Write>(&self, mut out: W, vocab: usize) -> Result<()> {
        let header = SeqHeader {
            vocab,
            n: self.len(),
            n0: self.n0(),
            prompt: self.prompt.clone(),
        };
        serde_json::to_writer(&mut out, &header).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
        for (i, &y) in self.tokens.iter().enumerate() {
            let line = match self.labels.as_ref().map(|l| l[i]) {
                None => SeqLine { y, label: None, k: None },
                Some(Label::Plain) => SeqLine {
                    y,
                    label: Some(LabelTag::Plain),
                    k: None,
                },
                Some(Label::Watermarked { key }) => SeqLine {
                    y,
                    label: Some(LabelTag::Watermarked),
                    k: Some(key),
                },
            };
            serde_json::to_writer(&mut out, &line).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Returns the sequence and the vocabulary size from its header.
    pub fn read(path: impl AsRef<Path>) -> Result<(Self, usize)> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<(Self, usize)> {
        let mut lines = input.lines().enumerate();
        let header: SeqHeader = match lines.next() {
            Some((_, l)) => serde_json::from_str(&l?).map_err(|e| Error::Parse {
                line: 1,
                msg: e.to_string(),
            })?,
            None => return Err(Error::Parse { line: 1, msg: "missing header".into() }),
        };
        let vocab = Vocab::new(header.vocab)?;
        if header.prompt.len() != header.n0 {
            return Err(Error::Format("prompt length does not match n0".into()));
        }
        let mut tokens = Vec::with_capacity(header.n);
        let mut labels = Vec::with_capacity(header.n);
        let mut labeled = None;
        for (idx, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse { line: idx + 1, msg };
            let rec: SeqLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            vocab.check(rec.y).map_err(|e| parse_err(e.to_string()))?;
            let label = match (rec.label, rec.k) {
                (None, None) => None,
                (Some(LabelTag::Plain), None) => Some(Label::Plain),
                (Some(LabelTag::Watermarked), Some(key)) => Some(Label::Watermarked { key }),
                _ => return Err(parse_err("watermarked tokens need `k`, plain tokens must not have it".into())),
            };
            if *labeled.get_or_insert(label.is_some()) != label.is_some() {
                return Err(parse_err("labels must be present on every token or on none".into()));
            }
            tokens.push(rec.y);
            labels.extend(label);
        }
        if tokens.len() != header.n {
            return Err(Error::Format(format!(
                "header declares {} tokens, found {}",
                header.n,
                tokens.len()
            )));
        }
        Ok((
            Self {
                tokens,
                labels: (labeled == Some(true)).then_some(labels),
                prompt: header.prompt,
            },
            vocab.size(),
        ))
    }
}

#[derive(Serialize, Deserialize)]
struct SeqHeader {
    #[serde(rename = "V")]
    vocab: usize,
    n: usize,
    n0: usize,
    prompt: Vec<Token>,
}

#[derive(Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum LabelTag {
    Watermarked,
    Plain,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SeqLine {
    y: Token,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<LabelTag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
}

/// Exponential-minimum decoding: `argmin_k -log(xi_k) / mu(k)`.
///
/// Zero-probability tokens are never selected; ties go to the lowest id.
pub fn decode_ems<T: Scalar>(key: &EmsKey<T>, mu: &ProbVector<T>) -> Result<Token> {
    decode_ems_row(key.as_slice(), mu)
}

pub fn decode_ems_row<T: Scalar>(xi: &[T], mu: &ProbVector<T>) -> Result<Token> {
    if xi.len() != mu.len() {
        return invalid(format!("key has {} components, distribution {}", xi.len(), mu.len()));
    }
    let mut best: Option<(Token, T)> = None;
    for (k, (&x, &p)) in xi.iter().zip(mu.as_slice()).enumerate() {
        if p <= T::zero() {
            continue;
        }
        let cost = -x.ln() / p;
        if best.is_none_or(|(_, c)| cost < c) {
            best = Some((k as Token, cost));
        }
    }
    best.map(|(k, _)| k)
        .ok_or_else(|| Error::InvalidInput("distribution has no positive mass".into()))
}

/// Inverse-transform decoding: the first token in permuted order whose
/// cumulative mass reaches `u`.
///
/// Zero-mass tokens own empty intervals and are skipped; a `u` on a boundary
/// belongs to the interval it closes.
pub fn decode_its<T: Scalar>(key: &ItsKey<T>, mu: &ProbVector<T>) -> Token {
    assert_eq!(key.vocab(), mu.len(), "ITS key and distribution widths differ");
    let u = key.u();
    let mut cum = T::zero();
    let mut last_positive = None;
    for token in key.order() {
        let p = mu.prob(token);
        if p <= T::zero() {
            continue;
        }
        cum = cum + p;
        last_positive = Some(token);
        if cum >= u {
            return token;
        }
    }
    // Rounding left the total just short of u.
    last_positive.expect("probability vectors carry positive mass")
}

/// Draws a token by inverse CDF in id order from a uniform `u` in [0, 1).
pub fn sample_token<T: Scalar>(mu: &ProbVector<T>, u: f64) -> Token {
    let u = T::of(u);
    let mut cum = T::zero();
    let mut last_positive = 0;
    for (k, &p) in mu.as_slice().iter().enumerate() {
        if p <= T::zero() {
            continue;
        }
        cum = cum + p;
        last_positive = k as Token;
        if u < cum {
            return k as Token;
        }
    }
    last_positive
}

fn decode_with<T: Scalar>(keys: &KeySeq<T>, step: usize, mu: &ProbVector<T>) -> Result<Token> {
    match keys.keys() {
        Keys::Ems(k) => decode_ems(&k[step], mu),
        Keys::Its(k) => Ok(decode_its(&k[step], mu)),
    }
}

/// Generates `n` tokens with `y_i = Gamma(xi_i, p(. | prompt, y_1..y_{i-1}))`.
pub fn generate_watermarked<T: Scalar, S: DistributionSource<T> + ?Sized>(
    source: &S,
    keys: &KeySeq<T>,
    n: usize,
    prompt: &[Token],
) -> Result<TokenSeq> {
    if keys.len() < n {
        return invalid(format!("{} keys cannot watermark {n} tokens", keys.len()));
    }
    let mut context = prompt.to_vec();
    let mut tokens = Vec::with_capacity(n);
    for i in 0..n {
        let mu = source.next_distribution(&context)?;
        let y = decode_with(keys, i, &mu)?;
        tokens.push(y);
        context.push(y);
    }
    Ok(TokenSeq {
        labels: Some((0..n).map(|key| Label::Watermarked { key }).collect()),
        tokens,
        prompt: prompt.to_vec(),
    })
}

/// Multinomial sampling of `n` tokens, deterministic in `seed`.
pub fn generate_plain<T: Scalar, S: DistributionSource<T> + ?Sized>(
    source: &S,
    n: usize,
    prompt: &[Token],
    seed: u64,
) -> Result<TokenSeq> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut context = prompt.to_vec();
    let tokens = sample_continuation(source, &mut context, n, &mut rng)?;
    Ok(TokenSeq {
        labels: Some(vec![Label::Plain; n]),
        tokens,
        prompt: prompt.to_vec(),
    })
}

fn sample_continuation<T: Scalar, S: DistributionSource<T> + ?Sized, R: Rng>(
    source: &S,
    context: &mut Vec<Token>,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Token>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mu = source.next_distribution(context)?;
        let y = sample_token(&mu, rng.random::<f64>());
        out.push(y);
        context.push(y);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Insertion,
    Substitution,
}

/// A single edit. `start` is the one-based index of the first affected token
/// in the sequence the attack is applied to.
///
/// Insertion places `len` plain tokens at positions `start..start+len`
/// (`start` may be one past the end). Substitution replaces positions
/// `start..start+len` with plain tokens and re-decodes the watermarked tokens
/// after the range under the new context.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub start: usize,
    pub len: usize,
}

impl AttackSpec {
    pub fn insertion(start: usize, len: usize) -> Self {
        Self {
            kind: AttackKind::Insertion,
            start,
            len,
        }
    }

    pub fn substitution(start: usize, len: usize) -> Self {
        Self {
            kind: AttackKind::Substitution,
            start,
            len,
        }
    }
}

/// Applies `spec` to `text`. Plain tokens are sampled from `source` with the
/// running context of the edited text.
pub fn apply_attack<T: Scalar, S: DistributionSource<T> + ?Sized, R: Rng>(
    text: &TokenSeq,
    spec: &AttackSpec,
    source: &S,
    keys: &KeySeq<T>,
    rng: &mut R,
) -> Result<TokenSeq> {
    let m = text.len();
    if spec.start == 0 {
        return invalid("attack positions are one-based");
    }
    let begin = spec.start - 1;
    let labels = text
        .labels
        .clone()
        .unwrap_or_else(|| (0..m).map(|key| Label::Watermarked { key }).collect());
    match spec.kind {
        AttackKind::Insertion => {
            if begin > m {
                return invalid(format!("insertion at {} beyond sequence of length {m}", spec.start));
            }
            let mut context = text.context(begin);
            let inserted = sample_continuation(source, &mut context, spec.len, rng)?;
            let mut tokens = text.tokens[..begin].to_vec();
            tokens.extend_from_slice(&inserted);
            tokens.extend_from_slice(&text.tokens[begin..]);
            let mut new_labels = labels[..begin].to_vec();
            new_labels.extend(std::iter::repeat_n(Label::Plain, spec.len));
            new_labels.extend_from_slice(&labels[begin..]);
            Ok(TokenSeq {
                tokens,
                labels: Some(new_labels),
                prompt: text.prompt.clone(),
            })
        }
        AttackKind::Substitution => {
            let end = begin + spec.len;
            if end > m {
                return invalid(format!(
                    "substitution of {}..{} beyond sequence of length {m}",
                    spec.start,
                    spec.start + spec.len
                ));
            }
            let mut context = text.context(begin);
            let mut tokens = text.tokens[..begin].to_vec();
            let mut new_labels = labels[..begin].to_vec();
            let replaced = sample_continuation(source, &mut context, spec.len, rng)?;
            tokens.extend_from_slice(&replaced);
            new_labels.extend(std::iter::repeat_n(Label::Plain, spec.len));
            for i in end..m {
                let y = match labels[i] {
                    Label::Watermarked { key } => {
                        if key >= keys.len() {
                            return invalid(format!("token {} refers to missing key {key}", i + 1));
                        }
                        let mu = source.next_distribution(&context)?;
                        decode_with(keys, key, &mu)?
                    }
                    Label::Plain => text.tokens[i],
                };
                tokens.push(y);
                context.push(y);
                new_labels.push(labels[i]);
            }
            Ok(TokenSeq {
                tokens,
                labels: Some(new_labels),
                prompt: text.prompt.clone(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keygen::{generate_keys, Scheme};
    use crate::lm::{MarkovLm, MarkovSpec};

    fn pv(p: &[f64]) -> ProbVector<f64> {
        ProbVector::new(p.to_vec()).unwrap()
    }

    #[test]
    fn ems_one_hot_ignores_key() {
        let mu = pv(&[0.0, 1.0, 0.0]);
        for xi in [[0.9, 0.1, 0.99], [0.01, 0.02, 0.03], [1.0, 1e-9, 1.0]] {
            let key = EmsKey::new(xi.to_vec()).unwrap();
            assert_eq!(decode_ems(&key, &mu).unwrap(), 1);
        }
    }

    #[test]
    fn ems_hand_example() {
        let key = EmsKey::new(vec![0.9, 0.4]).unwrap();
        assert_eq!(decode_ems(&key, &pv(&[0.5, 0.5])).unwrap(), 0);
    }

    #[test]
    fn ems_ties_go_to_lowest_id() {
        let key = EmsKey::new(vec![0.5, 0.5, 0.5]).unwrap();
        assert_eq!(decode_ems(&key, &pv(&[0.2, 0.4, 0.4])).unwrap(), 1);
    }

    #[test]
    fn its_hand_examples() {
        let mu = pv(&[0.2, 0.5, 0.3]);
        assert_eq!(decode_its(&ItsKey::identity(3, 0.6).unwrap(), &mu), 1);
        assert_eq!(decode_its(&ItsKey::identity(3, 0.15).unwrap(), &mu), 0);
        // boundary belongs to the interval it closes
        assert_eq!(decode_its(&ItsKey::identity(3, 0.2).unwrap(), &mu), 0);
        assert_eq!(decode_its(&ItsKey::identity(3, 1.0).unwrap(), &mu), 2);
    }

    #[test]
    fn its_zero_uniform_picks_first_positive_token() {
        let mu = pv(&[0.0, 0.0, 0.4, 0.6]);
        let key = ItsKey::new(vec![1, 0, 3, 2], 0.0).unwrap();
        // order: token1, token0, token3, token2
        assert_eq!(decode_its(&key, &mu), 3);
    }

    #[test]
    fn its_follows_permuted_order() {
        let mu = pv(&[0.2, 0.5, 0.3]);
        // order: 2, 0, 1 -> intervals (0,.3], (.3,.5], (.5,1]
        let key = ItsKey::new(vec![1, 2, 0], 0.45).unwrap();
        assert_eq!(decode_its(&key, &mu), 0);
    }

    fn lm() -> MarkovLm<f64> {
        MarkovLm::generate(&MarkovSpec::default()).unwrap()
    }

    #[test]
    fn empty_generation() {
        let keys = generate_keys::<f64>(Scheme::Ems, 1, 50, 1).unwrap();
        assert!(generate_watermarked(&lm(), &keys, 0, &[]).unwrap().is_empty());
        assert!(generate_plain(&lm(), 0, &[], 1).unwrap().is_empty());
    }

    #[test]
    fn deterministic_source_ignores_keys() {
        let rows: Vec<ProbVector<f64>> = (0..=4).map(|k| ProbVector::one_hot(4, (k % 4) as Token).unwrap()).collect();
        let det = MarkovLm::from_rows(4, 1, rows).unwrap();
        let a = generate_watermarked(&det, &generate_keys(Scheme::Ems, 20, 4, 1).unwrap(), 20, &[]).unwrap();
        let b = generate_watermarked(&det, &generate_keys(Scheme::Its, 20, 4, 2).unwrap(), 20, &[]).unwrap();
        assert_eq!(a.tokens, b.tokens);
        let c = generate_plain(&det, 20, &[], 9).unwrap();
        assert_eq!(a.tokens, c.tokens);
    }

    #[test]
    fn watermarked_generation_is_reproducible() {
        let keys = generate_keys::<f64>(Scheme::Ems, 500, 50, 77).unwrap();
        let a = generate_watermarked(&lm(), &keys, 500, &[3]).unwrap();
        let b = generate_watermarked(&lm(), &keys, 500, &[3]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n0(), 1);
        assert!(a.label_boundaries().is_empty());
    }

    #[test]
    fn plain_uniform_frequencies() {
        let rows = vec![ProbVector::uniform(5).unwrap(); 6];
        let src = MarkovLm::<f64>::from_rows(5, 1, rows).unwrap();
        let text = generate_plain(&src, 10_000, &[], 4).unwrap();
        let mut counts = [0usize; 5];
        for &t in &text.tokens {
            counts[t as usize] += 1;
        }
        for c in counts {
            assert!((c as f64 / 1e4 - 0.2).abs() < 0.02);
        }
    }

    #[test]
    fn substitution_marks_range_and_redecodes_tail() {
        let keys = generate_keys::<f64>(Scheme::Ems, 500, 50, 5).unwrap();
        let text = generate_watermarked(&lm(), &keys, 500, &[0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = apply_attack(&text, &AttackSpec::substitution(201, 100), &lm(), &keys, &mut rng).unwrap();
        assert_eq!(out.len(), 500);
        assert_eq!(out.label_boundaries(), vec![201, 301]);
        let labels = out.labels.as_ref().unwrap();
        for (i, l) in labels.iter().enumerate() {
            assert_eq!(l.is_watermarked(), !(200..300).contains(&i));
        }
        assert_eq!(out.tokens[..200], text.tokens[..200]);
        // the tail must be what the decoder gives under the edited context
        let mut ctx = vec![0];
        ctx.extend_from_slice(&out.tokens[..300]);
        for i in 300..500 {
            let mu = lm().next_distribution(&ctx).unwrap();
            assert_eq!(out.tokens[i], decode_ems(&keys.ems().unwrap()[i], &mu).unwrap());
            ctx.push(out.tokens[i]);
        }
    }

    #[test]
    fn insertion_bookkeeping() {
        let keys = generate_keys::<f64>(Scheme::Its, 500, 50, 5).unwrap();
        let text = generate_watermarked(&lm(), &keys, 500, &[]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let same = apply_attack(&text, &AttackSpec::insertion(301, 0), &lm(), &keys, &mut rng).unwrap();
        assert_eq!(same, text);
        let out = apply_attack(&text, &AttackSpec::insertion(301, 100), &lm(), &keys, &mut rng).unwrap();
        assert_eq!(out.len(), 600);
        assert_eq!(out.label_boundaries(), vec![301, 401]);
        assert_eq!(out.tokens[400..], text.tokens[300..]);
        let labels = out.labels.unwrap();
        assert_eq!(labels[400], Label::Watermarked { key: 300 });
    }

    #[test]
    fn composed_attacks_follow_current_indices() {
        let keys = generate_keys::<f64>(Scheme::Ems, 500, 50, 6).unwrap();
        let text = generate_watermarked(&lm(), &keys, 500, &[]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = apply_attack(&text, &AttackSpec::substitution(101, 100), &lm(), &keys, &mut rng).unwrap();
        let b = apply_attack(&a, &AttackSpec::insertion(301, 90), &lm(), &keys, &mut rng).unwrap();
        assert_eq!(b.label_boundaries(), vec![101, 201, 301, 391]);
    }

    #[test]
    fn out_of_bounds_attacks() {
        let keys = generate_keys::<f64>(Scheme::Ems, 10, 50, 6).unwrap();
        let text = generate_watermarked(&lm(), &keys, 10, &[]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(apply_attack(&text, &AttackSpec::substitution(8, 5), &lm(), &keys, &mut rng).is_err());
        assert!(apply_attack(&text, &AttackSpec::insertion(12, 1), &lm(), &keys, &mut rng).is_err());
        assert!(apply_attack(&text, &AttackSpec::insertion(0, 1), &lm(), &keys, &mut rng).is_err());
        assert!(apply_attack(&text, &AttackSpec::insertion(11, 2), &lm(), &keys, &mut rng).is_ok());
    }

    #[test]
    fn token_file_round_trip() {
        let keys = generate_keys::<f64>(Scheme::Ems, 40, 50, 6).unwrap();
        let text = generate_watermarked(&lm(), &keys, 40, &[7, 8]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let text = apply_attack(&text, &AttackSpec::substitution(10, 5), &lm(), &keys, &mut rng).unwrap();
        let mut buf = Vec::new();
        text.write_to(&mut buf, 50).unwrap();
        let first = String::from_utf8(buf.clone()).unwrap();
        assert!(first.starts_with("{\"V\":50,\"n\":40,\"n0\":2,\"prompt\":[7,8]}\n"));
        let (back, v) = TokenSeq::read_from(buf.as_slice()).unwrap();
        assert_eq!(v, 50);
        assert_eq!(back, text);
    }
}
