//! Line-oriented next-token-probability traces.
//!
//! The first line is a header object `{"version":1,"V":..,"truncated":..}`.
//! Every following line is one record, either
//! `{"i":..,"y":..,"p":[..]}` (full vector) or
//! `{"i":..,"y":..,"ids":[..],"p":[..],"r":..}` (top-K with residual mass).
//! Numbers use the shortest decimal that round-trips.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DistributionSource, ProbVector, Token, Vocab};
use crate::error::{invalid, Error, Result};
use crate::Scalar;

pub const TRACE_VERSION: u32 = 1;

/// Mass tolerance for exported records.
const TRACE_MASS_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub version: u32,
    #[serde(rename = "V")]
    pub vocab: usize,
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TraceProbs {
    Full(Vec<f64>),
    Truncated {
        ids: Vec<Token>,
        probs: Vec<f64>,
        residual: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct NtpTraceRecord {
    /// One-based position.
    pub step: usize,
    pub token: Token,
    pub probs: TraceProbs,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    i: usize,
    y: Token,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ids: Option<Vec<Token>>,
    p: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r: Option<f64>,
}

impl NtpTraceRecord {
    pub fn is_truncated(&self) -> bool {
        matches!(self.probs, TraceProbs::Truncated { .. })
    }

    /// Probability of the realized token.
    pub fn token_prob(&self) -> f64 {
        match &self.probs {
            TraceProbs::Full(p) => p[self.token as usize],
            TraceProbs::Truncated { ids, probs, .. } => ids
                .iter()
                .position(|&id| id == self.token)
                .map(|k| probs[k])
                .unwrap_or(0.0),
        }
    }

    fn validate(&self, vocab: usize) -> Result<()> {
        if self.token as usize >= vocab {
            return Err(Error::Format(format!(
                "step {}: token {} outside vocabulary of size {vocab}",
                self.step, self.token
            )));
        }
        let bad = |msg: String| Err(Error::Format(format!("step {}: {msg}", self.step)));
        match &self.probs {
            TraceProbs::Full(p) => {
                if p.len() != vocab {
                    return bad(format!("full vector has {} entries, expected {vocab}", p.len()));
                }
                if p.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
                    return bad("negative or non-finite probability".into());
                }
                let total: f64 = p.iter().sum();
                if (total - 1.0).abs() > TRACE_MASS_TOL {
                    return bad(format!("probabilities sum to {total}"));
                }
            }
            TraceProbs::Truncated {
                ids,
                probs,
                residual,
            } => {
                if ids.len() != probs.len() || ids.is_empty() {
                    return bad("ids and probabilities must be nonempty and aligned".into());
                }
                if ids.len() > vocab {
                    return bad("more listed ids than vocabulary entries".into());
                }
                let mut seen = vec![false; vocab];
                for &id in ids {
                    if id as usize >= vocab || std::mem::replace(&mut seen[id as usize], true) {
                        return bad(format!("listed id {id} repeated or out of range"));
                    }
                }
                if !ids.contains(&self.token) {
                    return bad(format!("realized token {} not among listed ids", self.token));
                }
                if probs.iter().chain(Some(residual)).any(|x| !(*x >= 0.0) || !x.is_finite()) {
                    return bad("negative or non-finite probability".into());
                }
                let total: f64 = probs.iter().sum::<f64>() + residual;
                if (total - 1.0).abs() > TRACE_MASS_TOL {
                    return bad(format!("listed mass plus residual is {total}"));
                }
            }
        }
        Ok(())
    }

    fn to_raw(&self) -> RawRecord {
        match &self.probs {
            TraceProbs::Full(p) => RawRecord {
                i: self.step,
                y: self.token,
                ids: None,
                p: p.clone(),
                r: None,
            },
            TraceProbs::Truncated {
                ids,
                probs,
                residual,
            } => RawRecord {
                i: self.step,
                y: self.token,
                ids: Some(ids.clone()),
                p: probs.clone(),
                r: Some(*residual),
            },
        }
    }

    fn from_raw(raw: RawRecord) -> std::result::Result<Self, String> {
        let probs = match (raw.ids, raw.r) {
            (None, None) => TraceProbs::Full(raw.p),
            (Some(ids), Some(residual)) => TraceProbs::Truncated {
                ids,
                probs: raw.p,
                residual,
            },
            _ => return Err("truncated records need both `ids` and `r`".into()),
        };
        Ok(Self {
            step: raw.i,
            token: raw.y,
            probs,
        })
    }

    /// Expands to a full vector; residual mass is spread uniformly over the
    /// unlisted ids.
    pub fn to_prob_vector<T: Scalar>(&self, vocab: usize) -> Result<ProbVector<T>> {
        let full = match &self.probs {
            TraceProbs::Full(p) => p.clone(),
            TraceProbs::Truncated {
                ids,
                probs,
                residual,
            } => {
                let unlisted = vocab - ids.len();
                let fill = if unlisted > 0 { residual / unlisted as f64 } else { 0.0 };
                let mut full = vec![fill; vocab];
                for (&id, &p) in ids.iter().zip(probs) {
                    full[id as usize] = p;
                }
                full
            }
        };
        ProbVector::normalized(full.into_iter().map(T::of).collect())
    }
}

fn check_sequence(vocab: usize, records: &[NtpTraceRecord]) -> Result<bool> {
    Vocab::new(vocab)?;
    let truncated = records.first().is_some_and(|r| r.is_truncated());
    for (k, rec) in records.iter().enumerate() {
        if rec.step != k + 1 {
            return Err(Error::Format(format!(
                "steps must be contiguous from 1: record {} has step {}",
                k + 1,
                rec.step
            )));
        }
        if rec.is_truncated() != truncated {
            return Err(Error::Format(format!(
                "step {}: full and truncated records cannot be mixed",
                rec.step
            )));
        }
        rec.validate(vocab)?;
    }
    Ok(truncated)
}

pub fn write_trace_to<W: Write>(mut out: W, vocab: usize, records: &[NtpTraceRecord]) -> Result<()> {
    let truncated = check_sequence(vocab, records)?;
    let header = TraceHeader {
        version: TRACE_VERSION,
        vocab,
        truncated,
    };
    serde_json::to_writer(&mut out, &header).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    for rec in records {
        serde_json::to_writer(&mut out, &rec.to_raw()).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_trace(path: impl AsRef<Path>, vocab: usize, records: &[NtpTraceRecord]) -> Result<()> {
    write_trace_to(BufWriter::new(File::create(path)?), vocab, records)
}

pub fn read_trace_from<R: BufRead>(input: R) -> Result<(TraceHeader, Vec<NtpTraceRecord>)> {
    let mut lines = input.lines().enumerate();
    let header: TraceHeader = match lines.next() {
        Some((_, line)) => serde_json::from_str(&line?).map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?,
        None => return Err(Error::Parse { line: 1, msg: "missing header".into() }),
    };
    if header.version != TRACE_VERSION {
        return Err(Error::Format(format!("unsupported trace version {}", header.version)));
    }
    let mut records = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        let rec = NtpTraceRecord::from_raw(raw).map_err(|msg| Error::Parse { line: idx + 1, msg })?;
        if rec.is_truncated() != header.truncated {
            return Err(Error::Format(format!(
                "line {}: record truncation does not match header",
                idx + 1
            )));
        }
        records.push(rec);
    }
    check_sequence(header.vocab, &records)?;
    Ok((header, records))
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<(TraceHeader, Vec<NtpTraceRecord>)> {
    read_trace_from(BufReader::new(File::open(path)?))
}

/// Distribution source replaying a trace of one fixed text.
///
/// The context must be a prefix of the traced text (empty prompt); the
/// distribution for step `i` is served when the context has `i - 1` tokens.
#[derive(Clone, Debug)]
pub struct TraceSource<T> {
    vocab: Vocab,
    tokens: Vec<Token>,
    dists: Vec<ProbVector<T>>,
}

impl<T: Scalar> TraceSource<T> {
    pub fn new(vocab: usize, records: &[NtpTraceRecord]) -> Result<Self> {
        check_sequence(vocab, records)?;
        let dists = records
            .iter()
            .map(|r| r.to_prob_vector(vocab))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            vocab: Vocab::new(vocab)?,
            tokens: records.iter().map(|r| r.token).collect(),
            dists,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (header, records) = read_trace(path)?;
        Self::new(header.vocab, &records)
    }

    /// The traced text.
    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn distributions(&self) -> &[ProbVector<T>] {
        &self.dists
    }
}

impl<T: Scalar> DistributionSource<T> for TraceSource<T> {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn next_distribution(&self, context: &[Token]) -> Result<ProbVector<T>> {
        let step = context.len();
        if step >= self.dists.len() {
            return invalid(format!("trace has {} steps, context asks for step {}", self.dists.len(), step + 1));
        }
        if let Some(&last) = context.last() {
            if last != self.tokens[step - 1] {
                return invalid(format!("context diverges from the traced text at step {step}"));
            }
        }
        Ok(self.dists[step].clone())
    }
}
