//! Randomization tests: a global detection p-value and the sliding-window
//! p-value sequence used for segmentation.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::keygen::{KeyAccess, KeyStream};
use crate::stats::{Detector, StatisticKind};
use crate::Scalar;

/// Null replicate count for single global tests.
pub const DEFAULT_GLOBAL_REPLICATES: usize = 999;
/// Null replicate count for p-value sequences.
pub const DEFAULT_SEQUENCE_REPLICATES: usize = 99;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandTestConfig {
    /// Number of null key sequences `T`.
    pub replicates: usize,
    pub alpha: f64,
    pub statistic: StatisticKind,
    /// Seed of the null key streams; replicate `t` uses stream `t`.
    pub seed: u64,
}

impl RandTestConfig {
    pub fn new(replicates: usize, alpha: f64, statistic: StatisticKind, seed: u64) -> Result<Self> {
        let c = Self {
            replicates,
            alpha,
            statistic,
            seed,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn global(statistic: StatisticKind, seed: u64) -> Self {
        Self {
            replicates: DEFAULT_GLOBAL_REPLICATES,
            alpha: 0.05,
            statistic,
            seed,
        }
    }

    pub fn sequence(statistic: StatisticKind, seed: u64) -> Self {
        Self {
            replicates: DEFAULT_SEQUENCE_REPLICATES,
            ..Self::global(statistic, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return invalid("at least one null replicate is required");
        }
        if self.replicates > u32::MAX as usize - 1 {
            return invalid("too many null replicates");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return invalid(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        Ok(())
    }
}

/// Outcome of a global randomization test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RandTestResult<T> {
    pub observed: T,
    /// `1 + #{t : observed <= null_t}`.
    pub numerator: u32,
    pub replicates: usize,
}

impl<T: Scalar> RandTestResult<T> {
    pub fn pvalue(&self) -> f64 {
        self.numerator as f64 / (self.replicates + 1) as f64
    }

    pub fn rejects(&self, alpha: f64) -> bool {
        self.pvalue() <= alpha
    }
}

fn check_detector<T: Scalar>(detector: &Detector<T>, config: &RandTestConfig) -> Result<()> {
    config.validate()?;
    if detector.kind() != config.statistic {
        return invalid(format!(
            "detector computes {} but the test is configured for {}",
            detector.kind(),
            config.statistic
        ));
    }
    Ok(())
}

fn null_stream<K: KeyAccess<T> + ?Sized, T: Scalar>(keys: &K, config: &RandTestConfig, t: usize) -> Result<KeyStream> {
    KeyStream::null(config.statistic.scheme(), keys.vocab(), config.seed, t as u64)
}

/// p-value `(1 + #{t : phi(keys, text) <= phi(null_t, text)}) / (T + 1)`.
pub fn randomization_pvalue<T: Scalar, K: KeyAccess<T> + ?Sized>(
    detector: &Detector<T>,
    keys: &K,
    config: &RandTestConfig,
) -> Result<RandTestResult<T>> {
    check_detector(detector, config)?;
    let observed = detector.aligned(keys)?;
    let n = keys.len();
    let exceed = (1..=config.replicates)
        .into_par_iter()
        .map(|t| {
            let stream = null_stream(keys, config, t)?;
            let null = detector.aligned(&stream.bounded(n))?;
            Ok((observed <= null) as u32)
        })
        .collect::<Result<Vec<u32>>>()?;
    Ok(RandTestResult {
        observed,
        numerator: 1 + exceed.iter().sum::<u32>(),
        replicates: config.replicates,
    })
}

/// Zero-based start and length of the window around one-based position `i`:
/// `[(i - B/2) v 1, (i + B/2) ^ m]`.
pub fn window_bounds(i: usize, window: usize, m: usize) -> (usize, usize) {
    let half = window / 2;
    let lo = i.saturating_sub(half).max(1);
    let hi = (i + half).min(m);
    (lo - 1, hi - lo + 1)
}

/// Sliding-window p-values. Position `i` compares the best key-window
/// alignment of the text window around `i` against the same quantity under
/// each null key sequence; replicate `t` reuses one null stream for every
/// window.
pub fn pvalue_sequence<T: Scalar, K: KeyAccess<T> + ?Sized>(
    detector: &Detector<T>,
    keys: &K,
    window: usize,
    config: &RandTestConfig,
) -> Result<PValueSeq> {
    check_detector(detector, config)?;
    let m = detector.len();
    let n = keys.len();
    if window == 0 || window % 2 != 0 {
        return invalid(format!("window B must be a positive even number, got {window}"));
    }
    if window > m {
        return invalid(format!("window B = {window} exceeds text length {m}"));
    }
    let windows: Vec<(usize, usize)> = (1..=m).map(|i| window_bounds(i, window, m)).collect();
    if let Some(&(_, len)) = windows.iter().max_by_key(|w| w.1) {
        if len > n {
            return invalid(format!("windows of length {len} do not fit {n} keys"));
        }
    }
    let scan = |scores: &crate::stats::PairScores<T>| -> Vec<T> {
        windows.iter().map(|&(b, len)| scores.text_window_max(b, len)).collect()
    };
    let observed = scan(&detector.pair_scores(keys)?);
    let counts = (1..=config.replicates)
        .into_par_iter()
        .map(|t| {
            let stream = null_stream(keys, config, t)?;
            let null = scan(&detector.pair_scores(&stream.bounded(n))?);
            Ok::<_, Error>(observed.iter().zip(&null).map(|(o, z)| (o <= z) as u32).collect::<Vec<u32>>())
        })
        .try_reduce(|| vec![0; m], |mut a, b| {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
            Ok(a)
        })?;
    PValueSeq::new(
        counts.into_iter().map(|c| c + 1).collect(),
        window,
        config.replicates,
        config.statistic,
    )
}

#[derive(Serialize, Deserialize)]
struct PValueHeader {
    m: usize,
    #[serde(rename = "B")]
    window: usize,
    #[serde(rename = "T")]
    replicates: usize,
    statistic: StatisticKind,
}

/// Sliding-window p-values stored as exact numerators `j` with
/// `p = j / (T + 1)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PValueSeq {
    numerators: Vec<u32>,
    window: usize,
    replicates: usize,
    statistic: StatisticKind,
}

impl PValueSeq {
    pub fn new(numerators: Vec<u32>, window: usize, replicates: usize, statistic: StatisticKind) -> Result<Self> {
        if replicates == 0 {
            return invalid("at least one replicate is required");
        }
        if let Some((i, j)) = numerators
            .iter()
            .enumerate()
            .find(|(_, &j)| j == 0 || j as usize > replicates + 1)
        {
            return invalid(format!("numerator {j} at position {} outside 1..={}", i + 1, replicates + 1));
        }
        Ok(Self {
            numerators,
            window,
            replicates,
            statistic,
        })
    }

    pub fn len(&self) -> usize {
        self.numerators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.numerators.is_empty()
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn replicates(&self) -> usize {
        self.replicates
    }

    pub fn statistic(&self) -> StatisticKind {
        self.statistic
    }

    pub fn numerators(&self) -> &[u32] {
        &self.numerators
    }

    pub fn values(&self) -> Vec<f64> {
        let d = (self.replicates + 1) as f64;
        self.numerators.iter().map(|&j| j as f64 / d).collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let header = PValueHeader {
            m: self.len(),
            window: self.window,
            replicates: self.replicates,
            statistic: self.statistic,
        };
        serde_json::to_writer(&mut out, &header).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
        for j in &self.numerators {
            writeln!(out, "{j}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header: PValueHeader = match lines.next() {
            Some(l) => serde_json::from_str(&l?).map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?,
            None => return Err(Error::Parse { line: 1, msg: "missing header".into() }),
        };
        let mut numerators = Vec::with_capacity(header.m);
        for (idx, line) in lines.enumerate() {
            let line = line?;
            let j = line.trim().parse::<u32>().map_err(|e| Error::Parse {
                line: idx + 2,
                msg: e.to_string(),
            })?;
            numerators.push(j);
        }
        if numerators.len() != header.m {
            return Err(Error::Format(format!(
                "header declares {} p-values, found {}",
                header.m,
                numerators.len()
            )));
        }
        Self::new(numerators, header.window, header.replicates, header.statistic)
            .map_err(|e| Error::Format(e.to_string()))
    }
}
