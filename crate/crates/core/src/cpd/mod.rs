//! Change-point detection on p-value sequences: seeded intervals, a
//! CDF-difference split statistic with block-bootstrap significance,
//! narrowest-over-threshold selection and Rand-index scoring.

mod ks;

pub use ks::{best_split, ks_stat};

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::seeding::derive_seed;
use ks::{best_split_levels, dense_levels, split_reaches};

/// Half-open index interval `(r, s]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Interval {
    pub r: usize,
    pub s: usize,
}

impl Interval {
    pub fn len(self) -> usize {
        self.s - self.r
    }

    pub fn is_empty(self) -> bool {
        self.s <= self.r
    }

    /// Whether a split after position `tau` falls in `(r, s]`.
    pub fn contains(self, tau: usize) -> bool {
        self.r < tau && tau <= self.s
    }
}

/// Multi-scale seeded intervals over `(0, m]` with decay `a`.
///
/// Layer `k` (from 1) holds `2 ceil((1/a)^{k-1}) - 1` intervals of length
/// `m a^{k-1}` evenly shifted across `(0, m]`; there are
/// `ceil(log_{1/a} m)` layers. Duplicates are dropped, first occurrence
/// kept.
pub fn seeded_intervals(m: usize, a: f64) -> Result<Vec<Interval>> {
    if !(0.5..1.0).contains(&a) {
        return invalid(format!("decay must lie in [1/2, 1), got {a}"));
    }
    if m < 2 {
        return invalid(format!("need at least two positions, got {m}"));
    }
    const SLACK: f64 = 1e-9;
    let mf = m as f64;
    let layers = ((mf.ln() / (1.0 / a).ln()) - SLACK).ceil().max(1.0) as usize;
    let mut out: Vec<Interval> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for k in 1..=layers {
        let growth = (1.0 / a).powi(k as i32 - 1);
        let count = 2 * ((growth - SLACK).ceil() as usize) - 1;
        let len = mf * a.powi(k as i32 - 1);
        let shift = if count > 1 { (mf - len) / (count - 1) as f64 } else { 0.0 };
        for i in 0..count {
            let start = i as f64 * shift;
            let r = (start + SLACK).floor() as usize;
            let s = ((start + len - SLACK).ceil() as usize).min(m);
            let iv = Interval { r, s };
            if r < s && seen.insert(iv) {
                out.push(iv);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    /// Block length `B'`.
    pub block: usize,
    /// Replicate count `T'`.
    pub replicates: usize,
    pub seed: u64,
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block == 0 || self.replicates == 0 {
            return invalid("bootstrap block length and replicate count must be positive");
        }
        Ok(())
    }
}

/// Split location, statistic and bootstrap p-value for one interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitTest {
    pub tau_hat: usize,
    pub stat: f64,
    /// `1 + #{t : max S <= max S*_t}`.
    pub numerator: u32,
    pub replicates: usize,
}

impl SplitTest {
    pub fn p_tilde(&self) -> f64 {
        self.numerator as f64 / (self.replicates + 1) as f64
    }
}

/// Best split of `(r, s]` and its moving-block-bootstrap p-value. Each
/// replicate concatenates `ceil(len / B')` blocks drawn uniformly from the
/// `len - B' + 1` overlapping blocks, truncates to `len`, and is compared
/// over the same admissible split range as the observed sequence.
pub fn block_bootstrap_pvalue(
    p: &[f64],
    interval: Interval,
    margin: usize,
    config: &BootstrapConfig,
) -> Result<SplitTest> {
    config.validate()?;
    let Interval { r, s } = interval;
    if !(r < s && s <= p.len()) {
        return invalid(format!("interval ({r}, {s}] outside a sequence of length {}", p.len()));
    }
    let len = s - r;
    if config.block > len {
        return invalid(format!("block length {} exceeds interval length {len}", config.block));
    }
    let margin = margin.max(1);
    if len < 2 * margin {
        return invalid(format!("interval ({r}, {s}] admits no split with margin {margin}"));
    }
    let (lv, levels) = dense_levels(&p[r..s]);
    let (tau, stat) = best_split_levels(&lv, levels, margin).expect("admissible split exists");
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[r as u64, s as u64]));
    let blocks = len.div_ceil(config.block);
    let starts = len - config.block + 1;
    let mut sample = Vec::with_capacity(blocks * config.block);
    let mut exceed = 0u32;
    for _ in 0..config.replicates {
        sample.clear();
        for _ in 0..blocks {
            let b = rng.random_range(0..starts);
            sample.extend_from_slice(&lv[b..b + config.block]);
        }
        sample.truncate(len);
        if split_reaches(&sample, levels, margin, stat) {
            exceed += 1;
        }
    }
    Ok(SplitTest {
        tau_hat: r + tau,
        stat,
        numerator: 1 + exceed,
        replicates: config.replicates,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentConfig {
    /// Seeded-interval decay `a`.
    pub decay: f64,
    /// Candidate threshold on the bootstrap p-value.
    pub zeta: f64,
    /// Minimum distance of a split from either interval end.
    pub margin: usize,
    /// Shortest interval considered.
    pub min_len: usize,
    pub bootstrap: BootstrapConfig,
}

impl SegmentConfig {
    /// Defaults tied to the p-value window `B`: margin `B/2`, minimum
    /// interval `2B`, block length `B`, 999 bootstrap replicates,
    /// `a = 1/sqrt 2`, `zeta = 0.01`.
    pub fn for_window(window: usize, seed: u64) -> Self {
        Self {
            decay: std::f64::consts::FRAC_1_SQRT_2,
            zeta: 0.01,
            margin: (window / 2).max(1),
            min_len: 2 * window,
            bootstrap: BootstrapConfig {
                block: window.max(1),
                replicates: 999,
                seed,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bootstrap.validate()?;
        if !(0.5..1.0).contains(&self.decay) {
            return invalid(format!("decay must lie in [1/2, 1), got {}", self.decay));
        }
        if !(self.zeta > 0.0 && self.zeta <= 1.0) {
            return invalid(format!("zeta must lie in (0, 1], got {}", self.zeta));
        }
        if self.margin == 0 {
            return invalid("split margin must be positive");
        }
        Ok(())
    }

    fn usable_len(&self) -> usize {
        self.min_len.max(self.bootstrap.block).max(2 * self.margin)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalDiagnostic {
    pub r: usize,
    pub s: usize,
    pub tau_hat: usize,
    #[serde(rename = "S")]
    pub stat: f64,
    pub p_tilde: f64,
    pub selected: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub points: ChangePointSet,
    pub diagnostics: Vec<IntervalDiagnostic>,
}

/// Seeded binary segmentation with narrowest-over-threshold selection.
///
/// Every seeded interval long enough to test gets a best split and a
/// bootstrap p-value. Intervals with `p_tilde < zeta` are candidates; the
/// narrowest (then leftmost) candidate's split is emitted and every
/// candidate containing it is discarded, until none remain.
pub fn seedbs_not(p: &[f64], config: &SegmentConfig) -> Result<Segmentation> {
    config.validate()?;
    let m = p.len();
    let need = config.usable_len();
    if m < need {
        return invalid(format!("sequence of length {m} is shorter than the minimum interval {need}"));
    }
    let intervals: Vec<Interval> = seeded_intervals(m, config.decay)?
        .into_iter()
        .filter(|iv| iv.len() >= need)
        .collect();
    let tests = intervals
        .par_iter()
        .map(|&iv| block_bootstrap_pvalue(p, iv, config.margin, &config.bootstrap))
        .collect::<Result<Vec<_>>>()?;
    let mut diagnostics: Vec<IntervalDiagnostic> = intervals
        .iter()
        .zip(&tests)
        .map(|(iv, t)| IntervalDiagnostic {
            r: iv.r,
            s: iv.s,
            tau_hat: t.tau_hat,
            stat: t.stat,
            p_tilde: t.p_tilde(),
            selected: false,
        })
        .collect();
    let mut open: Vec<usize> = (0..diagnostics.len())
        .filter(|&i| diagnostics[i].p_tilde < config.zeta)
        .collect();
    let mut points = Vec::new();
    while let Some(&pick) = open
        .iter()
        .min_by_key(|&&i| (diagnostics[i].s - diagnostics[i].r, diagnostics[i].r, diagnostics[i].s))
    {
        let tau = diagnostics[pick].tau_hat;
        diagnostics[pick].selected = true;
        points.push(tau);
        open.retain(|&i| !Interval { r: diagnostics[i].r, s: diagnostics[i].s }.contains(tau));
    }
    points.sort_unstable();
    points.dedup();
    Ok(Segmentation {
        points: ChangePointSet::new(m, points)?,
        diagnostics,
    })
}

/// Sorted change points `tau_1 < ... < tau_K` in `[1, m)`. A change point
/// `tau` separates position `tau` from position `tau + 1` (one based).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangePointSet {
    m: usize,
    points: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CpHeader {
    m: usize,
}

impl ChangePointSet {
    pub fn new(m: usize, points: Vec<usize>) -> Result<Self> {
        if points.windows(2).any(|w| w[0] >= w[1]) {
            return invalid("change points must be strictly increasing");
        }
        if let Some(&t) = points.iter().find(|&&t| t == 0 || t >= m) {
            return invalid(format!("change point {t} outside [1, {m})"));
        }
        Ok(Self { m, points })
    }

    pub fn empty(m: usize) -> Self {
        Self { m, points: Vec::new() }
    }

    /// Change points from one-based segment starts (each start `b > 1`
    /// gives the change point `b - 1`).
    pub fn from_segment_starts(m: usize, starts: &[usize]) -> Result<Self> {
        Self::new(m, starts.iter().map(|&b| b.saturating_sub(1)).collect())
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn points(&self) -> &[usize] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Segment lengths in order.
    pub fn segment_lengths(&self) -> Vec<usize> {
        let mut prev = 0;
        let mut out = Vec::with_capacity(self.points.len() + 1);
        for &t in self.points.iter().chain(std::iter::once(&self.m)) {
            out.push(t - prev);
            prev = t;
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer(&mut out, &CpHeader { m: self.m }).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
        for t in &self.points {
            writeln!(out, "{t}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header: CpHeader = match lines.next() {
            Some(l) => serde_json::from_str(&l?).map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?,
            None => return Err(Error::Parse { line: 1, msg: "missing header".into() }),
        };
        let mut points = Vec::new();
        for (idx, line) in lines.enumerate() {
            let line = line?;
            points.push(line.trim().parse::<usize>().map_err(|e| Error::Parse {
                line: idx + 2,
                msg: e.to_string(),
            })?);
        }
        Self::new(header.m, points).map_err(|e| Error::Format(e.to_string()))
    }
}

fn pairs(n: usize) -> u128 {
    let n = n as u128;
    n * n.saturating_sub(1) / 2
}

/// Fraction of position pairs on which the two segmentations agree
/// (both same segment or both different segments).
pub fn rand_index(truth: &ChangePointSet, est: &ChangePointSet) -> Result<f64> {
    if truth.m != est.m {
        return invalid(format!("segmentations cover {} and {} positions", truth.m, est.m));
    }
    let m = truth.m;
    if m < 2 {
        return Ok(1.0);
    }
    let same = |cp: &ChangePointSet| cp.segment_lengths().into_iter().map(pairs).sum::<u128>();
    let mut merged: Vec<usize> = truth.points.iter().chain(&est.points).copied().collect();
    merged.sort_unstable();
    merged.dedup();
    let both = same(&ChangePointSet { m, points: merged });
    let total = pairs(m);
    let agree = total + 2 * both - same(truth) - same(est);
    Ok(agree as f64 / total as f64)
}
