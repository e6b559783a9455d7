use std::collections::HashMap;

use crate::error::{invalid, Result};
use crate::keygen::{KeyAccess, Scheme};
use crate::lm::{realized_probs, text_distributions, DistributionSource, ProbVector, Token};
use crate::Scalar;

use super::{
    ems_term, huber_max, its_interval_ordered, its_term, lr_weights, onemlog_term, phi_ems, phi_ems_onemlog,
    phi_its, phi_its_huber, shrink_ntp, its_evidence_from, NtpProvenance, NtpVector, StatisticKind, WeightVector,
    NTP_FLOOR,
};

/// Tuning knobs shared by the statistics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StatParams<T> {
    /// Shrinkage weight on the estimated NTP.
    pub lambda: T,
    /// Constant shrinkage baseline.
    pub p0: T,
    /// Use likelihood-ratio weights for `its-weighted` instead of unit weights.
    pub its_lr_weights: bool,
}

impl<T: Scalar> Default for StatParams<T> {
    fn default() -> Self {
        Self {
            lambda: T::half(),
            p0: T::half(),
            its_lr_weights: false,
        }
    }
}

/// The observed text together with whatever next-token distributions the
/// detector has for it.
#[derive(Clone, Debug)]
pub struct TextEvidence<T> {
    pub tokens: Vec<Token>,
    pub vocab: usize,
    pub dists: Option<Vec<ProbVector<T>>>,
    pub provenance: NtpProvenance,
}

impl<T: Scalar> TextEvidence<T> {
    /// Text with no model information; enough for the unweighted statistics.
    pub fn tokens_only(tokens: Vec<Token>, vocab: usize) -> Self {
        Self {
            tokens,
            vocab,
            dists: None,
            provenance: NtpProvenance::EstimatedEmptyPrompt,
        }
    }

    /// Queries `source` along the text, starting from `prompt`.
    pub fn from_source<S: DistributionSource<T> + ?Sized>(
        source: &S,
        prompt: &[Token],
        tokens: Vec<Token>,
        provenance: NtpProvenance,
    ) -> Result<Self> {
        let dists = text_distributions(source, prompt, &tokens)?;
        Ok(Self {
            vocab: source.vocab().size(),
            tokens,
            dists: Some(dists),
            provenance,
        })
    }

    fn dists(&self, kind: StatisticKind) -> Result<&[ProbVector<T>]> {
        match &self.dists {
            Some(d) if d.len() == self.tokens.len() => Ok(d),
            Some(_) => invalid("distributions and tokens are misaligned"),
            None => invalid(format!("statistic {kind} needs next-token distributions for the text")),
        }
    }

    fn ntps(&self, kind: StatisticKind) -> Result<Vec<T>> {
        Ok(realized_probs(self.dists(kind)?, &self.tokens))
    }
}

/// A statistic bound to one observed text, ready to be evaluated against
/// any key sequence.
#[derive(Clone, Debug)]
pub struct Detector<T> {
    kind: StatisticKind,
    tokens: Vec<Token>,
    vocab: usize,
    weights: WeightVector<T>,
    dists: Option<Vec<ProbVector<T>>>,
}

impl<T: Scalar> Detector<T> {
    pub fn new(kind: StatisticKind, params: &StatParams<T>, evidence: TextEvidence<T>) -> Result<Self> {
        if evidence.tokens.is_empty() {
            return invalid("cannot build a detector for an empty text");
        }
        if let Some(&t) = evidence.tokens.iter().find(|&&t| t as usize >= evidence.vocab) {
            return invalid(format!("token {t} outside vocabulary of size {}", evidence.vocab));
        }
        let n = evidence.tokens.len();
        let weights = match kind {
            StatisticKind::EmsBase | StatisticKind::EmsOneMinusLog | StatisticKind::ItsBase | StatisticKind::ItsHuber => {
                WeightVector::uniform(n)
            }
            StatisticKind::EmsLr => lr_weights(&NtpVector::floored(&evidence.ntps(kind)?, evidence.provenance)),
            StatisticKind::EmsShrink => {
                let q = evidence.ntps(kind)?;
                let p0 = vec![params.p0; n];
                lr_weights(&shrink_ntp(&q, params.lambda, &p0, evidence.provenance)?)
            }
            StatisticKind::ItsWeighted => {
                if params.its_lr_weights {
                    lr_weights(&NtpVector::floored(&evidence.ntps(kind)?, evidence.provenance))
                } else {
                    WeightVector::uniform(n)
                }
            }
        };
        let dists = if kind == StatisticKind::ItsHuber {
            evidence.dists(kind)?;
            evidence.dists
        } else {
            None
        };
        Ok(Self {
            kind,
            tokens: evidence.tokens,
            vocab: evidence.vocab,
            weights,
            dists,
        })
    }

    pub fn kind(&self) -> StatisticKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn weights(&self) -> &WeightVector<T> {
        &self.weights
    }

    fn check_keys<K: KeyAccess<T> + ?Sized>(&self, keys: &K) -> Result<()> {
        if keys.scheme() != self.kind.scheme() {
            return invalid(format!("statistic {} needs {} keys, got {}", self.kind, self.kind.scheme(), keys.scheme()));
        }
        if keys.vocab() != self.vocab {
            return invalid(format!("key vocabulary {} differs from text vocabulary {}", keys.vocab(), self.vocab));
        }
        Ok(())
    }

    /// The statistic with text position `i` paired with key position `i`.
    pub fn aligned<K: KeyAccess<T> + ?Sized>(&self, keys: &K) -> Result<T> {
        self.check_keys(keys)?;
        match self.kind {
            StatisticKind::EmsBase | StatisticKind::EmsLr | StatisticKind::EmsShrink => {
                Ok(phi_ems(keys, &self.tokens, &self.weights)?.value)
            }
            StatisticKind::EmsOneMinusLog => Ok(phi_ems_onemlog(keys, &self.tokens, &self.weights)?.value),
            StatisticKind::ItsBase | StatisticKind::ItsWeighted => phi_its(keys, &self.tokens, &self.weights),
            StatisticKind::ItsHuber => {
                let dists = self.dists.as_deref().expect("huber detectors carry distributions");
                let mut ev = its_evidence_from(keys, &self.tokens, dists)?;
                let floor = T::of(NTP_FLOOR);
                for p in &mut ev.mass {
                    *p = p.max(floor);
                }
                phi_its_huber(&ev)
            }
        }
    }

    /// Scores of every (key position, text position) pair, arranged for
    /// constant-time window evaluation.
    pub fn pair_scores<K: KeyAccess<T> + ?Sized>(&self, keys: &K) -> Result<PairScores<T>> {
        self.check_keys(keys)?;
        let n = keys.len();
        let m = self.tokens.len();
        if n == 0 {
            return invalid("empty key sequence");
        }
        if self.kind == StatisticKind::ItsHuber {
            return Ok(self.huber_pairs(keys));
        }
        let w = self.weights.as_slice();
        let mut h = vec![T::zero(); n * m];
        match self.kind.scheme() {
            Scheme::Ems => {
                let mut distinct: Vec<Token> = self.tokens.clone();
                distinct.sort_unstable();
                distinct.dedup();
                let slot: HashMap<Token, usize> = distinct.iter().enumerate().map(|(i, &t)| (t, i)).collect();
                let slots: Vec<usize> = self.tokens.iter().map(|t| slot[t]).collect();
                let onemlog = self.kind == StatisticKind::EmsOneMinusLog;
                let mut xi = vec![T::zero(); distinct.len()];
                let mut term = vec![T::zero(); distinct.len()];
                for a in 0..n {
                    keys.ems_components(a, &distinct, &mut xi);
                    for (t, &x) in term.iter_mut().zip(&xi) {
                        *t = if onemlog { onemlog_term(x).0 } else { ems_term(x).0 };
                    }
                    let row = &mut h[a * m..(a + 1) * m];
                    for b in 0..m {
                        row[b] = w[b] * term[slots[b]];
                    }
                }
            }
            Scheme::Its => {
                for a in 0..n {
                    let key = keys.its_key(a);
                    let row = &mut h[a * m..(a + 1) * m];
                    for b in 0..m {
                        row[b] = w[b] * its_term(key.u(), key.rank(self.tokens[b]), self.vocab);
                    }
                }
            }
        }
        Ok(PairScores {
            n,
            m,
            inner: Inner::Additive {
                prefix: diagonal_prefix(n, m, |a, b| h[a * m + b]),
            },
        })
    }

    fn huber_pairs<K: KeyAccess<T> + ?Sized>(&self, keys: &K) -> PairScores<T> {
        let dists = self.dists.as_deref().expect("huber detectors carry distributions");
        let (n, m) = (keys.len(), self.tokens.len());
        let floor = T::of(NTP_FLOOR);
        let mass: Vec<T> = dists
            .iter()
            .zip(&self.tokens)
            .map(|(mu, &y)| mu.prob(y).max(floor))
            .collect();
        let mut hit = vec![false; n * m];
        for a in 0..n {
            let key = keys.its_key(a);
            let order = key.order();
            let u = key.u();
            for b in 0..m {
                let (lo, hi) = its_interval_ordered(&order, &dists[b], self.tokens[b]);
                hit[a * m + b] = lo <= u && u <= hi;
            }
        }
        let log_inv: Vec<T> = mass.iter().map(|&p| (T::one() / p).ln()).collect();
        let bound = diagonal_prefix(n, m, |a, b| if hit[a * m + b] { log_inv[b] } else { T::zero() });
        PairScores {
            n,
            m,
            inner: Inner::Huber { hit, mass, bound },
        }
    }
}

fn diagonal_prefix<T: Scalar>(n: usize, m: usize, h: impl Fn(usize, usize) -> T) -> Vec<T> {
    let stride = m + 1;
    let mut p = vec![T::zero(); (n + 1) * stride];
    for a in 0..n {
        for b in 0..m {
            p[(a + 1) * stride + b + 1] = p[a * stride + b] + h(a, b);
        }
    }
    p
}

#[derive(Clone, Debug)]
enum Inner<T> {
    /// Prefix sums along diagonals: `P[a+1][b+1] = P[a][b] + h(a, b)`.
    Additive { prefix: Vec<T> },
    /// Hit indicators and masses; `bound` holds diagonal prefix sums of
    /// `hit * log(1/p)`, an upper bound on any window's Huber value.
    Huber { hit: Vec<bool>, mass: Vec<T>, bound: Vec<T> },
}

/// Pair scores between a key sequence of length `n` and a text of length `m`.
#[derive(Clone, Debug)]
pub struct PairScores<T> {
    n: usize,
    m: usize,
    inner: Inner<T>,
}

impl<T: Scalar> PairScores<T> {
    pub fn key_len(&self) -> usize {
        self.n
    }

    pub fn text_len(&self) -> usize {
        self.m
    }

    fn diag(p: &[T], stride: usize, a: usize, b: usize, len: usize) -> T {
        p[(a + len) * stride + b + len] - p[a * stride + b]
    }

    /// Statistic on key positions `a..a+len` paired with text positions
    /// `b..b+len` (zero based).
    pub fn window(&self, a: usize, b: usize, len: usize) -> T {
        assert!(len > 0 && a + len <= self.n && b + len <= self.m, "window out of range");
        let stride = self.m + 1;
        match &self.inner {
            Inner::Additive { prefix } => Self::diag(prefix, stride, a, b, len) / T::of_usize(len),
            Inner::Huber { hit, mass, bound } => {
                if Self::diag(bound, stride, a, b, len) <= T::zero() {
                    return T::zero();
                }
                huber_max((0..len).map(|j| (hit[(a + j) * self.m + b + j], mass[b + j])))
            }
        }
    }

    /// Largest statistic over every key window paired with text window
    /// `b..b+len`.
    pub fn text_window_max(&self, b: usize, len: usize) -> T {
        assert!(len > 0 && len <= self.n && b + len <= self.m, "window out of range");
        let starts = self.n - len + 1;
        let stride = self.m + 1;
        match &self.inner {
            Inner::Additive { prefix } => {
                let mut best = T::neg_infinity();
                for a in 0..starts {
                    let v = Self::diag(prefix, stride, a, b, len);
                    if v > best {
                        best = v;
                    }
                }
                best / T::of_usize(len)
            }
            Inner::Huber { bound, .. } => {
                let mut cand: Vec<(T, usize)> = (0..starts).map(|a| (Self::diag(bound, stride, a, b, len), a)).collect();
                cand.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
                let mut best = T::zero();
                for (ub, a) in cand {
                    if ub <= best {
                        break;
                    }
                    let v = self.window(a, b, len);
                    if v > best {
                        best = v;
                    }
                }
                best
            }
        }
    }

    /// Largest statistic over all key and text windows of length `len`.
    pub fn grid_max(&self, len: usize) -> T {
        assert!(len > 0 && len <= self.n && len <= self.m, "window out of range");
        (0..=self.m - len)
            .map(|b| self.text_window_max(b, len))
            .fold(T::neg_infinity(), T::max)
    }
}

/// Which alignments [`scan_max`] maximizes over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanAlignment {
    /// Every key window against every text window of length `B`.
    FullGrid,
    /// Every key window against the single text window `start..start+len`
    /// (zero based).
    TextWindow { start: usize, len: usize },
}

/// Maximum of the statistic over windowed alignments of `keys` and the
/// detector's text.
pub fn scan_max<T: Scalar, K: KeyAccess<T> + ?Sized>(
    detector: &Detector<T>,
    keys: &K,
    window: usize,
    alignment: ScanAlignment,
) -> Result<T> {
    let (n, m) = (keys.len(), detector.len());
    if window == 0 || window > n.min(m) {
        return invalid(format!("window {window} must lie in 1..={}", n.min(m)));
    }
    let scores = detector.pair_scores(keys)?;
    match alignment {
        ScanAlignment::FullGrid => Ok(scores.grid_max(window)),
        ScanAlignment::TextWindow { start, len } => {
            if len == 0 || len > window || start + len > m {
                return invalid(format!("text window {start}+{len} does not fit a text of length {m} with B = {window}"));
            }
            Ok(scores.text_window_max(start, len))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keygen::{generate_keys, EmsKey, KeySeq, Keys, KeyStream};
    use crate::lm::{MarkovLm, MarkovSpec};

    fn brute_grid(det: &Detector<f64>, keys: &KeySeq<f64>, len: usize) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for a in 0..=keys.len() - len {
            for b in 0..=det.len() - len {
                let sub = keys.slice(a, len);
                let ev = TextEvidence::tokens_only(det.tokens()[b..b + len].to_vec(), keys.vocab());
                let d = Detector::new(det.kind(), &StatParams::default(), ev).unwrap();
                best = best.max(d.aligned(&sub).unwrap());
            }
        }
        best
    }

    #[test]
    fn three_by_three_grid_matches_brute_force() {
        let rows = vec![
            vec![0.9, 0.1, 0.5],
            vec![0.2, 0.8, 0.3],
            vec![0.6, 0.4, 0.99],
            vec![0.05, 0.7, 0.45],
        ];
        let keys = KeySeq::from_keys(3, 0, Keys::Ems(rows.into_iter().map(|r| EmsKey::new(r).unwrap()).collect())).unwrap();
        let ev = TextEvidence::tokens_only(vec![0, 1, 2, 1], 3);
        let det = Detector::new(StatisticKind::EmsBase, &StatParams::default(), ev).unwrap();
        for len in 1..=4 {
            let fast = scan_max(&det, &keys, len, ScanAlignment::FullGrid).unwrap();
            assert!((fast - brute_grid(&det, &keys, len)).abs() < 1e-12, "len {len}");
        }
    }

    #[test]
    fn full_length_window_equals_aligned_statistic() {
        let lm = MarkovLm::<f64>::generate(&MarkovSpec { vocab: 20, ..Default::default() }).unwrap();
        for kind in StatisticKind::ALL {
            let keys = generate_keys::<f64>(kind.scheme(), 40, 20, 3).unwrap();
            let text: Vec<Token> = (0..40).map(|i| (i * 7 % 20) as Token).collect();
            let ev = TextEvidence::from_source(&lm, &[], text, NtpProvenance::Exact).unwrap();
            let det = Detector::new(kind, &StatParams::default(), ev).unwrap();
            let scan = scan_max(&det, &keys, 40, ScanAlignment::FullGrid).unwrap();
            let plain = det.aligned(&keys).unwrap();
            assert!((scan - plain).abs() < 1e-9, "{kind}: {scan} vs {plain}");
        }
    }

    #[test]
    fn text_window_scan_matches_brute_force_for_every_statistic() {
        let lm = MarkovLm::<f64>::generate(&MarkovSpec { vocab: 12, ..Default::default() }).unwrap();
        for kind in StatisticKind::ALL {
            let keys = generate_keys::<f64>(kind.scheme(), 15, 12, 9).unwrap();
            let text: Vec<Token> = (0..13).map(|i| (i * 5 % 12) as Token).collect();
            let ev = TextEvidence::from_source(&lm, &[], text.clone(), NtpProvenance::Exact).unwrap();
            let det = Detector::new(kind, &StatParams::default(), ev).unwrap();
            let scores = det.pair_scores(&keys).unwrap();
            for (start, len) in [(0, 4), (3, 6), (9, 4)] {
                let mut best = f64::NEG_INFINITY;
                for a in 0..=15 - len {
                    let sub = keys.slice(a, len);
                    let dists = text_distributions(&lm, &[], &text).unwrap()[start..start + len].to_vec();
                    let ev = TextEvidence {
                        tokens: text[start..start + len].to_vec(),
                        vocab: 12,
                        dists: Some(dists),
                        provenance: NtpProvenance::Exact,
                    };
                    let d = Detector::new(kind, &StatParams::default(), ev).unwrap();
                    best = best.max(d.aligned(&sub).unwrap());
                }
                let fast = scores.text_window_max(start, len);
                assert!((fast - best).abs() < 1e-9, "{kind} at {start}+{len}: {fast} vs {best}");
            }
        }
    }

    #[test]
    fn lazy_stream_gives_same_scores_as_materialized_keys() {
        let stream = KeyStream::null(Scheme::Ems, 10, 5, 3).unwrap();
        let keys = stream.materialize::<f64>(30);
        let ev = TextEvidence::tokens_only((0..25).map(|i| (i % 10) as Token).collect(), 10);
        let det = Detector::new(StatisticKind::EmsBase, &StatParams::default(), ev).unwrap();
        let a = det.pair_scores(&keys).unwrap().grid_max(8);
        let b = det.pair_scores(&stream.bounded(30)).unwrap().grid_max(8);
        assert_eq!(a, b);
    }

    #[test]
    fn window_larger_than_inputs_is_rejected() {
        let keys = generate_keys::<f64>(Scheme::Ems, 5, 4, 1).unwrap();
        let det = Detector::new(StatisticKind::EmsBase, &StatParams::default(), TextEvidence::tokens_only(vec![0, 1, 2], 4)).unwrap();
        assert!(scan_max(&det, &keys, 4, ScanAlignment::FullGrid).is_err());
        assert!(scan_max(&det, &keys, 0, ScanAlignment::FullGrid).is_err());
    }

    #[test]
    fn weighted_kinds_need_distributions() {
        let ev = TextEvidence::<f64>::tokens_only(vec![0, 1], 4);
        assert!(Detector::new(StatisticKind::EmsLr, &StatParams::default(), ev.clone()).is_err());
        assert!(Detector::new(StatisticKind::ItsHuber, &StatParams::default(), ev).is_err());
    }

    #[test]
    fn scheme_mismatch_is_rejected() {
        let keys = generate_keys::<f64>(Scheme::Its, 3, 4, 1).unwrap();
        let det = Detector::new(StatisticKind::EmsBase, &StatParams::default(), TextEvidence::tokens_only(vec![0, 1, 2], 4)).unwrap();
        assert!(det.aligned(&keys).is_err());
    }
}
