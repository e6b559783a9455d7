use proptest::prelude::*;

use wmseg::cpd::{
    best_split, ks_stat, rand_index, seeded_intervals, seedbs_not, ChangePointSet, Interval,
    SegmentConfig,
};
use wmseg::decoder::{decode_ems, decode_its};
use wmseg::keygen::{generate_keys, generate_null_keys, KeyStream, Scheme};
use wmseg::lm::{read_trace_from, write_trace_to, NtpTraceRecord, ProbVector, Token, TraceProbs};
use wmseg::rtest::window_bounds;
use wmseg::stats::{lr_weights, phi_ems, phi_its, NtpProvenance, NtpVector, WeightVector};

fn prob_vector() -> impl Strategy<Value = ProbVector<f64>> {
    prop::collection::vec(0.001f64..1.0, 2..12).prop_map(|w| ProbVector::normalized(w).unwrap())
}

fn pvalue_lattice(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((1u32..=100).prop_map(|k| k as f64 / 100.0), 8..max_len)
}

fn change_points(m: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::btree_set(1..m, 0..5).prop_map(|s| s.into_iter().collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lr_weights_decrease_in_ntp(p in prop::collection::vec(1e-6f64..1.0, 2..30)) {
        let w = lr_weights(&NtpVector::new(p.clone(), NtpProvenance::Exact).unwrap());
        for i in 0..p.len() {
            for j in 0..p.len() {
                if p[i] < p[j] {
                    prop_assert!(w.as_slice()[i] > w.as_slice()[j]);
                }
            }
        }
    }

    #[test]
    fn scaling_weights_keeps_null_comparisons(
        w in prop::collection::vec(0.01f64..3.0, 20),
        c in 0.1f64..10.0,
        seed in any::<u64>(),
    ) {
        let n = w.len();
        let text: Vec<Token> = (0..n as Token).map(|i| i % 7).collect();
        let weights = WeightVector::new(w).unwrap();
        let scaled = weights.scaled(c).unwrap();
        let keys = generate_keys::<f64>(Scheme::Ems, n, 7, seed).unwrap();
        let obs = phi_ems(&keys, &text, &weights).unwrap().value;
        let obs_c = phi_ems(&keys, &text, &scaled).unwrap().value;
        prop_assert!((obs_c - c * obs).abs() <= 1e-9 * (1.0 + obs.abs() * c));
        for t in 1..=10 {
            let null = generate_null_keys::<f64>(Scheme::Ems, n, 7, t, seed).unwrap();
            let a = phi_ems(&null, &text, &weights).unwrap().value;
            let b = phi_ems(&null, &text, &scaled).unwrap().value;
            if (obs - a).abs() > 1e-9 {
                prop_assert_eq!(obs <= a, obs_c <= b);
            }
        }
    }

    #[test]
    fn its_statistic_is_bounded(seed in any::<u64>(), n in 1usize..40) {
        let keys = generate_keys::<f64>(Scheme::Its, n, 9, seed).unwrap();
        let text: Vec<Token> = (0..n as Token).map(|i| (i * 5) % 9).collect();
        let phi = phi_its(&keys, &text, &WeightVector::uniform(n)).unwrap();
        prop_assert!(phi.abs() <= 0.25 + 1e-12);
    }

    #[test]
    fn ks_is_rank_invariant(p in pvalue_lattice(40), cut in 0.0f64..1.0) {
        let m = p.len();
        let tau = 1 + ((m - 2) as f64 * cut) as usize;
        let transformed: Vec<f64> = p.iter().map(|x| x.powi(3) * 0.5 + 0.1).collect();
        let a = ks_stat(&p, 0, m, tau).unwrap();
        let b = ks_stat(&transformed, 0, m, tau).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn best_split_attains_the_scan_maximum(p in pvalue_lattice(40), margin in 1usize..4) {
        let m = p.len();
        prop_assume!(m >= 2 * margin);
        let (tau, s) = best_split(&p, 0, m, margin).unwrap();
        prop_assert!(tau >= margin && m - tau >= margin);
        let brute = (margin..=m - margin)
            .filter(|&t| t > 0 && t < m)
            .map(|t| ks_stat(&p, 0, m, t).unwrap())
            .fold(0.0, f64::max);
        prop_assert!((s - brute).abs() <= 1e-12);
    }

    #[test]
    fn rand_index_is_symmetric_and_bounded(
        (m, a, b) in (2usize..120).prop_flat_map(|m| (Just(m), change_points(m), change_points(m))),
    ) {
        let (a, b) = (ChangePointSet::new(m, a).unwrap(), ChangePointSet::new(m, b).unwrap());
        let ab = rand_index(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, rand_index(&b, &a).unwrap());
        prop_assert_eq!(rand_index(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn seeded_intervals_stay_inside(m in 2usize..600) {
        for iv in seeded_intervals(m, std::f64::consts::FRAC_1_SQRT_2).unwrap() {
            prop_assert!(iv.r < iv.s && iv.s <= m);
        }
    }

    #[test]
    fn window_contains_its_centre(m in 1usize..300, half in 1usize..30, frac in 0.0f64..1.0) {
        let b = 2 * half;
        let i = 1 + ((m - 1) as f64 * frac) as usize;
        let (start, len) = window_bounds(i, b, m);
        prop_assert!(start < i && i <= start + len);
        prop_assert!(start + len <= m);
        prop_assert!(len <= b + 1);
        if i > half && i + half <= m {
            prop_assert_eq!(len, b + 1);
        }
    }

    #[test]
    fn decoders_are_deterministic_and_in_range(mu in prob_vector(), seed in any::<u64>(), step in 0usize..1000) {
        let v = mu.len();
        for scheme in [Scheme::Ems, Scheme::Its] {
            let stream = KeyStream::detection(scheme, v, seed).unwrap();
            let (a, b) = match scheme {
                Scheme::Ems => (
                    decode_ems(&stream.ems_key::<f64>(step), &mu).unwrap(),
                    decode_ems(&stream.ems_key::<f64>(step), &mu).unwrap(),
                ),
                Scheme::Its => (
                    decode_its(&stream.its_key::<f64>(step), &mu),
                    decode_its(&stream.its_key::<f64>(step), &mu),
                ),
            };
            prop_assert_eq!(a, b);
            prop_assert!((a as usize) < v);
        }
    }

    #[test]
    fn full_trace_round_trips(
        rows in prop::collection::vec((prob_vector(), any::<prop::sample::Index>()), 0..20),
    ) {
        let vocab = 12;
        let records: Vec<NtpTraceRecord> = rows
            .into_iter()
            .enumerate()
            .map(|(i, (mu, idx))| {
                let mut p = mu.into_vec();
                p.resize(vocab, 0.0);
                NtpTraceRecord { step: i + 1, token: idx.index(vocab) as Token, probs: TraceProbs::Full(p) }
            })
            .collect();
        let mut buf = Vec::new();
        write_trace_to(&mut buf, vocab, &records).unwrap();
        let (header, back) = read_trace_from(buf.as_slice()).unwrap();
        prop_assert_eq!(header.vocab, vocab);
        prop_assert_eq!(back, records);
    }
}

/// Selected intervals, narrowest first, never contain a point that an
/// earlier selection already emitted.
#[test]
fn selected_intervals_do_not_contain_earlier_points() {
    let mut p = vec![0.01; 120];
    p.extend(vec![0.6, 0.2, 0.9, 0.45, 0.75].repeat(24));
    p.extend(vec![0.01; 120]);
    let config = SegmentConfig::for_window(20, 5);
    let seg = seedbs_not(&p, &config).unwrap();
    assert!(!seg.points.is_empty());
    let mut selected: Vec<_> = seg.diagnostics.iter().filter(|d| d.selected).collect();
    selected.sort_by_key(|d| (d.s - d.r, d.r, d.s));
    assert_eq!(selected.len(), seg.points.len());
    for (k, d) in selected.iter().enumerate() {
        let iv = Interval { r: d.r, s: d.s };
        for earlier in &selected[..k] {
            assert!(!iv.contains(earlier.tau_hat));
        }
    }
}
