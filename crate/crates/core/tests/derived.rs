//! Monte Carlo and direct-evaluation oracles for the individual operations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use wmseg::cpd::{
    best_split, block_bootstrap_pvalue, seedbs_not, BootstrapConfig, ChangePointSet, Interval, SegmentConfig,
};
use wmseg::decoder::{apply_attack, decode_ems, decode_its, generate_plain, generate_watermarked, AttackSpec};
use wmseg::harness::{build_detector, build_scenario, ExperimentConfig, Setting};
use wmseg::keygen::{generate_keys, generate_null_keys, KeyAccess, KeyStream, Scheme};
use wmseg::lm::{
    mean_potential, read_trace_from, realized_probs, text_distributions, write_trace_to, DistributionSource,
    MarkovSpec, NtpTraceRecord, ProbVector, Token, TraceProbs,
};
use wmseg::rtest::{pvalue_sequence, RandTestConfig};
use wmseg::stats::{its_interval, phi_ems, phi_ems_onemlog, phi_its, StatisticKind, WeightVector};
use wmseg::MarkovLm;

fn default_lm() -> (ExperimentConfig, MarkovLm) {
    let config = ExperimentConfig::default();
    let lm = MarkovLm::generate(&config.model_spec()).unwrap();
    (config, lm)
}

#[test]
fn seeded_row_sums_to_one() {
    let spec = MarkovSpec {
        vocab: 50,
        order: 1,
        seed: 42,
        ..MarkovSpec::default()
    };
    let lm = MarkovLm::generate(&spec).unwrap();
    let row = lm.next_distribution(&[1]).unwrap();
    let total: f64 = row.as_slice().iter().sum();
    assert!((total - 1.0).abs() <= 1e-9);
}

#[test]
fn unit_temperature_model_has_watermark_potential() {
    let spec = MarkovSpec {
        vocab: 50,
        temperature: 1.0,
        ..MarkovSpec::default()
    };
    let lm = MarkovLm::generate(&spec).unwrap();
    let text = generate_plain(&lm, 500, &[], 3).unwrap().tokens;
    let p = realized_probs(&text_distributions(&lm, &[], &text).unwrap(), &text);
    assert!(mean_potential(&p) > 0.3);
}

#[test]
fn five_hundred_record_trace_round_trips() {
    let (_, lm) = default_lm();
    let text = generate_plain(&lm, 500, &[], 9).unwrap().tokens;
    let dists = text_distributions(&lm, &[], &text).unwrap();
    let records: Vec<NtpTraceRecord> = text
        .iter()
        .zip(dists)
        .enumerate()
        .map(|(i, (&y, mu))| NtpTraceRecord {
            step: i + 1,
            token: y,
            probs: TraceProbs::Full(mu.into_vec()),
        })
        .collect();
    let mut buf = Vec::new();
    write_trace_to(&mut buf, 50, &records).unwrap();
    let (header, back) = read_trace_from(buf.as_slice()).unwrap();
    assert_eq!(header.vocab, 50);
    assert!(!header.truncated);
    assert_eq!(back, records);
}

#[test]
fn its_uniforms_average_one_half() {
    let keys = generate_keys::<f64>(Scheme::Its, 10_000, 10, 17).unwrap();
    let mean = keys.its().unwrap().iter().map(|k| k.u()).sum::<f64>() / 10_000.0;
    assert!((mean - 0.5).abs() <= 0.02);
}

#[test]
fn pooled_null_components_are_uniform() {
    let mut xs = Vec::with_capacity(100 * 100 * 5);
    for t in 1..=100 {
        let keys = generate_null_keys::<f64>(Scheme::Ems, 100, 5, t, 23).unwrap();
        for k in keys.ems().unwrap() {
            xs.extend_from_slice(k.as_slice());
        }
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let ks = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| (x - i as f64 / n).abs().max(((i + 1) as f64 / n - x).abs()))
        .fold(0.0, f64::max);
    assert!(ks < 0.01, "KS distance {ks}");
}

#[test]
fn permutations_are_uniform() {
    let stream = KeyStream::detection(Scheme::Its, 3, 29).unwrap();
    let mut counts = std::collections::HashMap::new();
    let draws = 60_000;
    for step in 0..draws {
        *counts.entry(stream.its_key::<f64>(step).ranks().to_vec()).or_insert(0usize) += 1;
    }
    assert_eq!(counts.len(), 6);
    for c in counts.values() {
        assert!((*c as f64 / draws as f64 - 1.0 / 6.0).abs() <= 0.01);
    }
}

fn decoder_tv(scheme: Scheme, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mu = ProbVector::normalized((0..5).map(|_| rng.random_range(0.05..1.0)).collect()).unwrap();
    let stream = KeyStream::detection(scheme, 5, seed).unwrap();
    let draws = 100_000;
    let mut counts = [0usize; 5];
    for step in 0..draws {
        let y = match scheme {
            Scheme::Ems => decode_ems(&stream.ems_key::<f64>(step), &mu).unwrap(),
            Scheme::Its => decode_its(&stream.its_key::<f64>(step), &mu),
        };
        counts[y as usize] += 1;
    }
    0.5 * counts
        .iter()
        .zip(mu.as_slice())
        .map(|(&c, &p)| (c as f64 / draws as f64 - p).abs())
        .sum::<f64>()
}

#[test]
fn decoders_reproduce_the_distribution() {
    assert!(decoder_tv(Scheme::Ems, 31) < 0.01);
    assert!(decoder_tv(Scheme::Its, 37) < 0.01);
}

#[test]
fn watermarked_generation_reruns_identically() {
    let (config, lm) = default_lm();
    let keys = generate_keys::<f64>(Scheme::Ems, 500, config.vocab, 41).unwrap();
    let a = generate_watermarked(&lm, &keys, 500, &[]).unwrap();
    let b = generate_watermarked(&lm, &keys, 500, &[]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn insertion_labels_the_spliced_block() {
    let (config, lm) = default_lm();
    let keys = generate_keys::<f64>(Scheme::Ems, 500, config.vocab, 43).unwrap();
    let text = generate_watermarked(&lm, &keys, 500, &[]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let out = apply_attack(&text, &AttackSpec::insertion(300, 100), &lm, &keys, &mut rng).unwrap();
    assert_eq!(out.len(), 600);
    let labels = out.labels.as_ref().unwrap();
    assert!(labels[299..399].iter().all(|l| !l.is_watermarked()));
    assert!(labels[..299].iter().chain(&labels[399..]).all(|l| l.is_watermarked()));
}

fn plain_text(n: usize, seed: u64) -> Vec<Token> {
    let (_, lm) = default_lm();
    generate_plain(&lm, n, &[], seed).unwrap().tokens
}

#[test]
fn ems_null_mean_is_zero() {
    let text = plain_text(50, 47);
    let w = WeightVector::uniform(50);
    let mean = (1..=10_000)
        .map(|t| {
            let keys = generate_null_keys::<f64>(Scheme::Ems, 50, 50, t, 48).unwrap();
            phi_ems(&keys, &text, &w).unwrap().value
        })
        .sum::<f64>()
        / 10_000.0;
    assert!(mean.abs() <= 0.01, "{mean}");
}

#[test]
fn ems_watermarked_mean_is_mean_potential() {
    let (config, lm) = default_lm();
    let n = 50;
    let reps = 2000;
    let w = WeightVector::uniform(n);
    let diffs: Vec<f64> = (0..reps)
        .map(|r| {
            let keys = generate_keys::<f64>(Scheme::Ems, n, config.vocab, 1000 + r).unwrap();
            let text = generate_watermarked(&lm, &keys, n, &[]).unwrap().tokens;
            let p = realized_probs(&text_distributions(&lm, &[], &text).unwrap(), &text);
            phi_ems(&keys, &text, &w).unwrap().value - mean_potential(&p)
        })
        .collect();
    let mean = diffs.iter().sum::<f64>() / reps as f64;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
    assert!(mean.abs() <= 4.0 * sd / (reps as f64).sqrt(), "mean {mean}, sd {sd}");
}

#[test]
fn its_null_mean_is_zero() {
    let text = plain_text(50, 53);
    let w = WeightVector::uniform(50);
    let mean = (1..=10_000)
        .map(|t| {
            let keys = generate_null_keys::<f64>(Scheme::Its, 50, 50, t, 54).unwrap();
            phi_its(&keys, &text, &w).unwrap()
        })
        .sum::<f64>()
        / 10_000.0;
    // Each term has standard deviation 1/12 or less.
    assert!(mean.abs() <= 4.0 / 12.0 / (50.0f64 * 10_000.0).sqrt(), "{mean}");
}

#[test]
fn onemlog_null_mean_is_one() {
    let text = plain_text(50, 59);
    let w = WeightVector::uniform(50);
    let mean = (1..=10_000)
        .map(|t| {
            let keys = generate_null_keys::<f64>(Scheme::Ems, 50, 50, t, 60).unwrap();
            phi_ems_onemlog(&keys, &text, &w).unwrap().value
        })
        .sum::<f64>()
        / 10_000.0;
    assert!((mean - 1.0).abs() <= 0.02, "{mean}");
}

#[test]
fn its_null_hit_rate_matches_mass() {
    let mu = ProbVector::new(vec![0.1, 0.3, 0.25, 0.35]).unwrap();
    let stream = KeyStream::null(Scheme::Its, 4, 61, 1).unwrap();
    let draws = 10_000;
    let hits = (0..draws)
        .filter(|&step| {
            let key = stream.its_key::<f64>(step);
            let (lo, hi) = its_interval(&key, &mu, 1);
            lo <= key.u() && key.u() <= hi
        })
        .count();
    assert!((hits as f64 / draws as f64 - 0.3).abs() <= 0.01);
}

// Overlapping windows share null keys, so one text gives only about m / B
// independent values. Average over several texts.
#[test]
fn plain_text_pvalues_average_one_half() {
    let (config, lm) = default_lm();
    let texts = 20u64;
    let mut total = 0.0;
    for r in 0..texts {
        let prompt = generate_plain(&lm, 10, &[], 67 + 4 * r).unwrap().tokens;
        let text = generate_plain(&lm, 500, &prompt, 68 + 4 * r).unwrap().tokens;
        let keys = generate_keys::<f64>(Scheme::Ems, 500, config.vocab, 69 + 4 * r).unwrap();
        let det = build_detector(&config, StatisticKind::EmsLr, &lm, None, &prompt, &text).unwrap();
        let test = RandTestConfig::sequence(StatisticKind::EmsLr, 70 + 4 * r);
        let p = pvalue_sequence(&det, &keys, 20, &test).unwrap().values();
        total += p.iter().sum::<f64>() / p.len() as f64;
    }
    let mean = total / texts as f64;
    assert!((mean - 0.5).abs() <= 0.05, "{mean}");
}

#[test]
fn watermarked_text_pvalues_are_small() {
    let (config, lm) = default_lm();
    let config = ExperimentConfig {
        setting: Setting::Clean,
        ..config
    };
    let sc = build_scenario(&config, &lm, 0).unwrap();
    let det = build_detector(&config, StatisticKind::EmsLr, &lm, None, &sc.text.prompt, &sc.text.tokens).unwrap();
    let test = RandTestConfig::sequence(StatisticKind::EmsLr, 71);
    let p = pvalue_sequence(&det, &sc.keys, 20, &test).unwrap().values();
    let small = p.iter().filter(|&&x| x <= 0.05).count() as f64 / p.len() as f64;
    assert!(small >= 0.8, "{small}");
}

#[test]
fn split_finds_a_sharp_boundary() {
    let mut rng = ChaCha8Rng::seed_from_u64(73);
    let mut p = vec![0.01; 50];
    p.extend((0..50).map(|_| rng.random::<f64>()));
    let (tau, _) = best_split(&p, 0, 100, 10).unwrap();
    assert!(tau.abs_diff(50) <= 20);
}

#[test]
fn split_localizes_a_beta_uniform_change() {
    let mut rng = ChaCha8Rng::seed_from_u64(79);
    let beta = Beta::new(0.1, 1.0).unwrap();
    let (m, b) = (200, 20);
    let mut good = 0;
    for _ in 0..200 {
        let cut = rng.random_range(40..=160);
        let beta_first = rng.random_bool(0.5);
        let p: Vec<f64> = (0..m)
            .map(|i| {
                if (i < cut) == beta_first {
                    beta.sample(&mut rng)
                } else {
                    rng.random()
                }
            })
            .collect();
        let (tau, _) = best_split(&p, 0, m, b / 2).unwrap();
        good += (tau.abs_diff(cut) <= b) as usize;
    }
    assert!(good >= 180, "{good}/200");
}

#[test]
fn bootstrap_is_calibrated_on_independent_uniforms() {
    let mut rng = ChaCha8Rng::seed_from_u64(83);
    let m = 100;
    let runs = 500;
    let mut rejections = 0;
    for run in 0..runs {
        let p: Vec<f64> = (0..m).map(|_| rng.random()).collect();
        let config = BootstrapConfig {
            block: 10,
            replicates: 999,
            seed: run,
        };
        let test = block_bootstrap_pvalue(&p, Interval { r: 0, s: m }, 5, &config).unwrap();
        rejections += (test.p_tilde() < 0.05) as usize;
    }
    let rate = rejections as f64 / runs as f64;
    assert!(rate <= 0.08, "{rate}");
}

/// Every seeded interval is tested at level zeta, so the chance of a spurious
/// split grows with the number of short intervals; at m = 100 there are few.
#[test]
fn uniform_sequences_rarely_yield_change_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(89);
    let runs = 200;
    let mut empty = 0;
    for run in 0..runs {
        let p: Vec<f64> = (0..100).map(|_| rng.random()).collect();
        let seg = seedbs_not(&p, &SegmentConfig::for_window(20, run)).unwrap();
        empty += seg.points.is_empty() as usize;
    }
    assert!(empty * 100 >= 95 * runs as usize, "{empty}/{runs}");
}

#[test]
fn two_boundaries_are_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(97);
    let runs = 50;
    let mut found = 0;
    for run in 0..runs {
        let p: Vec<f64> = (1..=500)
            .map(|i| {
                // p-values on the lattice of a 99-replicate randomization test
                if (201..=300).contains(&i) {
                    0.01 * rng.random_range(1..=2) as f64
                } else {
                    0.01 * rng.random_range(1..=100) as f64
                }
            })
            .collect();
        let seg = seedbs_not(&p, &SegmentConfig::for_window(20, run)).unwrap();
        let truth = ChangePointSet::from_segment_starts(500, &[201, 301]).unwrap();
        let hit = truth
            .points()
            .iter()
            .all(|&t| seg.points.points().iter().any(|&d| d.abs_diff(t) <= 20));
        found += hit as usize;
    }
    assert!(found * 5 >= runs as usize * 4, "{found}/{runs}");
}

#[test]
fn null_components_are_lazy_and_exact() {
    let stream = KeyStream::null(Scheme::Ems, 50, 101, 3).unwrap();
    let keys = stream.materialize::<f64>(40);
    let lazy = stream.bounded(40);
    for step in 0..40 {
        for y in [0, 17, 49] {
            assert_eq!(KeyAccess::<f64>::ems_component(&lazy, step, y), keys.ems_component(step, y));
        }
    }
}
