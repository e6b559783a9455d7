//! Experiment runner for the four attack settings on the synthetic Markov
//! language model, with CSV reporting.

mod config;
mod report;

pub use config::{window_rule, ExperimentConfig, Setting, DEFAULT_TEMPERATURE};
pub use report::{emit_report, summarize, MethodSummary, SUMMARY_FILE, PVALUES_FILE, CHANGEPOINTS_FILE};

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cpd::{rand_index, seedbs_not, BootstrapConfig, ChangePointSet, IntervalDiagnostic, SegmentConfig};
use crate::decoder::{apply_attack, generate_plain, generate_watermarked, AttackSpec, TokenSeq};
use crate::error::Result;
use crate::keygen::{KeySeq, KeyStream};
use crate::lm::{MarkovLm, Token};
use crate::rtest::{pvalue_sequence, PValueSeq, RandTestConfig};
use crate::seeding::derive_seed;
use crate::stats::{Detector, NtpProvenance, StatParams, StatisticKind, TextEvidence};

/// Short name of the detection method a statistic stands for.
pub fn method_label(kind: StatisticKind) -> &'static str {
    match kind {
        StatisticKind::EmsLr => "oracle",
        StatisticKind::EmsShrink => "empty",
        StatisticKind::EmsBase => "baseline",
        other => other.name(),
    }
}

/// Outcome of one statistic on one replication.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub replication: usize,
    pub setting: Setting,
    pub statistic: StatisticKind,
    pub truth: ChangePointSet,
    pub detected: ChangePointSet,
    pub rand_index: f64,
    pub pvalues: PValueSeq,
    pub diagnostics: Vec<IntervalDiagnostic>,
    /// Total number of inserted plain tokens.
    pub inserted: usize,
    pub wall_time: Duration,
}

impl RunResult {
    /// Whether every true change point has a detected one within `tol`.
    pub fn boundaries_within(&self, tol: usize) -> bool {
        self.truth
            .points()
            .iter()
            .all(|&t| self.detected.points().iter().any(|&d| d.abs_diff(t) <= tol))
    }
}

/// The attacked text of one replication together with its key and prompt.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub text: TokenSeq,
    pub keys: KeySeq<f64>,
    pub truth: ChangePointSet,
    pub inserted: usize,
}

/// Builds the text of replication `rep`: a fresh prompt, `n` watermarked
/// tokens under a fresh key, then the setting's attacks.
pub fn build_scenario(config: &ExperimentConfig, lm: &MarkovLm<f64>, rep: usize) -> Result<Scenario> {
    let r = rep as u64;
    let prompt = generate_plain(lm, config.prompt_len, &[], derive_seed(config.attack_seed, &[r, 0]))?.tokens;
    let key_seed = derive_seed(config.key_seed, &[r]);
    let keys = KeyStream::detection(config.scheme, config.vocab, key_seed)?.materialize::<f64>(config.n);
    let mut text = generate_watermarked(lm, &keys, config.n, &prompt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.attack_seed, &[r, 1]));
    let max_insert = config.max_insert_len();
    let min_insert = ((config.insert_min_frac * max_insert as f64).ceil() as usize).min(max_insert);
    let mut inserted = 0;
    let attacks: Vec<AttackSpec> = match config.setting {
        Setting::Clean => vec![],
        Setting::Insertion => {
            inserted = rng.random_range(min_insert..=max_insert);
            vec![AttackSpec::insertion(251, inserted)]
        }
        Setting::Substitution => vec![AttackSpec::substitution(201, 100)],
        Setting::Mixed => {
            inserted = rng.random_range(min_insert..=max_insert);
            vec![AttackSpec::substitution(101, 100), AttackSpec::insertion(301, inserted)]
        }
    };
    for spec in &attacks {
        text = apply_attack(&text, spec, lm, &keys, &mut rng)?;
    }
    let truth = ChangePointSet::from_segment_starts(text.len(), &text.label_boundaries())?;
    Ok(Scenario {
        text,
        keys,
        truth,
        inserted,
    })
}

fn estimator(config: &ExperimentConfig) -> Result<Option<MarkovLm<f64>>> {
    match config.estimator_seed {
        None => Ok(None),
        Some(seed) => {
            let mut spec = config.model_spec();
            spec.seed = seed;
            Ok(Some(MarkovLm::generate(&spec)?))
        }
    }
}

/// Detector for `kind` on `tokens`. Likelihood-ratio and Huber statistics
/// use exact NTPs (true prompt, generating model); the shrinkage statistic
/// uses empty-prompt estimates from `estimate` (the generating model unless
/// a separate estimator is configured).
pub fn build_detector(
    config: &ExperimentConfig,
    kind: StatisticKind,
    lm: &MarkovLm<f64>,
    estimate: Option<&MarkovLm<f64>>,
    prompt: &[Token],
    tokens: &[Token],
) -> Result<Detector<f64>> {
    let params = StatParams {
        lambda: config.lambda,
        p0: config.p0,
        its_lr_weights: false,
    };
    let evidence = match kind {
        StatisticKind::EmsLr | StatisticKind::ItsHuber => {
            TextEvidence::from_source(lm, prompt, tokens.to_vec(), NtpProvenance::Exact)?
        }
        StatisticKind::EmsShrink => TextEvidence::from_source(
            estimate.unwrap_or(lm),
            &[],
            tokens.to_vec(),
            NtpProvenance::EstimatedEmptyPrompt,
        )?,
        _ => TextEvidence::tokens_only(tokens.to_vec(), config.vocab),
    };
    Detector::new(kind, &params, evidence)
}

/// Runs every configured statistic on replication `rep`.
pub fn run_replication(
    config: &ExperimentConfig,
    lm: &MarkovLm<f64>,
    estimate: Option<&MarkovLm<f64>>,
    rep: usize,
) -> Result<Vec<RunResult>> {
    let scenario = build_scenario(config, lm, rep)?;
    let r = rep as u64;
    let segment = SegmentConfig {
        decay: config.decay,
        zeta: config.zeta,
        margin: config.effective_margin(),
        min_len: config.effective_min_interval(),
        bootstrap: BootstrapConfig {
            block: config.block,
            replicates: config.bootstrap_replicates,
            seed: derive_seed(config.bootstrap_seed, &[r]),
        },
    };
    config
        .effective_statistics()
        .into_iter()
        .map(|kind| {
            let start = Instant::now();
            let det = build_detector(config, kind, lm, estimate, &scenario.text.prompt, &scenario.text.tokens)?;
            let test = RandTestConfig::new(config.null_replicates, 0.05, kind, derive_seed(config.null_seed, &[r]))?;
            let pvalues = pvalue_sequence(&det, &scenario.keys, config.window, &test)?;
            let seg = seedbs_not(&pvalues.values(), &segment)?;
            Ok(RunResult {
                replication: rep,
                setting: config.setting,
                statistic: kind,
                rand_index: rand_index(&scenario.truth, &seg.points)?,
                truth: scenario.truth.clone(),
                detected: seg.points,
                pvalues,
                diagnostics: seg.diagnostics,
                inserted: scenario.inserted,
                wall_time: start.elapsed(),
            })
        })
        .collect()
}

/// Runs all replications; results are ordered by replication, then by the
/// configured statistic order.
pub fn run_setting(config: &ExperimentConfig) -> Result<Vec<RunResult>> {
    config.validate_experiment()?;
    let lm = MarkovLm::<f64>::generate(&config.model_spec())?;
    let est = estimator(config)?;
    let per_rep = (0..config.replications)
        .into_par_iter()
        .map(|rep| run_replication(config, &lm, est.as_ref(), rep))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_rep.into_iter().flatten().collect())
}
