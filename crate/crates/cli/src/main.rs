use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use wmseg::cpd::{rand_index, seedbs_not, BootstrapConfig, ChangePointSet, SegmentConfig};
use wmseg::decoder::{apply_attack, generate_plain, generate_watermarked, AttackKind, AttackSpec, TokenSeq};
use wmseg::harness::{build_detector, emit_report, run_setting, summarize, ExperimentConfig, SUMMARY_FILE};
use wmseg::keygen::KeySpec;
use wmseg::lm::{
    text_distributions, write_trace, MarkovLm, NtpTraceRecord, TraceProbs, TraceSource,
};
use wmseg::rtest::{pvalue_sequence, randomization_pvalue, PValueSeq, RandTestConfig, DEFAULT_GLOBAL_REPLICATES};
use wmseg::seeding::derive_seed;
use wmseg::stats::{Detector, NtpProvenance, StatParams, StatisticKind, TextEvidence};

#[derive(Parser)]
#[command(name = "wmseg", version, about = "Watermark generation, detection and segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate watermarked text from the synthetic language model.
    Generate(GenerateArgs),
    /// Apply an insertion or substitution attack to a text.
    Attack(AttackArgs),
    /// Global randomization test on a text.
    Detect(DetectArgs),
    /// Sliding-window p-value sequence of a text.
    Pvalseq(PvalseqArgs),
    /// Change points of a p-value sequence.
    Segment(SegmentArgs),
    /// Run replications of an attack setting and write CSV reports.
    Experiment(ExperimentArgs),
    /// Summarize a report directory.
    Report(ReportArgs),
}

/// Experiment configuration: a flat key-value TOML file overridden by flags.
#[derive(Args, Default)]
struct ConfigArgs {
    /// Flat TOML file with experiment fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    setting: Option<u8>,
    #[arg(long)]
    scheme: Option<String>,
    /// Comma-separated statistic names.
    #[arg(long)]
    statistics: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    prompt_len: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    block: Option<usize>,
    #[arg(long)]
    null_replicates: Option<usize>,
    #[arg(long)]
    bootstrap_replicates: Option<usize>,
    #[arg(long)]
    decay: Option<f64>,
    #[arg(long)]
    zeta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    p0: Option<f64>,
    #[arg(long)]
    margin: Option<usize>,
    #[arg(long)]
    min_interval: Option<usize>,
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    insert_len: Option<usize>,
    #[arg(long)]
    insert_min_frac: Option<f64>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    concentration: Option<f64>,
    #[arg(long)]
    model_seed: Option<u64>,
    #[arg(long)]
    estimator_seed: Option<u64>,
    #[arg(long)]
    key_seed: Option<u64>,
    #[arg(long)]
    null_seed: Option<u64>,
    #[arg(long)]
    bootstrap_seed: Option<u64>,
    #[arg(long)]
    attack_seed: Option<u64>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output token sequence file.
    #[arg(long)]
    out: PathBuf,
    /// Output key file.
    #[arg(long)]
    keys_out: PathBuf,
    /// Also write the exact next-token distributions as an NTP trace.
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    text: PathBuf,
    #[arg(long)]
    keys: PathBuf,
    /// `insertion` or `substitution`.
    #[arg(long)]
    kind: String,
    /// One-based index of the first affected token.
    #[arg(long)]
    start: usize,
    #[arg(long)]
    len: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DetectArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    text: PathBuf,
    #[arg(long)]
    keys: PathBuf,
    #[arg(long)]
    statistic: String,
    /// Null replicates `T`.
    #[arg(long, default_value_t = DEFAULT_GLOBAL_REPLICATES)]
    replicates: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// NTP trace for the text; replaces the synthetic model for weighted
    /// statistics.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct PvalseqArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    text: PathBuf,
    #[arg(long)]
    keys: PathBuf,
    #[arg(long)]
    statistic: String,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SegmentArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// p-value sequence file.
    #[arg(long)]
    pvalues: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-interval diagnostics as JSON lines.
    #[arg(long)]
    diagnostics: Option<PathBuf>,
    /// Labeled text whose boundaries are scored with the Rand index.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Report directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Report directory written by `experiment`.
    #[arg(long)]
    dir: PathBuf,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<wmseg::Error> for Failure {
    fn from(e: wmseg::Error) -> Self {
        match e {
            wmseg::Error::Io(_) | wmseg::Error::Csv(_) => Failure::Runtime(e.into()),
            _ => Failure::Validation(e.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn validation(msg: impl std::fmt::Display) -> Failure {
    Failure::Validation(anyhow::anyhow!("{msg}"))
}

type CliResult<T> = Result<T, Failure>;

impl ConfigArgs {
    fn overrides(&self) -> CliResult<toml::Table> {
        let mut t = toml::Table::new();
        let mut put = |k: &str, v: toml::Value| {
            t.insert(k.to_string(), v);
        };
        macro_rules! int {
            ($($f:ident),*) => {$(
                if let Some(v) = self.$f {
                    let v = i64::try_from(v).map_err(|_| validation(concat!(stringify!($f), " is too large")))?;
                    put(stringify!($f), toml::Value::Integer(v));
                }
            )*};
        }
        macro_rules! float {
            ($($f:ident),*) => {$(
                if let Some(v) = self.$f {
                    put(stringify!($f), toml::Value::Float(v));
                }
            )*};
        }
        int!(setting, n, prompt_len, window, block, null_replicates, bootstrap_replicates, margin, min_interval,
             replications, insert_len, vocab, order, model_seed, estimator_seed, key_seed, null_seed,
             bootstrap_seed, attack_seed);
        float!(decay, zeta, lambda, p0, insert_min_frac, temperature, concentration);
        if let Some(s) = &self.scheme {
            put("scheme", toml::Value::String(s.clone()));
        }
        if let Some(s) = &self.statistics {
            let list = s.split(',').map(|x| toml::Value::String(x.trim().to_string())).collect();
            put("statistics", toml::Value::Array(list));
        }
        Ok(t)
    }

    /// File values, then flag overrides, then defaults for anything unset.
    fn load(&self) -> CliResult<ExperimentConfig> {
        let mut table = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                text.parse::<toml::Table>()
                    .map_err(|e| validation(format!("config {}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        if let Some((k, _)) = table.iter().find(|(_, v)| v.is_table()) {
            return Err(validation(format!("config key `{k}` is a table; the config file is flat")));
        }
        table.extend(self.overrides()?);
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn model(cfg: &ExperimentConfig) -> CliResult<MarkovLm<f64>> {
    Ok(MarkovLm::generate(&cfg.model_spec())?)
}

fn parse_statistic(s: &str) -> CliResult<StatisticKind> {
    Ok(s.parse()?)
}

fn load_inputs(text: &Path, keys: &Path) -> CliResult<(TokenSeq, usize, KeySpec)> {
    let (seq, vocab) = TokenSeq::read(text)?;
    let spec = KeySpec::read(keys)?;
    if spec.vocab != vocab {
        return Err(validation(format!("key vocabulary {} differs from text vocabulary {vocab}", spec.vocab)));
    }
    Ok((seq, vocab, spec))
}

fn detector_for(
    cfg: &ExperimentConfig,
    kind: StatisticKind,
    seq: &TokenSeq,
    vocab: usize,
    trace: Option<&Path>,
) -> CliResult<Detector<f64>> {
    match trace {
        Some(path) => {
            let source = TraceSource::<f64>::load(path)?;
            if source.tokens() != seq.tokens.as_slice() {
                return Err(validation("trace tokens differ from the text"));
            }
            let params = StatParams {
                lambda: cfg.lambda,
                p0: cfg.p0,
                its_lr_weights: false,
            };
            let evidence = TextEvidence {
                tokens: seq.tokens.clone(),
                vocab,
                dists: Some(source.distributions().to_vec()),
                provenance: NtpProvenance::Trace,
            };
            Ok(Detector::new(kind, &params, evidence)?)
        }
        None => {
            if cfg.vocab != vocab {
                return Err(validation(format!("model vocabulary {} differs from text vocabulary {vocab}", cfg.vocab)));
            }
            let lm = model(cfg)?;
            Ok(build_detector(cfg, kind, &lm, None, &seq.prompt, &seq.tokens)?)
        }
    }
}

fn generate(a: GenerateArgs) -> CliResult<()> {
    let cfg = a.cfg.load()?;
    let lm = model(&cfg)?;
    let prompt = generate_plain(&lm, cfg.prompt_len, &[], derive_seed(cfg.attack_seed, &[0, 0]))?.tokens;
    let spec = KeySpec {
        scheme: cfg.scheme,
        n: cfg.n,
        vocab: cfg.vocab,
        seed: cfg.key_seed,
    };
    let keys = spec.generate::<f64>()?;
    let text = generate_watermarked(&lm, &keys, cfg.n, &prompt)?;
    text.write(&a.out, cfg.vocab)?;
    spec.write(&a.keys_out)?;
    if let Some(path) = a.trace_out {
        let dists = text_distributions(&lm, &prompt, &text.tokens)?;
        let records: Vec<NtpTraceRecord> = dists
            .into_iter()
            .zip(&text.tokens)
            .enumerate()
            .map(|(i, (d, &y))| NtpTraceRecord {
                step: i + 1,
                token: y,
                probs: TraceProbs::Full(d.into_vec()),
            })
            .collect();
        write_trace(path, cfg.vocab, &records)?;
    }
    println!("wrote {} tokens to {}", text.len(), a.out.display());
    Ok(())
}

fn attack(a: AttackArgs) -> CliResult<()> {
    let cfg = a.cfg.load()?;
    let (seq, vocab, spec) = load_inputs(&a.text, &a.keys)?;
    if cfg.vocab != vocab {
        return Err(validation(format!("model vocabulary {} differs from text vocabulary {vocab}", cfg.vocab)));
    }
    let kind = match a.kind.as_str() {
        "insertion" => AttackKind::Insertion,
        "substitution" => AttackKind::Substitution,
        other => return Err(validation(format!("unknown attack kind `{other}`; expected insertion or substitution"))),
    };
    let lm = model(&cfg)?;
    let keys = spec.generate::<f64>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.attack_seed, &[1]));
    let out = apply_attack(&seq, &AttackSpec { kind, start: a.start, len: a.len }, &lm, &keys, &mut rng)?;
    out.write(&a.out, vocab)?;
    println!("wrote {} tokens to {}; segment starts {:?}", out.len(), a.out.display(), out.label_boundaries());
    Ok(())
}

#[derive(Serialize)]
struct DetectOutput {
    statistic: StatisticKind,
    observed: f64,
    numerator: u32,
    replicates: usize,
    pvalue: f64,
    reject: bool,
}

fn detect(a: DetectArgs) -> CliResult<()> {
    let cfg = a.cfg.load()?;
    let kind = parse_statistic(&a.statistic)?;
    let (seq, vocab, spec) = load_inputs(&a.text, &a.keys)?;
    let det = detector_for(&cfg, kind, &seq, vocab, a.trace.as_deref())?;
    let test = RandTestConfig::new(a.replicates, a.alpha, kind, cfg.null_seed)?;
    let keys = spec.generate::<f64>()?;
    let res = randomization_pvalue(&det, &keys, &test)?;
    let out = DetectOutput {
        statistic: kind,
        observed: res.observed,
        numerator: res.numerator,
        replicates: res.replicates,
        pvalue: res.pvalue(),
        reject: res.rejects(a.alpha),
    };
    println!("{}", serde_json::to_string(&out).context("serializing result")?);
    Ok(())
}

fn pvalseq(a: PvalseqArgs) -> CliResult<()> {
    let cfg = a.cfg.load()?;
    let kind = parse_statistic(&a.statistic)?;
    let (seq, vocab, spec) = load_inputs(&a.text, &a.keys)?;
    let det = detector_for(&cfg, kind, &seq, vocab, a.trace.as_deref())?;
    let test = RandTestConfig::new(cfg.null_replicates, 0.05, kind, cfg.null_seed)?;
    let keys = spec.generate::<f64>()?;
    let pv = pvalue_sequence(&det, &keys, cfg.window, &test)?;
    pv.write(&a.out)?;
    println!("wrote {} p-values to {}", pv.len(), a.out.display());
    Ok(())
}

fn segment(a: SegmentArgs) -> CliResult<()> {
    let cfg = a.cfg.load()?;
    let pv = PValueSeq::read(&a.pvalues)?;
    let window = pv.window();
    let seg_cfg = SegmentConfig {
        decay: cfg.decay,
        zeta: cfg.zeta,
        margin: if cfg.margin == 0 { (window / 2).max(1) } else { cfg.margin },
        min_len: if cfg.min_interval == 0 { 2 * window } else { cfg.min_interval },
        bootstrap: BootstrapConfig {
            block: cfg.block,
            replicates: cfg.bootstrap_replicates,
            seed: cfg.bootstrap_seed,
        },
    };
    let seg = seedbs_not(&pv.values(), &seg_cfg)?;
    seg.points.write(&a.out)?;
    if let Some(path) = &a.diagnostics {
        let mut text = String::new();
        for d in &seg.diagnostics {
            text.push_str(&serde_json::to_string(d).context("serializing diagnostics")?);
            text.push('\n');
        }
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    print!("change points: {:?}", seg.points.points());
    if let Some(path) = &a.truth {
        let (seq, _) = TokenSeq::read(path)?;
        let truth = ChangePointSet::from_segment_starts(seq.len(), &seq.label_boundaries())?;
        print!("; truth: {:?}; rand index: {}", truth.points(), rand_index(&truth, &seg.points)?);
    }
    println!();
    Ok(())
}

fn experiment(a: ExperimentArgs) -> CliResult<()> {
    let cfg = a.cfg.load()?;
    let results = run_setting(&cfg)?;
    emit_report(&results, &a.out)?;
    fs::write(
        a.out.join("config.toml"),
        toml::to_string(&cfg).context("serializing config")?,
    )
    .context("writing config copy")?;
    print_summary(&summarize(&results, cfg.window).iter().map(|s| {
        (s.statistic.name().to_string(), s.runs, s.median_rand_index, s.mean_rand_index, s.median_detected, s.any_detection_rate)
    }).collect::<Vec<_>>());
    Ok(())
}

type SummaryLine = (String, usize, f64, f64, f64, f64);

fn print_summary(rows: &[SummaryLine]) {
    println!("{:<14} {:>5} {:>10} {:>10} {:>10} {:>10}", "statistic", "runs", "median_ri", "mean_ri", "median_cp", "any_cp");
    for (name, runs, med, mean, det, any) in rows {
        println!("{name:<14} {runs:>5} {med:>10.4} {mean:>10.4} {det:>10.1} {any:>10.3}");
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    if v.len() % 2 == 1 { v[k] } else { (v[k - 1] + v[k]) / 2.0 }
}

fn report(a: ReportArgs) -> CliResult<()> {
    let path = a.dir.join(SUMMARY_FILE);
    let mut reader = csv::Reader::from_path(&path).with_context(|| format!("opening {}", path.display()))?;
    let headers = reader.headers().context("reading header")?.clone();
    let col = |name: &str| -> CliResult<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| validation(format!("{} has no `{name}` column", path.display())))
    };
    let (c_stat, c_ri, c_det) = (col("statistic")?, col("rand_index")?, col("n_detected")?);
    let mut groups: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut order = Vec::new();
    for row in reader.records() {
        let row = row.context("reading summary row")?;
        let parse = |i: usize| -> CliResult<f64> {
            row[i].parse::<f64>().map_err(|e| validation(format!("bad number `{}`: {e}", &row[i])))
        };
        let name = row[c_stat].to_string();
        if !groups.contains_key(&name) {
            order.push(name.clone());
        }
        let g = groups.entry(name).or_default();
        g.0.push(parse(c_ri)?);
        g.1.push(parse(c_det)?);
    }
    let rows: Vec<SummaryLine> = order
        .into_iter()
        .map(|name| {
            let (mut ri, mut det) = groups.remove(&name).unwrap_or_default();
            let n = ri.len();
            let mean = ri.iter().sum::<f64>() / n as f64;
            let any = det.iter().filter(|&&d| d > 0.0).count() as f64 / n as f64;
            (name, n, median(&mut ri), mean, median(&mut det), any)
        })
        .collect();
    print_summary(&rows);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Attack(a) => attack(a),
        Command::Detect(a) => detect(a),
        Command::Pvalseq(a) => pvalseq(a),
        Command::Segment(a) => segment(a),
        Command::Experiment(a) => experiment(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
