use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use hes_core::analysis::{self, HistogramSpec};
use hes_core::corpus::CorpusReader;
use hes_core::manifest::{read_manifest, SelectionManifest};
use hes_core::pipeline::{score_stream, ScoreOptions};
use hes_core::rl::{batch_report, rollout_groups, BatchSpec, BatchStrategy};
use hes_core::scores::{file_digest, ScoreTable};
use hes_core::selection::{self, Budget, Metric, RftScope, RftSpec, SelectionMode, SelectionSpec};
use hes_core::synth::{write_generated, GeneratorProfile};
use hes_core::{MetricConfig, TailMode, DEFAULT_ABSOLUTE_THRESHOLD, DEFAULT_HIGH_ENTROPY_FRACTION};

/// Bad flags or flag combinations. Exits with status 1.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

#[derive(Parser, Debug)]
#[command(name = "hes", version, about = "Token-entropy scoring and data selection for reasoning corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Score a corpus: one score line per record
    Score(ScoreArgs),
    /// Select samples from a score file and write a manifest
    #[command(subcommand)]
    Select(SelectCommand),
    /// Build RL training batches from rollout groups in a score file
    RlBatch(RlBatchArgs),
    /// Reports over corpora and score files
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Generate a synthetic corpus
    Synth(SynthArgs),
    /// Re-run the selection recorded in a manifest and compare
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct MetricArgs {
    /// High-entropy fraction p
    #[arg(long, default_value_t = DEFAULT_HIGH_ENTROPY_FRACTION)]
    p: f64,
    /// Absolute entropy threshold for hes_abs
    #[arg(long, default_value_t = DEFAULT_ABSOLUTE_THRESHOLD)]
    tau: f64,
    /// Treatment of probability mass outside the top logprobs
    #[arg(long, value_enum, default_value_t = TailArg::Lump)]
    tail_mode: TailArg,
}

impl MetricArgs {
    fn config(&self) -> Result<MetricConfig> {
        MetricConfig::new(self.p, self.tau, self.tail_mode.into()).or_else(|e| usage(e.to_string()))
    }
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// Corpus file, or - for stdin
    #[arg(short, long)]
    input: PathBuf,
    /// Score file, or - for stdout
    #[arg(short, long, default_value = "-")]
    output: PathBuf,
    #[command(flatten)]
    metric: MetricArgs,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Include high-entropy token positions in each score line
    #[arg(long)]
    high_indices: bool,
    /// Report bad records and continue instead of stopping
    #[arg(long)]
    keep_going: bool,
    /// Skip the duplicate sample_id check (saves memory on huge inputs)
    #[arg(long)]
    no_duplicate_check: bool,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum TailArg {
    Lump,
    Ignore,
}

impl From<TailArg> for TailMode {
    fn from(t: TailArg) -> Self {
        match t {
            TailArg::Lump => TailMode::Lump,
            TailArg::Ignore => TailMode::Ignore,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum MetricArg {
    HesRel,
    HesAbs,
    Es,
    AvgE,
    AvgHe,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::HesRel => Metric::HesRel,
            MetricArg::HesAbs => Metric::HesAbs,
            MetricArg::Es => Metric::Es,
            MetricArg::AvgE => Metric::AvgE,
            MetricArg::AvgHe => Metric::AvgHe,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ModeArg {
    Highest,
    Lowest,
    Random,
    Length,
    Difficulty,
}

impl From<ModeArg> for SelectionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Highest => SelectionMode::HighestHes,
            ModeArg::Lowest => SelectionMode::LowestHes,
            ModeArg::Random => SelectionMode::Random,
            ModeArg::Length => SelectionMode::Length,
            ModeArg::Difficulty => SelectionMode::Difficulty,
        }
    }
}

#[derive(Subcommand, Debug)]
enum SelectCommand {
    /// Corpus-level selection by score, or a baseline
    Sft(SftArgs),
    /// Selection among correct candidates, per query or from a global pool
    Rft(RftArgs),
}

#[derive(Args, Debug)]
struct SftArgs {
    /// Score file
    #[arg(short, long)]
    scores: PathBuf,
    /// Manifest file, or - for stdout
    #[arg(short, long, default_value = "-")]
    output: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Highest)]
    mode: ModeArg,
    /// Fraction of samples to keep
    #[arg(long, conflicts_with = "budget")]
    ratio: Option<f64>,
    /// Number of samples to keep
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long, value_enum, default_value_t = MetricArg::HesRel)]
    metric: MetricArg,
    /// Required by --mode random
    #[arg(long)]
    seed: Option<u64>,
    /// Split by length into this many strata and select within one of them
    #[arg(long, requires = "stratum")]
    strata: Option<usize>,
    /// Stratum to write, counting from 0 (shortest)
    #[arg(long, requires = "strata")]
    stratum: Option<usize>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ScopeArg {
    PerQuery,
    Global,
}

#[derive(Args, Debug)]
struct RftArgs {
    #[arg(short, long)]
    scores: PathBuf,
    #[arg(short, long, default_value = "-")]
    output: PathBuf,
    #[arg(long, value_enum, default_value_t = ScopeArg::PerQuery)]
    scope: ScopeArg,
    /// Responses kept per query; also sets the default global budget
    #[arg(short)]
    k: Option<usize>,
    /// Global pool budget
    #[arg(long)]
    budget: Option<usize>,
    /// Candidates generated per query, used to check k
    #[arg(long)]
    candidates: Option<usize>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum StrategyArg {
    PosHighNegRand,
    PosRandNegRand,
    PosHighNegLow,
    PosRandNegLow,
    PosLowNegRand,
    PosLengthNegRand,
    PosDifficultyNegRand,
    FullBatch,
}

impl From<StrategyArg> for BatchStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::PosHighNegRand => BatchStrategy::PosHighNegRand,
            StrategyArg::PosRandNegRand => BatchStrategy::PosRandNegRand,
            StrategyArg::PosHighNegLow => BatchStrategy::PosHighNegLow,
            StrategyArg::PosRandNegLow => BatchStrategy::PosRandNegLow,
            StrategyArg::PosLowNegRand => BatchStrategy::PosLowNegRand,
            StrategyArg::PosLengthNegRand => BatchStrategy::PosLengthNegRand,
            StrategyArg::PosDifficultyNegRand => BatchStrategy::PosDifficultyNegRand,
            StrategyArg::FullBatch => BatchStrategy::FullBatch,
        }
    }
}

#[derive(Args, Debug)]
struct RlBatchArgs {
    /// Score file with correctness labels; groups are formed by query_id
    #[arg(short, long)]
    scores: PathBuf,
    /// Batch file, one line per group, or - for stdout
    #[arg(short, long, default_value = "-")]
    output: PathBuf,
    #[arg(long, value_enum)]
    strategy: StrategyArg,
    /// Batch size as a fraction of the group size
    #[arg(long, default_value_t = hes_core::rl::DEFAULT_BATCH_FRACTION)]
    fraction: f64,
    /// Required by strategies that sample at random
    #[arg(long)]
    seed: Option<u64>,
    /// Summary report path; defaults to stderr
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, Default, ValueEnum)]
enum Format {
    #[default]
    Json,
    Text,
}

#[derive(Subcommand, Debug)]
enum AnalyzeCommand {
    /// How well each metric separates correct from incorrect samples
    Discrim(DiscrimArgs),
    /// Token entropy distribution and percentile thresholds
    Dist(DistArgs),
    /// Frequency of tokens in the high-entropy sets
    Tokens(TokensArgs),
    /// Rank agreement between two score files of the same samples
    Agreement(AgreementArgs),
}

#[derive(Args, Debug)]
struct DiscrimArgs {
    #[arg(short, long)]
    scores: PathBuf,
    /// Metrics to report (repeatable); all when omitted
    #[arg(long, value_enum)]
    metric: Vec<MetricArg>,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args, Debug)]
struct DistArgs {
    /// Corpus file, or - for stdin
    #[arg(short, long)]
    input: PathBuf,
    /// Percentile to report (repeatable)
    #[arg(long, default_values_t = vec![99.5])]
    percentile: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    bins: usize,
    #[arg(long, default_value_t = 0.0)]
    lo: f64,
    #[arg(long, default_value_t = 10.0)]
    hi: f64,
    #[arg(long, value_enum, default_value_t = TailArg::Lump)]
    tail_mode: TailArg,
    /// Also write histogram bins as CSV
    #[arg(long)]
    histogram_csv: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args, Debug)]
struct TokensArgs {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(long, default_value_t = DEFAULT_HIGH_ENTROPY_FRACTION)]
    p: f64,
    #[arg(long, value_enum, default_value_t = TailArg::Lump)]
    tail_mode: TailArg,
    /// Keep only the most frequent tokens
    #[arg(long)]
    top: Option<usize>,
    /// Also write the frequency table as CSV
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args, Debug)]
struct AgreementArgs {
    #[arg(long)]
    scores_a: PathBuf,
    #[arg(long)]
    scores_b: PathBuf,
    /// Fraction defining the top selection compared for overlap
    #[arg(long, default_value_t = 0.2)]
    ratio: f64,
    #[arg(long, value_enum, default_value_t = MetricArg::HesRel)]
    metric: MetricArg,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Built-in profile: separation, exponential, planted, rl, throughput
    #[arg(long, conflicts_with = "profile", required_unless_present = "profile")]
    preset: Option<String>,
    /// Profile as a JSON file
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Required with --preset; overrides the profile's seed otherwise
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_queries: Option<usize>,
    #[arg(long)]
    candidates: Option<usize>,
    /// Corpus file, or - for stdout
    #[arg(short, long, default_value = "-")]
    output: PathBuf,
    /// Ground-truth ledger file
    #[arg(long)]
    ledger: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(short, long)]
    manifest: PathBuf,
    /// The score file the manifest was computed from
    #[arg(short, long)]
    scores: PathBuf,
}

fn is_stdio(path: &Path) -> bool {
    path.as_os_str() == "-"
}

fn open_input(path: &Path) -> Result<Box<dyn BufRead + Send>> {
    if is_stdio(path) {
        return Ok(Box::new(BufReader::new(io::stdin())));
    }
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(Box::new(BufReader::with_capacity(1 << 20, file)))
}

fn create_output(path: &Path) -> Result<Box<dyn Write>> {
    if is_stdio(path) {
        return Ok(Box::new(BufWriter::new(io::stdout().lock())));
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(Box::new(BufWriter::with_capacity(1 << 20, file)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = create_output(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn load_scores(path: &Path) -> Result<ScoreTable> {
    ScoreTable::load(path).with_context(|| format!("reading scores from {}", path.display()))
}

fn cmd_score(args: &ScoreArgs) -> Result<()> {
    let config = args.metric.config()?;
    if args.workers == 0 {
        return usage("--workers must be at least 1");
    }
    let opts = ScoreOptions {
        config,
        workers: args.workers,
        include_indices: args.high_indices,
        keep_going: args.keep_going,
        check_duplicates: !args.no_duplicate_check,
        ..ScoreOptions::default()
    };
    let input = open_input(&args.input)?;
    let output = create_output(&args.output)?;
    let stats = score_stream(input, output, &opts)?;
    for e in &stats.errors {
        eprintln!("error: {e}");
    }
    if stats.error_count > stats.errors.len() {
        eprintln!("... {} further errors not shown", stats.error_count - stats.errors.len());
    }
    let summary = json!({
        "config": config,
        "workers": args.workers,
        "records_in": stats.records_in,
        "records_out": stats.records_out,
        "errors": stats.error_count,
        "clamped_tokens": stats.clamped_tokens,
    });
    eprintln!("{summary}");
    Ok(())
}

fn sft_spec(args: &SftArgs) -> Result<SelectionSpec> {
    let budget = match (args.ratio, args.budget) {
        (Some(r), _) if !(r > 0.0 && r <= 1.0) => return usage(format!("--ratio must lie in (0, 1], got {r}")),
        (Some(r), _) => Budget::Ratio(r),
        (None, Some(n)) => Budget::Count(n),
        (None, None) => return usage("one of --ratio or --budget is required"),
    };
    let mode = SelectionMode::from(args.mode);
    let mut spec = SelectionSpec::new(mode, budget).with_metric(args.metric.into());
    match (mode, args.seed) {
        (SelectionMode::Random, None) => return usage("--mode random requires --seed"),
        (_, Some(seed)) => spec = spec.with_seed(seed),
        _ => {}
    }
    Ok(spec)
}

fn cmd_select_sft(args: &SftArgs) -> Result<()> {
    let spec = sft_spec(args)?;
    let table = load_scores(&args.scores)?;
    let manifest = match (args.strata, args.stratum) {
        (Some(groups), Some(i)) => {
            if i >= groups {
                return usage(format!("--stratum {i} must be below --strata {groups}"));
            }
            selection::stratified_select(&table, groups, &spec)?.swap_remove(i)
        }
        _ => selection::sft_select(&table, &spec)?,
    };
    write_json(&args.output, &manifest)
}

fn cmd_select_rft(args: &RftArgs) -> Result<()> {
    let spec = RftSpec {
        scope: match args.scope {
            ScopeArg::PerQuery => RftScope::PerQuery,
            ScopeArg::Global => RftScope::Global,
        },
        k: args.k,
        candidates: args.candidates,
        budget: args.budget,
    };
    match (spec.scope, spec.k, spec.budget) {
        (_, Some(0), _) => return usage("-k must be positive"),
        (RftScope::PerQuery, None, _) => return usage("--scope per-query requires -k"),
        (RftScope::PerQuery, _, Some(_)) => return usage("--budget applies to --scope global only"),
        (RftScope::Global, None, None) => return usage("--scope global requires --budget or -k"),
        _ => {}
    }
    if let (Some(k), Some(big_k)) = (args.k, args.candidates) {
        if k > big_k {
            return usage(format!("-k {k} exceeds --candidates {big_k}"));
        }
    }
    let table = load_scores(&args.scores)?;
    write_json(&args.output, &selection::rft_select(&table, &spec)?)
}

fn cmd_rl_batch(args: &RlBatchArgs) -> Result<()> {
    let strategy = BatchStrategy::from(args.strategy);
    if !(args.fraction > 0.0 && args.fraction <= 1.0) {
        return usage(format!("--fraction must lie in (0, 1], got {}", args.fraction));
    }
    let seed = match args.seed {
        Some(seed) => seed,
        None if strategy.is_random() => return usage(format!("--strategy {} requires --seed", strategy.name())),
        None => 0,
    };
    let table = load_scores(&args.scores)?;
    let groups = rollout_groups(&table)?;
    let spec = BatchSpec::new(strategy, seed).with_fraction(args.fraction);
    let report = batch_report(groups, &spec);

    let mut out = create_output(&args.output)?;
    for entry in &report.entries {
        serde_json::to_writer(&mut out, entry)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;

    let summary = json!({
        "strategy": strategy,
        "params": { "fraction": args.fraction },
        "seed": args.seed,
        "corpus_digest": table.digest(),
        "summary": report.summary,
    });
    match &args.summary {
        Some(path) => write_json(path, &summary)?,
        None => eprintln!("{}", serde_json::to_string_pretty(&summary)?),
    }
    Ok(())
}

fn emit_report(format: Format, doc: &Value, text: impl FnOnce() -> String) -> Result<()> {
    let mut out = io::stdout().lock();
    match format {
        Format::Json => writeln!(out, "{}", serde_json::to_string_pretty(doc)?)?,
        Format::Text => write!(out, "{}", text())?,
    }
    Ok(())
}

fn cmd_discrim(args: &DiscrimArgs) -> Result<()> {
    let table = load_scores(&args.scores)?;
    let metrics: Vec<Metric> = if args.metric.is_empty() {
        Metric::ALL.to_vec()
    } else {
        args.metric.iter().map(|&m| m.into()).collect()
    };
    let reports = metrics
        .iter()
        .map(|&m| analysis::separation_report(table.scores(), m))
        .collect::<Result<Vec<_>, _>>()?;
    let doc = json!({
        "report": "discrim",
        "input_digest": table.digest(),
        "params": { "metrics": metrics },
        "results": reports,
    });
    emit_report(args.format, &doc, || {
        let mut s = format!(
            "{:<8} {:>9} {:>11} {:>11} {:>9} {:>11} {:>11} {:>7}\n",
            "metric", "correct", "mean", "std", "incorrect", "mean", "std", "auc"
        );
        for r in &reports {
            s += &format!(
                "{:<8} {:>9} {:>11.4} {:>11.4} {:>9} {:>11.4} {:>11.4} {:>7.4}\n",
                r.metric.name(),
                r.correct.count,
                r.correct.mean,
                r.correct.std,
                r.incorrect.count,
                r.incorrect.mean,
                r.incorrect.std,
                r.auc
            );
        }
        s
    })
}

fn corpus_digest(path: &Path) -> Result<Option<String>> {
    if is_stdio(path) {
        return Ok(None);
    }
    Ok(Some(file_digest(path)?))
}

fn cmd_dist(args: &DistArgs) -> Result<()> {
    let hist = HistogramSpec {
        lo: args.lo,
        hi: args.hi,
        bins: args.bins,
    };
    if hist.validate().is_err() {
        return usage("--lo must be below --hi and --bins at least 1");
    }
    if let Some(q) = args.percentile.iter().find(|q| !(0.0..=100.0).contains(*q)) {
        return usage(format!("--percentile {q} outside [0, 100]"));
    }
    let records = CorpusReader::new(open_input(&args.input)?);
    let report = analysis::entropy_distribution(records, args.tail_mode.into(), &args.percentile, hist)?;
    if let Some(path) = &args.histogram_csv {
        let mut w = csv::Writer::from_writer(create_output(path)?);
        w.write_record(["lo", "hi", "count"])?;
        let h = &report.histogram;
        for (i, count) in h.counts.iter().enumerate() {
            w.serialize((h.edges[i], h.edges[i + 1], count))?;
        }
        w.flush()?;
    }
    let doc = json!({
        "report": "dist",
        "input_digest": corpus_digest(&args.input)?,
        "params": {
            "percentiles": args.percentile,
            "histogram": hist,
            "tail_mode": TailMode::from(args.tail_mode),
        },
        "result": report,
    });
    emit_report(args.format, &doc, || {
        let mut s = format!(
            "tokens {}  samples {}  min {:.4}  max {:.4}  mean {:.4}\n",
            report.token_count, report.sample_count, report.min, report.max, report.mean
        );
        for p in &report.percentiles {
            s += &format!("p{} {:.6}\n", p.percentile, p.value);
        }
        s
    })
}

fn cmd_tokens(args: &TokensArgs) -> Result<()> {
    if !(args.p > 0.0 && args.p <= 1.0) {
        return usage(format!("--p must lie in (0, 1], got {}", args.p));
    }
    let records = CorpusReader::new(open_input(&args.input)?);
    let mut table = analysis::high_entropy_token_frequency(records, args.p, args.tail_mode.into())?;
    let distinct = table.len();
    if let Some(n) = args.top {
        table.truncate(n);
    }
    if let Some(path) = &args.csv {
        let mut w = csv::Writer::from_writer(create_output(path)?);
        w.write_record(["token", "count"])?;
        for t in &table {
            w.serialize((&t.token, t.count))?;
        }
        w.flush()?;
    }
    let doc = json!({
        "report": "tokens",
        "input_digest": corpus_digest(&args.input)?,
        "params": { "p": args.p, "tail_mode": TailMode::from(args.tail_mode), "top": args.top },
        "distinct_tokens": distinct,
        "result": table,
    });
    emit_report(args.format, &doc, || table.iter().map(|t| format!("{}\t{}\n", t.count, t.token)).collect())
}

fn cmd_agreement(args: &AgreementArgs) -> Result<()> {
    if !(args.ratio > 0.0 && args.ratio <= 1.0) {
        return usage(format!("--ratio must lie in (0, 1], got {}", args.ratio));
    }
    let a = load_scores(&args.scores_a)?;
    let b = load_scores(&args.scores_b)?;
    let report = analysis::cross_scorer_agreement(&a, &b, args.ratio, args.metric.into())?;
    let doc = json!({
        "report": "agreement",
        "input_digest": { "a": a.digest(), "b": b.digest() },
        "params": { "ratio": args.ratio, "metric": report.metric },
        "result": report,
    });
    emit_report(args.format, &doc, || {
        let rho = report.spearman.map_or("undefined".to_string(), |r| format!("{r:.6}"));
        format!(
            "samples {}  spearman {}  overlap@{} {:.6} (top {})\n",
            report.sample_count, rho, report.ratio, report.overlap, report.top_count
        )
    })
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut profile = match (&args.preset, &args.profile) {
        (Some(name), _) => {
            let Some(seed) = args.seed else {
                return usage("--preset requires --seed");
            };
            match GeneratorProfile::preset(name, seed) {
                Ok(p) => p,
                Err(e) => return usage(format!("{e}; choose one of {}", GeneratorProfile::PRESETS.join(", "))),
            }
        }
        (None, Some(path)) => {
            let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let mut p: GeneratorProfile = serde_json::from_reader(BufReader::new(file))
                .with_context(|| format!("parsing profile {}", path.display()))?;
            if let Some(seed) = args.seed {
                p.seed = seed;
            }
            p
        }
        (None, None) => return usage("one of --preset or --profile is required"),
    };
    if let Some(n) = args.n_queries {
        profile.n_queries = n;
    }
    if let Some(k) = args.candidates {
        profile.candidates = k;
    }
    if let Err(e) = profile.validate() {
        return usage(e.to_string());
    }
    let corpus = create_output(&args.output)?;
    let stats = match &args.ledger {
        Some(path) => write_generated(&profile, corpus, Some(create_output(path)?))?,
        None => write_generated(&profile, corpus, None::<Box<dyn Write>>)?,
    };
    eprintln!("{}", json!({ "profile": profile, "stats": stats }));
    Ok(())
}

fn manifest_diff(recorded: &SelectionManifest, replayed: &SelectionManifest) -> Vec<&'static str> {
    let mut diff = Vec::new();
    if recorded.selected != replayed.selected {
        diff.push("selected");
    }
    if recorded.threshold != replayed.threshold {
        diff.push("threshold");
    }
    if recorded.rejected_count != replayed.rejected_count {
        diff.push("rejected_count");
    }
    if recorded.params != replayed.params {
        diff.push("params");
    }
    diff
}

fn cmd_verify(args: &VerifyArgs) -> Result<()> {
    let manifest = read_manifest(&args.manifest).with_context(|| format!("reading {}", args.manifest.display()))?;
    let table = load_scores(&args.scores)?;
    manifest.check_digest(&table)?;
    let replayed = selection::replay(&table, &manifest)?;
    let diff = manifest_diff(&manifest, &replayed);
    println!(
        "{}",
        json!({ "ok": diff.is_empty(), "corpus_digest": table.digest(), "mismatched": diff })
    );
    if !diff.is_empty() {
        anyhow::bail!("manifest does not match a fresh selection over {}", args.scores.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Score(a) => cmd_score(a),
        Command::Select(SelectCommand::Sft(a)) => cmd_select_sft(a),
        Command::Select(SelectCommand::Rft(a)) => cmd_select_rft(a),
        Command::RlBatch(a) => cmd_rl_batch(a),
        Command::Analyze(AnalyzeCommand::Discrim(a)) => cmd_discrim(a),
        Command::Analyze(AnalyzeCommand::Dist(a)) => cmd_dist(a),
        Command::Analyze(AnalyzeCommand::Tokens(a)) => cmd_tokens(a),
        Command::Analyze(AnalyzeCommand::Agreement(a)) => cmd_agreement(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Verify(a) => cmd_verify(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            eprintln!("run with --help for usage");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
