//! Corpus reports: label separation, entropy distribution, high-entropy token
//! frequency and agreement between two scorers.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use thiserror::Error;

use crate::corpus::{CorpusError, SampleRecord};
use crate::entropy::{ceil_fraction, identify_high_entropy_tokens, token_entropies, SampleScore, ScoreError, TailMode};
use crate::scores::ScoreTable;
use crate::selection::{sft_select, Budget, Metric, SelectionMode, SelectionSpec};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("separation needs both correct and incorrect samples (correct: {correct}, incorrect: {incorrect})")]
    SingleClassInput { correct: usize, incorrect: usize },
    #[error("corpus has no tokens")]
    EmptyCorpus,
    #[error("score sets differ: {only_a} ids only in the first, {only_b} only in the second")]
    IdSetMismatch { only_a: usize, only_b: usize },
    #[error("invalid analysis parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("sample `{sample_id}`: {source}")]
    Score { sample_id: String, source: ScoreError },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl GroupStats {
    fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            count: values.len(),
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub metric: Metric,
    pub correct: GroupStats,
    pub incorrect: GroupStats,
    /// Mean of the incorrect group minus mean of the correct group.
    pub mean_gap: f64,
    /// Probability that a random incorrect sample scores above a random
    /// correct one, ties counting one half.
    pub auc: f64,
    /// Samples without a correctness label, left out of both groups.
    pub unlabeled: usize,
}

/// Mann-Whitney AUC of `high` over `low` from midranks of the pooled values.
pub fn auc(low: &[f64], high: &[f64]) -> f64 {
    let mut pooled: Vec<(f64, bool)> = low.iter().map(|&v| (v, false)).chain(high.iter().map(|&v| (v, true))).collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let ranks = average_ranks_sorted(&pooled, |p| p.0);
    let rank_sum: f64 = pooled.iter().zip(&ranks).filter(|(p, _)| p.1).map(|(_, r)| r).sum();
    let (n_low, n_high) = (low.len() as f64, high.len() as f64);
    let u = rank_sum - n_high * (n_high + 1.0) / 2.0;
    (u / (n_low * n_high)).clamp(0.0, 1.0)
}

/// 1-based ranks of already-sorted items, tied runs sharing their mean rank.
fn average_ranks_sorted<T>(sorted: &[T], key: impl Fn(&T) -> f64) -> Vec<f64> {
    let mut ranks = vec![0.0; sorted.len()];
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && key(&sorted[j]) == key(&sorted[i]) {
            j += 1;
        }
        let mid = (i + 1 + j) as f64 / 2.0;
        ranks[i..j].fill(mid);
        i = j;
    }
    ranks
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let sorted_ranks = average_ranks_sorted(&order, |&i| values[i]);
    let mut ranks = vec![0.0; values.len()];
    for (&i, r) in order.iter().zip(sorted_ranks) {
        ranks[i] = r;
    }
    ranks
}

pub fn separation_report(scores: &[SampleScore], metric: Metric) -> Result<SeparationReport, AnalysisError> {
    let mut correct = Vec::new();
    let mut incorrect = Vec::new();
    let mut unlabeled = 0;
    for s in scores {
        match s.correct {
            Some(true) => correct.push(metric.value(s)),
            Some(false) => incorrect.push(metric.value(s)),
            None => unlabeled += 1,
        }
    }
    if correct.is_empty() || incorrect.is_empty() {
        return Err(AnalysisError::SingleClassInput {
            correct: correct.len(),
            incorrect: incorrect.len(),
        });
    }
    let c = GroupStats::of(&correct);
    let i = GroupStats::of(&incorrect);
    Ok(SeparationReport {
        metric,
        mean_gap: i.mean - c.mean,
        auc: auc(&correct, &incorrect),
        correct: c,
        incorrect: i,
        unlabeled,
    })
}

/// Fixed histogram bins. The first and last bins are open-ended so every
/// value lands somewhere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self {
            lo: 0.0,
            hi: 10.0,
            bins: 100,
        }
    }
}

impl HistogramSpec {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        if self.bins == 0 || !(self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi) {
            return Err(AnalysisError::InvalidParameter(format!(
                "histogram needs lo < hi and at least one bin, got [{}, {}] with {} bins",
                self.lo, self.hi, self.bins
            )));
        }
        Ok(())
    }

    pub fn edges(&self) -> Vec<f64> {
        (0..=self.bins)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / self.bins as f64)
            .collect()
    }
}

/// Bin `i` covers `[edges[i], edges[i + 1])`.
fn bin_of(edges: &[f64], v: f64) -> usize {
    edges.partition_point(|&e| e <= v).clamp(1, edges.len() - 1) - 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileValue {
    pub percentile: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub token_count: usize,
    pub sample_count: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub percentiles: Vec<PercentileValue>,
    pub histogram: Histogram,
}

/// Collects token entropies for an exact distribution report. Partial
/// accumulators from separate shards can be merged in any order.
#[derive(Debug, Clone, Default)]
pub struct EntropyDistribution {
    values: Vec<f64>,
    samples: usize,
}

impl EntropyDistribution {
    pub fn push_sample(&mut self, entropies: &[f64]) {
        self.values.extend_from_slice(entropies);
        self.samples += 1;
    }

    pub fn merge(&mut self, other: EntropyDistribution) {
        self.values.extend(other.values);
        self.samples += other.samples;
    }

    pub fn token_count(&self) -> usize {
        self.values.len()
    }

    /// Nearest-rank percentiles: the value at sorted position
    /// `max(1, ceil(q / 100 * n))`.
    pub fn report(mut self, percentiles: &[f64], hist: HistogramSpec) -> Result<DistributionReport, AnalysisError> {
        hist.validate()?;
        if let Some(q) = percentiles.iter().find(|q| !(0.0..=100.0).contains(*q)) {
            return Err(AnalysisError::InvalidParameter(format!("percentile {q} outside [0, 100]")));
        }
        if self.values.is_empty() {
            return Err(AnalysisError::EmptyCorpus);
        }
        self.values.sort_unstable_by(f64::total_cmp);
        let n = self.values.len();
        let edges = hist.edges();
        let mut counts = vec![0u64; hist.bins];
        let mut sum = 0.0;
        for &v in &self.values {
            counts[bin_of(&edges, v)] += 1;
            sum += v;
        }
        let percentiles = percentiles
            .iter()
            .map(|&q| PercentileValue {
                percentile: q,
                value: self.values[ceil_fraction(q / 100.0, n).clamp(1, n) - 1],
            })
            .collect();
        Ok(DistributionReport {
            token_count: n,
            sample_count: self.samples,
            min: self.values[0],
            max: self.values[n - 1],
            mean: sum / n as f64,
            percentiles,
            histogram: Histogram { edges, counts },
        })
    }
}

fn entropies_of(record: &SampleRecord, tail: TailMode) -> Result<Vec<f64>, AnalysisError> {
    token_entropies(record, tail)
        .map(|(e, _)| e)
        .map_err(|source| AnalysisError::Score {
            sample_id: record.sample_id.clone(),
            source,
        })
}

pub fn entropy_distribution<I>(
    records: I,
    tail: TailMode,
    percentiles: &[f64],
    hist: HistogramSpec,
) -> Result<DistributionReport, AnalysisError>
where
    I: IntoIterator<Item = Result<SampleRecord, CorpusError>>,
{
    let mut acc = EntropyDistribution::default();
    for record in records {
        acc.push_sample(&entropies_of(&record?, tail)?);
    }
    acc.report(percentiles, hist)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCount {
    pub token: String,
    pub count: u64,
}

/// Token label for frequency tables: the text, or the id when text is absent.
fn token_label(record: &SampleRecord, position: usize) -> String {
    let tok = &record.tokens[position];
    match (&tok.text, tok.id) {
        (Some(text), _) => text.clone(),
        (None, Some(id)) => format!("<id:{id}>"),
        (None, None) => "<unknown>".to_string(),
    }
}

/// Counts the tokens that fall in each sample's high-entropy set at `p`,
/// ordered by count descending, then label ascending.
pub fn high_entropy_token_frequency<I>(records: I, p: f64, tail: TailMode) -> Result<Vec<TokenCount>, AnalysisError>
where
    I: IntoIterator<Item = Result<SampleRecord, CorpusError>>,
{
    if !(p > 0.0 && p <= 1.0) {
        return Err(AnalysisError::InvalidParameter(format!("p must lie in (0, 1], got {p}")));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for record in records {
        let record = record?;
        let entropies = entropies_of(&record, tail)?;
        let high = identify_high_entropy_tokens(&entropies, p).map_err(|source| AnalysisError::Score {
            sample_id: record.sample_id.clone(),
            source,
        })?;
        for i in high {
            *counts.entry(token_label(&record, i)).or_default() += 1;
        }
    }
    let mut table: Vec<TokenCount> = counts.into_iter().map(|(token, count)| TokenCount { token, count }).collect();
    table.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.token.cmp(&b.token)));
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub metric: Metric,
    pub sample_count: usize,
    /// Undefined when either side has no variation.
    pub spearman: Option<f64>,
    pub ratio: f64,
    pub top_count: usize,
    /// Jaccard overlap of the two top-ratio selections.
    pub overlap: f64,
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Compares two scorings of the same samples: rank correlation of `metric`
/// and overlap of the top-`ratio` selections made the same way as SFT
/// highest-score selection.
pub fn cross_scorer_agreement(
    a: &ScoreTable,
    b: &ScoreTable,
    ratio: f64,
    metric: Metric,
) -> Result<AgreementReport, AnalysisError> {
    let index_b = b.index();
    let ids_a: HashSet<&str> = a.scores().iter().map(|s| s.sample_id.as_str()).collect();
    let only_a = ids_a.iter().filter(|id| !index_b.contains_key(*id)).count();
    let only_b = index_b.keys().filter(|id| !ids_a.contains(*id)).count();
    if only_a > 0 || only_b > 0 {
        return Err(AnalysisError::IdSetMismatch { only_a, only_b });
    }
    if a.is_empty() {
        return Err(AnalysisError::EmptyCorpus);
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = a
        .scores()
        .iter()
        .map(|s| (metric.value(s), metric.value(index_b[s.sample_id.as_str()])))
        .unzip();

    let spec = SelectionSpec::new(SelectionMode::HighestHes, Budget::Ratio(ratio)).with_metric(metric);
    let top = |t: &ScoreTable| {
        sft_select(t, &spec)
            .map(|m| m.selected)
            .map_err(|e| AnalysisError::InvalidParameter(e.to_string()))
    };
    let top_a: HashSet<String> = top(a)?.into_iter().collect();
    let top_b: HashSet<String> = top(b)?.into_iter().collect();
    let inter = top_a.intersection(&top_b).count();
    let union = top_a.union(&top_b).count();
    Ok(AgreementReport {
        metric,
        sample_count: xs.len(),
        spearman: spearman(&xs, &ys),
        ratio,
        top_count: top_a.len(),
        overlap: inter as f64 / union as f64,
    })
}

/// Separation reports for every metric, keyed by metric name.
pub fn separation_all(scores: &[SampleScore]) -> Result<BTreeMap<&'static str, SeparationReport>, AnalysisError> {
    Metric::ALL
        .iter()
        .map(|&m| separation_report(scores, m).map(|r| (m.name(), r)))
        .collect()
}
