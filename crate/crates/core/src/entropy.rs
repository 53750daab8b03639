//! Per-token entropy and the per-sample high-entropy metric family.
//!
//! All entropies are in nats. A sample's high-entropy set is the
//! `m = min(N, max(1, ceil(p * N)))` tokens with the largest entropy; ties at
//! the cut go to the earliest positions so the set never depends on the sort
//! implementation.

use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use thiserror::Error;

use crate::corpus::SampleRecord;

pub const DEFAULT_HIGH_ENTROPY_FRACTION: f64 = 0.005;
pub const DEFAULT_ABSOLUTE_THRESHOLD: f64 = 1.6;

/// Allowed excess of `sum(exp(logprob))` over one.
pub const MASS_TOLERANCE: f64 = 1e-6;
/// Residual tail mass at or below this is treated as absent.
pub const TAIL_EPSILON: f64 = 1e-12;
/// Negative upstream entropies within this distance of zero are clamped.
pub const NEGATIVE_NOISE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TokenError {
    #[error("token has neither an entropy nor any top logprobs")]
    EmptyDistribution,
    #[error("top logprob mass {mass} exceeds 1")]
    MassExceedsOne { mass: f64 },
    #[error("entropy {value} is negative")]
    NegativeEntropy { value: f64 },
    #[error("non-finite value {value}")]
    NonFinite { value: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoreError {
    #[error("sample has no tokens")]
    EmptySequence,
    #[error("token {position}: {source}")]
    Token {
        position: usize,
        #[source]
        source: TokenError,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("high-entropy fraction must lie in (0, 1], got {0}")]
    Fraction(f64),
    #[error("absolute threshold must be a finite non-negative number, got {0}")]
    Threshold(f64),
}

/// How probability mass missing from a truncated top-K list is treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailMode {
    /// Fold the residual mass into one pseudo-symbol (lower bound on the full entropy).
    #[default]
    Lump,
    /// Drop the residual mass.
    Ignore,
}

impl TailMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TailMode::Lump => "lump",
            TailMode::Ignore => "ignore",
        }
    }
}

/// One generated token's uncertainty evidence.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TokenObservation {
    #[serde(default)]
    pub id: Option<i64>,
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub entropy: Option<f64>,
    #[serde(default)]
    pub top_logprobs: Option<Vec<(String, f64)>>,
}

impl TokenObservation {
    pub fn with_entropy(entropy: f64) -> Self {
        Self {
            entropy: Some(entropy),
            ..Self::default()
        }
    }

    pub fn with_logprobs<I, S>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        Self {
            top_logprobs: Some(pairs.into_iter().map(|(t, lp)| (t.into(), lp)).collect()),
            ..Self::default()
        }
    }

    /// Checks the observation invariants without committing to a tail mode.
    pub fn validate(&self) -> Result<(), TokenError> {
        resolve_entropy(self, TailMode::Ignore).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub p: f64,
    pub tau: f64,
    pub tail_mode: TailMode,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            p: DEFAULT_HIGH_ENTROPY_FRACTION,
            tau: DEFAULT_ABSOLUTE_THRESHOLD,
            tail_mode: TailMode::Lump,
        }
    }
}

impl MetricConfig {
    pub fn new(p: f64, tau: f64, tail_mode: TailMode) -> Result<Self, ConfigError> {
        let config = Self { p, tau, tail_mode };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(ConfigError::Fraction(self.p));
        }
        if !(self.tau.is_finite() && self.tau >= 0.0) {
            return Err(ConfigError::Threshold(self.tau));
        }
        Ok(())
    }
}

/// The metric set computed for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: String,
    pub query_id: String,
    #[serde(default)]
    pub correct: Option<bool>,
    #[serde(default)]
    pub difficulty: Option<f64>,
    #[serde(default)]
    pub reward: Option<f64>,
    pub n_tokens: usize,
    pub es: f64,
    pub avg_e: f64,
    pub hes_rel: f64,
    pub hes_abs: f64,
    pub avg_he: f64,
    pub high_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub high_indices: Option<Vec<usize>>,
    pub config: MetricConfig,
}

/// Entropy of a single token.
///
/// A stored entropy is returned as-is (after clamping tiny negative noise).
/// Otherwise the entropy is computed from the top logprobs, with the residual
/// mass handled according to `tail_mode`.
pub fn compute_token_entropy(obs: &TokenObservation, tail_mode: TailMode) -> Result<f64, TokenError> {
    resolve_entropy(obs, tail_mode).map(|r| r.value)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Resolved {
    pub value: f64,
    pub clamped: bool,
}

pub(crate) fn resolve_entropy(obs: &TokenObservation, tail_mode: TailMode) -> Result<Resolved, TokenError> {
    if let Some(value) = obs.entropy {
        if !value.is_finite() {
            return Err(TokenError::NonFinite { value });
        }
        if value < 0.0 {
            if value < -NEGATIVE_NOISE_TOLERANCE {
                return Err(TokenError::NegativeEntropy { value });
            }
            return Ok(Resolved { value: 0.0, clamped: true });
        }
        // `+ 0.0` folds -0.0 into 0.0 so ordering by total_cmp matches numeric order.
        return Ok(Resolved { value: value + 0.0, clamped: false });
    }
    match obs.top_logprobs.as_deref() {
        Some(pairs) if !pairs.is_empty() => {
            logprob_entropy(pairs.iter().map(|(_, lp)| *lp), tail_mode).map(|value| Resolved { value, clamped: false })
        }
        _ => Err(TokenError::EmptyDistribution),
    }
}

fn logprob_entropy<I: Iterator<Item = f64>>(logprobs: I, tail_mode: TailMode) -> Result<f64, TokenError> {
    let mut mass = 0.0;
    let mut entropy = 0.0;
    for lp in logprobs {
        if lp.is_nan() || lp == f64::INFINITY {
            return Err(TokenError::NonFinite { value: lp });
        }
        let prob = lp.exp();
        if prob > 0.0 {
            entropy -= prob * lp;
        }
        mass += prob;
    }
    if mass > 1.0 + MASS_TOLERANCE {
        return Err(TokenError::MassExceedsOne { mass });
    }
    if tail_mode == TailMode::Lump {
        let tail = 1.0 - mass;
        if tail > TAIL_EPSILON {
            entropy -= tail * tail.ln();
        }
    }
    Ok(entropy.max(0.0))
}

/// `ceil(fraction * total)`, treating products within 1e-9 of an integer as
/// that integer so that e.g. `0.7 * 10` counts 7 and not 8.
pub fn ceil_fraction(fraction: f64, total: usize) -> usize {
    let x = fraction * total as f64;
    let nearest = x.round();
    if (x - nearest).abs() <= 1e-9 * nearest.abs().max(1.0) {
        nearest as usize
    } else {
        x.ceil() as usize
    }
}

/// Size of the high-entropy set for a sequence of `n` tokens.
pub fn high_entropy_count(n: usize, p: f64) -> usize {
    ceil_fraction(p, n).max(1).min(n)
}

/// Positions of the high-entropy tokens, ascending.
pub fn identify_high_entropy_tokens(entropies: &[f64], p: f64) -> Result<Vec<usize>, ScoreError> {
    if entropies.is_empty() {
        return Err(ScoreError::EmptySequence);
    }
    Ok(top_positions(entropies, high_entropy_count(entropies.len(), p)))
}

fn top_positions(entropies: &[f64], m: usize) -> Vec<usize> {
    let n = entropies.len();
    if m >= n {
        return (0..n).collect();
    }
    // Descending entropy, then ascending position: a total order, so the
    // partition is unique.
    let by_rank = |a: &usize, b: &usize| -> Ordering { entropies[*b].total_cmp(&entropies[*a]).then(a.cmp(b)) };
    let mut order: Vec<usize> = (0..n).collect();
    order.select_nth_unstable_by(m - 1, by_rank);
    order.truncate(m);
    order.sort_unstable();
    order
}

/// Metric values for an already-resolved entropy sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyMetrics {
    pub es: f64,
    pub avg_e: f64,
    pub hes_rel: f64,
    pub hes_abs: f64,
    pub avg_he: f64,
    pub high_indices: Vec<usize>,
}

pub fn entropy_metrics(entropies: &[f64], p: f64, tau: f64) -> Result<EntropyMetrics, ScoreError> {
    let high_indices = identify_high_entropy_tokens(entropies, p)?;
    let n = entropies.len();
    let es: f64 = entropies.iter().sum();
    let hes_abs: f64 = entropies.iter().filter(|&&h| h > tau).sum();
    let hes_rel: f64 = high_indices.iter().map(|&i| entropies[i]).sum();
    Ok(EntropyMetrics {
        es,
        avg_e: es / n as f64,
        hes_rel,
        hes_abs,
        avg_he: hes_rel / high_indices.len() as f64,
        high_indices,
    })
}

/// Resolves every token of `record` to an entropy. Also returns how many
/// tokens had small negative values clamped to zero.
pub fn token_entropies(record: &SampleRecord, tail_mode: TailMode) -> Result<(Vec<f64>, usize), ScoreError> {
    if record.tokens.is_empty() {
        return Err(ScoreError::EmptySequence);
    }
    let mut clamped = 0;
    let values = record
        .tokens
        .iter()
        .enumerate()
        .map(|(position, token)| {
            let r = resolve_entropy(token, tail_mode).map_err(|source| ScoreError::Token { position, source })?;
            clamped += usize::from(r.clamped);
            Ok(r.value)
        })
        .collect::<Result<Vec<_>, ScoreError>>()?;
    Ok((values, clamped))
}

pub fn score_sample(record: &SampleRecord, config: &MetricConfig) -> Result<SampleScore, ScoreError> {
    score_sample_counted(record, config).map(|(score, _)| score)
}

/// Like [`score_sample`], also reporting the number of clamped negative entropies.
pub fn score_sample_counted(record: &SampleRecord, config: &MetricConfig) -> Result<(SampleScore, usize), ScoreError> {
    let (entropies, clamped) = token_entropies(record, config.tail_mode)?;
    let metrics = entropy_metrics(&entropies, config.p, config.tau)?;
    let score = SampleScore {
        sample_id: record.sample_id.clone(),
        query_id: record.query_id.clone(),
        correct: record.correct,
        difficulty: record.difficulty,
        reward: record.reward,
        n_tokens: entropies.len(),
        es: metrics.es,
        avg_e: metrics.avg_e,
        hes_rel: metrics.hes_rel,
        hes_abs: metrics.hes_abs,
        avg_he: metrics.avg_he,
        high_count: metrics.high_indices.len(),
        high_indices: Some(metrics.high_indices),
        config: *config,
    };
    Ok((score, clamped))
}
