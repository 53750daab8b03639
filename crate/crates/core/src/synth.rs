//! Seeded synthetic corpora with planted high-entropy spikes.
//!
//! Each query draws from its own ChaCha8 stream: the generator is seeded with
//! `profile.seed` and the stream number is the query index. A query's
//! candidates therefore do not depend on how many queries are generated, and
//! queries can be produced in any order or in parallel.
//!
//! Alongside each record the generator emits a ledger entry with the planted
//! spike positions and, where the profile pins them down, the expected
//! high-entropy positions and `hes_rel`.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

use crate::corpus::{CorpusError, SampleRecord};
use crate::entropy::{compute_token_entropy, high_entropy_count, TailMode, TokenObservation};

const VOCAB: u32 = 1000;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<CorpusError> for SynthError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Io(e) => SynthError::Io(e),
            other => SynthError::InvalidProfile(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LengthModel {
    /// Token count uniform in `[min, max]`.
    Uniform { min: usize, max: usize },
    /// One segment per spike, each segment uniform in `[min, max]` tokens.
    PerSpike { min: usize, max: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseEntropy {
    Constant { value: f64 },
    Uniform { low: f64, high: f64 },
    Exponential { rate: f64 },
}

impl BaseEntropy {
    fn upper_bound(&self) -> f64 {
        match *self {
            BaseEntropy::Constant { value } => value,
            BaseEntropy::Uniform { high, .. } => high,
            BaseEntropy::Exponential { .. } => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeModel {
    pub count_min: usize,
    pub count_max: usize,
    pub magnitude_low: f64,
    pub magnitude_high: f64,
    /// Texts for spike tokens, drawn uniformly. Empty means ordinary tokens.
    #[serde(default)]
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectnessModel {
    pub p_correct: f64,
    /// Incorrect samples draw this many times as many spikes.
    #[serde(default = "one")]
    pub incorrect_count_factor: f64,
    /// Incorrect samples' spike magnitudes are scaled by this factor.
    #[serde(default = "one")]
    pub incorrect_magnitude_factor: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenFormat {
    /// Each token carries its entropy.
    Entropy,
    /// Each token carries `k` top logprobs whose entropy is the drawn value.
    TopLogprobs { k: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorProfile {
    pub seed: u64,
    pub n_queries: usize,
    pub candidates: usize,
    pub length: LengthModel,
    pub base: BaseEntropy,
    /// Per-sample multiplier on base entropies, uniform in `[low, high]`.
    #[serde(default)]
    pub base_scale: Option<(f64, f64)>,
    #[serde(default)]
    pub spikes: Option<SpikeModel>,
    pub correctness: CorrectnessModel,
    #[serde(default = "default_format")]
    pub token_format: TokenFormat,
    /// High-entropy fraction used for the ledger's expected values.
    #[serde(default = "default_ledger_p")]
    pub ledger_p: f64,
}

fn default_format() -> TokenFormat {
    TokenFormat::Entropy
}

fn default_ledger_p() -> f64 {
    crate::entropy::DEFAULT_HIGH_ENTROPY_FRACTION
}

fn invalid(msg: impl Into<String>) -> SynthError {
    SynthError::InvalidProfile(msg.into())
}

fn check_range(name: &str, low: f64, high: f64) -> Result<(), SynthError> {
    if !(low.is_finite() && high.is_finite() && low >= 0.0 && low <= high) {
        return Err(invalid(format!("{name} needs finite 0 <= low <= high, got [{low}, {high}]")));
    }
    Ok(())
}

impl GeneratorProfile {
    pub const PRESETS: [&'static str; 5] = ["separation", "exponential", "planted", "rl", "throughput"];

    /// Named profiles used by the test suites and the CLI.
    pub fn preset(name: &str, seed: u64) -> Result<Self, SynthError> {
        let base = GeneratorProfile {
            seed,
            n_queries: 100,
            candidates: 1,
            length: LengthModel::Uniform { min: 100, max: 100 },
            base: BaseEntropy::Constant { value: 0.1 },
            base_scale: None,
            spikes: None,
            correctness: CorrectnessModel {
                p_correct: 0.5,
                incorrect_count_factor: 1.0,
                incorrect_magnitude_factor: 1.0,
            },
            token_format: TokenFormat::Entropy,
            ledger_p: default_ledger_p(),
        };
        let profile = match name {
            // Incorrect samples carry twice as many spikes; lengths grow with
            // the spike count so mean entropy barely separates the labels.
            "separation" => GeneratorProfile {
                n_queries: 500,
                candidates: 4,
                length: LengthModel::PerSpike { min: 100, max: 300 },
                base: BaseEntropy::Uniform { low: 0.0, high: 1.0 },
                base_scale: Some((0.1, 1.2)),
                spikes: Some(SpikeModel {
                    count_min: 2,
                    count_max: 6,
                    magnitude_low: 2.0,
                    magnitude_high: 4.0,
                    texts: vec![],
                }),
                correctness: CorrectnessModel {
                    p_correct: 0.5,
                    incorrect_count_factor: 2.0,
                    incorrect_magnitude_factor: 1.0,
                },
                ..base
            },
            "exponential" => GeneratorProfile {
                length: LengthModel::Uniform { min: 1000, max: 1000 },
                base: BaseEntropy::Exponential { rate: 1.0 },
                ..base
            },
            "planted" => GeneratorProfile {
                ledger_p: 0.01,
                spikes: Some(SpikeModel {
                    count_min: 1,
                    count_max: 1,
                    magnitude_low: 5.0,
                    magnitude_high: 5.0,
                    texts: vec!["wait".into(), "but".into(), "alternatively".into()],
                }),
                ..base
            },
            "rl" => GeneratorProfile {
                n_queries: 1000,
                candidates: 32,
                length: LengthModel::Uniform { min: 200, max: 600 },
                base: BaseEntropy::Uniform { low: 0.0, high: 1.0 },
                spikes: Some(SpikeModel {
                    count_min: 0,
                    count_max: 4,
                    magnitude_low: 1.5,
                    magnitude_high: 4.0,
                    texts: vec![],
                }),
                correctness: CorrectnessModel {
                    p_correct: 0.5,
                    incorrect_count_factor: 2.0,
                    incorrect_magnitude_factor: 1.0,
                },
                ..base
            },
            // Roughly 200 bytes per token; 5,000 x 1,000 tokens is about 1 GB.
            "throughput" => GeneratorProfile {
                n_queries: 5000,
                length: LengthModel::Uniform { min: 800, max: 1200 },
                base: BaseEntropy::Uniform { low: 0.0, high: 1.2 },
                spikes: Some(SpikeModel {
                    count_min: 1,
                    count_max: 8,
                    magnitude_low: 1.3,
                    magnitude_high: 1.6,
                    texts: vec![],
                }),
                token_format: TokenFormat::TopLogprobs { k: 5 },
                ..base
            },
            other => return Err(SynthError::UnknownPreset(other.to_string())),
        };
        Ok(profile)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.candidates == 0 {
            return Err(invalid("candidates per query must be at least 1"));
        }
        let (min, max) = match self.length {
            LengthModel::Uniform { min, max } | LengthModel::PerSpike { min, max } => (min, max),
        };
        if min == 0 || min > max {
            return Err(invalid(format!("length needs 1 <= min <= max, got [{min}, {max}]")));
        }
        match self.base {
            BaseEntropy::Constant { value } => check_range("constant base", value, value)?,
            BaseEntropy::Uniform { low, high } => check_range("uniform base", low, high)?,
            BaseEntropy::Exponential { rate } => {
                if !(rate.is_finite() && rate > 0.0) {
                    return Err(invalid(format!("exponential rate must be positive, got {rate}")));
                }
            }
        }
        let scale_high = match self.base_scale {
            Some((low, high)) => {
                check_range("base scale", low, high)?;
                high
            }
            None => 1.0,
        };
        let c = &self.correctness;
        if !(0.0..=1.0).contains(&c.p_correct) {
            return Err(invalid(format!("p_correct must lie in [0, 1], got {}", c.p_correct)));
        }
        for (name, f) in [("count", c.incorrect_count_factor), ("magnitude", c.incorrect_magnitude_factor)] {
            if !(f.is_finite() && f >= 1.0) {
                return Err(invalid(format!("incorrect {name} factor must be >= 1, got {f}")));
            }
        }
        if !(self.ledger_p > 0.0 && self.ledger_p <= 1.0) {
            return Err(invalid(format!("ledger_p must lie in (0, 1], got {}", self.ledger_p)));
        }
        let base_top = self.base.upper_bound() * scale_high;
        let mut top = base_top;
        if let Some(s) = &self.spikes {
            if s.count_min > s.count_max {
                return Err(invalid("spike count_min exceeds count_max"));
            }
            check_range("spike magnitude", s.magnitude_low, s.magnitude_high)?;
            if !base_top.is_finite() {
                return Err(invalid("spikes need a bounded base distribution"));
            }
            if s.magnitude_low <= base_top {
                return Err(invalid(format!(
                    "spike magnitudes must lie above the base support (max {base_top}), got low {}",
                    s.magnitude_low
                )));
            }
            top = s.magnitude_high * c.incorrect_magnitude_factor;
        }
        if let TokenFormat::TopLogprobs { k } = self.token_format {
            if k < 2 {
                return Err(invalid("top_logprobs format needs k >= 2"));
            }
            if top > (k as f64).ln() {
                return Err(invalid(format!(
                    "entropies up to {top} cannot be expressed with {k} logprobs (max ln {k})"
                )));
            }
        }
        Ok(())
    }

    pub fn sample_count(&self) -> usize {
        self.n_queries * self.candidates
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpike {
    pub position: usize,
    pub entropy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expected {
    pub p: f64,
    pub high_indices: Vec<usize>,
    pub hes_rel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub sample_id: String,
    pub query_id: String,
    pub correct: bool,
    pub n_tokens: usize,
    /// Spikes in ascending position order.
    pub spikes: Vec<PlantedSpike>,
    /// Present when the spikes alone fill the high-entropy set, or the base
    /// is constant so the remaining members are the earliest base tokens.
    pub expected: Option<Expected>,
}

/// Top-`k` logprobs for a distribution with one leading token of mass `a` and
/// `k - 1` tokens sharing the rest, with `a` chosen so the entropy is `target`.
fn logprobs_for(target: f64, k: usize, lead: &str) -> Vec<(String, f64)> {
    if target <= 0.0 {
        return vec![(lead.to_string(), 0.0)];
    }
    let rest = (k - 1) as f64;
    let h = |a: f64| {
        let b = (1.0 - a) / rest;
        -a * a.ln() - (1.0 - a) * b.ln()
    };
    // h decreases from ln k at a = 1/k to 0 at a = 1.
    let (mut lo, mut hi) = (1.0 / k as f64, 1.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if h(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let a = lo.min(1.0 - f64::EPSILON);
    let lb = ((1.0 - a) / rest).ln();
    std::iter::once((lead.to_string(), a.ln()))
        .chain((1..k).map(|j| (format!("alt{j}"), lb)))
        .collect()
}

/// Streams generated samples in query order.
pub struct Generator {
    profile: GeneratorProfile,
    query: usize,
    pending: std::vec::IntoIter<(SampleRecord, LedgerEntry)>,
}

pub fn generate(profile: &GeneratorProfile) -> Result<Generator, SynthError> {
    profile.validate()?;
    Ok(Generator {
        profile: profile.clone(),
        query: 0,
        pending: Vec::new().into_iter(),
    })
}

impl Iterator for Generator {
    type Item = (SampleRecord, LedgerEntry);

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(item) = self.pending.next() {
                return Some(item);
            }
            if self.query >= self.profile.n_queries {
                return None;
            }
            self.pending = generate_query(&self.profile, self.query).into_iter();
            self.query += 1;
        }
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.profile.n_queries - self.query) * self.profile.candidates + self.pending.len();
        (left, Some(left))
    }
}

/// All candidates of query `index`.
pub fn generate_query(profile: &GeneratorProfile, index: usize) -> Vec<(SampleRecord, LedgerEntry)> {
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    rng.set_stream(index as u64);
    let query_id = format!("q{index:06}");
    let difficulty: f64 = rng.random();
    (0..profile.candidates)
        .map(|c| generate_sample(profile, &mut rng, &query_id, c, difficulty))
        .collect()
}

fn generate_sample(
    profile: &GeneratorProfile,
    rng: &mut ChaCha8Rng,
    query_id: &str,
    candidate: usize,
    difficulty: f64,
) -> (SampleRecord, LedgerEntry) {
    let correct = rng.random_bool(profile.correctness.p_correct);
    let (count_factor, magnitude_factor) = if correct {
        (1.0, 1.0)
    } else {
        (profile.correctness.incorrect_count_factor, profile.correctness.incorrect_magnitude_factor)
    };
    let spike_count = profile
        .spikes
        .as_ref()
        .map_or(0, |s| (rng.random_range(s.count_min..=s.count_max) as f64 * count_factor).round() as usize);
    let n = match profile.length {
        LengthModel::Uniform { min, max } => rng.random_range(min..=max),
        LengthModel::PerSpike { min, max } => (0..spike_count.max(1)).map(|_| rng.random_range(min..=max)).sum(),
    };
    let spike_count = spike_count.min(n);
    let scale = profile.base_scale.map_or(1.0, |(lo, hi)| rng.random_range(lo..=hi));

    let mut values: Vec<f64> = match profile.base {
        BaseEntropy::Constant { value } => vec![value * scale; n],
        BaseEntropy::Uniform { low, high } => (0..n).map(|_| rng.random_range(low..=high) * scale).collect(),
        BaseEntropy::Exponential { rate } => {
            let exp = Exp::new(rate).expect("validated rate");
            (0..n).map(|_| exp.sample(rng) * scale).collect()
        }
    };
    let mut ids: Vec<u32> = (0..n).map(|_| rng.random_range(0..VOCAB)).collect();
    let mut texts: Vec<String> = ids.iter().map(|id| format!("w{id}")).collect();

    let mut spikes = Vec::with_capacity(spike_count);
    if let Some(model) = &profile.spikes {
        let mut positions = sample_indices(rng, n, spike_count).into_vec();
        positions.sort_unstable();
        for position in positions {
            let magnitude = rng.random_range(model.magnitude_low..=model.magnitude_high) * magnitude_factor;
            values[position] = magnitude;
            let text = (!model.texts.is_empty()).then(|| {
                let t = rng.random_range(0..model.texts.len());
                ids[position] = VOCAB + t as u32;
                texts[position] = model.texts[t].clone();
                model.texts[t].clone()
            });
            spikes.push(PlantedSpike {
                position,
                entropy: magnitude,
                text,
            });
        }
    }

    let tokens: Vec<TokenObservation> = values
        .iter()
        .zip(ids.iter().zip(texts))
        .map(|(&h, (&id, text))| {
            let base = match profile.token_format {
                TokenFormat::Entropy => TokenObservation::with_entropy(h),
                TokenFormat::TopLogprobs { k } => TokenObservation {
                    top_logprobs: Some(logprobs_for(h, k, &text)),
                    ..TokenObservation::default()
                },
            };
            TokenObservation {
                id: Some(i64::from(id)),
                text: Some(text),
                ..base
            }
        })
        .collect();

    // The ledger reports the entropy a scorer will see, which for logprob
    // tokens is the realized entropy of the emitted distribution.
    let realized = |i: usize| compute_token_entropy(&tokens[i], TailMode::Lump).expect("generated tokens are valid");
    for s in &mut spikes {
        s.entropy = realized(s.position);
    }
    let expected = expected_metrics(profile, &spikes, n, realized);

    let sample_id = format!("{query_id}-c{candidate:03}");
    let reward = if correct { 1.0 } else { 0.0 };
    let record = SampleRecord {
        sample_id: sample_id.clone(),
        query_id: query_id.to_string(),
        correct: Some(correct),
        difficulty: Some(difficulty),
        reward: Some(reward),
        tokens,
        extra: Default::default(),
    };
    let entry = LedgerEntry {
        sample_id,
        query_id: query_id.to_string(),
        correct,
        n_tokens: n,
        spikes,
        expected,
    };
    (record, entry)
}

/// Expected top set from the planting plan: the largest spikes, then (for a
/// constant base) the earliest non-spike positions.
fn expected_metrics(
    profile: &GeneratorProfile,
    spikes: &[PlantedSpike],
    n: usize,
    realized: impl Fn(usize) -> f64,
) -> Option<Expected> {
    let m = high_entropy_count(n, profile.ledger_p);
    let mut chosen: Vec<(usize, f64)> = if spikes.len() >= m {
        let mut ranked: Vec<&PlantedSpike> = spikes.iter().collect();
        ranked.sort_by(|a, b| b.entropy.total_cmp(&a.entropy).then(a.position.cmp(&b.position)));
        ranked[..m].iter().map(|s| (s.position, s.entropy)).collect()
    } else if matches!(profile.base, BaseEntropy::Constant { .. }) {
        let mut chosen: Vec<(usize, f64)> = spikes.iter().map(|s| (s.position, s.entropy)).collect();
        let mut next = 0;
        while chosen.len() < m {
            if !spikes.iter().any(|s| s.position == next) {
                chosen.push((next, realized(next)));
            }
            next += 1;
        }
        chosen
    } else {
        return None;
    };
    chosen.sort_by_key(|&(i, _)| i);
    Some(Expected {
        p: profile.ledger_p,
        high_indices: chosen.iter().map(|&(i, _)| i).collect(),
        hes_rel: chosen.iter().map(|&(_, h)| h).sum(),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateStats {
    pub samples: usize,
    pub tokens: usize,
    pub bytes: u64,
}

struct CountingWriter<W> {
    inner: W,
    bytes: u64,
}

impl<W: Write> Write for CountingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.bytes += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

/// Writes the corpus, and the ledger if given, one JSON object per line.
pub fn write_generated<W: Write, L: Write>(
    profile: &GeneratorProfile,
    corpus: W,
    mut ledger: Option<L>,
) -> Result<GenerateStats, SynthError> {
    let mut out = CountingWriter { inner: corpus, bytes: 0 };
    let mut stats = GenerateStats::default();
    for (record, entry) in generate(profile)? {
        serde_json::to_writer(&mut out, &record).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
        if let Some(l) = ledger.as_mut() {
            serde_json::to_writer(&mut *l, &entry).map_err(std::io::Error::from)?;
            l.write_all(b"\n")?;
        }
        stats.samples += 1;
        stats.tokens += record.tokens.len();
    }
    out.flush()?;
    if let Some(l) = ledger.as_mut() {
        l.flush()?;
    }
    stats.bytes = out.bytes;
    Ok(stats)
}
