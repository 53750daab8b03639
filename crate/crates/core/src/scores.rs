//! Score files: one [`SampleScore`] per line, fixed field order.

use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::corpus::{CorpusError, IdSet};
use crate::entropy::{MetricConfig, SampleScore};

#[derive(Serialize)]
struct ScoreLine<'a> {
    sample_id: &'a str,
    query_id: &'a str,
    correct: Option<bool>,
    difficulty: Option<f64>,
    reward: Option<f64>,
    n_tokens: usize,
    es: f64,
    avg_e: f64,
    hes_rel: f64,
    hes_abs: f64,
    avg_he: f64,
    high_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    high_indices: Option<&'a [usize]>,
    config: &'a MetricConfig,
}

/// Serializes a score to its canonical line (no trailing newline).
pub fn score_line(score: &SampleScore, include_indices: bool) -> Vec<u8> {
    let line = ScoreLine {
        sample_id: &score.sample_id,
        query_id: &score.query_id,
        correct: score.correct,
        difficulty: score.difficulty,
        reward: score.reward,
        n_tokens: score.n_tokens,
        es: score.es,
        avg_e: score.avg_e,
        hes_rel: score.hes_rel,
        hes_abs: score.hes_abs,
        avg_he: score.avg_he,
        high_count: score.high_count,
        high_indices: if include_indices { score.high_indices.as_deref() } else { None },
        config: &score.config,
    };
    serde_json::to_vec(&line).expect("score lines contain only finite numbers and strings")
}

pub struct ScoreWriter<W: Write> {
    out: BufWriter<W>,
    include_indices: bool,
    count: usize,
}

impl<W: Write> ScoreWriter<W> {
    pub fn new(out: W, include_indices: bool) -> Self {
        Self {
            out: BufWriter::with_capacity(1 << 20, out),
            include_indices,
            count: 0,
        }
    }

    pub fn write(&mut self, score: &SampleScore) -> io::Result<()> {
        self.out.write_all(&score_line(score, self.include_indices))?;
        self.out.write_all(b"\n")?;
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(mut self) -> io::Result<usize> {
        self.out.flush()?;
        Ok(self.count)
    }
}

/// Writes `scores` to `path`; returns the number of lines written.
pub fn write_scores<I>(scores: I, path: impl AsRef<Path>, include_indices: bool) -> Result<usize, CorpusError>
where
    I: IntoIterator<Item = SampleScore>,
{
    let mut writer = ScoreWriter::new(File::create(path)?, include_indices);
    for score in scores {
        writer.write(&score)?;
    }
    Ok(writer.finish()?)
}

pub fn parse_score_line(text: &str, line: usize) -> Result<SampleScore, CorpusError> {
    let score: SampleScore = serde_json::from_str(text).map_err(|e| CorpusError::from_json(e, line))?;
    let violation = |field: &str, message: String| CorpusError::SchemaViolation {
        line,
        field: field.to_string(),
        message,
    };
    if score.n_tokens == 0 {
        return Err(violation("n_tokens", "must be positive".into()));
    }
    if score.high_count == 0 || score.high_count > score.n_tokens {
        return Err(violation("high_count", format!("{} is outside [1, n_tokens]", score.high_count)));
    }
    if let Some(indices) = &score.high_indices {
        if indices.len() != score.high_count {
            return Err(violation("high_indices", "length differs from high_count".into()));
        }
    }
    score.config.validate().map_err(|e| violation("config", e.to_string()))?;
    Ok(score)
}

/// Order-insensitive content digest over lines.
///
/// Each line is hashed on its own; the sorted line hashes are hashed again.
/// Two files holding the same lines in any order share a digest.
#[derive(Debug, Default, Clone)]
pub struct DigestBuilder {
    lines: Vec<[u8; 32]>,
}

impl DigestBuilder {
    pub fn push_line(&mut self, line: &[u8]) {
        self.lines.push(Sha256::digest(line).into());
    }

    pub fn merge(&mut self, other: DigestBuilder) {
        self.lines.extend(other.lines);
    }

    pub fn finish(mut self) -> String {
        self.lines.sort_unstable();
        let mut hasher = Sha256::new();
        for h in &self.lines {
            hasher.update(h);
        }
        format!("sha256:{:x}", hasher.finalize())
    }
}

/// Digest of a line-delimited file as [`ScoreTable::load`] computes it.
pub fn file_digest(path: impl AsRef<Path>) -> Result<String, CorpusError> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut digest = DigestBuilder::default();
    let mut buf = Vec::new();
    loop {
        buf.clear();
        if reader.read_until(b'\n', &mut buf)? == 0 {
            break;
        }
        let line = trim_line(&buf);
        if !line.is_empty() {
            digest.push_line(line);
        }
    }
    Ok(digest.finish())
}

fn trim_line(buf: &[u8]) -> &[u8] {
    let mut end = buf.len();
    while end > 0 && matches!(buf[end - 1], b'\n' | b'\r' | b' ' | b'\t') {
        end -= 1;
    }
    &buf[..end]
}

/// A materialized score file plus its content digest.
#[derive(Debug, Clone)]
pub struct ScoreTable {
    scores: Vec<SampleScore>,
    digest: String,
}

impl ScoreTable {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        Self::from_reader(BufReader::new(File::open(path)?))
    }

    pub fn from_reader<R: BufRead>(mut reader: R) -> Result<Self, CorpusError> {
        let mut digest = DigestBuilder::default();
        let mut ids = IdSet::default();
        let mut scores = Vec::new();
        let mut buf = Vec::new();
        let mut line_no = 0;
        loop {
            buf.clear();
            if reader.read_until(b'\n', &mut buf)? == 0 {
                break;
            }
            line_no += 1;
            let line = trim_line(&buf);
            if line.is_empty() {
                continue;
            }
            let text = std::str::from_utf8(line).map_err(|e| CorpusError::MalformedLine {
                line: line_no,
                message: e.to_string(),
            })?;
            let score = parse_score_line(text, line_no)?;
            if !ids.insert(&score.sample_id) {
                return Err(CorpusError::DuplicateSampleId {
                    line: line_no,
                    id: score.sample_id,
                });
            }
            digest.push_line(line);
            scores.push(score);
        }
        Ok(Self {
            scores,
            digest: digest.finish(),
        })
    }

    /// Builds a table from in-memory scores. The digest is that of the file
    /// [`write_scores`] would produce without high indices.
    pub fn from_scores(scores: Vec<SampleScore>) -> Result<Self, CorpusError> {
        let mut digest = DigestBuilder::default();
        let mut ids = IdSet::default();
        for (i, score) in scores.iter().enumerate() {
            if !ids.insert(&score.sample_id) {
                return Err(CorpusError::DuplicateSampleId {
                    line: i + 1,
                    id: score.sample_id.clone(),
                });
            }
            digest.push_line(&score_line(score, false));
        }
        Ok(Self {
            scores,
            digest: digest.finish(),
        })
    }

    pub fn scores(&self) -> &[SampleScore] {
        &self.scores
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn index(&self) -> HashMap<&str, &SampleScore> {
        self.scores.iter().map(|s| (s.sample_id.as_str(), s)).collect()
    }
}
