//! Line-delimited corpus records and the streaming reader.
//!
//! One JSON object per line. Blank lines are skipped. Unknown top-level keys
//! are kept in [`SampleRecord::extra`] and written back out unchanged.

use serde::de::{self, Deserializer, MapAccess, Visitor};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::hash::{DefaultHasher, Hasher};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

use crate::entropy::TokenObservation;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: malformed record: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("line {line}: schema violation in `{field}`: {message}")]
    SchemaViolation { line: usize, field: String, message: String },
    #[error("line {line}: duplicate sample_id `{id}`")]
    DuplicateSampleId { line: usize, id: String },
    #[error("digest mismatch: manifest was computed from {expected}, input is {actual}")]
    DigestMismatch { expected: String, actual: String },
    #[error("sample `{id}` is not present in the score table")]
    UnknownSampleId { id: String },
}

impl CorpusError {
    /// 1-based input line the error refers to, when there is one.
    pub fn line(&self) -> Option<usize> {
        match self {
            CorpusError::MalformedLine { line, .. }
            | CorpusError::SchemaViolation { line, .. }
            | CorpusError::DuplicateSampleId { line, .. } => Some(*line),
            _ => None,
        }
    }

    pub(crate) fn from_json(err: serde_json::Error, line: usize) -> Self {
        use serde_json::error::Category;
        let message = err.to_string();
        match err.classify() {
            Category::Data => CorpusError::SchemaViolation {
                line,
                field: field_from_message(&message).unwrap_or("<record>").to_string(),
                message,
            },
            Category::Io => CorpusError::Io(io::Error::other(message)),
            Category::Syntax | Category::Eof => CorpusError::MalformedLine { line, message },
        }
    }
}

// serde names the offending field in backticks ("missing field `tokens`",
// "invalid field `reward`: ...").
fn field_from_message(message: &str) -> Option<&str> {
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(&message[start..start + len])
}

/// One reasoning trajectory with its per-token uncertainty evidence.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub query_id: String,
    pub correct: Option<bool>,
    pub difficulty: Option<f64>,
    pub reward: Option<f64>,
    pub tokens: Vec<TokenObservation>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl SampleRecord {
    /// Returns the offending field path and a reason on failure.
    pub fn validate(&self) -> Result<(), (String, String)> {
        if self.sample_id.is_empty() {
            return Err(("sample_id".into(), "must not be empty".into()));
        }
        if self.tokens.is_empty() {
            return Err(("tokens".into(), "must contain at least one token".into()));
        }
        if let Some(d) = self.difficulty {
            if !(0.0..=1.0).contains(&d) {
                return Err(("difficulty".into(), format!("{d} is outside [0, 1]")));
            }
        }
        if let Some(r) = self.reward {
            if !r.is_finite() {
                return Err(("reward".into(), format!("{r} is not finite")));
            }
        }
        for (i, token) in self.tokens.iter().enumerate() {
            token.validate().map_err(|e| (format!("tokens[{i}]"), e.to_string()))?;
        }
        Ok(())
    }
}

impl<'de> Deserialize<'de> for SampleRecord {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        deserializer.deserialize_map(RecordVisitor)
    }
}

struct RecordVisitor;

fn field_value<'de, A, T>(map: &mut A, slot: &mut Option<T>, key: &'static str) -> Result<(), A::Error>
where
    A: MapAccess<'de>,
    T: Deserialize<'de>,
{
    if slot.is_some() {
        return Err(de::Error::duplicate_field(key));
    }
    let value = map
        .next_value::<T>()
        .map_err(|e| de::Error::custom(format_args!("invalid field `{key}`: {e}")))?;
    *slot = Some(value);
    Ok(())
}

impl<'de> Visitor<'de> for RecordVisitor {
    type Value = SampleRecord;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("a corpus record object")
    }

    fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<SampleRecord, A::Error> {
        let mut sample_id: Option<String> = None;
        let mut query_id: Option<String> = None;
        let mut correct: Option<Option<bool>> = None;
        let mut difficulty: Option<Option<f64>> = None;
        let mut reward: Option<Option<f64>> = None;
        let mut tokens: Option<Vec<TokenObservation>> = None;
        let mut extra = BTreeMap::new();
        while let Some(key) = map.next_key::<String>()? {
            match key.as_str() {
                "sample_id" => field_value(&mut map, &mut sample_id, "sample_id")?,
                "query_id" => field_value(&mut map, &mut query_id, "query_id")?,
                "correct" => field_value(&mut map, &mut correct, "correct")?,
                "difficulty" => field_value(&mut map, &mut difficulty, "difficulty")?,
                "reward" => field_value(&mut map, &mut reward, "reward")?,
                "tokens" => field_value(&mut map, &mut tokens, "tokens")?,
                _ => {
                    let value = map.next_value::<Value>()?;
                    extra.insert(key, value);
                }
            }
        }
        Ok(SampleRecord {
            sample_id: sample_id.ok_or_else(|| de::Error::missing_field("sample_id"))?,
            query_id: query_id.ok_or_else(|| de::Error::missing_field("query_id"))?,
            correct: correct.flatten(),
            difficulty: difficulty.flatten(),
            reward: reward.flatten(),
            tokens: tokens.ok_or_else(|| de::Error::missing_field("tokens"))?,
            extra,
        })
    }
}

/// Parses and validates one corpus line (1-based `line` for error reporting).
pub fn parse_record_line(text: &str, line: usize) -> Result<SampleRecord, CorpusError> {
    let record: SampleRecord = serde_json::from_str(text).map_err(|e| {
        // Field errors are re-raised as data errors by the record visitor, so
        // check the syntax separately before calling it a schema problem.
        match serde_json::from_str::<de::IgnoredAny>(text) {
            Err(syntax) if !syntax.is_data() => CorpusError::from_json(syntax, line),
            _ => CorpusError::from_json(e, line),
        }
    })?;
    record
        .validate()
        .map_err(|(field, message)| CorpusError::SchemaViolation { line, field, message })?;
    Ok(record)
}

/// Tracks sample ids by 128-bit fingerprint (16 bytes per id).
#[derive(Debug, Default)]
pub(crate) struct IdSet(HashSet<u128>);

impl IdSet {
    fn fingerprint(id: &str) -> u128 {
        let half = |salt: u8| {
            let mut h = DefaultHasher::new();
            h.write_u8(salt);
            h.write(id.as_bytes());
            h.finish()
        };
        (u128::from(half(0x5a)) << 64) | u128::from(half(0xa5))
    }

    /// Returns false if the id was already present.
    pub fn insert(&mut self, id: &str) -> bool {
        self.0.insert(Self::fingerprint(id))
    }
}

/// Streams validated records in file order.
///
/// Holds one line in memory at a time. Errors are yielded in place and the
/// stream continues with the next line, except after an i/o error.
pub struct CorpusReader<R> {
    reader: R,
    buf: String,
    line: usize,
    ids: Option<IdSet>,
    failed: bool,
}

impl<R: BufRead> CorpusReader<R> {
    pub fn new(reader: R) -> Self {
        Self {
            reader,
            buf: String::new(),
            line: 0,
            ids: Some(IdSet::default()),
            failed: false,
        }
    }

    /// Skips the duplicate-id check, the only state that grows with record count.
    pub fn without_duplicate_check(mut self) -> Self {
        self.ids = None;
        self
    }

    /// Number of lines consumed so far.
    pub fn line_number(&self) -> usize {
        self.line
    }
}

impl<R: BufRead> Iterator for CorpusReader<R> {
    type Item = Result<SampleRecord, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            self.buf.clear();
            match self.reader.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => {
                    self.failed = true;
                    return Some(Err(e.into()));
                }
            }
            self.line += 1;
            let text = self.buf.trim();
            if text.is_empty() {
                continue;
            }
            let line = self.line;
            let ids = &mut self.ids;
            let result = parse_record_line(text, line).and_then(|record| {
                if ids.as_mut().is_some_and(|ids| !ids.insert(&record.sample_id)) {
                    return Err(CorpusError::DuplicateSampleId {
                        line,
                        id: record.sample_id,
                    });
                }
                Ok(record)
            });
            return Some(result);
        }
    }
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<CorpusReader<BufReader<File>>, CorpusError> {
    let file = File::open(path.as_ref())?;
    Ok(CorpusReader::new(BufReader::with_capacity(1 << 20, file)))
}

/// Writes records one per line; returns the number written.
pub fn write_corpus<'a, I, W>(records: I, out: W) -> Result<usize, CorpusError>
where
    I: IntoIterator<Item = &'a SampleRecord>,
    W: Write,
{
    let mut out = BufWriter::new(out);
    let mut count = 0;
    for record in records {
        serde_json::to_writer(&mut out, record).map_err(io::Error::from)?;
        out.write_all(b"\n")?;
        count += 1;
    }
    out.flush()?;
    Ok(count)
}
