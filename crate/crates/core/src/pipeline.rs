//! Streaming, sharded corpus scoring.
//!
//! A reader thread cuts the input into chunks of lines, worker threads parse
//! and score chunks, and the calling thread writes results back in input
//! order. Output bytes therefore do not depend on the worker count. At most
//! `4 * workers` chunks are in flight; a chunk holds at most
//! [`ScoreOptions::chunk_lines`] lines or [`ScoreOptions::chunk_bytes`] bytes.

use crossbeam_channel::{bounded, unbounded};
use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};
use std::thread;
use thiserror::Error;

use crate::corpus::{parse_record_line, CorpusError, IdSet};
use crate::entropy::{score_sample_counted, MetricConfig, SampleScore, ScoreError};
use crate::scores::ScoreWriter;

/// Errors kept verbatim in [`ScoreRunStats::errors`]; later ones are only counted.
pub const MAX_RETAINED_ERRORS: usize = 1000;

#[derive(Debug, Clone)]
pub struct ScoreOptions {
    pub config: MetricConfig,
    pub workers: usize,
    pub include_indices: bool,
    /// Record data errors and continue instead of stopping at the first one.
    pub keep_going: bool,
    pub check_duplicates: bool,
    pub chunk_lines: usize,
    pub chunk_bytes: usize,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            config: MetricConfig::default(),
            workers: 1,
            include_indices: false,
            keep_going: false,
            check_duplicates: true,
            chunk_lines: 256,
            chunk_bytes: 4 << 20,
        }
    }
}

#[derive(Debug, Default)]
pub struct ScoreRunStats {
    /// Non-blank input lines.
    pub records_in: usize,
    pub records_out: usize,
    pub error_count: usize,
    pub errors: Vec<CorpusError>,
    pub clamped_tokens: usize,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(CorpusError),
    #[error("reading input: {0}")]
    Input(io::Error),
    #[error("writing output: {0}")]
    Output(io::Error),
}

type Chunk = (u64, Vec<(usize, String)>);
type Scored = Result<(SampleScore, usize), CorpusError>;
type Done = (u64, Vec<(usize, Scored)>);

fn score_line(text: &str, line: usize, config: &MetricConfig) -> Scored {
    let record = parse_record_line(text, line)?;
    score_sample_counted(&record, config).map_err(|e| match e {
        ScoreError::EmptySequence => CorpusError::SchemaViolation {
            line,
            field: "tokens".into(),
            message: e.to_string(),
        },
        ScoreError::Token { position, source } => CorpusError::SchemaViolation {
            line,
            field: format!("tokens[{position}]"),
            message: source.to_string(),
        },
    })
}

fn read_chunks<R: BufRead>(
    mut input: R,
    opts: &ScoreOptions,
    mut emit: impl FnMut(Chunk) -> bool,
) -> Result<(), PipelineError> {
    let mut buf = Vec::new();
    let mut line_no = 0;
    let mut idx = 0u64;
    let mut lines = Vec::new();
    let mut bytes = 0;
    loop {
        buf.clear();
        if input.read_until(b'\n', &mut buf).map_err(PipelineError::Input)? == 0 {
            break;
        }
        line_no += 1;
        let text = String::from_utf8_lossy(&buf);
        let text = text.trim();
        if text.is_empty() {
            continue;
        }
        bytes += text.len();
        lines.push((line_no, text.to_string()));
        if lines.len() >= opts.chunk_lines || bytes >= opts.chunk_bytes {
            if !emit((idx, std::mem::take(&mut lines))) {
                return Ok(());
            }
            idx += 1;
            bytes = 0;
        }
    }
    if !lines.is_empty() {
        emit((idx, lines));
    }
    Ok(())
}

struct Collector<W: Write> {
    writer: ScoreWriter<W>,
    ids: Option<IdSet>,
    keep_going: bool,
    stats: ScoreRunStats,
}

impl<W: Write> Collector<W> {
    fn accept(&mut self, line: usize, scored: Scored) -> Result<(), PipelineError> {
        self.stats.records_in += 1;
        let ids = &mut self.ids;
        let scored = scored.and_then(|(score, clamped)| {
            if ids.as_mut().is_some_and(|ids| !ids.insert(&score.sample_id)) {
                return Err(CorpusError::DuplicateSampleId {
                    line,
                    id: score.sample_id,
                });
            }
            Ok((score, clamped))
        });
        match scored {
            Ok((score, clamped)) => {
                self.writer.write(&score).map_err(PipelineError::Output)?;
                self.stats.records_out += 1;
                self.stats.clamped_tokens += clamped;
                Ok(())
            }
            Err(e) if self.keep_going => {
                self.stats.error_count += 1;
                if self.stats.errors.len() < MAX_RETAINED_ERRORS {
                    self.stats.errors.push(e);
                }
                Ok(())
            }
            Err(e) => Err(PipelineError::Data(e)),
        }
    }

    fn finish(self) -> Result<ScoreRunStats, PipelineError> {
        self.writer.finish().map_err(PipelineError::Output)?;
        Ok(self.stats)
    }
}

/// Scores every record of `input` and writes one score line per record to `output`.
pub fn score_stream<R, W>(input: R, output: W, opts: &ScoreOptions) -> Result<ScoreRunStats, PipelineError>
where
    R: BufRead + Send,
    W: Write,
{
    opts.config.validate().map_err(|e| {
        PipelineError::Data(CorpusError::SchemaViolation {
            line: 0,
            field: "config".into(),
            message: e.to_string(),
        })
    })?;
    let mut collector = Collector {
        writer: ScoreWriter::new(output, opts.include_indices),
        ids: opts.check_duplicates.then(IdSet::default),
        keep_going: opts.keep_going,
        stats: ScoreRunStats::default(),
    };
    let workers = opts.workers.max(1);

    if workers == 1 {
        let mut failure = None;
        read_chunks(input, opts, |(_, lines)| {
            for (line, text) in lines {
                if let Err(e) = collector.accept(line, score_line(&text, line, &opts.config)) {
                    failure = Some(e);
                    return false;
                }
            }
            true
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
        return collector.finish();
    }

    let max_in_flight = workers * 4;
    thread::scope(|s| {
        let (chunk_tx, chunk_rx) = bounded::<Chunk>(workers);
        let (done_tx, done_rx) = unbounded::<Done>();
        let (ticket_tx, ticket_rx) = bounded::<()>(max_in_flight);
        for _ in 0..max_in_flight {
            ticket_tx.send(()).expect("ticket channel has capacity");
        }

        let reader = s.spawn(move || {
            read_chunks(input, opts, |chunk| ticket_rx.recv().is_ok() && chunk_tx.send(chunk).is_ok())
        });
        for _ in 0..workers {
            let chunk_rx = chunk_rx.clone();
            let done_tx = done_tx.clone();
            let config = opts.config;
            s.spawn(move || {
                for (idx, lines) in chunk_rx {
                    let results = lines
                        .into_iter()
                        .map(|(line, text)| (line, score_line(&text, line, &config)))
                        .collect();
                    if done_tx.send((idx, results)).is_err() {
                        break;
                    }
                }
            });
        }
        drop(chunk_rx);
        drop(done_tx);

        let mut pending = BTreeMap::new();
        let mut next = 0u64;
        for (idx, results) in done_rx.iter() {
            pending.insert(idx, results);
            while let Some(results) = pending.remove(&next) {
                for (line, scored) in results {
                    // Returning drops the channels, which unblocks and stops the other threads.
                    collector.accept(line, scored)?;
                }
                let _ = ticket_tx.send(());
                next += 1;
            }
        }
        reader.join().expect("reader thread panicked")?;
        collector.finish()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::TailMode;

    fn corpus(n: usize) -> String {
        (0..n)
            .map(|i| {
                let toks: Vec<String> = (0..(1 + i % 13))
                    .map(|t| format!(r#"{{"entropy":{}}}"#, ((i * 31 + t * 17) % 23) as f64 / 7.0))
                    .collect();
                format!(r#"{{"sample_id":"s{i:05}","query_id":"q{}","tokens":[{}]}}"#, i / 4, toks.join(","))
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn run(text: &str, workers: usize, keep_going: bool) -> (Result<ScoreRunStats, PipelineError>, Vec<u8>) {
        let opts = ScoreOptions {
            workers,
            keep_going,
            chunk_lines: 7,
            ..ScoreOptions::default()
        };
        let mut out = Vec::new();
        let stats = score_stream(text.as_bytes(), &mut out, &opts);
        (stats, out)
    }

    #[test]
    fn output_independent_of_worker_count() {
        let text = corpus(500);
        let (stats, one) = run(&text, 1, false);
        assert_eq!(stats.unwrap().records_out, 500);
        for workers in [2, 4, 16] {
            let (_, many) = run(&text, workers, false);
            assert_eq!(one, many, "workers = {workers}");
        }
    }

    #[test]
    fn first_data_error_aborts_with_line() {
        let mut lines: Vec<String> = corpus(20).lines().map(str::to_string).collect();
        lines[6] = "{not json".into();
        let text = lines.join("\n");
        for workers in [1, 4] {
            match run(&text, workers, false).0 {
                Err(PipelineError::Data(e)) => assert_eq!(e.line(), Some(7)),
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn keep_going_accounts_for_every_record() {
        let mut lines: Vec<String> = corpus(50).lines().map(str::to_string).collect();
        lines[3] = "{not json".into();
        lines[10] = lines[9].clone();
        lines[20] = r#"{"sample_id":"x","query_id":"q","tokens":[{"entropy":-3.0}]}"#.into();
        let text = lines.join("\n");
        for workers in [1, 3] {
            let stats = run(&text, workers, true).0.unwrap();
            assert_eq!(stats.records_in, 50);
            assert_eq!(stats.error_count, 3);
            assert_eq!(stats.records_in, stats.records_out + stats.error_count);
            let lines: Vec<usize> = stats.errors.iter().filter_map(CorpusError::line).collect();
            assert_eq!(lines, vec![4, 11, 21]);
        }
    }

    #[test]
    fn config_is_recorded_and_clamps_counted() {
        let text = r#"{"sample_id":"a","query_id":"q","tokens":[{"entropy":-1e-8},{"top_logprobs":[["x",-0.1]]}]}"#;
        let opts = ScoreOptions {
            config: MetricConfig::new(0.5, 0.2, TailMode::Ignore).unwrap(),
            include_indices: true,
            ..ScoreOptions::default()
        };
        let mut out = Vec::new();
        let stats = score_stream(text.as_bytes(), &mut out, &opts).unwrap();
        assert_eq!(stats.clamped_tokens, 1);
        let line = String::from_utf8(out).unwrap();
        assert!(line.contains(r#""config":{"p":0.5,"tau":0.2,"tail_mode":"ignore"}"#), "{line}");
        assert!(line.contains(r#""high_indices":[1]"#), "{line}");
    }
}
