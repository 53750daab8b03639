mod common;

use std::io::Cursor;

use hes_core::scores::write_scores;
use hes_core::synth::{write_generated, GeneratorProfile};
use hes_core::{score_stream, ScoreOptions, ScoreTable};
use rand::seq::SliceRandom;

fn corpus(seed: u64, n_queries: usize) -> Vec<u8> {
    let profile = GeneratorProfile {
        n_queries,
        ..GeneratorProfile::preset("separation", seed).unwrap()
    };
    let mut out = Vec::new();
    write_generated(&profile, &mut out, None::<std::io::Sink>).unwrap();
    out
}

fn run(input: &[u8], opts: &ScoreOptions) -> (Vec<u8>, hes_core::ScoreRunStats) {
    let mut out = Vec::new();
    let stats = score_stream(Cursor::new(input), &mut out, opts).unwrap();
    (out, stats)
}

#[test]
fn output_is_byte_identical_across_worker_counts() {
    let input = corpus(3, 300);
    let mut reference = None;
    for workers in [1, 4, 16] {
        for chunk_lines in [1, 7, 256] {
            let opts = ScoreOptions {
                workers,
                chunk_lines,
                include_indices: true,
                ..ScoreOptions::default()
            };
            let (out, stats) = run(&input, &opts);
            assert_eq!(stats.records_out, 1200);
            match &reference {
                None => reference = Some(out),
                Some(r) => assert!(r == &out, "workers {workers}, chunk {chunk_lines}"),
            }
        }
    }
}

#[test]
fn permuted_input_gives_the_same_table() {
    let input = corpus(4, 100);
    let mut lines: Vec<&[u8]> = input.split(|&b| b == b'\n').filter(|l| !l.is_empty()).collect();
    let (a, _) = run(&input, &ScoreOptions::default());
    lines.shuffle(&mut common::rng(1));
    let shuffled = lines.join(&b'\n');
    let (b, _) = run(&shuffled, &ScoreOptions { workers: 4, ..ScoreOptions::default() });
    let ta = ScoreTable::from_reader(&a[..]).unwrap();
    let tb = ScoreTable::from_reader(&b[..]).unwrap();
    assert_eq!(ta.digest(), tb.digest());
    let sorted = |t: &ScoreTable| {
        let mut v = t.scores().to_vec();
        v.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        v
    };
    assert_eq!(sorted(&ta), sorted(&tb));
}

#[test]
fn keep_going_accounts_for_every_line() {
    let input = corpus(5, 50);
    let mut lines: Vec<Vec<u8>> = input.split(|&b| b == b'\n').filter(|l| !l.is_empty()).map(<[u8]>::to_vec).collect();
    lines[6] = b"{not json".to_vec();
    lines[20] = br#"{"sample_id":"x","query_id":"q","tokens":[]}"#.to_vec();
    let dup = lines[0].clone();
    lines.push(dup);
    let data = lines.join(&b'\n');
    for workers in [1, 4] {
        let opts = ScoreOptions {
            workers,
            keep_going: true,
            ..ScoreOptions::default()
        };
        let (_, stats) = run(&data, &opts);
        assert_eq!(stats.records_in, stats.records_out + stats.error_count);
        assert_eq!(stats.error_count, 3, "workers {workers}");
        assert_eq!(stats.errors.len(), 3);
    }
    // Without keep-going the first bad line (line 7) stops the run.
    let err = score_stream(Cursor::new(&data[..]), Vec::new(), &ScoreOptions::default()).unwrap_err();
    assert!(err.to_string().contains('7'), "{err}");
}

#[test]
fn empty_input_scores_nothing() {
    let (out, stats) = run(b"", &ScoreOptions::default());
    assert!(out.is_empty());
    assert_eq!((stats.records_in, stats.records_out), (0, 0));
    let (_, stats) = run(b"\n\n  \n", &ScoreOptions::default());
    assert_eq!(stats.records_out, 0);
}

#[test]
fn written_scores_round_trip() {
    let scores = common::random_scores(&mut common::rng(77), 100, 9);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.jsonl");
    assert_eq!(write_scores(scores.clone(), &path, true).unwrap(), 100);
    let table = ScoreTable::load(&path).unwrap();
    let mut want = scores;
    want.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let mut got = table.scores().to_vec();
    got.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    assert_eq!(got, want);
}
