//! Reference implementations written independently of the library, plus
//! random fixtures. Shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use hes_core::{SampleRecord, SampleScore, TokenObservation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Entropy in nats straight from the probabilities.
pub fn token_entropy(obs: &TokenObservation, lump_tail: bool) -> f64 {
    if let Some(h) = obs.entropy {
        return h.max(0.0);
    }
    let probs: Vec<f64> = obs.top_logprobs.as_ref().unwrap().iter().map(|(_, lp)| lp.exp()).collect();
    let mut h = 0.0;
    for &p in &probs {
        if p > 0.0 {
            h += -p * p.ln();
        }
    }
    let q = 1.0 - probs.iter().sum::<f64>();
    if lump_tail && q > 1e-12 {
        h += -q * q.ln();
    }
    h.max(0.0)
}

/// Smallest m with m >= p*n (allowing 1e-9 slack), at least 1, at most n.
pub fn high_count(n: usize, p: f64) -> usize {
    let x = p * n as f64;
    let mut m = 0;
    while (m as f64) < x - 1e-9 * x.max(1.0) {
        m += 1;
    }
    m.clamp(1, n)
}

#[derive(Debug, Clone)]
pub struct Expected {
    pub high_indices: Vec<usize>,
    pub es: f64,
    pub avg_e: f64,
    pub hes_rel: f64,
    pub hes_abs: f64,
    pub avg_he: f64,
}

/// Sort the whole list (descending entropy, then position) and sum.
pub fn score(h: &[f64], p: f64, tau: f64) -> Expected {
    let n = h.len();
    let m = high_count(n, p);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| h[b].partial_cmp(&h[a]).unwrap().then(a.cmp(&b)));
    let mut high = order[..m].to_vec();
    high.sort();
    let es: f64 = h.iter().sum();
    let hes_rel: f64 = order[..m].iter().map(|&i| h[i]).sum();
    let hes_abs: f64 = h.iter().filter(|&&x| x > tau).sum();
    Expected {
        high_indices: high,
        es,
        avg_e: es / n as f64,
        hes_rel,
        hes_abs,
        avg_he: hes_rel / m as f64,
    }
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300) || a == b
}

/// Fraction of (low, high) pairs with high > low, ties counting one half.
pub fn auc_pairwise(low: &[f64], high: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &h in high {
        for &l in low {
            if h > l {
                wins += 1.0;
            } else if h == l {
                wins += 0.5;
            }
        }
    }
    wins / (low.len() * high.len()) as f64
}

fn draw_entropy(rng: &mut ChaCha8Rng, family: u8) -> f64 {
    match family {
        0 => rng.random_range(0.0..5.0),
        1 => -rng.random_range(f64::EPSILON..1.0f64).ln(),
        2 => [0.0, 0.25, 0.5, 1.0, 2.0][rng.random_range(0..5)],
        _ => {
            if rng.random_bool(0.02) {
                rng.random_range(3.0..8.0)
            } else {
                rng.random_range(0.0..0.3)
            }
        }
    }
}

/// Random top-k logprobs with total mass at most one.
pub fn random_logprobs(rng: &mut ChaCha8Rng, k: usize) -> Vec<(String, f64)> {
    let mut w: Vec<f64> = (0..k).map(|_| rng.random_range(0.001..1.0)).collect();
    let mass = rng.random_range(0.5..=1.0);
    let total: f64 = w.iter().sum();
    for x in &mut w {
        *x *= mass / total;
    }
    w.iter().enumerate().map(|(i, p)| (format!("t{i}"), p.ln())).collect()
}

/// A record of 1..=max_n tokens mixing stored entropies and logprob tokens.
pub fn random_record(rng: &mut ChaCha8Rng, id: &str, max_n: usize) -> SampleRecord {
    let n = rng.random_range(1..=max_n);
    let family = rng.random_range(0..4u8);
    let logprob_share = [0.0, 0.3, 1.0][rng.random_range(0..3)];
    let tokens = (0..n)
        .map(|_| {
            if rng.random_bool(logprob_share) {
                let k = rng.random_range(1..=5);
                TokenObservation::with_logprobs(random_logprobs(rng, k))
            } else {
                TokenObservation::with_entropy(draw_entropy(rng, family))
            }
        })
        .collect();
    SampleRecord {
        sample_id: id.to_string(),
        query_id: format!("q{}", rng.random_range(0..50)),
        correct: Some(rng.random_bool(0.5)),
        tokens,
        ..SampleRecord::default()
    }
}

/// Score rows with random metric values, for selection and batching tests.
pub fn random_scores(rng: &mut ChaCha8Rng, n: usize, queries: usize) -> Vec<SampleScore> {
    (0..n)
        .map(|i| {
            let hes: f64 = if rng.random_bool(0.1) {
                f64::from(rng.random_range(0..5u8))
            } else {
                rng.random_range(0.0..20.0)
            };
            let n_tokens = rng.random_range(1..2000usize);
            let correct = rng.random_bool(0.5);
            SampleScore {
                sample_id: format!("s{i:06}"),
                query_id: format!("q{:04}", i % queries.max(1)),
                correct: Some(correct),
                difficulty: Some(rng.random_range(0.0..=1.0)),
                reward: Some(if correct { 1.0 } else { 0.0 }),
                n_tokens,
                es: hes * 3.0,
                avg_e: hes * 3.0 / n_tokens as f64,
                hes_rel: hes,
                hes_abs: hes * 0.9,
                avg_he: hes / 2.0,
                high_count: 2.min(n_tokens),
                high_indices: None,
                config: Default::default(),
            }
        })
        .collect()
}
