//! RL batch construction from rollout groups and group-relative advantages.
//!
//! A batch holds `B = max(2, ceil(fraction * G))` trajectories, rounded up to
//! an even count, split evenly between correct (positive) and incorrect
//! (negative) trajectories. When a pool cannot fill its half, the shortfall is
//! taken from the other pool in that pool's own ranking order.
//!
//! Random orderings use ChaCha8 seeded with `seed` and a stream derived from
//! the query id (FNV-1a, 64 bit), so a group's batch does not depend on which
//! other groups are processed alongside it.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::entropy::ceil_fraction;
use crate::scores::ScoreTable;
use crate::selection::median;

pub const DEFAULT_BATCH_FRACTION: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RlError {
    #[error("rollout group `{0}` is empty")]
    EmptyGroup(String),
    #[error("advantages need at least two rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("sample `{0}` has no correctness label")]
    MissingCorrectLabel(String),
    #[error("sample `{0}` has neither a reward nor a correctness label")]
    MissingReward(String),
    #[error("strategy {strategy} needs difficulty labels, which sample `{sample_id}` lacks")]
    MissingDifficulty { strategy: &'static str, sample_id: String },
    #[error("batch fraction must lie in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("strategy {0} samples at random and needs a seed")]
    MissingSeed(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub sample_id: String,
    pub reward: f64,
    pub correct: bool,
    pub hes_rel: f64,
    pub n_tokens: usize,
    pub difficulty: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub query_id: String,
    pub trajectories: Vec<Trajectory>,
}

impl RolloutGroup {
    pub fn group_size(&self) -> usize {
        self.trajectories.len()
    }
}

/// Groups a score table by `query_id`, in ascending query order.
///
/// A missing reward falls back to 1 for correct and 0 for incorrect samples.
pub fn rollout_groups(table: &ScoreTable) -> Result<Vec<RolloutGroup>, RlError> {
    let mut groups: BTreeMap<&str, Vec<Trajectory>> = BTreeMap::new();
    for s in table.scores() {
        let correct = s.correct.ok_or_else(|| RlError::MissingCorrectLabel(s.sample_id.clone()))?;
        let reward = s.reward.unwrap_or(if correct { 1.0 } else { 0.0 });
        groups.entry(&s.query_id).or_default().push(Trajectory {
            sample_id: s.sample_id.clone(),
            reward,
            correct,
            hes_rel: s.hes_rel,
            n_tokens: s.n_tokens,
            difficulty: s.difficulty,
        });
    }
    Ok(groups
        .into_iter()
        .map(|(query_id, trajectories)| RolloutGroup {
            query_id: query_id.to_string(),
            trajectories,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchStrategy {
    PosHighNegRand,
    PosRandNegRand,
    PosHighNegLow,
    PosRandNegLow,
    PosLowNegRand,
    PosLengthNegRand,
    PosDifficultyNegRand,
    FullBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PositiveRule {
    High,
    Low,
    Rand,
    Length,
    Difficulty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NegativeRule {
    Rand,
    Low,
}

impl BatchStrategy {
    pub const ALL: [BatchStrategy; 8] = [
        BatchStrategy::PosHighNegRand,
        BatchStrategy::PosRandNegRand,
        BatchStrategy::PosHighNegLow,
        BatchStrategy::PosRandNegLow,
        BatchStrategy::PosLowNegRand,
        BatchStrategy::PosLengthNegRand,
        BatchStrategy::PosDifficultyNegRand,
        BatchStrategy::FullBatch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BatchStrategy::PosHighNegRand => "pos_high_neg_rand",
            BatchStrategy::PosRandNegRand => "pos_rand_neg_rand",
            BatchStrategy::PosHighNegLow => "pos_high_neg_low",
            BatchStrategy::PosRandNegLow => "pos_rand_neg_low",
            BatchStrategy::PosLowNegRand => "pos_low_neg_rand",
            BatchStrategy::PosLengthNegRand => "pos_length_neg_rand",
            BatchStrategy::PosDifficultyNegRand => "pos_difficulty_neg_rand",
            BatchStrategy::FullBatch => "full_batch",
        }
    }

    fn rules(self) -> Option<(PositiveRule, NegativeRule)> {
        use NegativeRule as N;
        use PositiveRule as P;
        match self {
            BatchStrategy::PosHighNegRand => Some((P::High, N::Rand)),
            BatchStrategy::PosRandNegRand => Some((P::Rand, N::Rand)),
            BatchStrategy::PosHighNegLow => Some((P::High, N::Low)),
            BatchStrategy::PosRandNegLow => Some((P::Rand, N::Low)),
            BatchStrategy::PosLowNegRand => Some((P::Low, N::Rand)),
            BatchStrategy::PosLengthNegRand => Some((P::Length, N::Rand)),
            BatchStrategy::PosDifficultyNegRand => Some((P::Difficulty, N::Rand)),
            BatchStrategy::FullBatch => None,
        }
    }

    /// Whether any slot is filled by random sampling.
    pub fn is_random(self) -> bool {
        self.rules()
            .is_some_and(|(p, n)| p == PositiveRule::Rand || n == NegativeRule::Rand)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchSpec {
    pub strategy: BatchStrategy,
    pub fraction: f64,
    pub seed: u64,
}

impl BatchSpec {
    pub fn new(strategy: BatchStrategy, seed: u64) -> Self {
        Self {
            strategy,
            fraction: DEFAULT_BATCH_FRACTION,
            seed,
        }
    }

    pub fn with_fraction(mut self, fraction: f64) -> Self {
        self.fraction = fraction;
        self
    }

    fn validate(&self) -> Result<(), RlError> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(RlError::InvalidFraction(self.fraction));
        }
        Ok(())
    }
}

/// Target batch size for a group of `group_size`.
pub fn batch_size(group_size: usize, fraction: f64) -> usize {
    let b = ceil_fraction(fraction, group_size).max(2);
    b + b % 2
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchSelection {
    pub positives: Vec<String>,
    pub negatives: Vec<String>,
    /// Slots filled from the opposite pool because a pool was short.
    pub backfilled: usize,
}

fn fnv1a(text: &str) -> u64 {
    text.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

fn group_rng(seed: u64, query_id: &str, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(query_id).wrapping_add(stream));
    rng
}

fn by_desc(key: impl Fn(&Trajectory) -> f64) -> impl Fn(&&Trajectory, &&Trajectory) -> std::cmp::Ordering {
    move |a, b| key(b).total_cmp(&key(a)).then_with(|| a.sample_id.cmp(&b.sample_id))
}

fn by_asc(key: impl Fn(&Trajectory) -> f64) -> impl Fn(&&Trajectory, &&Trajectory) -> std::cmp::Ordering {
    move |a, b| key(a).total_cmp(&key(b)).then_with(|| a.sample_id.cmp(&b.sample_id))
}

fn shuffled<'a>(mut pool: Vec<&'a Trajectory>, rng: &mut ChaCha8Rng) -> Vec<&'a Trajectory> {
    pool.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    pool.shuffle(rng);
    pool
}

fn order_positives<'a>(
    mut pool: Vec<&'a Trajectory>,
    rule: PositiveRule,
    strategy: BatchStrategy,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<&'a Trajectory>, RlError> {
    match rule {
        PositiveRule::High => pool.sort_by(by_desc(|t| t.hes_rel)),
        PositiveRule::Low => pool.sort_by(by_asc(|t| t.hes_rel)),
        PositiveRule::Length => pool.sort_by(by_desc(|t| t.n_tokens as f64)),
        PositiveRule::Rand => pool = shuffled(pool, rng),
        PositiveRule::Difficulty => {
            let mut values = pool
                .iter()
                .map(|t| {
                    t.difficulty.ok_or_else(|| RlError::MissingDifficulty {
                        strategy: strategy.name(),
                        sample_id: t.sample_id.clone(),
                    })
                })
                .collect::<Result<Vec<f64>, _>>()?;
            if !values.is_empty() {
                let mid = median(&mut values);
                pool.sort_by(by_asc(move |t| (t.difficulty.unwrap_or(mid) - mid).abs()));
            }
        }
    }
    Ok(pool)
}

fn order_negatives<'a>(mut pool: Vec<&'a Trajectory>, rule: NegativeRule, rng: &mut ChaCha8Rng) -> Vec<&'a Trajectory> {
    match rule {
        NegativeRule::Low => {
            pool.sort_by(by_asc(|t| t.hes_rel));
            pool
        }
        NegativeRule::Rand => shuffled(pool, rng),
    }
}

fn sorted_ids(pool: &[&Trajectory]) -> Vec<String> {
    let mut ids: Vec<String> = pool.iter().map(|t| t.sample_id.clone()).collect();
    ids.sort();
    ids
}

/// Picks the positive and negative trajectories of one group.
pub fn construct_batch(group: &RolloutGroup, spec: &BatchSpec) -> Result<BatchSelection, RlError> {
    spec.validate()?;
    if group.trajectories.is_empty() {
        return Err(RlError::EmptyGroup(group.query_id.clone()));
    }
    let (pos_pool, neg_pool): (Vec<&Trajectory>, Vec<&Trajectory>) = group.trajectories.iter().partition(|t| t.correct);
    let g = group.group_size();
    let b = batch_size(g, spec.fraction);

    let Some((pos_rule, neg_rule)) = spec.strategy.rules() else {
        return Ok(BatchSelection {
            positives: sorted_ids(&pos_pool),
            negatives: sorted_ids(&neg_pool),
            backfilled: 0,
        });
    };
    if g <= b {
        return Ok(BatchSelection {
            positives: sorted_ids(&pos_pool),
            negatives: sorted_ids(&neg_pool),
            backfilled: 0,
        });
    }

    let mut pos_rng = group_rng(spec.seed, &group.query_id, 0);
    let mut neg_rng = group_rng(spec.seed, &group.query_id, 1);
    let positives = order_positives(pos_pool, pos_rule, spec.strategy, &mut pos_rng)?;
    let negatives = order_negatives(neg_pool, neg_rule, &mut neg_rng);

    let half = b / 2;
    let pos_short = half.saturating_sub(positives.len());
    let neg_short = half.saturating_sub(negatives.len());
    let take_pos = (half + neg_short).min(positives.len());
    let take_neg = (half + pos_short).min(negatives.len());
    let ids = |pool: &[&Trajectory], n: usize| pool[..n].iter().map(|t| t.sample_id.clone()).collect::<Vec<_>>();
    Ok(BatchSelection {
        positives: ids(&positives, take_pos),
        negatives: ids(&negatives, take_neg),
        backfilled: pos_short + neg_short,
    })
}

/// Group-relative advantages `(r - mean) / std` with the population std.
/// A group whose rewards are all equal gets all-zero advantages.
pub fn group_advantage(rewards: &[f64]) -> Result<Vec<f64>, RlError> {
    if rewards.len() < 2 {
        return Err(RlError::GroupTooSmall(rewards.len()));
    }
    let first = rewards[0];
    if rewards.iter().all(|&r| r == first) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// One line of a batch file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchEntry {
    pub query_id: String,
    pub strategy: BatchStrategy,
    pub seed: u64,
    pub positives: Vec<String>,
    pub negatives: Vec<String>,
    /// Advantages of the batch members, normalized over the whole group.
    pub advantages: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub query_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdvantageStats {
    pub count: usize,
    pub mean: Option<f64>,
    pub mean_abs: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub degenerate_groups: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchSummary {
    pub groups_in: usize,
    pub groups_ok: usize,
    pub groups_failed: usize,
    pub positives: usize,
    pub negatives: usize,
    pub shortfall_groups: usize,
    pub shortfall_slots: usize,
    pub mean_positive_hes_rel: Option<f64>,
    pub mean_negative_hes_rel: Option<f64>,
    pub advantages: AdvantageStats,
    pub ledger: Vec<LedgerEntry>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchReport {
    pub entries: Vec<BatchEntry>,
    pub summary: BatchSummary,
}

fn batch_entry(group: &RolloutGroup, spec: &BatchSpec) -> Result<(BatchEntry, BatchSelection, bool), RlError> {
    let selection = construct_batch(group, spec)?;
    let rewards: Vec<f64> = group.trajectories.iter().map(|t| t.reward).collect();
    let advantages = group_advantage(&rewards)?;
    let degenerate = advantages.iter().all(|&a| a == 0.0);
    let by_id: BTreeMap<&str, f64> = group
        .trajectories
        .iter()
        .zip(&advantages)
        .map(|(t, &a)| (t.sample_id.as_str(), a))
        .collect();
    let members = selection.positives.iter().chain(&selection.negatives);
    let advantages = members.map(|id| (id.clone(), by_id[id.as_str()])).collect();
    let entry = BatchEntry {
        query_id: group.query_id.clone(),
        strategy: spec.strategy,
        seed: spec.seed,
        positives: selection.positives.clone(),
        negatives: selection.negatives.clone(),
        advantages,
    };
    Ok((entry, selection, degenerate))
}

fn mean(sum: f64, n: usize) -> Option<f64> {
    (n > 0).then(|| sum / n as f64)
}

/// Builds a batch for every group. A failing group is recorded in the
/// summary ledger and does not stop the others.
pub fn batch_report<I>(groups: I, spec: &BatchSpec) -> BatchReport
where
    I: IntoIterator<Item = RolloutGroup>,
{
    let mut report = BatchReport::default();
    let s = &mut report.summary;
    let (mut pos_sum, mut neg_sum) = (0.0, 0.0);
    let (mut adv_sum, mut adv_abs) = (0.0, 0.0);
    let (mut adv_min, mut adv_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for group in groups {
        s.groups_in += 1;
        match batch_entry(&group, spec) {
            Ok((entry, selection, degenerate)) => {
                s.groups_ok += 1;
                let hes: BTreeMap<&str, f64> =
                    group.trajectories.iter().map(|t| (t.sample_id.as_str(), t.hes_rel)).collect();
                pos_sum += entry.positives.iter().map(|id| hes[id.as_str()]).sum::<f64>();
                neg_sum += entry.negatives.iter().map(|id| hes[id.as_str()]).sum::<f64>();
                s.positives += entry.positives.len();
                s.negatives += entry.negatives.len();
                if selection.backfilled > 0 {
                    s.shortfall_groups += 1;
                    s.shortfall_slots += selection.backfilled;
                }
                s.advantages.degenerate_groups += usize::from(degenerate);
                for &a in entry.advantages.values() {
                    s.advantages.count += 1;
                    adv_sum += a;
                    adv_abs += a.abs();
                    adv_min = adv_min.min(a);
                    adv_max = adv_max.max(a);
                }
                report.entries.push(entry);
            }
            Err(e) => {
                s.groups_failed += 1;
                s.ledger.push(LedgerEntry {
                    query_id: group.query_id.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    s.mean_positive_hes_rel = mean(pos_sum, s.positives);
    s.mean_negative_hes_rel = mean(neg_sum, s.negatives);
    let n = s.advantages.count;
    s.advantages.mean = mean(adv_sum, n);
    s.advantages.mean_abs = mean(adv_abs, n);
    s.advantages.min = (n > 0).then_some(adv_min);
    s.advantages.max = (n > 0).then_some(adv_max);
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(id: &str, correct: bool, hes: f64) -> Trajectory {
        Trajectory {
            sample_id: id.to_string(),
            reward: if correct { 1.0 } else { 0.0 },
            correct,
            hes_rel: hes,
            n_tokens: 100,
            difficulty: None,
        }
    }

    fn group(pos: &[f64], neg: &[f64]) -> RolloutGroup {
        let mut trajectories = Vec::new();
        for (i, &h) in pos.iter().enumerate() {
            trajectories.push(traj(&format!("p{i}"), true, h));
        }
        for (i, &h) in neg.iter().enumerate() {
            trajectories.push(traj(&format!("n{i}"), false, h));
        }
        RolloutGroup {
            query_id: "q".into(),
            trajectories,
        }
    }

    #[test]
    fn batch_size_rule() {
        assert_eq!(batch_size(8, 0.5), 4);
        assert_eq!(batch_size(32, 0.5), 16);
        assert_eq!(batch_size(7, 0.5), 4);
        assert_eq!(batch_size(2, 0.1), 2);
        assert_eq!(batch_size(10, 0.3), 4);
    }

    #[test]
    fn pos_high_neg_rand_example() {
        let g = group(&[9.0, 7.0, 5.0, 3.0], &[1.0, 1.0, 1.0, 1.0]);
        let spec = BatchSpec::new(BatchStrategy::PosHighNegRand, 7);
        let b = construct_batch(&g, &spec).unwrap();
        assert_eq!(b.positives, ["p0", "p1"]);
        assert_eq!(b.negatives.len(), 2);
        assert!(b.negatives.iter().all(|id| id.starts_with('n')));
        assert_eq!(b.backfilled, 0);
        assert_eq!(construct_batch(&g, &spec).unwrap(), b);
    }

    #[test]
    fn all_correct_group_backfills_in_rank_order() {
        let g = group(&[1.0, 8.0, 3.0, 6.0, 2.0, 7.0, 4.0, 5.0], &[]);
        let b = construct_batch(&g, &BatchSpec::new(BatchStrategy::PosHighNegRand, 1)).unwrap();
        assert_eq!(b.positives, ["p1", "p5", "p3", "p7"]);
        assert!(b.negatives.is_empty());
        assert_eq!(b.backfilled, 2);
    }

    #[test]
    fn neg_low_takes_weakest_negatives() {
        let g = group(&[5.0, 5.0, 5.0, 5.0], &[6.0, 4.0, 2.0, 1.0]);
        let b = construct_batch(&g, &BatchSpec::new(BatchStrategy::PosHighNegLow, 0)).unwrap();
        assert_eq!(b.negatives, ["n3", "n2"]);
    }

    #[test]
    fn small_group_returned_whole() {
        let g = group(&[1.0], &[2.0, 3.0]);
        let b = construct_batch(&g, &BatchSpec::new(BatchStrategy::PosHighNegRand, 0).with_fraction(1.0)).unwrap();
        assert_eq!((b.positives.len(), b.negatives.len()), (1, 2));
    }

    #[test]
    fn full_batch_takes_everything() {
        let g = group(&[1.0, 2.0, 3.0], &[4.0, 5.0]);
        let b = construct_batch(&g, &BatchSpec::new(BatchStrategy::FullBatch, 0)).unwrap();
        assert_eq!(b.positives.len() + b.negatives.len(), 5);
    }

    #[test]
    fn empty_group_and_bad_fraction() {
        let g = group(&[], &[]);
        assert_eq!(
            construct_batch(&g, &BatchSpec::new(BatchStrategy::PosHighNegRand, 0)),
            Err(RlError::EmptyGroup("q".into()))
        );
        let g = group(&[1.0], &[0.0]);
        assert!(matches!(
            construct_batch(&g, &BatchSpec::new(BatchStrategy::PosHighNegRand, 0).with_fraction(0.0)),
            Err(RlError::InvalidFraction(_))
        ));
    }

    #[test]
    fn difficulty_strategy_needs_labels() {
        let g = group(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]);
        let err = construct_batch(&g, &BatchSpec::new(BatchStrategy::PosDifficultyNegRand, 0)).unwrap_err();
        assert!(matches!(err, RlError::MissingDifficulty { .. }));
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(group_advantage(&[1.0, 0.0, 0.0, 1.0]).unwrap(), vec![1.0, -1.0, -1.0, 1.0]);
        assert_eq!(group_advantage(&[1.0; 4]).unwrap(), vec![0.0; 4]);
        assert_eq!(group_advantage(&[2.0, 0.0]).unwrap(), vec![1.0, -1.0]);
        assert_eq!(group_advantage(&[0.1; 3]).unwrap(), vec![0.0; 3]);
        assert_eq!(group_advantage(&[1.0]), Err(RlError::GroupTooSmall(1)));
    }

    #[test]
    fn report_isolates_errors() {
        let groups = vec![
            group(&[1.0, 2.0], &[0.5, 0.2]),
            RolloutGroup {
                query_id: "empty".into(),
                trajectories: vec![],
            },
            RolloutGroup {
                query_id: "z".into(),
                ..group(&[3.0], &[0.1])
            },
        ];
        let report = batch_report(groups, &BatchSpec::new(BatchStrategy::PosHighNegRand, 3));
        assert_eq!(report.entries.len(), 2);
        assert_eq!(report.summary.ledger.len(), 1);
        assert_eq!(report.summary.ledger[0].query_id, "empty");
        assert_eq!(report.summary.groups_in, 3);
    }

    #[test]
    fn advantages_cover_batch_members() {
        let g = group(&[9.0, 7.0, 5.0, 3.0], &[1.0, 1.0, 1.0, 1.0]);
        let report = batch_report([g], &BatchSpec::new(BatchStrategy::PosHighNegRand, 5));
        let e = &report.entries[0];
        assert_eq!(e.advantages.len(), 4);
        assert_eq!(e.advantages["p0"], 1.0);
        assert!(e.negatives.iter().all(|id| e.advantages[id] == -1.0));
    }
}
