//! Corpus-level selection: percentile selection for SFT and its baselines,
//! rejection-fine-tuning selection, and length-stratified selection.
//!
//! Ties key on `sample_id`, so the result does not depend on the order of the
//! score table. Score rankings break ties by ascending id; lowest-score mode
//! walks the same ranking from the bottom.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::cmp::Ordering;
use std::collections::BTreeMap;
use thiserror::Error;

use crate::entropy::{ceil_fraction, SampleScore};
use crate::manifest::SelectionManifest;
use crate::scores::ScoreTable;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectionError {
    #[error("no samples to select from")]
    EmptyCorpus,
    #[error("{mode} selection needs `{field}`, which sample `{sample_id}` lacks")]
    MissingField {
        mode: &'static str,
        field: &'static str,
        sample_id: String,
    },
    #[error("sample `{0}` has no correctness label")]
    MissingCorrectLabel(String),
    #[error("invalid selection spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    HesRel,
    HesAbs,
    Es,
    AvgE,
    AvgHe,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::HesRel, Metric::HesAbs, Metric::Es, Metric::AvgE, Metric::AvgHe];

    pub fn value(self, score: &SampleScore) -> f64 {
        match self {
            Metric::HesRel => score.hes_rel,
            Metric::HesAbs => score.hes_abs,
            Metric::Es => score.es,
            Metric::AvgE => score.avg_e,
            Metric::AvgHe => score.avg_he,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::HesRel => "hes_rel",
            Metric::HesAbs => "hes_abs",
            Metric::Es => "es",
            Metric::AvgE => "avg_e",
            Metric::AvgHe => "avg_he",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    HighestHes,
    LowestHes,
    Random,
    Length,
    Difficulty,
}

impl SelectionMode {
    pub fn name(self) -> &'static str {
        match self {
            SelectionMode::HighestHes => "highest_hes",
            SelectionMode::LowestHes => "lowest_hes",
            SelectionMode::Random => "random",
            SelectionMode::Length => "length",
            SelectionMode::Difficulty => "difficulty",
        }
    }
}

/// How many samples to keep: a fraction of the corpus or an absolute count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    Ratio(f64),
    Count(usize),
}

impl Budget {
    /// `min(total, max(1, ceil(ratio * total)))` for ratios, `min(total, n)` for counts.
    pub fn resolve(self, total: usize) -> usize {
        match self {
            Budget::Ratio(r) => ceil_fraction(r, total).max(1).min(total),
            Budget::Count(n) => n.min(total),
        }
    }

    fn validate(self) -> Result<(), SelectionError> {
        match self {
            Budget::Ratio(r) if !(r > 0.0 && r <= 1.0) => {
                Err(SelectionError::InvalidSpec(format!("ratio must lie in (0, 1], got {r}")))
            }
            _ => Ok(()),
        }
    }

    fn record(self, params: &mut BTreeMap<String, Value>) {
        match self {
            Budget::Ratio(r) => params.insert("ratio".into(), json!(r)),
            Budget::Count(n) => params.insert("budget".into(), json!(n)),
        };
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionSpec {
    pub mode: SelectionMode,
    pub budget: Budget,
    pub metric: Metric,
    /// Required by random mode, ignored otherwise.
    pub seed: Option<u64>,
}

impl SelectionSpec {
    pub fn new(mode: SelectionMode, budget: Budget) -> Self {
        Self {
            mode,
            budget,
            metric: Metric::HesRel,
            seed: None,
        }
    }

    pub fn with_metric(mut self, metric: Metric) -> Self {
        self.metric = metric;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    fn validate(&self) -> Result<(), SelectionError> {
        self.budget.validate()?;
        if self.mode == SelectionMode::Random && self.seed.is_none() {
            return Err(SelectionError::InvalidSpec("random selection requires a seed".into()));
        }
        Ok(())
    }

    fn params(&self, total: usize, selected: usize) -> BTreeMap<String, Value> {
        let mut params = BTreeMap::new();
        params.insert("mode".into(), json!(self.mode.name()));
        params.insert("metric".into(), json!(self.metric.name()));
        params.insert("total".into(), json!(total));
        params.insert("selected_count".into(), json!(selected));
        self.budget.record(&mut params);
        params
    }

    fn manifest_seed(&self) -> Option<u64> {
        (self.mode == SelectionMode::Random).then_some(self.seed).flatten()
    }
}

/// Descending by `key`, ties by ascending sample id.
fn by_key_desc<'a>(key: impl Fn(&SampleScore) -> f64 + 'a) -> impl Fn(&&SampleScore, &&SampleScore) -> Ordering + 'a {
    move |a, b| key(b).total_cmp(&key(a)).then_with(|| a.sample_id.cmp(&b.sample_id))
}

fn by_key_asc<'a>(key: impl Fn(&SampleScore) -> f64 + 'a) -> impl Fn(&&SampleScore, &&SampleScore) -> Ordering + 'a {
    move |a, b| key(a).total_cmp(&key(b)).then_with(|| a.sample_id.cmp(&b.sample_id))
}

/// Median of the values; mean of the two middle values for even counts.
pub(crate) fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

struct Picked<'a> {
    chosen: Vec<&'a SampleScore>,
    threshold: Option<f64>,
}

fn pick<'a>(scores: &[&'a SampleScore], spec: &SelectionSpec) -> Result<Picked<'a>, SelectionError> {
    if scores.is_empty() {
        return Err(SelectionError::EmptyCorpus);
    }
    let m = spec.budget.resolve(scores.len());
    let mut ranked = scores.to_vec();
    let metric = spec.metric;
    match spec.mode {
        SelectionMode::HighestHes => ranked.sort_by(by_key_desc(move |s| metric.value(s))),
        // The exact reverse of the highest ranking, so highest(m) and
        // lowest(M - m) always partition the corpus, ties included.
        SelectionMode::LowestHes => {
            ranked.sort_by(by_key_desc(move |s| metric.value(s)));
            ranked.reverse();
        }
        SelectionMode::Length => ranked.sort_by(by_key_desc(|s| s.n_tokens as f64)),
        SelectionMode::Random => {
            ranked.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
            let seed = spec.seed.expect("validated");
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = rand::seq::index::sample(&mut rng, ranked.len(), m).into_vec();
            idx.sort_unstable();
            ranked = idx.into_iter().map(|i| ranked[i]).collect();
        }
        SelectionMode::Difficulty => {
            let mut values = Vec::with_capacity(ranked.len());
            for s in &ranked {
                values.push(s.difficulty.ok_or_else(|| SelectionError::MissingField {
                    mode: "difficulty",
                    field: "difficulty",
                    sample_id: s.sample_id.clone(),
                })?);
            }
            let mid = median(&mut values);
            ranked.sort_by(by_key_asc(move |s| (s.difficulty.unwrap_or(mid) - mid).abs()));
        }
    }
    ranked.truncate(m);
    let threshold = ranked.last().and_then(|last| match spec.mode {
        SelectionMode::HighestHes | SelectionMode::LowestHes => Some(metric.value(last)),
        SelectionMode::Length => Some(last.n_tokens as f64),
        SelectionMode::Random | SelectionMode::Difficulty => None,
    });
    Ok(Picked { chosen: ranked, threshold })
}

fn ids(chosen: &[&SampleScore]) -> Vec<String> {
    chosen.iter().map(|s| s.sample_id.clone()).collect()
}

/// Percentile selection over the whole score table.
pub fn sft_select(table: &ScoreTable, spec: &SelectionSpec) -> Result<SelectionManifest, SelectionError> {
    spec.validate()?;
    let all: Vec<&SampleScore> = table.scores().iter().collect();
    let picked = pick(&all, spec)?;
    Ok(SelectionManifest {
        strategy: "sft".into(),
        params: spec.params(all.len(), picked.chosen.len()),
        threshold: picked.threshold,
        rejected_count: all.len() - picked.chosen.len(),
        selected: ids(&picked.chosen),
        corpus_digest: table.digest().to_string(),
        seed: spec.manifest_seed(),
    })
}

/// Splits samples into `groups` equal-count strata by ascending `n_tokens`
/// (ties by sample id). Stratum `i` holds sorted positions
/// `floor(i*M/groups) .. floor((i+1)*M/groups)`.
pub fn length_strata(scores: &[SampleScore], groups: usize) -> Vec<Vec<&SampleScore>> {
    let mut sorted: Vec<&SampleScore> = scores.iter().collect();
    sorted.sort_by(by_key_asc(|s| s.n_tokens as f64));
    let m = sorted.len();
    (0..groups)
        .map(|i| sorted[i * m / groups..(i + 1) * m / groups].to_vec())
        .collect()
}

/// Runs [`sft_select`] independently inside each length stratum.
pub fn stratified_select(
    table: &ScoreTable,
    groups: usize,
    spec: &SelectionSpec,
) -> Result<Vec<SelectionManifest>, SelectionError> {
    spec.validate()?;
    if table.is_empty() {
        return Err(SelectionError::EmptyCorpus);
    }
    if groups == 0 || groups > table.len() {
        return Err(SelectionError::InvalidSpec(format!(
            "strata must lie in [1, {}], got {groups}",
            table.len()
        )));
    }
    length_strata(table.scores(), groups)
        .into_iter()
        .enumerate()
        .map(|(i, stratum)| {
            let picked = pick(&stratum, spec)?;
            let mut params = spec.params(stratum.len(), picked.chosen.len());
            params.insert("strata".into(), json!(groups));
            params.insert("stratum".into(), json!(i));
            params.insert("min_tokens".into(), json!(stratum.first().map(|s| s.n_tokens)));
            params.insert("max_tokens".into(), json!(stratum.last().map(|s| s.n_tokens)));
            Ok(SelectionManifest {
                strategy: "sft_stratified".into(),
                params,
                threshold: picked.threshold,
                rejected_count: stratum.len() - picked.chosen.len(),
                selected: ids(&picked.chosen),
                corpus_digest: table.digest().to_string(),
                seed: spec.manifest_seed(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RftScope {
    PerQuery,
    Global,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RftSpec {
    pub scope: RftScope,
    /// Responses kept per query; also sets the default global budget.
    pub k: Option<usize>,
    /// Candidates generated per query upstream (K); only used to validate `k`.
    pub candidates: Option<usize>,
    /// Global pool budget N; defaults to the per-query-equivalent volume.
    pub budget: Option<usize>,
}

impl RftSpec {
    pub fn per_query(k: usize) -> Self {
        Self {
            scope: RftScope::PerQuery,
            k: Some(k),
            candidates: None,
            budget: None,
        }
    }

    pub fn global(k: Option<usize>, budget: Option<usize>) -> Self {
        Self {
            scope: RftScope::Global,
            k,
            candidates: None,
            budget,
        }
    }

    fn validate(&self) -> Result<(), SelectionError> {
        if self.k == Some(0) {
            return Err(SelectionError::InvalidSpec("k must be positive".into()));
        }
        if let (Some(k), Some(big_k)) = (self.k, self.candidates) {
            if k > big_k {
                return Err(SelectionError::InvalidSpec(format!("k = {k} exceeds candidates K = {big_k}")));
            }
        }
        match (self.scope, self.k, self.budget) {
            (RftScope::PerQuery, None, _) => Err(SelectionError::InvalidSpec("per-query selection requires k".into())),
            (RftScope::Global, None, None) => {
                Err(SelectionError::InvalidSpec("global selection requires a budget or k".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Correct responses (the positive pool) per query, ranked best first.
fn correct_pools(table: &ScoreTable) -> Result<BTreeMap<&str, Vec<&SampleScore>>, SelectionError> {
    let mut pools: BTreeMap<&str, Vec<&SampleScore>> = BTreeMap::new();
    for s in table.scores() {
        let correct = s
            .correct
            .ok_or_else(|| SelectionError::MissingCorrectLabel(s.sample_id.clone()))?;
        let pool = pools.entry(s.query_id.as_str()).or_default();
        if correct {
            pool.push(s);
        }
    }
    for pool in pools.values_mut() {
        pool.sort_by(by_key_desc(|s| s.hes_rel));
    }
    Ok(pools)
}

/// Sum over queries of `min(k, |correct responses|)`.
pub fn per_query_budget(table: &ScoreTable, k: usize) -> Result<usize, SelectionError> {
    Ok(correct_pools(table)?.values().map(|p| p.len().min(k)).sum())
}

pub fn rft_per_query_select(table: &ScoreTable, k: usize) -> Result<SelectionManifest, SelectionError> {
    rft_select(table, &RftSpec::per_query(k))
}

pub fn rft_global_select(
    table: &ScoreTable,
    budget: Option<usize>,
    k: Option<usize>,
) -> Result<SelectionManifest, SelectionError> {
    rft_select(table, &RftSpec::global(k, budget))
}

pub fn rft_select(table: &ScoreTable, spec: &RftSpec) -> Result<SelectionManifest, SelectionError> {
    spec.validate()?;
    let pools = correct_pools(table)?;
    let mut params = BTreeMap::new();
    if let Some(k) = spec.k {
        params.insert("k".into(), json!(k));
    }
    if let Some(big_k) = spec.candidates {
        params.insert("candidates".into(), json!(big_k));
    }
    let (scope, selected, threshold) = match spec.scope {
        RftScope::PerQuery => {
            let k = spec.k.expect("validated");
            let mut counts = BTreeMap::new();
            let mut selected = Vec::new();
            for (query, pool) in &pools {
                let take = pool.len().min(k);
                counts.insert(query.to_string(), json!(take));
                selected.extend(pool[..take].iter().map(|s| s.sample_id.clone()));
            }
            params.insert("budget".into(), json!(selected.len()));
            params.insert("per_query_counts".into(), Value::Object(counts.into_iter().collect()));
            ("per_query", selected, None)
        }
        RftScope::Global => {
            let (budget, source) = match (spec.budget, spec.k) {
                (Some(n), _) => (n, "explicit"),
                (None, Some(k)) => (pools.values().map(|p| p.len().min(k)).sum(), "per_query_equivalent"),
                (None, None) => unreachable!("validated"),
            };
            let mut pool: Vec<&SampleScore> = pools.values().flatten().copied().collect();
            pool.sort_by(by_key_desc(|s| s.hes_rel));
            params.insert("budget".into(), json!(budget));
            params.insert("budget_source".into(), json!(source));
            params.insert("pool_size".into(), json!(pool.len()));
            pool.truncate(budget);
            let threshold = pool.last().map(|s| s.hes_rel);
            ("global", ids(&pool), threshold)
        }
    };
    params.insert("scope".into(), json!(scope));
    Ok(SelectionManifest {
        strategy: "rft".into(),
        params,
        threshold,
        rejected_count: table.len() - selected.len(),
        selected,
        corpus_digest: table.digest().to_string(),
        seed: None,
    })
}

fn param<T: serde::de::DeserializeOwned>(manifest: &SelectionManifest, key: &str) -> Result<Option<T>, SelectionError> {
    match manifest.params.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => serde_json::from_value(v.clone())
            .map(Some)
            .map_err(|e| SelectionError::InvalidSpec(format!("manifest param `{key}`: {e}"))),
    }
}

fn required<T: serde::de::DeserializeOwned>(manifest: &SelectionManifest, key: &str) -> Result<T, SelectionError> {
    param(manifest, key)?.ok_or_else(|| SelectionError::InvalidSpec(format!("manifest lacks param `{key}`")))
}

fn recorded_spec(manifest: &SelectionManifest) -> Result<SelectionSpec, SelectionError> {
    let budget = match (param::<f64>(manifest, "ratio")?, param::<usize>(manifest, "budget")?) {
        (Some(r), _) => Budget::Ratio(r),
        (None, Some(n)) => Budget::Count(n),
        (None, None) => return Err(SelectionError::InvalidSpec("manifest records neither ratio nor budget".into())),
    };
    Ok(SelectionSpec {
        mode: required(manifest, "mode")?,
        budget,
        metric: required(manifest, "metric")?,
        seed: manifest.seed,
    })
}

/// Re-runs the selection recorded in `manifest` over `table`. The result
/// equals the manifest when both were computed from the same scores.
pub fn replay(table: &ScoreTable, manifest: &SelectionManifest) -> Result<SelectionManifest, SelectionError> {
    match manifest.strategy.as_str() {
        "sft" => sft_select(table, &recorded_spec(manifest)?),
        "sft_stratified" => {
            let groups: usize = required(manifest, "strata")?;
            let stratum: usize = required(manifest, "stratum")?;
            let mut all = stratified_select(table, groups, &recorded_spec(manifest)?)?;
            if stratum >= all.len() {
                return Err(SelectionError::InvalidSpec(format!("stratum {stratum} out of range")));
            }
            Ok(all.swap_remove(stratum))
        }
        "rft" => {
            let scope: RftScope = required(manifest, "scope")?;
            let explicit = param::<String>(manifest, "budget_source")?.as_deref() == Some("explicit");
            let spec = RftSpec {
                scope,
                k: param(manifest, "k")?,
                candidates: param(manifest, "candidates")?,
                budget: if explicit { param(manifest, "budget")? } else { None },
            };
            rft_select(table, &spec)
        }
        other => Err(SelectionError::InvalidSpec(format!("unknown strategy `{other}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::MetricConfig;

    pub(crate) fn score(id: &str, hes: f64) -> SampleScore {
        SampleScore {
            sample_id: id.to_string(),
            query_id: "q".into(),
            correct: None,
            difficulty: None,
            reward: None,
            n_tokens: 10,
            es: hes * 2.0,
            avg_e: hes / 5.0,
            hes_rel: hes,
            hes_abs: hes / 2.0,
            avg_he: hes,
            high_count: 1,
            high_indices: None,
            config: MetricConfig::default(),
        }
    }

    fn table(scores: Vec<SampleScore>) -> ScoreTable {
        ScoreTable::from_scores(scores).unwrap()
    }

    fn five() -> ScoreTable {
        table(vec![
            score("a", 5.5),
            score("b", 2.0),
            score("c", 9.1),
            score("d", 0.4),
            score("e", 3.3),
        ])
    }

    #[test]
    fn highest_worked_example() {
        let m = sft_select(&five(), &SelectionSpec::new(SelectionMode::HighestHes, Budget::Ratio(0.4))).unwrap();
        assert_eq!(m.selected, ["c", "a"]);
        assert_eq!(m.threshold, Some(5.5));
        assert_eq!(m.rejected_count, 3);
        assert_eq!(m.seed, None);
    }

    #[test]
    fn lowest_takes_bottom() {
        let m = sft_select(&five(), &SelectionSpec::new(SelectionMode::LowestHes, Budget::Ratio(0.4))).unwrap();
        assert_eq!(m.selected, ["d", "b"]);
        assert_eq!(m.threshold, Some(2.0));
    }

    #[test]
    fn lowest_ties_leave_smallest_ids_to_highest() {
        let t = table(vec![score("a", 1.0), score("b", 1.0), score("c", 1.0), score("d", 0.0)]);
        let lo = sft_select(&t, &SelectionSpec::new(SelectionMode::LowestHes, Budget::Count(2))).unwrap();
        let hi = sft_select(&t, &SelectionSpec::new(SelectionMode::HighestHes, Budget::Count(2))).unwrap();
        assert_eq!(lo.selected, ["d", "c"]);
        assert_eq!(hi.selected, ["a", "b"]);
    }

    #[test]
    fn full_ratio_selects_everything_in_every_mode() {
        let mut scores: Vec<SampleScore> = five().scores().to_vec();
        for (i, s) in scores.iter_mut().enumerate() {
            s.difficulty = Some(i as f64 / 10.0);
        }
        let t = table(scores);
        for mode in [
            SelectionMode::HighestHes,
            SelectionMode::LowestHes,
            SelectionMode::Random,
            SelectionMode::Length,
            SelectionMode::Difficulty,
        ] {
            let m = sft_select(&t, &SelectionSpec::new(mode, Budget::Ratio(1.0)).with_seed(3)).unwrap();
            assert_eq!(m.selected.len(), 5, "{mode:?}");
            assert_eq!(m.rejected_count, 0);
        }
    }

    #[test]
    fn ties_break_by_sample_id() {
        let t = table(["e", "c", "a", "d", "b"].iter().map(|id| score(id, 1.0)).collect());
        let m = sft_select(&t, &SelectionSpec::new(SelectionMode::HighestHes, Budget::Ratio(0.4))).unwrap();
        assert_eq!(m.selected, ["a", "b"]);
    }

    #[test]
    fn difficulty_nearest_median() {
        let scores = [("a", 0.1), ("b", 0.5), ("c", 0.9), ("d", 0.55)]
            .iter()
            .map(|&(id, d)| SampleScore {
                difficulty: Some(d),
                ..score(id, 1.0)
            })
            .collect();
        let m = sft_select(&table(scores), &SelectionSpec::new(SelectionMode::Difficulty, Budget::Count(2))).unwrap();
        let mut got = m.selected.clone();
        got.sort();
        assert_eq!(got, ["b", "d"]);
        assert_eq!(m.threshold, None);
    }

    #[test]
    fn difficulty_requires_labels() {
        let err = sft_select(&five(), &SelectionSpec::new(SelectionMode::Difficulty, Budget::Count(2))).unwrap_err();
        assert!(matches!(err, SelectionError::MissingField { field: "difficulty", .. }));
    }

    #[test]
    fn length_takes_longest() {
        let scores = [("a", 5), ("b", 50), ("c", 7), ("d", 50)]
            .iter()
            .map(|&(id, n)| SampleScore {
                n_tokens: n,
                ..score(id, 1.0)
            })
            .collect();
        let m = sft_select(&table(scores), &SelectionSpec::new(SelectionMode::Length, Budget::Count(3))).unwrap();
        assert_eq!(m.selected, ["b", "d", "c"]);
        assert_eq!(m.threshold, Some(7.0));
    }

    #[test]
    fn random_needs_seed_and_is_reproducible() {
        let t = five();
        let spec = SelectionSpec::new(SelectionMode::Random, Budget::Ratio(0.6));
        assert!(matches!(sft_select(&t, &spec), Err(SelectionError::InvalidSpec(_))));
        let a = sft_select(&t, &spec.clone().with_seed(11)).unwrap();
        let b = sft_select(&t, &spec.with_seed(11)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.selected.len(), 3);
        assert_eq!(a.seed, Some(11));
        assert_eq!(a.threshold, None);
    }

    #[test]
    fn count_rule_over_ten() {
        let t = table((0..10).map(|i| score(&format!("s{i}"), i as f64)).collect());
        let m = sft_select(&t, &SelectionSpec::new(SelectionMode::HighestHes, Budget::Ratio(0.2))).unwrap();
        assert_eq!(m.selected.len(), 2);
        let m = sft_select(&t, &SelectionSpec::new(SelectionMode::HighestHes, Budget::Ratio(0.8))).unwrap();
        assert_eq!(m.selected.len(), 8);
    }

    #[test]
    fn empty_and_invalid() {
        let t = table(vec![]);
        let spec = SelectionSpec::new(SelectionMode::HighestHes, Budget::Ratio(0.2));
        assert_eq!(sft_select(&t, &spec), Err(SelectionError::EmptyCorpus));
        let bad = SelectionSpec::new(SelectionMode::HighestHes, Budget::Ratio(1.5));
        assert!(matches!(sft_select(&five(), &bad), Err(SelectionError::InvalidSpec(_))));
    }

    #[test]
    fn metric_choice_is_respected() {
        let mut scores = five().scores().to_vec();
        scores[3].es = 100.0;
        let spec = SelectionSpec::new(SelectionMode::HighestHes, Budget::Count(1)).with_metric(Metric::Es);
        let m = sft_select(&table(scores), &spec).unwrap();
        assert_eq!(m.selected, ["d"]);
        assert_eq!(m.params["metric"], json!("es"));
    }

    fn rft_score(query: &str, id: &str, hes: f64, correct: bool) -> SampleScore {
        SampleScore {
            query_id: query.into(),
            correct: Some(correct),
            ..score(id, hes)
        }
    }

    #[test]
    fn per_query_top_k() {
        let mut scores: Vec<SampleScore> = [4.0, 9.0, 1.0, 7.0, 3.0]
            .iter()
            .enumerate()
            .map(|(i, &h)| rft_score("q1", &format!("s{i}"), h, true))
            .collect();
        scores.push(rft_score("q1", "wrong", 100.0, false));
        let m = rft_per_query_select(&table(scores), 2).unwrap();
        assert_eq!(m.selected, ["s1", "s3"]);
        assert_eq!(m.params["budget"], json!(2));
    }

    #[test]
    fn per_query_scarcity_and_empty_queries() {
        let scores = vec![
            rft_score("q1", "a", 1.0, true),
            rft_score("q1", "b", 2.0, false),
            rft_score("q2", "c", 5.0, false),
        ];
        let m = rft_per_query_select(&table(scores), 2).unwrap();
        assert_eq!(m.selected, ["a"]);
        assert_eq!(m.params["per_query_counts"], json!({"q1": 1, "q2": 0}));
    }

    #[test]
    fn global_top_n_and_default_budget() {
        let pool: Vec<SampleScore> = (1..=6).map(|i| rft_score(&format!("q{i}"), &format!("s{i}"), i as f64, true)).collect();
        let t = table(pool.clone());
        let m = rft_global_select(&t, Some(3), None).unwrap();
        assert_eq!(m.selected, ["s6", "s5", "s4"]);
        assert_eq!(m.threshold, Some(4.0));
        let all = rft_global_select(&t, Some(50), None).unwrap();
        assert_eq!(all.selected.len(), 6);

        // |Y+| = {5, 1, 0} with k = 2 gives N = 3.
        let mut scores = Vec::new();
        for i in 0..5 {
            scores.push(rft_score("qa", &format!("a{i}"), i as f64, true));
        }
        scores.push(rft_score("qb", "b0", 0.5, true));
        scores.push(rft_score("qc", "c0", 0.5, false));
        let t = table(scores);
        assert_eq!(per_query_budget(&t, 2).unwrap(), 3);
        let m = rft_global_select(&t, None, Some(2)).unwrap();
        assert_eq!(m.selected, ["a4", "a3", "a2"]);
        assert_eq!(m.params["budget_source"], json!("per_query_equivalent"));
    }

    #[test]
    fn rft_requires_labels_and_valid_k() {
        let t = five();
        assert!(matches!(rft_per_query_select(&t, 2), Err(SelectionError::MissingCorrectLabel(_))));
        let spec = RftSpec {
            candidates: Some(4),
            ..RftSpec::per_query(8)
        };
        assert!(matches!(rft_select(&t, &spec), Err(SelectionError::InvalidSpec(_))));
        assert!(matches!(rft_per_query_select(&t, 0), Err(SelectionError::InvalidSpec(_))));
    }

    #[test]
    fn strata_split_by_length() {
        let scores: Vec<SampleScore> = (1..=9)
            .rev()
            .map(|n| SampleScore {
                n_tokens: n,
                ..score(&format!("s{n}"), n as f64)
            })
            .collect();
        let strata = length_strata(&scores, 3);
        let lens: Vec<Vec<usize>> = strata.iter().map(|s| s.iter().map(|x| x.n_tokens).collect()).collect();
        assert_eq!(lens, vec![vec![1, 2, 3], vec![4, 5, 6], vec![7, 8, 9]]);

        let t = table(scores);
        let spec = SelectionSpec::new(SelectionMode::HighestHes, Budget::Ratio(0.2));
        let one = stratified_select(&t, 1, &spec).unwrap();
        let flat = sft_select(&t, &spec).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!((one[0].selected.clone(), one[0].threshold), (flat.selected, flat.threshold));

        let per = stratified_select(&t, 3, &spec).unwrap();
        assert_eq!(per.iter().map(|m| m.selected.clone()).collect::<Vec<_>>(), [["s3"], ["s6"], ["s9"]]);
        assert_eq!(per[2].params["stratum"], json!(2));
        assert!(matches!(stratified_select(&t, 0, &spec), Err(SelectionError::InvalidSpec(_))));
    }

    #[test]
    fn stratum_highest_and_lowest_disjoint() {
        let t = table((0..30).map(|i| SampleScore { n_tokens: 1 + i % 7, ..score(&format!("s{i:02}"), (i * 7 % 11) as f64) }).collect());
        let hi = stratified_select(&t, 3, &SelectionSpec::new(SelectionMode::HighestHes, Budget::Ratio(0.2))).unwrap();
        let lo = stratified_select(&t, 3, &SelectionSpec::new(SelectionMode::LowestHes, Budget::Ratio(0.2))).unwrap();
        for (h, l) in hi.iter().zip(&lo) {
            assert!(h.selected.iter().all(|id| !l.selected.contains(id)));
        }
    }

    #[test]
    fn replay_reproduces_every_strategy() {
        let t = table(
            (0..24)
                .map(|i| SampleScore {
                    query_id: format!("q{}", i % 4),
                    correct: Some(i % 3 != 0),
                    difficulty: Some((i % 10) as f64 / 10.0),
                    n_tokens: 5 + i % 9,
                    ..score(&format!("s{i:02}"), (i * 5 % 13) as f64)
                })
                .collect(),
        );
        let mut manifests = vec![
            sft_select(&t, &SelectionSpec::new(SelectionMode::HighestHes, Budget::Ratio(0.3))).unwrap(),
            sft_select(&t, &SelectionSpec::new(SelectionMode::Random, Budget::Count(5)).with_seed(11)).unwrap(),
            sft_select(&t, &SelectionSpec::new(SelectionMode::Difficulty, Budget::Ratio(0.5)).with_metric(Metric::Es)).unwrap(),
            rft_per_query_select(&t, 2).unwrap(),
            rft_global_select(&t, None, Some(3)).unwrap(),
            rft_global_select(&t, Some(4), None).unwrap(),
        ];
        manifests.extend(stratified_select(&t, 3, &SelectionSpec::new(SelectionMode::Length, Budget::Ratio(0.25))).unwrap());
        for m in &manifests {
            let json = serde_json::to_string(m).unwrap();
            let back: SelectionManifest = serde_json::from_str(&json).unwrap();
            assert_eq!(&replay(&t, &back).unwrap(), m, "{}", m.strategy);
        }
    }
}
