//! Selection manifests: the audited record of a selection run.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::corpus::CorpusError;
use crate::entropy::SampleScore;
use crate::scores::ScoreTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionManifest {
    pub strategy: String,
    pub params: BTreeMap<String, Value>,
    /// Metric value of the last admitted sample, for threshold-based strategies.
    pub threshold: Option<f64>,
    pub selected: Vec<String>,
    pub rejected_count: usize,
    pub corpus_digest: String,
    pub seed: Option<u64>,
}

impl SelectionManifest {
    pub fn check_digest(&self, table: &ScoreTable) -> Result<(), CorpusError> {
        if self.corpus_digest != table.digest() {
            return Err(CorpusError::DigestMismatch {
                expected: self.corpus_digest.clone(),
                actual: table.digest().to_string(),
            });
        }
        Ok(())
    }

    /// Resolves the selected ids against `table`, which must be the score
    /// file the manifest was computed from.
    pub fn apply<'a>(&self, table: &'a ScoreTable) -> Result<Vec<&'a SampleScore>, CorpusError> {
        self.check_digest(table)?;
        let index = table.index();
        self.selected
            .iter()
            .map(|id| index.get(id.as_str()).copied().ok_or_else(|| CorpusError::UnknownSampleId { id: id.clone() }))
            .collect()
    }
}

pub fn write_manifest(manifest: &SelectionManifest, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, manifest).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<SelectionManifest, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    serde_json::from_reader(reader).map_err(|e| CorpusError::from_json(e, 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::MetricConfig;

    fn table(ids: &[&str]) -> ScoreTable {
        let scores = ids
            .iter()
            .map(|id| SampleScore {
                sample_id: id.to_string(),
                query_id: "q".into(),
                correct: None,
                difficulty: None,
                reward: None,
                n_tokens: 1,
                es: 1.0,
                avg_e: 1.0,
                hes_rel: 1.0,
                hes_abs: 0.0,
                avg_he: 1.0,
                high_count: 1,
                high_indices: None,
                config: MetricConfig::default(),
            })
            .collect();
        ScoreTable::from_scores(scores).unwrap()
    }

    fn manifest(digest: &str) -> SelectionManifest {
        let mut params = BTreeMap::new();
        params.insert("ratio".to_string(), Value::from(0.2));
        params.insert("mode".to_string(), Value::from("highest_hes"));
        SelectionManifest {
            strategy: "sft".into(),
            params,
            threshold: Some(5.5),
            selected: vec!["b".into()],
            rejected_count: 1,
            corpus_digest: digest.to_string(),
            seed: Some(u64::MAX),
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let m = manifest("sha256:00");
        write_manifest(&m, &path).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), m);
    }

    #[test]
    fn apply_checks_digest() {
        let t = table(&["a", "b"]);
        let m = manifest(t.digest());
        assert_eq!(m.apply(&t).unwrap()[0].sample_id, "b");
        let other = table(&["a", "b", "c"]);
        assert!(matches!(m.apply(&other), Err(CorpusError::DigestMismatch { .. })));
    }

    #[test]
    fn apply_rejects_unknown_ids() {
        let t = table(&["a"]);
        let m = manifest(t.digest());
        assert!(matches!(m.apply(&t), Err(CorpusError::UnknownSampleId { .. })));
    }
}
