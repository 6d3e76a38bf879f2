//! Baseline risk models, fold assignment and score files.

mod folds;
mod gbdt;
mod logreg;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use folds::{stratified_kfold, FoldAssignment};
pub use gbdt::{grow_tree, train_gbdt, GbdtConfig, Node, Tree, TreeEnsemble};
pub use logreg::{log_loss, logistic_objective, logit, sigmoid, train_logreg, LogRegConfig, LogRegModel, Objective};

use crate::error::{Error, Result};
use crate::event_store::{ConceptId, PersonId};
use crate::features::{FeatureMatrix, FeatureVocabulary};
use crate::io::{create_csv, CsvTable};

/// Version written into serialized model files.
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RiskModel {
    LogReg(LogRegModel),
    Gbdt(TreeEnsemble),
}

impl RiskModel {
    pub fn vocab_fingerprint(&self) -> &str {
        match self {
            RiskModel::LogReg(m) => &m.vocab_fingerprint,
            RiskModel::Gbdt(m) => &m.vocab_fingerprint,
        }
    }

    fn check(&self, matrix: &FeatureMatrix) -> Result<()> {
        if self.vocab_fingerprint() != matrix.vocab_fingerprint() {
            return Err(Error::VocabularyMismatch {
                expected: self.vocab_fingerprint().to_string(),
                found: matrix.vocab_fingerprint().to_string(),
            });
        }
        Ok(())
    }

    /// Log-odds per row.
    pub fn predict_margin(&self, matrix: &FeatureMatrix) -> Result<Vec<f64>> {
        self.check(matrix)?;
        Ok(match self {
            RiskModel::LogReg(m) => matrix.rows().iter().map(|r| m.margin(r)).collect(),
            RiskModel::Gbdt(m) => matrix.rows().iter().map(|r| m.margin(r)).collect(),
        })
    }

    /// Probability per row.
    pub fn predict(&self, matrix: &FeatureMatrix) -> Result<Vec<f64>> {
        Ok(self.predict_margin(matrix)?.into_iter().map(sigmoid).collect())
    }
}

/// On-disk model: format version, vocabulary and its hash, and the model body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub vocab_hash: String,
    pub vocabulary: Vec<ConceptId>,
    pub model: RiskModel,
}

impl ModelFile {
    pub fn new(model: RiskModel, vocab: &FeatureVocabulary) -> Self {
        Self {
            format_version: MODEL_FORMAT_VERSION,
            vocab_hash: vocab.fingerprint().to_string(),
            vocabulary: vocab.concepts().to_vec(),
            model,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported model format version {}",
                file.format_version
            )));
        }
        let vocab = FeatureVocabulary::new(file.vocabulary.iter().copied());
        if vocab.fingerprint() != file.vocab_hash || file.model.vocab_fingerprint() != file.vocab_hash {
            return Err(Error::VocabularyMismatch {
                expected: file.vocab_hash.clone(),
                found: vocab.fingerprint().to_string(),
            });
        }
        Ok(file)
    }

    pub fn vocabulary(&self) -> FeatureVocabulary {
        FeatureVocabulary::new(self.vocabulary.iter().copied())
    }
}

/// Reads `scores.csv(person_id,score)` and aligns it to `members`.
///
/// Every member must appear exactly once; rows for other persons are ignored.
/// Scores may be on any scale, since evaluation is rank-based.
pub fn ingest_external_scores(path: &Path, members: &[PersonId]) -> Result<Vec<f64>> {
    let wanted: BTreeSet<PersonId> = members.iter().copied().collect();
    let mut found: BTreeMap<PersonId, f64> = BTreeMap::new();
    let mut duplicates = BTreeSet::new();
    let mut t = CsvTable::open(path, &["person_id", "score"])?;
    t.for_each(|row| {
        let pid: PersonId = row.parse("person_id")?;
        let score: f64 = row.parse("score")?;
        if !score.is_finite() {
            return Err(row.malformed("score", "score must be finite"));
        }
        if wanted.contains(&pid) && found.insert(pid, score).is_some() {
            duplicates.insert(pid);
        }
        Ok(())
    })?;
    if !duplicates.is_empty() {
        return Err(Error::ScoreCoverage {
            path: path.to_path_buf(),
            problem: "duplicate rows",
            persons: duplicates.into_iter().collect(),
        });
    }
    let missing: Vec<PersonId> = wanted.iter().filter(|p| !found.contains_key(p)).copied().collect();
    if !missing.is_empty() {
        return Err(Error::ScoreCoverage {
            path: path.to_path_buf(),
            problem: "missing scores",
            persons: missing,
        });
    }
    Ok(members.iter().map(|p| found[p]).collect())
}

pub fn write_scores_csv(path: &Path, person_ids: &[PersonId], scores: &[f64]) -> Result<()> {
    let mut w = create_csv(path)?;
    w.write_record(["person_id", "score"])?;
    for (p, s) in person_ids.iter().zip(scores) {
        w.write_record([p.to_string(), s.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: Vec<Vec<u32>>, labels: Vec<bool>, vocab: &FeatureVocabulary) -> FeatureMatrix {
        let ids = (1..=rows.len() as u64).collect();
        FeatureMatrix::from_rows(rows, vocab, labels, ids).unwrap()
    }

    #[test]
    fn intercept_only_model_scores_half() {
        let vocab = FeatureVocabulary::new([1, 2]);
        let m = RiskModel::LogReg(LogRegModel {
            weights: vec![0.0, 0.0],
            intercept: 0.0,
            l2: 0.0,
            epochs_run: 0,
            final_loss: 0.0,
            loss_history: vec![],
            vocab_fingerprint: vocab.fingerprint().into(),
        });
        let x = matrix(vec![vec![0], vec![]], vec![true, false], &vocab);
        assert_eq!(m.predict(&x).unwrap(), vec![0.5, 0.5]);
    }

    fn ensemble(trees: Vec<Tree>, vocab: &FeatureVocabulary) -> TreeEnsemble {
        TreeEnsemble {
            trees,
            learning_rate: 0.1,
            base_score: -1.5,
            n_features: vocab.len(),
            loss_history: vec![],
            vocab_fingerprint: vocab.fingerprint().into(),
        }
    }

    #[test]
    fn empty_ensemble_scores_sigmoid_of_base() {
        let vocab = FeatureVocabulary::new([1, 2]);
        let m = RiskModel::Gbdt(ensemble(vec![], &vocab));
        let x = matrix(vec![vec![0, 1], vec![]], vec![true, false], &vocab);
        assert_eq!(m.predict(&x).unwrap(), vec![sigmoid(-1.5); 2]);
    }

    #[test]
    fn adding_a_positive_tree_raises_every_score() {
        let vocab = FeatureVocabulary::new([1, 2]);
        let split = Tree {
            nodes: vec![
                Node::Split { feature: 1, left: 1, right: 2, cover: 2.0 },
                Node::Leaf { value: -0.3, cover: 1.0 },
                Node::Leaf { value: 0.7, cover: 1.0 },
            ],
        };
        let x = matrix(vec![vec![0, 1], vec![], vec![1]], vec![true, false, true], &vocab);
        let before = RiskModel::Gbdt(ensemble(vec![split.clone()], &vocab)).predict(&x).unwrap();
        let c = 0.25;
        let bump = Tree {
            nodes: vec![
                Node::Split { feature: 0, left: 1, right: 2, cover: 2.0 },
                Node::Leaf { value: c, cover: 1.0 },
                Node::Leaf { value: c, cover: 1.0 },
            ],
        };
        let after = RiskModel::Gbdt(ensemble(vec![split, bump], &vocab)).predict(&x).unwrap();
        assert!(before.iter().zip(&after).all(|(b, a)| a > b));
    }

    #[test]
    fn vocabulary_mismatch_is_rejected() {
        let train_vocab = FeatureVocabulary::new([1, 2]);
        let other = FeatureVocabulary::new([1, 3]);
        let m = RiskModel::Gbdt(ensemble(vec![], &train_vocab));
        let x = matrix(vec![vec![]], vec![false], &other);
        assert!(matches!(m.predict(&x), Err(Error::VocabularyMismatch { .. })));
    }

    #[test]
    fn model_file_round_trip() {
        let vocab = FeatureVocabulary::new([10, 20]);
        let x = matrix(vec![vec![0], vec![1], vec![], vec![0, 1]], vec![true, false, false, true], &vocab);
        let e = train_gbdt(&x, &GbdtConfig { trees: 3, max_depth: 2, min_child_weight: 0.0, ..Default::default() }).unwrap();
        let file = ModelFile::new(RiskModel::Gbdt(e), &vocab);
        let back = ModelFile::from_json(&file.to_json()).unwrap();
        assert_eq!(back, file);
        assert_eq!(back.vocabulary(), vocab);
    }

    #[test]
    fn external_scores_align_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        std::fs::write(&path, "person_id,score\n3,-2.5\n1,0.9\n2,4.0\n99,0.1\n").unwrap();
        assert_eq!(ingest_external_scores(&path, &[1, 2, 3]).unwrap(), vec![0.9, 4.0, -2.5]);
        match ingest_external_scores(&path, &[1, 2, 3, 4]) {
            Err(Error::ScoreCoverage { persons, .. }) => assert_eq!(persons, vec![4]),
            other => panic!("unexpected {other:?}"),
        }
        std::fs::write(&path, "person_id,score\n1,0.9\n1,0.8\n").unwrap();
        assert!(matches!(ingest_external_scores(&path, &[1]), Err(Error::ScoreCoverage { .. })));
        std::fs::write(&path, "person_id,score\n1,NaN\n").unwrap();
        assert!(ingest_external_scores(&path, &[1]).is_err());
    }
}
