//! Sparse binary person × concept matrices over a frozen vocabulary.

use std::borrow::Borrow;
use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rayon::prelude::*;

use crate::cohort::CohortMember;
use crate::error::{Error, Result};
use crate::event_store::{ConceptId, EventStore, PersonId};
use crate::io::{create_csv, sha256_hex};

/// Sorted concept ids and their column positions.
#[derive(Debug, Clone)]
pub struct FeatureVocabulary {
    concepts: Vec<ConceptId>,
    index: HashMap<ConceptId, u32>,
    fingerprint: String,
}

impl PartialEq for FeatureVocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.concepts == other.concepts
    }
}

impl FeatureVocabulary {
    pub fn new(concepts: impl IntoIterator<Item = ConceptId>) -> Self {
        let set: BTreeSet<ConceptId> = concepts.into_iter().collect();
        let concepts: Vec<ConceptId> = set.into_iter().collect();
        let index = concepts
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i as u32))
            .collect();
        let joined: Vec<String> = concepts.iter().map(u64::to_string).collect();
        let fingerprint = sha256_hex(joined.join(",").as_bytes())[..16].to_string();
        Self {
            concepts,
            index,
            fingerprint,
        }
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn concepts(&self) -> &[ConceptId] {
        &self.concepts
    }

    pub fn column(&self, concept: ConceptId) -> Option<usize> {
        self.index.get(&concept).map(|&c| c as usize)
    }

    pub fn concept_at(&self, column: usize) -> ConceptId {
        self.concepts[column]
    }

    /// Short content hash identifying this vocabulary.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }
}

/// Rows hold the sorted, distinct set columns of each member.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: Vec<Vec<u32>>,
    n_cols: usize,
    labels: Vec<bool>,
    person_ids: Vec<PersonId>,
    vocab_fingerprint: String,
}

impl FeatureMatrix {
    /// Builds a matrix from explicit rows of column indices (any order, duplicates collapse).
    pub fn from_rows(
        rows: Vec<Vec<u32>>,
        vocab: &FeatureVocabulary,
        labels: Vec<bool>,
        person_ids: Vec<PersonId>,
    ) -> Result<Self> {
        if rows.len() != labels.len() || rows.len() != person_ids.len() {
            return Err(Error::invalid("rows, labels and person ids differ in length"));
        }
        let n_cols = vocab.len();
        let rows = rows
            .into_iter()
            .map(|mut r| {
                r.sort_unstable();
                r.dedup();
                match r.last() {
                    Some(&c) if c as usize >= n_cols => Err(Error::invalid(format!(
                        "column {c} outside vocabulary of {n_cols}"
                    ))),
                    _ => Ok(r),
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            rows,
            n_cols,
            labels,
            person_ids,
            vocab_fingerprint: vocab.fingerprint().to_string(),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<u32>] {
        &self.rows
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn person_ids(&self) -> &[PersonId] {
        &self.person_ids
    }

    pub fn vocab_fingerprint(&self) -> &str {
        &self.vocab_fingerprint
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.rows[row].binary_search(&(col as u32)).is_ok()
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// Per-column fraction of rows with the feature set.
    pub fn column_means(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.n_cols];
        for r in &self.rows {
            for &c in r {
                sums[c as usize] += 1.0;
            }
        }
        let n = self.rows.len().max(1) as f64;
        sums.iter_mut().for_each(|s| *s /= n);
        sums
    }

    /// Sub-matrix of the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            n_cols: self.n_cols,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            person_ids: indices.iter().map(|&i| self.person_ids[i]).collect(),
            vocab_fingerprint: self.vocab_fingerprint.clone(),
        }
    }

    /// Writes `features.csv` (row,col,value triplets) and `vocab.csv` (col,concept_id).
    pub fn dump(&self, vocab: &FeatureVocabulary, dir: &Path) -> Result<()> {
        let path = dir.join("features.csv");
        let mut w = create_csv(&path)?;
        w.write_record(["row", "col", "value"])?;
        for (i, r) in self.rows.iter().enumerate() {
            for c in r {
                w.write_record([i.to_string(), c.to_string(), "1".into()])?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        let path = dir.join("vocab.csv");
        let mut w = create_csv(&path)?;
        w.write_record(["col", "concept_id"])?;
        for (i, c) in vocab.concepts().iter().enumerate() {
            w.write_record([i.to_string(), c.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }
}

fn pre_index_concepts<'a>(
    member: &CohortMember,
    store: &'a EventStore,
) -> impl Iterator<Item = ConceptId> + 'a {
    let events = store.conditions(member.person_id);
    let end = events.partition_point(|e| e.date < member.index_date);
    events[..end].iter().map(|e| e.concept_id)
}

/// All condition concepts occurring strictly before any member's index date.
pub fn build_vocabulary<M: Borrow<CohortMember>>(
    members: &[M],
    store: &EventStore,
) -> Result<FeatureVocabulary> {
    if members.is_empty() {
        return Err(Error::invalid("cannot build a vocabulary from zero members"));
    }
    let mut set = BTreeSet::new();
    for m in members {
        set.extend(pre_index_concepts(m.borrow(), store));
    }
    Ok(FeatureVocabulary::new(set))
}

/// One row per member: the vocabulary columns of its pre-index conditions.
pub fn vectorize<M: Borrow<CohortMember> + Sync>(
    members: &[M],
    store: &EventStore,
    vocab: &FeatureVocabulary,
) -> FeatureMatrix {
    let rows: Vec<Vec<u32>> = members
        .par_iter()
        .map(|m| {
            let mut r: Vec<u32> = pre_index_concepts(m.borrow(), store)
                .filter_map(|c| vocab.column(c).map(|i| i as u32))
                .collect();
            r.sort_unstable();
            r.dedup();
            r
        })
        .collect();
    FeatureMatrix {
        rows,
        n_cols: vocab.len(),
        labels: members.iter().map(|m| m.borrow().is_case()).collect(),
        person_ids: members.iter().map(|m| m.borrow().person_id).collect(),
        vocab_fingerprint: vocab.fingerprint().to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{Horizon, Label};
    use crate::event_store::{Concept, ConceptDomain, Person, Sex, StoreParts};
    use chrono::NaiveDate;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn store(conditions: Vec<(PersonId, ConceptId, NaiveDate)>) -> EventStore {
        EventStore::from_parts(StoreParts {
            persons: (1..=3)
                .map(|id| Person {
                    person_id: id,
                    birth_date: d("1950-01-01"),
                    sex: Sex::Unknown,
                    race: String::new(),
                    ethnicity: String::new(),
                })
                .collect(),
            concepts: [10, 20, 30, 999]
                .map(|id| Concept { concept_id: id, name: String::new(), domain: ConceptDomain::Condition })
                .to_vec(),
            conditions,
            ..Default::default()
        })
        .unwrap()
    }

    fn member(pid: PersonId, index: &str, case: bool) -> CohortMember {
        CohortMember {
            person_id: pid,
            label: if case { Label::Case } else { Label::Control },
            cancer_type: None,
            diagnosis_date: None,
            index_date: d(index),
            horizon: Horizon::ONE_YEAR,
            ambiguous_type: false,
        }
    }

    #[test]
    fn vocabulary_is_sorted_union_of_pre_index_concepts() {
        let s = store(vec![
            (1, 20, d("2010-01-01")),
            (1, 10, d("2011-01-01")),
            (2, 30, d("2010-01-01")),
            (2, 20, d("2012-01-01")),
            (3, 999, d("2020-01-01")),
        ]);
        let members = [member(1, "2020-01-01", true), member(2, "2020-01-01", false), member(3, "2020-01-01", false)];
        let v = build_vocabulary(&members, &s).unwrap();
        // Person 3's only event is on the index date.
        assert_eq!(v.concepts(), &[10, 20, 30]);
        let empty: [CohortMember; 0] = [];
        assert!(build_vocabulary(&empty, &s).is_err());
    }

    #[test]
    fn vectorize_collapses_and_ignores_out_of_vocabulary() {
        let s = store(vec![
            (1, 20, d("2010-01-01")),
            (1, 20, d("2011-01-01")),
            (1, 999, d("2011-01-01")),
        ]);
        let vocab = FeatureVocabulary::new([10, 20, 30]);
        let members = [member(1, "2020-01-01", true), member(2, "2020-01-01", false)];
        let m = vectorize(&members, &s, &vocab);
        assert_eq!(m.row(0), &[1]);
        assert!(m.row(1).is_empty());
        assert_eq!(m.labels(), &[true, false]);
        assert_eq!(m.n_cols(), 3);
    }

    #[test]
    fn fingerprint_tracks_content() {
        assert_eq!(FeatureVocabulary::new([3, 1, 2]).fingerprint(), FeatureVocabulary::new([1, 2, 3]).fingerprint());
        assert_ne!(FeatureVocabulary::new([1, 2]).fingerprint(), FeatureVocabulary::new([1, 3]).fingerprint());
    }

    #[test]
    fn dump_writes_triplets() {
        let vocab = FeatureVocabulary::new([10, 20]);
        let m = FeatureMatrix::from_rows(vec![vec![1], vec![0, 1]], &vocab, vec![true, false], vec![1, 2]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.dump(&vocab, dir.path()).unwrap();
        let f = std::fs::read_to_string(dir.path().join("features.csv")).unwrap();
        assert_eq!(f, "row,col,value\n0,1,1\n1,0,1\n1,1,1\n");
        let v = std::fs::read_to_string(dir.path().join("vocab.csv")).unwrap();
        assert_eq!(v, "col,concept_id\n0,10\n1,20\n");
    }
}
