//! Shapley attributions for the baseline models and cross-fold rank aggregation.
//!
//! Tree attributions use the path-dependent tree algorithm: the value of a
//! coalition S is the expected tree output when features in S follow the
//! instance and all other splits are averaged by training cover. Attributions
//! are on the margin (log-odds) scale.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_store::{ConceptId, EventStore};
use crate::features::{FeatureMatrix, FeatureVocabulary};
use crate::io::create_csv;
use crate::learners::{LogRegModel, Node, Tree, TreeEnsemble};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionVector {
    /// One signed contribution per vocabulary column.
    pub contributions: Vec<f64>,
    pub base_value: f64,
    pub margin: f64,
}

impl AttributionVector {
    /// |base + Σφ − margin|.
    pub fn additivity_error(&self) -> f64 {
        (self.base_value + self.contributions.iter().sum::<f64>() - self.margin).abs()
    }
}

#[derive(Debug, Clone, Copy)]
struct PathElement {
    feature: u32,
    zero: f64,
    one: f64,
    weight: f64,
}

const NO_FEATURE: u32 = u32::MAX;

fn extend(path: &mut Vec<PathElement>, zero: f64, one: f64, feature: u32) {
    let depth = path.len();
    path.push(PathElement {
        feature,
        zero,
        one,
        weight: if depth == 0 { 1.0 } else { 0.0 },
    });
    let denom = (depth + 1) as f64;
    for i in (0..depth).rev() {
        path[i + 1].weight += one * path[i].weight * (i + 1) as f64 / denom;
        path[i].weight = zero * path[i].weight * (depth - i) as f64 / denom;
    }
}

fn unwind(path: &mut Vec<PathElement>, idx: usize) {
    let depth = path.len() - 1;
    let (one, zero) = (path[idx].one, path[idx].zero);
    let denom = (depth + 1) as f64;
    let mut next_one = path[depth].weight;
    for i in (0..depth).rev() {
        if one != 0.0 {
            let tmp = path[i].weight;
            path[i].weight = next_one * denom / ((i + 1) as f64 * one);
            next_one = tmp - path[i].weight * zero * (depth - i) as f64 / denom;
        } else {
            path[i].weight = path[i].weight * denom / (zero * (depth - i) as f64);
        }
    }
    for i in idx..depth {
        path[i].feature = path[i + 1].feature;
        path[i].zero = path[i + 1].zero;
        path[i].one = path[i + 1].one;
    }
    path.pop();
}

fn unwound_sum(path: &[PathElement], idx: usize) -> f64 {
    let depth = path.len() - 1;
    let (one, zero) = (path[idx].one, path[idx].zero);
    let denom = (depth + 1) as f64;
    let mut next_one = path[depth].weight;
    let mut total = 0.0;
    for i in (0..depth).rev() {
        if one != 0.0 {
            let tmp = next_one * denom / ((i + 1) as f64 * one);
            total += tmp;
            next_one = path[i].weight - tmp * zero * (depth - i) as f64 / denom;
        } else {
            total += path[i].weight / zero / ((depth - i) as f64 / denom);
        }
    }
    total
}

/// Fractions of the parent's cover flowing to (left, right).
pub(crate) fn child_fractions(tree: &Tree, left: u32, right: u32) -> (f64, f64) {
    let cl = tree.nodes[left as usize].cover();
    let cr = tree.nodes[right as usize].cover();
    let total = cl + cr;
    if total > 0.0 {
        (cl / total, cr / total)
    } else {
        (0.5, 0.5)
    }
}

#[allow(clippy::too_many_arguments)]
fn recurse(
    tree: &Tree,
    node: usize,
    row: &[u32],
    phi: &mut [f64],
    parent_path: &[PathElement],
    zero: f64,
    one: f64,
    feature: u32,
) {
    let mut path = parent_path.to_vec();
    extend(&mut path, zero, one, feature);
    match &tree.nodes[node] {
        Node::Leaf { value, .. } => {
            for i in 1..path.len() {
                let w = unwound_sum(&path, i);
                let el = path[i];
                phi[el.feature as usize] += w * (el.one - el.zero) * value;
            }
        }
        Node::Split { feature: f, left, right, .. } => {
            let present = row.binary_search(f).is_ok();
            let (fl, fr) = child_fractions(tree, *left, *right);
            let (hot, cold, hot_frac, cold_frac) = if present {
                (*right, *left, fr, fl)
            } else {
                (*left, *right, fl, fr)
            };
            let mut incoming_zero = 1.0;
            let mut incoming_one = 1.0;
            if let Some(k) = (1..path.len()).find(|&k| path[k].feature == *f) {
                incoming_zero = path[k].zero;
                incoming_one = path[k].one;
                unwind(&mut path, k);
            }
            recurse(tree, hot as usize, row, phi, &path, incoming_zero * hot_frac, incoming_one, *f);
            recurse(tree, cold as usize, row, phi, &path, incoming_zero * cold_frac, 0.0, *f);
        }
    }
}

/// Cover-weighted mean leaf value of a tree.
pub fn expected_value(tree: &Tree) -> f64 {
    fn go(tree: &Tree, i: usize) -> f64 {
        match &tree.nodes[i] {
            Node::Leaf { value, .. } => *value,
            Node::Split { left, right, .. } => {
                let (fl, fr) = child_fractions(tree, *left, *right);
                fl * go(tree, *left as usize) + fr * go(tree, *right as usize)
            }
        }
    }
    go(tree, 0)
}

/// Attributions for one sparse row (sorted column indices).
pub fn tree_shap_row(ensemble: &TreeEnsemble, row: &[u32]) -> AttributionVector {
    let mut phi = vec![0.0; ensemble.n_features];
    let mut base = ensemble.base_score;
    for tree in &ensemble.trees {
        base += expected_value(tree);
        if matches!(tree.nodes[0], Node::Split { .. }) {
            recurse(tree, 0, row, &mut phi, &[], 1.0, 1.0, NO_FEATURE);
        }
    }
    AttributionVector {
        contributions: phi,
        base_value: base,
        margin: ensemble.margin(row),
    }
}

/// Exact path-dependent Shapley values for row `i` of `matrix`.
pub fn tree_shap(ensemble: &TreeEnsemble, matrix: &FeatureMatrix, i: usize) -> Result<AttributionVector> {
    if ensemble.vocab_fingerprint != matrix.vocab_fingerprint() {
        return Err(Error::VocabularyMismatch {
            expected: ensemble.vocab_fingerprint.clone(),
            found: matrix.vocab_fingerprint().to_string(),
        });
    }
    Ok(tree_shap_row(ensemble, matrix.row(i)))
}

/// Linear attributions on the margin scale: φ_j = w_j·(x_j − mean_j).
pub fn linear_shap(model: &LogRegModel, row: &[u32], background_mean: &[f64]) -> Result<AttributionVector> {
    if background_mean.len() != model.weights.len() {
        return Err(Error::invalid(format!(
            "background has {} columns, model has {}",
            background_mean.len(),
            model.weights.len()
        )));
    }
    let mut contributions: Vec<f64> = model
        .weights
        .iter()
        .zip(background_mean)
        .map(|(w, m)| -w * m)
        .collect();
    for &c in row {
        let c = c as usize;
        if c >= contributions.len() {
            return Err(Error::invalid(format!("column {c} outside the model")));
        }
        contributions[c] = model.weights[c] * (1.0 - background_mean[c]);
    }
    let base_value = model.intercept
        + model
            .weights
            .iter()
            .zip(background_mean)
            .map(|(w, m)| w * m)
            .sum::<f64>();
    Ok(AttributionVector {
        contributions,
        base_value,
        margin: model.margin(row),
    })
}

/// Signed per-feature sums of attributions over the test rows of one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAttribution {
    pub concepts: Vec<ConceptId>,
    pub signed_sums: Vec<f64>,
}

impl FoldAttribution {
    pub fn from_vectors<'a>(
        vocab: &FeatureVocabulary,
        vectors: impl IntoIterator<Item = &'a AttributionVector>,
    ) -> Self {
        let mut sums = vec![0.0; vocab.len()];
        for v in vectors {
            for (s, c) in sums.iter_mut().zip(&v.contributions) {
                *s += c;
            }
        }
        Self {
            concepts: vocab.concepts().to_vec(),
            signed_sums: sums,
        }
    }

    /// Within-fold ranks (1 = largest signed sum), ties to the lower concept id.
    pub fn ranks(&self) -> BTreeMap<ConceptId, usize> {
        let mut order: Vec<usize> = (0..self.concepts.len()).collect();
        order.sort_by(|&a, &b| {
            self.signed_sums[b]
                .total_cmp(&self.signed_sums[a])
                .then(self.concepts[a].cmp(&self.concepts[b]))
        });
        order
            .into_iter()
            .enumerate()
            .map(|(rank, i)| (self.concepts[i], rank + 1))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFeature {
    pub concept_id: ConceptId,
    pub mean_rank: f64,
    pub fold_ranks: Vec<usize>,
    pub fold_sums: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRanking {
    pub features: Vec<RankedFeature>,
}

/// Averages within-fold ranks. A feature missing from a fold's vocabulary gets
/// that fold's worst rank + 1. Final order is ascending mean rank, ties to the
/// lower concept id.
pub fn aggregate_rankings(folds: &[FoldAttribution]) -> Result<FeatureRanking> {
    if folds.is_empty() {
        return Err(Error::invalid("no folds to aggregate"));
    }
    let all: BTreeSet<ConceptId> = folds.iter().flat_map(|f| f.concepts.iter().copied()).collect();
    let per_fold: Vec<(BTreeMap<ConceptId, usize>, BTreeMap<ConceptId, f64>)> = folds
        .iter()
        .map(|f| {
            let sums = f.concepts.iter().copied().zip(f.signed_sums.iter().copied()).collect();
            (f.ranks(), sums)
        })
        .collect();
    let mut features: Vec<RankedFeature> = all
        .into_iter()
        .map(|c| {
            let fold_ranks: Vec<usize> = per_fold
                .iter()
                .map(|(ranks, _)| ranks.get(&c).copied().unwrap_or(ranks.len() + 1))
                .collect();
            let mean_rank = fold_ranks.iter().sum::<usize>() as f64 / fold_ranks.len() as f64;
            RankedFeature {
                concept_id: c,
                mean_rank,
                fold_ranks,
                fold_sums: per_fold.iter().map(|(_, s)| s.get(&c).copied()).collect(),
            }
        })
        .collect();
    features.sort_by(|a, b| a.mean_rank.total_cmp(&b.mean_rank).then(a.concept_id.cmp(&b.concept_id)));
    Ok(FeatureRanking { features })
}

pub fn write_shap_summary(path: &Path, folds: &[FoldAttribution], store: &EventStore) -> Result<()> {
    let mut w = create_csv(path)?;
    w.write_record(["feature_concept_id", "concept_name", "fold", "signed_sum", "rank"])?;
    for (k, f) in folds.iter().enumerate() {
        let ranks = f.ranks();
        for (c, s) in f.concepts.iter().zip(&f.signed_sums) {
            let name = store.concept(*c).map(|x| x.name.clone()).unwrap_or_default();
            w.write_record([c.to_string(), name, k.to_string(), s.to_string(), ranks[c].to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_ranking(path: &Path, ranking: &FeatureRanking) -> Result<()> {
    let mut w = create_csv(path)?;
    w.write_record(["final_rank", "concept_id", "mean_rank"])?;
    for (i, f) in ranking.features.iter().enumerate() {
        w.write_record([(i + 1).to_string(), f.concept_id.to_string(), f.mean_rank.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stump(feature: u32, a: f64, b: f64, cover_left: f64, cover_right: f64) -> Tree {
        Tree {
            nodes: vec![
                Node::Split { feature, left: 1, right: 2, cover: cover_left + cover_right },
                Node::Leaf { value: a, cover: cover_left },
                Node::Leaf { value: b, cover: cover_right },
            ],
        }
    }

    fn ensemble(trees: Vec<Tree>, n_features: usize, base: f64) -> TreeEnsemble {
        TreeEnsemble {
            trees,
            learning_rate: 1.0,
            base_score: base,
            n_features,
            loss_history: vec![],
            vocab_fingerprint: String::new(),
        }
    }

    #[test]
    fn two_player_closed_form() {
        let (a, b) = (-0.4, 1.2);
        let e = ensemble(vec![stump(0, a, b, 5.0, 5.0)], 2, 0.0);
        let v = tree_shap_row(&e, &[0]);
        assert!((v.contributions[0] - (b - a) / 2.0).abs() < 1e-12);
        assert_eq!(v.contributions[1], 0.0);
        assert!((v.base_value - (a + b) / 2.0).abs() < 1e-12);
        assert!(v.additivity_error() < 1e-12);
    }

    #[test]
    fn empty_trees_give_zero_attributions() {
        let e = ensemble(vec![Tree::leaf(0.0, 10.0), Tree::leaf(0.0, 3.0)], 3, -2.0);
        let v = tree_shap_row(&e, &[0, 2]);
        assert!(v.contributions.iter().all(|&p| p == 0.0));
        assert_eq!(v.base_value, -2.0);
    }

    #[test]
    fn repeated_feature_on_path_keeps_additivity() {
        let t = Tree {
            nodes: vec![
                Node::Split { feature: 0, left: 1, right: 2, cover: 10.0 },
                Node::Split { feature: 1, left: 3, right: 4, cover: 6.0 },
                Node::Split { feature: 0, left: 5, right: 6, cover: 4.0 },
                Node::Leaf { value: 0.1, cover: 2.0 },
                Node::Leaf { value: -0.3, cover: 4.0 },
                Node::Leaf { value: 0.7, cover: 1.0 },
                Node::Leaf { value: 0.2, cover: 3.0 },
            ],
        };
        let e = ensemble(vec![t], 2, 0.5);
        for row in [vec![], vec![0], vec![1], vec![0, 1]] {
            assert!(tree_shap_row(&e, &row).additivity_error() < 1e-12);
        }
    }

    #[test]
    fn linear_shap_examples() {
        let model = LogRegModel {
            weights: vec![2.0, 0.0],
            intercept: 0.3,
            l2: 0.0,
            epochs_run: 0,
            final_loss: 0.0,
            loss_history: vec![],
            vocab_fingerprint: String::new(),
        };
        let v = linear_shap(&model, &[0], &[0.5, 0.3]).unwrap();
        assert_eq!(v.contributions, vec![1.0, 0.0]);
        assert!(v.additivity_error() < 1e-12);
        // Row equal to the background mean.
        let v = linear_shap(&model, &[0, 1], &[1.0, 1.0]).unwrap();
        assert!(v.contributions.iter().all(|&p| p == 0.0));
        let doubled = LogRegModel { weights: vec![4.0, 0.0], ..model.clone() };
        let v2 = linear_shap(&doubled, &[0], &[0.5, 0.3]).unwrap();
        assert_eq!(v2.contributions[0], 2.0);
        assert!(linear_shap(&model, &[0], &[0.5]).is_err());
    }

    fn fold(pairs: &[(ConceptId, f64)]) -> FoldAttribution {
        FoldAttribution {
            concepts: pairs.iter().map(|p| p.0).collect(),
            signed_sums: pairs.iter().map(|p| p.1).collect(),
        }
    }

    #[test]
    fn single_fold_order() {
        let r = aggregate_rankings(&[fold(&[(1, 5.0), (2, -2.0), (3, 0.0)])]).unwrap();
        let order: Vec<ConceptId> = r.features.iter().map(|f| f.concept_id).collect();
        assert_eq!(order, vec![1, 3, 2]);
    }

    #[test]
    fn symmetric_tie_breaks_on_concept_id() {
        let r = aggregate_rankings(&[fold(&[(7, 2.0), (4, 1.0)]), fold(&[(7, 1.0), (4, 2.0)])]).unwrap();
        assert_eq!(r.features[0].mean_rank, 1.5);
        assert_eq!(r.features[1].mean_rank, 1.5);
        assert_eq!(r.features[0].concept_id, 4);
    }

    #[test]
    fn missing_feature_gets_worst_rank_plus_one() {
        // Fold 0 has A, B; fold 1 has A only.
        let r = aggregate_rankings(&[fold(&[(1, 3.0), (2, 1.0)]), fold(&[(1, 1.0)])]).unwrap();
        let b = r.features.iter().find(|f| f.concept_id == 2).unwrap();
        assert_eq!(b.fold_ranks, vec![2, 2]);
        assert_eq!(b.fold_sums, vec![Some(1.0), None]);
        assert!(aggregate_rankings(&[]).is_err());
    }
}
