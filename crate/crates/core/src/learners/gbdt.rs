//! Second-order gradient boosting with logistic loss over binary features.
//!
//! Every split is an exact two-way partition on one binary column: rows
//! without the feature go left, rows with it go right. Split search only
//! visits columns present in the node, accumulating (G, H) for the "feature
//! set" side and deriving the other side from the node totals.

use serde::{Deserialize, Serialize};

use super::logreg::{log_loss, logit};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbdtConfig {
    pub trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub min_child_weight: f64,
    pub seed: u64,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        Self {
            trees: 200,
            max_depth: 6,
            learning_rate: 0.1,
            lambda: 1.0,
            min_child_weight: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Node {
    /// `left` is taken when the feature is absent, `right` when present.
    Split {
        feature: u32,
        left: u32,
        right: u32,
        cover: f64,
    },
    Leaf { value: f64, cover: f64 },
}

impl Node {
    pub fn cover(&self) -> f64 {
        match self {
            Node::Split { cover, .. } | Node::Leaf { cover, .. } => *cover,
        }
    }
}

/// Nodes in arena order; node 0 is the root. Leaf values already include the learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf(value: f64, cover: f64) -> Self {
        Self {
            nodes: vec![Node::Leaf { value, cover }],
        }
    }

    pub fn predict(&self, row: &[u32]) -> f64 {
        let mut idx = 0usize;
        loop {
            match &self.nodes[idx] {
                Node::Leaf { value, .. } => return *value,
                Node::Split { feature, left, right, .. } => {
                    idx = if row.binary_search(feature).is_ok() {
                        *right as usize
                    } else {
                        *left as usize
                    };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, *left as usize).max(go(t, *right as usize)),
            }
        }
        go(self, 0)
    }

    /// Distinct split features, ascending.
    pub fn features(&self) -> Vec<u32> {
        let mut f: Vec<u32> = self
            .nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                Node::Leaf { .. } => None,
            })
            .collect();
        f.sort_unstable();
        f.dedup();
        f
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsemble {
    pub trees: Vec<Tree>,
    pub learning_rate: f64,
    pub base_score: f64,
    pub n_features: usize,
    /// Training loss at the base score and after each round.
    pub loss_history: Vec<f64>,
    pub vocab_fingerprint: String,
}

impl TreeEnsemble {
    pub fn margin(&self, row: &[u32]) -> f64 {
        self.base_score + self.trees.iter().map(|t| t.predict(row)).sum::<f64>()
    }
}

struct Builder<'a> {
    matrix: &'a FeatureMatrix,
    grad: &'a [f64],
    hess: &'a [f64],
    config: &'a GbdtConfig,
    g_set: Vec<f64>,
    h_set: Vec<f64>,
    n_set: Vec<u32>,
    seen: Vec<bool>,
    touched: Vec<u32>,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn build(&mut self, rows: Vec<u32>, depth: usize) -> u32 {
        let (g, h) = rows.iter().fold((0.0, 0.0), |(g, h), &r| {
            (g + self.grad[r as usize], h + self.hess[r as usize])
        });
        let id = self.nodes.len() as u32;
        let lambda = self.config.lambda;
        let leaf = Node::Leaf {
            value: -self.config.learning_rate * g / (h + lambda),
            cover: h,
        };
        if depth >= self.config.max_depth {
            self.nodes.push(leaf);
            return id;
        }

        for &r in &rows {
            let (gr, hr) = (self.grad[r as usize], self.hess[r as usize]);
            for &c in self.matrix.row(r as usize) {
                let c_us = c as usize;
                if !self.seen[c_us] {
                    self.seen[c_us] = true;
                    self.touched.push(c);
                }
                self.g_set[c_us] += gr;
                self.h_set[c_us] += hr;
                self.n_set[c_us] += 1;
            }
        }
        self.touched.sort_unstable();

        let parent = g * g / (h + lambda);
        let mut best: Option<(f64, u32)> = None;
        for &c in &self.touched {
            let (gr, hr) = (self.g_set[c as usize], self.h_set[c as usize]);
            let (gl, hl) = (g - gr, h - hr);
            if self.n_set[c as usize] as usize == rows.len() {
                continue;
            }
            if hl < self.config.min_child_weight || hr < self.config.min_child_weight {
                continue;
            }
            let gain = 0.5 * (gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - parent);
            // Ascending column order with strict improvement: lowest index wins ties.
            if gain > 0.0 && best.is_none_or(|(b, _)| gain > b) {
                best = Some((gain, c));
            }
        }
        for &c in &self.touched {
            self.g_set[c as usize] = 0.0;
            self.h_set[c as usize] = 0.0;
            self.n_set[c as usize] = 0;
            self.seen[c as usize] = false;
        }
        self.touched.clear();

        let Some((_, feature)) = best else {
            self.nodes.push(leaf);
            return id;
        };
        let (right_rows, left_rows): (Vec<u32>, Vec<u32>) = rows
            .into_iter()
            .partition(|&r| self.matrix.row(r as usize).binary_search(&feature).is_ok());
        self.nodes.push(Node::Split {
            feature,
            left: 0,
            right: 0,
            cover: h,
        });
        let left = self.build(left_rows, depth + 1);
        let right = self.build(right_rows, depth + 1);
        if let Node::Split { left: l, right: r, .. } = &mut self.nodes[id as usize] {
            *l = left;
            *r = right;
        }
        id
    }
}

/// Grows one tree on the given first and second derivatives.
pub fn grow_tree(matrix: &FeatureMatrix, grad: &[f64], hess: &[f64], config: &GbdtConfig) -> Tree {
    let mut b = Builder {
        matrix,
        grad,
        hess,
        config,
        g_set: vec![0.0; matrix.n_cols()],
        h_set: vec![0.0; matrix.n_cols()],
        n_set: vec![0; matrix.n_cols()],
        seen: vec![false; matrix.n_cols()],
        touched: Vec::new(),
        nodes: Vec::new(),
    };
    b.build((0..matrix.n_rows() as u32).collect(), 0);
    Tree { nodes: b.nodes }
}

/// Trains a boosted ensemble. Base score is the log-odds of the training base rate;
/// each round uses g = p − y and h = p(1 − p).
pub fn train_gbdt(matrix: &FeatureMatrix, config: &GbdtConfig) -> Result<TreeEnsemble> {
    if matrix.n_rows() == 0 {
        return Err(Error::invalid("empty training matrix"));
    }
    if config.lambda < 0.0 || config.learning_rate <= 0.0 || config.min_child_weight < 0.0 {
        return Err(Error::invalid("lambda and min_child_weight must be >= 0, learning rate > 0"));
    }
    let labels = matrix.labels();
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::DegenerateLabels);
    }
    let base_score = logit(positives as f64 / labels.len() as f64);
    let mut margins = vec![base_score; labels.len()];
    let mut grad = vec![0.0; labels.len()];
    let mut hess = vec![0.0; labels.len()];
    let mut trees = Vec::with_capacity(config.trees);
    let mut loss_history = vec![log_loss(&margins, labels)];

    for _ in 0..config.trees {
        for i in 0..labels.len() {
            let p = super::logreg::sigmoid(margins[i]);
            grad[i] = p - if labels[i] { 1.0 } else { 0.0 };
            hess[i] = p * (1.0 - p);
        }
        let tree = grow_tree(matrix, &grad, &hess, config);
        for (m, row) in margins.iter_mut().zip(matrix.rows()) {
            *m += tree.predict(row);
        }
        loss_history.push(log_loss(&margins, labels));
        trees.push(tree);
    }

    Ok(TreeEnsemble {
        trees,
        learning_rate: config.learning_rate,
        base_score,
        n_features: matrix.n_cols(),
        loss_history,
        vocab_fingerprint: matrix.vocab_fingerprint().to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::auroc;
    use crate::features::FeatureVocabulary;
    use crate::learners::logreg::sigmoid;

    fn matrix(rows: Vec<Vec<u32>>, labels: Vec<bool>, n_cols: usize) -> FeatureMatrix {
        let vocab = FeatureVocabulary::new(1..=n_cols as u64);
        let ids = (1..=rows.len() as u64).collect();
        FeatureMatrix::from_rows(rows, &vocab, labels, ids).unwrap()
    }

    #[test]
    fn single_split_leaf_weights_match_hand_computation() {
        // Feature 0 is set exactly for the two cases.
        let m = matrix(vec![vec![0], vec![0], vec![], vec![]], vec![true, true, false, false], 1);
        let cfg = GbdtConfig { trees: 1, max_depth: 1, learning_rate: 1.0, lambda: 1.0, min_child_weight: 0.0, seed: 0 };
        let e = train_gbdt(&m, &cfg).unwrap();
        // Base rate 0.5: base score 0, p = 0.5, g = ∓0.5, h = 0.25 per row.
        assert_eq!(e.base_score, 0.0);
        let left = -(0.5 + 0.5) / (0.5 + 1.0);
        let right = -(-0.5 - 0.5) / (0.5 + 1.0);
        match &e.trees[0].nodes[..] {
            [Node::Split { feature: 0, left: l, right: r, cover }, ..] => {
                assert_eq!(*cover, 1.0);
                let lv = &e.trees[0].nodes[*l as usize];
                let rv = &e.trees[0].nodes[*r as usize];
                assert_eq!(*lv, Node::Leaf { value: left, cover: 0.5 });
                assert_eq!(*rv, Node::Leaf { value: right, cover: 0.5 });
            }
            other => panic!("unexpected tree {other:?}"),
        }
    }

    #[test]
    fn huge_lambda_collapses_to_base_score() {
        let m = matrix(vec![vec![0], vec![0], vec![], vec![], vec![]], vec![true, true, false, false, true], 1);
        let cfg = GbdtConfig { lambda: 1e12, trees: 5, ..Default::default() };
        let e = train_gbdt(&m, &cfg).unwrap();
        for r in m.rows() {
            assert!((sigmoid(e.margin(r)) - sigmoid(e.base_score)).abs() < 1e-9);
        }
    }

    fn xor_matrix(n: usize) -> FeatureMatrix {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let a: bool = rng.gen();
            let b: bool = rng.gen();
            let mut r = vec![];
            if a {
                r.push(0);
            }
            if b {
                r.push(1);
            }
            rows.push(r);
            labels.push((a ^ b) ^ rng.gen_bool(0.1));
        }
        matrix(rows, labels, 2)
    }

    #[test]
    fn depth_two_learns_xor_depth_one_does_not() {
        let m = xor_matrix(2000);
        let deep = train_gbdt(&m, &GbdtConfig { trees: 20, max_depth: 2, min_child_weight: 0.0, ..Default::default() }).unwrap();
        let scores: Vec<f64> = m.rows().iter().map(|r| deep.margin(r)).collect();
        assert!(auroc(&scores, m.labels()).unwrap() >= 0.85);
        let stump = train_gbdt(&m, &GbdtConfig { trees: 20, max_depth: 1, min_child_weight: 0.0, ..Default::default() }).unwrap();
        let scores: Vec<f64> = m.rows().iter().map(|r| stump.margin(r)).collect();
        assert!((auroc(&scores, m.labels()).unwrap() - 0.5).abs() < 0.05);
    }

    #[test]
    fn training_loss_is_non_increasing() {
        let m = xor_matrix(400);
        let e = train_gbdt(&m, &GbdtConfig { trees: 30, max_depth: 3, ..Default::default() }).unwrap();
        assert!(e.loss_history.windows(2).all(|w| w[1] <= w[0] + 1e-15));
        assert!(e.trees.iter().all(|t| t.depth() <= 3));
    }

    #[test]
    fn equal_gain_tie_picks_lowest_column() {
        // Columns 0 and 1 are identical copies.
        let m = matrix(vec![vec![0, 1], vec![0, 1], vec![], vec![]], vec![true, true, false, false], 2);
        let cfg = GbdtConfig { trees: 1, max_depth: 1, min_child_weight: 0.0, ..Default::default() };
        let e = train_gbdt(&m, &cfg).unwrap();
        assert_eq!(e.trees[0].features(), vec![0]);
    }
}
