//! Independent reference implementations used by the integration and
//! acceptance tests. Each one is the slow, obvious version of a library
//! routine and shares no code with it.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use ehr_lift::learners::{Node, Tree, TreeEnsemble};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture_dir(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// AUROC by counting every (case, control) pair, ties worth one half.
pub fn pair_count_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &yi) in labels.iter().enumerate() {
        if !yi {
            continue;
        }
        for (j, &yj) in labels.iter().enumerate() {
            if yj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Count of pairs with a > b plus half the ties.
fn u_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut u = 0.0;
    for x in a {
        for y in b {
            if x > y {
                u += 1.0;
            } else if x == y {
                u += 0.5;
            }
        }
    }
    u
}

/// P(U ≤ U_observed) over every way of splitting the pooled sample into
/// groups of the original sizes. Each split stands for the same number of
/// label permutations, so this is the full permutation distribution.
pub fn enumerate_mwu_less(a: &[f64], b: &[f64]) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let n = pooled.len();
    let observed = u_statistic(a, b);
    let mut total = 0u64;
    let mut at_or_below = 0u64;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != a.len() {
            continue;
        }
        let (mut ga, mut gb) = (Vec::new(), Vec::new());
        for (i, &v) in pooled.iter().enumerate() {
            if mask & (1 << i) != 0 {
                ga.push(v);
            } else {
                gb.push(v);
            }
        }
        total += 1;
        if u_statistic(&ga, &gb) <= observed {
            at_or_below += 1;
        }
    }
    at_or_below as f64 / total as f64
}

/// Paired bootstrap written from the documented RNG contract.
pub fn reference_bootstrap(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> f64 {
    let n = a.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0;
    for _ in 0..resamples {
        let mut total = 0.0;
        for _ in 0..n {
            let i = rng.gen_range(0..n);
            total += b[i] - a[i];
        }
        if total / n as f64 <= 0.0 {
            hits += 1;
        }
    }
    hits as f64 / resamples as f64
}

/// Expected output of `tree` when only the features in `mask` are known.
fn coalition_value(tree: &Tree, node: usize, present: &[bool], mask: u32) -> f64 {
    match &tree.nodes[node] {
        Node::Leaf { value, .. } => *value,
        Node::Split { feature, left, right, .. } => {
            let (l, r) = (*left as usize, *right as usize);
            if mask & (1 << feature) != 0 {
                let next = if present[*feature as usize] { r } else { l };
                coalition_value(tree, next, present, mask)
            } else {
                let cl = tree.nodes[l].cover();
                let cr = tree.nodes[r].cover();
                (cl * coalition_value(tree, l, present, mask) + cr * coalition_value(tree, r, present, mask))
                    / (cl + cr)
            }
        }
    }
}

/// Shapley values by summing over every coalition. Needs `n_features ≤ 16`.
pub fn brute_force_shapley(ensemble: &TreeEnsemble, row: &[u32]) -> Vec<f64> {
    let m = ensemble.n_features;
    assert!(m <= 16, "exhaustive Shapley is limited to 16 features");
    let mut present = vec![false; m];
    for &c in row {
        present[c as usize] = true;
    }
    let values: Vec<f64> = (0u32..(1 << m))
        .map(|mask| {
            ensemble.base_score
                + ensemble
                    .trees
                    .iter()
                    .map(|t| coalition_value(t, 0, &present, mask))
                    .sum::<f64>()
        })
        .collect();
    let mut fact = vec![1.0f64; m + 1];
    for i in 1..=m {
        fact[i] = fact[i - 1] * i as f64;
    }
    let mut phi = vec![0.0; m];
    for (i, p) in phi.iter_mut().enumerate() {
        let bit = 1u32 << i;
        for mask in 0u32..(1 << m) {
            if mask & bit != 0 {
                continue;
            }
            let s = mask.count_ones() as usize;
            let w = fact[s] * fact[m - s - 1] / fact[m];
            *p += w * (values[(mask | bit) as usize] - values[mask as usize]);
        }
    }
    phi
}

fn grow_random(rng: &mut ChaCha8Rng, nodes: &mut Vec<Node>, depth: usize, n_features: usize) -> usize {
    let id = nodes.len();
    nodes.push(Node::Leaf { value: 0.0, cover: 0.0 });
    if depth == 0 || rng.gen_bool(0.2) {
        // Covers span a wide range so cover weighting matters.
        let cover = rng.gen_range(0.05..50.0);
        nodes[id] = Node::Leaf {
            value: rng.gen_range(-2.0..2.0),
            cover,
        };
        return id;
    }
    // Features may repeat along a path.
    let feature = rng.gen_range(0..n_features) as u32;
    let left = grow_random(rng, nodes, depth - 1, n_features);
    let right = grow_random(rng, nodes, depth - 1, n_features);
    let cover = nodes[left].cover() + nodes[right].cover();
    nodes[id] = Node::Split {
        feature,
        left: left as u32,
        right: right as u32,
        cover,
    };
    id
}

/// Random ensemble over `n_features` binary features with consistent covers.
pub fn random_ensemble(rng: &mut ChaCha8Rng, n_features: usize, n_trees: usize, max_depth: usize) -> TreeEnsemble {
    let trees = (0..n_trees)
        .map(|_| {
            let mut nodes = Vec::new();
            grow_random(rng, &mut nodes, max_depth, n_features);
            Tree { nodes }
        })
        .collect();
    TreeEnsemble {
        trees,
        learning_rate: 1.0,
        base_score: rng.gen_range(-3.0..0.0),
        n_features,
        loss_history: Vec::new(),
        vocab_fingerprint: String::new(),
    }
}

/// Random sorted row over `n_features` columns.
pub fn random_row(rng: &mut ChaCha8Rng, n_features: usize) -> Vec<u32> {
    let p = rng.gen_range(0.1..0.9);
    (0..n_features as u32).filter(|_| rng.gen_bool(p)).collect()
}
