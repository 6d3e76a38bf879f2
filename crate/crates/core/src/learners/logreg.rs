use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogRegConfig {
    pub l2: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            epochs: 300,
            learning_rate: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRegModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub l2: f64,
    pub epochs_run: usize,
    pub final_loss: f64,
    /// Objective after initialisation and after every accepted epoch.
    pub loss_history: Vec<f64>,
    pub vocab_fingerprint: String,
}

impl LogRegModel {
    pub fn margin(&self, row: &[u32]) -> f64 {
        self.intercept + row.iter().map(|&c| self.weights[c as usize]).sum::<f64>()
    }
}

/// Value and gradient of mean logistic loss plus `(l2/2)·‖w‖²` (intercept unpenalised).
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub loss: f64,
    pub grad_weights: Vec<f64>,
    pub grad_intercept: f64,
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Mean logistic loss of labels against margins.
pub fn log_loss(margins: &[f64], labels: &[bool]) -> f64 {
    let total: f64 = margins
        .iter()
        .zip(labels)
        .map(|(&m, &y)| softplus(m) - if y { m } else { 0.0 })
        .sum();
    total / margins.len() as f64
}

pub fn logistic_objective(matrix: &FeatureMatrix, weights: &[f64], intercept: f64, l2: f64) -> Objective {
    let n = matrix.n_rows() as f64;
    let mut grad_weights = vec![0.0; weights.len()];
    let mut grad_intercept = 0.0;
    let mut loss = 0.0;
    for (row, &y) in matrix.rows().iter().zip(matrix.labels()) {
        let m = intercept + row.iter().map(|&c| weights[c as usize]).sum::<f64>();
        let y = if y { 1.0 } else { 0.0 };
        loss += softplus(m) - y * m;
        let r = sigmoid(m) - y;
        grad_intercept += r;
        for &c in row {
            grad_weights[c as usize] += r;
        }
    }
    let mut penalty = 0.0;
    for (g, &w) in grad_weights.iter_mut().zip(weights) {
        *g = *g / n + l2 * w;
        penalty += w * w;
    }
    Objective {
        loss: loss / n + 0.5 * l2 * penalty,
        grad_weights,
        grad_intercept: grad_intercept / n,
    }
}

fn objective_value(matrix: &FeatureMatrix, weights: &[f64], intercept: f64, l2: f64) -> f64 {
    let n = matrix.n_rows() as f64;
    let data: f64 = matrix
        .rows()
        .iter()
        .zip(matrix.labels())
        .map(|(row, &y)| {
            let m = intercept + row.iter().map(|&c| weights[c as usize]).sum::<f64>();
            softplus(m) - if y { m } else { 0.0 }
        })
        .sum();
    data / n + 0.5 * l2 * weights.iter().map(|w| w * w).sum::<f64>()
}

/// Full-batch gradient descent with a backtracking step, so the recorded
/// objective never increases between epochs. The intercept starts at the
/// log-odds of the base rate.
pub fn train_logreg(matrix: &FeatureMatrix, config: &LogRegConfig) -> Result<LogRegModel> {
    if matrix.n_rows() == 0 {
        return Err(Error::invalid("empty training matrix"));
    }
    if config.l2 < 0.0 || config.learning_rate <= 0.0 {
        return Err(Error::invalid("l2 must be >= 0 and learning rate > 0"));
    }
    let positives = matrix.labels().iter().filter(|&&y| y).count();
    if positives == 0 || positives == matrix.n_rows() {
        return Err(Error::DegenerateLabels);
    }
    let base = positives as f64 / matrix.n_rows() as f64;

    let mut weights = vec![0.0; matrix.n_cols()];
    let mut intercept = logit(base);
    let mut obj = logistic_objective(matrix, &weights, intercept, config.l2);
    let mut history = vec![obj.loss];
    let mut step = config.learning_rate;
    let mut epochs_run = 0;

    for _ in 0..config.epochs {
        let grad_sq: f64 = obj.grad_intercept * obj.grad_intercept
            + obj.grad_weights.iter().map(|g| g * g).sum::<f64>();
        if grad_sq < 1e-24 {
            break;
        }
        let mut accepted = None;
        while step > 1e-12 {
            let w: Vec<f64> = weights
                .iter()
                .zip(&obj.grad_weights)
                .map(|(w, g)| w - step * g)
                .collect();
            let b = intercept - step * obj.grad_intercept;
            let value = objective_value(matrix, &w, b, config.l2);
            // Armijo sufficient decrease.
            if value <= obj.loss - 0.5 * step * grad_sq {
                accepted = Some((w, b));
                break;
            }
            step *= 0.5;
        }
        let Some((w, b)) = accepted else { break };
        weights = w;
        intercept = b;
        obj = logistic_objective(matrix, &weights, intercept, config.l2);
        history.push(obj.loss);
        epochs_run += 1;
        step = (step * 1.5).min(config.learning_rate * 64.0);
    }

    Ok(LogRegModel {
        weights,
        intercept,
        l2: config.l2,
        epochs_run,
        final_loss: obj.loss,
        loss_history: history,
        vocab_fingerprint: matrix.vocab_fingerprint().to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::auroc;
    use crate::features::FeatureVocabulary;

    fn matrix(rows: Vec<Vec<u32>>, labels: Vec<bool>, n_cols: usize) -> FeatureMatrix {
        let vocab = FeatureVocabulary::new(1..=n_cols as u64);
        let ids = (1..=rows.len() as u64).collect();
        FeatureMatrix::from_rows(rows, &vocab, labels, ids).unwrap()
    }

    #[test]
    fn all_zero_matrix_gives_base_rate_intercept() {
        let labels: Vec<bool> = (0..50).map(|i| i < 7).collect();
        let m = matrix(vec![vec![]; 50], labels, 3);
        let model = train_logreg(&m, &LogRegConfig::default()).unwrap();
        assert!(model.weights.iter().all(|&w| w == 0.0));
        assert!((model.intercept - (0.14f64 / 0.86).ln()).abs() < 1e-6);
    }

    #[test]
    fn separable_feature_reaches_perfect_training_auroc() {
        let labels: Vec<bool> = (0..40).map(|i| i % 4 == 0).collect();
        let rows = labels.iter().map(|&y| if y { vec![0] } else { vec![] }).collect();
        let m = matrix(rows, labels.clone(), 1);
        let cfg = LogRegConfig { l2: 0.0, epochs: 100, ..Default::default() };
        let model = train_logreg(&m, &cfg).unwrap();
        assert!(model.weights[0] > 1.0);
        let scores: Vec<f64> = m.rows().iter().map(|r| model.margin(r)).collect();
        assert_eq!(auroc(&scores, &labels).unwrap(), 1.0);
    }

    #[test]
    fn loss_history_is_non_increasing() {
        let labels: Vec<bool> = (0..60).map(|i| i % 3 == 0).collect();
        let rows = (0..60u32).map(|i| if i % 3 == 0 || i % 7 == 0 { vec![i % 5, 5] } else { vec![i % 5] }).collect();
        let model = train_logreg(&matrix(rows, labels, 10), &LogRegConfig::default()).unwrap();
        assert!(model.loss_history.windows(2).all(|w| w[1] <= w[0]));
        assert!(model.epochs_run > 0);
    }

    #[test]
    fn degenerate_labels_rejected() {
        let m = matrix(vec![vec![0], vec![]], vec![true, true], 1);
        assert!(matches!(train_logreg(&m, &LogRegConfig::default()), Err(Error::DegenerateLabels)));
    }

    #[test]
    fn gradient_matches_central_differences_at_zero() {
        let labels: Vec<bool> = (0..30).map(|i| i % 4 == 1).collect();
        let rows = (0..30u32).map(|i| vec![i % 3, 3 + i % 2]).collect();
        let m = matrix(rows, labels, 5);
        let w = vec![0.0; 5];
        let obj = logistic_objective(&m, &w, 0.0, 0.1);
        let h = 1e-6;
        for j in 0..5 {
            let mut wp = w.clone();
            wp[j] += h;
            let mut wm = w.clone();
            wm[j] -= h;
            let fd = (logistic_objective(&m, &wp, 0.0, 0.1).loss - logistic_objective(&m, &wm, 0.0, 0.1).loss) / (2.0 * h);
            let g = obj.grad_weights[j];
            assert!((fd - g).abs() <= 1e-4 * g.abs().max(1e-8), "col {j}: fd {fd} vs {g}");
        }
    }
}
