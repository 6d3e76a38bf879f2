//! Exact tree attributions for a boosted model trained on an interaction.

use ehr_lift::attribution::tree_shap_row;
use ehr_lift::features::{FeatureMatrix, FeatureVocabulary};
use ehr_lift::learners::{train_gbdt, GbdtConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> ehr_lift::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 5000;
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<u32> = (0..4).filter(|_| rng.gen_bool(0.5)).collect();
        let a = row.contains(&0);
        let b = row.contains(&1);
        labels.push((a && b) ^ rng.gen_bool(0.05));
        rows.push(row);
    }
    let vocab = FeatureVocabulary::new([101, 102, 103, 104]);
    let matrix = FeatureMatrix::from_rows(rows, &vocab, labels, (1..=n as u64).collect())?;
    let model = train_gbdt(&matrix, &GbdtConfig { trees: 50, max_depth: 3, ..Default::default() })?;

    for row in [vec![], vec![0], vec![0, 1], vec![0, 1, 2, 3]] {
        let phi = tree_shap_row(&model, &row);
        let shown: Vec<String> = phi.contributions.iter().map(|v| format!("{v:+.3}")).collect();
        println!(
            "present {row:?}: base {:.3} + [{}] = {:.3} (margin {:.3})",
            phi.base_value,
            shown.join(", "),
            phi.base_value + phi.contributions.iter().sum::<f64>(),
            phi.margin
        );
    }
    Ok(())
}
