//! Cross-validated gradient boosting and logistic regression on a synthetic cohort.

use ehr_lift::cohort::{assign_index_dates, filter_min_history, identify_cases, select_controls, CancerTypeMap, Horizon};
use ehr_lift::evaluation::{auroc, fold_ci};
use ehr_lift::event_store::{EventStore, MALIGNANCY_ROOT};
use ehr_lift::features::{build_vocabulary, vectorize};
use ehr_lift::learners::{stratified_kfold, train_gbdt, train_logreg, GbdtConfig, LogRegConfig};
use ehr_lift::synth::{synthesize, SynthConfig};

fn main() -> ehr_lift::Result<()> {
    let data = synthesize(&SynthConfig { persons: 10_000, ..Default::default() })?;
    let store = EventStore::from_parts(data.parts)?;
    let types = CancerTypeMap::from_store(&store);
    let cases = identify_cases(&store, MALIGNANCY_ROOT, &types)?.cases;
    let controls = select_controls(&store, MALIGNANCY_ROOT)?;
    let (members, _) = assign_index_dates(&cases, &controls, &store, Horizon::ONE_YEAR)?;
    let (members, _) = filter_min_history(members, &store, 5);
    let labels: Vec<bool> = members.iter().map(|m| m.is_case()).collect();
    let folds = stratified_kfold(&labels, 5, 0)?;

    let gbdt_cfg = GbdtConfig { trees: 100, max_depth: 4, ..Default::default() };
    let (mut gbdt_auc, mut logreg_auc) = (Vec::new(), Vec::new());
    for k in 0..5 {
        let train: Vec<_> = folds.train_indices(k).into_iter().map(|i| &members[i]).collect();
        let test: Vec<_> = folds.test_indices(k).into_iter().map(|i| &members[i]).collect();
        // Vocabulary from the training split only.
        let vocab = build_vocabulary(&train, &store)?;
        let (xtr, xte) = (vectorize(&train, &store, &vocab), vectorize(&test, &store, &vocab));

        let gbdt = train_gbdt(&xtr, &gbdt_cfg)?;
        let logreg = train_logreg(&xtr, &LogRegConfig::default())?;
        let g: Vec<f64> = xte.rows().iter().map(|r| gbdt.margin(r)).collect();
        let l: Vec<f64> = xte.rows().iter().map(|r| logreg.margin(r)).collect();
        gbdt_auc.push(auroc(&g, xte.labels())?);
        logreg_auc.push(auroc(&l, xte.labels())?);
        println!(
            "fold {k}: {} features, gbdt {:.3}, logistic {:.3} ({} epochs)",
            vocab.len(),
            gbdt_auc[k],
            logreg_auc[k],
            logreg.epochs_run
        );
    }
    for (name, v) in [("gbdt", &gbdt_auc), ("logistic", &logreg_auc)] {
        let ci = fold_ci(v, Some((0.0, 1.0)))?;
        println!("{name:<9} AUROC {:.3} [{:.3}, {:.3}]", ci.mean, ci.lower, ci.upper);
    }
    Ok(())
}
