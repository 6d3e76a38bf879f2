//! Evaluates scores produced outside this crate: writes a score file for a
//! synthetic cohort, ingests it aligned to the cohort, and reports lift and AUROC.

use ehr_lift::cohort::{assign_index_dates, identify_cases, select_controls, CancerTypeMap, Horizon};
use ehr_lift::evaluation::{auroc, lift_at_coverage};
use ehr_lift::event_store::{EventStore, MALIGNANCY_ROOT};
use ehr_lift::learners::{ingest_external_scores, write_scores_csv};
use ehr_lift::synth::{synthesize, SynthConfig};

fn main() -> ehr_lift::Result<()> {
    let data = synthesize(&SynthConfig { persons: 10_000, ..Default::default() })?;
    // The true risk stands in for an external model's output.
    let truth: Vec<(u64, f64)> = data.truth.iter().map(|t| (t.person_id, t.true_probability)).collect();
    let store = EventStore::from_parts(data.parts)?;
    let types = CancerTypeMap::from_store(&store);
    let cases = identify_cases(&store, MALIGNANCY_ROOT, &types)?.cases;
    let controls = select_controls(&store, MALIGNANCY_ROOT)?;
    let (members, _) = assign_index_dates(&cases, &controls, &store, Horizon::ONE_YEAR)?;

    let dir = tempfile::tempdir().expect("temporary directory");
    let path = dir.path().join("scores.csv");
    let (ids, scores): (Vec<u64>, Vec<f64>) = truth.into_iter().unzip();
    write_scores_csv(&path, &ids, &scores)?;

    let member_ids: Vec<u64> = members.iter().map(|m| m.person_id).collect();
    let labels: Vec<bool> = members.iter().map(|m| m.is_case()).collect();
    let aligned = ingest_external_scores(&path, &member_ids)?;
    println!("external AUROC {:.3}", auroc(&aligned, &labels)?);
    for q in [0.01, 0.05, 0.10] {
        let cut = lift_at_coverage(&aligned, &labels, &member_ids, q)?;
        println!("coverage {q:.2}: lift {:.2}, recall {:.3}", cut.point.lift, cut.point.recall);
    }

    // A file missing members is rejected.
    write_scores_csv(&path, &ids[1..], &scores[1..])?;
    if let Err(e) = ingest_external_scores(&path, &member_ids) {
        println!("truncated file rejected: {}", e.to_string().chars().take(80).collect::<String>());
    }
    Ok(())
}
