//! Case/control identification, index dates and the minimum-history filter
//! on the checked-in cohort fixture.

use std::path::Path;

use ehr_lift::cohort::{
    assign_index_dates, filter_min_history, identify_cases, prior_condition_count, select_controls, CancerTypeMap,
    Horizon,
};
use ehr_lift::event_store::{load_dataset, DatasetManifest, MALIGNANCY_ROOT};

fn main() -> ehr_lift::Result<()> {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/cohort/manifest.toml");
    let store = load_dataset(&DatasetManifest::from_file(&manifest)?)?;
    let types = CancerTypeMap::from_store(&store);
    let cases = identify_cases(&store, MALIGNANCY_ROOT, &types)?.cases;
    let controls = select_controls(&store, MALIGNANCY_ROOT)?;
    println!("{} cases, {} controls", cases.len(), controls.len());

    for horizon in [Horizon::ONE_YEAR, Horizon::THREE_YEAR] {
        let (members, _) = assign_index_dates(&cases, &controls, &store, horizon)?;
        println!("\nhorizon {} months", horizon.months());
        for m in &members {
            println!(
                "  person {} {:<7} index {}  prior conditions {}",
                m.person_id,
                m.label.as_str(),
                m.index_date,
                prior_condition_count(&store, m.person_id, m.index_date)
            );
        }
        let (kept, report) = filter_min_history(members, &store, 5);
        let ids: Vec<u64> = kept.iter().map(|m| m.person_id).collect();
        println!("  at least 5 prior conditions: kept {ids:?}, dropped {}", report.dropped);
    }
    Ok(())
}
