//! Generates a synthetic OMOP-lite dataset and writes it as CSV.
//!
//!     cargo run --example synth_dataset -- [OUT_DIR] [PERSONS]

use std::path::PathBuf;

use ehr_lift::event_store::{load_dataset, DatasetManifest};
use ehr_lift::synth::{synthesize, SynthConfig};

fn main() -> ehr_lift::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "synth-data".into()));
    let persons = args.next().and_then(|s| s.parse().ok()).unwrap_or(5000);

    let config = SynthConfig { persons, ..Default::default() };
    let data = synthesize(&config)?;
    let cal = &data.calibration;
    println!("calibrated intercept {:.4}, expected prevalence {:.4}", cal.intercept, cal.prevalence);
    for (flag, (lo, lift)) in config.flags.iter().zip(cal.flag_log_odds.iter().zip(&cal.flag_lifts)) {
        println!("  {:<12} log-odds {lo:+.3}  expected lift {lift:.3}", flag.name);
    }
    println!("realized prevalence {:.4} over {persons} persons", data.prevalence());

    let manifest = data.write(&out)?;
    let store = load_dataset(&DatasetManifest::from_file(&manifest)?)?;
    let r = store.report();
    println!(
        "wrote {}: {} condition events, {} drug events, {} rows dropped",
        manifest.display(),
        r.condition_events,
        r.drug_events,
        r.dropped()
    );
    Ok(())
}
