//! The full pipeline on the planted-carrier configuration, printing the
//! comparison table.
//!
//!     cargo run --release --example planted_carrier -- [OUT_DIR]

use std::path::{Path, PathBuf};

use ehr_lift::pipeline::{emit_report, run_pipeline, EvalReport, RunConfig};
use ehr_lift::synth::oracle_flag_lift;

fn main() -> ehr_lift::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "planted-carrier-out".into()));
    let config_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/planted_carrier.toml");
    let config = RunConfig::from_file(&config_path)?;

    let manifest = run_pipeline(&config, &out)?;
    println!("{} stages, {} files under {}", manifest.stages.len(), manifest.checksums.len(), out.display());

    let text = ehr_lift::io::read_string(&out.join("evaluate/evaluation.json"))?;
    let report: EvalReport = serde_json::from_str(&text)?;
    for row in emit_report(&report) {
        let fmt = |c: Option<ehr_lift::evaluation::ConfidenceInterval>| {
            c.map(|c| format!("{:.2} [{:.2}, {:.2}]", c.mean, c.lower, c.upper)).unwrap_or_else(|| "-".into())
        };
        println!(
            "{:<8} {:<12} coverage {:.4}  rf {}  {} {}  p {:.4}",
            row.model,
            row.risk_factor,
            row.coverage,
            fmt(row.lift_rf),
            row.model,
            fmt(row.lift_ehr),
            row.p_ehr.unwrap_or(f64::NAN)
        );
    }
    if let Some(synth) = &config.synth {
        let oracle = oracle_flag_lift(synth, "carrier", 1_000_000, 0)?;
        println!("carrier oracle lift {:.2} ± {:.2}", oracle.lift, oracle.standard_error);
    }
    Ok(())
}
