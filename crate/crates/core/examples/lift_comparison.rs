//! Lift of a risk-factor flag against a model at the same coverage, and the
//! lift of their union across a coverage grid.

use ehr_lift::evaluation::{
    combined_lift_curve, coverage_grid, lift_at_coverage, lift_of_flags, max_combined_lift, threshold_range,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> ehr_lift::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 20_000;
    let ids: Vec<u64> = (1..=n as u64).collect();
    let mut flags = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let flag = rng.gen_bool(0.02);
        let risk: f64 = rng.gen_range(-3.0..3.0);
        let logit = -4.0 + 1.2 * risk + if flag { 1.5 } else { 0.0 };
        labels.push(rng.gen_bool(1.0 / (1.0 + (-logit).exp())));
        flags.push(flag);
        // The model sees the risk score with noise, not the flag.
        scores.push(risk + rng.gen_range(-0.5..0.5));
    }

    let rf = lift_of_flags(&flags, &labels)?;
    println!("risk factor: coverage {:.4}, lift {:.2}, recall {:.3}", rf.coverage, rf.lift, rf.recall);
    let model = lift_at_coverage(&scores, &labels, &ids, rf.coverage)?;
    println!(
        "model at the same coverage: lift {:.2}, score threshold {:.3}",
        model.point.lift, model.threshold
    );

    let grid = coverage_grid(0.01, 0.01, 50);
    let curve = combined_lift_curve(&flags, &scores, &labels, &ids, &grid)?;
    let (best, _) = max_combined_lift(&curve, None)?;
    println!(
        "union peaks at grid coverage {:.2}: realized coverage {:.4}, lift {:.2}",
        best.target, best.point.coverage, best.point.lift
    );
    match threshold_range(&curve, rf.lift) {
        Some(q) => println!("union keeps the risk-factor lift up to coverage {q:.2}"),
        None => println!("union never reaches the risk-factor lift"),
    }
    Ok(())
}
