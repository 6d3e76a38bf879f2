//! Discrimination, lift/coverage and significance testing.

mod auroc;
mod lift;
mod stats;

pub use auroc::{auroc, midranks};
pub use lift::{
    combined_lift_curve, coverage_grid, flagged_at, lift_at_coverage, lift_of_flags, max_combined_lift,
    model_lift_curve, threshold_range, top_by_score, CoverageCut, CurvePoint, LiftCurve, LiftPoint,
};
pub use stats::{bootstrap_compare_less, fold_ci, mann_whitney_less, ConfidenceInterval, MWU_EXACT_MAX_N};
