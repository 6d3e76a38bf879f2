//! Lift, coverage and recall of flagged subgroups.
//!
//! lift = (flagged cases / flagged) / (cases / members), coverage =
//! flagged / members and recall = flagged cases / cases, so recall equals
//! lift × coverage.

use serde::{Deserialize, Serialize};

use super::auroc::check_scores;
use crate::error::{Error, Result};
use crate::event_store::PersonId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LiftPoint {
    pub coverage: f64,
    pub lift: f64,
    pub recall: f64,
    pub flagged_count: usize,
    pub case_count_flagged: usize,
}

pub fn lift_of_flags(flags: &[bool], labels: &[bool]) -> Result<LiftPoint> {
    if flags.len() != labels.len() {
        return Err(Error::invalid("flags and labels differ in length"));
    }
    let total = labels.len();
    let cases = labels.iter().filter(|&&y| y).count();
    let flagged = flags.iter().filter(|&&f| f).count();
    if flagged == 0 {
        return Err(Error::invalid("no members flagged; prevalence in the flagged group is undefined"));
    }
    if cases == 0 {
        return Err(Error::invalid("no cases; population prevalence is zero"));
    }
    let hit = flags.iter().zip(labels).filter(|(&f, &y)| f && y).count();
    // Integer products keep lift(all flagged) = 1 and lift ≤ n/cases exact.
    let lift = (hit as f64 * total as f64) / (flagged as f64 * cases as f64);
    Ok(LiftPoint {
        coverage: flagged as f64 / total as f64,
        lift,
        recall: hit as f64 / cases as f64,
        flagged_count: flagged,
        case_count_flagged: hit,
    })
}

/// Number of members flagged at a target coverage: ⌈target·n⌉, with a small
/// tolerance so that products like 0.07·100 do not round up past 7.
pub fn flagged_at(target: f64, n: usize) -> usize {
    let raw = target * n as f64;
    ((raw - 1e-9).ceil().max(1.0) as usize).min(n)
}

/// Top-k selection by score, ties at the cut broken by ascending person id.
pub fn top_by_score(scores: &[f64], person_ids: &[PersonId], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(person_ids[a].cmp(&person_ids[b])));
    let mut flags = vec![false; scores.len()];
    for &i in &order[..k] {
        flags[i] = true;
    }
    flags
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageCut {
    pub point: LiftPoint,
    pub target_coverage: f64,
    /// Lowest score inside the flagged set.
    pub threshold: f64,
    pub flags: Vec<bool>,
}

/// Flags the ⌈target·N⌉ highest scores and reports the lift of that set.
pub fn lift_at_coverage(
    scores: &[f64],
    labels: &[bool],
    person_ids: &[PersonId],
    target_coverage: f64,
) -> Result<CoverageCut> {
    check_scores(scores, labels)?;
    if person_ids.len() != scores.len() {
        return Err(Error::invalid("person ids and scores differ in length"));
    }
    if !(target_coverage > 0.0 && target_coverage <= 1.0) {
        return Err(Error::invalid(format!("target coverage {target_coverage} outside (0, 1]")));
    }
    if scores.is_empty() {
        return Err(Error::invalid("no members"));
    }
    let k = flagged_at(target_coverage, scores.len());
    let flags = top_by_score(scores, person_ids, k);
    let threshold = scores
        .iter()
        .zip(&flags)
        .filter(|(_, &f)| f)
        .map(|(s, _)| *s)
        .fold(f64::INFINITY, f64::min);
    Ok(CoverageCut {
        point: lift_of_flags(&flags, labels)?,
        target_coverage,
        threshold,
        flags,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Grid coverage the point was evaluated at.
    pub target: f64,
    pub point: LiftPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftCurve {
    pub criterion: String,
    /// Strictly increasing in `target`.
    pub points: Vec<CurvePoint>,
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::invalid("empty coverage grid"));
    }
    if grid.iter().any(|&q| !(q > 0.0 && q <= 1.0)) {
        return Err(Error::invalid("coverage grid values must lie in (0, 1]"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("coverage grid must be strictly increasing"));
    }
    Ok(())
}

/// `n` evenly spaced coverages from `start` in steps of `step`.
pub fn coverage_grid(start: f64, step: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| start + step * i as f64).collect()
}

/// Model-alone lift at every grid coverage.
pub fn model_lift_curve(
    scores: &[f64],
    labels: &[bool],
    person_ids: &[PersonId],
    grid: &[f64],
) -> Result<LiftCurve> {
    check_grid(grid)?;
    let points = grid
        .iter()
        .map(|&q| {
            lift_at_coverage(scores, labels, person_ids, q).map(|c| CurvePoint { target: q, point: c.point })
        })
        .collect::<Result<_>>()?;
    Ok(LiftCurve {
        criterion: "model".into(),
        points,
    })
}

/// Lift of the union of the risk-factor flags and the top-q model scores, per grid q.
pub fn combined_lift_curve(
    rf_flags: &[bool],
    scores: &[f64],
    labels: &[bool],
    person_ids: &[PersonId],
    grid: &[f64],
) -> Result<LiftCurve> {
    check_grid(grid)?;
    check_scores(scores, labels)?;
    if rf_flags.len() != scores.len() || person_ids.len() != scores.len() {
        return Err(Error::invalid("flags, scores and person ids differ in length"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(person_ids[a].cmp(&person_ids[b])));
    let mut points = Vec::with_capacity(grid.len());
    for &q in grid {
        let k = flagged_at(q, scores.len());
        let mut union = rf_flags.to_vec();
        for &i in &order[..k] {
            union[i] = true;
        }
        points.push(CurvePoint {
            target: q,
            point: lift_of_flags(&union, labels)?,
        });
    }
    Ok(LiftCurve {
        criterion: "combined".into(),
        points,
    })
}

/// Point of maximal lift, ties to the smallest coverage; `significant` is p < 0.05.
pub fn max_combined_lift(curve: &LiftCurve, p_value: Option<f64>) -> Result<(CurvePoint, bool)> {
    let mut best: Option<&CurvePoint> = None;
    for p in &curve.points {
        best = match best {
            None => Some(p),
            Some(b) if p.point.lift > b.point.lift
                || (p.point.lift == b.point.lift && p.point.coverage < b.point.coverage) =>
            {
                Some(p)
            }
            keep => keep,
        };
    }
    let best = *best.ok_or_else(|| Error::invalid("empty lift curve"))?;
    Ok((best, p_value.is_some_and(|p| p < 0.05)))
}

/// Largest grid coverage q* such that every grid point up to q* reaches `target_lift`.
pub fn threshold_range(curve: &LiftCurve, target_lift: f64) -> Option<f64> {
    curve
        .points
        .iter()
        .take_while(|p| p.point.lift >= target_lift)
        .last()
        .map(|p| p.target)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(points: &[(f64, f64)]) -> LiftCurve {
        LiftCurve {
            criterion: "t".into(),
            points: points
                .iter()
                .map(|&(c, l)| CurvePoint {
                    target: c,
                    point: LiftPoint { coverage: c, lift: l, recall: c * l, flagged_count: 0, case_count_flagged: 0 },
                })
                .collect(),
        }
    }

    #[test]
    fn lift_of_flags_hand_enumeration() {
        let labels = [true, true, false, false, false, false, false, false, false, false];
        let flags = [true, false, true, false, false, false, false, false, false, false];
        let p = lift_of_flags(&flags, &labels).unwrap();
        assert_eq!((p.coverage, p.lift, p.recall), (0.2, 2.5, 0.5));
        assert_eq!(lift_of_flags(&[true; 10], &labels).unwrap().lift, 1.0);
        let none = [false, false, true, true, false, false, false, false, false, false];
        assert_eq!(lift_of_flags(&none, &labels).unwrap().lift, 0.0);
        assert!(lift_of_flags(&[false; 10], &labels).is_err());
    }

    #[test]
    fn coverage_cut_sizes() {
        assert_eq!(flagged_at(0.01, 200), 2);
        assert_eq!(flagged_at(0.07, 100), 7);
        assert_eq!(flagged_at(0.5, 10), 5);
        assert_eq!(flagged_at(0.001, 10), 1);
    }

    #[test]
    fn lift_at_coverage_examples() {
        // Cases ranked 1st and 3rd among 10 distinct scores.
        let scores: Vec<f64> = (0..10).map(|i| 10.0 - i as f64).collect();
        let mut labels = [false; 10];
        labels[0] = true;
        labels[2] = true;
        let ids: Vec<PersonId> = (1..=10).collect();
        let cut = lift_at_coverage(&scores, &labels, &ids, 0.5).unwrap();
        assert_eq!(cut.point.flagged_count, 5);
        assert_eq!(cut.point.lift, 2.0);
        assert_eq!(cut.threshold, 6.0);
        assert_eq!(lift_at_coverage(&scores, &labels, &ids, 1.0).unwrap().point.lift, 1.0);
        assert!(lift_at_coverage(&scores, &labels, &ids, 0.0).is_err());
        assert!(lift_at_coverage(&scores, &labels, &ids, 1.5).is_err());
    }

    #[test]
    fn ties_at_the_cut_go_to_lower_person_id() {
        let scores = [0.5, 0.5, 0.5, 0.1];
        let labels = [false, true, false, false];
        let ids = [30, 10, 20, 40];
        let cut = lift_at_coverage(&scores, &labels, &ids, 0.5).unwrap();
        assert_eq!(cut.flags, vec![false, true, true, false]);
    }

    #[test]
    fn combined_curve_degenerate_and_subset_cases() {
        let scores = [0.9, 0.8, 0.7, 0.1, 0.2, 0.3, 0.4, 0.05];
        let labels = [true, false, true, false, false, false, true, false];
        let ids: Vec<PersonId> = (1..=8).collect();
        // Empty RF: the union is the model's top-q set.
        let c = combined_lift_curve(&[false; 8], &scores, &labels, &ids, &[0.125, 0.5]).unwrap();
        let alone = lift_at_coverage(&scores, &labels, &ids, 0.125).unwrap();
        assert_eq!(c.points[0].point, alone.point);
        // RF covering the top-2 set.
        let rf = [true, true, false, true, false, false, false, false];
        let c = combined_lift_curve(&rf, &scores, &labels, &ids, &[0.25]).unwrap();
        assert_eq!(c.points[0].point, lift_of_flags(&rf, &labels).unwrap());
    }

    #[test]
    fn max_lift_prefers_smallest_coverage() {
        let c = curve(&[(0.02, 5.0), (0.05, 6.0), (0.10, 6.0)]);
        let (p, sig) = max_combined_lift(&c, Some(0.01)).unwrap();
        assert_eq!((p.point.coverage, p.point.lift, sig), (0.05, 6.0, true));
        let (p, sig) = max_combined_lift(&curve(&[(0.3, 2.0)]), None).unwrap();
        assert_eq!((p.point.coverage, sig), (0.3, false));
        let (p, _) = max_combined_lift(&curve(&[(0.1, 2.0), (0.2, 2.0)]), Some(0.2)).unwrap();
        assert_eq!(p.point.coverage, 0.1);
        assert!(max_combined_lift(&curve(&[]), None).is_err());
    }

    #[test]
    fn threshold_range_scan() {
        let c = curve(&[(0.01, 8.5), (0.02, 8.54), (0.05, 5.0), (0.10, 3.9)]);
        assert_eq!(threshold_range(&c, 4.10), Some(0.05));
        assert_eq!(threshold_range(&c, 9.0), None);
        assert_eq!(threshold_range(&c, 1.0), Some(0.10));
    }
}
