//! Object-level scoring: per-unit confusion counts, micro-pooled
//! precision/recall/F1 in percent, per-domain breakdown, and the
//! predicted/correct count statistics.

use crate::corpus::Domain;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

/// Additive confusion counts. A unit with empty gold and empty prediction
/// contributes (0, 0, 0).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn add(&mut self, other: ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// Score one unit's prediction set against its gold set.
pub fn score_unit(gold: &BTreeSet<u32>, pred: &BTreeSet<u32>) -> ConfusionCounts {
    let tp = gold.intersection(pred).count() as u64;
    ConfusionCounts {
        tp,
        fp: pred.len() as u64 - tp,
        fn_: gold.len() as u64 - tp,
    }
}

/// Per-unit input to [`aggregate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredUnit {
    pub domain: Domain,
    pub counts: ConfusionCounts,
    /// Number of predicted objects for this unit (after scoring policy).
    pub predicted: u64,
    /// Parse produced missing markers or invalid tokens.
    pub parse_failed: bool,
}

/// Pooled metrics in percent. `precision`, `recall`, and `f1` are rounded
/// half-up to two decimals; `f1` is always derived from the rounded
/// `precision`/`recall` pair so tables stay internally consistent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: ConfusionCounts,
    pub n_units: u64,
    pub avg_predicted: f64,
    pub avg_correct: f64,
    /// Fraction of units whose response failed to parse cleanly.
    pub invalid_output_rate: f64,
    /// A precision or recall denominator was zero and was reported as 0.
    pub zero_division: bool,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_domain: BTreeMap<Domain, MetricsReport>,
}

impl MetricsReport {
    /// A bare report from percent values, F1 recomputed from them. Used
    /// when importing published numbers that carry no counts.
    pub fn from_percents(precision: f64, recall: f64) -> MetricsReport {
        MetricsReport::from_percents_and_f1(precision, recall, f1(precision, recall))
    }

    /// As [`MetricsReport::from_percents`] but trusting a printed F1.
    pub fn from_percents_and_f1(precision: f64, recall: f64, f1: f64) -> MetricsReport {
        MetricsReport {
            precision,
            recall,
            f1,
            counts: ConfusionCounts::default(),
            n_units: 0,
            avg_predicted: 0.0,
            avg_correct: 0.0,
            invalid_output_rate: 0.0,
            zero_division: false,
            per_domain: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("cannot aggregate an empty unit list")]
    EmptyInput,
}

/// Pooling strategy. Micro pools all (unit, object) decisions; macro
/// averages per-unit precision/recall over units where they are defined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Micro,
    Macro,
}

/// Micro-pooled aggregation over scored units.
pub fn aggregate(units: &[ScoredUnit]) -> Result<MetricsReport, MetricsError> {
    aggregate_with(units, Aggregation::Micro)
}

pub fn aggregate_with(
    units: &[ScoredUnit],
    mode: Aggregation,
) -> Result<MetricsReport, MetricsError> {
    if units.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut report = pool(units, mode);
    let mut per_domain = BTreeMap::new();
    for domain in [Domain::Fashion, Domain::Furniture] {
        let subset: Vec<ScoredUnit> = units
            .iter()
            .filter(|u| u.domain == domain)
            .cloned()
            .collect();
        if !subset.is_empty() {
            per_domain.insert(domain, pool(&subset, mode));
        }
    }
    report.per_domain = per_domain;
    Ok(report)
}

fn pool(units: &[ScoredUnit], mode: Aggregation) -> MetricsReport {
    let mut counts = ConfusionCounts::default();
    let mut predicted_total: u64 = 0;
    let mut failed: u64 = 0;
    for u in units {
        counts.add(u.counts);
        predicted_total += u.predicted;
        if u.parse_failed {
            failed += 1;
        }
    }
    let n = units.len() as u64;

    let (p_raw, r_raw, zero_division) = match mode {
        Aggregation::Micro => {
            let pd = counts.tp + counts.fp;
            let rd = counts.tp + counts.fn_;
            let p = if pd > 0 {
                counts.tp as f64 / pd as f64 * 100.0
            } else {
                0.0
            };
            let r = if rd > 0 {
                counts.tp as f64 / rd as f64 * 100.0
            } else {
                0.0
            };
            (p, r, pd == 0 || rd == 0)
        }
        Aggregation::Macro => {
            // Units with empty gold and empty prediction are undefined and
            // skipped; an empty side otherwise scores 0.
            let mut p_sum = 0.0;
            let mut r_sum = 0.0;
            let mut n_defined: u64 = 0;
            for u in units {
                let pd = u.counts.tp + u.counts.fp;
                let rd = u.counts.tp + u.counts.fn_;
                if pd == 0 && rd == 0 {
                    continue;
                }
                n_defined += 1;
                if pd > 0 {
                    p_sum += u.counts.tp as f64 / pd as f64 * 100.0;
                }
                if rd > 0 {
                    r_sum += u.counts.tp as f64 / rd as f64 * 100.0;
                }
            }
            if n_defined > 0 {
                (p_sum / n_defined as f64, r_sum / n_defined as f64, false)
            } else {
                (0.0, 0.0, true)
            }
        }
    };

    let precision = round2(p_raw);
    let recall = round2(r_raw);
    MetricsReport {
        precision,
        recall,
        f1: f1(precision, recall),
        counts,
        n_units: n,
        avg_predicted: predicted_total as f64 / n as f64,
        avg_correct: counts.tp as f64 / n as f64,
        invalid_output_rate: failed as f64 / n as f64,
        zero_division,
        per_domain: BTreeMap::new(),
    }
}

/// Harmonic mean of precision and recall in percent, rounded half-up to
/// two decimals; 0 when both are 0.
pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        return 0.0;
    }
    round2(2.0 * p * r / (p + r))
}

/// Round half-up (away from zero) to two decimals. A small epsilon absorbs
/// binary representation error on exact .005 boundaries.
pub fn round2(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    sign * ((x.abs() * 100.0) + 0.5 + 1e-9).floor() / 100.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[u32]) -> BTreeSet<u32> {
        v.iter().copied().collect()
    }

    fn unit(counts: ConfusionCounts, predicted: u64) -> ScoredUnit {
        ScoredUnit {
            domain: Domain::Fashion,
            counts,
            predicted,
            parse_failed: false,
        }
    }

    #[test]
    fn score_unit_examples() {
        assert_eq!(
            score_unit(&ids(&[6]), &ids(&[6])),
            ConfusionCounts {
                tp: 1,
                fp: 0,
                fn_: 0
            }
        );
        assert_eq!(
            score_unit(&ids(&[]), &ids(&[])),
            ConfusionCounts {
                tp: 0,
                fp: 0,
                fn_: 0
            }
        );
        assert_eq!(
            score_unit(&ids(&[2, 3]), &ids(&[1, 2])),
            ConfusionCounts {
                tp: 1,
                fp: 1,
                fn_: 1
            }
        );
    }

    #[test]
    fn aggregate_micro_example() {
        let units = vec![
            unit(score_unit(&ids(&[1]), &ids(&[1, 2])), 2),
            unit(score_unit(&ids(&[2, 3]), &ids(&[3])), 1),
        ];
        let r = aggregate(&units).unwrap();
        assert_eq!(
            r.counts,
            ConfusionCounts {
                tp: 2,
                fp: 1,
                fn_: 1
            }
        );
        assert_eq!(r.precision, 66.67);
        assert_eq!(r.recall, 66.67);
        assert_eq!(r.f1, 66.67);
    }

    #[test]
    fn perfect_predictions_score_100() {
        let units = vec![
            unit(score_unit(&ids(&[1, 2]), &ids(&[1, 2])), 2),
            unit(score_unit(&ids(&[5]), &ids(&[5])), 1),
        ];
        let r = aggregate(&units).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (100.0, 100.0, 100.0));
    }

    #[test]
    fn zero_denominator_is_flagged_zero() {
        let units = vec![unit(score_unit(&ids(&[]), &ids(&[4])), 1)];
        let r = aggregate(&units).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
        assert!(r.zero_division);
    }

    #[test]
    fn f1_paper_anchors() {
        assert_eq!(f1(2.68, 49.87), 5.09);
        assert_eq!(f1(58.73, 61.37), 60.02);
        assert_eq!(f1(0.0, 0.0), 0.0);
    }

    #[test]
    fn f1_is_symmetric_and_idempotent_on_equal_args() {
        assert_eq!(f1(30.0, 70.0), f1(70.0, 30.0));
        assert_eq!(f1(42.42, 42.42), 42.42);
    }

    #[test]
    fn aggregate_is_permutation_invariant() {
        let mut units = vec![
            unit(score_unit(&ids(&[1]), &ids(&[2])), 1),
            unit(score_unit(&ids(&[1, 2, 3]), &ids(&[1, 2])), 2),
            unit(score_unit(&ids(&[]), &ids(&[])), 0),
        ];
        let a = aggregate(&units).unwrap();
        units.reverse();
        let b = aggregate(&units).unwrap();
        assert_eq!(a.precision, b.precision);
        assert_eq!(a.recall, b.recall);
        assert_eq!(a.counts, b.counts);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(aggregate(&[]), Err(MetricsError::EmptyInput)));
    }

    #[test]
    fn avg_counts_and_invalid_rate() {
        let mut u1 = unit(score_unit(&ids(&[1]), &ids(&[1, 2])), 2);
        u1.parse_failed = true;
        let u2 = unit(score_unit(&ids(&[2]), &ids(&[2])), 1);
        let r = aggregate(&[u1, u2]).unwrap();
        assert_eq!(r.avg_predicted, 1.5);
        assert_eq!(r.avg_correct, 1.0);
        assert_eq!(r.invalid_output_rate, 0.5);
    }

    #[test]
    fn per_domain_breakdown() {
        let fashion = ScoredUnit {
            domain: Domain::Fashion,
            counts: score_unit(&ids(&[1]), &ids(&[1])),
            predicted: 1,
            parse_failed: false,
        };
        let furniture = ScoredUnit {
            domain: Domain::Furniture,
            counts: score_unit(&ids(&[1]), &ids(&[2])),
            predicted: 1,
            parse_failed: false,
        };
        let r = aggregate(&[fashion, furniture]).unwrap();
        assert_eq!(r.per_domain[&Domain::Fashion].f1, 100.0);
        assert_eq!(r.per_domain[&Domain::Furniture].f1, 0.0);
    }

    #[test]
    fn macro_mode_averages_defined_units() {
        let units = vec![
            unit(score_unit(&ids(&[1]), &ids(&[1])), 1),
            unit(score_unit(&ids(&[1]), &ids(&[2])), 1),
            unit(score_unit(&ids(&[]), &ids(&[])), 0), // skipped
        ];
        let r = aggregate_with(&units, Aggregation::Macro).unwrap();
        assert_eq!(r.precision, 50.0);
        assert_eq!(r.recall, 50.0);
    }

    #[test]
    fn round2_half_up() {
        assert_eq!(round2(5.0866), 5.09);
        assert_eq!(round2(5.085), 5.09);
        assert_eq!(round2(5.084), 5.08);
        assert_eq!(round2(-4.735), -4.74);
        assert_eq!(round2(100.0), 100.0);
    }
}
