//! Unknown-pixel AUROC, ROC curves, closed-set accuracy and scenario reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{LabelMask, LocoSpec};
use crate::fsutil::atomic_write;
use crate::openset::{OpenSetPrediction, ThresholdSpec};
use crate::{CoreSegError, Result};

/// Keeps only pixels not masked out by `ignore`.
fn filtered<'a>(
    scores: &'a [f64],
    truth: &'a [bool],
    ignore: Option<&'a [bool]>,
) -> Result<impl Iterator<Item = (f64, bool)> + 'a> {
    if scores.len() != truth.len() || ignore.is_some_and(|i| i.len() != scores.len()) {
        return Err(CoreSegError::shape("scores, truth and ignore mask differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(CoreSegError::invalid("NaN score"));
    }
    Ok(scores
        .iter()
        .zip(truth)
        .enumerate()
        .filter(move |(i, _)| !ignore.is_some_and(|m| m[*i]))
        .map(|(_, (&s, &t))| (s, t)))
}

/// Probability that a random unknown pixel scores above a random known pixel,
/// ties counting one half. Rank-sum formulation, `O(n log n)`.
///
/// `truth[i]` is true for unknown pixels; `ignore[i]` drops a pixel entirely.
pub fn auroc_unknown(scores: &[f64], truth: &[bool], ignore: Option<&[bool]>) -> Result<f64> {
    let mut pairs: Vec<(f64, bool)> = filtered(scores, truth, ignore)?.collect();
    let n_pos = pairs.iter().filter(|p| p.1).count() as u128;
    let n_neg = pairs.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(CoreSegError::UndefinedAuroc(format!(
            "{n_pos} unknown and {n_neg} known pixels"
        )));
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Twice the rank sum of the positives keeps tied (half) ranks integral.
    let mut twice_rank_sum: u128 = 0;
    let mut start = 0;
    while start < pairs.len() {
        let mut end = start + 1;
        while end < pairs.len() && pairs[end].0 == pairs[start].0 {
            end += 1;
        }
        let positives = pairs[start..end].iter().filter(|p| p.1).count() as u128;
        twice_rank_sum += positives * (start as u128 + 1 + end as u128);
        start = end;
    }
    let twice_u = twice_rank_sum - n_pos * (n_pos + 1);
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// ROC curve over unique score thresholds, highest first. Point `j` predicts
/// "unknown" for every score `>= thresholds[j]`; the first point uses `+inf`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub thresholds: Vec<f64>,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
    pub auroc: f64,
}

pub fn roc_curve(scores: &[f64], truth: &[bool], ignore: Option<&[bool]>) -> Result<RocCurve> {
    let mut pairs: Vec<(f64, bool)> = filtered(scores, truth, ignore)?.collect();
    let n_pos = pairs.iter().filter(|p| p.1).count();
    let n_neg = pairs.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(CoreSegError::UndefinedAuroc(format!(
            "{n_pos} unknown and {n_neg} known pixels"
        )));
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut thresholds = vec![f64::INFINITY];
    let mut tpr = vec![0.0];
    let mut fpr = vec![0.0];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < pairs.len() {
        let t = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == t {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        thresholds.push(t);
        tpr.push(tp as f64 / n_pos as f64);
        fpr.push(fp as f64 / n_neg as f64);
    }
    let auroc = trapezoid(&fpr, &tpr);
    Ok(RocCurve {
        thresholds,
        tpr,
        fpr,
        auroc,
    })
}

pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| (xs[1] - xs[0]) * (ys[0] + ys[1]) * 0.5)
        .sum()
}

impl RocCurve {
    /// `threshold,fpr,tpr` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr\n");
        for ((t, f), p) in self.thresholds.iter().zip(&self.fpr).zip(&self.tpr) {
            out.push_str(&format!("{t},{f},{p}\n"));
        }
        out
    }
}

/// Pooled pixel counts behind a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PixelCounts {
    pub total: usize,
    pub ignored: usize,
    pub known: usize,
    pub unknown: usize,
}

/// Metrics for one LOCO scenario, pooled over all test pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: String,
    pub held_out: Vec<String>,
    /// `None` when the scenario has no unknown (or no known) pixels.
    pub auroc_unknown: Option<f64>,
    /// Closed-set prediction accuracy on truly known pixels.
    pub closed_accuracy: Option<f64>,
    /// Open-set label accuracy on truly known pixels (rejections count as errors).
    pub open_known_accuracy: Option<f64>,
    /// Fraction of truly unknown pixels flagged unknown.
    pub unknown_recall: Option<f64>,
    pub threshold: ThresholdSpec,
    /// Best quantile found by sweeping the test split itself; reported, never used.
    pub oracle_threshold: Option<ThresholdSpec>,
    pub counts: PixelCounts,
}

/// Scores predictions against LOCO ground truth (labels already remapped,
/// held-out pixels = UNKNOWN).
pub fn evaluate_scenario(
    scenario: &str,
    predictions: &[OpenSetPrediction],
    truths: &[LabelMask],
    loco: &LocoSpec,
) -> Result<EvalReport> {
    if predictions.len() != truths.len() {
        return Err(CoreSegError::shape(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    let threshold = predictions
        .first()
        .map(|p| p.spec.clone())
        .ok_or_else(|| CoreSegError::invalid("no predictions to evaluate"))?;
    let mut counts = PixelCounts::default();
    let mut scores = Vec::new();
    let mut is_unknown = Vec::new();
    let (mut closed_hit, mut open_hit, mut unk_hit) = (0usize, 0usize, 0usize);
    for (pred, truth) in predictions.iter().zip(truths) {
        if pred.labels.dim() != truth.dim() {
            return Err(CoreSegError::shape(format!(
                "prediction {:?} vs truth {:?}",
                pred.labels.dim(),
                truth.dim()
            )));
        }
        let unknown = truth.unknown();
        for (((&t, &closed), &open), &s) in truth
            .labels
            .iter()
            .zip(pred.closed_labels.labels.iter())
            .zip(pred.labels.labels.iter())
            .zip(pred.score_map.min_error.iter())
        {
            counts.total += 1;
            if t == crate::data::IGNORE {
                counts.ignored += 1;
                continue;
            }
            scores.push(s);
            is_unknown.push(t == unknown);
            if t == unknown {
                counts.unknown += 1;
                unk_hit += (open == pred.labels.unknown()) as usize;
            } else {
                counts.known += 1;
                closed_hit += (closed == t) as usize;
                open_hit += (open == t) as usize;
            }
        }
    }
    let auroc = match auroc_unknown(&scores, &is_unknown, None) {
        Ok(a) => Some(a),
        Err(CoreSegError::UndefinedAuroc(_)) => None,
        Err(e) => return Err(e),
    };
    let frac = |a: usize, n: usize| (n > 0).then(|| a as f64 / n as f64);
    Ok(EvalReport {
        scenario: scenario.to_string(),
        held_out: loco.held_out_names(),
        auroc_unknown: auroc,
        closed_accuracy: frac(closed_hit, counts.known),
        open_known_accuracy: frac(open_hit, counts.known),
        unknown_recall: frac(unk_hit, counts.unknown),
        threshold,
        oracle_threshold: None,
        counts,
    })
}

/// Mean and sample standard deviation (n - 1) of the defined AUROCs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Aggregate {
            mean,
            std,
            count: values.len(),
        })
    }

    /// `.854 ± .080` style.
    pub fn display(&self) -> String {
        format!("{:.3} ± {:.3}", self.mean, self.std)
    }
}

/// All scenario reports of a LOCO suite plus the aggregate row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub scenarios: Vec<EvalReport>,
    /// Scenario name and error message for every scenario that failed.
    pub failures: Vec<(String, String)>,
    pub aggregate: Option<Aggregate>,
}

impl SuiteReport {
    pub fn new(scenarios: Vec<EvalReport>, failures: Vec<(String, String)>) -> Self {
        let aurocs: Vec<f64> = scenarios.iter().filter_map(|r| r.auroc_unknown).collect();
        SuiteReport {
            aggregate: Aggregate::of(&aurocs),
            scenarios,
            failures,
        }
    }

    pub const CSV_HEADER: &'static str =
        "scenario,held_out,auroc_unknown,closed_accuracy,open_known_accuracy,unknown_recall,q,tau,known_pixels,unknown_pixels";

    /// One CSV row per scenario, then an `Avg.` row.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"));
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.scenarios {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.scenario,
                r.held_out.join("+"),
                opt(r.auroc_unknown),
                opt(r.closed_accuracy),
                opt(r.open_known_accuracy),
                opt(r.unknown_recall),
                r.threshold.q,
                r.threshold.tau,
                r.counts.known,
                r.counts.unknown
            ));
        }
        if let Some(a) = &self.aggregate {
            out.push_str(&format!("Avg.,,{:.6} ± {:.6},,,,,,,\n", a.mean, a.std));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        atomic_write(&dir.join("suite_report.json"), serde_json::to_string_pretty(self)?.as_bytes())?;
        atomic_write(&dir.join("suite_report.csv"), self.to_csv().as_bytes())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// O(n^2) pairwise oracle in half-units.
    fn brute_force(scores: &[f64], truth: &[bool]) -> f64 {
        let (mut twice, mut pairs) = (0u64, 0u64);
        for (i, &si) in scores.iter().enumerate() {
            if !truth[i] {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if truth[j] {
                    continue;
                }
                pairs += 1;
                twice += if si > sj { 2 } else if si == sj { 1 } else { 0 };
            }
        }
        twice as f64 / (2 * pairs) as f64
    }

    #[test]
    fn perfect_separation_and_all_ties() {
        let s = [0.1, 0.2, 0.8, 0.9];
        let t = [false, false, true, true];
        assert_eq!(auroc_unknown(&s, &t, None).unwrap(), 1.0);
        assert_eq!(auroc_unknown(&[0.3; 4], &t, None).unwrap(), 0.5);
    }

    #[test]
    fn four_pair_example() {
        // known {0.1, 0.4}, unknown {0.3, 0.5}: 3 wins of 4 pairs.
        let s = [0.1, 0.4, 0.3, 0.5];
        let t = [false, false, true, true];
        assert_eq!(brute_force(&s, &t), 0.75);
        assert_eq!(auroc_unknown(&s, &t, None).unwrap(), 0.75);
    }

    #[test]
    fn ignored_pixels_and_single_class() {
        let s = [0.1, 0.9, 100.0];
        let t = [false, true, false];
        assert_eq!(auroc_unknown(&s, &t, Some(&[false, false, true])).unwrap(), 1.0);
        assert!(matches!(
            auroc_unknown(&s, &[true; 3], None),
            Err(CoreSegError::UndefinedAuroc(_))
        ));
    }

    #[test]
    fn roc_through_corner_when_separated() {
        let c = roc_curve(&[0.1, 0.9], &[false, true], None).unwrap();
        assert!(c.fpr.iter().zip(&c.tpr).any(|(&f, &t)| f == 0.0 && t == 1.0));
        assert_eq!(c.auroc, 1.0);
    }

    #[test]
    fn aggregate_uses_sample_std() {
        let a = Aggregate::of(&[0.88, 0.93, 0.71, 0.87, 0.87]).unwrap();
        assert!((a.mean - 0.852).abs() < 1e-12);
        assert!((a.std - 0.0832).abs() < 1e-3);
    }

    proptest! {
        #[test]
        fn rank_auroc_equals_pairwise(
            data in proptest::collection::vec((0u8..12, any::<bool>()), 2..300)
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 * 0.1).collect();
            let truth: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assume!(truth.iter().any(|&t| t) && truth.iter().any(|&t| !t));
            let a = auroc_unknown(&scores, &truth, None).unwrap();
            prop_assert_eq!(a, brute_force(&scores, &truth));
            let roc = roc_curve(&scores, &truth, None).unwrap();
            prop_assert!((roc.auroc - a).abs() < 1e-9);
            prop_assert!(roc.tpr.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(roc.fpr.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn monotone_transform_and_sign_flip(
            raw in proptest::collection::vec((-1000i32..1000, any::<bool>()), 2..200)
        ) {
            let mut seen = std::collections::HashSet::new();
            let data: Vec<_> = raw.into_iter().filter(|d| seen.insert(d.0)).collect();
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 100.0).collect();
            let truth: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assume!(truth.iter().any(|&t| t) && truth.iter().any(|&t| !t));
            let a = auroc_unknown(&scores, &truth, None).unwrap();
            let warped: Vec<f64> = scores.iter().map(|s| s.exp() + 3.0 * s).collect();
            prop_assert_eq!(a, auroc_unknown(&warped, &truth, None).unwrap());
            let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
            prop_assert!((auroc_unknown(&flipped, &truth, None).unwrap() - (1.0 - a)).abs() < 1e-12);
        }
    }
}
