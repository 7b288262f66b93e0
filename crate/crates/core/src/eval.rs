//! Match and pose metrics, and parameter sweeps over the localizer.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bmnet::BmnetParams;
use crate::error::{Error, Result};
use crate::pipeline::{localize_batch, LocalizationResult, LocalizeConfig};
use crate::query::QuerySample;
use crate::sfm::{PointId, SfmModel};

/// `(max translation, max rotation in degrees)` accuracy levels.
pub const DEFAULT_THRESHOLDS: [(f64, f64); 3] = [(0.25, 2.0), (0.5, 5.0), (5.0, 10.0)];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MatchReport {
    pub precision: f64,
    pub recall: f64,
    pub true_selected: usize,
    pub selected: usize,
    pub true_available: usize,
    /// False when nothing was selected; `precision` is then reported as 0.
    pub precision_defined: bool,
}

impl MatchReport {
    pub fn from_counts(true_selected: usize, selected: usize, true_available: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self {
            precision: ratio(true_selected, selected),
            recall: ratio(true_selected, true_available),
            true_selected,
            selected,
            true_available,
            precision_defined: selected > 0,
        }
    }

    /// Pools the counts of several reports (micro-average).
    pub fn pooled<'a>(reports: impl IntoIterator<Item = &'a MatchReport>) -> Self {
        let (mut ts, mut s, mut ta) = (0, 0, 0);
        for r in reports {
            ts += r.true_selected;
            s += r.selected;
            ta += r.true_available;
        }
        Self::from_counts(ts, s, ta)
    }
}

/// Scores selected `(keypoint index, point id)` matches against ground
/// truth. The recall denominator is every keypoint with a true partner.
pub fn match_metrics(selected: &[(usize, PointId)], gt: &BTreeMap<usize, PointId>) -> MatchReport {
    let true_selected = selected.iter().filter(|(k, p)| gt.get(k) == Some(p)).count();
    MatchReport::from_counts(true_selected, selected.len(), gt.len())
}

pub fn result_match_metrics(result: &LocalizationResult, sample: &QuerySample) -> MatchReport {
    let selected: Vec<(usize, PointId)> = result.matches.iter().map(|m| (m.keypoint_index, m.point_id)).collect();
    match_metrics(&selected, &sample.gt_correspondences)
}

/// Fraction of queries within each `(max_t, max_r)` level. Failed queries
/// are passed as infinite errors.
pub fn recall_at(errors: &[(f64, f64)], thresholds: &[(f64, f64)]) -> Vec<f64> {
    thresholds
        .iter()
        .map(|&(max_t, max_r)| {
            if errors.is_empty() {
                return 0.0;
            }
            let hits = errors.iter().filter(|(t, r)| *t <= max_t && *r <= max_r).count();
            hits as f64 / errors.len() as f64
        })
        .collect()
}

/// Median; the mean of the two middle values for even counts. Infinite
/// entries sort last. NaN for an empty slice.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 || v[mid - 1] == v[mid] {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PoseReport {
    pub median_translation: f64,
    pub median_rotation_deg: f64,
    /// `(max_t, max_r, fraction)` per accuracy level.
    pub recalls: Vec<(f64, f64, f64)>,
    pub failures: usize,
}

/// Pose statistics where `None` marks a failed query (infinite error).
pub fn pose_report(errors: &[Option<(f64, f64)>], thresholds: &[(f64, f64)]) -> PoseReport {
    let filled: Vec<(f64, f64)> = errors
        .iter()
        .map(|e| e.unwrap_or((f64::INFINITY, f64::INFINITY)))
        .collect();
    let fractions = recall_at(&filled, thresholds);
    PoseReport {
        median_translation: median(&filled.iter().map(|e| e.0).collect::<Vec<_>>()),
        median_rotation_deg: median(&filled.iter().map(|e| e.1).collect::<Vec<_>>()),
        recalls: thresholds.iter().zip(fractions).map(|(&(t, r), f)| (t, r, f)).collect(),
        failures: errors.iter().filter(|e| e.is_none()).count(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    K,
    Ratio,
    TopR,
    M,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k" => Ok(Self::K),
            "ratio" => Ok(Self::Ratio),
            "top_r" | "top-r" => Ok(Self::TopR),
            "m" => Ok(Self::M),
            other => Err(Error::invalid(format!("unknown sweep axis {other:?}"))),
        }
    }
}

impl SweepAxis {
    pub fn apply(&self, config: &LocalizeConfig, value: f64) -> Result<LocalizeConfig> {
        let count = || -> Result<usize> {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(Error::invalid(format!("{value} is not a positive integer")))
            }
        };
        let mut c = config.clone();
        match self {
            Self::K => c.k = count()?,
            Self::Ratio => c.ratio = value,
            Self::TopR => c.top_r = count()?,
            Self::M => c.expand_m = count()?,
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub matches: MatchReport,
    pub pose: PoseReport,
}

/// Match quality and pose accuracy of one configuration over a query set.
pub fn evaluate_batch(
    model: &SfmModel,
    params: &BmnetParams,
    samples: &[QuerySample],
    config: &LocalizeConfig,
) -> Result<(MatchReport, PoseReport, Vec<LocalizationResult>)> {
    let (results, summary) = localize_batch(model, params, samples, config)?;
    let reports: Vec<MatchReport> = results
        .iter()
        .zip(samples)
        .map(|(r, s)| result_match_metrics(r, s))
        .collect();
    Ok((MatchReport::pooled(&reports), summary.pose, results))
}

pub fn sweep_report(
    model: &SfmModel,
    params: &BmnetParams,
    samples: &[QuerySample],
    base: &LocalizeConfig,
    axis: SweepAxis,
    values: &[f64],
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::invalid("sweep needs at least one value"));
    }
    values
        .iter()
        .map(|&value| {
            let config = axis.apply(base, value)?;
            let (matches, pose, _) = evaluate_batch(model, params, samples, &config)?;
            Ok(SweepRow { value, matches, pose })
        })
        .collect()
}

/// CSV with columns `value,precision,recall,mpe,mre,recall@t/r...`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("value,precision,recall,mpe,mre");
    if let Some(first) = rows.first() {
        for (t, r, _) in &first.pose.recalls {
            let _ = write!(out, ",recall@{t}/{r}");
        }
    }
    out.push('\n');
    for row in rows {
        let _ = write!(
            out,
            "{},{},{},{},{}",
            row.value,
            row.matches.precision,
            row.matches.recall,
            row.pose.median_translation,
            row.pose.median_rotation_deg
        );
        for (_, _, f) in &row.pose.recalls {
            let _ = write!(out, ",{f}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(pairs: &[(usize, u32)]) -> BTreeMap<usize, PointId> {
        pairs.iter().map(|&(k, p)| (k, PointId(p))).collect()
    }

    #[test]
    fn match_metric_examples() {
        let truth = gt(&(0..10).map(|k| (k, k as u32)).collect::<Vec<_>>());
        let perfect: Vec<_> = truth.iter().map(|(&k, &p)| (k, p)).collect();
        let r = match_metrics(&perfect, &truth);
        assert_eq!((r.precision, r.recall), (1.0, 1.0));

        let r = match_metrics(&[], &truth);
        assert_eq!((r.precision, r.recall, r.precision_defined), (0.0, 0.0, false));

        let mut half: Vec<_> = perfect[..5].to_vec();
        half.extend((5..10).map(|k| (k, PointId(99))));
        let r = match_metrics(&half, &truth);
        assert_eq!((r.precision, r.recall), (0.5, 0.5));
        assert_eq!((r.true_selected, r.selected, r.true_available), (5, 10, 10));
    }

    #[test]
    fn pooling_is_micro_average() {
        let a = MatchReport::from_counts(1, 1, 4);
        let b = MatchReport::from_counts(3, 9, 4);
        let p = MatchReport::pooled([&a, &b]);
        assert_eq!((p.precision, p.recall), (0.4, 0.5));
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at(&[(0.3, 3.0)], &DEFAULT_THRESHOLDS), vec![0.0, 1.0, 1.0]);
        let inf = (f64::INFINITY, f64::INFINITY);
        assert_eq!(recall_at(&[inf, inf], &DEFAULT_THRESHOLDS), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[0.5, 0.1, 0.3]), 0.3);
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0]), 2.5);
        assert_eq!(median(&[1.0, f64::INFINITY, f64::INFINITY]), f64::INFINITY);
        let report = pose_report(&[Some((0.1, 1.0)), None, Some((0.3, 4.0))], &DEFAULT_THRESHOLDS);
        assert_eq!(report.failures, 1);
        assert_eq!(report.median_translation, 0.3);
    }

    #[test]
    fn csv_shape() {
        let row = SweepRow {
            value: 3.0,
            matches: MatchReport::from_counts(1, 2, 4),
            pose: pose_report(&[Some((0.1, 1.0))], &DEFAULT_THRESHOLDS),
        };
        let csv = sweep_csv(&[row.clone(), row]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "value,precision,recall,mpe,mre,recall@0.25/2,recall@0.5/5,recall@5/10");
        assert_eq!(lines[1], "3,0.5,0.25,0.1,1,1,1,1");
    }
}
