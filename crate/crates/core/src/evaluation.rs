//! Benchmark metrics: recall within paired translation/rotation thresholds
//! and median pose errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::datastore::csv::format_real;
use crate::geometry::{rotation_angle_deg, Pose};
use crate::localization::LocalizationResult;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvaluationError {
    #[error("no ground truth for query `{0}`")]
    MissingGroundTruth(String),
    #[error("no localized queries")]
    NoLocalizedQueries,
    #[error("invalid thresholds: {0}")]
    InvalidBins(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bin {
    pub name: String,
    /// Meters.
    pub max_t: f64,
    /// Degrees.
    pub max_r: f64,
}

/// Threshold pairs, non-decreasing in both limits.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdBins {
    bins: Vec<Bin>,
}

impl ThresholdBins {
    pub fn new(bins: Vec<(&str, f64, f64)>) -> Result<Self, EvaluationError> {
        if bins.is_empty() {
            return Err(EvaluationError::InvalidBins("at least one bin is needed".into()));
        }
        let bins: Vec<Bin> = bins.into_iter().map(|(n, t, r)| Bin { name: n.to_string(), max_t: t, max_r: r }).collect();
        if bins.iter().any(|b| !(b.max_t >= 0.0 && b.max_r >= 0.0)) {
            return Err(EvaluationError::InvalidBins("limits must be non-negative".into()));
        }
        if bins.windows(2).any(|w| w[1].max_t < w[0].max_t || w[1].max_r < w[0].max_r) {
            return Err(EvaluationError::InvalidBins("limits must be non-decreasing".into()));
        }
        Ok(Self { bins })
    }

    pub fn outdoor() -> Self {
        Self::new(vec![("high", 0.25, 2.0), ("mid", 0.5, 5.0), ("low", 5.0, 10.0)]).expect("valid preset")
    }

    pub fn indoor_tight() -> Self {
        Self::new(vec![("high", 0.1, 1.0), ("mid", 0.25, 2.0), ("low", 1.0, 5.0)]).expect("valid preset")
    }

    pub fn seven_scenes() -> Self {
        Self::new(vec![("all", 0.05, 5.0)]).expect("valid preset")
    }

    pub fn bins(&self) -> &[Bin] {
        &self.bins
    }
}

impl FromStr for ThresholdBins {
    type Err = EvaluationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "outdoor" => Ok(Self::outdoor()),
            "indoor_tight" | "indoor" => Ok(Self::indoor_tight()),
            "seven_scenes" | "7scenes" => Ok(Self::seven_scenes()),
            _ => Err(EvaluationError::InvalidBins(format!("unknown preset `{s}` (outdoor, indoor_tight, seven_scenes)"))),
        }
    }
}

/// `(‖c_est − c_gt‖ meters, rotation angle degrees)`
pub fn pose_error(est: &Pose, gt: &Pose) -> (f64, f64) {
    ((est.center() - gt.center()).norm(), rotation_angle_deg(est.rotation(), gt.rotation()))
}

fn errors(
    results: &[LocalizationResult],
    gt: &BTreeMap<String, Pose>,
) -> Result<Vec<Option<(f64, f64)>>, EvaluationError> {
    results
        .iter()
        .map(|r| {
            let truth = gt.get(&r.image_path).ok_or_else(|| EvaluationError::MissingGroundTruth(r.image_path.clone()))?;
            Ok(r.pose.map(|p| pose_error(&p, truth)))
        })
        .collect()
}

/// Percentage of queries localized within each bin, thresholds inclusive.
/// The denominator is the number of results; unlocalized queries count as
/// failures everywhere.
pub fn bucket_recall(
    results: &[LocalizationResult],
    gt: &BTreeMap<String, Pose>,
    bins: &ThresholdBins,
) -> Result<Vec<f64>, EvaluationError> {
    let errs = errors(results, gt)?;
    if errs.is_empty() {
        return Ok(vec![0.0; bins.bins.len()]);
    }
    let recall: Vec<f64> = bins
        .bins
        .iter()
        .map(|b| {
            let hits = errs.iter().flatten().filter(|(t, r)| *t <= b.max_t && *r <= b.max_r).count();
            100.0 * hits as f64 / errs.len() as f64
        })
        .collect();
    debug_assert!(recall.windows(2).all(|w| w[0] <= w[1]));
    Ok(recall)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MedianErrors {
    pub meters: f64,
    pub degrees: f64,
    pub num_localized: usize,
    pub num_unlocalized: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Medians over localized queries only.
pub fn median_errors(
    results: &[LocalizationResult],
    gt: &BTreeMap<String, Pose>,
) -> Result<MedianErrors, EvaluationError> {
    let errs = errors(results, gt)?;
    let localized: Vec<(f64, f64)> = errs.iter().flatten().copied().collect();
    if localized.is_empty() {
        return Err(EvaluationError::NoLocalizedQueries);
    }
    Ok(MedianErrors {
        meters: median(localized.iter().map(|e| e.0).collect()),
        degrees: median(localized.iter().map(|e| e.1).collect()),
        num_localized: localized.len(),
        num_unlocalized: errs.len() - localized.len(),
    })
}

/// Metrics of one query subset.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionMetrics {
    pub name: String,
    pub num_queries: usize,
    pub recall: Vec<f64>,
    pub median: Option<MedianErrors>,
}

pub fn evaluate_condition(
    name: &str,
    results: &[LocalizationResult],
    gt: &BTreeMap<String, Pose>,
    bins: &ThresholdBins,
) -> Result<ConditionMetrics, EvaluationError> {
    let recall = bucket_recall(results, gt, bins)?;
    let median = match median_errors(results, gt) {
        Ok(m) => Some(m),
        Err(EvaluationError::NoLocalizedQueries) => None,
        Err(e) => return Err(e),
    };
    Ok(ConditionMetrics { name: name.to_string(), num_queries: results.len(), recall, median })
}

/// Recall and medians for one or more query conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub bins: ThresholdBins,
    pub conditions: Vec<ConditionMetrics>,
}

impl Report {
    /// Splits queries into conditions by `condition_of(image_path)`.
    pub fn build(
        results: &[LocalizationResult],
        gt: &BTreeMap<String, Pose>,
        bins: &ThresholdBins,
        condition_of: impl Fn(&str) -> String,
    ) -> Result<Self, EvaluationError> {
        let mut groups: BTreeMap<String, Vec<LocalizationResult>> = BTreeMap::new();
        for r in results {
            groups.entry(condition_of(&r.image_path)).or_default().push(r.clone());
        }
        let conditions = groups
            .iter()
            .map(|(name, rs)| evaluate_condition(name, rs, gt, bins))
            .collect::<Result<_, _>>()?;
        Ok(Self { bins: bins.clone(), conditions })
    }

    /// Unweighted mean of every listed bin percentage.
    pub fn average_all_bins(&self) -> f64 {
        let all: Vec<f64> = self.conditions.iter().flat_map(|c| c.recall.iter().copied()).collect();
        if all.is_empty() {
            0.0
        } else {
            all.iter().sum::<f64>() / all.len() as f64
        }
    }

    fn bin_label(&self) -> String {
        self.bins
            .bins
            .iter()
            .map(|b| format!("{}m,{}deg", b.max_t, b.max_r))
            .collect::<Vec<_>>()
            .join(" / ")
    }

    /// Plain-text table: the average over all bins first, then one column
    /// per condition with its recall triplet and medians.
    pub fn to_text(&self) -> String {
        let mut cols = vec![("avg. all bins".to_string(), format!("{:.1}", self.average_all_bins()))];
        for c in &self.conditions {
            let recall = c.recall.iter().map(|r| format!("{r:.1}")).collect::<Vec<_>>().join(" / ");
            cols.push((format!("{} ({} queries)", c.name, c.num_queries), recall));
        }
        let widths: Vec<usize> = cols.iter().map(|(h, v)| h.len().max(v.len())).collect();
        let mut out = String::new();
        let _ = writeln!(out, "recall [%] at {}", self.bin_label());
        let line = |cells: Vec<&str>| {
            cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect::<Vec<_>>().join(" | ")
        };
        let _ = writeln!(out, "{}", line(cols.iter().map(|c| c.0.as_str()).collect()));
        let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
        let _ = writeln!(out, "{}", line(cols.iter().map(|c| c.1.as_str()).collect()));
        let _ = writeln!(out);
        for c in &self.conditions {
            match &c.median {
                Some(m) => {
                    let _ = writeln!(
                        out,
                        "{}: median error {:.4} m, {:.4} deg over {} localized, {} unlocalized",
                        c.name, m.meters, m.degrees, m.num_localized, m.num_unlocalized
                    );
                }
                None => {
                    let _ = writeln!(out, "{}: no localized queries", c.name);
                }
            }
        }
        out
    }

    /// One row per condition and bin, full precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("condition, bin, max_t_m, max_r_deg, recall_percent, median_t_m, median_r_deg, localized, queries\n");
        for c in &self.conditions {
            let (mt, mr, nl) = match &c.median {
                Some(m) => (format_real(m.meters), format_real(m.degrees), m.num_localized),
                None => (String::new(), String::new(), 0),
            };
            for (b, r) in self.bins.bins.iter().zip(&c.recall) {
                let _ = writeln!(
                    out,
                    "{}, {}, {}, {}, {}, {}, {}, {}, {}",
                    c.name,
                    b.name,
                    format_real(b.max_t),
                    format_real(b.max_r),
                    format_real(*r),
                    mt,
                    mr,
                    nl,
                    c.num_queries
                );
            }
        }
        let _ = writeln!(out, "all, avg_all_bins, , , {}, , , , ", format_real(self.average_all_bins()));
        out
    }
}
