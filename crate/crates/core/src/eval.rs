//! FROC analysis: per-lesion sensitivity against false positives per case.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub threshold: f64,
    pub fp_per_case: f64,
    pub sensitivity: f64,
}

/// Stepwise FROC curve, points sorted by ascending threshold (so the first
/// point, at `-inf`, has every candidate above threshold).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocCurve {
    pub points: Vec<FrocPoint>,
    pub n_cases: usize,
    pub n_lesions: usize,
}

/// Builds the exact FROC curve.
///
/// A lesion (positive instances sharing `(case_id, bag_id)`) is detected at
/// threshold `t` when any of its instances scores `>= t`; false positives
/// are negative instances scoring `>= t`, divided by the number of distinct
/// cases.
pub fn froc<S: AsRef<str>>(
    scores: &[f64],
    labels: &[u8],
    case_ids: &[S],
    bag_ids: &[Option<S>],
) -> Result<FrocCurve> {
    let n = scores.len();
    check_dim(n, labels.len())?;
    check_dim(n, case_ids.len())?;
    check_dim(n, bag_ids.len())?;
    if n == 0 {
        return Err(Error::invalid("froc of an empty score set"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let mut lesions: BTreeMap<(&str, &str), f64> = BTreeMap::new();
    let mut negatives = Vec::new();
    let mut cases = BTreeSet::new();
    for i in 0..n {
        cases.insert(case_ids[i].as_ref());
        if labels[i] == 1 {
            let bag = bag_ids[i]
                .as_ref()
                .ok_or_else(|| Error::data("positive instance without bag_id"))?
                .as_ref();
            let best = lesions
                .entry((case_ids[i].as_ref(), bag))
                .or_insert(f64::NEG_INFINITY);
            *best = best.max(scores[i]);
        } else {
            negatives.push(scores[i]);
        }
    }
    if lesions.is_empty() {
        return Err(Error::data("froc needs at least one positive"));
    }
    let mut lesion_max: Vec<f64> = lesions.into_values().collect();
    lesion_max.sort_by(f64::total_cmp);
    negatives.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let n_cases = cases.len();
    let n_lesions = lesion_max.len();
    let at = |t: f64| {
        let detected = lesion_max.len() - lesion_max.partition_point(|&s| s < t);
        let fp = negatives.len() - negatives.partition_point(|&s| s < t);
        FrocPoint {
            threshold: t,
            fp_per_case: fp as f64 / n_cases as f64,
            sensitivity: detected as f64 / n_lesions as f64,
        }
    };
    let mut points = Vec::with_capacity(thresholds.len() + 2);
    points.push(at(f64::NEG_INFINITY));
    points.extend(thresholds.into_iter().filter(|t| t.is_finite()).map(at));
    points.push(FrocPoint {
        threshold: f64::INFINITY,
        fp_per_case: 0.0,
        sensitivity: 0.0,
    });
    Ok(FrocCurve {
        points,
        n_cases,
        n_lesions,
    })
}

/// FROC of `scores` over the samples of `ds`.
pub fn froc_dataset(ds: &Dataset, scores: &[f64]) -> Result<FrocCurve> {
    check_dim(ds.len(), scores.len())?;
    let labels = ds.labels();
    let cases: Vec<&str> = ds.samples().iter().map(|s| s.case_id.as_str()).collect();
    let bags: Vec<Option<&str>> = ds.samples().iter().map(|s| s.bag_id.as_deref()).collect();
    froc(scores, &labels, &cases, &bags)
}

/// Area under the FROC curve over `fp_per_case in [lo, hi]`, divided by
/// `hi - lo`.
///
/// The curve is linearly interpolated between points and held constant past
/// its largest false-positive rate.
pub fn partial_auc(curve: &FrocCurve, lo: f64, hi: f64) -> Result<f64> {
    if !(lo >= 0.0 && hi > lo && hi.is_finite()) {
        return Err(Error::invalid(format!("invalid fp window [{lo}, {hi}]")));
    }
    // ascending false-positive order
    let pts: Vec<(f64, f64)> = curve
        .points
        .iter()
        .rev()
        .map(|p| (p.fp_per_case, p.sensitivity))
        .collect();
    let last = *pts.last().ok_or_else(|| Error::invalid("empty curve"))?;
    if lo >= last.0 {
        return Err(Error::invalid(format!(
            "fp window [{lo}, {hi}] lies beyond the curve's maximum fp rate {}",
            last.0
        )));
    }
    let mut area = 0.0;
    for w in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x1 <= x0 {
            continue;
        }
        let a = x0.max(lo);
        let b = x1.min(hi);
        if b <= a {
            continue;
        }
        let slope = (y1 - y0) / (x1 - x0);
        let ya = y0 + slope * (a - x0);
        let yb = y0 + slope * (b - x0);
        area += 0.5 * (b - a) * (ya + yb);
    }
    if hi > last.0 {
        area += (hi - last.0.max(lo)) * last.1;
    }
    Ok(area / (hi - lo))
}

/// Sensitivity of the curve at a given false-positive rate (linear
/// interpolation, upper envelope on vertical jumps).
pub fn sensitivity_at(curve: &FrocCurve, fp: f64) -> f64 {
    let mut best: f64 = 0.0;
    let pts: Vec<(f64, f64)> = curve
        .points
        .iter()
        .rev()
        .map(|p| (p.fp_per_case, p.sensitivity))
        .collect();
    for w in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 <= fp && fp <= x1 {
            let y = if x1 > x0 {
                y0 + (y1 - y0) * (fp - x0) / (x1 - x0)
            } else {
                y1.max(y0)
            };
            best = best.max(y);
        }
    }
    if let Some(&(x, y)) = pts.last() {
        if fp >= x {
            best = best.max(y);
        }
    }
    best
}

/// Instance-level ROC AUC (Mann-Whitney statistic, ties counted one half).
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_dim(scores.len(), labels.len())?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::data("roc_auc needs both classes"));
    }
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] == 1 {
                rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Delimited text `threshold,fp_per_case,sensitivity` with a header row.
pub fn curve_to_csv(curve: &FrocCurve) -> String {
    let mut out = String::from("threshold,fp_per_case,sensitivity\n");
    for p in &curve.points {
        out.push_str(&format!(
            "{},{},{}\n",
            p.threshold, p.fp_per_case, p.sensitivity
        ));
    }
    out
}
