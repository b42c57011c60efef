//! Classification benchmark: empirical ROC, Mann-Whitney AUC, DeLong and
//! stratified-bootstrap confidence intervals, and per-subgroup AUC tables.

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::{normal_critical, percentile_interval, replicate_rng, sample_variance};
use crate::tabular_io::{SubjectMeta, MISSING};

pub const DEFAULT_LEVEL: f64 = 0.95;
pub const DEFAULT_AUC_BOOTSTRAP: usize = 2000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassifyError {
    #[error("undefined AUC: need at least one positive and one negative (got {n_pos} positive, {n_neg} negative)")]
    UndefinedAuc { n_pos: usize, n_neg: usize },
    #[error("DeLong interval needs at least two positives and two negatives (got {n_pos}, {n_neg})")]
    InsufficientForDelong { n_pos: usize, n_neg: usize },
    #[error("bootstrap needs at least one resample")]
    NoResamples,
    #[error("confidence level must lie in (0, 1), got {0}")]
    BadLevel(f64),
    #[error("non-finite score for record `{0}`")]
    NonFiniteScore(String),
    #[error("unknown metadata attribute `{0}`")]
    UnknownAttribute(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub record_id: String,
    pub scan_id: String,
    pub score: f64,
    /// `true` for the positive class.
    pub label: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum CiMethod {
    Delong,
    Bootstrap { n_resamples: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucEstimate {
    pub auc: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
    pub method: CiMethod,
    pub n_pos: usize,
    pub n_neg: usize,
    /// DeLong variance of the AUC; absent for bootstrap intervals.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

fn split(records: &[ScoredRecord]) -> Result<(Vec<f64>, Vec<f64>), ClassifyError> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for r in records {
        if !r.score.is_finite() {
            return Err(ClassifyError::NonFiniteScore(r.record_id.clone()));
        }
        if r.label {
            pos.push(r.score);
        } else {
            neg.push(r.score);
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(ClassifyError::UndefinedAuc { n_pos: pos.len(), n_neg: neg.len() });
    }
    Ok((pos, neg))
}

/// Mann-Whitney AUC: the fraction of positive/negative pairs ordered
/// correctly, ties counting one half.
pub fn auc(records: &[ScoredRecord]) -> Result<f64, ClassifyError> {
    let (pos, neg) = split(records)?;
    Ok(auc_from_scores(&pos, &neg))
}

/// AUC of two non-empty score samples. Works on doubled integer counts so the
/// result equals exhaustive pair counting bit for bit.
pub fn auc_from_scores(pos: &[f64], neg: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut twice_concordant: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        twice_concordant += 2 * p * neg_below + p * n;
        neg_below += n;
        i = j;
    }
    twice_concordant as f64 / (2 * pos.len() as u64 * neg.len() as u64) as f64
}

/// Empirical ROC as `(fpr, tpr)` vertices from `(0, 0)` to `(1, 1)`, one
/// vertex per distinct score.
pub fn roc_curve(records: &[ScoredRecord]) -> Result<Vec<(f64, f64)>, ClassifyError> {
    let (pos, neg) = split(records)?;
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let mut out = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((fp as f64 / nn, tp as f64 / np));
    }
    Ok(out)
}

/// Fraction of `others` strictly below `s` plus half of those equal to it.
/// `others` must be sorted ascending.
fn placement(s: f64, others_sorted: &[f64]) -> f64 {
    let below = others_sorted.partition_point(|&o| o < s);
    let not_above = others_sorted.partition_point(|&o| o <= s);
    (below as f64 + 0.5 * (not_above - below) as f64) / others_sorted.len() as f64
}

/// DeLong structural components `(V10 per positive, V01 per negative)`.
pub fn delong_components(pos: &[f64], neg: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut ps = pos.to_vec();
    let mut ns = neg.to_vec();
    ps.sort_by(f64::total_cmp);
    ns.sort_by(f64::total_cmp);
    let v10 = pos.iter().map(|&s| placement(s, &ns)).collect();
    // For a negative, the share of positives scoring above it (ties half).
    let v01 = neg.iter().map(|&s| 1.0 - placement(s, &ps)).collect();
    (v10, v01)
}

pub fn delong_ci(records: &[ScoredRecord], level: f64) -> Result<AucEstimate, ClassifyError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(ClassifyError::BadLevel(level));
    }
    let (pos, neg) = split(records)?;
    if pos.len() < 2 || neg.len() < 2 {
        return Err(ClassifyError::InsufficientForDelong { n_pos: pos.len(), n_neg: neg.len() });
    }
    let a = auc_from_scores(&pos, &neg);
    let (v10, v01) = delong_components(&pos, &neg);
    let variance = (sample_variance(&v10) / pos.len() as f64 + sample_variance(&v01) / neg.len() as f64).max(0.0);
    let (ci_low, ci_high, note) = if variance == 0.0 {
        (a, a, Some("degenerate variance".to_string()))
    } else {
        let half = normal_critical(level) * variance.sqrt();
        ((a - half).max(0.0), (a + half).min(1.0), None)
    };
    Ok(AucEstimate {
        auc: a,
        ci_low,
        ci_high,
        level,
        method: CiMethod::Delong,
        n_pos: pos.len(),
        n_neg: neg.len(),
        variance: Some(variance),
        note,
    })
}

/// Percentile bootstrap that resamples positives and negatives separately,
/// preserving both class counts in every replicate.
pub fn bootstrap_auc_ci(
    records: &[ScoredRecord],
    n_resamples: usize,
    seed: u64,
    level: f64,
) -> Result<AucEstimate, ClassifyError> {
    if n_resamples == 0 {
        return Err(ClassifyError::NoResamples);
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(ClassifyError::BadLevel(level));
    }
    let (pos, neg) = split(records)?;
    let a = auc_from_scores(&pos, &neg);
    let reps: Vec<f64> = (0..n_resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = replicate_rng(seed, r);
            let p: Vec<f64> = (0..pos.len()).map(|_| pos[rng.gen_range(0..pos.len())]).collect();
            let n: Vec<f64> = (0..neg.len()).map(|_| neg[rng.gen_range(0..neg.len())]).collect();
            auc_from_scores(&p, &n)
        })
        .collect();
    let (lo, hi) = percentile_interval(&reps, level);
    Ok(AucEstimate {
        auc: a,
        ci_low: lo,
        ci_high: hi,
        level,
        method: CiMethod::Bootstrap { n_resamples, seed },
        n_pos: pos.len(),
        n_neg: neg.len(),
        variance: None,
        note: None,
    })
}

pub fn estimate(records: &[ScoredRecord], method: CiMethod, level: f64) -> Result<AucEstimate, ClassifyError> {
    match method {
        CiMethod::Delong => delong_ci(records, level),
        CiMethod::Bootstrap { n_resamples, seed } => bootstrap_auc_ci(records, n_resamples, seed, level),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupRow {
    pub group: String,
    pub n: usize,
    pub n_pos: usize,
    pub n_neg: usize,
    /// `None` marks a group too small for the chosen interval method.
    pub estimate: Option<AucEstimate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub insufficient: Option<String>,
}

/// One row per distinct value of `group_by`, ordered by value. Records whose
/// scan has no metadata, or an empty value, land in `(missing)`.
pub fn subgroup_report(
    records: &[ScoredRecord],
    meta: &[SubjectMeta],
    group_by: &str,
    method: CiMethod,
    level: f64,
) -> Result<Vec<SubgroupRow>, ClassifyError> {
    if !meta.iter().any(|m| m.attributes.iter().any(|(k, _)| k == group_by)) {
        return Err(ClassifyError::UnknownAttribute(group_by.to_string()));
    }
    let by_scan: HashMap<&str, &SubjectMeta> = meta.iter().map(|m| (m.scan_id.as_str(), m)).collect();
    let mut groups: Vec<(String, Vec<ScoredRecord>)> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for r in records {
        let key = by_scan.get(r.scan_id.as_str()).map_or(MISSING, |m| m.group_key(group_by)).to_string();
        let slot = *index.entry(key.clone()).or_insert_with(|| {
            groups.push((key, Vec::new()));
            groups.len() - 1
        });
        groups[slot].1.push(r.clone());
    }
    groups.sort_by(|a, b| a.0.cmp(&b.0));
    groups
        .into_iter()
        .map(|(group, rs)| {
            let n_pos = rs.iter().filter(|r| r.label).count();
            let n_neg = rs.len() - n_pos;
            let (estimate, insufficient) = match estimate(&rs, method, level) {
                Ok(e) => (Some(e), None),
                Err(e @ (ClassifyError::UndefinedAuc { .. } | ClassifyError::InsufficientForDelong { .. })) => {
                    (None, Some(e.to_string()))
                }
                Err(e) => return Err(e),
            };
            Ok(SubgroupRow { group, n: rs.len(), n_pos, n_neg, estimate, insufficient })
        })
        .collect()
}
