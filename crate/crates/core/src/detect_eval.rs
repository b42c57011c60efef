//! Detection benchmark: candidate-to-lesion matching with an exclusion list,
//! FROC construction, sensitivities at the seven fixed FP-per-scan rates and
//! the Competition Performance Metric (their mean).
//!
//! Matching rules:
//!
//! * a candidate hitting one or more annotations is assigned to exactly one of
//!   them (greatest overlap, then nearest center, then smallest `nodule_id`)
//!   and is never a false positive;
//! * a candidate hitting no annotation but some exclusion entry is ignored;
//! * everything else is a false positive;
//! * an annotation's hit score is the highest probability among its assigned
//!   candidates.
//!
//! Operating points are taken at every distinct positive probability among
//! annotation hit scores and false positives. A probability of exactly 0 is
//! never a detection.

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{hit, GeometryError, HitCriterion};
use crate::stats::{percentile_interval, replicate_rng};
use crate::tabular_io::{Annotation, Candidate, ScanManifest, SubjectMeta};

/// FP-per-scan rates averaged by the CPM.
pub const CPM_FP_RATES: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];
pub const DEFAULT_FROC_BOOTSTRAP: usize = 1000;
/// Redraws allowed per replicate when a resample contains no annotation.
pub const MAX_BOOTSTRAP_REDRAWS: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectError {
    #[error("{kind} references scan `{scan_id}` which is not in the scan manifest")]
    ScanNotInManifest { kind: &'static str, scan_id: String },
    #[error("{kind} `{scan_id}`/`{nodule_id}`: {source}")]
    Geometry {
        kind: &'static str,
        scan_id: String,
        nodule_id: String,
        #[source]
        source: GeometryError,
    },
    #[error("scan manifest is empty")]
    EmptyManifest,
    #[error("FROC needs at least one annotation")]
    NoAnnotations,
    #[error("bootstrap needs at least one resample")]
    NoResamples,
    #[error("bootstrap replicate {replicate} drew no annotated scan in {redraws} attempts")]
    DegenerateBootstrap { replicate: usize, redraws: usize },
    #[error("unknown metadata attribute `{0}`")]
    UnknownAttribute(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum CandidateStatus {
    /// Assigned to the annotation at this index of [`MatchResult::annotations`].
    TruePositive { annotation: usize },
    FalsePositive,
    Ignored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationOutcome {
    pub scan: usize,
    pub nodule_id: String,
    /// Highest probability among assigned candidates, `None` when missed.
    pub hit_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateOutcome {
    pub scan: usize,
    pub probability: f64,
    pub status: CandidateStatus,
}

/// Outcome of matching. Scans are referred to by their manifest index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub scan_ids: Vec<String>,
    pub annotations: Vec<AnnotationOutcome>,
    pub candidates: Vec<CandidateOutcome>,
}

impl MatchResult {
    pub fn scan_count(&self) -> usize {
        self.scan_ids.len()
    }

    pub fn count(&self, pred: impl Fn(&CandidateStatus) -> bool) -> usize {
        self.candidates.iter().filter(|c| pred(&c.status)).count()
    }

    /// Per-scan view: hit scores and false-positive probabilities.
    pub fn tallies(&self) -> Vec<ScanTally> {
        let mut t = vec![ScanTally::default(); self.scan_count()];
        for a in &self.annotations {
            t[a.scan].hit_scores.push(a.hit_score);
        }
        for c in &self.candidates {
            if c.status == CandidateStatus::FalsePositive {
                t[c.scan].fp_probabilities.push(c.probability);
            }
        }
        t
    }

    /// Keeps only the scans whose manifest index satisfies `keep`.
    pub fn restrict(&self, keep: impl Fn(usize) -> bool) -> MatchResult {
        let mut remap = HashMap::new();
        let mut scan_ids = Vec::new();
        for (i, id) in self.scan_ids.iter().enumerate() {
            if keep(i) {
                remap.insert(i, scan_ids.len());
                scan_ids.push(id.clone());
            }
        }
        let mut ann_remap = HashMap::new();
        let mut annotations = Vec::new();
        for (i, a) in self.annotations.iter().enumerate() {
            if let Some(&s) = remap.get(&a.scan) {
                ann_remap.insert(i, annotations.len());
                annotations.push(AnnotationOutcome { scan: s, ..a.clone() });
            }
        }
        let candidates = self
            .candidates
            .iter()
            .filter_map(|c| {
                let s = *remap.get(&c.scan)?;
                let status = match c.status {
                    CandidateStatus::TruePositive { annotation } => {
                        CandidateStatus::TruePositive { annotation: ann_remap[&annotation] }
                    }
                    other => other,
                };
                Some(CandidateOutcome { scan: s, probability: c.probability, status })
            })
            .collect();
        MatchResult { scan_ids, annotations, candidates }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScanTally {
    pub hit_scores: Vec<Option<f64>>,
    pub fp_probabilities: Vec<f64>,
}

fn check_geometry(kind: &'static str, anns: &[Annotation], crit: &HitCriterion) -> Result<(), DetectError> {
    for a in anns {
        crit.check(&a.geometry).map_err(|source| DetectError::Geometry {
            kind,
            scan_id: a.scan_id.clone(),
            nodule_id: a.nodule_id.clone(),
            source,
        })?;
    }
    Ok(())
}

/// Matches candidates to annotations scan by scan.
pub fn match_candidates(
    candidates: &[Candidate],
    annotations: &[Annotation],
    exclusions: &[Annotation],
    manifest: &ScanManifest,
    crit: &HitCriterion,
) -> Result<MatchResult, DetectError> {
    if manifest.is_empty() {
        return Err(DetectError::EmptyManifest);
    }
    check_geometry("annotation", annotations, crit)?;
    check_geometry("exclusion", exclusions, crit)?;

    let index: HashMap<&str, usize> = manifest.ids().iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let n = manifest.len();
    let mut ann_by_scan: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut cand_by_scan: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut excl_by_scan: Vec<Vec<&Annotation>> = vec![Vec::new(); n];
    for (i, a) in annotations.iter().enumerate() {
        let s = *index
            .get(a.scan_id.as_str())
            .ok_or_else(|| DetectError::ScanNotInManifest { kind: "annotation", scan_id: a.scan_id.clone() })?;
        ann_by_scan[s].push(i);
    }
    for (i, c) in candidates.iter().enumerate() {
        let s = *index
            .get(c.scan_id.as_str())
            .ok_or_else(|| DetectError::ScanNotInManifest { kind: "candidate", scan_id: c.scan_id.clone() })?;
        cand_by_scan[s].push(i);
    }
    // Exclusion lists usually cover a whole dataset; entries for scans outside
    // the manifest are irrelevant.
    for e in exclusions {
        if let Some(&s) = index.get(e.scan_id.as_str()) {
            excl_by_scan[s].push(e);
        }
    }

    // Annotation outcomes are laid out in manifest order, then file order.
    let mut ann_slot = vec![0usize; annotations.len()];
    let mut ordered_anns = Vec::with_capacity(annotations.len());
    for (s, list) in ann_by_scan.iter().enumerate() {
        for &i in list {
            ann_slot[i] = ordered_anns.len();
            ordered_anns.push((s, i));
        }
    }

    let per_scan: Vec<Vec<(usize, CandidateStatus)>> = (0..n)
        .into_par_iter()
        .map(|s| {
            cand_by_scan[s]
                .iter()
                .map(|&ci| {
                    let c = &candidates[ci];
                    let status = assign(c, &ann_by_scan[s], annotations, crit)
                        .map(|ai| CandidateStatus::TruePositive { annotation: ann_slot[ai] })
                        .unwrap_or_else(|| {
                            let excluded = excl_by_scan[s]
                                .iter()
                                .any(|e| hit(&c.location, &e.geometry, crit).expect("geometry checked"));
                            if excluded {
                                CandidateStatus::Ignored
                            } else {
                                CandidateStatus::FalsePositive
                            }
                        });
                    (ci, status)
                })
                .collect()
        })
        .collect();

    let mut status = vec![CandidateStatus::FalsePositive; candidates.len()];
    for (ci, st) in per_scan.into_iter().flatten() {
        status[ci] = st;
    }

    let mut outcomes: Vec<AnnotationOutcome> = ordered_anns
        .iter()
        .map(|&(s, i)| AnnotationOutcome { scan: s, nodule_id: annotations[i].nodule_id.clone(), hit_score: None })
        .collect();
    let cand_outcomes: Vec<CandidateOutcome> = candidates
        .iter()
        .zip(&status)
        .map(|(c, &st)| {
            if let CandidateStatus::TruePositive { annotation } = st {
                let slot = &mut outcomes[annotation].hit_score;
                *slot = Some(slot.map_or(c.probability, |p: f64| p.max(c.probability)));
            }
            CandidateOutcome { scan: index[c.scan_id.as_str()], probability: c.probability, status: st }
        })
        .collect();

    Ok(MatchResult { scan_ids: manifest.ids().to_vec(), annotations: outcomes, candidates: cand_outcomes })
}

/// Picks the annotation a candidate is credited to, if it hits any.
fn assign(c: &Candidate, scan_anns: &[usize], annotations: &[Annotation], crit: &HitCriterion) -> Option<usize> {
    scan_anns
        .iter()
        .copied()
        .filter(|&ai| hit(&c.location, &annotations[ai].geometry, crit).expect("geometry checked"))
        .map(|ai| {
            let g = &annotations[ai].geometry;
            (ai, crit.overlap(&c.location, g), c.location.distance_sq(&g.center()))
        })
        .min_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then(a.2.total_cmp(&b.2))
                .then_with(|| annotations[a.0].nodule_id.cmp(&annotations[b.0].nodule_id))
        })
        .map(|(ai, _, _)| ai)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub fp_per_scan: f64,
    pub sensitivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocCurve {
    /// Ordered by descending threshold.
    pub points: Vec<OperatingPoint>,
    pub fp_rates: [f64; 7],
    pub sensitivities: [f64; 7],
    pub cpm: f64,
    pub n_annotations: usize,
    pub n_scans: usize,
}

pub fn froc(m: &MatchResult) -> Result<FrocCurve, DetectError> {
    let hits: Vec<Option<f64>> = m.annotations.iter().map(|a| a.hit_score).collect();
    let fps: Vec<f64> = m
        .candidates
        .iter()
        .filter(|c| c.status == CandidateStatus::FalsePositive)
        .map(|c| c.probability)
        .collect();
    froc_from_scores(&hits, &fps, m.scan_count())
}

/// FROC from pooled annotation hit scores and false-positive probabilities.
pub fn froc_from_scores(
    hit_scores: &[Option<f64>],
    fp_probabilities: &[f64],
    n_scans: usize,
) -> Result<FrocCurve, DetectError> {
    if hit_scores.is_empty() {
        return Err(DetectError::NoAnnotations);
    }
    if n_scans == 0 {
        return Err(DetectError::EmptyManifest);
    }
    let mut hits: Vec<f64> = hit_scores.iter().flatten().copied().filter(|&p| p > 0.0).collect();
    let mut fps: Vec<f64> = fp_probabilities.iter().copied().filter(|&p| p > 0.0).collect();
    let desc = |a: &f64, b: &f64| b.total_cmp(a);
    hits.sort_by(desc);
    fps.sort_by(desc);

    let n_ann = hit_scores.len() as f64;
    let scans = n_scans as f64;
    let mut points = Vec::with_capacity(hits.len() + fps.len());
    let (mut hi, mut fi) = (0usize, 0usize);
    loop {
        let t = match (hits.get(hi), fps.get(fi)) {
            (None, None) => break,
            (Some(&h), None) => h,
            (None, Some(&f)) => f,
            (Some(&h), Some(&f)) => h.max(f),
        };
        while hi < hits.len() && hits[hi] >= t {
            hi += 1;
        }
        while fi < fps.len() && fps[fi] >= t {
            fi += 1;
        }
        points.push(OperatingPoint { threshold: t, fp_per_scan: fi as f64 / scans, sensitivity: hi as f64 / n_ann });
    }

    let sensitivities = CPM_FP_RATES.map(|f| interpolate_sensitivity(&points, f));
    let cpm = sensitivities.iter().sum::<f64>() / CPM_FP_RATES.len() as f64;
    Ok(FrocCurve {
        points,
        fp_rates: CPM_FP_RATES,
        sensitivities,
        cpm,
        n_annotations: hit_scores.len(),
        n_scans,
    })
}

/// Sensitivity at FP rate `f` on the piecewise-linear FROC through `points`
/// (which must be ordered by descending threshold).
///
/// Below the first point the curve runs linearly from the origin; past the
/// last point it stays flat. Where several points share an FP rate the curve
/// is vertical there; landing exactly on such a rate yields the highest of
/// their sensitivities. An empty curve has sensitivity 0 everywhere.
pub fn interpolate_sensitivity(points: &[OperatingPoint], f: f64) -> f64 {
    let Some(first) = points.first() else {
        return 0.0;
    };
    if f < first.fp_per_scan {
        return first.sensitivity * f / first.fp_per_scan;
    }
    // Index of the first point strictly to the right of f.
    let right = points.partition_point(|p| p.fp_per_scan <= f);
    let left = &points[right - 1];
    if left.fp_per_scan == f || right == points.len() {
        return left.sensitivity;
    }
    let r = &points[right];
    left.sensitivity + (r.sensitivity - left.sensitivity) * (f - left.fp_per_scan) / (r.fp_per_scan - left.fp_per_scan)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocBootstrap {
    pub method: String,
    pub n_resamples: usize,
    pub seed: u64,
    pub level: f64,
    pub sensitivities: [Interval; 7],
    pub cpm: Interval,
    /// Replicates redrawn because they contained no annotation.
    pub redraws: usize,
}

/// Scan-level percentile bootstrap of the fixed-rate sensitivities and CPM.
pub fn froc_bootstrap(m: &MatchResult, n_resamples: usize, seed: u64) -> Result<FrocBootstrap, DetectError> {
    if n_resamples == 0 {
        return Err(DetectError::NoResamples);
    }
    if m.annotations.is_empty() {
        return Err(DetectError::NoAnnotations);
    }
    let tallies = m.tallies();
    let n = tallies.len();
    let replicates: Vec<([f64; 7], f64, usize)> = (0..n_resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = replicate_rng(seed, r);
            for attempt in 0..MAX_BOOTSTRAP_REDRAWS {
                let picks: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
                if picks.iter().all(|&s| tallies[s].hit_scores.is_empty()) {
                    continue;
                }
                let mut hits = Vec::new();
                let mut fps = Vec::new();
                for &s in &picks {
                    hits.extend_from_slice(&tallies[s].hit_scores);
                    fps.extend_from_slice(&tallies[s].fp_probabilities);
                }
                let c = froc_from_scores(&hits, &fps, n)?;
                return Ok((c.sensitivities, c.cpm, attempt));
            }
            Err(DetectError::DegenerateBootstrap { replicate: r, redraws: MAX_BOOTSTRAP_REDRAWS })
        })
        .collect::<Result<_, _>>()?;

    let level = 0.95;
    let interval = |vals: Vec<f64>| {
        let (low, high) = percentile_interval(&vals, level);
        Interval { low, high }
    };
    let sensitivities = std::array::from_fn(|k| interval(replicates.iter().map(|r| r.0[k]).collect()));
    let cpm = interval(replicates.iter().map(|r| r.1).collect());
    Ok(FrocBootstrap {
        method: "percentile".into(),
        n_resamples,
        seed,
        level,
        sensitivities,
        cpm,
        redraws: replicates.iter().map(|r| r.2).sum(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocGroupRow {
    pub group: String,
    pub n_scans: usize,
    pub n_annotations: usize,
    /// `None` when the group has no annotation.
    pub curve: Option<FrocCurve>,
}

/// FROC per value of a metadata attribute. Scans without metadata fall in the
/// `(missing)` group. Rows are ordered by group name.
pub fn froc_by_group(m: &MatchResult, meta: &[SubjectMeta], attribute: &str) -> Result<Vec<FrocGroupRow>, DetectError> {
    if !meta.iter().any(|s| s.attributes.iter().any(|(k, _)| k == attribute)) {
        return Err(DetectError::UnknownAttribute(attribute.to_string()));
    }
    let by_scan: HashMap<&str, &SubjectMeta> = meta.iter().map(|s| (s.scan_id.as_str(), s)).collect();
    let keys: Vec<String> = m
        .scan_ids
        .iter()
        .map(|id| {
            by_scan
                .get(id.as_str())
                .map_or(crate::tabular_io::MISSING, |s| s.group_key(attribute))
                .to_string()
        })
        .collect();
    let mut groups: Vec<&String> = keys.iter().collect();
    groups.sort();
    groups.dedup();
    groups
        .into_iter()
        .map(|g| {
            let sub = m.restrict(|i| &keys[i] == g);
            let curve = match froc(&sub) {
                Ok(c) => Some(c),
                Err(DetectError::NoAnnotations) => None,
                Err(e) => return Err(e),
            };
            Ok(FrocGroupRow { group: g.clone(), n_scans: sub.scan_count(), n_annotations: sub.annotations.len(), curve })
        })
        .collect()
}
