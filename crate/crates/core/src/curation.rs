//! Dataset curation: 3D boxes from per-slice 2D boxes, false-positive mining,
//! confidence-stratified nodule/non-nodule sampling and fixed-size patch
//! extraction.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{hit, world_to_voxel, Box3, GeometryError, GridFrame, HitCriterion, LesionGeometry, Point3};
use crate::preprocess::{clip_normalize, grid_point, resampled_frame, sample_world, PreprocessConfig, PreprocessError};
use crate::tabular_io::{Annotation, Candidate, Label, SliceBox2D, SliceUnit};
use crate::volume::VolumeGrid;

pub const DEFAULT_PATCH_DIMS: [usize; 3] = [64, 64, 64];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CurationError {
    #[error("slice boxes span several scans (`{0}` and `{1}`); aggregate one scan at a time")]
    MixedScans(String, String),
    #[error("slice boxes mix slice units ({0} and {1})")]
    MixedSliceUnits(SliceUnit, SliceUnit),
    #[error("invalid grouping parameters: {0}")]
    BadGrouping(String),
    #[error("invalid sampling configuration: {0}")]
    BadSwsConfig(String),
    #[error("stratified sampling needs at least one annotation")]
    NoAnnotations,
    #[error("stratified sampling needs at least one candidate")]
    NoCandidates,
    #[error("no candidate is free of annotations, so no negative can be sampled")]
    NoNegatives,
    #[error("patch around ({0}, {1}, {2}) contains no voxel of the volume")]
    PatchOutside(f64, f64, f64),
    #[error("patch dims must all be >= 1, got {0:?}")]
    EmptyPatch([usize; 3]),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error("manifest line {line}: {message}")]
    Manifest { line: u64, message: String },
}

/// Rules for linking slice boxes into one nodule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupingParams {
    /// In-plane IoU needed to link boxes on nearby slices.
    pub min_2d_iou: f64,
    /// Missing slices tolerated inside one nodule.
    pub max_slice_gap: u32,
    pub slice_thickness_mm: f64,
    /// World z of slice index 0 (index unit only).
    pub z_origin_mm: f64,
}

impl Default for GroupingParams {
    fn default() -> Self {
        Self { min_2d_iou: 0.2, max_slice_gap: 1, slice_thickness_mm: 1.25, z_origin_mm: 0.0 }
    }
}

impl GroupingParams {
    pub fn validate(&self) -> Result<(), CurationError> {
        if !(self.min_2d_iou > 0.0 && self.min_2d_iou <= 1.0) {
            return Err(CurationError::BadGrouping(format!("min_2d_iou {} not in (0, 1]", self.min_2d_iou)));
        }
        if !(self.slice_thickness_mm.is_finite() && self.slice_thickness_mm > 0.0) {
            return Err(CurationError::BadGrouping(format!(
                "slice thickness {} must be positive",
                self.slice_thickness_mm
            )));
        }
        if !self.z_origin_mm.is_finite() {
            return Err(CurationError::BadGrouping("z origin must be finite".into()));
        }
        Ok(())
    }

    fn ordinal(&self, b: &SliceBox2D) -> i64 {
        match b.unit {
            SliceUnit::Index => b.slice as i64,
            SliceUnit::Millimeters => (b.slice / self.slice_thickness_mm).round() as i64,
        }
    }

    fn z_mm(&self, b: &SliceBox2D) -> f64 {
        match b.unit {
            SliceUnit::Index => self.z_origin_mm + b.slice * self.slice_thickness_mm,
            SliceUnit::Millimeters => b.slice,
        }
    }
}

struct DisjointSet(Vec<usize>);

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self((0..n).collect())
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Smallest side, at least `side`, whose box around `center` contains
/// `[lo, hi]` after floating-point rounding.
fn covering_size(center: f64, side: f64, lo: f64, hi: f64) -> f64 {
    let mut s = side.max(hi - lo);
    while center - s / 2.0 > lo || center + s / 2.0 < hi {
        s += s * f64::EPSILON;
    }
    s
}

/// Builds 3D nodule boxes from one scan's slice boxes.
///
/// Boxes on slices at most `max_slice_gap + 1` apart whose in-plane IoU
/// reaches `min_2d_iou` belong to the same nodule. Each nodule's in-plane
/// extent is the widest and tallest slice box, grown where slice boxes drift
/// beyond it so that every contributing box stays inside; its depth is the
/// slice coverage times the slice thickness. Nodules come out ordered by
/// `(z, y, x)` of their centers and are numbered from 1.
pub fn aggregate_slices(boxes: &[SliceBox2D], params: &GroupingParams) -> Result<Vec<Annotation>, CurationError> {
    params.validate()?;
    let Some(first) = boxes.first() else {
        return Ok(Vec::new());
    };
    for b in boxes {
        if b.scan_id != first.scan_id {
            return Err(CurationError::MixedScans(first.scan_id.clone(), b.scan_id.clone()));
        }
        if b.unit != first.unit {
            return Err(CurationError::MixedSliceUnits(first.unit, b.unit));
        }
    }

    let ords: Vec<i64> = boxes.iter().map(|b| params.ordinal(b)).collect();
    let reach = params.max_slice_gap as i64 + 1;
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by_key(|&i| ords[i]);
    let mut ds = DisjointSet::new(boxes.len());
    for (pos, &i) in order.iter().enumerate() {
        for &j in &order[pos + 1..] {
            let d = ords[j] - ords[i];
            if d > reach {
                break;
            }
            if d >= 1 && boxes[i].iou2(&boxes[j]) >= params.min_2d_iou {
                ds.union(i, j);
            }
        }
    }

    let mut members: HashMap<usize, Vec<usize>> = HashMap::new();
    for i in 0..boxes.len() {
        members.entry(ds.find(i)).or_default().push(i);
    }

    let mut out: Vec<Box3> = members
        .values()
        .map(|m| {
            let bs = m.iter().map(|&i| &boxes[i]);
            let width = bs.clone().map(SliceBox2D::width).fold(f64::MIN, f64::max);
            let height = bs.clone().map(SliceBox2D::height).fold(f64::MIN, f64::max);
            let x_lo = bs.clone().map(|b| b.x_min).fold(f64::INFINITY, f64::min);
            let x_hi = bs.clone().map(|b| b.x_max).fold(f64::NEG_INFINITY, f64::max);
            let y_lo = bs.clone().map(|b| b.y_min).fold(f64::INFINITY, f64::min);
            let y_hi = bs.clone().map(|b| b.y_max).fold(f64::NEG_INFINITY, f64::max);
            let (lo_i, hi_i) = (
                *m.iter().min_by_key(|&&i| ords[i]).unwrap(),
                *m.iter().max_by_key(|&&i| ords[i]).unwrap(),
            );
            let slices = (ords[hi_i] - ords[lo_i] + 1) as f64;
            let center = Point3::new(
                0.5 * (x_lo + x_hi),
                0.5 * (y_lo + y_hi),
                0.5 * (params.z_mm(&boxes[lo_i]) + params.z_mm(&boxes[hi_i])),
            );
            let size = [
                covering_size(center.x, width, x_lo, x_hi),
                covering_size(center.y, height, y_lo, y_hi),
                slices * params.slice_thickness_mm,
            ];
            Box3::new(center, size)
        })
        .collect::<Result<_, _>>()?;

    out.sort_by(|a, b| {
        let (a, b) = (a.center, b.center);
        a.z.total_cmp(&b.z).then(a.y.total_cmp(&b.y)).then(a.x.total_cmp(&b.x))
    });
    Ok(out
        .into_iter()
        .enumerate()
        .map(|(k, b)| Annotation {
            scan_id: first.scan_id.clone(),
            nodule_id: (k + 1).to_string(),
            geometry: LesionGeometry::Box(b),
            label: Some(Label::Malignant),
        })
        .collect())
}

/// [`aggregate_slices`] over every scan present, scans ordered by id.
pub fn aggregate_scans(boxes: &[SliceBox2D], params: &GroupingParams) -> Result<Vec<Annotation>, CurationError> {
    let mut by_scan: Vec<(&str, Vec<SliceBox2D>)> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for b in boxes {
        let slot = *index.entry(b.scan_id.as_str()).or_insert_with(|| {
            by_scan.push((b.scan_id.as_str(), Vec::new()));
            by_scan.len() - 1
        });
        by_scan[slot].1.push(b.clone());
    }
    by_scan.sort_by(|a, b| a.0.cmp(b.0));
    let mut out = Vec::new();
    for (_, group) in by_scan {
        out.extend(aggregate_slices(&group, params)?);
    }
    Ok(out)
}

fn annotations_by_scan(annotations: &[Annotation]) -> HashMap<&str, Vec<&Annotation>> {
    let mut m: HashMap<&str, Vec<&Annotation>> = HashMap::new();
    for a in annotations {
        m.entry(a.scan_id.as_str()).or_default().push(a);
    }
    m
}

fn hits_any(c: &Candidate, anns: Option<&Vec<&Annotation>>, crit: &HitCriterion) -> Result<bool, CurationError> {
    for a in anns.into_iter().flatten() {
        if hit(&c.location, &a.geometry, crit)? {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Canonical candidate order: probability descending, then scan id and
/// coordinates ascending.
fn canonical_order(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    b.probability
        .total_cmp(&a.probability)
        .then_with(|| a.scan_id.cmp(&b.scan_id))
        .then(a.location.x.total_cmp(&b.location.x))
        .then(a.location.y.total_cmp(&b.location.y))
        .then(a.location.z.total_cmp(&b.location.z))
}

fn false_positives(
    candidates: &[Candidate],
    annotations: &[Annotation],
    crit: &HitCriterion,
) -> Result<Vec<Candidate>, CurationError> {
    for a in annotations {
        crit.check(&a.geometry)?;
    }
    let by_scan = annotations_by_scan(annotations);
    let mut out = Vec::new();
    for c in candidates {
        if !hits_any(c, by_scan.get(c.scan_id.as_str()), crit)? {
            out.push(c.clone());
        }
    }
    out.sort_by(canonical_order);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSelection {
    TopK(usize),
    MinProbability(f64),
}

/// Highest-confidence candidates that hit no annotation.
pub fn derive_negatives(
    candidates: &[Candidate],
    annotations: &[Annotation],
    crit: &HitCriterion,
    selection: NegativeSelection,
) -> Result<Vec<Candidate>, CurationError> {
    let mut fps = false_positives(candidates, annotations, crit)?;
    match selection {
        NegativeSelection::TopK(k) => fps.truncate(k),
        NegativeSelection::MinProbability(t) => fps.retain(|c| c.probability >= t),
    }
    Ok(fps)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwsConfig {
    /// Negatives per positive.
    pub neg_pos_ratio: f64,
    /// Interior stratum edges; strata are `[0, e0)`, `[e0, e1)`, `[e1, 1]`.
    pub edges: [f64; 2],
    pub shares: [f64; 3],
    pub seed: u64,
}

impl Default for SwsConfig {
    fn default() -> Self {
        Self { neg_pos_ratio: 3.0, edges: [0.40, 0.70], shares: [1.0 / 3.0; 3], seed: 0 }
    }
}

impl SwsConfig {
    pub fn validate(&self) -> Result<(), CurationError> {
        let bad = |m: String| Err(CurationError::BadSwsConfig(m));
        if !(self.neg_pos_ratio.is_finite() && self.neg_pos_ratio >= 1.0) {
            return bad(format!("ratio {} must be >= 1", self.neg_pos_ratio));
        }
        let [a, b] = self.edges;
        if !(0.0 < a && a < b && b < 1.0) {
            return bad(format!("edges {:?} must satisfy 0 < e0 < e1 < 1", self.edges));
        }
        if self.shares.iter().any(|s| !(s.is_finite() && *s >= 0.0)) || (self.shares.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("shares {:?} must be non-negative and sum to 1", self.shares));
        }
        Ok(())
    }

    pub fn stratum(&self, p: f64) -> usize {
        if p < self.edges[0] {
            0
        } else if p < self.edges[1] {
            1
        } else {
            2
        }
    }

    pub fn stratum_label(&self, s: usize) -> String {
        match s {
            0 => format!("[0, {})", self.edges[0]),
            1 => format!("[{}, {})", self.edges[0], self.edges[1]),
            _ => format!("[{}, 1]", self.edges[1]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatchClass {
    Nodule,
    NonNodule,
    Cancer,
    NoCancer,
}

impl PatchClass {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Nodule => "nodule",
            Self::NonNodule => "non-nodule",
            Self::Cancer => "cancer",
            Self::NoCancer => "no-cancer",
        }
    }
}

impl FromStr for PatchClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "nodule" => Ok(Self::Nodule),
            "non-nodule" => Ok(Self::NonNodule),
            "cancer" => Ok(Self::Cancer),
            "no-cancer" => Ok(Self::NoCancer),
            other => Err(format!("unknown patch class `{other}`")),
        }
    }
}

impl fmt::Display for PatchClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRow {
    pub path: String,
    pub scan_id: String,
    pub center: Point3,
    pub class: PatchClass,
    /// Probability of the source candidate; for positives, the best candidate
    /// hitting the annotation, if any.
    pub probability: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PatchManifest {
    pub rows: Vec<PatchRow>,
}

fn path_safe(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || ".-_".contains(c) { c } else { '_' }).collect()
}

impl PatchManifest {
    fn push(&mut self, scan_id: &str, center: Point3, class: PatchClass, probability: Option<f64>) {
        let path = format!("{}/{}_{:05}.nii.gz", class, path_safe(scan_id), self.rows.len());
        self.rows.push(PatchRow { path, scan_id: scan_id.to_string(), center, class, probability });
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(["path", "scan_id", "x", "y", "z", "class", "probability"]).unwrap();
        for r in &self.rows {
            w.write_record([
                r.path.clone(),
                r.scan_id.clone(),
                format!("{}", r.center.x),
                format!("{}", r.center.y),
                format!("{}", r.center.z),
                r.class.to_string(),
                r.probability.map(|p| format!("{p}")).unwrap_or_default(),
            ])
            .unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }

    pub fn from_csv(text: &str) -> Result<Self, CurationError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let err = |line: u64, message: String| CurationError::Manifest { line, message };
        let headers = rdr.headers().map_err(|e| err(1, e.to_string()))?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| err(1, format!("missing column `{name}`")));
        let idx = [col("path")?, col("scan_id")?, col("x")?, col("y")?, col("z")?, col("class")?, col("probability")?];
        let mut rows = Vec::new();
        let mut seen = HashMap::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
            let line = rec.position().map_or(0, |p| p.line());
            let f = |k: usize| rec.get(idx[k]).unwrap_or("");
            let num = |k: usize| -> Result<f64, CurationError> {
                let v: f64 = f(k).parse().map_err(|_| err(line, format!("`{}` is not a number", f(k))))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(err(line, format!("`{}` is not finite", f(k))))
                }
            };
            let path = f(0).to_string();
            if let Some(first) = seen.insert(path.clone(), line) {
                return Err(err(line, format!("path `{path}` already used on line {first}")));
            }
            rows.push(PatchRow {
                path,
                scan_id: f(1).to_string(),
                center: Point3::new(num(2)?, num(3)?, num(4)?),
                class: f(5).parse().map_err(|e| err(line, e))?,
                probability: if f(6).is_empty() { None } else { Some(num(6)?) },
            });
        }
        Ok(Self { rows })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumReport {
    pub stratum: String,
    pub available: usize,
    pub quota: usize,
    /// Drawn from this stratum for its own quota.
    pub drawn: usize,
    /// Quota shortfall of this stratum.
    pub deficit: usize,
    /// Extra draws from this stratum that covered other strata's deficits.
    pub lent: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwsOutcome {
    pub manifest: PatchManifest,
    pub n_positives: usize,
    pub target_negatives: usize,
    pub n_negatives: usize,
    /// Negatives that could not be found anywhere.
    pub unfilled: usize,
    pub strata: Vec<StratumReport>,
}

/// Splits `total` by `shares` with the largest-remainder rule; ties go to the
/// higher-confidence stratum.
fn apportion(total: usize, shares: &[f64; 3]) -> [usize; 3] {
    let raw = shares.map(|s| s * total as f64);
    let mut q = raw.map(|r| r.floor() as usize);
    let mut left = total.saturating_sub(q.iter().sum());
    let mut by_rem: Vec<usize> = (0..3).collect();
    by_rem.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(b.cmp(&a)));
    for &s in by_rem.iter().cycle() {
        if left == 0 {
            break;
        }
        q[s] += 1;
        left -= 1;
    }
    q
}

/// Confidence-stratified curation: every annotation becomes a nodule patch and
/// `ratio * positives` non-nodule patches are drawn from candidates that hit
/// no annotation, apportioned across the confidence strata. A short stratum's
/// deficit is covered from the nearest strata (higher-confidence first on
/// ties) and reported.
pub fn sws_sample(
    candidates: &[Candidate],
    annotations: &[Annotation],
    crit: &HitCriterion,
    cfg: &SwsConfig,
) -> Result<SwsOutcome, CurationError> {
    cfg.validate()?;
    if annotations.is_empty() {
        return Err(CurationError::NoAnnotations);
    }
    if candidates.is_empty() {
        return Err(CurationError::NoCandidates);
    }
    let negatives = false_positives(candidates, annotations, crit)?;
    if negatives.is_empty() {
        return Err(CurationError::NoNegatives);
    }

    let mut pools: [Vec<&Candidate>; 3] = Default::default();
    for c in &negatives {
        pools[cfg.stratum(c.probability)].push(c);
    }
    let target = (cfg.neg_pos_ratio * annotations.len() as f64).round() as usize;
    let quota = apportion(target, &cfg.shares);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut taken: [Vec<bool>; 3] = [0, 1, 2].map(|s| vec![false; pools[s].len()]);
    let mut reports: Vec<StratumReport> = (0..3)
        .map(|s| StratumReport {
            stratum: cfg.stratum_label(s),
            available: pools[s].len(),
            quota: quota[s],
            drawn: 0,
            deficit: 0,
            lent: 0,
        })
        .collect();

    let draw = |s: usize, want: usize, taken: &mut [Vec<bool>; 3], rng: &mut ChaCha8Rng| -> usize {
        let free: Vec<usize> = (0..pools[s].len()).filter(|&i| !taken[s][i]).collect();
        let n = want.min(free.len());
        for k in sample(rng, free.len(), n) {
            taken[s][free[k]] = true;
        }
        n
    };

    for s in 0..3 {
        let got = draw(s, quota[s], &mut taken, &mut rng);
        reports[s].drawn = got;
        reports[s].deficit = quota[s] - got;
    }
    let mut unfilled = 0;
    for s in 0..3 {
        let mut need = reports[s].deficit;
        let mut donors: Vec<usize> = (0..3).filter(|&t| t != s).collect();
        donors.sort_by_key(|&t| ((t as i64 - s as i64).abs(), std::cmp::Reverse(t)));
        for t in donors {
            if need == 0 {
                break;
            }
            let got = draw(t, need, &mut taken, &mut rng);
            reports[t].lent += got;
            need -= got;
        }
        unfilled += need;
    }

    let mut manifest = PatchManifest::default();
    let by_scan: HashMap<&str, Vec<&Candidate>> = candidates.iter().fold(HashMap::new(), |mut m, c| {
        m.entry(c.scan_id.as_str()).or_insert_with(Vec::new).push(c);
        m
    });
    for a in annotations {
        let mut best: Option<f64> = None;
        for c in by_scan.get(a.scan_id.as_str()).into_iter().flatten() {
            if hit(&c.location, &a.geometry, crit)? {
                best = Some(best.map_or(c.probability, |b| b.max(c.probability)));
            }
        }
        manifest.push(&a.scan_id, a.geometry.center(), PatchClass::Nodule, best);
    }
    let mut n_negatives = 0;
    for s in 0..3 {
        for (i, c) in pools[s].iter().enumerate() {
            if taken[s][i] {
                manifest.push(&c.scan_id, c.location, PatchClass::NonNodule, Some(c.probability));
                n_negatives += 1;
            }
        }
    }

    Ok(SwsOutcome {
        manifest,
        n_positives: annotations.len(),
        target_negatives: target,
        n_negatives,
        unfilled,
        strata: reports,
    })
}

/// Crops a `patch_dims` patch around `center` from `volume` resampled to the
/// configured spacing, then clips and normalizes it.
///
/// The patch is centered on the resampled voxel nearest to `center` (voxel
/// `patch_dims / 2` of the output). Voxels beyond the resampled grid are
/// padded with `clip_lo` before normalization.
pub fn extract_patch(
    volume: &VolumeGrid,
    center: Point3,
    cfg: &PreprocessConfig,
    patch_dims: [usize; 3],
) -> Result<VolumeGrid, CurationError> {
    cfg.validate()?;
    if patch_dims.contains(&0) {
        return Err(CurationError::EmptyPatch(patch_dims));
    }
    let grid = resampled_frame(volume.frame(), cfg.target_spacing)?;
    let v = world_to_voxel(&center, &grid)?;
    let start: [i64; 3] = [0, 1, 2].map(|a| v[a].round() as i64 - (patch_dims[a] / 2) as i64);
    let inside = |a: usize, idx: i64| idx >= 0 && (idx as usize) < grid.dims[a];
    if (0..3).any(|a| !(0..patch_dims[a] as i64).any(|o| inside(a, start[a] + o))) {
        return Err(CurationError::PatchOutside(center.x, center.y, center.z));
    }

    let [px, py, pz] = patch_dims;
    let mut data = Vec::with_capacity(px * py * pz);
    for k in 0..pz as i64 {
        for j in 0..py as i64 {
            for i in 0..px as i64 {
                let idx = [start[0] + i, start[1] + j, start[2] + k];
                if (0..3).all(|a| inside(a, idx[a])) {
                    data.push(sample_world(volume, grid_point(&grid, idx[0], idx[1], idx[2])));
                } else {
                    data.push(cfg.clip_lo);
                }
            }
        }
    }
    let origin = grid_point(&grid, start[0], start[1], start[2]);
    let frame = GridFrame::new(origin, cfg.target_spacing, patch_dims)?;
    let patch = VolumeGrid::new(frame, data).expect("sampled values are finite");
    Ok(clip_normalize(&patch, cfg)?)
}
