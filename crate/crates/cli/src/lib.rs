//! The `lungbench` command-line tool: detection and classification scoring,
//! dataset curation and report replay.

pub mod report;
pub mod svg;
mod text;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Deserialize;
use serde_json::{json, Value};

use lungbench_core::classify_eval::{estimate, roc_curve, subgroup_report, DEFAULT_LEVEL};
use lungbench_core::curation::{
    aggregate_scans, derive_negatives, extract_patch, sws_sample, GroupingParams, NegativeSelection, PatchManifest,
    SwsConfig,
};
use lungbench_core::detect_eval::{froc, froc_bootstrap, froc_by_group, match_candidates, CandidateStatus, CPM_FP_RATES};
use lungbench_core::geometry::hit;
use lungbench_core::nifti_io::{read_volume, write_volume_with, Datatype, WriteOptions};
use lungbench_core::tabular_io::{
    emit_annotations, emit_candidates, parse_annotations_with, parse_candidates_with, parse_exclusions_with,
    parse_manifest_with, parse_metadata_with, parse_scores_with, parse_slice_boxes_with, MISSING,
};
use lungbench_core::{
    AnnotationSchema, AnnotationTable, CiMethod, ColumnMap, FrocCurve, HitCriterion, PreprocessConfig, ScoredRecord,
    SliceUnit, SubjectMeta,
};

pub use report::{Failure, Outcome, RunReport};
use report::{Inputs, SCHEMA_VERSION};
use svg::{froc_series, CurveKind, Series};

/// Interpolation rule echoed into detection reports.
pub const INTERPOLATION_RULE: &str =
    "linear between operating points, linear from (0, 0) before the first, flat after the last";
pub const THRESHOLD_RULE: &str = "every distinct probability > 0 among hit and false-positive candidates";
pub const PREPROCESS_ORDER: [&str; 3] = ["resample", "clip", "normalize"];

#[derive(Debug, Parser)]
#[command(name = "lungbench", version, about = "Scoring and curation for lung nodule detection and lung cancer classification")]
pub struct Cli {
    /// Worker threads for parallel stages; all cores when unset.
    #[arg(long, global = true, env = "LUNGBENCH_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// FROC curve and CPM of detection candidates.
    EvalDetect(DetectArgs),
    /// ROC AUC with confidence interval for classification scores.
    EvalClassify(ClassifyArgs),
    /// Dataset curation steps.
    #[command(subcommand)]
    Curate(CurateCommand),
    /// Re-run the computation recorded in a report and compare results.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CriterionSpec {
    CenterSphere,
    CenterBox,
    Iou(f64),
}

impl CriterionSpec {
    fn resolve(self, probe_mm: f64) -> Outcome<HitCriterion> {
        match self {
            Self::CenterSphere => Ok(HitCriterion::CenterInSphere),
            Self::CenterBox => Ok(HitCriterion::CenterInBox),
            Self::Iou(t) => HitCriterion::iou_with_probe(t, probe_mm).map_err(|e| Failure::input(format!("--criterion: {e}"))),
        }
    }
}

fn parse_criterion(s: &str) -> Result<CriterionSpec, String> {
    match s {
        "center-sphere" => Ok(CriterionSpec::CenterSphere),
        "center-box" => Ok(CriterionSpec::CenterBox),
        _ => match s.strip_prefix("iou:") {
            Some(t) => t.parse().map(CriterionSpec::Iou).map_err(|_| format!("bad IoU threshold `{t}`")),
            None => Err(format!("unknown criterion `{s}` (expected center-sphere, center-box or iou:<t>)")),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CiSpec {
    Delong,
    Bootstrap(usize),
}

fn parse_ci(s: &str) -> Result<CiSpec, String> {
    if s == "delong" {
        return Ok(CiSpec::Delong);
    }
    match s.strip_prefix("bootstrap:") {
        Some(n) => n.parse().map(CiSpec::Bootstrap).map_err(|_| format!("bad resample count `{n}`")),
        None if s == "bootstrap" => Ok(CiSpec::Bootstrap(lungbench_core::classify_eval::DEFAULT_AUC_BOOTSTRAP)),
        None => Err(format!("unknown interval method `{s}` (expected delong or bootstrap:<n>)")),
    }
}

fn parse_size(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s.split(',').map(|p| p.trim().parse().map_err(|_| format!("bad size `{s}`"))).collect::<Result<_, _>>()?;
    match parts[..] {
        [n] => Ok([n; 3]),
        [x, y, z] => Ok([x, y, z]),
        _ => Err(format!("size `{s}` must be N or X,Y,Z")),
    }
}

#[derive(Debug, Clone, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub candidates: PathBuf,
    #[arg(long)]
    pub annotations: PathBuf,
    /// Scan manifest: the FP/scan denominator.
    #[arg(long)]
    pub scans: PathBuf,
    #[arg(long)]
    pub exclusions: Option<PathBuf>,
    /// center-sphere, center-box or iou:<t>.
    #[arg(long, default_value = "center-sphere", value_parser = parse_criterion)]
    pub criterion: CriterionSpec,
    /// Side of the cube placed around a point candidate in IoU mode.
    #[arg(long, default_value_t = lungbench_core::geometry::DEFAULT_PROBE_SIDE_MM)]
    pub probe_mm: f64,
    /// Scan-level bootstrap replicates for FROC intervals.
    #[arg(long)]
    pub bootstrap: Option<usize>,
    #[arg(long, env = "LUNGBENCH_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub meta: Option<PathBuf>,
    #[arg(long)]
    pub group_by: Option<String>,
    /// Header renames, e.g. `seriesuid=scan_id,prob=probability`.
    #[arg(long)]
    pub columns: Option<String>,
    /// Report path; the report goes to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub svg: Option<PathBuf>,
    /// Leave the timestamp out so identical runs give identical bytes.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub meta: Option<PathBuf>,
    #[arg(long)]
    pub group_by: Option<String>,
    /// delong or bootstrap:<n>.
    #[arg(long, default_value = "delong", value_parser = parse_ci)]
    pub ci: CiSpec,
    #[arg(long, env = "LUNGBENCH_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_LEVEL)]
    pub level: f64,
    #[arg(long)]
    pub columns: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub svg: Option<PathBuf>,
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Subcommand)]
pub enum CurateCommand {
    /// Build 3D nodule boxes from per-slice 2D boxes.
    Nlst3d(Nlst3dArgs),
    /// Mine high-confidence false positives.
    Negatives(NegativesArgs),
    /// Confidence-stratified nodule/non-nodule sampling.
    Sws(SwsArgs),
    /// Extract fixed-size patches listed in a manifest.
    Patches(PatchesArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CurateOutput {
    /// Report path; the report goes to stdout when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long)]
    pub columns: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct Nlst3dArgs {
    #[arg(long)]
    pub boxes: PathBuf,
    /// index or mm.
    #[arg(long, default_value = "index")]
    pub unit: SliceUnit,
    #[arg(long)]
    pub thickness: f64,
    /// World z of slice index 0.
    #[arg(long, default_value_t = 0.0)]
    pub z_origin: f64,
    #[arg(long, default_value_t = 0.2)]
    pub min_iou: f64,
    #[arg(long, default_value_t = 1)]
    pub max_gap: u32,
    /// Output annotation CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: CurateOutput,
}

#[derive(Debug, Clone, Args)]
pub struct NegativesArgs {
    #[arg(long)]
    pub candidates: PathBuf,
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long, default_value = "center-sphere", value_parser = parse_criterion)]
    pub criterion: CriterionSpec,
    #[arg(long, default_value_t = lungbench_core::geometry::DEFAULT_PROBE_SIDE_MM)]
    pub probe_mm: f64,
    #[arg(long, conflicts_with = "min_prob")]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub min_prob: Option<f64>,
    /// Output candidate CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: CurateOutput,
}

#[derive(Debug, Clone, Args)]
pub struct SwsArgs {
    #[arg(long)]
    pub candidates: PathBuf,
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long, default_value = "center-sphere", value_parser = parse_criterion)]
    pub criterion: CriterionSpec,
    #[arg(long, default_value_t = lungbench_core::geometry::DEFAULT_PROBE_SIDE_MM)]
    pub probe_mm: f64,
    /// TOML file with an `[sws]` table.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long, env = "LUNGBENCH_SEED")]
    pub seed: Option<u64>,
    /// Output patch manifest CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: CurateOutput,
}

#[derive(Debug, Clone, Args)]
pub struct PatchesArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory holding `<scan_id>.nii.gz` or `<scan_id>.nii`.
    #[arg(long)]
    pub volumes_dir: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// TOML file with a `[preprocess]` table.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Patch dims in voxels: N or X,Y,Z.
    #[arg(long, default_value = "64", value_parser = parse_size)]
    pub size: [usize; 3],
    #[command(flatten)]
    pub common: CurateOutput,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    pub report: PathBuf,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CurateConfig {
    sws: Option<SwsConfig>,
    preprocess: Option<PreprocessConfig>,
}

/// Files written by a command besides its report.
type Sink<'a> = dyn FnMut(&Path, &[u8]) -> Outcome<()> + 'a;

struct Run {
    command: &'static str,
    config: Value,
    results: Value,
    text: String,
}

fn columns(spec: &Option<String>) -> Outcome<ColumnMap> {
    match spec {
        None => Ok(ColumnMap::default()),
        Some(s) => ColumnMap::default().with_spec(s).map_err(|e| Failure::input(format!("--columns: {e}"))),
    }
}

fn input<E: std::fmt::Display>(e: E) -> Failure {
    Failure::input(e.to_string())
}

fn load_meta(inputs: &mut Inputs, path: &Option<PathBuf>, group_by: &Option<String>, map: &ColumnMap) -> Outcome<Option<Vec<SubjectMeta>>> {
    if group_by.is_some() && path.is_none() {
        return Err(Failure::input("--group-by needs --meta"));
    }
    path.as_ref().map(|p| inputs.table("meta", p, |t| parse_metadata_with(t, map))).transpose()
}

fn check_froc(c: &FrocCurve) -> Outcome<()> {
    let mean = c.sensitivities.iter().sum::<f64>() / c.sensitivities.len() as f64;
    let ordered = c.sensitivities.windows(2).all(|w| w[0] <= w[1]);
    if !(0.0..=1.0).contains(&c.cpm) || !ordered || (mean - c.cpm).abs() > 1e-12 {
        return Err(Failure::internal(format!("FROC invariant violated: sensitivities {:?}, CPM {}", c.sensitivities, c.cpm)));
    }
    Ok(())
}

fn eval_detect(a: &DetectArgs, inputs: &mut Inputs, sink: &mut Sink) -> Outcome<Run> {
    let map = columns(&a.columns)?;
    let candidates = inputs.table("candidates", &a.candidates, |t| parse_candidates_with(t, &map))?;
    let annotations = inputs.table("annotations", &a.annotations, |t| parse_annotations_with(t, &map))?.rows;
    let exclusions = match &a.exclusions {
        Some(p) => inputs.table("exclusions", p, |t| parse_exclusions_with(t, &map))?.rows,
        None => Vec::new(),
    };
    let manifest = inputs.table("scans", &a.scans, |t| parse_manifest_with(t, &map))?;
    let meta = load_meta(inputs, &a.meta, &a.group_by, &map)?;
    let crit = a.criterion.resolve(a.probe_mm)?;

    let m = match_candidates(&candidates, &annotations, &exclusions, &manifest, &crit).map_err(input)?;
    let curve = froc(&m).map_err(input)?;
    check_froc(&curve)?;
    let boot = a.bootstrap.map(|n| froc_bootstrap(&m, n, a.seed)).transpose().map_err(input)?;
    let groups = match (&a.group_by, &meta) {
        (Some(g), Some(meta)) => Some(froc_by_group(&m, meta, g).map_err(input)?),
        _ => None,
    };
    for g in groups.iter().flatten() {
        if let Some(c) = &g.curve {
            check_froc(c)?;
        }
    }

    if let Some(path) = &a.svg {
        let mut label = format!("CPM = {:.3}", curve.cpm);
        if let Some(b) = &boot {
            label.push_str(&format!(" (95% CI {:.3}-{:.3})", b.cpm.low, b.cpm.high));
        }
        let mut series = vec![froc_series(label, &curve.points)];
        for g in groups.iter().flatten() {
            if let Some(c) = &g.curve {
                series.push(froc_series(format!("{}: CPM = {:.3}", g.group, c.cpm), &c.points));
            }
        }
        if curve.points.is_empty() {
            return Err(Failure::input("cannot render an empty FROC curve: no candidate above probability 0"));
        }
        let svg = svg::render(CurveKind::Froc, "FROC", &series).map_err(Failure::input)?;
        sink(path, svg.as_bytes())?;
    }

    let config = json!({
        "criterion": crit,
        "criterion_label": crit.label(),
        "interpolation": INTERPOLATION_RULE,
        "thresholds": THRESHOLD_RULE,
        "fp_rates": CPM_FP_RATES,
        "bootstrap": a.bootstrap.map(|n| json!({"n_resamples": n, "unit": "scan", "method": "percentile", "level": 0.95})),
        "seed": a.seed,
        "group_by": a.group_by,
        "columns": a.columns,
    });
    let counts = json!({
        "scans": m.scan_count(),
        "annotations": m.annotations.len(),
        "exclusions": exclusions.len(),
        "candidates": m.candidates.len(),
        "true_positive_candidates": m.count(|s| matches!(s, CandidateStatus::TruePositive { .. })),
        "false_positive_candidates": m.count(|s| *s == CandidateStatus::FalsePositive),
        "ignored_candidates": m.count(|s| *s == CandidateStatus::Ignored),
        "detected_annotations": m.annotations.iter().filter(|o| o.hit_score.is_some_and(|p| p > 0.0)).count(),
    });
    let text = text::froc_table(&curve, boot.as_ref(), groups.as_deref());
    let results = json!({ "counts": counts, "froc": curve, "bootstrap": boot, "groups": groups });
    Ok(Run { command: "eval-detect", config, results, text })
}

fn ci_method(spec: CiSpec, seed: u64) -> CiMethod {
    match spec {
        CiSpec::Delong => CiMethod::Delong,
        CiSpec::Bootstrap(n_resamples) => CiMethod::Bootstrap { n_resamples, seed },
    }
}

fn eval_classify(a: &ClassifyArgs, inputs: &mut Inputs, sink: &mut Sink) -> Outcome<Run> {
    let map = columns(&a.columns)?;
    let records = inputs.table("scores", &a.scores, |t| parse_scores_with(t, &map))?;
    let meta = load_meta(inputs, &a.meta, &a.group_by, &map)?;
    let method = ci_method(a.ci, a.seed);
    let overall = estimate(&records, method, a.level).map_err(input)?;
    if !(0.0..=1.0).contains(&overall.auc) || overall.ci_low > overall.ci_high {
        return Err(Failure::internal(format!("AUC invariant violated: {overall:?}")));
    }
    let roc = roc_curve(&records).map_err(input)?;
    let subgroups = match (&a.group_by, &meta) {
        (Some(g), Some(meta)) => Some(subgroup_report(&records, meta, g, method, a.level).map_err(input)?),
        _ => None,
    };

    if let Some(path) = &a.svg {
        let ci = |lo: f64, hi: f64| format!("({:.0}% CI {lo:.3}-{hi:.3})", a.level * 100.0);
        let mut series = vec![Series {
            label: format!("AUC = {:.3} {}", overall.auc, ci(overall.ci_low, overall.ci_high)),
            points: roc.clone(),
            markers: vec![],
        }];
        if let (Some(g), Some(meta), Some(rows)) = (&a.group_by, &meta, &subgroups) {
            let by_scan: BTreeMap<&str, &SubjectMeta> = meta.iter().map(|m| (m.scan_id.as_str(), m)).collect();
            for row in rows {
                let Some(e) = &row.estimate else { continue };
                let members: Vec<ScoredRecord> = records
                    .iter()
                    .filter(|r| by_scan.get(r.scan_id.as_str()).map_or(MISSING, |m| m.group_key(g)) == row.group)
                    .cloned()
                    .collect();
                let points = roc_curve(&members).map_err(input)?;
                series.push(Series {
                    label: format!("{}: AUC = {:.3} {}", row.group, e.auc, ci(e.ci_low, e.ci_high)),
                    points,
                    markers: vec![],
                });
            }
        }
        let svg = svg::render(CurveKind::Roc, "ROC", &series).map_err(Failure::input)?;
        sink(path, svg.as_bytes())?;
    }

    let config = json!({
        "ci": method,
        "level": a.level,
        "seed": a.seed,
        "ties": "half credit",
        "group_by": a.group_by,
        "columns": a.columns,
    });
    let text = text::auc_table(&overall, subgroups.as_deref());
    let results = json!({ "overall": overall, "roc": roc, "subgroups": subgroups });
    Ok(Run { command: "eval-classify", config, results, text })
}

fn read_config(inputs: &mut Inputs, path: &Option<PathBuf>) -> Outcome<CurateConfig> {
    match path {
        None => Ok(CurateConfig::default()),
        Some(p) => {
            let text = inputs.text("config", p)?;
            toml::from_str(&text).map_err(|e| Failure::input(format!("{}: {e}", p.display())))
        }
    }
}

fn curate_nlst3d(a: &Nlst3dArgs, inputs: &mut Inputs, sink: &mut Sink) -> Outcome<Run> {
    let map = columns(&a.common.columns)?;
    let boxes = inputs.table("boxes", &a.boxes, |t| parse_slice_boxes_with(t, a.unit, &map))?;
    let params = GroupingParams {
        min_2d_iou: a.min_iou,
        max_slice_gap: a.max_gap,
        slice_thickness_mm: a.thickness,
        z_origin_mm: a.z_origin,
    };
    let rows = aggregate_scans(&boxes, &params).map_err(input)?;
    for r in &rows {
        let b = r.geometry.as_box();
        let (lo, hi) = (b.min(), b.max());
        let covered = boxes.iter().filter(|s| s.scan_id == r.scan_id).any(|s| {
            s.x_min >= lo[0] - 1e-9 && s.x_max <= hi[0] + 1e-9 && s.y_min >= lo[1] - 1e-9 && s.y_max <= hi[1] + 1e-9
        });
        if !covered {
            return Err(Failure::internal(format!("3D box {}/{} contains none of its slice boxes", r.scan_id, r.nodule_id)));
        }
    }
    let table = AnnotationTable { schema: AnnotationSchema::Box, rows };
    let csv = emit_annotations(&table).map_err(Failure::internal)?;
    sink(&a.out, csv.as_bytes())?;
    let config = json!({ "grouping": params, "unit": a.unit, "columns": a.common.columns });
    let results = json!({
        "slice_boxes": boxes.len(),
        "nodules": table.rows.len(),
        "annotations": table.rows,
        "output_sha256": report::sha256_hex(csv.as_bytes()),
    });
    let text = format!("{} slice boxes -> {} nodules written to {}\n", boxes.len(), table.rows.len(), a.out.display());
    Ok(Run { command: "curate nlst3d", config, results, text })
}

fn curate_negatives(a: &NegativesArgs, inputs: &mut Inputs, sink: &mut Sink) -> Outcome<Run> {
    let map = columns(&a.common.columns)?;
    let candidates = inputs.table("candidates", &a.candidates, |t| parse_candidates_with(t, &map))?;
    let annotations = inputs.table("annotations", &a.annotations, |t| parse_annotations_with(t, &map))?.rows;
    let crit = a.criterion.resolve(a.probe_mm)?;
    let selection = match (a.top_k, a.min_prob) {
        (Some(k), _) => NegativeSelection::TopK(k),
        (None, Some(t)) => NegativeSelection::MinProbability(t),
        (None, None) => return Err(Failure::input("one of --top-k or --min-prob is required")),
    };
    let negatives = derive_negatives(&candidates, &annotations, &crit, selection).map_err(input)?;
    let csv = emit_candidates(&negatives);
    sink(&a.out, csv.as_bytes())?;
    let config = json!({ "criterion": crit, "selection": selection, "order": "probability desc, then scan_id, x, y, z", "columns": a.common.columns });
    let results = json!({
        "candidates": candidates.len(),
        "negatives": negatives.len(),
        "output_sha256": report::sha256_hex(csv.as_bytes()),
    });
    let text = format!("{} of {} candidates kept as negatives in {}\n", negatives.len(), candidates.len(), a.out.display());
    Ok(Run { command: "curate negatives", config, results, text })
}

fn curate_sws(a: &SwsArgs, inputs: &mut Inputs, sink: &mut Sink) -> Outcome<Run> {
    let map = columns(&a.common.columns)?;
    let candidates = inputs.table("candidates", &a.candidates, |t| parse_candidates_with(t, &map))?;
    let annotations = inputs.table("annotations", &a.annotations, |t| parse_annotations_with(t, &map))?.rows;
    let mut cfg = read_config(inputs, &a.config)?.sws.unwrap_or_default();
    if let Some(r) = a.ratio {
        cfg.neg_pos_ratio = r;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let crit = a.criterion.resolve(a.probe_mm)?;
    let out = sws_sample(&candidates, &annotations, &crit, &cfg).map_err(input)?;
    for row in out.manifest.rows.iter().filter(|r| r.class == lungbench_core::PatchClass::NonNodule) {
        for ann in annotations.iter().filter(|x| x.scan_id == row.scan_id) {
            if hit(&row.center, &ann.geometry, &crit).map_err(input)? {
                return Err(Failure::internal(format!("sampled negative {} hits annotation {}", row.path, ann.nodule_id)));
            }
        }
    }
    let csv = out.manifest.to_csv();
    sink(&a.out, csv.as_bytes())?;
    let mut text = format!("{} nodules, {} of {} non-nodules sampled\n", out.n_positives, out.n_negatives, out.target_negatives);
    for s in &out.strata {
        text.push_str(&format!(
            "  {:<12} available {:>6}  quota {:>5}  drawn {:>5}  deficit {:>5}  lent {:>5}\n",
            s.stratum, s.available, s.quota, s.drawn, s.deficit, s.lent
        ));
    }
    if out.unfilled > 0 {
        text.push_str(&format!("  {} negatives could not be filled from any stratum\n", out.unfilled));
    }
    let config = json!({ "criterion": crit, "sws": cfg, "seed": cfg.seed, "columns": a.common.columns });
    let results = json!({
        "n_positives": out.n_positives,
        "target_negatives": out.target_negatives,
        "n_negatives": out.n_negatives,
        "unfilled": out.unfilled,
        "strata": out.strata,
        "output_sha256": report::sha256_hex(csv.as_bytes()),
    });
    Ok(Run { command: "curate sws", config, results, text })
}

/// Patches extracted in parallel per batch, then written in order.
const PATCH_BATCH: usize = 64;

fn curate_patches(a: &PatchesArgs, inputs: &mut Inputs, sink: &mut Sink) -> Outcome<Run> {
    let text = inputs.text("manifest", &a.manifest)?;
    let manifest = PatchManifest::from_csv(&text).map_err(|e| Failure::input(format!("{}: {e}", a.manifest.display())))?;
    let cfg = read_config(inputs, &a.config)?.preprocess.unwrap_or_default();
    cfg.validate().map_err(input)?;

    let mut volumes = BTreeMap::new();
    for row in &manifest.rows {
        if volumes.contains_key(&row.scan_id) {
            continue;
        }
        let candidates = [format!("{}.nii.gz", row.scan_id), format!("{}.nii", row.scan_id)];
        let path = candidates
            .iter()
            .map(|n| a.volumes_dir.join(n))
            .find(|p| p.is_file())
            .ok_or_else(|| Failure::input(format!("no volume for scan `{}` in {}", row.scan_id, a.volumes_dir.display())))?;
        let bytes = inputs.bytes(&format!("volume:{}", row.scan_id), &path)?;
        let v = read_volume(&bytes).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
        volumes.insert(row.scan_id.clone(), v);
    }

    let mut written = Vec::with_capacity(manifest.rows.len());
    for batch in manifest.rows.chunks(PATCH_BATCH) {
        let encoded: Vec<Outcome<Vec<u8>>> = batch
            .par_iter()
            .map(|row| {
                let patch = extract_patch(&volumes[&row.scan_id], row.center, &cfg, a.size)
                    .map_err(|e| Failure::input(format!("{}: {e}", row.path)))?;
                let opts = WriteOptions::new(Datatype::Float32).gzip(row.path.ends_with(".gz"));
                write_volume_with(&patch, &opts).map_err(|e| Failure::internal(format!("{}: {e}", row.path)))
            })
            .collect();
        for (row, bytes) in batch.iter().zip(encoded) {
            let bytes = bytes?;
            sink(&a.out_dir.join(&row.path), &bytes)?;
            written.push(json!({ "path": row.path, "sha256": report::sha256_hex(&bytes) }));
        }
    }
    let config = json!({ "preprocess": cfg, "order": PREPROCESS_ORDER, "size": a.size, "datatype": "float32" });
    let results = json!({ "patches": written.len(), "files": written });
    let text = format!("{} patches written under {}\n", written.len(), a.out_dir.display());
    Ok(Run { command: "curate patches", config, results, text })
}

fn compute(cmd: &Command, inputs: &mut Inputs, sink: &mut Sink) -> Outcome<Run> {
    match cmd {
        Command::EvalDetect(a) => eval_detect(a, inputs, sink),
        Command::EvalClassify(a) => eval_classify(a, inputs, sink),
        Command::Curate(CurateCommand::Nlst3d(a)) => curate_nlst3d(a, inputs, sink),
        Command::Curate(CurateCommand::Negatives(a)) => curate_negatives(a, inputs, sink),
        Command::Curate(CurateCommand::Sws(a)) => curate_sws(a, inputs, sink),
        Command::Curate(CurateCommand::Patches(a)) => curate_patches(a, inputs, sink),
        Command::Replay(_) => Err(Failure::input("a replay report cannot itself be replayed")),
    }
}

fn report_target(cmd: &Command) -> (Option<&PathBuf>, bool) {
    match cmd {
        Command::EvalDetect(a) => (a.out.as_ref(), a.deterministic),
        Command::EvalClassify(a) => (a.out.as_ref(), a.deterministic),
        Command::Curate(CurateCommand::Nlst3d(a)) => (a.common.report.as_ref(), a.common.deterministic),
        Command::Curate(CurateCommand::Negatives(a)) => (a.common.report.as_ref(), a.common.deterministic),
        Command::Curate(CurateCommand::Sws(a)) => (a.common.report.as_ref(), a.common.deterministic),
        Command::Curate(CurateCommand::Patches(a)) => (a.common.report.as_ref(), a.common.deterministic),
        Command::Replay(_) => (None, true),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Outcome<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::input(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn build_report(run: Run, args: Vec<String>, inputs: Inputs, deterministic: bool) -> RunReport {
    RunReport {
        schema_version: SCHEMA_VERSION,
        tool: "lungbench".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: run.command.into(),
        args,
        inputs: inputs.digests,
        config: run.config,
        results: run.results,
        timestamp: (!deterministic).then(|| chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)),
    }
}

/// Restores the seed recorded in `config`, so replays ignore the current
/// environment.
fn pin_seed(cmd: &mut Command, config: &Value) {
    let Some(seed) = config.get("seed").and_then(Value::as_u64) else { return };
    match cmd {
        Command::EvalDetect(a) => a.seed = seed,
        Command::EvalClassify(a) => a.seed = seed,
        Command::Curate(CurateCommand::Sws(a)) => a.seed = Some(seed),
        _ => {}
    }
}

fn replay(a: &ReplayArgs, out: &mut dyn Write) -> Outcome<()> {
    let text = std::fs::read_to_string(&a.report).map_err(|e| Failure::input(format!("{}: {e}", a.report.display())))?;
    let old: RunReport = serde_json::from_str(&text).map_err(|e| Failure::input(format!("{}: {e}", a.report.display())))?;
    if old.schema_version != SCHEMA_VERSION {
        return Err(Failure::input(format!("report schema {} is not supported", old.schema_version)));
    }
    let argv = std::iter::once("lungbench".to_string()).chain(old.args.iter().cloned());
    let mut cli = Cli::try_parse_from(argv).map_err(|e| Failure::input(format!("recorded arguments: {e}")))?;
    pin_seed(&mut cli.command, &old.config);
    let mut inputs = Inputs::default();
    let computed = compute(&cli.command, &mut inputs, &mut |_, _| Ok(()));
    if let Some((key, _)) = inputs.digests.iter().find(|(k, d)| old.inputs.get(*k) != Some(*d)) {
        return Err(Failure::input(format!("input `{key}` differs from the recorded digest")));
    }
    let run = computed?;
    if inputs.digests != old.inputs {
        return Err(Failure::input("inputs differ from the recorded digests"));
    }
    if run.config != old.config {
        return Err(Failure::internal("configuration echo does not reproduce"));
    }
    if run.results != old.results {
        return Err(Failure::internal("results differ from the recorded report"));
    }
    let _ = writeln!(out, "replay ok: {} results reproduced", old.command);
    Ok(())
}

/// Runs the tool on `argv` (program name first). Returns the exit code.
pub fn main_with(argv: Vec<OsString>, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let rendered = e.render().to_string();
            let _ = if e.use_stderr() { stderr.write_all(rendered.as_bytes()) } else { stdout.write_all(rendered.as_bytes()) };
            return e.exit_code();
        }
    };
    if let Some(n) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let args: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, args, stdout) {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(stderr, "error: {f}");
            f.code
        }
    }
}

fn execute(cli: &Cli, args: Vec<String>, stdout: &mut dyn Write) -> Outcome<()> {
    if let Command::Replay(a) = &cli.command {
        return replay(a, stdout);
    }
    let mut inputs = Inputs::default();
    let run = compute(&cli.command, &mut inputs, &mut |p, b| write_file(p, b))?;
    let (target, deterministic) = report_target(&cli.command);
    let text = run.text.clone();
    let report = build_report(run, args, inputs, deterministic).to_json();
    match target {
        Some(path) => {
            write_file(path, report.as_bytes())?;
            let _ = stdout.write_all(text.as_bytes());
        }
        None => {
            let _ = stdout.write_all(report.as_bytes());
        }
    }
    Ok(())
}
