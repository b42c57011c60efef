//! Comma-delimited input tables: annotations, candidates, exclusions, scan
//! manifests, 2D slice boxes, subject metadata and classification scores.
//!
//! Every table has a mandatory header row. Column names are matched after
//! applying a [`ColumnMap`], which always includes the LUNA16 aliases
//! (`seriesuid`, `coordX`, `coordY`, `coordZ`, `diameter_mm`).
//!
//! Numbers are emitted with Rust's shortest round-trip formatting, so
//! `parse(emit(rows)) == rows`.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify_eval::ScoredRecord;
use crate::geometry::{Box3, LesionGeometry, Point3};

/// Parse failure located at a 1-based line and a column name.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}, column `{column}`: {message}")]
pub struct TabularError {
    pub line: u64,
    pub column: String,
    pub message: String,
}

impl TabularError {
    fn new(line: u64, column: impl Into<String>, message: impl Into<String>) -> Self {
        Self { line, column: column.into(), message: message.into() }
    }
}

pub type Result<T> = std::result::Result<T, TabularError>;

/// Header renaming applied before canonical column lookup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnMap {
    aliases: HashMap<String, String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        let aliases = [
            ("seriesuid", "scan_id"),
            ("coordX", "x"),
            ("coordY", "y"),
            ("coordZ", "z"),
            ("diameter_mm", "diameter"),
        ]
        .into_iter()
        .map(|(a, c)| (a.to_string(), c.to_string()))
        .collect();
        Self { aliases }
    }
}

impl ColumnMap {
    /// Adds `from=to` pairs separated by commas, e.g. `"uid=scan_id,prob=probability"`.
    pub fn with_spec(mut self, spec: &str) -> std::result::Result<Self, String> {
        for pair in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (from, to) = pair
                .split_once('=')
                .ok_or_else(|| format!("column mapping `{pair}` is not of the form from=to"))?;
            let (from, to) = (from.trim(), to.trim());
            if from.is_empty() || to.is_empty() {
                return Err(format!("column mapping `{pair}` has an empty side"));
            }
            self.aliases.insert(from.to_string(), to.to_string());
        }
        Ok(self)
    }

    fn canonical<'a>(&'a self, name: &'a str) -> &'a str {
        self.aliases.get(name).map(String::as_str).unwrap_or(name)
    }
}

struct Table {
    columns: HashMap<String, usize>,
    names: Vec<String>,
    rows: Vec<(u64, csv::StringRecord)>,
}

impl Table {
    fn read(text: &str, map: &ColumnMap) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .flexible(false)
            .from_reader(text.as_bytes());
        let headers = rdr
            .headers()
            .map_err(|e| TabularError::new(1, "", format!("unreadable header: {e}")))?
            .clone();
        if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
            return Err(TabularError::new(1, "", "missing header row"));
        }
        let mut columns = HashMap::new();
        let mut names = Vec::new();
        for (i, h) in headers.iter().enumerate() {
            let name = map.canonical(h.trim_start_matches('\u{feff}')).to_string();
            if columns.insert(name.clone(), i).is_some() {
                return Err(TabularError::new(1, name, "duplicate column"));
            }
            names.push(name);
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                TabularError::new(line, "", format!("malformed row: {e}"))
            })?;
            if rec.iter().all(str::is_empty) {
                continue;
            }
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            rows.push((line, rec));
        }
        Ok(Self { columns, names, rows })
    }

    fn has(&self, col: &str) -> bool {
        self.columns.contains_key(col)
    }

    fn require(&self, cols: &[&str]) -> Result<()> {
        for c in cols {
            if !self.has(c) {
                return Err(TabularError::new(1, *c, "required column missing from header"));
            }
        }
        Ok(())
    }
}

struct Row<'a> {
    table: &'a Table,
    rec: &'a csv::StringRecord,
    line: u64,
}

impl<'a> Row<'a> {
    fn str(&self, col: &str) -> &'a str {
        self.table.columns.get(col).and_then(|&i| self.rec.get(i)).unwrap_or("")
    }

    fn nonempty(&self, col: &str) -> Result<&'a str> {
        let s = self.str(col);
        if s.is_empty() {
            Err(self.err(col, "empty value"))
        } else {
            Ok(s)
        }
    }

    fn f64(&self, col: &str) -> Result<f64> {
        let s = self.nonempty(col)?;
        let v: f64 = s.parse().map_err(|_| self.err(col, format!("`{s}` is not a number")))?;
        if !v.is_finite() {
            return Err(self.err(col, format!("`{s}` is not finite")));
        }
        Ok(v)
    }

    fn positive(&self, col: &str) -> Result<f64> {
        let v = self.f64(col)?;
        if v <= 0.0 {
            return Err(self.err(col, format!("must be positive, got {v}")));
        }
        Ok(v)
    }

    fn point(&self) -> Result<Point3> {
        Ok(Point3::new(self.f64("x")?, self.f64("y")?, self.f64("z")?))
    }

    fn err(&self, col: &str, msg: impl Into<String>) -> TabularError {
        TabularError::new(self.line, col, msg)
    }
}

fn rows(t: &Table) -> impl Iterator<Item = Row<'_>> {
    t.rows.iter().map(move |(line, rec)| Row { table: t, rec, line: *line })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Malignant,
    Benign,
}

impl Label {
    fn parse(s: &str) -> Option<Option<Self>> {
        match s.to_ascii_lowercase().as_str() {
            "" => Some(None),
            "malignant" | "1" | "cancer" => Some(Some(Self::Malignant)),
            "benign" | "0" | "no-cancer" => Some(Some(Self::Benign)),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Malignant => "malignant",
            Self::Benign => "benign",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub scan_id: String,
    pub nodule_id: String,
    pub geometry: LesionGeometry,
    pub label: Option<Label>,
}

/// Which geometry columns an annotation table carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationSchema {
    /// `scan_id, x, y, z, diameter`
    Diameter,
    /// `scan_id, x, y, z, w, h, d`
    Box,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationTable {
    pub schema: AnnotationSchema,
    pub rows: Vec<Annotation>,
}

pub fn parse_annotations(text: &str) -> Result<AnnotationTable> {
    parse_annotations_with(text, &ColumnMap::default())
}

pub fn parse_annotations_with(text: &str, map: &ColumnMap) -> Result<AnnotationTable> {
    let t = Table::read(text, map)?;
    t.require(&["scan_id", "x", "y", "z"])?;
    let schema = if t.has("diameter") {
        AnnotationSchema::Diameter
    } else if t.has("w") && t.has("h") && t.has("d") {
        AnnotationSchema::Box
    } else {
        let missing = if ["w", "h", "d"].iter().any(|c| t.has(c)) {
            ["w", "h", "d"].into_iter().find(|c| !t.has(c)).unwrap_or("diameter")
        } else {
            "diameter"
        };
        return Err(TabularError::new(
            1,
            missing,
            "need either a `diameter` column or all of `w`, `h`, `d`",
        ));
    };

    let mut out = Vec::with_capacity(t.rows.len());
    let mut seen: HashMap<(String, String), u64> = HashMap::new();
    let mut per_scan: HashMap<String, usize> = HashMap::new();
    for row in rows(&t) {
        let scan_id = row.nonempty("scan_id")?.to_string();
        let center = row.point()?;
        let geometry = match schema {
            AnnotationSchema::Diameter => {
                let d = row.positive("diameter")?;
                LesionGeometry::sphere(center, d).map_err(|e| row.err("diameter", e.to_string()))?
            }
            AnnotationSchema::Box => {
                let size = [row.positive("w")?, row.positive("h")?, row.positive("d")?];
                LesionGeometry::Box(Box3::new(center, size).map_err(|e| row.err("w", e.to_string()))?)
            }
        };
        let label = if t.has("label") {
            let s = row.str("label");
            Label::parse(s).ok_or_else(|| row.err("label", format!("unknown label `{s}`")))?
        } else {
            None
        };
        let ordinal = per_scan.entry(scan_id.clone()).or_insert(0);
        *ordinal += 1;
        let nodule_id = if t.has("nodule_id") {
            row.nonempty("nodule_id")?.to_string()
        } else {
            ordinal.to_string()
        };
        if let Some(first) = seen.insert((scan_id.clone(), nodule_id.clone()), row.line) {
            return Err(row.err(
                "nodule_id",
                format!("nodule_id `{nodule_id}` repeats line {first} within scan `{scan_id}`"),
            ));
        }
        out.push(Annotation { scan_id, nodule_id, geometry, label });
    }
    Ok(AnnotationTable { schema, rows: out })
}

/// Exclusion entries share the annotation schema; labels are dropped.
pub fn parse_exclusions(text: &str) -> Result<AnnotationTable> {
    parse_exclusions_with(text, &ColumnMap::default())
}

pub fn parse_exclusions_with(text: &str, map: &ColumnMap) -> Result<AnnotationTable> {
    let mut t = parse_annotations_with(text, map)?;
    for a in &mut t.rows {
        a.label = None;
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub scan_id: String,
    pub location: Point3,
    pub probability: f64,
}

pub fn parse_candidates(text: &str) -> Result<Vec<Candidate>> {
    parse_candidates_with(text, &ColumnMap::default())
}

pub fn parse_candidates_with(text: &str, map: &ColumnMap) -> Result<Vec<Candidate>> {
    let t = Table::read(text, map)?;
    t.require(&["scan_id", "x", "y", "z", "probability"])?;
    rows(&t)
        .map(|row| {
            let probability = row.f64("probability")?;
            if !(0.0..=1.0).contains(&probability) {
                return Err(row.err("probability", format!("{probability} is outside [0, 1]")));
            }
            Ok(Candidate {
                scan_id: row.nonempty("scan_id")?.to_string(),
                location: row.point()?,
                probability,
            })
        })
        .collect()
}

/// How the `slice` column of a slice-box table is expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceUnit {
    /// Integer z-index.
    Index,
    /// Slice z-position in millimeters.
    Millimeters,
}

impl FromStr for SliceUnit {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "index" => Ok(Self::Index),
            "mm" => Ok(Self::Millimeters),
            other => Err(format!("unknown slice unit `{other}` (expected `index` or `mm`)")),
        }
    }
}

impl fmt::Display for SliceUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Index => "index",
            Self::Millimeters => "mm",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceBox2D {
    pub scan_id: String,
    pub slice: f64,
    pub unit: SliceUnit,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl SliceBox2D {
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    /// In-plane intersection over union.
    pub fn iou2(&self, other: &SliceBox2D) -> f64 {
        let ix = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let iy = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        inter / (self.width() * self.height() + other.width() * other.height() - inter)
    }
}

pub fn parse_slice_boxes(text: &str, unit: SliceUnit) -> Result<Vec<SliceBox2D>> {
    parse_slice_boxes_with(text, unit, &ColumnMap::default())
}

pub fn parse_slice_boxes_with(text: &str, unit: SliceUnit, map: &ColumnMap) -> Result<Vec<SliceBox2D>> {
    let t = Table::read(text, map)?;
    t.require(&["scan_id", "slice", "x_min", "y_min", "x_max", "y_max"])?;
    rows(&t)
        .map(|row| {
            let slice = row.f64("slice")?;
            if unit == SliceUnit::Index && slice.fract() != 0.0 {
                return Err(row.err("slice", format!("slice index {slice} is not an integer")));
            }
            let (x_min, x_max) = (row.f64("x_min")?, row.f64("x_max")?);
            if x_max <= x_min {
                return Err(row.err("x_max", format!("x_max {x_max} must exceed x_min {x_min}")));
            }
            let (y_min, y_max) = (row.f64("y_min")?, row.f64("y_max")?);
            if y_max <= y_min {
                return Err(row.err("y_max", format!("y_max {y_max} must exceed y_min {y_min}")));
            }
            Ok(SliceBox2D {
                scan_id: row.nonempty("scan_id")?.to_string(),
                slice,
                unit,
                x_min,
                y_min,
                x_max,
                y_max,
            })
        })
        .collect()
}

/// Attribute value used for empty metadata cells.
pub const MISSING: &str = "(missing)";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectMeta {
    pub scan_id: String,
    /// Attribute columns in header order; empty cells stay empty here.
    pub attributes: Vec<(String, String)>,
}

impl SubjectMeta {
    pub fn get(&self, name: &str) -> Option<&str> {
        self.attributes.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
    }

    /// Grouping key for `name`; empty values map to [`MISSING`].
    pub fn group_key(&self, name: &str) -> &str {
        match self.get(name) {
            Some("") | None => MISSING,
            Some(v) => v,
        }
    }
}

pub fn parse_metadata(text: &str) -> Result<Vec<SubjectMeta>> {
    parse_metadata_with(text, &ColumnMap::default())
}

pub fn parse_metadata_with(text: &str, map: &ColumnMap) -> Result<Vec<SubjectMeta>> {
    let t = Table::read(text, map)?;
    if t.names.first().map(String::as_str) != Some("scan_id") {
        return Err(TabularError::new(1, t.names.first().cloned().unwrap_or_default(), "first column must be `scan_id`"));
    }
    let mut seen: HashMap<String, u64> = HashMap::new();
    let mut out = Vec::with_capacity(t.rows.len());
    for row in rows(&t) {
        let scan_id = row.nonempty("scan_id")?.to_string();
        if let Some(first) = seen.insert(scan_id.clone(), row.line) {
            return Err(row.err(
                "scan_id",
                format!("scan_id `{scan_id}` already defined on line {first} (duplicate on line {})", row.line),
            ));
        }
        let attributes = t.names[1..].iter().map(|n| (n.clone(), row.str(n).to_string())).collect();
        out.push(SubjectMeta { scan_id, attributes });
    }
    Ok(out)
}

/// Ordered set of scans forming the FP-per-scan denominator.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ScanManifest {
    ids: Vec<String>,
}

impl ScanManifest {
    pub fn new(ids: Vec<String>) -> std::result::Result<Self, String> {
        let mut seen = BTreeSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(format!("duplicate scan_id `{id}` in manifest"));
            }
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.ids.iter().any(|s| s == id)
    }
}

pub fn parse_manifest(text: &str) -> Result<ScanManifest> {
    parse_manifest_with(text, &ColumnMap::default())
}

pub fn parse_manifest_with(text: &str, map: &ColumnMap) -> Result<ScanManifest> {
    let t = Table::read(text, map)?;
    t.require(&["scan_id"])?;
    let mut seen: HashMap<String, u64> = HashMap::new();
    let mut ids = Vec::with_capacity(t.rows.len());
    for row in rows(&t) {
        let id = row.nonempty("scan_id")?.to_string();
        if let Some(first) = seen.insert(id.clone(), row.line) {
            return Err(row.err("scan_id", format!("scan_id `{id}` already listed on line {first}")));
        }
        ids.push(id);
    }
    Ok(ScanManifest { ids })
}

pub fn parse_scores(text: &str) -> Result<Vec<ScoredRecord>> {
    parse_scores_with(text, &ColumnMap::default())
}

pub fn parse_scores_with(text: &str, map: &ColumnMap) -> Result<Vec<ScoredRecord>> {
    let t = Table::read(text, map)?;
    t.require(&["record_id", "scan_id", "score", "label"])?;
    rows(&t)
        .map(|row| {
            let score = row.f64("score")?;
            if !(0.0..=1.0).contains(&score) {
                return Err(row.err("score", format!("{score} is outside [0, 1]")));
            }
            let label = match row.nonempty("label")? {
                "1" => true,
                "0" => false,
                other => return Err(row.err("label", format!("label `{other}` is not 0 or 1"))),
            };
            Ok(ScoredRecord {
                record_id: row.nonempty("record_id")?.to_string(),
                scan_id: row.nonempty("scan_id")?.to_string(),
                score,
                label,
            })
        })
        .collect()
}

fn writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new())
}

fn finish(w: csv::Writer<Vec<u8>>) -> String {
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv output is utf-8")
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// Emits annotations in the given schema. Diameter rows under the box schema
/// become cubes; box rows cannot be written in the diameter schema.
pub fn emit_annotations(table: &AnnotationTable) -> std::result::Result<String, String> {
    let mut w = writer();
    let geo: &[&str] = match table.schema {
        AnnotationSchema::Diameter => &["diameter"],
        AnnotationSchema::Box => &["w", "h", "d"],
    };
    let mut header = vec!["scan_id", "x", "y", "z"];
    header.extend_from_slice(geo);
    header.extend_from_slice(&["label", "nodule_id"]);
    w.write_record(&header).map_err(|e| e.to_string())?;
    for a in &table.rows {
        let c = a.geometry.center();
        let mut rec = vec![a.scan_id.clone(), num(c.x), num(c.y), num(c.z)];
        match (table.schema, &a.geometry) {
            (AnnotationSchema::Diameter, LesionGeometry::Sphere { diameter, .. }) => rec.push(num(*diameter)),
            (AnnotationSchema::Diameter, LesionGeometry::Box(_)) => {
                return Err(format!("box annotation `{}` cannot be written with a diameter column", a.nodule_id))
            }
            (AnnotationSchema::Box, g) => rec.extend(g.as_box().size.iter().map(|s| num(*s))),
        }
        rec.push(a.label.map(Label::as_str).unwrap_or("").to_string());
        rec.push(a.nodule_id.clone());
        w.write_record(&rec).map_err(|e| e.to_string())?;
    }
    Ok(finish(w))
}

pub fn emit_candidates(rows: &[Candidate]) -> String {
    let mut w = writer();
    w.write_record(["scan_id", "x", "y", "z", "probability"]).unwrap();
    for c in rows {
        let p = c.location;
        w.write_record([c.scan_id.clone(), num(p.x), num(p.y), num(p.z), num(c.probability)]).unwrap();
    }
    finish(w)
}

pub fn emit_slice_boxes(rows: &[SliceBox2D]) -> String {
    let mut w = writer();
    w.write_record(["scan_id", "slice", "x_min", "y_min", "x_max", "y_max"]).unwrap();
    for b in rows {
        w.write_record([
            b.scan_id.clone(),
            num(b.slice),
            num(b.x_min),
            num(b.y_min),
            num(b.x_max),
            num(b.y_max),
        ])
        .unwrap();
    }
    finish(w)
}

pub fn emit_metadata(rows: &[SubjectMeta]) -> String {
    let mut w = writer();
    let names: Vec<&str> = rows
        .first()
        .map(|m| m.attributes.iter().map(|(k, _)| k.as_str()).collect())
        .unwrap_or_default();
    let mut header = vec!["scan_id"];
    header.extend(&names);
    w.write_record(&header).unwrap();
    for m in rows {
        let mut rec = vec![m.scan_id.as_str()];
        rec.extend(names.iter().map(|n| m.get(n).unwrap_or("")));
        w.write_record(&rec).unwrap();
    }
    finish(w)
}

pub fn emit_manifest(m: &ScanManifest) -> String {
    let mut w = writer();
    w.write_record(["scan_id"]).unwrap();
    for id in m.ids() {
        w.write_record([id]).unwrap();
    }
    finish(w)
}

pub fn emit_scores(rows: &[ScoredRecord]) -> String {
    let mut w = writer();
    w.write_record(["record_id", "scan_id", "score", "label"]).unwrap();
    for r in rows {
        w.write_record([
            r.record_id.clone(),
            r.scan_id.clone(),
            num(r.score),
            if r.label { "1" } else { "0" }.to_string(),
        ])
        .unwrap();
    }
    finish(w)
}
