//! World/voxel coordinate transforms, 3D box arithmetic and the candidate hit rules.
//!
//! Axis order is `(x, y, z)` everywhere. World coordinates are millimeters.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("non-finite coordinate in {0}")]
    NonFinite(&'static str),
    #[error("box sizes must be positive, got ({0}, {1}, {2})")]
    NonPositiveSize(f64, f64, f64),
    #[error("diameter must be positive, got {0}")]
    NonPositiveDiameter(f64),
    #[error("grid spacing must be positive, got ({0}, {1}, {2})")]
    NonPositiveSpacing(f64, f64, f64),
    #[error("grid dims must all be >= 1, got ({0}, {1}, {2})")]
    EmptyDims(usize, usize, usize),
    #[error("IoU threshold must lie in (0, 1], got {0}")]
    BadThreshold(f64),
    #[error("center-in-sphere matching needs a diameter annotation, got a box")]
    SphereNeedsDiameter,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn distance(&self, other: &Point3) -> f64 {
        self.distance_sq(other).sqrt()
    }

    pub fn distance_sq(&self, other: &Point3) -> f64 {
        let (dx, dy, dz) = (self.x - other.x, self.y - other.y, self.z - other.z);
        dx * dx + dy * dy + dz * dz
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

/// Axis-aligned box given by its center and full extents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3 {
    pub center: Point3,
    pub size: [f64; 3],
}

impl Box3 {
    pub fn new(center: Point3, size: [f64; 3]) -> Result<Self, GeometryError> {
        if !center.is_finite() || size.iter().any(|s| !s.is_finite()) {
            return Err(GeometryError::NonFinite("box"));
        }
        if size.iter().any(|&s| s <= 0.0) {
            return Err(GeometryError::NonPositiveSize(size[0], size[1], size[2]));
        }
        Ok(Self { center, size })
    }

    /// Cube of side `side` centered at `center`.
    pub fn cube(center: Point3, side: f64) -> Result<Self, GeometryError> {
        Self::new(center, [side; 3])
    }

    /// Builds the box spanning `[lo, hi]` on every axis.
    pub fn from_bounds(lo: [f64; 3], hi: [f64; 3]) -> Result<Self, GeometryError> {
        let center = Point3::new(
            0.5 * (lo[0] + hi[0]),
            0.5 * (lo[1] + hi[1]),
            0.5 * (lo[2] + hi[2]),
        );
        Self::new(center, [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]])
    }

    pub fn min(&self) -> [f64; 3] {
        let c = self.center.to_array();
        [
            c[0] - 0.5 * self.size[0],
            c[1] - 0.5 * self.size[1],
            c[2] - 0.5 * self.size[2],
        ]
    }

    pub fn max(&self) -> [f64; 3] {
        let c = self.center.to_array();
        [
            c[0] + 0.5 * self.size[0],
            c[1] + 0.5 * self.size[1],
            c[2] + 0.5 * self.size[2],
        ]
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    /// Closed-box containment.
    pub fn contains(&self, p: &Point3) -> bool {
        let (lo, hi) = (self.min(), self.max());
        let p = p.to_array();
        (0..3).all(|i| p[i] >= lo[i] && p[i] <= hi[i])
    }
}

/// Intersection-over-union of two boxes.
pub fn iou3(a: &Box3, b: &Box3) -> f64 {
    let (alo, ahi, blo, bhi) = (a.min(), a.max(), b.min(), b.max());
    let mut inter = 1.0;
    for i in 0..3 {
        let overlap = ahi[i].min(bhi[i]) - alo[i].max(blo[i]);
        if overlap <= 0.0 {
            return 0.0;
        }
        inter *= overlap;
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Voxel lattice placed in world space. `origin` is the world position of the
/// center of voxel `(0, 0, 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridFrame {
    pub origin: Point3,
    pub spacing: [f64; 3],
    pub dims: [usize; 3],
}

impl GridFrame {
    pub fn new(origin: Point3, spacing: [f64; 3], dims: [usize; 3]) -> Result<Self, GeometryError> {
        if !origin.is_finite() || spacing.iter().any(|s| !s.is_finite()) {
            return Err(GeometryError::NonFinite("grid frame"));
        }
        if spacing.iter().any(|&s| s <= 0.0) {
            return Err(GeometryError::NonPositiveSpacing(spacing[0], spacing[1], spacing[2]));
        }
        if dims.contains(&0) {
            return Err(GeometryError::EmptyDims(dims[0], dims[1], dims[2]));
        }
        Ok(Self { origin, spacing, dims })
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Physical extent covered by the lattice, `dims * spacing` per axis.
    pub fn extent_mm(&self) -> [f64; 3] {
        [
            self.dims[0] as f64 * self.spacing[0],
            self.dims[1] as f64 * self.spacing[1],
            self.dims[2] as f64 * self.spacing[2],
        ]
    }

    /// Row index into x-fastest storage.
    #[inline]
    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }
}

pub fn world_to_voxel(p: &Point3, frame: &GridFrame) -> Result<[f64; 3], GeometryError> {
    if !p.is_finite() {
        return Err(GeometryError::NonFinite("world point"));
    }
    let (p, o) = (p.to_array(), frame.origin.to_array());
    Ok([
        (p[0] - o[0]) / frame.spacing[0],
        (p[1] - o[1]) / frame.spacing[1],
        (p[2] - o[2]) / frame.spacing[2],
    ])
}

pub fn voxel_to_world(v: [f64; 3], frame: &GridFrame) -> Result<Point3, GeometryError> {
    if v.iter().any(|c| !c.is_finite()) {
        return Err(GeometryError::NonFinite("voxel coordinate"));
    }
    let o = frame.origin.to_array();
    Ok(Point3::new(
        o[0] + v[0] * frame.spacing[0],
        o[1] + v[1] * frame.spacing[1],
        o[2] + v[2] * frame.spacing[2],
    ))
}

/// Annotated lesion extent: either a full box or a center with a diameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LesionGeometry {
    Box(Box3),
    Sphere { center: Point3, diameter: f64 },
}

impl LesionGeometry {
    pub fn sphere(center: Point3, diameter: f64) -> Result<Self, GeometryError> {
        if !center.is_finite() || !diameter.is_finite() {
            return Err(GeometryError::NonFinite("sphere"));
        }
        if diameter <= 0.0 {
            return Err(GeometryError::NonPositiveDiameter(diameter));
        }
        Ok(Self::Sphere { center, diameter })
    }

    pub fn center(&self) -> Point3 {
        match self {
            Self::Box(b) => b.center,
            Self::Sphere { center, .. } => *center,
        }
    }

    /// Box view; a diameter annotation becomes the cube it inscribes.
    pub fn as_box(&self) -> Box3 {
        match *self {
            Self::Box(b) => b,
            Self::Sphere { center, diameter } => Box3 { center, size: [diameter; 3] },
        }
    }
}

pub const DEFAULT_PROBE_SIDE_MM: f64 = 5.0;

/// Rule deciding whether a point candidate detects an annotated lesion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum HitCriterion {
    CenterInBox,
    CenterInSphere,
    IouThreshold { threshold: f64, probe_side_mm: f64 },
}

impl HitCriterion {
    pub fn iou(threshold: f64) -> Result<Self, GeometryError> {
        Self::iou_with_probe(threshold, DEFAULT_PROBE_SIDE_MM)
    }

    pub fn iou_with_probe(threshold: f64, probe_side_mm: f64) -> Result<Self, GeometryError> {
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(GeometryError::BadThreshold(threshold));
        }
        if !(probe_side_mm.is_finite() && probe_side_mm > 0.0) {
            return Err(GeometryError::NonPositiveSize(probe_side_mm, probe_side_mm, probe_side_mm));
        }
        Ok(Self::IouThreshold { threshold, probe_side_mm })
    }

    /// Checks that `ann` can be evaluated under this criterion.
    pub fn check(&self, ann: &LesionGeometry) -> Result<(), GeometryError> {
        match (self, ann) {
            (Self::CenterInSphere, LesionGeometry::Box(_)) => Err(GeometryError::SphereNeedsDiameter),
            _ => Ok(()),
        }
    }

    /// Overlap strength used to pick among several annotations a candidate hits.
    /// Only the IoU mode has a graded overlap; the other modes return 1 so the
    /// nearest-center tie-break decides.
    pub fn overlap(&self, c: &Point3, ann: &LesionGeometry) -> f64 {
        match *self {
            Self::IouThreshold { probe_side_mm, .. } => {
                iou3(&Box3 { center: *c, size: [probe_side_mm; 3] }, &ann.as_box())
            }
            _ => 1.0,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::CenterInBox => "center-box".to_string(),
            Self::CenterInSphere => "center-sphere".to_string(),
            Self::IouThreshold { threshold, probe_side_mm } => {
                format!("iou:{threshold} (probe {probe_side_mm} mm cube)")
            }
        }
    }
}

/// Whether candidate point `c` detects `ann` under `crit`.
pub fn hit(c: &Point3, ann: &LesionGeometry, crit: &HitCriterion) -> Result<bool, GeometryError> {
    crit.check(ann)?;
    Ok(match (crit, ann) {
        (HitCriterion::CenterInBox, g) => g.as_box().contains(c),
        (HitCriterion::CenterInSphere, LesionGeometry::Sphere { center, diameter }) => {
            let r = 0.5 * diameter;
            c.distance_sq(center) < r * r
        }
        (HitCriterion::CenterInSphere, LesionGeometry::Box(_)) => unreachable!("rejected by check"),
        (HitCriterion::IouThreshold { threshold, .. }, g) => crit.overlap(c, g) >= *threshold,
    })
}
