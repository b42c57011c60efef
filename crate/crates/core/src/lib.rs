//! Evaluation and curation toolkit for lung-nodule detection and
//! lung-cancer classification models on CT volumes.
//!
//! - [`detect_eval`]: candidate matching, FROC curves and CPM with bootstrap
//!   intervals and subgroup breakdowns.
//! - [`classify_eval`]: ROC AUC with DeLong or bootstrap intervals.
//! - [`curation`]: 3D boxes from slice boxes, negative mining, stratified
//!   patch sampling and patch extraction.
//! - [`preprocess`], [`nifti_io`], [`tabular_io`]: volume handling and file
//!   formats.

pub mod classify_eval;
pub mod curation;
pub mod detect_eval;
pub mod geometry;
pub mod nifti_io;
pub mod preprocess;
pub mod stats;
pub mod tabular_io;
pub mod volume;

pub use classify_eval::{AucEstimate, CiMethod, ClassifyError, ScoredRecord, SubgroupRow};
pub use curation::{
    CurationError, GroupingParams, NegativeSelection, PatchClass, PatchManifest, PatchRow, SwsConfig, SwsOutcome,
};
pub use detect_eval::{DetectError, FrocBootstrap, FrocCurve, FrocGroupRow, Interval, MatchResult, OperatingPoint};
pub use geometry::{Box3, GeometryError, GridFrame, HitCriterion, LesionGeometry, Point3};
pub use nifti_io::{Datatype, NiftiError, WriteOptions};
pub use preprocess::{Normalize, PreprocessConfig, PreprocessError};
pub use tabular_io::{
    Annotation, AnnotationSchema, AnnotationTable, Candidate, ColumnMap, Label, ScanManifest, SliceBox2D, SliceUnit,
    SubjectMeta, TabularError,
};
pub use volume::{VolumeError, VolumeGrid};
