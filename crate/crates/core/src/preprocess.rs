//! Volume preprocessing: resampling onto a fixed grid, HU clipping and z-score
//! normalization. The pipeline order is always resample, then clip, then
//! normalize.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GridFrame, Point3};
use crate::volume::VolumeGrid;

pub const DEFAULT_TARGET_SPACING: [f64; 3] = [0.7, 0.7, 1.25];
pub const DEFAULT_CLIP_LO: f64 = -1000.0;
pub const DEFAULT_CLIP_HI: f64 = 500.0;
pub const DEFAULT_EPSILON_STD: f64 = 1e-6;

/// Tolerance absorbing float noise when an extent is an exact multiple of the
/// target spacing.
const DIM_ROUNDING_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreprocessError {
    #[error("clip range [{lo}, {hi}] is empty")]
    EmptyClipRange { lo: f64, hi: f64 },
    #[error("target spacing must be positive and finite, got {0:?}")]
    BadSpacing([f64; 3]),
    #[error("epsilon_std must be non-negative, got {0}")]
    BadEpsilon(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalize {
    PerVolumeZscore,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub target_spacing: [f64; 3],
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub normalize: Normalize,
    pub epsilon_std: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_spacing: DEFAULT_TARGET_SPACING,
            clip_lo: DEFAULT_CLIP_LO,
            clip_hi: DEFAULT_CLIP_HI,
            normalize: Normalize::PerVolumeZscore,
            epsilon_std: DEFAULT_EPSILON_STD,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        if !(self.clip_lo < self.clip_hi) {
            return Err(PreprocessError::EmptyClipRange { lo: self.clip_lo, hi: self.clip_hi });
        }
        if self.target_spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(PreprocessError::BadSpacing(self.target_spacing));
        }
        if !(self.epsilon_std >= 0.0) {
            return Err(PreprocessError::BadEpsilon(self.epsilon_std));
        }
        Ok(())
    }
}

/// Frame of `src` resampled to `target_spacing`: same origin, dims chosen to
/// cover the source's physical extent.
pub fn resampled_frame(src: &GridFrame, target_spacing: [f64; 3]) -> Result<GridFrame, PreprocessError> {
    if target_spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(PreprocessError::BadSpacing(target_spacing));
    }
    let extent = src.extent_mm();
    let dims = [0, 1, 2].map(|a| ((extent[a] / target_spacing[a]) - DIM_ROUNDING_SLACK).ceil().max(1.0) as usize);
    GridFrame::new(src.origin, target_spacing, dims).map_err(|_| PreprocessError::BadSpacing(target_spacing))
}

/// Trilinear sample of `v` at world position `p`, clamped to the edge outside
/// the grid.
pub fn sample_world(v: &VolumeGrid, p: Point3) -> f64 {
    let f = v.frame();
    let (o, s) = (f.origin.to_array(), f.spacing);
    let p = p.to_array();
    v.sample_voxel([(p[0] - o[0]) / s[0], (p[1] - o[1]) / s[1], (p[2] - o[2]) / s[2]])
}

/// World position of voxel `(i, j, k)` in `frame`.
#[inline]
pub(crate) fn grid_point(frame: &GridFrame, i: i64, j: i64, k: i64) -> Point3 {
    let o = frame.origin;
    let s = frame.spacing;
    Point3::new(o.x + i as f64 * s[0], o.y + j as f64 * s[1], o.z + k as f64 * s[2])
}

/// Trilinear resampling onto `target_spacing`.
pub fn resample(v: &VolumeGrid, target_spacing: [f64; 3]) -> Result<VolumeGrid, PreprocessError> {
    let src = v.frame();
    let out = resampled_frame(src, target_spacing)?;
    let [nx, ny, nz] = out.dims;
    let mut data = vec![0.0; out.voxel_count()];
    data.par_chunks_mut(nx * ny).enumerate().for_each(|(k, plane)| {
        for j in 0..ny {
            for i in 0..nx {
                let p = grid_point(&out, i as i64, j as i64, k as i64);
                plane[i + nx * j] = sample_world(v, p);
            }
        }
    });
    debug_assert_eq!(data.len(), nx * ny * nz);
    Ok(VolumeGrid::new(out, data).expect("interpolated values of a finite volume are finite"))
}

/// Clamps to `[clip_lo, clip_hi]` and, if configured, z-scores with the
/// population standard deviation. Volumes whose std falls below
/// `epsilon_std` normalize to all zeros.
pub fn clip_normalize(v: &VolumeGrid, cfg: &PreprocessConfig) -> Result<VolumeGrid, PreprocessError> {
    cfg.validate()?;
    let mut data: Vec<f64> = v.data().iter().map(|x| x.clamp(cfg.clip_lo, cfg.clip_hi)).collect();
    if cfg.normalize == Normalize::PerVolumeZscore {
        zscore_in_place(&mut data, cfg.epsilon_std);
    }
    Ok(VolumeGrid::new(*v.frame(), data).expect("clipped values are finite"))
}

pub(crate) fn zscore_in_place(data: &mut [f64], epsilon_std: f64) {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std >= epsilon_std) || std == 0.0 {
        data.iter_mut().for_each(|x| *x = 0.0);
    } else {
        data.iter_mut().for_each(|x| *x = (*x - mean) / std);
    }
}

/// Full pipeline: resample, clip, normalize.
pub fn preprocess(v: &VolumeGrid, cfg: &PreprocessConfig) -> Result<VolumeGrid, PreprocessError> {
    cfg.validate()?;
    clip_normalize(&resample(v, cfg.target_spacing)?, cfg)
}
