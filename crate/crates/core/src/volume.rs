//! Dense scalar volumes on an axis-aligned grid.

use thiserror::Error;

use crate::geometry::GridFrame;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VolumeError {
    #[error("data length {actual} does not match dims {dims:?} ({expected} voxels)")]
    LengthMismatch { dims: [usize; 3], expected: usize, actual: usize },
    #[error("non-finite voxel value at linear index {0}")]
    NonFinite(usize),
}

/// Scalar volume stored x-fastest (`i + nx * (j + ny * k)`).
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    frame: GridFrame,
    data: Vec<f64>,
}

impl VolumeGrid {
    pub fn new(frame: GridFrame, data: Vec<f64>) -> Result<Self, VolumeError> {
        let expected = frame.voxel_count();
        if data.len() != expected {
            return Err(VolumeError::LengthMismatch { dims: frame.dims, expected, actual: data.len() });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite(i));
        }
        Ok(Self { frame, data })
    }

    pub fn filled(frame: GridFrame, value: f64) -> Self {
        Self { data: vec![value; frame.voxel_count()], frame }
    }

    /// Builds a volume by evaluating `f(i, j, k)` at every voxel.
    pub fn from_fn(frame: GridFrame, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self, VolumeError> {
        let [nx, ny, nz] = frame.dims;
        let mut data = Vec::with_capacity(frame.voxel_count());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(frame, data)
    }

    pub fn frame(&self) -> &GridFrame {
        &self.frame
    }

    pub fn dims(&self) -> [usize; 3] {
        self.frame.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.frame.linear_index(i, j, k)]
    }

    /// Trilinear sample at a continuous voxel coordinate. Coordinates outside
    /// the lattice are clamped to the nearest edge.
    pub fn sample_voxel(&self, v: [f64; 3]) -> f64 {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut t = [0.0f64; 3];
        for a in 0..3 {
            let n = self.frame.dims[a];
            let u = v[a].clamp(0.0, (n - 1) as f64);
            let f = u.floor();
            let i0 = (f as usize).min(n - 1);
            lo[a] = i0;
            hi[a] = (i0 + 1).min(n - 1);
            t[a] = u - f;
        }
        let g = |i: usize, j: usize, k: usize| self.get(i, j, k);
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let c00 = lerp(g(lo[0], lo[1], lo[2]), g(hi[0], lo[1], lo[2]), t[0]);
        let c10 = lerp(g(lo[0], hi[1], lo[2]), g(hi[0], hi[1], lo[2]), t[0]);
        let c01 = lerp(g(lo[0], lo[1], hi[2]), g(hi[0], lo[1], hi[2]), t[0]);
        let c11 = lerp(g(lo[0], hi[1], hi[2]), g(hi[0], hi[1], hi[2]), t[0]);
        let c0 = lerp(c00, c10, t[1]);
        let c1 = lerp(c01, c11, t[1]);
        lerp(c0, c1, t[2])
    }
}
