//! Single-file NIfTI-1 (`.nii`, `.nii.gz`) reader and writer.
//!
//! Only int16 and float32 payloads on axis-aligned grids are supported. The
//! reader accepts either byte order; the writer always emits little-endian
//! with a zeroed 4-byte extension flag and the payload at offset 352.

use std::io::{Read, Write};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use thiserror::Error;

use crate::geometry::{GridFrame, Point3};
use crate::volume::VolumeGrid;

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";
const ORIENTATION_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("stream too short for a NIfTI-1 header: {0} bytes")]
    TooShort(usize),
    #[error("header size field is {0}, expected 348")]
    BadHeaderSize(i32),
    #[error("bad magic {0:?}: expected single-file NIfTI-1 \"n+1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported datatype code {0} (only int16 = 4 and float32 = 16)")]
    UnsupportedDatatype(i16),
    #[error("unsupported dimensionality: dim = {0:?}")]
    UnsupportedDims([i16; 8]),
    #[error("non-positive voxel spacing ({0}, {1}, {2})")]
    NonPositiveSpacing(f64, f64, f64),
    #[error("unsupported orientation: {0}")]
    UnsupportedOrientation(String),
    #[error("truncated payload: expected {expected} bytes after offset {offset}, found {actual}")]
    Truncated { offset: usize, expected: usize, actual: usize },
    #[error("vox_offset {0} is smaller than the header")]
    BadVoxOffset(f32),
    #[error("voxel value at linear index {0} is not finite")]
    NonFinite(usize),
    #[error("invalid volume: {0}")]
    Volume(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    Int16,
    Float32,
}

impl Datatype {
    pub fn code(self) -> i16 {
        match self {
            Self::Int16 => 4,
            Self::Float32 => 16,
        }
    }

    pub fn bitpix(self) -> i16 {
        match self {
            Self::Int16 => 16,
            Self::Float32 => 32,
        }
    }

    fn from_code(code: i16) -> Result<Self, NiftiError> {
        match code {
            4 => Ok(Self::Int16),
            16 => Ok(Self::Float32),
            other => Err(NiftiError::UnsupportedDatatype(other)),
        }
    }

    fn bytes(self) -> usize {
        self.bitpix() as usize / 8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ByteOrder {
    Little,
    Big,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub datatype: Datatype,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub scl_slope: f64,
    pub scl_inter: f64,
    pub byte_order: ByteOrder,
    pub vox_offset: usize,
}

impl VolumeHeader {
    /// Slope with the NIfTI rule that 0 means identity.
    pub fn effective_slope(&self) -> f64 {
        if self.scl_slope == 0.0 || !self.scl_slope.is_finite() {
            1.0
        } else {
            self.scl_slope
        }
    }

    pub fn effective_intercept(&self) -> f64 {
        if self.scl_slope == 0.0 || !self.scl_inter.is_finite() {
            0.0
        } else {
            self.scl_inter
        }
    }

    pub fn payload_bytes(&self) -> usize {
        self.dims.iter().product::<usize>() * self.datatype.bytes()
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    order: ByteOrder,
}

impl Cursor<'_> {
    fn raw<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.bytes[at..at + N]);
        b
    }

    fn i16(&self, at: usize) -> i16 {
        match self.order {
            ByteOrder::Little => i16::from_le_bytes(self.raw(at)),
            ByteOrder::Big => i16::from_be_bytes(self.raw(at)),
        }
    }

    fn f32(&self, at: usize) -> f32 {
        match self.order {
            ByteOrder::Little => f32::from_le_bytes(self.raw(at)),
            ByteOrder::Big => f32::from_be_bytes(self.raw(at)),
        }
    }
}

fn maybe_gunzip(bytes: &[u8]) -> Result<std::borrow::Cow<'_, [u8]>, NiftiError> {
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(bytes).read_to_end(&mut out)?;
        Ok(out.into())
    } else {
        Ok(bytes.into())
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= ORIENTATION_TOL * a.abs().max(b.abs()).max(1.0)
}

/// Widens a header float to the shortest decimal that round-trips through
/// f32, so a spacing of 0.7 written as f32 reads back as 0.7.
fn widen(x: f32) -> f64 {
    if x.is_finite() {
        x.to_string().parse().expect("f32 display parses as f64")
    } else {
        x as f64
    }
}

/// Parses the 348-byte header of an uncompressed stream.
pub fn parse_header(bytes: &[u8]) -> Result<VolumeHeader, NiftiError> {
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::TooShort(bytes.len()));
    }
    let size_le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let size_be = i32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let order = if size_le == HEADER_SIZE as i32 {
        ByteOrder::Little
    } else if size_be == HEADER_SIZE as i32 {
        ByteOrder::Big
    } else {
        return Err(NiftiError::BadHeaderSize(size_le));
    };
    let c = Cursor { bytes, order };

    let magic: [u8; 4] = c.raw(344);
    if &magic != MAGIC {
        return Err(NiftiError::BadMagic(magic));
    }

    let mut dim = [0i16; 8];
    for (n, d) in dim.iter_mut().enumerate() {
        *d = c.i16(40 + 2 * n);
    }
    let ndim = dim[0];
    if !(1..=7).contains(&ndim)
        || dim[1..=ndim as usize].iter().any(|&d| d < 1)
        || dim[4..=(ndim as usize).max(3)].iter().any(|&d| d > 1)
    {
        return Err(NiftiError::UnsupportedDims(dim));
    }
    let dims = [0, 1, 2].map(|a| if a < ndim as usize { dim[a + 1] as usize } else { 1 });

    let datatype = Datatype::from_code(c.i16(70))?;

    let pixdim: [f64; 8] = std::array::from_fn(|n| widen(c.f32(76 + 4 * n)));
    let spacing = [pixdim[1], pixdim[2], pixdim[3]];
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(NiftiError::NonPositiveSpacing(spacing[0], spacing[1], spacing[2]));
    }

    let vox_offset_raw = c.f32(108);
    if !(vox_offset_raw >= HEADER_SIZE as f32) {
        return Err(NiftiError::BadVoxOffset(vox_offset_raw));
    }
    let vox_offset = vox_offset_raw as usize;

    let scl_slope = c.f32(112) as f64;
    let scl_inter = c.f32(116) as f64;

    let qform_code = c.i16(252);
    let sform_code = c.i16(254);
    let origin = if sform_code > 0 {
        let row = |base: usize| -> [f64; 4] { std::array::from_fn(|n| widen(c.f32(base + 4 * n))) };
        let srow = [row(280), row(296), row(312)];
        for (r, row) in srow.iter().enumerate() {
            for (col, &v) in row.iter().take(3).enumerate() {
                if r == col {
                    if !(v > 0.0) {
                        return Err(NiftiError::UnsupportedOrientation(format!(
                            "sform axis {r} has non-positive scale {v}"
                        )));
                    }
                } else if v != 0.0 {
                    return Err(NiftiError::UnsupportedOrientation(format!(
                        "sform has off-diagonal term {v} at ({r}, {col})"
                    )));
                }
            }
            if !close(row[r], spacing[r]) {
                return Err(NiftiError::UnsupportedOrientation(format!(
                    "sform scale {} disagrees with pixdim {} on axis {r}",
                    row[r], spacing[r]
                )));
            }
        }
        [srow[0][3], srow[1][3], srow[2][3]]
    } else if qform_code > 0 {
        let (b, cq, d) = (c.f32(256), c.f32(260), c.f32(264));
        if b != 0.0 || cq != 0.0 || d != 0.0 {
            return Err(NiftiError::UnsupportedOrientation(format!(
                "qform quaternion ({b}, {cq}, {d}) is not the identity"
            )));
        }
        if pixdim[0] < 0.0 {
            return Err(NiftiError::UnsupportedOrientation("qform qfac = -1 flips z".into()));
        }
        [widen(c.f32(268)), widen(c.f32(272)), widen(c.f32(276))]
    } else {
        [0.0; 3]
    };

    Ok(VolumeHeader {
        dims,
        datatype,
        spacing,
        origin,
        scl_slope,
        scl_inter,
        byte_order: order,
        vox_offset,
    })
}

/// Decodes a NIfTI-1 stream, raw or gzip-compressed, into a volume in
/// rescaled units (`stored * slope + intercept`).
pub fn read_volume(bytes: &[u8]) -> Result<VolumeGrid, NiftiError> {
    let bytes = maybe_gunzip(bytes)?;
    let header = parse_header(&bytes)?;
    let expected = header.payload_bytes();
    let available = bytes.len().saturating_sub(header.vox_offset);
    if available < expected {
        return Err(NiftiError::Truncated { offset: header.vox_offset, expected, actual: available });
    }
    let payload = &bytes[header.vox_offset..header.vox_offset + expected];
    let (slope, inter) = (header.effective_slope(), header.effective_intercept());
    let order = header.byte_order;
    let data: Vec<f64> = match header.datatype {
        Datatype::Int16 => payload
            .chunks_exact(2)
            .map(|b| {
                let b = [b[0], b[1]];
                let v = match order {
                    ByteOrder::Little => i16::from_le_bytes(b),
                    ByteOrder::Big => i16::from_be_bytes(b),
                };
                v as f64 * slope + inter
            })
            .collect(),
        Datatype::Float32 => payload
            .chunks_exact(4)
            .map(|b| {
                let b = [b[0], b[1], b[2], b[3]];
                let v = match order {
                    ByteOrder::Little => f32::from_le_bytes(b),
                    ByteOrder::Big => f32::from_be_bytes(b),
                };
                v as f64 * slope + inter
            })
            .collect(),
    };
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(NiftiError::NonFinite(i));
    }
    let frame = GridFrame::new(Point3::from_array(header.origin), header.spacing, header.dims)
        .map_err(|e| NiftiError::Volume(e.to_string()))?;
    VolumeGrid::new(frame, data).map_err(|e| NiftiError::Volume(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WriteOptions {
    pub datatype: Datatype,
    pub scl_slope: f64,
    pub scl_inter: f64,
    pub gzip: bool,
}

impl WriteOptions {
    pub fn new(datatype: Datatype) -> Self {
        Self { datatype, scl_slope: 1.0, scl_inter: 0.0, gzip: false }
    }

    pub fn gzip(mut self, on: bool) -> Self {
        self.gzip = on;
        self
    }

    pub fn rescale(mut self, slope: f64, inter: f64) -> Self {
        self.scl_slope = slope;
        self.scl_inter = inter;
        self
    }
}

/// Encodes `v` as an uncompressed little-endian NIfTI-1 stream.
pub fn write_volume(v: &VolumeGrid, datatype: Datatype) -> Result<Vec<u8>, NiftiError> {
    write_volume_with(v, &WriteOptions::new(datatype))
}

pub fn write_volume_with(v: &VolumeGrid, opts: &WriteOptions) -> Result<Vec<u8>, NiftiError> {
    let frame = v.frame();
    if frame.dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(NiftiError::Volume(format!("dims {:?} exceed the int16 header range", frame.dims)));
    }
    if let Some(i) = v.data().iter().position(|x| !x.is_finite()) {
        return Err(NiftiError::NonFinite(i));
    }
    let slope = if opts.scl_slope == 0.0 { 1.0 } else { opts.scl_slope };
    let inter = opts.scl_inter;

    let mut h = vec![0u8; VOX_OFFSET];
    let put = |h: &mut [u8], at: usize, b: &[u8]| h[at..at + b.len()].copy_from_slice(b);
    put(&mut h, 0, &(HEADER_SIZE as i32).to_le_bytes());
    let dim: [i16; 8] = [3, frame.dims[0] as i16, frame.dims[1] as i16, frame.dims[2] as i16, 1, 1, 1, 1];
    for (n, d) in dim.iter().enumerate() {
        put(&mut h, 40 + 2 * n, &d.to_le_bytes());
    }
    put(&mut h, 70, &opts.datatype.code().to_le_bytes());
    put(&mut h, 72, &opts.datatype.bitpix().to_le_bytes());
    let pixdim: [f32; 8] = [
        1.0,
        frame.spacing[0] as f32,
        frame.spacing[1] as f32,
        frame.spacing[2] as f32,
        0.0,
        0.0,
        0.0,
        0.0,
    ];
    for (n, p) in pixdim.iter().enumerate() {
        put(&mut h, 76 + 4 * n, &p.to_le_bytes());
    }
    put(&mut h, 108, &(VOX_OFFSET as f32).to_le_bytes());
    put(&mut h, 112, &(slope as f32).to_le_bytes());
    put(&mut h, 116, &(inter as f32).to_le_bytes());
    // xyzt_units: millimeters
    h[123] = 2;
    put(&mut h, 252, &1i16.to_le_bytes());
    put(&mut h, 254, &1i16.to_le_bytes());
    let o = frame.origin.to_array();
    for (a, &off) in o.iter().enumerate() {
        put(&mut h, 268 + 4 * a, &(off as f32).to_le_bytes());
        let base = 280 + 16 * a;
        for col in 0..3 {
            let val = if col == a { frame.spacing[a] as f32 } else { 0.0 };
            put(&mut h, base + 4 * col, &val.to_le_bytes());
        }
        put(&mut h, base + 12, &(off as f32).to_le_bytes());
    }
    put(&mut h, 344, MAGIC);

    let mut out = h;
    out.reserve(v.data().len() * opts.datatype.bytes());
    match opts.datatype {
        Datatype::Int16 => {
            for &x in v.data() {
                let stored = ((x - inter) / slope).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
                out.extend_from_slice(&stored.to_le_bytes());
            }
        }
        Datatype::Float32 => {
            for (i, &x) in v.data().iter().enumerate() {
                let stored = ((x - inter) / slope) as f32;
                if !stored.is_finite() {
                    return Err(NiftiError::NonFinite(i));
                }
                out.extend_from_slice(&stored.to_le_bytes());
            }
        }
    }

    if opts.gzip {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&out)?;
        Ok(enc.finish()?)
    } else {
        Ok(out)
    }
}
