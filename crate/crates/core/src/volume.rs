//! Volumetric data model and the VBF v1 on-disk format.
//!
//! A [`Volume`] is a dense 3-D scalar field stored in x-fastest order with
//! voxel spacing metadata. [`Mask`] marks the foreground voxels every solver
//! operation ranges over; [`LabelVolume`] carries per-voxel material indices
//! (0 = air, 1 = tissue, 2 = bone).
//!
//! The on-disk format ("VBF v1") is a JSON header `<name>.vbf.json` next to a
//! raw payload file:
//!
//! ```json
//! {"version":1,"dims":[nx,ny,nz],"spacing":[sx,sy,sz],"dtype":"f32le","data":"<name>.raw"}
//! ```
//!
//! The payload holds exactly `nx*ny*nz` little-endian IEEE-754 32-bit floats
//! (dtype `"f32le"`) or bytes (dtype `"u8"` for labels and masks), x-fastest.
//! Round-trips are bitwise exact.

use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Material indices used by [`LabelVolume`].
pub const LABEL_AIR: u8 = 0;
pub const LABEL_TISSUE: u8 = 1;
pub const LABEL_BONE: u8 = 2;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid header {path}: {reason}")]
    Header { path: PathBuf, reason: String },
    #[error("unsupported format version {0} (expected 1)")]
    Version(u32),
    #[error("dtype mismatch: expected {expected}, found {found}")]
    Dtype { expected: String, found: String },
    #[error("payload size mismatch: dims imply {expected} bytes, file has {actual}")]
    SizeMismatch { expected: u64, actual: u64 },
    #[error("non-finite intensity at voxel {0}")]
    NonFinite(usize),
    #[error("invalid dimensions: {0}")]
    BadDims(String),
    #[error("data length {len} does not match dims {nx}x{ny}x{nz}")]
    BadLength {
        len: usize,
        nx: usize,
        ny: usize,
        nz: usize,
    },
    #[error("label {value} out of range at voxel {index}")]
    BadLabel { index: usize, value: u8 },
    #[error("dims mismatch: {0}")]
    DimsMismatch(String),
}

/// Voxel grid dimensions. Flat indices are x-fastest:
/// `flatten(i, j, k) = i + nx*(j + ny*k)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self, VolumeError> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(VolumeError::BadDims(format!(
                "voxel counts must be positive, got {nx}x{ny}x{nz}"
            )));
        }
        Ok(Dims { nx, ny, nz })
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn flatten(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.nx && j < self.ny && k < self.nz);
        i + self.nx * (j + self.ny * k)
    }

    #[inline]
    pub fn unflatten(&self, idx: usize) -> (usize, usize, usize) {
        debug_assert!(idx < self.len());
        let i = idx % self.nx;
        let rest = idx / self.nx;
        (i, rest % self.ny, rest / self.ny)
    }

    fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }
}

/// In-slice 8-neighborhood: the up-to-8 in-bounds voxels of the 3x3 window
/// centered at `idx` within its own z-slice, excluding the center.
/// Returned in row-major order (y, then x).
pub fn neighbors_in_slice(idx: usize, dims: Dims) -> Vec<usize> {
    let (i, j, k) = dims.unflatten(idx);
    let mut out = Vec::with_capacity(8);
    for dj in -1i64..=1 {
        for di in -1i64..=1 {
            if di == 0 && dj == 0 {
                continue;
            }
            let ni = i as i64 + di;
            let nj = j as i64 + dj;
            if ni < 0 || nj < 0 || ni >= dims.nx as i64 || nj >= dims.ny as i64 {
                continue;
            }
            out.push(dims.flatten(ni as usize, nj as usize, k));
        }
    }
    out
}

/// Dense scalar volume, x-fastest flat layout, 32-bit intensities.
///
/// All intensities are finite; constructors reject NaN/Inf payloads.
/// Immutable by convention once built, so it is safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: [f64; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, spacing: [f64; 3], data: Vec<f32>) -> Result<Self, VolumeError> {
        if data.len() != dims.len() {
            return Err(VolumeError::BadLength {
                len: data.len(),
                nx: dims.nx,
                ny: dims.ny,
                nz: dims.nz,
            });
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(VolumeError::BadDims(format!(
                "spacing must be strictly positive, got {spacing:?}"
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite(bad));
        }
        Ok(Volume {
            dims,
            spacing,
            data,
        })
    }

    /// Volume filled with a single value.
    pub fn filled(dims: Dims, spacing: [f64; 3], value: f32) -> Result<Self, VolumeError> {
        Self::new(dims, spacing, vec![value; dims.len()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.dims.flatten(i, j, k)]
    }
}

/// Per-voxel foreground indicator, same layout as the volume it masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    dims: Dims,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(dims: Dims, bits: Vec<bool>) -> Result<Self, VolumeError> {
        if bits.len() != dims.len() {
            return Err(VolumeError::BadLength {
                len: bits.len(),
                nx: dims.nx,
                ny: dims.ny,
                nz: dims.nz,
            });
        }
        Ok(Mask { dims, bits })
    }

    pub fn full(dims: Dims) -> Self {
        Mask {
            dims,
            bits: vec![true; dims.len()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, idx: usize) -> bool {
        self.bits[idx]
    }

    /// Number of foreground voxels.
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Flat indices of foreground voxels in ascending order.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i)
    }
}

/// Per-voxel material index aligned to a [`Volume`]; labels are in {0, 1, 2}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    dims: Dims,
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: Dims, labels: Vec<u8>) -> Result<Self, VolumeError> {
        if labels.len() != dims.len() {
            return Err(VolumeError::BadLength {
                len: labels.len(),
                nx: dims.nx,
                ny: dims.ny,
                nz: dims.nz,
            });
        }
        if let Some((index, &value)) = labels.iter().enumerate().find(|(_, &v)| v > LABEL_BONE) {
            return Err(VolumeError::BadLabel { index, value });
        }
        Ok(LabelVolume { dims, labels })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, idx: usize) -> u8 {
        self.labels[idx]
    }
}

#[derive(Serialize, Deserialize)]
struct VbfHeader {
    version: u32,
    dims: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
    data: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VolumeError + '_ {
    move |source| VolumeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Normalizes `path` to end in `.vbf.json` and derives the raw payload path.
fn vbf_paths(path: &Path) -> (PathBuf, PathBuf, String) {
    let header = if path.to_string_lossy().ends_with(".vbf.json") {
        path.to_path_buf()
    } else {
        PathBuf::from(format!("{}.vbf.json", path.to_string_lossy()))
    };
    let name = header.file_name().unwrap_or_default().to_string_lossy();
    let stem = name.trim_end_matches(".vbf.json");
    let raw_name = format!("{stem}.raw");
    let raw = header.with_file_name(&raw_name);
    (header, raw, raw_name)
}

fn read_header(path: &Path, expect_dtype: &str) -> Result<(VbfHeader, Dims, Vec<u8>), VolumeError> {
    let (header_path, _, _) = vbf_paths(path);
    let text = fs::read_to_string(&header_path).map_err(io_err(&header_path))?;
    let header: VbfHeader = serde_json::from_str(&text).map_err(|e| VolumeError::Header {
        path: header_path.clone(),
        reason: e.to_string(),
    })?;
    if header.version != 1 {
        return Err(VolumeError::Version(header.version));
    }
    if header.dtype != expect_dtype {
        return Err(VolumeError::Dtype {
            expected: expect_dtype.to_string(),
            found: header.dtype.clone(),
        });
    }
    let dims = Dims::new(header.dims[0], header.dims[1], header.dims[2])?;
    let raw_path = header_path
        .parent()
        .map(|p| p.join(&header.data))
        .unwrap_or_else(|| PathBuf::from(&header.data));
    let payload = fs::read(&raw_path).map_err(io_err(&raw_path))?;
    let elem = if expect_dtype == "f32le" { 4 } else { 1 };
    let expected = (dims.len() * elem) as u64;
    if payload.len() as u64 != expected {
        return Err(VolumeError::SizeMismatch {
            expected,
            actual: payload.len() as u64,
        });
    }
    Ok((header, dims, payload))
}

fn write_header_and_payload(
    path: &Path,
    dims: Dims,
    spacing: [f64; 3],
    dtype: &str,
    payload: &[u8],
) -> Result<(), VolumeError> {
    let (header_path, raw_path, raw_name) = vbf_paths(path);
    let header = VbfHeader {
        version: 1,
        dims: dims.as_array(),
        spacing,
        dtype: dtype.to_string(),
        data: raw_name,
    };
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(&header_path, text).map_err(io_err(&header_path))?;
    fs::write(&raw_path, payload).map_err(io_err(&raw_path))?;
    Ok(())
}

/// Reads a VBF v1 `f32le` volume. `path` may omit the `.vbf.json` suffix.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume, VolumeError> {
    let (header, dims, payload) = read_header(path.as_ref(), "f32le")?;
    let mut data = Vec::with_capacity(dims.len());
    for (idx, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(VolumeError::NonFinite(idx));
        }
        data.push(v);
    }
    Volume::new(dims, header.spacing, data)
}

/// Writes header + raw payload; `read_volume(write_volume(v))` is bitwise exact.
pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    let mut payload = Vec::with_capacity(v.data.len() * 4);
    for &x in &v.data {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    write_header_and_payload(path.as_ref(), v.dims, v.spacing, "f32le", &payload)
}

/// Reads a VBF v1 `u8` label volume; labels must lie in {0, 1, 2}.
pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume, VolumeError> {
    let (_, dims, payload) = read_header(path.as_ref(), "u8")?;
    LabelVolume::new(dims, payload)
}

pub fn write_labels(l: &LabelVolume, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    write_header_and_payload(path.as_ref(), l.dims, [1.0, 1.0, 1.0], "u8", &l.labels)
}

/// Reads a VBF v1 `u8` mask; payload bytes must be 0 or 1.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask, VolumeError> {
    let (_, dims, payload) = read_header(path.as_ref(), "u8")?;
    if let Some((index, &value)) = payload.iter().enumerate().find(|(_, &v)| v > 1) {
        return Err(VolumeError::BadLabel { index, value });
    }
    Mask::new(dims, payload.into_iter().map(|b| b != 0).collect())
}

pub fn write_mask(m: &Mask, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    let payload: Vec<u8> = m.bits.iter().map(|&b| b as u8).collect();
    write_header_and_payload(path.as_ref(), m.dims, [1.0, 1.0, 1.0], "u8", &payload)
}
