//! Preprocessing: foreground extraction, outlier clipping, normalization.
//!
//! The chain binarizes the input with a single-level Otsu threshold, keeps the
//! largest 6-connected component as the foreground mask, clamps masked
//! intensities into the central fraction of the intensity range, and affinely
//! maps the result onto [0, 1]. The affine parameters are returned so the
//! correction can be mapped back to the original units.
//!
//! "5% and 85% of the intensity spectrum" is read as fractions of the
//! [min, max] range, not percentiles.

use crate::thresholding::{otsu_thresholds, Histogram, ThresholdError};
use crate::volume::{Dims, Mask, Volume};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("binarization produced no foreground voxels")]
    EmptyForeground,
    #[error("mask/volume dims mismatch")]
    DimsMismatch,
    #[error(transparent)]
    Threshold(#[from] ThresholdError),
}

pub const CLIP_LO_FRAC: f64 = 0.05;
pub const CLIP_HI_FRAC: f64 = 0.85;

/// Output of the full preprocessing chain.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    /// Clipped, normalized volume; masked intensities in [0, 1], background 0.
    pub volume: Volume,
    pub mask: Mask,
    /// original = normalized * scale + offset
    pub scale: f64,
    pub offset: f64,
}

/// Binarizes with a global single-level Otsu threshold and keeps the largest
/// 6-connected component.
///
/// A single-valued (degenerate) histogram has no Otsu threshold; in that case
/// every nonzero voxel counts as foreground.
pub fn extract_foreground(v: &Volume) -> Result<Mask, PreprocessError> {
    let dims = v.dims();
    let data = v.data();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &x in data {
        lo = lo.min(x as f64);
        hi = hi.max(x as f64);
    }

    let foreground: Vec<bool> = if hi > lo {
        let h = Histogram::from_values_in_range(data.iter(), lo, hi);
        match otsu_thresholds(&h, 2) {
            Ok(t) => {
                let thr = lo + t[0] * (hi - lo);
                data.iter().map(|&x| (x as f64) >= thr).collect()
            }
            // Fewer than two occupied bins: fall back to the nonzero rule.
            Err(ThresholdError::DegenerateHistogram { .. }) => {
                data.iter().map(|&x| x != 0.0).collect()
            }
            Err(e) => return Err(e.into()),
        }
    } else {
        data.iter().map(|&x| x != 0.0).collect()
    };

    if !foreground.iter().any(|&b| b) {
        return Err(PreprocessError::EmptyForeground);
    }
    largest_component(&foreground, dims)
}

/// Two-pass union-find labeling under 6-connectivity; returns the mask of the
/// largest component (ties: lowest label, i.e. first in scan order).
fn largest_component(fg: &[bool], dims: Dims) -> Result<Mask, PreprocessError> {
    let mut labels = vec![0u32; fg.len()]; // 0 = background
    let mut parent: Vec<u32> = vec![0]; // parent[label]; slot 0 unused
    let mut next = 1u32;

    fn find(parent: &mut Vec<u32>, mut x: u32) -> u32 {
        while parent[x as usize] != x {
            let p = parent[x as usize];
            parent[x as usize] = parent[p as usize];
            x = parent[x as usize];
        }
        x
    }
    fn union(parent: &mut Vec<u32>, a: u32, b: u32) {
        let (ra, rb) = (find(parent, a), find(parent, b));
        if ra != rb {
            // Attach the larger root id to the smaller for determinism.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            parent[hi as usize] = lo;
        }
    }

    for k in 0..dims.nz {
        for j in 0..dims.ny {
            for i in 0..dims.nx {
                let idx = dims.flatten(i, j, k);
                if !fg[idx] {
                    continue;
                }
                // Previously scanned 6-neighbors: -x, -y, -z.
                let mut assigned = 0u32;
                let mut consider = |nidx: usize, labels: &[u32], parent: &mut Vec<u32>| {
                    let l = labels[nidx];
                    if l != 0 {
                        if assigned == 0 {
                            assigned = find(parent, l);
                        } else {
                            union(parent, assigned, l);
                        }
                    }
                };
                if i > 0 {
                    consider(dims.flatten(i - 1, j, k), &labels, &mut parent);
                }
                if j > 0 {
                    consider(dims.flatten(i, j - 1, k), &labels, &mut parent);
                }
                if k > 0 {
                    consider(dims.flatten(i, j, k - 1), &labels, &mut parent);
                }
                if assigned == 0 {
                    parent.push(next);
                    assigned = next;
                    next += 1;
                }
                labels[idx] = assigned;
            }
        }
    }

    let mut counts = vec![0usize; parent.len()];
    for l in labels.iter_mut() {
        if *l != 0 {
            *l = find(&mut parent, *l);
            counts[*l as usize] += 1;
        }
    }
    let best = (1..counts.len())
        .max_by_key(|&l| (counts[l], std::cmp::Reverse(l)))
        .ok_or(PreprocessError::EmptyForeground)?;
    let bits: Vec<bool> = labels.iter().map(|&l| l == best as u32).collect();
    Ok(Mask::new(dims, bits).expect("mask matches dims"))
}

/// Clamps masked intensities into
/// `[vmin + lo_frac*(vmax-vmin), vmin + hi_frac*(vmax-vmin)]` where vmin/vmax
/// range over the mask. Background voxels are forced to 0. A degenerate
/// spectrum (vmax == vmin) passes through unchanged.
pub fn clip_outliers(
    v: &Volume,
    mask: &Mask,
    lo_frac: f64,
    hi_frac: f64,
) -> Result<Volume, PreprocessError> {
    if v.dims() != mask.dims() {
        return Err(PreprocessError::DimsMismatch);
    }
    if mask.count() == 0 {
        return Err(PreprocessError::EmptyForeground);
    }
    let mut vmin = f64::INFINITY;
    let mut vmax = f64::NEG_INFINITY;
    for idx in mask.indices() {
        let x = v.data()[idx] as f64;
        vmin = vmin.min(x);
        vmax = vmax.max(x);
    }
    let mut data = vec![0f32; v.dims().len()];
    if vmax == vmin {
        for idx in mask.indices() {
            data[idx] = v.data()[idx];
        }
    } else {
        let lo = vmin + lo_frac * (vmax - vmin);
        let hi = vmin + hi_frac * (vmax - vmin);
        for idx in mask.indices() {
            data[idx] = (v.data()[idx] as f64).clamp(lo, hi) as f32;
        }
    }
    Ok(Volume::new(v.dims(), v.spacing(), data).expect("clip keeps values finite"))
}

/// Affine map sending the masked min to 0 and masked max to 1; background
/// stays 0. Returns `(volume, scale, offset)` with
/// `original = normalized * scale + offset`. A degenerate spectrum maps all
/// masked voxels to 0 with scale 1.
pub fn normalize_unit(v: &Volume, mask: &Mask) -> Result<(Volume, f64, f64), PreprocessError> {
    if v.dims() != mask.dims() {
        return Err(PreprocessError::DimsMismatch);
    }
    if mask.count() == 0 {
        return Err(PreprocessError::EmptyForeground);
    }
    let mut vmin = f64::INFINITY;
    let mut vmax = f64::NEG_INFINITY;
    for idx in mask.indices() {
        let x = v.data()[idx] as f64;
        vmin = vmin.min(x);
        vmax = vmax.max(x);
    }
    let mut data = vec![0f32; v.dims().len()];
    let (scale, offset) = if vmax > vmin {
        let s = vmax - vmin;
        for idx in mask.indices() {
            data[idx] = ((v.data()[idx] as f64 - vmin) / s) as f32;
        }
        (s, vmin)
    } else {
        (1.0, vmin)
    };
    let vol = Volume::new(v.dims(), v.spacing(), data).expect("normalize keeps values finite");
    Ok((vol, scale, offset))
}

/// The full chain: extract foreground, clip outliers at the 5%/85% range
/// fractions, normalize to [0, 1].
pub fn run(v: &Volume) -> Result<Preprocessed, PreprocessError> {
    let mask = extract_foreground(v)?;
    let clipped = clip_outliers(v, &mask, CLIP_LO_FRAC, CLIP_HI_FRAC)?;
    let (volume, scale, offset) = normalize_unit(&clipped, &mask)?;
    Ok(Preprocessed {
        volume,
        mask,
        scale,
        offset,
    })
}
