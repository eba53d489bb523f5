//! Separable Gaussian filtering of the estimated bias field.
//!
//! The convolution is mask-aware: the numerator convolves the field with
//! background forced to zero, the denominator convolves the mask indicator,
//! and each foreground output voxel divides by its in-mask weight sum. That
//! is exactly normalized convolution with the separable product kernel, so
//! background voxels exert no pull and the skull boundary does not drag the
//! bias toward zero.

use crate::volume::{Dims, Mask, Volume};
use rayon::prelude::*;

/// Default smoothing widths in voxels (x, y, z).
pub const DEFAULT_SIGMA_VOX: [f64; 3] = [2.0, 2.0, 1.0];

/// 1-D Gaussian taps truncated at ceil(3*sigma) per side, renormalized to unit
/// sum. Sigma 0 yields the identity kernel.
fn kernel(sigma: f64) -> Vec<f64> {
    assert!(sigma >= 0.0 && sigma.is_finite(), "sigma must be >= 0");
    if sigma == 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|t| (-(t as f64 * t as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for w in &mut k {
        *w /= sum;
    }
    k
}

/// Convolves `buf` along `axis` with `taps`, zero-padded at the bounds.
/// Lines are processed independently (in parallel); output is deterministic.
fn convolve_axis(buf: &mut [f64], dims: Dims, axis: usize, taps: &[f64]) {
    if taps.len() == 1 {
        return;
    }
    let radius = (taps.len() / 2) as i64;
    let (len, stride, n_lines) = match axis {
        0 => (dims.nx, 1usize, dims.ny * dims.nz),
        1 => (dims.ny, dims.nx, dims.nx * dims.nz),
        2 => (dims.nz, dims.nx * dims.ny, dims.nx * dims.ny),
        _ => panic!("axis out of range"),
    };
    if len == 1 {
        // Single-tap line: unit-sum kernel collapses to identity after the
        // per-voxel weight normalization, so skip the pass entirely.
        return;
    }

    // Base flat offset of each line.
    let line_base = |line: usize| -> usize {
        match axis {
            0 => {
                let j = line % dims.ny;
                let k = line / dims.ny;
                dims.flatten(0, j, k)
            }
            1 => {
                let i = line % dims.nx;
                let k = line / dims.nx;
                dims.flatten(i, 0, k)
            }
            _ => {
                let i = line % dims.nx;
                let j = line / dims.nx;
                dims.flatten(i, j, 0)
            }
        }
    };

    let results: Vec<(usize, Vec<f64>)> = (0..n_lines)
        .into_par_iter()
        .map(|line| {
            let base = line_base(line);
            let mut out = vec![0.0f64; len];
            for (pos, o) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (t, &w) in taps.iter().enumerate() {
                    let q = pos as i64 + t as i64 - radius;
                    if q >= 0 && q < len as i64 {
                        acc += w * buf[base + q as usize * stride];
                    }
                }
                *o = acc;
            }
            (base, out)
        })
        .collect();

    for (base, line) in results {
        for (pos, v) in line.into_iter().enumerate() {
            buf[base + pos * stride] = v;
        }
    }
}

/// Masked normalized Gaussian smoothing of an f64 field. Background entries
/// of `values` are never read; background outputs are 0.
pub(crate) fn smooth_masked_f64_with_order(
    values: &[f64],
    mask: &Mask,
    sigma_vox: [f64; 3],
    order: [usize; 3],
) -> Vec<f64> {
    let dims = mask.dims();
    assert_eq!(values.len(), dims.len());
    let mut num: Vec<f64> = (0..dims.len())
        .map(|i| if mask.get(i) { values[i] } else { 0.0 })
        .collect();
    let mut den: Vec<f64> = (0..dims.len())
        .map(|i| if mask.get(i) { 1.0 } else { 0.0 })
        .collect();
    for &axis in &order {
        let taps = kernel(sigma_vox[axis]);
        convolve_axis(&mut num, dims, axis, &taps);
        convolve_axis(&mut den, dims, axis, &taps);
    }
    (0..dims.len())
        .map(|i| if mask.get(i) && den[i] > 0.0 { num[i] / den[i] } else { 0.0 })
        .collect()
}

/// As [`gaussian_smooth`] but on a raw f64 buffer, for solver-internal use.
pub(crate) fn smooth_masked_f64(values: &[f64], mask: &Mask, sigma_vox: [f64; 3]) -> Vec<f64> {
    smooth_masked_f64_with_order(values, mask, sigma_vox, [0, 1, 2])
}

/// Separable 3-D Gaussian smoothing of `b` under `mask`.
///
/// Kernels are truncated at ceil(3*sigma) taps per side and renormalized to
/// unit sum; sigma 0 on an axis is the identity on that axis. Output
/// background is 0.
pub fn gaussian_smooth(b: &Volume, mask: &Mask, sigma_vox: [f64; 3]) -> Volume {
    assert_eq!(b.dims(), mask.dims(), "volume/mask dims must match");
    let values: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    let smoothed = smooth_masked_f64(&values, mask, sigma_vox);
    let data: Vec<f32> = smoothed.iter().map(|&v| v as f32).collect();
    Volume::new(b.dims(), b.spacing(), data).expect("smoothing keeps values finite")
}
