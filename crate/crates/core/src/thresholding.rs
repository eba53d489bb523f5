//! Histogram construction and single/multilevel Otsu thresholding.
//!
//! Thresholds initialize the solver's cluster centers and hard-segment
//! volumes for the with/without-correction comparison. The multilevel search
//! is plain exhaustive over threshold tuples: for 256 bins and three classes
//! that is ~32k tuples, cheap enough that the two-stage speedup is not worth
//! its verification burden.

use crate::volume::{LabelVolume, Mask, Volume, LABEL_BONE};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ThresholdError {
    #[error("degenerate histogram: {occupied} occupied bins, need at least {needed}")]
    DegenerateHistogram { occupied: usize, needed: usize },
    #[error("class count {0} unsupported (must be 2..=4)")]
    BadClassCount(usize),
    #[error("empty histogram")]
    Empty,
    #[error("mask/volume dims mismatch")]
    DimsMismatch,
}

/// 256-bin histogram over the unit interval. The bin of a value `v` is
/// `min(floor(v * 256), 255)`, clamped below at 0 for robustness.
#[derive(Debug, Clone)]
pub struct Histogram {
    bins: [u64; Histogram::BINS],
}

impl Histogram {
    pub const BINS: usize = 256;

    pub fn from_counts(bins: [u64; Histogram::BINS]) -> Self {
        Histogram { bins }
    }

    /// Histogram of the masked voxels of a volume assumed to lie in [0, 1].
    pub fn from_masked(v: &Volume, mask: &Mask) -> Self {
        let mut bins = [0u64; Self::BINS];
        for idx in mask.indices() {
            bins[Self::bin_of(v.data()[idx])] += 1;
        }
        Histogram { bins }
    }

    /// Histogram of arbitrary values mapped affinely from [lo, hi] onto [0, 1].
    pub fn from_values_in_range<'a>(
        values: impl Iterator<Item = &'a f32>,
        lo: f64,
        hi: f64,
    ) -> Self {
        let mut bins = [0u64; Self::BINS];
        let range = hi - lo;
        for &v in values {
            let u = if range > 0.0 {
                (v as f64 - lo) / range
            } else {
                0.0
            };
            bins[Self::bin_of(u as f32)] += 1;
        }
        Histogram { bins }
    }

    #[inline]
    pub fn bin_of(v: f32) -> usize {
        let b = (v as f64 * Self::BINS as f64).floor();
        b.clamp(0.0, (Self::BINS - 1) as f64) as usize
    }

    pub fn counts(&self) -> &[u64; Self::BINS] {
        &self.bins
    }

    pub fn total(&self) -> u64 {
        self.bins.iter().sum()
    }

    pub fn occupied(&self) -> usize {
        self.bins.iter().filter(|&&c| c > 0).count()
    }
}

/// Exhaustive multilevel Otsu: returns the k-1 bin-edge thresholds (values in
/// (0,1), strictly increasing) maximizing between-class variance. Ties break
/// toward the lexicographically lowest threshold tuple.
pub fn otsu_thresholds(h: &Histogram, k: usize) -> Result<Vec<f64>, ThresholdError> {
    if !(2..=4).contains(&k) {
        return Err(ThresholdError::BadClassCount(k));
    }
    if h.total() == 0 {
        return Err(ThresholdError::Empty);
    }
    let occupied = h.occupied();
    if occupied < k {
        return Err(ThresholdError::DegenerateHistogram {
            occupied,
            needed: k,
        });
    }

    // Prefix sums of counts and count-weighted bin indices.
    let n = Histogram::BINS;
    let mut pc = vec![0f64; n + 1];
    let mut ps = vec![0f64; n + 1];
    for b in 0..n {
        pc[b + 1] = pc[b] + h.bins[b] as f64;
        ps[b + 1] = ps[b] + h.bins[b] as f64 * b as f64;
    }
    // Between-class variance is maximized by maximizing sum of s^2/w per class
    // (total mass and mean are fixed). Empty classes invalidate a tuple.
    let class_score = |lo: usize, hi_excl: usize| -> Option<f64> {
        let w = pc[hi_excl] - pc[lo];
        if w <= 0.0 {
            return None;
        }
        let s = ps[hi_excl] - ps[lo];
        Some(s * s / w)
    };

    let score_tuple = |cuts: &[usize]| -> Option<f64> {
        let mut score = 0.0;
        let mut lo = 0usize;
        for &c in cuts {
            score += class_score(lo, c + 1)?;
            lo = c + 1;
        }
        score += class_score(lo, n)?;
        Some(score)
    };

    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut consider = |cuts: &[usize]| {
        if let Some(s) = score_tuple(cuts) {
            // Strict > keeps the first (lexicographically lowest) maximizer.
            if best.as_ref().map_or(true, |(bs, _)| s > *bs) {
                best = Some((s, cuts.to_vec()));
            }
        }
    };

    match k {
        2 => {
            for c0 in 0..n - 1 {
                consider(&[c0]);
            }
        }
        3 => {
            for c0 in 0..n - 1 {
                for c1 in c0 + 1..n - 1 {
                    consider(&[c0, c1]);
                }
            }
        }
        4 => {
            for c0 in 0..n - 1 {
                for c1 in c0 + 1..n - 1 {
                    for c2 in c1 + 1..n - 1 {
                        consider(&[c0, c1, c2]);
                    }
                }
            }
        }
        _ => unreachable!(),
    }

    let (_, cuts) = best.ok_or(ThresholdError::DegenerateHistogram {
        occupied,
        needed: k,
    })?;
    Ok(cuts
        .iter()
        .map(|&c| (c + 1) as f64 / Histogram::BINS as f64)
        .collect())
}

/// Class index of a value under increasing thresholds; values exactly at a
/// threshold go to the higher class.
#[inline]
pub fn class_of(v: f64, thresholds: &[f64]) -> usize {
    thresholds.iter().filter(|&&t| v >= t).count()
}

/// Initial cluster centers: the mean masked intensity within each Otsu class,
/// falling back to the class-interval midpoint when a class is empty.
/// Results are strictly increasing and lie in [0, 1].
pub fn init_centers(v: &Volume, mask: &Mask, k: usize) -> Result<Vec<f64>, ThresholdError> {
    if v.dims() != mask.dims() {
        return Err(ThresholdError::DimsMismatch);
    }
    let h = Histogram::from_masked(v, mask);
    let thresholds = otsu_thresholds(&h, k)?;

    let mut sums = vec![0f64; k];
    let mut counts = vec![0u64; k];
    for idx in mask.indices() {
        let val = v.data()[idx] as f64;
        let c = class_of(val, &thresholds);
        sums[c] += val;
        counts[c] += 1;
    }

    let mut centers = Vec::with_capacity(k);
    for c in 0..k {
        let lo = if c == 0 { 0.0 } else { thresholds[c - 1] };
        let hi = if c == k - 1 { 1.0 } else { thresholds[c] };
        let center = if counts[c] > 0 {
            sums[c] / counts[c] as f64
        } else {
            0.5 * (lo + hi)
        };
        centers.push(center.clamp(0.0, 1.0));
    }
    // Class intervals are disjoint and increasing, so means already are;
    // midpoint fallbacks keep strictness in degenerate corners.
    debug_assert!(centers.windows(2).all(|w| w[0] < w[1]));
    Ok(centers)
}

/// Hard segmentation of the masked voxels into `k` classes by multilevel Otsu
/// thresholds. Class index becomes the label (for k = 3: air, tissue, bone);
/// background voxels are labeled air.
pub fn segment(v: &Volume, mask: &Mask, k: usize) -> Result<LabelVolume, ThresholdError> {
    if v.dims() != mask.dims() {
        return Err(ThresholdError::DimsMismatch);
    }
    if k < 2 || k > (LABEL_BONE as usize + 1) {
        return Err(ThresholdError::BadClassCount(k));
    }
    let h = Histogram::from_masked(v, mask);
    let thresholds = otsu_thresholds(&h, k)?;
    let mut labels = vec![0u8; v.dims().len()];
    for idx in mask.indices() {
        labels[idx] = class_of(v.data()[idx] as f64, &thresholds) as u8;
    }
    Ok(LabelVolume::new(v.dims(), labels).expect("labels in range"))
}
