//! Synthetic head-like phantoms with ground-truth labels and injected smooth
//! bias fields.
//!
//! The phantom is an ellipsoidal head: an outer shell of bone around a tissue
//! interior, optionally with an internal air cavity. Voxels get
//! piecewise-constant material intensities plus Gaussian noise. The injected
//! bias kinds are a radial cupping field (darker toward the center), a
//! quadratic/linear polynomial in normalized coordinates, and a sum of
//! Gaussian blobs. Together with the solver this forms the closed loop the
//! acceptance tests run: generate truth, corrupt it with a known field,
//! recover, compare.

use crate::volume::{Dims, LabelVolume, Mask, Volume, LABEL_AIR, LABEL_BONE, LABEL_TISSUE};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("geometry overflow: {0}")]
    GeometryOverflow(String),
    #[error("dims mismatch between truth and bias volumes")]
    DimsMismatch,
}

/// Material intensities in [0, 1], strictly ordered air < tissue < bone.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MaterialIntensities {
    pub air: f64,
    pub tissue: f64,
    pub bone: f64,
}

/// Optional internal air cavity: an ellipsoid offset from the head center.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CavitySpec {
    /// Offset of the cavity center from the head center, in voxels.
    pub center_offset: [f64; 3],
    /// Cavity semi-axes in voxels.
    pub semi_axes: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    #[serde(default = "default_spacing")]
    pub spacing: [f64; 3],
    /// Head ellipsoid semi-axes in voxels.
    pub semi_axes: [f64; 3],
    /// Skull shell thickness in voxels (>= 1).
    pub shell_thickness: f64,
    pub intensities: MaterialIntensities,
    #[serde(default)]
    pub cavity: Option<CavitySpec>,
    /// Additive Gaussian noise sigma applied to masked voxels.
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

fn default_spacing() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}

fn default_noise_sigma() -> f64 {
    0.005
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [64, 64, 32],
            spacing: default_spacing(),
            semi_axes: [26.0, 26.0, 14.0],
            shell_thickness: 2.0,
            intensities: MaterialIntensities {
                air: 0.15,
                tissue: 0.45,
                bone: 0.78,
            },
            cavity: Some(CavitySpec {
                center_offset: [0.0, 6.0, 0.0],
                semi_axes: [5.0, 5.0, 3.0],
            }),
            noise_sigma: default_noise_sigma(),
            rng_seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let m = &self.intensities;
        if !(m.air < m.tissue && m.tissue < m.bone) {
            return Err(PhantomError::InvalidSpec(format!(
                "intensities must be strictly ordered air < tissue < bone, got {:?}",
                (m.air, m.tissue, m.bone)
            )));
        }
        for &v in &[m.air, m.tissue, m.bone] {
            if !(0.0..=1.0).contains(&v) {
                return Err(PhantomError::InvalidSpec(format!(
                    "intensity {v} outside [0, 1]"
                )));
            }
        }
        if self.shell_thickness < 1.0 {
            return Err(PhantomError::InvalidSpec(
                "shell thickness must be >= 1 voxel".into(),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(PhantomError::InvalidSpec("noise sigma must be >= 0".into()));
        }
        let dims = self.dims;
        for a in 0..3 {
            if dims[a] == 0 {
                return Err(PhantomError::InvalidSpec("dims must be positive".into()));
            }
            if self.semi_axes[a] <= 0.0 {
                return Err(PhantomError::InvalidSpec("semi-axes must be positive".into()));
            }
            // Single-voxel axes (2-D phantoms) always fit: the ellipsoid
            // membership term vanishes at the only coordinate.
            let center = (dims[a] as f64 - 1.0) / 2.0;
            if dims[a] > 1 && self.semi_axes[a] > center {
                return Err(PhantomError::GeometryOverflow(format!(
                    "semi-axis {} exceeds half extent {} on axis {}",
                    self.semi_axes[a], center, a
                )));
            }
        }
        // Single-voxel axes keep their semi-axis; the shell only erodes axes
        // that actually extend.
        for a in 0..3 {
            if dims[a] > 1 && self.semi_axes[a] - self.shell_thickness <= 0.0 {
                return Err(PhantomError::GeometryOverflow(
                    "shell thickness consumes the whole head".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Bias field families. `amplitude` is the max absolute value of the raw
/// field on the mask, as a fraction of the [0, 1] intensity range; the
/// optional mean removal happens afterwards.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BiasKind {
    /// `-amplitude * (1 - (r/r_max)^2)` with `r` the Euclidean voxel distance
    /// from the mask centroid and `r_max` its maximum over the mask: darkest
    /// at the center, as cupping is.
    CuppingRadial,
    /// `amplitude * (sum_a lin[a]*u_a + sum_a quad[a]*u_a^2)` scaled to peak
    /// amplitude, with `u` the coordinates normalized to [-1, 1] over the
    /// mask bounding box.
    Polynomial { lin: [f64; 3], quad: [f64; 3] },
    /// Sum of Gaussian bumps, scaled to peak amplitude.
    GaussianBlobs { blobs: Vec<BlobSpec> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlobSpec {
    /// Blob center as a fraction of each dimension (0..1).
    pub center_frac: [f64; 3],
    pub sigma_vox: [f64; 3],
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasSpec {
    #[serde(flatten)]
    pub kind: BiasKind,
    pub amplitude: f64,
    #[serde(default = "default_true")]
    pub zero_mean: bool,
}

fn default_true() -> bool {
    true
}

impl Default for BiasSpec {
    fn default() -> Self {
        BiasSpec {
            kind: BiasKind::CuppingRadial,
            amplitude: 0.15,
            zero_mean: true,
        }
    }
}

impl BiasSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        if self.amplitude < 0.0 || !self.amplitude.is_finite() {
            return Err(PhantomError::InvalidSpec("amplitude must be >= 0".into()));
        }
        if let BiasKind::GaussianBlobs { blobs } = &self.kind {
            if blobs.is_empty() {
                return Err(PhantomError::InvalidSpec("need at least one blob".into()));
            }
        }
        Ok(())
    }
}

/// Generates the phantom: per-material intensities plus noise, exact labels,
/// and the head-support mask. Background voxels are 0 and noise-free.
pub fn make_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelVolume, Mask), PhantomError> {
    spec.validate()?;
    let dims = Dims::new(spec.dims[0], spec.dims[1], spec.dims[2])
        .map_err(|e| PhantomError::InvalidSpec(e.to_string()))?;
    let center = [
        (dims.nx as f64 - 1.0) / 2.0,
        (dims.ny as f64 - 1.0) / 2.0,
        (dims.nz as f64 - 1.0) / 2.0,
    ];
    let outer = spec.semi_axes;
    let erode = |a: usize| {
        if spec.dims[a] > 1 {
            outer[a] - spec.shell_thickness
        } else {
            outer[a]
        }
    };
    let inner = [erode(0), erode(1), erode(2)];

    let inside = |p: [f64; 3], c: [f64; 3], ax: [f64; 3]| -> bool {
        let mut q = 0.0;
        for a in 0..3 {
            let u = (p[a] - c[a]) / ax[a];
            q += u * u;
        }
        q <= 1.0
    };

    let mut labels = vec![LABEL_AIR; dims.len()];
    let mut bits = vec![false; dims.len()];
    let mut values = vec![0f32; dims.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let noise = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");

    for k in 0..dims.nz {
        for j in 0..dims.ny {
            for i in 0..dims.nx {
                let idx = dims.flatten(i, j, k);
                let p = [i as f64, j as f64, k as f64];
                if !inside(p, center, outer) {
                    continue;
                }
                bits[idx] = true;
                let label = if !inside(p, center, inner) {
                    LABEL_BONE
                } else if spec.cavity.as_ref().is_some_and(|cav| {
                    let c = [
                        center[0] + cav.center_offset[0],
                        center[1] + cav.center_offset[1],
                        center[2] + cav.center_offset[2],
                    ];
                    inside(p, c, cav.semi_axes)
                }) {
                    LABEL_AIR
                } else {
                    LABEL_TISSUE
                };
                labels[idx] = label;
                let base = match label {
                    LABEL_BONE => spec.intensities.bone,
                    LABEL_TISSUE => spec.intensities.tissue,
                    _ => spec.intensities.air,
                };
                let n = if spec.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                values[idx] = (base + n) as f32;
            }
        }
    }

    let truth = Volume::new(dims, spec.spacing, values).expect("values finite");
    let labels = LabelVolume::new(dims, labels).expect("labels in range");
    let mask = Mask::new(dims, bits).expect("mask matches dims");
    Ok((truth, labels, mask))
}

/// Generates a smooth bias field supported on the mask. With the zero-mean
/// flag the masked mean is removed, so the field perturbs texture without
/// shifting overall brightness.
pub fn make_bias(spec: &BiasSpec, dims: Dims, mask: &Mask) -> Result<Volume, PhantomError> {
    spec.validate()?;
    if mask.dims() != dims {
        return Err(PhantomError::DimsMismatch);
    }
    let count = mask.count();
    if count == 0 {
        return Err(PhantomError::InvalidSpec("mask has no foreground".into()));
    }

    let mut field = vec![0f64; dims.len()];
    match &spec.kind {
        BiasKind::CuppingRadial => {
            let mut centroid = [0f64; 3];
            for idx in mask.indices() {
                let (i, j, k) = dims.unflatten(idx);
                centroid[0] += i as f64;
                centroid[1] += j as f64;
                centroid[2] += k as f64;
            }
            for c in centroid.iter_mut() {
                *c /= count as f64;
            }
            let mut r_max = 0f64;
            for idx in mask.indices() {
                let (i, j, k) = dims.unflatten(idx);
                let d = [(i as f64) - centroid[0], (j as f64) - centroid[1], (k as f64) - centroid[2]];
                r_max = r_max.max((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt());
            }
            if r_max == 0.0 {
                r_max = 1.0;
            }
            for idx in mask.indices() {
                let (i, j, k) = dims.unflatten(idx);
                let d = [(i as f64) - centroid[0], (j as f64) - centroid[1], (k as f64) - centroid[2]];
                let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                let u = r / r_max;
                field[idx] = -spec.amplitude * (1.0 - u * u);
            }
        }
        BiasKind::Polynomial { lin, quad } => {
            let (lo, hi) = mask_bbox(dims, mask);
            let raw = |idx: usize| -> f64 {
                let (i, j, k) = dims.unflatten(idx);
                let p = [i as f64, j as f64, k as f64];
                let mut s = 0.0;
                for a in 0..3 {
                    let half = 0.5 * (hi[a] - lo[a]);
                    let u = if half > 0.0 {
                        (p[a] - 0.5 * (hi[a] + lo[a])) / half
                    } else {
                        0.0
                    };
                    s += lin[a] * u + quad[a] * u * u;
                }
                s
            };
            scale_to_amplitude(&mut field, mask, spec.amplitude, raw);
        }
        BiasKind::GaussianBlobs { blobs } => {
            let extents = [dims.nx, dims.ny, dims.nz];
            let raw = |idx: usize| -> f64 {
                let (i, j, k) = dims.unflatten(idx);
                let p = [i as f64, j as f64, k as f64];
                blobs
                    .iter()
                    .map(|b| {
                        let mut q = 0.0;
                        for a in 0..3 {
                            let c = b.center_frac[a] * (extents[a] as f64 - 1.0);
                            let s = b.sigma_vox[a].max(1e-9);
                            let u = (p[a] - c) / s;
                            q += u * u;
                        }
                        b.weight * (-0.5 * q).exp()
                    })
                    .sum()
            };
            scale_to_amplitude(&mut field, mask, spec.amplitude, raw);
        }
    }

    if spec.zero_mean {
        let mean: f64 = mask.indices().map(|i| field[i]).sum::<f64>() / count as f64;
        for idx in mask.indices() {
            field[idx] -= mean;
        }
    }

    let data: Vec<f32> = field.iter().map(|&v| v as f32).collect();
    Ok(Volume::new(dims, [1.0, 1.0, 1.0], data).expect("field finite"))
}

fn mask_bbox(dims: Dims, mask: &Mask) -> ([f64; 3], [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for idx in mask.indices() {
        let (i, j, k) = dims.unflatten(idx);
        let p = [i as f64, j as f64, k as f64];
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (lo, hi)
}

fn scale_to_amplitude(
    field: &mut [f64],
    mask: &Mask,
    amplitude: f64,
    raw: impl Fn(usize) -> f64,
) {
    let mut peak = 0f64;
    for idx in mask.indices() {
        let v = raw(idx);
        field[idx] = v;
        peak = peak.max(v.abs());
    }
    let scale = if peak > 0.0 { amplitude / peak } else { 0.0 };
    for idx in mask.indices() {
        field[idx] *= scale;
    }
}

/// Observed volume: truth plus bias, clamped into [0, 1].
pub fn corrupt(truth: &Volume, bias: &Volume) -> Result<Volume, PhantomError> {
    if truth.dims() != bias.dims() {
        return Err(PhantomError::DimsMismatch);
    }
    let data: Vec<f32> = truth
        .data()
        .iter()
        .zip(bias.data())
        .map(|(&t, &b)| ((t as f64 + b as f64).clamp(0.0, 1.0)) as f32)
        .collect();
    Ok(Volume::new(truth.dims(), truth.spacing(), data).expect("clamped values finite"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> PhantomSpec {
        PhantomSpec {
            dims: [32, 32, 16],
            semi_axes: [13.0, 13.0, 6.0],
            shell_thickness: 2.0,
            cavity: None,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn noise_free_phantom_is_piecewise_constant() {
        let mut spec = small_spec();
        spec.noise_sigma = 0.0;
        let (truth, labels, mask) = make_phantom(&spec).unwrap();
        for material in [LABEL_AIR, LABEL_TISSUE, LABEL_BONE] {
            let vals: Vec<f32> = mask
                .indices()
                .filter(|&i| labels.get(i) == material)
                .map(|i| truth.data()[i])
                .collect();
            if vals.is_empty() {
                continue;
            }
            let first = vals[0];
            assert!(vals.iter().all(|&v| v == first), "material {material} not flat");
        }
    }

    #[test]
    fn bone_count_matches_voxelized_shell_geometry() {
        let spec = small_spec();
        let (_, labels, _) = make_phantom(&spec).unwrap();
        let got = labels.labels().iter().filter(|&&l| l == LABEL_BONE).count();

        // Independent voxel count of outer-minus-inner ellipsoid membership.
        let dims = Dims::new(spec.dims[0], spec.dims[1], spec.dims[2]).unwrap();
        let c = [
            (dims.nx as f64 - 1.0) / 2.0,
            (dims.ny as f64 - 1.0) / 2.0,
            (dims.nz as f64 - 1.0) / 2.0,
        ];
        let mut expect = 0usize;
        for k in 0..dims.nz {
            for j in 0..dims.ny {
                for i in 0..dims.nx {
                    let q = |ax: [f64; 3]| -> f64 {
                        let u0 = (i as f64 - c[0]) / ax[0];
                        let u1 = (j as f64 - c[1]) / ax[1];
                        let u2 = (k as f64 - c[2]) / ax[2];
                        u0 * u0 + u1 * u1 + u2 * u2
                    };
                    let t = spec.shell_thickness;
                    let inner = [
                        spec.semi_axes[0] - t,
                        spec.semi_axes[1] - t,
                        spec.semi_axes[2] - t,
                    ];
                    if q(spec.semi_axes) <= 1.0 && q(inner) > 1.0 {
                        expect += 1;
                    }
                }
            }
        }
        assert_eq!(got, expect);
    }

    #[test]
    fn same_seed_same_phantom() {
        let spec = small_spec();
        let (a, la, ma) = make_phantom(&spec).unwrap();
        let (b, lb, mb) = make_phantom(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(ma, mb);
    }

    #[test]
    fn overflowing_geometry_is_rejected() {
        let mut spec = small_spec();
        spec.semi_axes = [20.0, 13.0, 6.0];
        assert!(matches!(
            make_phantom(&spec),
            Err(PhantomError::GeometryOverflow(_))
        ));
    }

    #[test]
    fn zero_amplitude_bias_is_zero() {
        let spec = small_spec();
        let (truth, _, mask) = make_phantom(&spec).unwrap();
        let bias = make_bias(
            &BiasSpec {
                amplitude: 0.0,
                ..BiasSpec::default()
            },
            truth.dims(),
            &mask,
        )
        .unwrap();
        assert!(bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn zero_mean_flag_holds() {
        let spec = small_spec();
        let (truth, _, mask) = make_phantom(&spec).unwrap();
        for kind in [
            BiasKind::CuppingRadial,
            BiasKind::Polynomial {
                lin: [0.2, 0.0, 0.0],
                quad: [0.0, 0.3, 1.0],
            },
            BiasKind::GaussianBlobs {
                blobs: vec![BlobSpec {
                    center_frac: [0.4, 0.6, 0.5],
                    sigma_vox: [6.0, 6.0, 4.0],
                    weight: 1.0,
                }],
            },
        ] {
            let bias = make_bias(
                &BiasSpec {
                    kind,
                    amplitude: 0.15,
                    zero_mean: true,
                },
                truth.dims(),
                &mask,
            )
            .unwrap();
            let sum: f64 = mask.indices().map(|i| bias.data()[i] as f64).sum();
            assert!(sum.abs() <= 1e-9 * mask.count() as f64, "residual mean {sum}");
        }
    }

    #[test]
    fn cupping_is_darkest_at_center_and_monotone() {
        let spec = PhantomSpec {
            dims: [65, 65, 1],
            semi_axes: [28.0, 28.0, 1.0],
            shell_thickness: 2.0,
            cavity: None,
            noise_sigma: 0.0,
            ..PhantomSpec::default()
        };
        let (truth, _, mask) = make_phantom(&spec).unwrap();
        let bias = make_bias(
            &BiasSpec {
                kind: BiasKind::CuppingRadial,
                amplitude: 0.15,
                zero_mean: false,
            },
            truth.dims(),
            &mask,
        )
        .unwrap();
        let d = truth.dims();
        let row: Vec<f32> = (0..d.nx)
            .filter(|&i| mask.get(d.flatten(i, 32, 0)))
            .map(|i| bias.data()[d.flatten(i, 32, 0)])
            .collect();
        let center = row[row.len() / 2];
        let edge = *row.last().unwrap();
        assert!(center < edge, "center {center} not darker than edge {edge}");
        // Monotone along the radius from center to edge.
        let half = &row[row.len() / 2..];
        for w in half.windows(2) {
            assert!(w[0] <= w[1] + 1e-7);
        }
    }

    #[test]
    fn generated_bias_is_smooth() {
        // The cupping gradient peaks at 2*sqrt(2)*A/r_max per diagonal step,
        // so the A/10 bound needs r_max >= 29 voxels.
        let spec = PhantomSpec {
            dims: [80, 80, 36],
            semi_axes: [34.0, 34.0, 16.0],
            ..PhantomSpec::default()
        };
        let (truth, _, mask) = make_phantom(&spec).unwrap();
        let bias = make_bias(&BiasSpec::default(), truth.dims(), &mask).unwrap();
        let d = truth.dims();
        let amplitude = 0.15;
        for idx in mask.indices() {
            for r in crate::volume::neighbors_in_slice(idx, d) {
                if mask.get(r) {
                    let delta = (bias.data()[idx] - bias.data()[r]).abs() as f64;
                    assert!(delta <= amplitude / 10.0, "gradient {delta} too steep");
                }
            }
        }
    }

    #[test]
    fn corrupt_adds_and_clamps() {
        let spec = small_spec();
        let (truth, _, mask) = make_phantom(&spec).unwrap();
        let bias = make_bias(&BiasSpec::default(), truth.dims(), &mask).unwrap();
        let obs = corrupt(&truth, &bias).unwrap();
        for idx in 0..truth.dims().len() {
            let t = truth.data()[idx] as f64;
            let b = bias.data()[idx] as f64;
            let o = obs.data()[idx] as f64;
            if (0.0..=1.0).contains(&(t + b)) {
                assert!((o - (t + b)).abs() <= 1e-7);
            } else {
                assert!(o == 0.0 || o == 1.0, "clamp must engage only out of range");
            }
        }
        // Zero bias is the identity.
        let zero = Volume::filled(truth.dims(), truth.spacing(), 0.0).unwrap();
        assert_eq!(corrupt(&truth, &zero).unwrap(), truth);
    }

    #[test]
    fn invalid_intensity_ordering_is_rejected() {
        let mut spec = small_spec();
        spec.intensities = MaterialIntensities {
            air: 0.5,
            tissue: 0.4,
            bone: 0.8,
        };
        assert!(matches!(
            make_phantom(&spec),
            Err(PhantomError::InvalidSpec(_))
        ));
    }
}
