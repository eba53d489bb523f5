//! Quantitative evaluation of correction and segmentation quality.
//!
//! Per-material non-uniformity (std, mean, coefficient of variation),
//! one-vs-rest sensitivity/specificity, mean segmentation error, per-slice
//! bone counts, and a pooled-variance two-sample t-test. The t CDF is
//! evaluated through the regularized incomplete beta function (Lentz's
//! continued fraction), so no stats dependency is pulled in.
//!
//! Non-uniformity is reported as the coefficient of variation
//! `100 * std / mean`; the raw std is kept alongside so either reading of
//! the percentage stays auditable.

use crate::volume::{LabelVolume, Mask, Volume, LABEL_BONE};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dims mismatch between inputs")]
    DimsMismatch,
    #[error("each sample needs at least 2 values, got {0} and {1}")]
    TooFewSamples(usize, usize),
}

pub const MATERIAL_NAMES: [&str; 3] = ["air", "tissue", "bone"];

/// Population statistics of one material's intensities.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MaterialStats {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    /// 100 * std / mean; NaN when the mean is 0.
    pub cov_percent: f64,
}

/// Per-material population mean/std/CoV of `v` over each label class.
/// Empty classes report `None`.
pub fn material_uniformity(v: &Volume, labels: &LabelVolume) -> [Option<MaterialStats>; 3] {
    assert_eq!(v.dims(), labels.dims(), "volume/label dims must match");
    let mut count = [0usize; 3];
    let mut sum = [0f64; 3];
    for (idx, &l) in labels.labels().iter().enumerate() {
        count[l as usize] += 1;
        sum[l as usize] += v.data()[idx] as f64;
    }
    let mut sq = [0f64; 3];
    let mean: Vec<f64> = (0..3)
        .map(|m| if count[m] > 0 { sum[m] / count[m] as f64 } else { 0.0 })
        .collect();
    for (idx, &l) in labels.labels().iter().enumerate() {
        let d = v.data()[idx] as f64 - mean[l as usize];
        sq[l as usize] += d * d;
    }
    std::array::from_fn(|m| {
        if count[m] == 0 {
            return None;
        }
        let std = (sq[m] / count[m] as f64).sqrt();
        Some(MaterialStats {
            count: count[m],
            mean: mean[m],
            std,
            cov_percent: if mean[m] != 0.0 { 100.0 * std / mean[m] } else { f64::NAN },
        })
    })
}

/// One-vs-rest confusion summary over the masked voxels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    /// Per-material true-positive rate; `None` when the material is absent
    /// from the truth.
    pub sensitivity: [Option<f64>; 3],
    /// Per-material true-negative rate.
    pub specificity: [Option<f64>; 3],
    /// 100 * misclassified / masked voxels.
    pub mean_error_percent: f64,
}

/// Sensitivity/specificity per material and the mean segmentation error,
/// computed over masked voxels only (air inside the mask counts; background
/// does not).
pub fn confusion_metrics(
    pred: &LabelVolume,
    truth: &LabelVolume,
    mask: &Mask,
) -> Result<ConfusionMetrics, EvalError> {
    if pred.dims() != truth.dims() || pred.dims() != mask.dims() {
        return Err(EvalError::DimsMismatch);
    }
    let mut tp = [0u64; 3];
    let mut fn_ = [0u64; 3];
    let mut fp = [0u64; 3];
    let mut tn = [0u64; 3];
    let mut masked = 0u64;
    let mut wrong = 0u64;
    for idx in mask.indices() {
        let p = pred.get(idx) as usize;
        let t = truth.get(idx) as usize;
        masked += 1;
        if p != t {
            wrong += 1;
        }
        for m in 0..3 {
            match (t == m, p == m) {
                (true, true) => tp[m] += 1,
                (true, false) => fn_[m] += 1,
                (false, true) => fp[m] += 1,
                (false, false) => tn[m] += 1,
            }
        }
    }
    let ratio = |num: u64, den: u64| -> Option<f64> {
        if den == 0 {
            None
        } else {
            Some(num as f64 / den as f64)
        }
    };
    Ok(ConfusionMetrics {
        sensitivity: std::array::from_fn(|m| ratio(tp[m], tp[m] + fn_[m])),
        specificity: std::array::from_fn(|m| ratio(tn[m], tn[m] + fp[m])),
        mean_error_percent: if masked > 0 {
            100.0 * wrong as f64 / masked as f64
        } else {
            0.0
        },
    })
}

/// Count of bone voxels per z-slice, index 0 = lowest slice.
pub fn bone_per_slice(labels: &LabelVolume) -> Vec<u64> {
    let d = labels.dims();
    let slice_len = d.nx * d.ny;
    (0..d.nz)
        .map(|k| {
            labels.labels()[k * slice_len..(k + 1) * slice_len]
                .iter()
                .filter(|&&l| l == LABEL_BONE)
                .count() as u64
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub dof: f64,
    /// Two-sided p-value.
    pub p: f64,
    pub significant_at_5pct: bool,
    /// Set when the pooled variance is zero with unequal means.
    pub degenerate: bool,
}

/// Pooled-variance two-sample t-test (two-sided).
pub fn two_sample_ttest(a: &[f64], b: &[f64]) -> Result<TTestResult, EvalError> {
    let (na, nb) = (a.len(), b.len());
    if na < 2 || nb < 2 {
        return Err(EvalError::TooFewSamples(na, nb));
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let (ma, mb) = (mean(a), mean(b));
    let ss = |xs: &[f64], m: f64| xs.iter().map(|&x| (x - m) * (x - m)).sum::<f64>();
    let dof = (na + nb - 2) as f64;
    let pooled = (ss(a, ma) + ss(b, mb)) / dof;

    if pooled == 0.0 {
        if ma == mb {
            return Ok(TTestResult {
                t: 0.0,
                dof,
                p: 1.0,
                significant_at_5pct: false,
                degenerate: false,
            });
        }
        return Ok(TTestResult {
            t: if ma > mb { f64::INFINITY } else { f64::NEG_INFINITY },
            dof,
            p: 0.0,
            significant_at_5pct: true,
            degenerate: true,
        });
    }

    let se = (pooled * (1.0 / na as f64 + 1.0 / nb as f64)).sqrt();
    let t = (ma - mb) / se;
    let p = student_t_two_sided_p(t, dof);
    Ok(TTestResult {
        t,
        dof,
        p,
        significant_at_5pct: p < 0.05,
        degenerate: false,
    })
}

/// Two-sided p-value of the t statistic: I_x(nu/2, 1/2) at x = nu/(nu+t^2).
pub fn student_t_two_sided_p(t: f64, dof: f64) -> f64 {
    let x = dof / (dof + t * t);
    inc_beta(x, 0.5 * dof, 0.5)
}

/// ln Gamma via the Lanczos approximation (positive arguments).
fn ln_gamma(z: f64) -> f64 {
    const C: [f64; 6] = [
        76.18009172947146,
        -86.50532032941677,
        24.01409824083091,
        -1.231739572450155,
        0.1208650973866179e-2,
        -0.5395239384953e-5,
    ];
    debug_assert!(z > 0.0);
    let mut sum = 1.000000000190015;
    for (i, &c) in C.iter().enumerate() {
        sum += c / (z + i as f64 + 1.0);
    }
    let tmp = z + 5.5;
    (z + 0.5) * tmp.ln() - tmp + (2.5066282746310005 * sum / z).ln()
}

/// Regularized incomplete beta I_x(a, b) by Lentz's continued fraction.
fn inc_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    // Use the symmetry relation where the fraction converges fastest.
    if x > (a + 1.0) / (a + b + 2.0) {
        return 1.0 - inc_beta(1.0 - x, b, a);
    }
    let ln_front = a * x.ln() + b * (1.0 - x).ln() - (ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b));
    let front = ln_front.exp();

    let tiny = 1e-300;
    let eps = 1e-15;
    let mut c = 1.0f64;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < tiny {
        d = tiny;
    }
    d = 1.0 / d;
    let mut f = d;
    for m in 1..300 {
        let mf = m as f64;
        // Even step.
        let num = mf * (b - mf) * x / ((a + 2.0 * mf - 1.0) * (a + 2.0 * mf));
        d = 1.0 + num * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + num / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        f *= d * c;
        // Odd step.
        let num = -(a + mf) * (a + b + mf) * x / ((a + 2.0 * mf) * (a + 2.0 * mf + 1.0));
        d = 1.0 + num * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + num / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = d * c;
        f *= delta;
        if (delta - 1.0).abs() < eps {
            break;
        }
    }
    front * f / a
}

/// Full evaluation record for one run; serializes to JSON and one CSV row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Indexed air, tissue, bone.
    pub materials: Vec<MaterialReport>,
    pub mean_error_percent: f64,
    pub bone_count_per_slice: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ttest: Option<TTestResult>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaterialReport {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cov_percent: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sensitivity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub specificity: Option<f64>,
}

impl EvalReport {
    pub fn new(
        confusion: &ConfusionMetrics,
        uniformity: Option<&[Option<MaterialStats>; 3]>,
        bone_counts: Vec<u64>,
    ) -> Self {
        let materials = (0..3)
            .map(|m| {
                let stats = uniformity.and_then(|u| u[m]);
                MaterialReport {
                    name: MATERIAL_NAMES[m].to_string(),
                    mean: stats.map(|s| s.mean),
                    std: stats.map(|s| s.std),
                    cov_percent: stats.map(|s| s.cov_percent),
                    sensitivity: confusion.sensitivity[m],
                    specificity: confusion.specificity[m],
                }
            })
            .collect();
        EvalReport {
            materials,
            mean_error_percent: confusion.mean_error_percent,
            bone_count_per_slice: bone_counts,
            ttest: None,
        }
    }

    pub fn csv_header() -> String {
        let mut cols = vec!["mean_error_percent".to_string()];
        for what in ["sensitivity", "specificity", "mean", "std", "cov_percent"] {
            for name in MATERIAL_NAMES {
                cols.push(format!("{what}_{name}"));
            }
        }
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut cols = vec![format!("{}", self.mean_error_percent)];
        for sel in [
            |m: &MaterialReport| m.sensitivity,
            |m: &MaterialReport| m.specificity,
            |m: &MaterialReport| m.mean,
            |m: &MaterialReport| m.std,
            |m: &MaterialReport| m.cov_percent,
        ] {
            for m in &self.materials {
                cols.push(fmt(sel(m)));
            }
        }
        cols.join(",")
    }
}
