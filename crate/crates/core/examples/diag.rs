//! Scratch diagnostics for the closed-loop phantom experiment.

use biascorrect::evaluation::material_uniformity;
use biascorrect::mfcm::{FcmParams, FcmSolver};
use biascorrect::phantom::{corrupt, make_bias, make_phantom, BiasSpec, CavitySpec, PhantomSpec};
use biascorrect::thresholding;
use biascorrect::volume::{Mask, Volume};

fn masked_rmse(a: &Volume, b: &Volume, mask: &Mask) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for idx in mask.indices() {
        let d = a.data()[idx] as f64 - b.data()[idx] as f64;
        acc += d * d;
        n += 1;
    }
    (acc / n as f64).sqrt()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let variant: u32 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let spec = match variant {
        // Original criterion-4 candidate.
        0 => PhantomSpec {
            dims: [64, 64, 32],
            spacing: [1.0, 1.0, 1.0],
            semi_axes: [26.0, 26.0, 14.0],
            shell_thickness: 2.0,
            intensities: biascorrect::phantom::MaterialIntensities {
                air: 0.15,
                tissue: 0.45,
                bone: 0.78,
            },
            cavity: Some(CavitySpec {
                center_offset: [0.0, 6.0, 0.0],
                semi_axes: [5.0, 5.0, 3.0],
            }),
            noise_sigma: 0.005,
            rng_seed: 7,
        },
        // Thick shell, wide separation, no cavity.
        1 => PhantomSpec {
            dims: [64, 64, 32],
            spacing: [1.0, 1.0, 1.0],
            semi_axes: [28.0, 28.0, 15.0],
            shell_thickness: 5.0,
            intensities: biascorrect::phantom::MaterialIntensities {
                air: 0.10,
                tissue: 0.50,
                bone: 0.88,
            },
            cavity: None,
            noise_sigma: 0.003,
            rng_seed: 7,
        },
        // Thick shell with cavity.
        2 => PhantomSpec {
            dims: [64, 64, 32],
            spacing: [1.0, 1.0, 1.0],
            semi_axes: [28.0, 28.0, 15.0],
            shell_thickness: 5.0,
            intensities: biascorrect::phantom::MaterialIntensities {
                air: 0.10,
                tissue: 0.50,
                bone: 0.88,
            },
            cavity: Some(CavitySpec {
                center_offset: [0.0, 7.0, 0.0],
                semi_axes: [5.0, 5.0, 4.0],
            }),
            noise_sigma: 0.003,
            rng_seed: 7,
        },
        // Original intensities, thick shell.
        3 => PhantomSpec {
            dims: [64, 64, 32],
            spacing: [1.0, 1.0, 1.0],
            semi_axes: [28.0, 28.0, 15.0],
            shell_thickness: 5.0,
            intensities: biascorrect::phantom::MaterialIntensities {
                air: 0.15,
                tissue: 0.45,
                bone: 0.78,
            },
            cavity: None,
            noise_sigma: 0.005,
            rng_seed: 7,
        },
        _ => panic!("unknown variant"),
    };
    let (truth, labels, mask) = make_phantom(&spec).unwrap();
    let bias = make_bias(&BiasSpec::default(), truth.dims(), &mask).unwrap();
    let observed = corrupt(&truth, &bias).unwrap();

    let h = thresholding::Histogram::from_masked(&observed, &mask);
    let init = thresholding::init_centers(&observed, &mask, 3).unwrap();
    eprintln!("histogram occupied bins: {}", h.occupied());
    eprintln!("otsu init centers: {init:?}");

    // Material mix inside the mask.
    let mut counts = [0usize; 3];
    for idx in mask.indices() {
        counts[labels.get(idx) as usize] += 1;
    }
    eprintln!("material counts (air, tissue, bone): {counts:?}");

    let solver = FcmSolver::new(&observed, &mask, FcmParams::default()).unwrap();
    let mut state = solver.init_state().unwrap();
    let dims = truth.dims();
    for s in 1..=120 {
        let ev = solver.sweep(&mut state);
        // Roughness fraction of the bias estimate + RMSE if stopped now.
        let mut raw = vec![0f64; dims.len()];
        for (p, &idx) in solver.masked_indices().iter().enumerate() {
            raw[idx as usize] = state.bias[p];
        }
        let smooth = biascorrect::smoothing::gaussian_smooth(
            &Volume::new(dims, [1.0; 3], raw.iter().map(|&v| v as f32).collect()).unwrap(),
            &mask,
            [2.0, 2.0, 1.0],
        );
        let mut hf = 0.0;
        let mut sm = 0.0;
        let mut mean_s = 0.0;
        for idx in mask.indices() {
            let b = raw[idx];
            let sv = smooth.data()[idx] as f64;
            hf += (b - sv) * (b - sv);
            sm += sv * sv;
            mean_s += sv;
        }
        mean_s /= mask.count() as f64;
        let rho = hf / (hf + sm + 1e-300);
        // RMSE of corrected-if-stopped-now (subtract recentered smooth bias).
        let mut acc = 0.0;
        for idx in mask.indices() {
            let corr = observed.data()[idx] as f64 - (smooth.data()[idx] as f64 - mean_s);
            let d = corr - truth.data()[idx] as f64;
            acc += d * d;
        }
        let rmse_now = (acc / mask.count() as f64).sqrt();
        if s <= 40 || s % 10 == 0 {
            eprintln!(
                "sweep {:3} J {:.3e} dc {:.2e} rho {:.4} rmse_now {:.4} centers {:.3} {:.3} {:.3}",
                s, ev.objective, ev.delta_c, rho, rmse_now,
                state.centers[0], state.centers[1], state.centers[2]
            );
        }
        if ev.delta_c < 1e-5 {
            eprintln!("converged at sweep {s}");
            break;
        }
    }
    let out = solver.solve().unwrap();
    eprintln!("converged: {} after {} sweeps", out.converged, out.sweeps);
    eprintln!("final centers: {:?}", out.state.centers);

    let rmse_before = masked_rmse(&observed, &truth, &mask);
    let rmse_after = masked_rmse(&out.corrected, &truth, &mask);
    eprintln!("rmse before {rmse_before:.5} after {rmse_after:.5}");

    // Residual bias error per material.
    for m in 0..3usize {
        let mut acc = 0.0;
        let mut n = 0;
        for idx in mask.indices() {
            if labels.get(idx) as usize == m {
                let d = out.corrected.data()[idx] as f64 - truth.data()[idx] as f64;
                acc += d * d;
                n += 1;
            }
        }
        eprintln!(
            "material {m}: rmse {:.5} over {n} voxels",
            (acc / n as f64).sqrt()
        );
    }

    // Raw vs smoothed bias error.
    let raw_err = masked_rmse(&out.bias_raw, &bias, &mask);
    let smooth_err = masked_rmse(&out.bias_smooth, &bias, &mask);
    eprintln!("bias err raw {raw_err:.5} smooth {smooth_err:.5}");

    let cov = |v: &Volume, m: usize| material_uniformity(v, &labels)[m].unwrap().cov_percent;
    eprintln!(
        "tissue CoV {:.3}% -> {:.3}%, bone CoV {:.3}% -> {:.3}%",
        cov(&observed, 1),
        cov(&out.corrected, 1),
        cov(&observed, 2),
        cov(&out.corrected, 2)
    );
}
