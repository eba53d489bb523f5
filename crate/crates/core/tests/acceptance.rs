//! Acceptance suite: one test per criterion, each printing a pass line with
//! the measured values (visible with `cargo test -- --nocapture`).
//!
//! The closed loop behind the phantom criteria is: generate a ground-truth
//! phantom, inject a known smooth bias field, corrupt, hand the solver the
//! observed volume and the phantom mask, and compare the correction against
//! the known truth.

use biascorrect::evaluation::{confusion_metrics, material_uniformity, two_sample_ttest};
use biascorrect::mfcm::{FcmParams, FcmSolver};
use biascorrect::phantom::{corrupt, make_bias, make_phantom, BiasSpec, CavitySpec, PhantomSpec};
use biascorrect::thresholding::segment;
use biascorrect::volume::{Dims, Mask, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

const LABEL_TISSUE: usize = 1;
const LABEL_BONE: usize = 2;

fn ellipsoid_mask(dims: Dims, semi: [f64; 3]) -> Mask {
    let c = [
        (dims.nx as f64 - 1.0) / 2.0,
        (dims.ny as f64 - 1.0) / 2.0,
        (dims.nz as f64 - 1.0) / 2.0,
    ];
    let mut bits = vec![false; dims.len()];
    for k in 0..dims.nz {
        for j in 0..dims.ny {
            for i in 0..dims.nx {
                let u0 = (i as f64 - c[0]) / semi[0];
                let u1 = (j as f64 - c[1]) / semi[1];
                let u2 = (k as f64 - c[2]) / semi[2];
                if u0 * u0 + u1 * u1 + u2 * u2 <= 1.0 {
                    bits[dims.flatten(i, j, k)] = true;
                }
            }
        }
    }
    Mask::new(dims, bits).unwrap()
}

fn random_volume(dims: Dims, seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..dims.len()).map(|_| rng.random_range(0.0f32..1.0)).collect();
    Volume::new(dims, [1.0; 3], data).unwrap()
}

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

/// The standard closed-loop phantom for criteria 4 and 8.
fn head_phantom_spec() -> PhantomSpec {
    PhantomSpec {
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
    }
}

/// Criterion 1: membership normalization and zero-mean bias hold after every
/// sweep on 20 seeded random instances.
/// Criterion 2: the objective is non-increasing across sweeps (rel 1e-9).
#[test]
fn criterion_1_and_2_constraints_and_monotone_descent() {
    let start = Instant::now();
    let shapes = [
        (16usize, 16usize, 4usize),
        (32, 24, 6),
        (48, 32, 8),
        (64, 64, 8),
        (24, 16, 5),
    ];
    let mut checked_sweeps = 0usize;
    for inst in 0..20u64 {
        let (nx, ny, nz) = shapes[inst as usize % shapes.len()];
        let dims = Dims::new(nx, ny, nz).unwrap();
        let y = random_volume(dims, 1000 + inst);
        let mask = if inst % 2 == 0 {
            ellipsoid_mask(
                dims,
                [
                    nx as f64 * 0.45,
                    ny as f64 * 0.45,
                    (nz as f64 * 0.45).max(0.6),
                ],
            )
        } else {
            Mask::full(dims)
        };
        let params = FcmParams {
            clusters: 2 + (inst as usize % 2),
            alpha: (inst % 2) as f64,
            rng_seed: inst,
            ..FcmParams::default()
        };
        let solver = FcmSolver::new(&y, &mask, params).unwrap();
        let n = solver.masked_count();
        let mut state = solver.init_state().unwrap();
        let mut prev_j = f64::INFINITY;
        for _ in 0..12 {
            solver.update_memberships(&mut state);
            let clusters = state.centers.len();
            for v in 0..n {
                let s: f64 = state.mu[v * clusters..(v + 1) * clusters].iter().sum();
                assert!(
                    (s - 1.0).abs() <= 1e-12,
                    "instance {inst}: membership row sum off by {}",
                    (s - 1.0).abs()
                );
            }
            solver.update_centers(&mut state);
            solver.update_bias(&mut state);
            let bias_sum: f64 = state.bias.iter().sum();
            assert!(
                bias_sum.abs() <= 1e-9 * n as f64,
                "instance {inst}: bias sum {bias_sum}"
            );
            let j = solver.objective(&state);
            assert!(
                j <= prev_j + 1e-9 * prev_j.abs().min(f64::MAX),
                "instance {inst}: objective rose {prev_j} -> {j}"
            );
            prev_j = j;
            checked_sweeps += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 30.0, "constraint suite took {elapsed:.1}s");
    println!(
        "[PASS] criteria 1+2: constraints and monotone descent over {checked_sweeps} sweeps \
         on 20 instances in {elapsed:.2}s"
    );
}

/// Textbook fuzzy C-means sweep (m = 2), written independently of the solver.
fn textbook_fcm_sweep(data: &[f64], centers: &mut Vec<f64>) {
    let k = centers.len();
    let mut num = vec![0.0; k];
    let mut den = vec![0.0; k];
    for &x in data {
        let d: Vec<f64> = centers.iter().map(|&c| (x - c) * (x - c)).collect();
        let mut mu = vec![0.0; k];
        if let Some(zero) = d.iter().position(|&v| v == 0.0) {
            mu[zero] = 1.0;
        } else {
            let inv_sum: f64 = d.iter().map(|&v| 1.0 / v).sum();
            for i in 0..k {
                mu[i] = (1.0 / d[i]) / inv_sum;
            }
        }
        for i in 0..k {
            let w = mu[i] * mu[i];
            num[i] += w * x;
            den[i] += w;
        }
    }
    for i in 0..k {
        if den[i] > 0.0 {
            centers[i] = num[i] / den[i];
        }
    }
}

/// Dense KKT solve of the zero-mean-constrained quadratic in the bias, with
/// its own neighborhood enumeration (reverse sets scanned explicitly).
fn kkt_bias_oracle(
    dims: Dims,
    y: &[f64],
    mu: &[f64],
    centers: &[f64],
    alpha: f64,
) -> (Vec<f64>, f64) {
    let n = dims.len();
    let k = centers.len();
    let in_window = |a: usize, b: usize| -> bool {
        // b in M_a: same slice, Chebyshev distance 1 in (x, y).
        if a == b {
            return false;
        }
        let (ax, ay, az) = dims.unflatten(a);
        let (bx, by, bz) = dims.unflatten(b);
        az == bz && ax.abs_diff(bx) <= 1 && ay.abs_diff(by) <= 1
    };

    // beta[n][i] = mu_in^2 + alpha/8 sum over r with n in M_r of mu_ir^2.
    let mut q = vec![0.0; n];
    let mut p = vec![0.0; n];
    for a in 0..n {
        for i in 0..k {
            let mut beta = mu[a * k + i] * mu[a * k + i];
            for r in 0..n {
                if in_window(r, a) {
                    beta += alpha / 8.0 * mu[r * k + i] * mu[r * k + i];
                }
            }
            q[a] += beta;
            p[a] += q_term(y[a], centers[i], beta);
        }
    }
    fn q_term(y: f64, c: f64, beta: f64) -> f64 {
        beta * (y - c)
    }

    // [diag(2q), 1; 1^T, 0] [b; lambda] = [2p; 0], Gaussian elimination.
    let dim = n + 1;
    let mut a_mat = vec![vec![0.0f64; dim + 1]; dim];
    for r in 0..n {
        a_mat[r][r] = 2.0 * q[r];
        a_mat[r][n] = 1.0;
        a_mat[r][dim] = 2.0 * p[r];
    }
    for c in 0..n {
        a_mat[n][c] = 1.0;
    }
    for col in 0..dim {
        let pivot = (col..dim)
            .max_by(|&r1, &r2| a_mat[r1][col].abs().total_cmp(&a_mat[r2][col].abs()))
            .unwrap();
        a_mat.swap(col, pivot);
        let pv = a_mat[col][col];
        assert!(pv.abs() > 1e-14, "singular KKT system");
        for r in 0..dim {
            if r != col {
                let f = a_mat[r][col] / pv;
                for c in col..=dim {
                    a_mat[r][c] -= f * a_mat[col][c];
                }
            }
        }
    }
    let b: Vec<f64> = (0..n).map(|r| a_mat[r][dim] / a_mat[r][r]).collect();
    let lambda = a_mat[n][dim] / a_mat[n][n];
    (b, lambda)
}

/// Criterion 3: plain-FCM reduction and the constrained-bias KKT oracle.
#[test]
fn criterion_3_oracle_equivalence() {
    // Part 1: alpha = 0, bias frozen at 0 matches a textbook FCM to 1e-10
    // over 25 sweeps on seeded 1-D data.
    let n = 400usize;
    let dims = Dims::new(n, 1, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let data: Vec<f32> = (0..n)
        .map(|_| {
            if rng.random_bool(0.5) {
                rng.random_range(0.1f32..0.4)
            } else {
                rng.random_range(0.6f32..0.9)
            }
        })
        .collect();
    let y = Volume::new(dims, [1.0; 3], data.clone()).unwrap();
    let mask = Mask::full(dims);
    let params = FcmParams {
        clusters: 2,
        alpha: 0.0,
        ..FcmParams::default()
    };
    let solver = FcmSolver::new(&y, &mask, params).unwrap();
    let init = vec![0.25f64, 0.75];
    let mut state = solver.state_from(init.clone(), vec![0.0; n]);
    let mut reference = init;
    let data_f64: Vec<f64> = data.iter().map(|&x| x as f64).collect();
    let mut max_dev = 0f64;
    for _ in 0..25 {
        solver.update_memberships(&mut state);
        solver.update_centers(&mut state);
        textbook_fcm_sweep(&data_f64, &mut reference);
        for (a, b) in state.centers.iter().zip(&reference) {
            max_dev = max_dev.max((a - b).abs());
        }
        assert!(max_dev <= 1e-10, "centers deviate by {max_dev}");
    }

    // Part 2: the bias update on a 3x3x1 instance with alpha = 1 matches the
    // equality-constrained least-squares solution to 1e-8.
    let dims = Dims::new(3, 3, 1).unwrap();
    let y9 = random_volume(dims, 77);
    let mask9 = Mask::full(dims);
    let params9 = FcmParams {
        clusters: 3,
        alpha: 1.0,
        ..FcmParams::default()
    };
    let solver9 = FcmSolver::new(&y9, &mask9, params9).unwrap();
    let centers = vec![0.2, 0.5, 0.8];
    let mut st = solver9.state_from(centers.clone(), vec![0.0; 9]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for v in 0..9 {
        let mut row: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = row.iter().sum();
        for r in row.iter_mut() {
            *r /= s;
        }
        st.mu[v * 3..(v + 1) * 3].copy_from_slice(&row);
    }
    solver9.update_bias(&mut st);
    let yv: Vec<f64> = y9.data().iter().map(|&x| x as f64).collect();
    let (b_star, lambda_star) = kkt_bias_oracle(dims, &yv, &st.mu, &centers, 1.0);
    let mut max_b_dev = 0f64;
    for (have, want) in st.bias.iter().zip(&b_star) {
        max_b_dev = max_b_dev.max((have - want).abs());
    }
    assert!(max_b_dev <= 1e-8, "bias deviates from KKT by {max_b_dev}");
    assert!(
        (st.lambda - lambda_star).abs() <= 1e-8,
        "lambda {} vs KKT {}",
        st.lambda,
        lambda_star
    );
    println!(
        "[PASS] criterion 3: FCM reduction dev {max_dev:.2e}, KKT bias dev {max_b_dev:.2e}"
    );
}

/// Criterion 4: closed-loop correction on the 64x64x32 phantom with cupping
/// amplitude 0.15 under default parameters.
#[test]
fn criterion_4_closed_loop_correction() {
    let start = Instant::now();
    let spec = head_phantom_spec();
    let (truth, labels, mask) = make_phantom(&spec).unwrap();
    let bias = make_bias(&BiasSpec::default(), truth.dims(), &mask).unwrap();
    let observed = corrupt(&truth, &bias).unwrap();

    let solver = FcmSolver::new(&observed, &mask, FcmParams::default()).unwrap();
    let out = solver.solve().unwrap();
    assert!(out.converged, "solver did not converge within the sweep cap");

    let rmse_before = masked_rmse(&observed, &truth, &mask);
    let rmse_after = masked_rmse(&out.corrected, &truth, &mask);
    assert!(
        rmse_after <= 0.5 * rmse_before,
        "rmse {rmse_after:.5} not half of {rmse_before:.5}"
    );

    let cov = |v: &Volume, m: usize| material_uniformity(v, &labels)[m].unwrap().cov_percent;
    let tissue_before = cov(&observed, LABEL_TISSUE);
    let tissue_after = cov(&out.corrected, LABEL_TISSUE);
    let bone_before = cov(&observed, LABEL_BONE);
    let bone_after = cov(&out.corrected, LABEL_BONE);
    assert!(
        tissue_after <= 0.5 * tissue_before,
        "tissue CoV {tissue_before:.2}% -> {tissue_after:.2}% (need -50%)"
    );
    assert!(
        bone_after <= 0.3 * bone_before,
        "bone CoV {bone_before:.2}% -> {bone_after:.2}% (need -70%)"
    );

    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed <= 60.0, "closed loop took {elapsed:.1}s");
    println!(
        "[PASS] criterion 4: rmse {rmse_before:.4} -> {rmse_after:.4}, tissue CoV \
         {tissue_before:.2}% -> {tissue_after:.2}%, bone CoV {bone_before:.2}% -> \
         {bone_after:.2}% in {:.1}s ({} sweeps)",
        elapsed, out.sweeps
    );
}

/// Criterion 5: over 20 seeded phantoms, bone sensitivity improves after
/// correction in at least 18 and the pooled t-test on mean segmentation error
/// is significant at 5%.
#[test]
fn criterion_5_segmentation_gain() {
    let mut improved = 0usize;
    let mut err_wbc = Vec::new();
    let mut err_bc = Vec::new();
    for i in 0..20u64 {
        let spec = PhantomSpec {
            dims: [48, 48, 24],
            spacing: [1.0, 1.0, 1.0],
            semi_axes: [17.0 + (i % 3) as f64, 18.0 + (i % 2) as f64, 10.0],
            shell_thickness: 2.0,
            intensities: biascorrect::phantom::MaterialIntensities {
                air: 0.18,
                tissue: 0.45,
                bone: 0.62,
            },
            cavity: Some(CavitySpec {
                center_offset: [0.0, if i % 2 == 0 { 6.0 } else { -6.0 }, 0.0],
                semi_axes: [4.0, 4.0, 3.0],
            }),
            noise_sigma: 0.005,
            rng_seed: 100 + i,
        };
        let (truth, labels, mask) = make_phantom(&spec).unwrap();
        let bias_spec = BiasSpec {
            amplitude: 0.3,
            ..BiasSpec::default()
        };
        let bias = make_bias(&bias_spec, truth.dims(), &mask).unwrap();
        let observed = corrupt(&truth, &bias).unwrap();

        let params = FcmParams {
            rng_seed: i,
            ..FcmParams::default()
        };
        let out = FcmSolver::new(&observed, &mask, params).unwrap().solve().unwrap();

        let seg_wbc = segment(&observed, &mask, 3).unwrap();
        let seg_bc = segment(&out.corrected, &mask, 3).unwrap();
        let m_wbc = confusion_metrics(&seg_wbc, &labels, &mask).unwrap();
        let m_bc = confusion_metrics(&seg_bc, &labels, &mask).unwrap();
        let s_wbc = m_wbc.sensitivity[LABEL_BONE].unwrap();
        let s_bc = m_bc.sensitivity[LABEL_BONE].unwrap();
        if s_bc > s_wbc {
            improved += 1;
        }
        err_wbc.push(m_wbc.mean_error_percent);
        err_bc.push(m_bc.mean_error_percent);
    }
    let t = two_sample_ttest(&err_wbc, &err_bc).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(improved >= 18, "bone sensitivity improved in only {improved}/20");
    assert!(
        t.p < 0.05 && mean(&err_wbc) > mean(&err_bc),
        "t-test p = {} (means {:.3}% vs {:.3}%)",
        t.p,
        mean(&err_wbc),
        mean(&err_bc)
    );
    println!(
        "[PASS] criterion 5: bone sensitivity improved in {improved}/20, mean error \
         {:.3}% -> {:.3}%, p = {:.2e}",
        mean(&err_wbc),
        mean(&err_bc),
        t.p
    );
}

/// Criterion 6: on the 2-D disk phantom the center-to-edge spread along the
/// horizontal midline of the uniform interior drops by at least 70%.
#[test]
fn criterion_6_cupping_profile() {
    let spec = PhantomSpec {
        dims: [96, 96, 1],
        spacing: [1.0, 1.0, 1.0],
        semi_axes: [40.0, 40.0, 1.0],
        shell_thickness: 3.0,
        intensities: biascorrect::phantom::MaterialIntensities {
            air: 0.15,
            tissue: 0.45,
            bone: 0.70,
        },
        cavity: None,
        noise_sigma: 0.005,
        rng_seed: 11,
    };
    let (truth, labels, mask) = make_phantom(&spec).unwrap();
    let bias = make_bias(&BiasSpec::default(), truth.dims(), &mask).unwrap();
    let observed = corrupt(&truth, &bias).unwrap();
    let out = FcmSolver::new(&observed, &mask, FcmParams::default())
        .unwrap()
        .solve()
        .unwrap();

    // Tissue voxels on the horizontal midline, grouped into a center band
    // (inner 30% of the tissue radius) and an edge band (outer 30%).
    let dims = truth.dims();
    let row = dims.ny / 2;
    let cx = (dims.nx as f64 - 1.0) / 2.0;
    let tissue_on_row: Vec<(f64, usize)> = (0..dims.nx)
        .map(|i| (i, dims.flatten(i, row, 0)))
        .filter(|&(_, idx)| labels.get(idx) as usize == LABEL_TISSUE)
        .map(|(i, idx)| ((i as f64 - cx).abs(), idx))
        .collect();
    let r_t = tissue_on_row
        .iter()
        .map(|&(r, _)| r)
        .fold(0.0f64, f64::max);
    let band_mean = |v: &Volume, lo: f64, hi: f64| -> f64 {
        let vals: Vec<f64> = tissue_on_row
            .iter()
            .filter(|&&(r, _)| r >= lo * r_t && r <= hi * r_t)
            .map(|&(_, idx)| v.data()[idx] as f64)
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    let spread = |v: &Volume| (band_mean(v, 0.7, 1.0) - band_mean(v, 0.0, 0.3)).abs();
    let before = spread(&observed);
    let after = spread(&out.corrected);
    assert!(
        after <= 0.3 * before,
        "midline spread {before:.4} -> {after:.4} (need -70%)"
    );
    println!("[PASS] criterion 6: midline center-to-edge spread {before:.4} -> {after:.4}");
}

/// Criterion 7: at (tight) convergence the central finite-difference
/// gradients of the Lagrangian with respect to every center and 100 sampled
/// bias entries stay below 1e-4.
#[test]
fn criterion_7_numerical_stationarity() {
    let spec = PhantomSpec {
        dims: [24, 24, 8],
        spacing: [1.0, 1.0, 1.0],
        semi_axes: [10.0, 10.0, 3.0],
        shell_thickness: 2.0,
        intensities: biascorrect::phantom::MaterialIntensities {
            air: 0.15,
            tissue: 0.45,
            bone: 0.75,
        },
        cavity: Some(CavitySpec {
            center_offset: [0.0, 3.0, 0.0],
            semi_axes: [3.0, 3.0, 2.0],
        }),
        noise_sigma: 0.004,
        rng_seed: 3,
    };
    let (truth, _, mask) = make_phantom(&spec).unwrap();
    let bias = make_bias(
        &BiasSpec {
            amplitude: 0.10,
            ..BiasSpec::default()
        },
        truth.dims(),
        &mask,
    )
    .unwrap();
    let observed = corrupt(&truth, &bias).unwrap();

    let params = FcmParams {
        epsilon: 1e-11,
        max_iters: 50_000,
        ..FcmParams::default()
    };
    let solver = FcmSolver::new(&observed, &mask, params).unwrap();
    let mut state = solver.init_state().unwrap();
    let mut converged = false;
    for _ in 0..params.max_iters {
        let ev = solver.sweep(&mut state);
        if ev.delta_c < params.epsilon {
            converged = true;
            break;
        }
    }
    assert!(converged, "no fixed point within the sweep cap");

    let h = 1e-6;
    let mut max_grad = 0f64;
    // Centers: the multiplier terms do not involve c, so dL/dc = dJ/dc.
    for i in 0..state.centers.len() {
        let mut plus = state.clone();
        plus.centers[i] += h;
        let mut minus = state.clone();
        minus.centers[i] -= h;
        let g = (solver.objective(&plus) - solver.objective(&minus)) / (2.0 * h);
        max_grad = max_grad.max(g.abs());
    }
    // Bias entries: dL/db_n = dJ/db_n + lambda.
    let n = solver.masked_count();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let p = rng.random_range(0..n);
        let mut plus = state.clone();
        plus.bias[p] += h;
        let mut minus = state.clone();
        minus.bias[p] -= h;
        let g = (solver.objective(&plus) - solver.objective(&minus)) / (2.0 * h) + state.lambda;
        max_grad = max_grad.max(g.abs());
    }
    assert!(max_grad <= 1e-4, "max Lagrangian gradient {max_grad:.3e}");
    println!(
        "[PASS] criterion 7: max |grad L| = {max_grad:.2e} after {} sweeps",
        state.sweep
    );
}

/// Criterion 8: repeated runs and different thread counts produce bitwise
/// identical corrected volumes.
#[test]
fn criterion_8_determinism() {
    let spec = PhantomSpec {
        dims: [48, 48, 16],
        spacing: [1.0, 1.0, 1.0],
        semi_axes: [19.0, 19.0, 6.0],
        shell_thickness: 2.0,
        intensities: biascorrect::phantom::MaterialIntensities {
            air: 0.15,
            tissue: 0.45,
            bone: 0.7,
        },
        cavity: None,
        noise_sigma: 0.005,
        rng_seed: 21,
    };
    let (truth, _, mask) = make_phantom(&spec).unwrap();
    let bias = make_bias(&BiasSpec::default(), truth.dims(), &mask).unwrap();
    let observed = corrupt(&truth, &bias).unwrap();
    let params = FcmParams {
        max_iters: 60,
        ..FcmParams::default()
    };

    let run = |threads: usize| -> Vec<u32> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| {
            let out = FcmSolver::new(&observed, &mask, params).unwrap().solve().unwrap();
            out.corrected.data().iter().map(|v| v.to_bits()).collect()
        })
    };

    let single = run(1);
    for _ in 0..2 {
        assert_eq!(run(1), single, "repeated single-threaded runs differ");
    }
    let quad = run(4);
    assert_eq!(quad, single, "1-thread and 4-thread runs differ");
    println!("[PASS] criterion 8: 3 repeats and 1 vs 4 threads are bitwise identical");
}
