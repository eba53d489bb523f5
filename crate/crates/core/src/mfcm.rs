//! Bias-estimating fuzzy C-means solver.
//!
//! The observed intensity is modelled as `y_n = x_n + b_n` with `b` slowly
//! varying and zero-mean over the foreground. The solver minimizes
//!
//! ```text
//! J = sum_i sum_n mu_in^m * D_in  +  (alpha/|M|) sum_i sum_n mu_in^m * R_in
//! D_in = (y_n - b_n - c_i)^2,   R_in = sum_{r in M_n} D_ir
//! ```
//!
//! subject to per-voxel membership normalization and `sum_n b_n = 0`, where
//! `M_n` is the in-slice 8-neighborhood restricted to the mask and `|M| = 8`
//! is constant. Coordinate descent cycles exact block minimizers: memberships
//! (closed form), centers (weighted means), bias (per-voxel quadratic with a
//! single multiplier `lambda` enforcing the zero-mean constraint). Sweeps stop
//! when the Euclidean change of the center vector drops below `epsilon`.
//!
//! The raw bias estimate is intentionally left unsmoothed inside the loop; a
//! masked Gaussian is applied once after convergence and the smoothed field's
//! residual masked mean is subtracted back out, so the corrected volume keeps
//! the zero-mean property end to end.
//!
//! Every reduction runs over fixed-size chunks combined in index order, so
//! results are bitwise identical no matter how many threads execute.

use crate::smoothing;
use crate::thresholding::{self, ThresholdError};
use crate::volume::{neighbors_in_slice, Mask, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Cardinality |M| of the in-slice 3x3 neighborhood (window minus center).
pub const NEIGHBORHOOD_CARDINALITY: f64 = 8.0;

/// Reduction chunk width; fixed so thread count cannot reorder sums.
const CHUNK: usize = 4096;

#[derive(Debug, Error)]
pub enum FcmError {
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("mask/volume dims mismatch")]
    DimsMismatch,
    #[error("mask has no foreground voxels")]
    EmptyMask,
    #[error("center initialization failed: {0}")]
    Init(#[from] ThresholdError),
}

/// Solver configuration. Defaults follow the suggested parameter set:
/// 3 clusters, fuzziness 2, neighborhood weight 1, tolerance 1e-5.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FcmParams {
    /// Cluster count I.
    #[serde(default = "default_clusters")]
    pub clusters: usize,
    /// Fuzziness exponent m (> 1).
    #[serde(default = "default_fuzziness")]
    pub fuzziness: f64,
    /// Neighborhood regularization weight alpha (>= 0).
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Termination tolerance on the center vector change.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    /// Half-width of the uniform random bias initialization.
    #[serde(default = "default_bias_init_scale")]
    pub bias_init_scale: f64,
    #[serde(default, rename = "seed")]
    pub rng_seed: u64,
    /// Post-convergence Gaussian smoothing widths in voxels.
    #[serde(default = "default_sigma", rename = "sigma")]
    pub smooth_sigma: [f64; 3],
}

fn default_clusters() -> usize {
    3
}
fn default_fuzziness() -> f64 {
    2.0
}
fn default_alpha() -> f64 {
    1.0
}
fn default_epsilon() -> f64 {
    1e-5
}
fn default_max_iters() -> usize {
    200
}
fn default_bias_init_scale() -> f64 {
    1e-3
}
fn default_sigma() -> [f64; 3] {
    smoothing::DEFAULT_SIGMA_VOX
}

impl Default for FcmParams {
    fn default() -> Self {
        FcmParams {
            clusters: default_clusters(),
            fuzziness: default_fuzziness(),
            alpha: default_alpha(),
            epsilon: default_epsilon(),
            max_iters: default_max_iters(),
            bias_init_scale: default_bias_init_scale(),
            rng_seed: 0,
            smooth_sigma: default_sigma(),
        }
    }
}

impl FcmParams {
    pub fn validate(&self) -> Result<(), FcmError> {
        if self.clusters < 2 {
            return Err(FcmError::InvalidParams("clusters must be >= 2".into()));
        }
        if !(self.fuzziness > 1.0) || !self.fuzziness.is_finite() {
            return Err(FcmError::InvalidParams("fuzziness must be > 1".into()));
        }
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return Err(FcmError::InvalidParams("alpha must be >= 0".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(FcmError::InvalidParams("epsilon must be > 0".into()));
        }
        if self.bias_init_scale < 0.0 {
            return Err(FcmError::InvalidParams(
                "bias_init_scale must be >= 0".into(),
            ));
        }
        if self.smooth_sigma.iter().any(|&s| s < 0.0 || !s.is_finite()) {
            return Err(FcmError::InvalidParams("sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Iterate state over the masked voxels.
///
/// `mu` is voxel-major (`mu[n * I + i]`), `bias` is per masked voxel in the
/// solver's masked ordering (ascending flat index). After every membership
/// update each voxel's row sums to 1; after every bias update the bias sums
/// to 0 over the mask (up to roundoff).
#[derive(Debug, Clone)]
pub struct FcmState {
    pub mu: Vec<f64>,
    pub centers: Vec<f64>,
    pub bias: Vec<f64>,
    pub lambda: f64,
    pub sweep: usize,
    pub objective: f64,
    /// Centers whose membership mass vanished in the last center update.
    pub stale: Vec<bool>,
}

/// Per-sweep progress report handed to observers.
#[derive(Debug, Clone, Copy)]
pub struct SweepEvent {
    pub sweep: usize,
    pub objective: f64,
    pub delta_c: f64,
}

/// Result of a full solve.
#[derive(Debug, Clone)]
pub struct SolveOutput {
    pub state: FcmState,
    pub converged: bool,
    pub sweeps: usize,
    /// Raw per-voxel bias estimate, background 0.
    pub bias_raw: Volume,
    /// Smoothed, re-centered bias actually subtracted from the input.
    pub bias_smooth: Volume,
    /// `y - bias_smooth` on the mask, 0 on background.
    pub corrected: Volume,
}

/// Coordinate-descent solver bound to one volume/mask/parameter set.
pub struct FcmSolver<'a> {
    y: &'a Volume,
    mask: &'a Mask,
    params: FcmParams,
    /// Flat indices of masked voxels, ascending.
    masked: Vec<u32>,
    /// CSR adjacency over masked positions (in-slice, in-mask neighbors).
    nbr_off: Vec<u32>,
    nbr: Vec<u32>,
    /// Masked intensities in f64.
    yv: Vec<f64>,
}

impl<'a> FcmSolver<'a> {
    pub fn new(y: &'a Volume, mask: &'a Mask, params: FcmParams) -> Result<Self, FcmError> {
        params.validate()?;
        if y.dims() != mask.dims() {
            return Err(FcmError::DimsMismatch);
        }
        let masked: Vec<u32> = mask.indices().map(|i| i as u32).collect();
        if masked.is_empty() {
            return Err(FcmError::EmptyMask);
        }
        let mut pos = vec![u32::MAX; y.dims().len()];
        for (p, &idx) in masked.iter().enumerate() {
            pos[idx as usize] = p as u32;
        }
        let mut nbr_off = Vec::with_capacity(masked.len() + 1);
        let mut nbr = Vec::new();
        nbr_off.push(0u32);
        for &idx in &masked {
            for r in neighbors_in_slice(idx as usize, y.dims()) {
                if pos[r] != u32::MAX {
                    nbr.push(pos[r]);
                }
            }
            nbr_off.push(nbr.len() as u32);
        }
        let yv: Vec<f64> = masked.iter().map(|&i| y.data()[i as usize] as f64).collect();
        Ok(FcmSolver {
            y,
            mask,
            params,
            masked,
            nbr_off,
            nbr,
            yv,
        })
    }

    pub fn params(&self) -> &FcmParams {
        &self.params
    }

    pub fn masked_count(&self) -> usize {
        self.masked.len()
    }

    /// Flat volume indices of the masked voxels, in state order.
    pub fn masked_indices(&self) -> &[u32] {
        &self.masked
    }

    /// Otsu-initialized centers, small random bias, empty memberships.
    pub fn init_state(&self) -> Result<FcmState, FcmError> {
        let centers = thresholding::init_centers(self.y, self.mask, self.params.clusters)?;
        let delta = self.params.bias_init_scale;
        let mut rng = ChaCha8Rng::seed_from_u64(self.params.rng_seed);
        let bias: Vec<f64> = (0..self.masked.len())
            .map(|_| {
                if delta > 0.0 {
                    rng.random_range(-delta..=delta)
                } else {
                    0.0
                }
            })
            .collect();
        Ok(FcmState {
            mu: vec![0.0; self.masked.len() * self.params.clusters],
            centers,
            bias,
            lambda: 0.0,
            sweep: 0,
            objective: f64::NAN,
            stale: vec![false; self.params.clusters],
        })
    }

    /// Builds a state around given centers and bias; memberships start empty.
    /// Intended for tests and harnesses that drive the updates directly.
    pub fn state_from(&self, centers: Vec<f64>, bias: Vec<f64>) -> FcmState {
        assert_eq!(bias.len(), self.masked.len());
        let clusters = centers.len();
        FcmState {
            mu: vec![0.0; self.masked.len() * clusters],
            centers,
            bias,
            lambda: 0.0,
            sweep: 0,
            objective: f64::NAN,
            stale: vec![false; clusters],
        }
    }

    /// Residuals `t_n = y_n - b_n`.
    fn residuals(&self, state: &FcmState) -> Vec<f64> {
        self.yv
            .iter()
            .zip(&state.bias)
            .map(|(&y, &b)| y - b)
            .collect()
    }

    /// Per-voxel raised memberships mu^m.
    fn mu_pow(&self, state: &FcmState) -> Vec<f64> {
        let m = self.params.fuzziness;
        if m == 2.0 {
            state.mu.iter().map(|&u| u * u).collect()
        } else {
            state.mu.iter().map(|&u| u.powf(m)).collect()
        }
    }

    /// Closed-form membership update. Rows sum to 1; when some cluster has
    /// zero distance the membership spreads uniformly over the zero set.
    pub fn update_memberships(&self, state: &mut FcmState) {
        let clusters = state.centers.len();
        let a = self.params.alpha / NEIGHBORHOOD_CARDINALITY;
        let p = 1.0 / (self.params.fuzziness - 1.0);
        let t = self.residuals(state);
        let centers = state.centers.clone();

        let nbr_off = &self.nbr_off;
        let nbr = &self.nbr;
        let tref = &t;
        state
            .mu
            .par_chunks_mut(CHUNK * clusters)
            .enumerate()
            .for_each(|(chunk_id, mu_chunk)| {
                let start = chunk_id * CHUNK;
                let mut w = vec![0f64; clusters];
                for (off, row) in mu_chunk.chunks_mut(clusters).enumerate() {
                    let n = start + off;
                    let tn = tref[n];
                    let nbrs = &nbr[nbr_off[n] as usize..nbr_off[n + 1] as usize];
                    let mut wmin = f64::INFINITY;
                    for (i, wi) in w.iter_mut().enumerate() {
                        let c = centers[i];
                        let dn = tn - c;
                        let mut d = dn * dn;
                        if a > 0.0 {
                            let mut r = 0.0;
                            for &q in nbrs {
                                let dr = tref[q as usize] - c;
                                r += dr * dr;
                            }
                            d += a * r;
                        }
                        *wi = d;
                        wmin = wmin.min(d);
                    }
                    if wmin == 0.0 {
                        let zeros = w.iter().filter(|&&x| x == 0.0).count() as f64;
                        for (i, row_i) in row.iter_mut().enumerate() {
                            *row_i = if w[i] == 0.0 { 1.0 / zeros } else { 0.0 };
                        }
                    } else {
                        // Scale by the smallest distance so the powers stay
                        // bounded for any fuzziness exponent.
                        let mut sum = 0.0;
                        for (i, row_i) in row.iter_mut().enumerate() {
                            let v = if p == 1.0 {
                                wmin / w[i]
                            } else {
                                (wmin / w[i]).powf(p)
                            };
                            *row_i = v;
                            sum += v;
                        }
                        for row_i in row.iter_mut() {
                            *row_i /= sum;
                        }
                    }
                }
            });
    }

    /// Exact minimizer of the objective in each center:
    /// weighted mean of the voxel and neighborhood residuals, the weight of
    /// voxel n being `mu_in^m * (1 + (alpha/|M|) * |M_n|)` with `|M_n|` its
    /// actual in-mask neighbor count. For full neighborhoods the denominator
    /// reduces to the familiar `(1 + alpha) * sum mu^m`.
    pub fn update_centers(&self, state: &mut FcmState) {
        let clusters = state.centers.len();
        let a = self.params.alpha / NEIGHBORHOOD_CARDINALITY;
        let t = self.residuals(state);
        let mu_m = self.mu_pow(state);

        let n_vox = self.masked.len();
        let n_chunks = n_vox.div_ceil(CHUNK);
        let nbr_off = &self.nbr_off;
        let nbr = &self.nbr;
        let tref = &t;
        let mu_ref = &mu_m;

        let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..n_chunks)
            .into_par_iter()
            .map(|chunk_id| {
                let start = chunk_id * CHUNK;
                let end = (start + CHUNK).min(n_vox);
                let mut num = vec![0f64; clusters];
                let mut den = vec![0f64; clusters];
                for n in start..end {
                    let nbrs = &nbr[nbr_off[n] as usize..nbr_off[n + 1] as usize];
                    let mut s = 0.0;
                    for &q in nbrs {
                        s += tref[q as usize];
                    }
                    let carried = tref[n] + a * s;
                    let weight = 1.0 + a * nbrs.len() as f64;
                    let row = &mu_ref[n * clusters..(n + 1) * clusters];
                    for i in 0..clusters {
                        num[i] += row[i] * carried;
                        den[i] += row[i] * weight;
                    }
                }
                (num, den)
            })
            .collect();

        let mut num = vec![0f64; clusters];
        let mut den = vec![0f64; clusters];
        for (pn, pd) in &partials {
            for i in 0..clusters {
                num[i] += pn[i];
                den[i] += pd[i];
            }
        }
        for i in 0..clusters {
            if den[i] > 0.0 {
                state.centers[i] = num[i] / den[i];
                state.stale[i] = false;
            } else {
                state.stale[i] = true;
            }
        }
    }

    /// Constrained bias update: solves the per-voxel quadratics coupled only
    /// through the multiplier enforcing the zero-mean constraint, then stores
    /// the multiplier in the state.
    pub fn update_bias(&self, state: &mut FcmState) {
        let clusters = state.centers.len();
        let a = self.params.alpha / NEIGHBORHOOD_CARDINALITY;
        let mu_m = self.mu_pow(state);
        let n_vox = self.masked.len();
        let centers = state.centers.clone();

        let nbr_off = &self.nbr_off;
        let nbr = &self.nbr;
        let mu_ref = &mu_m;
        let yv = &self.yv;

        // Pass 1: per-voxel beta sums q_n = sum_i beta_in and the
        // beta-weighted center e_n, plus the two reduction terms for lambda.
        let mut q = vec![0f64; n_vox];
        let mut e = vec![0f64; n_vox];
        let n_chunks = n_vox.div_ceil(CHUNK);
        let partials: Vec<(f64, f64)> = q
            .par_chunks_mut(CHUNK)
            .zip(e.par_chunks_mut(CHUNK))
            .enumerate()
            .map(|(chunk_id, (qc, ec))| {
                let start = chunk_id * CHUNK;
                let mut inv_q_sum = 0.0;
                let mut resid_sum = 0.0;
                for (off, (qn, en)) in qc.iter_mut().zip(ec.iter_mut()).enumerate() {
                    let n = start + off;
                    let nbrs = &nbr[nbr_off[n] as usize..nbr_off[n + 1] as usize];
                    let mut qs = 0.0;
                    let mut es = 0.0;
                    for i in 0..clusters {
                        let mut beta = mu_ref[n * clusters + i];
                        if a > 0.0 {
                            let mut g = 0.0;
                            for &r in nbrs {
                                g += mu_ref[r as usize * clusters + i];
                            }
                            beta += a * g;
                        }
                        qs += beta;
                        es += centers[i] * beta;
                    }
                    *qn = qs;
                    *en = es / qs;
                    inv_q_sum += 1.0 / qs;
                    resid_sum += yv[n] - es / qs;
                }
                (inv_q_sum, resid_sum)
            })
            .collect();
        debug_assert_eq!(partials.len(), n_chunks);

        let mut inv_q_sum = 0.0;
        let mut resid_sum = 0.0;
        for &(iq, rs) in &partials {
            inv_q_sum += iq;
            resid_sum += rs;
        }
        let lambda = 2.0 * resid_sum / inv_q_sum;

        // Pass 2: b_n = y_n - (e_n + lambda / (2 q_n)).
        let qref = &q;
        let eref = &e;
        state
            .bias
            .par_chunks_mut(CHUNK)
            .enumerate()
            .for_each(|(chunk_id, bc)| {
                let start = chunk_id * CHUNK;
                for (off, bn) in bc.iter_mut().enumerate() {
                    let n = start + off;
                    *bn = yv[n] - eref[n] - lambda / (2.0 * qref[n]);
                }
            });
        state.lambda = lambda;
    }

    /// The regularized objective value for the given state.
    pub fn objective(&self, state: &FcmState) -> f64 {
        let clusters = state.centers.len();
        let a = self.params.alpha / NEIGHBORHOOD_CARDINALITY;
        let t = self.residuals(state);
        let mu_m = self.mu_pow(state);
        let n_vox = self.masked.len();
        let n_chunks = n_vox.div_ceil(CHUNK);

        let nbr_off = &self.nbr_off;
        let nbr = &self.nbr;
        let tref = &t;
        let mu_ref = &mu_m;
        let centers = &state.centers;

        let partials: Vec<f64> = (0..n_chunks)
            .into_par_iter()
            .map(|chunk_id| {
                let start = chunk_id * CHUNK;
                let end = (start + CHUNK).min(n_vox);
                let mut acc = 0.0;
                for n in start..end {
                    let nbrs = &nbr[nbr_off[n] as usize..nbr_off[n + 1] as usize];
                    let tn = tref[n];
                    for i in 0..clusters {
                        let c = centers[i];
                        let dn = tn - c;
                        let mut w = dn * dn;
                        if a > 0.0 {
                            let mut r = 0.0;
                            for &q in nbrs {
                                let dr = tref[q as usize] - c;
                                r += dr * dr;
                            }
                            w += a * r;
                        }
                        acc += mu_ref[n * clusters + i] * w;
                    }
                }
                acc
            })
            .collect();
        partials.iter().sum()
    }

    /// One full sweep (memberships, centers, bias) plus bookkeeping.
    pub fn sweep(&self, state: &mut FcmState) -> SweepEvent {
        let old_centers = state.centers.clone();
        self.update_memberships(state);
        self.update_centers(state);
        self.update_bias(state);
        let delta_c = state
            .centers
            .iter()
            .zip(&old_centers)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        state.sweep += 1;
        state.objective = self.objective(state);
        SweepEvent {
            sweep: state.sweep,
            objective: state.objective,
            delta_c,
        }
    }

    /// Runs sweeps to convergence (or the iteration cap), then smooths the
    /// bias estimate and assembles the corrected volume. Non-convergence is
    /// reported through the `converged` flag, not an error.
    pub fn solve(&self) -> Result<SolveOutput, FcmError> {
        self.solve_with_observer(|_| {})
    }

    pub fn solve_with_observer(
        &self,
        mut observer: impl FnMut(SweepEvent),
    ) -> Result<SolveOutput, FcmError> {
        let mut state = self.init_state()?;
        let mut converged = false;
        while state.sweep < self.params.max_iters {
            let event = self.sweep(&mut state);
            observer(event);
            if event.delta_c < self.params.epsilon {
                converged = true;
                break;
            }
        }
        self.sort_centers(&mut state);
        Ok(self.package(state, converged))
    }

    /// Sorts centers ascending, permuting membership columns to match.
    fn sort_centers(&self, state: &mut FcmState) {
        let clusters = state.centers.len();
        let mut order: Vec<usize> = (0..clusters).collect();
        order.sort_by(|&a, &b| state.centers[a].total_cmp(&state.centers[b]));
        if order.iter().enumerate().all(|(i, &o)| i == o) {
            return;
        }
        state.centers = order.iter().map(|&o| state.centers[o]).collect();
        state.stale = order.iter().map(|&o| state.stale[o]).collect();
        let mut mu = vec![0f64; state.mu.len()];
        for n in 0..self.masked.len() {
            for (i, &o) in order.iter().enumerate() {
                mu[n * clusters + i] = state.mu[n * clusters + o];
            }
        }
        state.mu = mu;
    }

    fn package(&self, state: FcmState, converged: bool) -> SolveOutput {
        let dims = self.y.dims();
        let spacing = self.y.spacing();
        let n_total = dims.len();

        let mut raw_f64 = vec![0f64; n_total];
        for (p, &idx) in self.masked.iter().enumerate() {
            raw_f64[idx as usize] = state.bias[p];
        }

        let mut smooth = smoothing::smooth_masked_f64(&raw_f64, self.mask, self.params.smooth_sigma);
        // Smoothing needn't preserve the zero mean; restore it so the
        // corrected volume keeps the input's mean intensity.
        let mean: f64 =
            self.masked.iter().map(|&i| smooth[i as usize]).sum::<f64>() / self.masked.len() as f64;
        for &idx in &self.masked {
            smooth[idx as usize] -= mean;
        }

        let mut corrected = vec![0f32; n_total];
        for &idx in &self.masked {
            let i = idx as usize;
            corrected[i] = (self.y.data()[i] as f64 - smooth[i]) as f32;
        }

        let bias_raw = Volume::new(dims, spacing, raw_f64.iter().map(|&v| v as f32).collect())
            .expect("bias finite");
        let bias_smooth = Volume::new(dims, spacing, smooth.iter().map(|&v| v as f32).collect())
            .expect("smoothed bias finite");
        let corrected = Volume::new(dims, spacing, corrected).expect("corrected finite");
        let sweeps = state.sweep;
        SolveOutput {
            state,
            converged,
            sweeps,
            bias_raw,
            bias_smooth,
            corrected,
        }
    }
}

/// Convenience wrapper: build a solver and run it.
pub fn solve(y: &Volume, mask: &Mask, params: FcmParams) -> Result<SolveOutput, FcmError> {
    FcmSolver::new(y, mask, params)?.solve()
}
