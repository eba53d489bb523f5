//! End-to-end correction pipeline: preprocess, solve, map back to the input
//! intensity units. Shared by the CLI and the C API.

use crate::mfcm::{self, FcmParams, SweepEvent};
use crate::preprocess::{self, PreprocessError};
use crate::thresholding::ThresholdError;
use crate::volume::{LabelVolume, Mask, Volume, VolumeError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Threshold(#[from] ThresholdError),
    #[error(transparent)]
    Fcm(#[from] mfcm::FcmError),
}

/// Correction results in the input volume's original intensity units.
#[derive(Debug, Clone)]
pub struct CorrectionOutput {
    pub corrected: Volume,
    pub bias_raw: Volume,
    pub bias_smooth: Volume,
    pub mask: Mask,
    pub converged: bool,
    pub sweeps: usize,
}

/// Runs foreground extraction, clipping, normalization, the solver, and the
/// post-hoc smoothing, then rescales everything back to input units
/// (`corrected = clipped_input - scale * smoothed_bias`).
pub fn correct(
    input: &Volume,
    params: FcmParams,
    mut observer: impl FnMut(SweepEvent),
) -> Result<CorrectionOutput, PipelineError> {
    let pre = preprocess::run(input)?;
    let solver = mfcm::FcmSolver::new(&pre.volume, &pre.mask, params)?;
    let out = solver.solve_with_observer(&mut observer)?;

    let dims = input.dims();
    let rescale = |v: &Volume, add_offset: bool| -> Volume {
        let data: Vec<f32> = (0..dims.len())
            .map(|idx| {
                if !pre.mask.get(idx) {
                    return 0.0;
                }
                let x = v.data()[idx] as f64 * pre.scale;
                (if add_offset { x + pre.offset } else { x }) as f32
            })
            .collect();
        Volume::new(dims, input.spacing(), data).expect("rescaled values finite")
    };

    Ok(CorrectionOutput {
        corrected: rescale(&out.corrected, true),
        bias_raw: rescale(&out.bias_raw, false),
        bias_smooth: rescale(&out.bias_smooth, false),
        mask: pre.mask,
        converged: out.converged,
        sweeps: out.sweeps,
    })
}

/// Preprocesses and hard-segments a volume into air/tissue/bone.
pub fn segment(input: &Volume) -> Result<LabelVolume, PipelineError> {
    let pre = preprocess::run(input)?;
    Ok(crate::thresholding::segment(&pre.volume, &pre.mask, 3)?)
}
