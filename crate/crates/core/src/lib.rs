//! Shading / bias-field correction for volumetric images.
//!
//! The observed volume is modelled as a true piecewise-uniform signal plus a
//! spatially slowly varying additive bias field with zero mean over the
//! foreground. The solver estimates the bias by coordinate descent on a fuzzy
//! C-means objective augmented with an in-slice neighborhood regularizer,
//! then smooths the estimate with a masked Gaussian filter and subtracts it
//! from the input.
//!
//! Modules:
//! - [`volume`]: dense volume / mask / label types and the VBF on-disk format
//! - [`preprocess`]: foreground extraction, outlier clipping, normalization
//! - [`thresholding`]: histograms and single/multilevel Otsu thresholds
//! - [`mfcm`]: the bias-estimating fuzzy C-means solver
//! - [`smoothing`]: separable masked Gaussian filtering
//! - [`phantom`]: synthetic head-like phantoms and injected bias fields
//! - [`evaluation`]: uniformity, confusion and t-test metrics
//! - [`pipeline`]: the end-to-end correction pipeline used by the CLI and FFI

pub mod evaluation;
pub mod mfcm;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod smoothing;
pub mod thresholding;
pub mod volume;

pub use mfcm::{FcmParams, FcmSolver, FcmState, SolveOutput};
pub use volume::{Dims, LabelVolume, Mask, Volume};
