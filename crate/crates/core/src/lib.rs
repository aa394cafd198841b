//! Volumetric unlearnable-example protection.
//!
//! A noise generator is trained against a frozen surrogate segmenter so that
//! its bounded, ROI-masked perturbations (a) make the surrogate's
//! segmentation loss small, (b) push perturbed logits away from clean ones and
//! (c) change amplitude spectra as much as possible from one z-slice to the
//! next. Victim segmenters trained on the released data are then evaluated
//! on held-out clean volumes.

pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod networks;
mod objective;
pub mod protector;
pub mod spectral;
pub mod synth;
pub mod victim;
pub mod volume;

pub use error::{Error, Result};
