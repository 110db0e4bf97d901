//! Joint slot attention for audio-visual sound source localization.
//!
//! Image and audio features are decomposed by slot attention started from a
//! shared pair of learnable slots into a target and an off-target slot per
//! modality. Training combines a contrastive loss on target slots (with
//! k-reciprocal false-negative filtering), cross-modal attention matching,
//! slot divergence and slot reconstruction. Localization thresholds the
//! upsampled attention of the audio target query over image keys.

pub mod diffcore;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod fnmitigation;
pub mod harness;
pub mod jsa;
pub mod localization;
pub mod objectives;
pub mod synthbench;

pub use error::{Error, Result};
