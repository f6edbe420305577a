//! Blind estimation of reverberation time (RT60) and direct-to-reverberant
//! ratio (DRR) from reverberant speech using speech-to-reverberation
//! modulation energy ratios.
//!
//! The pipeline runs at a fixed 16 kHz: a clip is level-normalized
//! ([`level`]), decomposed into the modulation energy tensor ([`modspec`]),
//! reduced to one of the SRMR-family features ([`metrics`]) and mapped to an
//! acoustic parameter by a trained regression ([`mapping`]). [`room`] and
//! [`dataset`] synthesize ground-truthed reverberant data, and
//! [`evaluation`] runs the train/test protocol over such a dataset.

pub mod audio;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod gammatone;
pub mod level;
pub mod mapping;
pub mod metrics;
pub mod modspec;
pub mod probe;
pub mod room;

pub use audio::{AudioClip, PIPELINE_RATE};
pub use error::{Error, Result};
pub use modspec::{analyze, Mode, ModulationTensor, PipelineConfig};
