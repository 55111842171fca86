//! Decoding chain for passive ultrasonic reflector constellations.
//!
//! The crate covers everything between a (simulated) 32-microphone in-air
//! sonar measurement and a set of predicted reflector size classes:
//!
//! * [`array`]: microphone geometry and far-field steering vectors
//! * [`waveform`]: FM sweep generation and matched filtering
//! * [`simulate`]: echo synthesis for reflector constellations
//! * [`beamform`]: frequency-domain delay-and-sum with null-steering
//! * [`cochlea`]: gammatone filterbank and cochleogram images
//! * [`nn`]: a small CNN engine with multi-label and single-label heads
//! * [`pipeline`]: dataset synthesis, training, evaluation and ablations
//! * [`config`]: the merged run configuration used by the CLI

pub mod array;
pub mod beamform;
pub mod cochlea;
pub mod config;
mod dsp;
pub mod error;
pub mod nn;
pub mod pipeline;
pub mod simulate;
pub mod waveform;

pub use error::{Error, ErrorCategory, Result};
