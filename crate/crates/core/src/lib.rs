//! Low-resource text-to-speech fine-tuning toolkit.
//!
//! The pipeline runs corpus preparation ([`corpus`]), log-mel feature
//! extraction ([`features`]), a small recurrent sequence-to-sequence
//! spectrogram predictor with location-sensitive attention ([`model`]),
//! training ([`trainer`]), checkpoint transfer surgery ([`transfer`]),
//! waveform generation ([`vocoder`]) and diagnostics ([`evaluation`]).

pub mod audio;
pub mod corpus;
pub mod features;
pub mod matrix;
pub mod autodiff;
pub mod model;
pub mod trainer;
pub mod evaluation;
pub mod transfer;
pub mod vocoder;
pub mod synthetic;
