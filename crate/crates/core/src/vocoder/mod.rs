//! Waveform generation: Griffin-Lim phase reconstruction and a small
//! mel-conditioned normalizing flow.

mod flow;
mod griffin_lim;

use thiserror::Error;

use crate::audio::AudioError;
use crate::features::FeatureError;

pub use flow::{
    flow_forward, flow_inverse, flow_nll, flow_nll_and_grad, train_flow, upsample_condition, FlowConfig,
    FlowGrads, FlowParams, FlowStep,
};
pub use griffin_lim::{griffin_lim, griffin_lim_with_seed, mel_to_linear, GriffinLimOutput};

#[derive(Debug, Error)]
pub enum VocoderError {
    #[error("mixing matrix of flow step {0} is singular")]
    SingularTransform(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid vocoder config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Audio(#[from] AudioError),
}
