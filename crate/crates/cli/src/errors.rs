//! Stable machine-readable error codes for runtime failures.

use std::fmt;

use lowres_tts::audio::AudioError;
use lowres_tts::corpus::PrepError;
use lowres_tts::evaluation::EvalError;
use lowres_tts::features::FeatureError;
use lowres_tts::model::ModelError;
use lowres_tts::trainer::TrainError;
use lowres_tts::transfer::TransferError;
use lowres_tts::vocoder::VocoderError;

/// An error raised by the CLI itself with an explicit code.
#[derive(Debug)]
pub struct Coded {
    pub code: &'static str,
    pub message: String,
}

impl fmt::Display for Coded {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Coded {}

pub fn coded(code: &'static str, message: impl Into<String>) -> anyhow::Error {
    Coded {
        code,
        message: message.into(),
    }
    .into()
}

fn audio_code(_: &AudioError) -> &'static str {
    "E_AUDIO"
}

fn prep_code(e: &PrepError) -> &'static str {
    match e {
        PrepError::Audio(a) => audio_code(a),
        PrepError::ClipTooShort { .. } | PrepError::EmptyAfterTrim => "E_AUDIO",
        PrepError::EmptyText
        | PrepError::UnknownSymbol(_)
        | PrepError::DuplicateSymbol(_)
        | PrepError::MissingEos
        | PrepError::IdOutOfRange(_) => "E_TEXT",
        PrepError::AlignmentMismatch { .. } | PrepError::UnsplittableSpan { .. } => "E_SEGMENT",
        PrepError::EmptyManifest | PrepError::BadManifestLine { .. } => "E_MANIFEST",
        PrepError::InvalidConfig(_) => "E_CONFIG",
        PrepError::Io { .. } => "E_IO",
    }
}

fn feature_code(e: &FeatureError) -> &'static str {
    match e {
        FeatureError::RateMismatch { .. } => "E_SAMPLE_RATE",
        FeatureError::InvalidConfig(_) | FeatureError::EmptyMelFilter(_) => "E_CONFIG",
        FeatureError::BadCache { .. } => "E_FEATURES_CORRUPT",
        FeatureError::Io { .. } => "E_IO",
    }
}

fn model_code(e: &ModelError) -> &'static str {
    match e {
        ModelError::UnknownSymbol { .. } => "E_TEXT",
        ModelError::NumericalDivergence(_) => "E_DIVERGED",
        ModelError::InvalidConfig(_) => "E_CONFIG",
        _ => "E_MODEL",
    }
}

fn train_code(e: &TrainError) -> &'static str {
    match e {
        TrainError::Model(m) => model_code(m),
        TrainError::NumericalDivergence(_) => "E_DIVERGED",
        TrainError::StateMismatch(_) => "E_CHECKPOINT",
        TrainError::EmptyDataset => "E_MANIFEST",
        TrainError::InvalidConfig(_) => "E_CONFIG",
    }
}

fn transfer_code(e: &TransferError) -> &'static str {
    match e {
        TransferError::CorruptCheckpoint(_) => "E_CHECKPOINT_CORRUPT",
        TransferError::VersionMismatch { .. } => "E_CHECKPOINT_VERSION",
        TransferError::IncompatibleArchitecture(_) => "E_INCOMPATIBLE_ARCHITECTURE",
        TransferError::MissingTensor(_) => "E_MISSING_TENSOR",
        TransferError::InvalidSpec(_) => "E_CONFIG",
        TransferError::Model(m) => model_code(m),
        TransferError::Io { .. } => "E_IO",
    }
}

fn eval_code(e: &EvalError) -> &'static str {
    match e {
        EvalError::EmptyAlignment | EvalError::NotStochastic { .. } | EvalError::BadAlignmentFile(_) => "E_ALIGNMENT",
        EvalError::InvalidBand(_) | EvalError::InvalidConfidence(_) => "E_CONFIG",
        EvalError::InsufficientRaters { .. } | EvalError::InvalidScore { .. } | EvalError::BadMosLine { .. } => "E_MOS",
        EvalError::BadLossLog { .. } | EvalError::EmptyLog => "E_LOSS_LOG",
        EvalError::Io { .. } => "E_IO",
    }
}

fn vocoder_code(e: &VocoderError) -> &'static str {
    match e {
        VocoderError::SingularTransform(_) => "E_FLOW_SINGULAR",
        VocoderError::ShapeMismatch(_) => "E_VOCODER",
        VocoderError::InvalidConfig(_) => "E_CONFIG",
        VocoderError::Feature(f) => feature_code(f),
        VocoderError::Audio(a) => audio_code(a),
    }
}

/// The code of the innermost recognised error in the chain.
pub fn code_of(err: &anyhow::Error) -> &'static str {
    let mut code = "E_RUNTIME";
    for cause in err.chain() {
        let found = if let Some(c) = cause.downcast_ref::<Coded>() {
            Some(c.code)
        } else if let Some(e) = cause.downcast_ref::<PrepError>() {
            Some(prep_code(e))
        } else if let Some(e) = cause.downcast_ref::<AudioError>() {
            Some(audio_code(e))
        } else if let Some(e) = cause.downcast_ref::<FeatureError>() {
            Some(feature_code(e))
        } else if let Some(e) = cause.downcast_ref::<ModelError>() {
            Some(model_code(e))
        } else if let Some(e) = cause.downcast_ref::<TrainError>() {
            Some(train_code(e))
        } else if let Some(e) = cause.downcast_ref::<TransferError>() {
            Some(transfer_code(e))
        } else if let Some(e) = cause.downcast_ref::<EvalError>() {
            Some(eval_code(e))
        } else if let Some(e) = cause.downcast_ref::<VocoderError>() {
            Some(vocoder_code(e))
        } else if cause.downcast_ref::<std::io::Error>().is_some() {
            Some("E_IO")
        } else {
            None
        };
        if let Some(c) = found {
            code = c;
            break;
        }
    }
    code
}

/// `CODE: message` on a single line.
pub fn render(err: &anyhow::Error) -> String {
    let msg = format!("{err:#}").replace(['\n', '\r'], " ");
    format!("{}: {msg}", code_of(err))
}
