//! Effective run settings: built-in defaults, then a `key=value` file, then
//! command-line flags.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use lowres_tts::corpus::PrepConfig;
use lowres_tts::features::FeatureConfig;
use lowres_tts::model::ModelConfig;
use lowres_tts::trainer::{AdamConfig, TrainConfig};

use crate::errors::coded;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSettings {
    pub text: Option<String>,
    pub gl_iters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub prep: PrepConfig,
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub adam: AdamConfig,
    pub synth: SynthSettings,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            seed: 0,
            prep: PrepConfig::default(),
            features: FeatureConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            adam: AdamConfig::default(),
            synth: SynthSettings {
                text: None,
                gl_iters: 60,
            },
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| coded("E_CONFIG", format!("{key}: cannot parse {value:?}")))
}

impl Settings {
    /// Defaults overlaid with `path`, if given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut s = Settings::default();
        if let Some(path) = path {
            let body = std::fs::read_to_string(path)
                .map_err(|e| coded("E_CONFIG", format!("{}: {e}", path.display())))?;
            s.apply_text(&body).with_context(|| path.display().to_string())?;
        }
        Ok(s)
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, body: &str) -> Result<()> {
        for (i, raw) in body.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| coded("E_CONFIG", format!("line {}: expected key=value", i + 1)))?;
            self.set(k.trim(), v.trim()).with_context(|| format!("line {}", i + 1))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let cfg_err = |e: &dyn std::fmt::Display| coded("E_CONFIG", e.to_string());
        match key {
            "seed" => self.seed = parse(key, value)?,
            "prep.rate" => self.prep.target_rate_hz = parse(key, value)?,
            "prep.max_silence" => self.prep.vad.max_internal_silence_sec = parse(key, value)?,
            "prep.max_chunk" => self.prep.max_chunk_sec = parse(key, value)?,
            "prep.threshold_db" => self.prep.vad.threshold_db = parse(key, value)?,
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.grad_clip_norm" => self.train.grad_clip_norm = parse(key, value)?,
            "train.validation_interval" => self.train.validation_interval_iters = parse(key, value)?,
            "train.max_iterations" => self.train.max_iterations = Some(parse(key, value)?),
            "train.anneal_factor" => self.train.anneal.factor = parse(key, value)?,
            "train.anneal_patience" => self.train.anneal.patience_validations = parse(key, value)?,
            "adam.lr" => self.adam.lr = parse(key, value)?,
            "adam.beta1" => self.adam.beta1 = parse(key, value)?,
            "adam.beta2" => self.adam.beta2 = parse(key, value)?,
            "adam.weight_decay" => self.adam.weight_decay = parse(key, value)?,
            "adam.eps" => self.adam.numerical_eps = parse(key, value)?,
            "synth.text" => self.synth.text = Some(value.to_string()),
            "synth.gl_iters" => self.synth.gl_iters = parse(key, value)?,
            k if k.starts_with("feature.") => {
                if !self.features.set(k, value).map_err(|e| cfg_err(&e))? {
                    return Err(coded("E_CONFIG", format!("unknown setting {k}")));
                }
            }
            k if k.starts_with("model.") => {
                if !self.model.set(k, value).map_err(|e| cfg_err(&e))? {
                    return Err(coded("E_CONFIG", format!("unknown setting {k}")));
                }
            }
            other => return Err(coded("E_CONFIG", format!("unknown setting {other}"))),
        }
        Ok(())
    }

    /// Checks every section against its module's invariants. The model
    /// vocabulary and mel count are filled in from the data later, so they
    /// are checked with placeholders here.
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: &dyn std::fmt::Display| coded("E_CONFIG", e.to_string());
        self.prep.vad.validate().map_err(|e| cfg_err(&e))?;
        if self.prep.target_rate_hz == 0 || !(self.prep.max_chunk_sec > 0.0) {
            return Err(coded("E_CONFIG", "prep.rate and prep.max_chunk must be positive"));
        }
        self.features.validate().map_err(|e| cfg_err(&e))?;
        let model = ModelConfig {
            vocab_size: self.model.vocab_size.max(3),
            n_mels: self.features.n_mels,
            ..self.model.clone()
        };
        model.validate().map_err(|e| cfg_err(&e))?;
        self.train.validate().map_err(|e| cfg_err(&e))?;
        self.adam.validate().map_err(|e| cfg_err(&e))?;
        if self.synth.gl_iters == 0 {
            return Err(coded("E_CONFIG", "synth.gl_iters must be at least 1"));
        }
        Ok(())
    }

    /// Canonical `key=value` listing of every setting.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        line("seed", self.seed.to_string());
        line("prep.rate", self.prep.target_rate_hz.to_string());
        line("prep.max_silence", format!("{:?}", self.prep.vad.max_internal_silence_sec));
        line("prep.max_chunk", format!("{:?}", self.prep.max_chunk_sec));
        line("prep.threshold_db", format!("{:?}", self.prep.vad.threshold_db));
        for (k, v) in self.features.to_pairs().into_iter().chain(self.model.to_pairs()) {
            line(&k, v);
        }
        line("train.epochs", self.train.epochs.to_string());
        line("train.batch_size", self.train.batch_size.to_string());
        line("train.grad_clip_norm", format!("{:?}", self.train.grad_clip_norm));
        line("train.validation_interval", self.train.validation_interval_iters.to_string());
        if let Some(m) = self.train.max_iterations {
            line("train.max_iterations", m.to_string());
        }
        line("train.anneal_factor", format!("{:?}", self.train.anneal.factor));
        line("train.anneal_patience", self.train.anneal.patience_validations.to_string());
        line("adam.lr", format!("{:?}", self.adam.lr));
        line("adam.beta1", format!("{:?}", self.adam.beta1));
        line("adam.beta2", format!("{:?}", self.adam.beta2));
        line("adam.weight_decay", format!("{:?}", self.adam.weight_decay));
        line("adam.eps", format!("{:?}", self.adam.numerical_eps));
        if let Some(t) = &self.synth.text {
            line("synth.text", t.clone());
        }
        line("synth.gl_iters", self.synth.gl_iters.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trips() {
        let mut s = Settings::default();
        s.apply_text("seed=7\nmodel.embed_dim = 12 # small\nfeature.n_mels=40\ntrain.max_iterations=50\nsynth.text=नमः\n")
            .unwrap();
        assert_eq!(s.seed, 7);
        assert_eq!(s.model.embed_dim, 12);
        let mut t = Settings::default();
        t.apply_text(&s.to_text()).unwrap();
        assert_eq!(s, t);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let mut s = Settings::default();
        assert!(s.apply_text("model.depth=3").is_err());
        assert!(s.apply_text("nonsense").is_err());
        assert!(s.apply_text("adam.lr=fast").is_err());
    }

    #[test]
    fn defaults_are_valid() {
        Settings::default().validate().unwrap();
        let mut s = Settings::default();
        s.set("adam.beta1", "1.5").unwrap();
        assert!(s.validate().is_err());
    }
}
