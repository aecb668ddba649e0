use crate::model::ModelError;

/// Sizes and regularisation of the spectrogram predictor.
///
/// Defaults are a desk-scale model. The full-size reference architecture
/// uses embed 512, encoder 256 per direction, attention 128, location
/// filters 32, decoder 1024, prenet 256 and postnet 512.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub encoder_conv_layers: usize,
    pub encoder_kernel: usize,
    /// Per direction; the encoder memory is twice this wide.
    pub encoder_rnn_dim: usize,
    pub attention_dim: usize,
    pub location_filters: usize,
    pub location_kernel: usize,
    /// Width of both the attention and the decoder recurrent layers.
    pub decoder_rnn_dim: usize,
    pub prenet_dim: usize,
    pub n_mels: usize,
    pub postnet_layers: usize,
    pub postnet_kernel: usize,
    pub postnet_dim: usize,
    pub gate_threshold: f64,
    pub encoder_dropout: f64,
    /// Prenet dropout, active in training and inference.
    pub decoder_dropout: f64,
    /// Dropout on the attention recurrent layer input, training only.
    pub attention_dropout: f64,
    pub max_decoder_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 70,
            embed_dim: 64,
            encoder_conv_layers: 3,
            encoder_kernel: 5,
            encoder_rnn_dim: 64,
            attention_dim: 32,
            location_filters: 8,
            location_kernel: 15,
            decoder_rnn_dim: 128,
            prenet_dim: 64,
            n_mels: 80,
            postnet_layers: 5,
            postnet_kernel: 5,
            postnet_dim: 64,
            gate_threshold: 0.4,
            encoder_dropout: 0.5,
            decoder_dropout: 0.4,
            attention_dropout: 0.4,
            max_decoder_steps: 1000,
        }
    }
}

macro_rules! config_fields {
    ($m:ident, $int:ident, $real:ident) => {
        $int!($m, vocab_size);
        $int!($m, embed_dim);
        $int!($m, encoder_conv_layers);
        $int!($m, encoder_kernel);
        $int!($m, encoder_rnn_dim);
        $int!($m, attention_dim);
        $int!($m, location_filters);
        $int!($m, location_kernel);
        $int!($m, decoder_rnn_dim);
        $int!($m, prenet_dim);
        $int!($m, n_mels);
        $int!($m, postnet_layers);
        $int!($m, postnet_kernel);
        $int!($m, postnet_dim);
        $real!($m, gate_threshold);
        $real!($m, encoder_dropout);
        $real!($m, decoder_dropout);
        $real!($m, attention_dropout);
        $int!($m, max_decoder_steps);
    };
}

impl ModelConfig {
    pub fn memory_dim(&self) -> usize {
        2 * self.encoder_rnn_dim
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("encoder_kernel", self.encoder_kernel),
            ("encoder_rnn_dim", self.encoder_rnn_dim),
            ("attention_dim", self.attention_dim),
            ("location_filters", self.location_filters),
            ("location_kernel", self.location_kernel),
            ("decoder_rnn_dim", self.decoder_rnn_dim),
            ("prenet_dim", self.prenet_dim),
            ("n_mels", self.n_mels),
            ("postnet_kernel", self.postnet_kernel),
            ("postnet_dim", self.postnet_dim),
            ("max_decoder_steps", self.max_decoder_steps),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be at least 1")));
        }
        for (name, k) in [
            ("encoder_kernel", self.encoder_kernel),
            ("location_kernel", self.location_kernel),
            ("postnet_kernel", self.postnet_kernel),
        ] {
            if k % 2 == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be odd")));
            }
        }
        if !(self.gate_threshold > 0.0 && self.gate_threshold < 1.0) {
            return Err(ModelError::InvalidConfig("gate_threshold must lie in (0, 1)".into()));
        }
        for (name, p) in [
            ("encoder_dropout", self.encoder_dropout),
            ("decoder_dropout", self.decoder_dropout),
            ("attention_dropout", self.attention_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(ModelError::InvalidConfig(format!("{name} must lie in [0, 1)")));
            }
        }
        Ok(())
    }

    /// `model.<field>: <value>` pairs, in declaration order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        macro_rules! int {
            ($m:ident, $f:ident) => {
                out.push((concat!("model.", stringify!($f)).to_string(), $m.$f.to_string()));
            };
        }
        macro_rules! real {
            ($m:ident, $f:ident) => {
                out.push((concat!("model.", stringify!($f)).to_string(), format!("{:?}", $m.$f)));
            };
        }
        config_fields!(self, int, real);
        out
    }

    /// Applies one `<field>` / `model.<field>` override. Returns false when
    /// the key is not a model field.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, ModelError> {
        let key = key.strip_prefix("model.").unwrap_or(key);
        let bad = |k: &str, v: &str| ModelError::InvalidConfig(format!("{k}: cannot parse {v:?}"));
        macro_rules! int {
            ($m:ident, $f:ident) => {
                if key == stringify!($f) {
                    $m.$f = value.trim().parse().map_err(|_| bad(key, value))?;
                    return Ok(true);
                }
            };
        }
        macro_rules! real {
            ($m:ident, $f:ident) => {
                if key == stringify!($f) {
                    $m.$f = value.trim().parse().map_err(|_| bad(key, value))?;
                    return Ok(true);
                }
            };
        }
        config_fields!(self, int, real);
        Ok(false)
    }

    /// Field names that differ between two configs.
    pub fn diff(&self, other: &ModelConfig) -> Vec<String> {
        self.to_pairs()
            .into_iter()
            .zip(other.to_pairs())
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, _)| a.0.trim_start_matches("model.").to_string())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_round_trip() {
        let mut cfg = ModelConfig {
            gate_threshold: 0.25,
            embed_dim: 7,
            ..ModelConfig::default()
        };
        let pairs = cfg.to_pairs();
        let mut back = ModelConfig::default();
        for (k, v) in &pairs {
            assert!(back.set(k, v).unwrap());
        }
        assert_eq!(back, cfg);
        assert!(!cfg.set("lr", "0.1").unwrap());
        assert!(cfg.set("embed_dim", "x").is_err());
    }

    #[test]
    fn regularisation_defaults() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.gate_threshold, 0.4);
        assert_eq!(cfg.decoder_dropout, 0.4);
        assert_eq!(cfg.attention_dropout, 0.4);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_bad_values() {
        let bad = ModelConfig {
            gate_threshold: 1.0,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            location_kernel: 4,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn diff_lists_fields() {
        let a = ModelConfig::default();
        let b = ModelConfig {
            vocab_size: 10,
            prenet_dim: 3,
            ..a.clone()
        };
        assert_eq!(a.diff(&b), vec!["vocab_size", "prenet_dim"]);
    }
}
