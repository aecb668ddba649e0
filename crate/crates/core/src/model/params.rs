use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::matrix::Matrix;
use crate::model::{ModelConfig, ModelError};

/// An n-dimensional tensor stored flat in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    /// 2-D view: first axis by the product of the rest. Vectors become a
    /// single row.
    pub fn to_matrix(&self) -> Matrix {
        let (r, c) = match self.shape.as_slice() {
            [n] => (1, *n),
            [r, rest @ ..] => (*r, rest.iter().product()),
            [] => (1, 1),
        };
        Matrix::from_vec(r, c, self.data.clone())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Named tensors, also used for gradients of the same names and shapes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Parameters {
    tensors: BTreeMap<String, Tensor>,
}

impl Parameters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Zero tensors with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(&t.shape)))
                .collect(),
        }
    }

    /// Global L2 norm over every value.
    pub fn global_norm(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.tensors.values_mut() {
            t.data.iter_mut().for_each(|v| *v *= c);
        }
    }

    /// Adds `other` in place. Names missing from `self` are inserted.
    pub fn add_assign(&mut self, other: &Parameters) {
        for (k, t) in &other.tensors {
            match self.tensors.get_mut(k) {
                Some(mine) => {
                    for (a, b) in mine.data.iter_mut().zip(&t.data) {
                        *a += b;
                    }
                }
                None => {
                    self.tensors.insert(k.clone(), t.clone());
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Checks names and shapes against the layout `cfg` implies and that
    /// every value is finite.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        for (name, shape) in parameter_shapes(cfg) {
            let t = self.get(&name).ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
            if t.shape != shape {
                return Err(ModelError::ShapeMismatch {
                    name,
                    expected: shape,
                    found: t.shape.clone(),
                });
            }
        }
        if !self.all_finite() {
            return Err(ModelError::NumericalDivergence("non-finite parameter".into()));
        }
        Ok(())
    }
}

/// Every trainable tensor of the model with its shape, in a fixed order.
pub fn parameter_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let e = cfg.embed_dim;
    let h = cfg.encoder_rnn_dim;
    let m = cfg.memory_dim();
    let r = cfg.decoder_rnn_dim;
    let a = cfg.attention_dim;
    let p = cfg.prenet_dim;
    let n = cfg.n_mels;
    let mut out: Vec<(String, Vec<usize>)> = vec![("embedding.weight".into(), vec![cfg.vocab_size, e])];
    for i in 0..cfg.encoder_conv_layers {
        out.push((format!("encoder.conv{i}.kernel"), vec![e, e, cfg.encoder_kernel]));
        out.push((format!("encoder.conv{i}.bias"), vec![e]));
    }
    for dir in ["fwd", "bwd"] {
        out.push((format!("encoder.lstm_{dir}.weight"), vec![4 * h, e + h]));
        out.push((format!("encoder.lstm_{dir}.bias"), vec![4 * h]));
    }
    out.extend([
        ("decoder.prenet0.weight".into(), vec![p, n]),
        ("decoder.prenet0.bias".into(), vec![p]),
        ("decoder.prenet1.weight".into(), vec![p, p]),
        ("decoder.prenet1.bias".into(), vec![p]),
        ("decoder.attention_rnn.weight".into(), vec![4 * r, p + m + r]),
        ("decoder.attention_rnn.bias".into(), vec![4 * r]),
        ("attention.query.weight".into(), vec![a, r]),
        ("attention.memory.weight".into(), vec![a, m]),
        ("attention.location.filters".into(), vec![cfg.location_filters, 2, cfg.location_kernel]),
        ("attention.location.proj".into(), vec![a, cfg.location_filters]),
        ("attention.bias".into(), vec![a]),
        ("attention.v".into(), vec![a]),
        ("decoder.rnn.weight".into(), vec![4 * r, r + m + r]),
        ("decoder.rnn.bias".into(), vec![4 * r]),
        ("decoder.proj.weight".into(), vec![n, r + m]),
        ("decoder.proj.bias".into(), vec![n]),
        ("decoder.gate.weight".into(), vec![1, r + m]),
        ("decoder.gate.bias".into(), vec![1]),
    ]);
    for i in 0..cfg.postnet_layers {
        let c_in = if i == 0 { n } else { cfg.postnet_dim };
        let c_out = if i + 1 == cfg.postnet_layers { n } else { cfg.postnet_dim };
        out.push((format!("postnet.conv{i}.kernel"), vec![c_out, c_in, cfg.postnet_kernel]));
        out.push((format!("postnet.conv{i}.bias"), vec![c_out]));
    }
    out
}

/// Seeded initialisation: Glorot-uniform weights, zero biases except the
/// LSTM forget gates (1.0).
pub fn init_parameters(cfg: &ModelConfig, seed: u64) -> Result<Parameters, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Parameters::new();
    for (name, shape) in parameter_shapes(cfg) {
        let mut t = Tensor::zeros(&shape);
        let is_rnn_bias = name.ends_with("lstm_fwd.bias")
            || name.ends_with("lstm_bwd.bias")
            || name.ends_with("rnn.bias");
        if is_rnn_bias {
            let hidden = shape[0] / 4;
            t.data[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        } else if !name.ends_with(".bias") {
            let (fan_out, fan_in) = match shape.as_slice() {
                [n] => (*n, *n),
                [o, rest @ ..] => (*o, rest.iter().product()),
                [] => (1, 1),
            };
            let receptive = if shape.len() == 3 { shape[2] } else { 1 };
            let limit = (6.0 / (fan_in + fan_out * receptive) as f64).sqrt();
            for v in t.data.iter_mut() {
                *v = rng.random_range(-limit..limit);
            }
        }
        params.insert(name, t);
    }
    Ok(params)
}
