//! Recurrent sequence-to-sequence spectrogram predictor with
//! location-sensitive attention and a stop gate.
//!
//! Encoder: embedding → convolution stack (tanh) → bidirectional LSTM.
//! Decoder, per output frame: prenet on the previous frame → attention LSTM
//! → location-sensitive attention over the encoder memory → decoder LSTM →
//! linear projections to one mel frame and one gate logit. A residual
//! convolutional postnet refines the whole predicted spectrogram.
//!
//! Everything runs on the [`crate::autodiff`] tape in f64, so the same code
//! path serves training, inference and gradient checks.

mod config;
mod params;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::corpus::SymbolSequence;
use crate::evaluation::AlignmentMatrix;
use crate::matrix::Matrix;

pub use config::ModelConfig;
pub use params::{init_parameters, parameter_shapes, Parameters, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("symbol id {id} outside vocabulary of {vocab_size}")]
    UnknownSymbol { id: usize, vocab_size: usize },
    #[error("attention state has {found} steps, memory has {expected}")]
    StateMismatch { expected: usize, found: usize },
    #[error("numerical divergence: {0}")]
    NumericalDivergence(String),
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("target spectrogram must have at least one frame of {n_mels} mels, got {rows}×{cols}")]
    BadTarget { n_mels: usize, rows: usize, cols: usize },
}

/// Which dropout layers are live.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    /// Encoder, prenet and attention-input dropout, masks drawn from `seed`.
    Train { seed: u64 },
    /// Prenet dropout only, as at synthesis time.
    Inference { seed: u64 },
    /// No dropout at all.
    Deterministic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DropoutSite {
    Encoder,
    Prenet,
    AttentionInput,
}

/// Previous and cumulative attention weights over encoder steps.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionState {
    pub prev_weights: Vec<f64>,
    pub cum_weights: Vec<f64>,
}

impl AttentionState {
    /// All previous mass on the first encoder step, nothing accumulated.
    pub fn initial(n_enc_steps: usize) -> Self {
        let mut prev = vec![0.0; n_enc_steps];
        if let Some(p) = prev.first_mut() {
            *p = 1.0;
        }
        Self {
            prev_weights: prev,
            cum_weights: vec![0.0; n_enc_steps],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub mse_before: f64,
    pub mse_after: f64,
    pub gate_bce: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput {
    pub mel_before: Matrix,
    pub mel_after: Matrix,
    pub gate_logits: Vec<f64>,
    pub alignment: AlignmentMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    GateFired,
    MaxSteps,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub output: DecoderOutput,
    pub stop_reason: StopReason,
}

/// Gate decision made in logit space so that a probability exactly at the
/// threshold stops decoding.
pub fn gate_fires(logit: f64, threshold: f64) -> bool {
    logit >= (threshold / (1.0 - threshold)).ln()
}

/// Tape plus parameter leaves and dropout randomness for one graph.
struct Graph<'p> {
    tape: Tape,
    params: &'p Parameters,
    cfg: &'p ModelConfig,
    leaves: HashMap<String, Var>,
    mode: RunMode,
    rng: ChaCha8Rng,
}

impl<'p> Graph<'p> {
    fn new(params: &'p Parameters, cfg: &'p ModelConfig, mode: RunMode) -> Self {
        let seed = match mode {
            RunMode::Train { seed } | RunMode::Inference { seed } => seed,
            RunMode::Deterministic => 0,
        };
        Self {
            tape: Tape::new(),
            params,
            cfg,
            leaves: HashMap::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn param(&mut self, name: &str) -> Result<Var, ModelError> {
        if let Some(&v) = self.leaves.get(name) {
            return Ok(v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| ModelError::MissingTensor(name.to_string()))?;
        let v = self.tape.leaf(t.to_matrix());
        self.leaves.insert(name.to_string(), v);
        Ok(v)
    }

    fn constant(&mut self, m: Matrix) -> Var {
        self.tape.leaf(m)
    }

    fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.tape.leaf(Matrix::zeros(rows, cols))
    }

    fn dropout(&mut self, x: Var, site: DropoutSite) -> Var {
        let p = match site {
            DropoutSite::Encoder => self.cfg.encoder_dropout,
            DropoutSite::Prenet => self.cfg.decoder_dropout,
            DropoutSite::AttentionInput => self.cfg.attention_dropout,
        };
        let live = match self.mode {
            RunMode::Train { .. } => true,
            RunMode::Inference { .. } => site == DropoutSite::Prenet,
            RunMode::Deterministic => false,
        };
        if !live || p == 0.0 {
            return x;
        }
        let (r, c) = self.tape.value(x).shape();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..r * c)
            .map(|_| if self.rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let m = self.constant(Matrix::from_vec(r, c, mask));
        self.tape.mul(x, m)
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        let y = self.tape.matmul_t(x, w);
        Ok(self.tape.add_row(y, b))
    }

    /// One LSTM step with gate order input, forget, cell, output.
    fn lstm(&mut self, x: Var, h: Var, c: Var, prefix: &str, hidden: usize) -> Result<(Var, Var), ModelError> {
        let xh = self.tape.concat_cols(&[x, h]);
        let z = self.linear(xh, prefix)?;
        let zi = self.tape.slice_cols(z, 0, hidden);
        let zf = self.tape.slice_cols(z, hidden, 2 * hidden);
        let zg = self.tape.slice_cols(z, 2 * hidden, 3 * hidden);
        let zo = self.tape.slice_cols(z, 3 * hidden, 4 * hidden);
        let i = self.tape.sigmoid(zi);
        let f = self.tape.sigmoid(zf);
        let g = self.tape.tanh(zg);
        let o = self.tape.sigmoid(zo);
        let keep = self.tape.mul(f, c);
        let write = self.tape.mul(i, g);
        let c_next = self.tape.add(keep, write);
        let tc = self.tape.tanh(c_next);
        let h_next = self.tape.mul(o, tc);
        Ok((h_next, c_next))
    }

    fn encode(&mut self, ids: &[usize]) -> Result<Var, ModelError> {
        let cfg = self.cfg;
        if let Some(&id) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
            return Err(ModelError::UnknownSymbol {
                id,
                vocab_size: cfg.vocab_size,
            });
        }
        let table = self.param("embedding.weight")?;
        let mut x = self.tape.gather(table, ids);
        for i in 0..cfg.encoder_conv_layers {
            let k = self.param(&format!("encoder.conv{i}.kernel"))?;
            let b = self.param(&format!("encoder.conv{i}.bias"))?;
            let y = self.tape.conv1d(x, k, Some(b), cfg.encoder_kernel);
            let y = self.tape.tanh(y);
            x = self.dropout(y, DropoutSite::Encoder);
        }
        let h = cfg.encoder_rnn_dim;
        let n = ids.len();
        let mut fwd = Vec::with_capacity(n);
        let (mut hs, mut cs) = (self.zeros(1, h), self.zeros(1, h));
        for t in 0..n {
            let xt = self.tape.row(x, t);
            (hs, cs) = self.lstm(xt, hs, cs, "encoder.lstm_fwd", h)?;
            fwd.push(hs);
        }
        let mut bwd = vec![hs; n];
        let (mut hs, mut cs) = (self.zeros(1, h), self.zeros(1, h));
        for t in (0..n).rev() {
            let xt = self.tape.row(x, t);
            (hs, cs) = self.lstm(xt, hs, cs, "encoder.lstm_bwd", h)?;
            bwd[t] = hs;
        }
        let rows: Vec<Var> = fwd
            .into_iter()
            .zip(bwd)
            .map(|(f, b)| self.tape.concat_cols(&[f, b]))
            .collect();
        Ok(self.tape.stack_rows(&rows))
    }

    /// Location-sensitive attention. Returns (context 1×M, weights 1×N).
    fn attend(
        &mut self,
        query: Var,
        memory: Var,
        processed: Var,
        prev: Var,
        cum: Var,
    ) -> Result<(Var, Var), ModelError> {
        let wq = self.param("attention.query.weight")?;
        let bias = self.param("attention.bias")?;
        let filters = self.param("attention.location.filters")?;
        let proj = self.param("attention.location.proj")?;
        let v = self.param("attention.v")?;

        let q = self.tape.matmul_t(query, wq);
        let q = self.tape.add(q, bias);
        let prev_col = self.tape.transpose(prev);
        let cum_col = self.tape.transpose(cum);
        let loc_in = self.tape.concat_cols(&[prev_col, cum_col]);
        let loc = self.tape.conv1d(loc_in, filters, None, self.cfg.location_kernel);
        let loc = self.tape.matmul_t(loc, proj);
        let pre = self.tape.add(processed, loc);
        let pre = self.tape.add_row(pre, q);
        let act = self.tape.tanh(pre);
        let energies = self.tape.matmul_t(act, v);
        let energies = self.tape.transpose(energies);
        let weights = self.tape.softmax_row(energies);
        let context = self.tape.matmul(weights, memory);
        Ok((context, weights))
    }

    fn process_memory(&mut self, memory: Var) -> Result<Var, ModelError> {
        let wm = self.param("attention.memory.weight")?;
        Ok(self.tape.matmul_t(memory, wm))
    }

    fn postnet(&mut self, mel: Var) -> Result<Var, ModelError> {
        let layers = self.cfg.postnet_layers;
        let mut y = mel;
        for i in 0..layers {
            let k = self.param(&format!("postnet.conv{i}.kernel"))?;
            let b = self.param(&format!("postnet.conv{i}.bias"))?;
            y = self.tape.conv1d(y, k, Some(b), self.cfg.postnet_kernel);
            if i + 1 < layers {
                y = self.tape.tanh(y);
            }
        }
        Ok(if layers == 0 { mel } else { self.tape.add(mel, y) })
    }
}

/// Recurrent state of the decoder between frames.
struct Decoder {
    memory: Var,
    processed: Var,
    attn_h: Var,
    attn_c: Var,
    dec_h: Var,
    dec_c: Var,
    context: Var,
    prev_w: Var,
    cum_w: Var,
}

struct StepOutput {
    mel: Var,
    gate: Var,
    weights: Var,
}

impl Decoder {
    fn new(g: &mut Graph, memory: Var) -> Result<Self, ModelError> {
        let n = g.tape.value(memory).rows();
        let r = g.cfg.decoder_rnn_dim;
        let m = g.cfg.memory_dim();
        let processed = g.process_memory(memory)?;
        let init = AttentionState::initial(n);
        Ok(Self {
            memory,
            processed,
            attn_h: g.zeros(1, r),
            attn_c: g.zeros(1, r),
            dec_h: g.zeros(1, r),
            dec_c: g.zeros(1, r),
            context: g.zeros(1, m),
            prev_w: g.constant(Matrix::from_vec(1, n, init.prev_weights)),
            cum_w: g.constant(Matrix::from_vec(1, n, init.cum_weights)),
        })
    }

    fn step(&mut self, g: &mut Graph, prev_frame: Var) -> Result<StepOutput, ModelError> {
        let r = g.cfg.decoder_rnn_dim;
        let x = g.linear(prev_frame, "decoder.prenet0")?;
        let x = g.tape.relu(x);
        let x = g.dropout(x, DropoutSite::Prenet);
        let x = g.linear(x, "decoder.prenet1")?;
        let x = g.tape.relu(x);
        let x = g.dropout(x, DropoutSite::Prenet);

        let attn_in = g.tape.concat_cols(&[x, self.context]);
        let attn_in = g.dropout(attn_in, DropoutSite::AttentionInput);
        (self.attn_h, self.attn_c) = g.lstm(attn_in, self.attn_h, self.attn_c, "decoder.attention_rnn", r)?;

        let (context, weights) = g.attend(self.attn_h, self.memory, self.processed, self.prev_w, self.cum_w)?;
        self.context = context;
        self.prev_w = weights;
        self.cum_w = g.tape.add(self.cum_w, weights);

        let dec_in = g.tape.concat_cols(&[self.attn_h, context]);
        (self.dec_h, self.dec_c) = g.lstm(dec_in, self.dec_h, self.dec_c, "decoder.rnn", r)?;
        let out = g.tape.concat_cols(&[self.dec_h, context]);
        let mel = g.linear(out, "decoder.proj")?;
        let gate = g.linear(out, "decoder.gate")?;
        Ok(StepOutput { mel, gate, weights })
    }
}

fn rows_to_matrix(tape: &Tape, rows: &[Var]) -> Matrix {
    let data: Vec<Vec<f64>> = rows.iter().map(|&v| tape.value(v).as_slice().to_vec()).collect();
    Matrix::from_rows(&data)
}

/// Loss terms of one utterance, each already divided by the batch-level
/// denominators.
struct TeacherForced {
    total: Var,
    sse_before: f64,
    sse_after: f64,
    bce: f64,
    output: DecoderOutput,
}

fn build_teacher_forced(
    g: &mut Graph,
    symbols: &SymbolSequence,
    target: &Matrix,
    mel_norm: f64,
    gate_norm: f64,
) -> Result<TeacherForced, ModelError> {
    let n_mels = g.cfg.n_mels;
    if target.rows() == 0 || target.cols() != n_mels {
        return Err(ModelError::BadTarget {
            n_mels,
            rows: target.rows(),
            cols: target.cols(),
        });
    }
    let memory = g.encode(symbols.ids())?;
    let mut dec = Decoder::new(g, memory)?;
    let frames = target.rows();
    let (mut mels, mut gates, mut weights) = (Vec::new(), Vec::new(), Vec::new());
    let mut prev = g.zeros(1, n_mels);
    for t in 0..frames {
        let out = dec.step(g, prev)?;
        mels.push(out.mel);
        gates.push(out.gate);
        weights.push(out.weights);
        prev = g.constant(Matrix::from_vec(1, n_mels, target.row(t).to_vec()));
    }
    let mel_before = g.tape.stack_rows(&mels);
    let mel_after = g.postnet(mel_before)?;
    let gate_col = g.tape.stack_rows(&gates);
    let mut gate_targets = vec![0.0; frames];
    gate_targets[frames - 1] = 1.0;

    let sse_b = g.tape.sum_squared_error(mel_before, target);
    let sse_a = g.tape.sum_squared_error(mel_after, target);
    let bce = g.tape.bce_with_logits_sum(gate_col, &gate_targets);
    let mel_sum = g.tape.add(sse_b, sse_a);
    let mel_term = g.tape.scale(mel_sum, 1.0 / mel_norm);
    let gate_term = g.tape.scale(bce, 1.0 / gate_norm);
    let total = g.tape.add(mel_term, gate_term);

    let output = DecoderOutput {
        mel_before: g.tape.value(mel_before).clone(),
        mel_after: g.tape.value(mel_after).clone(),
        gate_logits: g.tape.value(gate_col).as_slice().to_vec(),
        alignment: AlignmentMatrix::new(rows_to_matrix(&g.tape, &weights))
            .map_err(|e| ModelError::NumericalDivergence(e.to_string()))?,
    };
    let tf = TeacherForced {
        total,
        sse_before: g.tape.scalar(sse_b),
        sse_after: g.tape.scalar(sse_a),
        bce: g.tape.scalar(bce),
        output,
    };
    if !g.tape.scalar(total).is_finite() {
        return Err(ModelError::NumericalDivergence("non-finite loss".into()));
    }
    Ok(tf)
}

fn breakdown(sse_b: f64, sse_a: f64, bce: f64, mel_norm: f64, gate_norm: f64) -> LossBreakdown {
    let mse_before = sse_b / mel_norm;
    let mse_after = sse_a / mel_norm;
    let gate_bce = bce / gate_norm;
    LossBreakdown {
        mse_before,
        mse_after,
        gate_bce,
        total: mse_before + mse_after + gate_bce,
    }
}

fn collect_gradients(g: &Graph, grads: &mut crate::autodiff::Gradients) -> Parameters {
    let mut out = g.params.zeros_like();
    for (name, &var) in &g.leaves {
        if let (Some(m), Some(t)) = (grads.take(var), out.get_mut(name)) {
            t.data = m.into_vec();
        }
    }
    out
}

/// Encoder memory, n_symbols × 2·encoder_rnn_dim.
pub fn encode(
    symbols: &SymbolSequence,
    params: &Parameters,
    cfg: &ModelConfig,
    mode: RunMode,
) -> Result<Matrix, ModelError> {
    let mut g = Graph::new(params, cfg, mode);
    let memory = g.encode(symbols.ids())?;
    Ok(g.tape.value(memory).clone())
}

/// One attention step from a decoder query. Returns (context, weights).
pub fn attention_step(
    query: &[f64],
    memory: &Matrix,
    state: &AttentionState,
    params: &Parameters,
    cfg: &ModelConfig,
) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    let n = memory.rows();
    for len in [state.prev_weights.len(), state.cum_weights.len()] {
        if len != n {
            return Err(ModelError::StateMismatch {
                expected: n,
                found: len,
            });
        }
    }
    let mut g = Graph::new(params, cfg, RunMode::Deterministic);
    let q = g.constant(Matrix::from_vec(1, query.len(), query.to_vec()));
    let mem = g.constant(memory.clone());
    let processed = g.process_memory(mem)?;
    let prev = g.constant(Matrix::from_vec(1, n, state.prev_weights.clone()));
    let cum = g.constant(Matrix::from_vec(1, n, state.cum_weights.clone()));
    let (ctx, w) = g.attend(q, mem, processed, prev, cum)?;
    Ok((g.tape.value(ctx).as_slice().to_vec(), g.tape.value(w).as_slice().to_vec()))
}

/// Teacher-forced decode of one utterance with its loss.
pub fn forward_teacher_forced(
    symbols: &SymbolSequence,
    target: &Matrix,
    params: &Parameters,
    cfg: &ModelConfig,
    mode: RunMode,
) -> Result<(DecoderOutput, LossBreakdown), ModelError> {
    let mut g = Graph::new(params, cfg, mode);
    let mel_norm = (target.rows() * cfg.n_mels) as f64;
    let gate_norm = target.rows() as f64;
    let tf = build_teacher_forced(&mut g, symbols, target, mel_norm.max(1.0), gate_norm.max(1.0))?;
    let loss = breakdown(tf.sse_before, tf.sse_after, tf.bce, mel_norm, gate_norm);
    Ok((tf.output, loss))
}

/// Loss and its gradient with respect to every parameter for one utterance.
pub fn backward(
    symbols: &SymbolSequence,
    target: &Matrix,
    params: &Parameters,
    cfg: &ModelConfig,
    mode: RunMode,
) -> Result<(LossBreakdown, Parameters), ModelError> {
    batch_gradients(&[(symbols, target)], params, cfg, mode)
}

fn item_mode(mode: RunMode, index: usize) -> RunMode {
    let mix = |seed: u64| seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    match mode {
        RunMode::Train { seed } => RunMode::Train { seed: mix(seed) },
        RunMode::Inference { seed } => RunMode::Inference { seed: mix(seed) },
        RunMode::Deterministic => RunMode::Deterministic,
    }
}

/// Mean loss over a batch and its gradient. MSE terms are normalised by
/// the total number of target cells and the gate term by the total number
/// of frames, which is what padding with masked losses would give.
/// Utterances are processed in parallel; gradients are summed in input
/// order.
pub fn batch_gradients(
    items: &[(&SymbolSequence, &Matrix)],
    params: &Parameters,
    cfg: &ModelConfig,
    mode: RunMode,
) -> Result<(LossBreakdown, Parameters), ModelError> {
    let frames: usize = items.iter().map(|(_, t)| t.rows()).sum();
    let mel_norm = (frames * cfg.n_mels).max(1) as f64;
    let gate_norm = frames.max(1) as f64;
    let per_item: Vec<((f64, f64, f64), Parameters)> = items
        .par_iter()
        .enumerate()
        .map(|(i, (symbols, target))| {
            let mut g = Graph::new(params, cfg, item_mode(mode, i));
            let tf = build_teacher_forced(&mut g, symbols, target, mel_norm, gate_norm)?;
            let mut grads = g.tape.backward(tf.total);
            let grads = collect_gradients(&g, &mut grads);
            Ok(((tf.sse_before, tf.sse_after, tf.bce), grads))
        })
        .collect::<Result<_, ModelError>>()?;
    let mut total_grad = params.zeros_like();
    let (mut sb, mut sa, mut bce) = (0.0, 0.0, 0.0);
    for ((b, a, c), grad) in &per_item {
        sb += b;
        sa += a;
        bce += c;
        total_grad.add_assign(grad);
    }
    if !total_grad.all_finite() {
        return Err(ModelError::NumericalDivergence("non-finite gradient".into()));
    }
    Ok((breakdown(sb, sa, bce, mel_norm, gate_norm), total_grad))
}

/// Autoregressive synthesis: each step consumes its own previous frame
/// (before the postnet) and decoding stops at the first step whose gate
/// probability reaches `gate_threshold`, or after `max_decoder_steps`.
pub fn infer(
    symbols: &SymbolSequence,
    params: &Parameters,
    cfg: &ModelConfig,
    mode: RunMode,
) -> Result<Inference, ModelError> {
    let mut g = Graph::new(params, cfg, mode);
    let memory = g.encode(symbols.ids())?;
    let mut dec = Decoder::new(&mut g, memory)?;
    let n_mels = cfg.n_mels;
    let (mut mels, mut gates, mut weights) = (Vec::new(), Vec::new(), Vec::new());
    let mut prev = g.zeros(1, n_mels);
    let mut stop_reason = StopReason::MaxSteps;
    for _ in 0..cfg.max_decoder_steps.max(1) {
        let out = dec.step(&mut g, prev)?;
        let frame = g.tape.value(out.mel).clone();
        let logit = g.tape.scalar(out.gate);
        if !logit.is_finite() || frame.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NumericalDivergence("non-finite decoder output".into()));
        }
        mels.push(out.mel);
        gates.push(out.gate);
        weights.push(out.weights);
        if gate_fires(logit, cfg.gate_threshold) {
            stop_reason = StopReason::GateFired;
            break;
        }
        prev = g.constant(frame);
    }
    let mel_before = g.tape.stack_rows(&mels);
    let mel_after = g.postnet(mel_before)?;
    let gate_col = g.tape.stack_rows(&gates);
    Ok(Inference {
        output: DecoderOutput {
            mel_before: g.tape.value(mel_before).clone(),
            mel_after: g.tape.value(mel_after).clone(),
            gate_logits: g.tape.value(gate_col).as_slice().to_vec(),
            alignment: AlignmentMatrix::new(rows_to_matrix(&g.tape, &weights))
                .map_err(|e| ModelError::NumericalDivergence(e.to_string()))?,
        },
        stop_reason,
    })
}

#[cfg(test)]
mod tests;
