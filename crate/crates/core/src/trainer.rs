//! Optimisation loop: Adam with decoupled weight decay, global-norm
//! clipping, plateau learning-rate annealing and periodic validation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::SymbolSequence;
use crate::matrix::Matrix;
use crate::model::{self, ModelConfig, ModelError, Parameters, RunMode};

/// Lowest learning rate annealing can reach.
pub const MIN_LR: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("numerical divergence: {0}")]
    NumericalDivergence(String),
    #[error("optimizer state does not match parameter {0}")]
    StateMismatch(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub numerical_eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 4e-5,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-5,
            numerical_eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.weight_decay >= 0.0
            && self.numerical_eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(TrainError::InvalidConfig(format!("bad Adam settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnealConfig {
    pub factor: f64,
    pub patience_validations: usize,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        Self {
            factor: 0.5,
            patience_validations: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip_norm: f64,
    pub anneal: AnnealConfig,
    pub validation_interval_iters: u64,
    pub seed: u64,
    /// Stops early once this many iterations have run.
    pub max_iterations: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 430,
            batch_size: 8,
            grad_clip_norm: 1.0,
            anneal: AnnealConfig::default(),
            validation_interval_iters: 100,
            seed: 0,
            max_iterations: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 || self.validation_interval_iters == 0 {
            return Err(TrainError::InvalidConfig(
                "epochs, batch_size and validation_interval_iters must be at least 1".into(),
            ));
        }
        if !(self.anneal.factor > 0.0 && self.anneal.factor < 1.0) {
            return Err(TrainError::InvalidConfig("anneal factor must lie in (0, 1)".into()));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(TrainError::InvalidConfig("grad_clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Adam moments for every parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Parameters,
    pub v: Parameters,
}

impl OptimizerState {
    pub fn new(params: &Parameters) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub iteration: u64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

/// One Adam update. Weight decay is applied to the parameters before the
/// moment update, independent of the gradient.
pub fn adam_step(
    params: &mut Parameters,
    grads: &Parameters,
    state: &mut OptimizerState,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    if !grads.all_finite() {
        return Err(TrainError::NumericalDivergence("non-finite gradient".into()));
    }
    let step = state.step + 1;
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).ok_or_else(|| TrainError::StateMismatch(name.clone()))?;
        let m = state.m.get_mut(name).ok_or_else(|| TrainError::StateMismatch(name.clone()))?;
        let v = state.v.get_mut(name).ok_or_else(|| TrainError::StateMismatch(name.clone()))?;
        if g.data.len() != p.data.len() || m.data.len() != p.data.len() || v.data.len() != p.data.len() {
            return Err(TrainError::StateMismatch(name.clone()));
        }
        for i in 0..p.data.len() {
            p.data[i] -= cfg.lr * cfg.weight_decay * p.data[i];
            m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * g.data[i];
            v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * g.data[i] * g.data[i];
            let m_hat = m.data[i] / bc1;
            let v_hat = v.data[i] / bc2;
            p.data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.numerical_eps);
        }
    }
    state.step = step;
    Ok(())
}

/// Rescales `grads` so its global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Parameters, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Plateau annealing: after `patience_validations` consecutive validations
/// without a new best, the rate is multiplied by `factor`.
#[derive(Debug, Clone, PartialEq)]
pub struct LrScheduler {
    lr: f64,
    best: Option<f64>,
    stale: usize,
    cfg: AnnealConfig,
}

impl LrScheduler {
    pub fn new(lr: f64, cfg: AnnealConfig) -> Self {
        Self {
            lr,
            best: None,
            stale: 0,
            cfg,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feeds one validation loss and returns the rate to use from now on.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        match self.best {
            Some(b) if val_loss >= b => {
                self.stale += 1;
                if self.stale >= self.cfg.patience_validations {
                    self.lr = (self.lr * self.cfg.factor).max(MIN_LR);
                    self.stale = 0;
                }
            }
            _ => {
                self.best = Some(val_loss);
                self.stale = 0;
            }
        }
        self.lr
    }
}

/// Learning rate after replaying every validation loss in `records`.
pub fn anneal_lr(initial_lr: f64, records: &[LossRecord], cfg: &AnnealConfig) -> f64 {
    let mut s = LrScheduler::new(initial_lr, cfg.clone());
    for v in records.iter().filter_map(|r| r.val_loss) {
        s.observe(v);
    }
    s.lr()
}

/// One utterance ready for training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub id: String,
    pub symbols: SymbolSequence,
    /// Target log-mel frames × n_mels.
    pub mel: Matrix,
}

/// Seeded 90/10 split into (train, validation) indices. Corpora with fewer
/// than two items get no validation set.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = if n < 2 { 0 } else { ((n as f64 * 0.1).round() as usize).max(1) };
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Frame-weighted mean loss of `items` with dropout off.
pub fn evaluate_loss(items: &[&TrainItem], params: &Parameters, cfg: &ModelConfig) -> Result<f64, TrainError> {
    let (mut mel_sse, mut bce, mut frames) = (0.0, 0.0, 0usize);
    for item in items {
        let (_, loss) = model::forward_teacher_forced(&item.symbols, &item.mel, params, cfg, RunMode::Deterministic)?;
        let t = item.mel.rows();
        mel_sse += (loss.mse_before + loss.mse_after) * (t * cfg.n_mels) as f64;
        bce += loss.gate_bce * t as f64;
        frames += t;
    }
    if frames == 0 {
        return Err(TrainError::EmptyDataset);
    }
    Ok(mel_sse / (frames * cfg.n_mels) as f64 + bce / frames as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub enum StopCause {
    Completed,
    MaxIterations,
    Diverged(String),
    Observer,
}

/// What the observer sees after each iteration.
pub struct Progress<'a> {
    pub record: &'a LossRecord,
    pub params: &'a Parameters,
    /// Set when this iteration's validation loss is a new best.
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the last successful update.
    pub params: Parameters,
    pub optimizer: OptimizerState,
    /// Parameters at the best validation loss, if any validation ran.
    pub best: Option<(u64, f64, Parameters)>,
    pub records: Vec<LossRecord>,
    pub stop: StopCause,
}

/// Mini-batch training. The observer runs after every iteration and may
/// stop training by returning `false`. A divergent step ends training with
/// the parameters from before that step.
pub fn fit(
    items: &[TrainItem],
    params: Parameters,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    adam_cfg: &AdamConfig,
    optimizer: Option<OptimizerState>,
    mut observer: impl FnMut(&Progress) -> bool,
) -> Result<TrainOutcome, TrainError> {
    if items.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    train_cfg.validate()?;
    adam_cfg.validate()?;
    model_cfg.validate()?;
    params.validate(model_cfg)?;

    let (mut train_idx, val_idx) = split_indices(items.len(), train_cfg.seed);
    let val: Vec<&TrainItem> = val_idx.iter().map(|&i| &items[i]).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed.wrapping_add(1));
    let mut optimizer = optimizer.unwrap_or_else(|| OptimizerState::new(&params));
    let mut params = params;
    let mut sched = LrScheduler::new(adam_cfg.lr, train_cfg.anneal.clone());
    let mut records = Vec::new();
    let mut best: Option<(u64, f64, Parameters)> = None;
    let mut iteration = 0u64;

    let stop = 'outer: {
        for _ in 0..train_cfg.epochs {
            train_idx.shuffle(&mut shuffle_rng);
            for batch in train_idx.chunks(train_cfg.batch_size) {
                if train_cfg.max_iterations.is_some_and(|m| iteration >= m) {
                    break 'outer StopCause::MaxIterations;
                }
                iteration += 1;
                let pairs: Vec<(&SymbolSequence, &Matrix)> =
                    batch.iter().map(|&i| (&items[i].symbols, &items[i].mel)).collect();
                let mode = RunMode::Train {
                    seed: train_cfg.seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(iteration),
                };
                let (loss, mut grads) = match model::batch_gradients(&pairs, &params, model_cfg, mode) {
                    Ok(v) => v,
                    Err(ModelError::NumericalDivergence(m)) => break 'outer StopCause::Diverged(m),
                    Err(e) => return Err(e.into()),
                };
                clip_global_norm(&mut grads, train_cfg.grad_clip_norm);
                let lr = sched.lr();
                let step_cfg = AdamConfig { lr, ..adam_cfg.clone() };
                let mut next = params.clone();
                let mut next_opt = optimizer.clone();
                if let Err(e) = adam_step(&mut next, &grads, &mut next_opt, &step_cfg) {
                    break 'outer StopCause::Diverged(e.to_string());
                }
                if !next.all_finite() {
                    break 'outer StopCause::Diverged("non-finite parameter after update".into());
                }
                params = next;
                optimizer = next_opt;

                let mut record = LossRecord {
                    iteration,
                    train_loss: loss.total,
                    val_loss: None,
                    lr,
                };
                let mut improved = false;
                if !val.is_empty() && iteration % train_cfg.validation_interval_iters == 0 {
                    let v = match evaluate_loss(&val, &params, model_cfg) {
                        Ok(v) => v,
                        Err(TrainError::Model(ModelError::NumericalDivergence(m))) => {
                            break 'outer StopCause::Diverged(m)
                        }
                        Err(e) => return Err(e),
                    };
                    record.val_loss = Some(v);
                    sched.observe(v);
                    if best.as_ref().is_none_or(|b| v < b.1) {
                        best = Some((iteration, v, params.clone()));
                        improved = true;
                    }
                }
                let keep_going = observer(&Progress {
                    record: &record,
                    params: &params,
                    improved,
                });
                records.push(record);
                if !keep_going {
                    break 'outer StopCause::Observer;
                }
            }
        }
        StopCause::Completed
    };
    Ok(TrainOutcome {
        params,
        optimizer,
        best,
        records,
        stop,
    })
}
