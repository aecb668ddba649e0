//! Mel-conditioned normalizing flow over groups of audio samples.
//!
//! Each step applies an invertible linear mix across the samples of a group
//! followed by an affine coupling: the first half of the group, together
//! with the mel condition, predicts a log-scale and a shift for the second
//! half.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{log_abs_det_and_inverse, Tape, Var};
use crate::matrix::Matrix;
use crate::model::{Parameters, Tensor};
use crate::vocoder::VocoderError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowConfig {
    pub n_flows: usize,
    pub group_size: usize,
    pub coupling_hidden: usize,
    pub mel_cond_dim: usize,
    pub sigma: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            n_flows: 4,
            group_size: 8,
            coupling_hidden: 32,
            mel_cond_dim: 80,
            sigma: 1.0,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<(), VocoderError> {
        if self.group_size < 2 || self.group_size % 2 != 0 {
            return Err(VocoderError::InvalidConfig("group_size must be even and at least 2".into()));
        }
        if self.n_flows == 0 || self.coupling_hidden == 0 {
            return Err(VocoderError::InvalidConfig("n_flows and coupling_hidden must be at least 1".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(VocoderError::InvalidConfig("sigma must be positive".into()));
        }
        Ok(())
    }

    fn half(&self) -> usize {
        self.group_size / 2
    }
}

/// One mixing + coupling step. Biases are 1×n rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowStep {
    pub mix: Matrix,
    pub w_in: Matrix,
    pub b_in: Matrix,
    pub w_scale: Matrix,
    pub b_scale: Matrix,
    pub w_shift: Matrix,
    pub b_shift: Matrix,
}

const STEP_FIELDS: [&str; 7] = ["mix", "w_in", "b_in", "w_scale", "b_scale", "w_shift", "b_shift"];

impl FlowStep {
    fn fields(&self) -> [&Matrix; 7] {
        [&self.mix, &self.w_in, &self.b_in, &self.w_scale, &self.b_scale, &self.w_shift, &self.b_shift]
    }

    fn fields_mut(&mut self) -> [&mut Matrix; 7] {
        [
            &mut self.mix,
            &mut self.w_in,
            &mut self.b_in,
            &mut self.w_scale,
            &mut self.b_scale,
            &mut self.w_shift,
            &mut self.b_shift,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowParams {
    pub steps: Vec<FlowStep>,
}

/// Gradients share the parameter layout.
pub type FlowGrads = FlowParams;

fn random_rotation(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut q = g.qr().q();
    if q.determinant() < 0.0 {
        q.column_mut(0).neg_mut();
    }
    Matrix::from_vec(n, n, (0..n * n).map(|i| q[(i / n, i % n)]).collect())
}

impl FlowParams {
    /// Identity mixes and zero coupling outputs: the flow is the identity map.
    pub fn identity(cfg: &FlowConfig) -> Result<Self, VocoderError> {
        cfg.validate()?;
        let (g, h, half, c) = (cfg.group_size, cfg.coupling_hidden, cfg.half(), cfg.mel_cond_dim);
        let mut mix = Matrix::zeros(g, g);
        for i in 0..g {
            mix[(i, i)] = 1.0;
        }
        let step = FlowStep {
            mix,
            w_in: Matrix::zeros(h, half + c),
            b_in: Matrix::zeros(1, h),
            w_scale: Matrix::zeros(half, h),
            b_scale: Matrix::zeros(1, half),
            w_shift: Matrix::zeros(half, h),
            b_shift: Matrix::zeros(1, half),
        };
        Ok(Self {
            steps: vec![step; cfg.n_flows],
        })
    }

    /// Random rotations (det +1) and uniform coupling weights scaled by
    /// fan-in.
    pub fn random(cfg: &FlowConfig, seed: u64) -> Result<Self, VocoderError> {
        let mut p = Self::identity(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for step in &mut p.steps {
            step.mix = random_rotation(cfg.group_size, &mut rng);
            for m in step.fields_mut().into_iter().skip(1) {
                let a = 1.0 / (m.cols() as f64).sqrt();
                m.as_mut_slice().iter_mut().for_each(|v| *v = rng.random_range(-a..a));
            }
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for s in &mut z.steps {
            for m in s.fields_mut() {
                m.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        z
    }

    pub fn to_parameters(&self) -> Parameters {
        let mut out = Parameters::new();
        for (k, s) in self.steps.iter().enumerate() {
            for (field, m) in STEP_FIELDS.iter().zip(s.fields()) {
                out.insert(
                    format!("flow.{k}.{field}"),
                    Tensor {
                        shape: vec![m.rows(), m.cols()],
                        data: m.as_slice().to_vec(),
                    },
                );
            }
        }
        out
    }

    pub fn from_parameters(p: &Parameters, cfg: &FlowConfig) -> Result<Self, VocoderError> {
        let mut out = Self::identity(cfg)?;
        for (k, s) in out.steps.iter_mut().enumerate() {
            for (field, m) in STEP_FIELDS.iter().zip(s.fields_mut()) {
                let name = format!("flow.{k}.{field}");
                let t = p.get(&name).ok_or_else(|| VocoderError::ShapeMismatch(format!("missing {name}")))?;
                if t.shape != [m.rows(), m.cols()] {
                    return Err(VocoderError::ShapeMismatch(format!("{name} has shape {:?}", t.shape)));
                }
                m.as_mut_slice().copy_from_slice(&t.data);
            }
        }
        Ok(out)
    }
}

fn check_shapes(x: &Matrix, cond: &Matrix, params: &FlowParams, cfg: &FlowConfig) -> Result<(), VocoderError> {
    cfg.validate()?;
    if x.cols() != cfg.group_size || x.rows() == 0 {
        return Err(VocoderError::ShapeMismatch(format!(
            "audio groups are {}×{}, expected T×{}",
            x.rows(),
            x.cols(),
            cfg.group_size
        )));
    }
    if cond.shape() != (x.rows(), cfg.mel_cond_dim) {
        return Err(VocoderError::ShapeMismatch(format!(
            "condition is {}×{}, expected {}×{}",
            cond.rows(),
            cond.cols(),
            x.rows(),
            cfg.mel_cond_dim
        )));
    }
    if params.steps.len() != cfg.n_flows {
        return Err(VocoderError::ShapeMismatch(format!(
            "{} flow steps, config says {}",
            params.steps.len(),
            cfg.n_flows
        )));
    }
    Ok(())
}

fn split(x: &Matrix, half: usize) -> (Matrix, Matrix) {
    let t = x.rows();
    let mut a = Matrix::zeros(t, half);
    let mut b = Matrix::zeros(t, x.cols() - half);
    for r in 0..t {
        a.row_mut(r).copy_from_slice(&x.row(r)[..half]);
        b.row_mut(r).copy_from_slice(&x.row(r)[half..]);
    }
    (a, b)
}

fn join(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), a.cols() + b.cols());
    for r in 0..a.rows() {
        let row = out.row_mut(r);
        row[..a.cols()].copy_from_slice(a.row(r));
        row[a.cols()..].copy_from_slice(b.row(r));
    }
    out
}

/// x·Wᵀ + b for a 1×n bias row.
fn affine(x: &Matrix, w: &Matrix, b: &Matrix) -> Matrix {
    let mut y = x.matmul(&w.transpose());
    for r in 0..y.rows() {
        for (v, bb) in y.row_mut(r).iter_mut().zip(b.as_slice()) {
            *v += bb;
        }
    }
    y
}

/// (log-scale, shift) predicted from the untouched half and the condition.
fn coupling(xa: &Matrix, cond: &Matrix, s: &FlowStep) -> (Matrix, Matrix) {
    let h = affine(&join(xa, cond), &s.w_in, &s.b_in).map(f64::tanh);
    (affine(&h, &s.w_scale, &s.b_scale), affine(&h, &s.w_shift, &s.b_shift))
}

/// Audio → latent. Returns `z` and the total log-determinant.
pub fn flow_forward(
    x: &Matrix,
    cond: &Matrix,
    params: &FlowParams,
    cfg: &FlowConfig,
) -> Result<(Matrix, f64), VocoderError> {
    check_shapes(x, cond, params, cfg)?;
    let t = x.rows() as f64;
    let mut x = x.clone();
    let mut log_det = 0.0;
    for (k, s) in params.steps.iter().enumerate() {
        let (ld, _) = log_abs_det_and_inverse(&s.mix).ok_or(VocoderError::SingularTransform(k))?;
        x = x.matmul(&s.mix.transpose());
        log_det += t * ld;
        let (xa, xb) = split(&x, cfg.half());
        let (log_s, shift) = coupling(&xa, cond, s);
        let mut yb = xb;
        for ((y, ls), sh) in yb.as_mut_slice().iter_mut().zip(log_s.as_slice()).zip(shift.as_slice()) {
            *y = *y * ls.exp() + sh;
        }
        log_det += log_s.as_slice().iter().sum::<f64>();
        x = join(&xa, &yb);
    }
    Ok((x, log_det))
}

/// Latent → audio; the exact inverse of [`flow_forward`].
pub fn flow_inverse(z: &Matrix, cond: &Matrix, params: &FlowParams, cfg: &FlowConfig) -> Result<Matrix, VocoderError> {
    check_shapes(z, cond, params, cfg)?;
    let mut x = z.clone();
    for (k, s) in params.steps.iter().enumerate().rev() {
        let (_, inv) = log_abs_det_and_inverse(&s.mix).ok_or(VocoderError::SingularTransform(k))?;
        let (xa, yb) = split(&x, cfg.half());
        let (log_s, shift) = coupling(&xa, cond, s);
        let mut xb = yb;
        for ((v, ls), sh) in xb.as_mut_slice().iter_mut().zip(log_s.as_slice()).zip(shift.as_slice()) {
            *v = (*v - sh) * (-ls).exp();
        }
        x = join(&xa, &xb).matmul(&inv.transpose());
    }
    Ok(x)
}

/// `(‖z‖²/(2σ²) − log_det) / n_samples`.
pub fn flow_nll(x: &Matrix, cond: &Matrix, params: &FlowParams, cfg: &FlowConfig) -> Result<f64, VocoderError> {
    let (z, log_det) = flow_forward(x, cond, params, cfg)?;
    let sq: f64 = z.as_slice().iter().map(|v| v * v).sum();
    Ok((sq / (2.0 * cfg.sigma * cfg.sigma) - log_det) / z.as_slice().len() as f64)
}

/// Negative log-likelihood and its gradient with respect to every flow
/// parameter.
pub fn flow_nll_and_grad(
    x: &Matrix,
    cond: &Matrix,
    params: &FlowParams,
    cfg: &FlowConfig,
) -> Result<(f64, FlowGrads), VocoderError> {
    check_shapes(x, cond, params, cfg)?;
    let mut tape = Tape::new();
    let t = x.rows() as f64;
    let n = (x.rows() * x.cols()) as f64;
    let half = cfg.half();
    let c = tape.leaf(cond.clone());
    let mut h = tape.leaf(x.clone());
    let mut leaves: Vec<[Var; 7]> = Vec::new();
    let mut log_det_terms = Vec::new();
    for (k, s) in params.steps.iter().enumerate() {
        let f = s.fields().map(|m| tape.leaf(m.clone()));
        let [mix, w_in, b_in, w_scale, b_scale, w_shift, b_shift] = f;
        leaves.push(f);
        let ld = tape.log_abs_det(mix).ok_or(VocoderError::SingularTransform(k))?;
        log_det_terms.push(tape.scale(ld, t));
        h = tape.matmul_t(h, mix);
        let xa = tape.slice_cols(h, 0, half);
        let xb = tape.slice_cols(h, half, cfg.group_size);
        let inp = tape.concat_cols(&[xa, c]);
        let hid = tape.matmul_t(inp, w_in);
        let hid = tape.add_row(hid, b_in);
        let hid = tape.tanh(hid);
        let ls = tape.matmul_t(hid, w_scale);
        let ls = tape.add_row(ls, b_scale);
        let sh = tape.matmul_t(hid, w_shift);
        let sh = tape.add_row(sh, b_shift);
        let es = tape.exp(ls);
        let yb = tape.mul(xb, es);
        let yb = tape.add(yb, sh);
        log_det_terms.push(tape.sum(ls));
        h = tape.concat_cols(&[xa, yb]);
    }
    let sq = tape.sum_squares(h);
    let mut nll = tape.scale(sq, 1.0 / (2.0 * cfg.sigma * cfg.sigma));
    for term in log_det_terms {
        nll = tape.sub(nll, term);
    }
    let nll = tape.scale(nll, 1.0 / n);
    let value = tape.scalar(nll);
    let mut grads = tape.backward(nll);
    let mut out = params.zeros_like();
    for (step, vars) in out.steps.iter_mut().zip(&leaves) {
        for (m, &v) in step.fields_mut().into_iter().zip(vars) {
            if let Some(g) = grads.take(v) {
                *m = g;
            }
        }
    }
    Ok((value, out))
}

/// Plain gradient descent on the negative log-likelihood. Returns the loss
/// before each step followed by the final loss.
pub fn train_flow(
    x: &Matrix,
    cond: &Matrix,
    params: &mut FlowParams,
    cfg: &FlowConfig,
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>, VocoderError> {
    let mut history = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let (nll, g) = flow_nll_and_grad(x, cond, params, cfg)?;
        history.push(nll);
        for (p, gs) in params.steps.iter_mut().zip(&g.steps) {
            for (pm, gm) in p.fields_mut().into_iter().zip(gs.fields()) {
                for (a, b) in pm.as_mut_slice().iter_mut().zip(gm.as_slice()) {
                    *a -= lr * b;
                }
            }
        }
    }
    history.push(flow_nll(x, cond, params, cfg)?);
    Ok(history)
}

/// Repeats mel frames so that each audio group gets the frame covering its
/// first sample.
pub fn upsample_condition(mel: &Matrix, n_groups: usize, group_size: usize, hop: usize) -> Matrix {
    let frames = mel.rows().max(1);
    let mut out = Matrix::zeros(n_groups, mel.cols());
    for g in 0..n_groups {
        let f = ((g * group_size) / hop.max(1)).min(frames - 1);
        out.row_mut(g).copy_from_slice(mel.row(f));
    }
    out
}
