use super::*;
use crate::model::Tensor;
use rand::Rng;

fn toy_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 5,
        embed_dim: 6,
        encoder_conv_layers: 2,
        encoder_kernel: 3,
        encoder_rnn_dim: 4,
        attention_dim: 5,
        location_filters: 3,
        location_kernel: 5,
        decoder_rnn_dim: 6,
        prenet_dim: 5,
        n_mels: 8,
        postnet_layers: 3,
        postnet_kernel: 3,
        postnet_dim: 4,
        max_decoder_steps: 12,
        ..ModelConfig::default()
    }
}

/// Initialised parameters with every bias also randomised, so that no
/// term in the oracle comparison is trivially zero.
fn random_params(cfg: &ModelConfig, seed: u64) -> Parameters {
    let mut p = init_parameters(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    for (name, t) in p.iter_mut() {
        if name.ends_with(".bias") || name == "attention.v" {
            t.data.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        }
    }
    p
}

/// Appends the EOS id (4 in the toy vocabulary).
fn seq(ids: &[usize]) -> SymbolSequence {
    SymbolSequence::from_ids(ids.iter().copied().chain([4]).collect(), 4).unwrap()
}

fn random_target(frames: usize, n_mels: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_vec(frames, n_mels, (0..frames * n_mels).map(|_| rng.random_range(-2.0..1.0)).collect())
}

/// Plain-loop re-evaluation of the whole network, written independently of
/// the tape.
mod reference {
    use super::*;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    pub struct Net<'a> {
        pub p: &'a Parameters,
        pub cfg: &'a ModelConfig,
    }

    impl Net<'_> {
        fn t(&self, n: &str) -> &Tensor {
            self.p.get(n).unwrap()
        }

        /// y = W x + b with W stored output-major.
        fn affine(&self, prefix: &str, x: &[f64]) -> Vec<f64> {
            let w = self.t(&format!("{prefix}.weight"));
            let b = self.t(&format!("{prefix}.bias"));
            let cols = x.len();
            (0..w.shape[0])
                .map(|o| b.data[o] + (0..cols).map(|i| w.data[o * cols + i] * x[i]).sum::<f64>())
                .collect()
        }

        fn conv(&self, input: &[Vec<f64>], kernel: &Tensor, bias: Option<&Tensor>) -> Vec<Vec<f64>> {
            let (c_out, c_in, k) = (kernel.shape[0], kernel.shape[1], kernel.shape[2]);
            let half = (k / 2) as isize;
            (0..input.len())
                .map(|t| {
                    (0..c_out)
                        .map(|o| {
                            let mut acc = bias.map_or(0.0, |b| b.data[o]);
                            for j in 0..k {
                                let s = t as isize + j as isize - half;
                                if s < 0 || s >= input.len() as isize {
                                    continue;
                                }
                                for c in 0..c_in {
                                    acc += kernel.data[(o * c_in + c) * k + j] * input[s as usize][c];
                                }
                            }
                            acc
                        })
                        .collect()
                })
                .collect()
        }

        fn lstm(&self, prefix: &str, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
            let n = h.len();
            let xh: Vec<f64> = x.iter().chain(h).copied().collect();
            let z = self.affine(prefix, &xh);
            let mut h2 = vec![0.0; n];
            let mut c2 = vec![0.0; n];
            for k in 0..n {
                let i = sig(z[k]);
                let f = sig(z[n + k]);
                let g = z[2 * n + k].tanh();
                let o = sig(z[3 * n + k]);
                c2[k] = f * c[k] + i * g;
                h2[k] = o * c2[k].tanh();
            }
            (h2, c2)
        }

        pub fn encode(&self, ids: &[usize]) -> Vec<Vec<f64>> {
            let emb = self.t("embedding.weight");
            let e = emb.shape[1];
            let mut x: Vec<Vec<f64>> = ids.iter().map(|&i| emb.data[i * e..(i + 1) * e].to_vec()).collect();
            for l in 0..self.cfg.encoder_conv_layers {
                let k = self.t(&format!("encoder.conv{l}.kernel"));
                let b = self.t(&format!("encoder.conv{l}.bias"));
                x = self
                    .conv(&x, k, Some(b))
                    .into_iter()
                    .map(|r| r.into_iter().map(f64::tanh).collect())
                    .collect();
            }
            let h = self.cfg.encoder_rnn_dim;
            let n = ids.len();
            let mut fwd = vec![vec![]; n];
            let (mut hs, mut cs) = (vec![0.0; h], vec![0.0; h]);
            for t in 0..n {
                (hs, cs) = self.lstm("encoder.lstm_fwd", &x[t], &hs, &cs);
                fwd[t] = hs.clone();
            }
            let (mut hs, mut cs) = (vec![0.0; h], vec![0.0; h]);
            let mut out = vec![vec![]; n];
            for t in (0..n).rev() {
                (hs, cs) = self.lstm("encoder.lstm_bwd", &x[t], &hs, &cs);
                out[t] = fwd[t].iter().chain(&hs).copied().collect();
            }
            out
        }

        pub fn attend(&self, q: &[f64], mem: &[Vec<f64>], prev: &[f64], cum: &[f64]) -> (Vec<f64>, Vec<f64>) {
            let wq = self.t("attention.query.weight");
            let wm = self.t("attention.memory.weight");
            let filt = self.t("attention.location.filters");
            let proj = self.t("attention.location.proj");
            let b = self.t("attention.bias");
            let v = self.t("attention.v");
            let a = wq.shape[0];
            let (nf, kl) = (filt.shape[0], filt.shape[2]);
            let n = mem.len();
            let mv = |w: &Tensor, x: &[f64]| -> Vec<f64> {
                (0..w.shape[0]).map(|o| (0..x.len()).map(|i| w.data[o * x.len() + i] * x[i]).sum()).collect()
            };
            let wq_q = mv(wq, q);
            let mut energies = vec![0.0; n];
            for i in 0..n {
                let mut f = vec![0.0; nf];
                for (fi, fv) in f.iter_mut().enumerate() {
                    for j in 0..kl {
                        let s = i as isize + j as isize - (kl / 2) as isize;
                        if s < 0 || s >= n as isize {
                            continue;
                        }
                        let s = s as usize;
                        *fv += filt.data[(fi * 2) * kl + j] * prev[s] + filt.data[(fi * 2 + 1) * kl + j] * cum[s];
                    }
                }
                let vm = mv(wm, &mem[i]);
                let uf = mv(proj, &f);
                energies[i] = (0..a).map(|k| v.data[k] * (wq_q[k] + vm[k] + uf[k] + b.data[k]).tanh()).sum();
            }
            let max = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = energies.iter().map(|e| (e - max).exp()).collect();
            let z: f64 = ex.iter().sum();
            let w: Vec<f64> = ex.iter().map(|e| e / z).collect();
            let m = mem[0].len();
            let ctx = (0..m).map(|k| (0..n).map(|i| w[i] * mem[i][k]).sum()).collect();
            (ctx, w)
        }

        /// Total loss with teacher forcing and no dropout.
        pub fn loss(&self, ids: &[usize], target: &Matrix) -> f64 {
            let cfg = self.cfg;
            let mem = self.encode(ids);
            let n = mem.len();
            let r = cfg.decoder_rnn_dim;
            let (mut ah, mut ac, mut dh, mut dc) = (vec![0.0; r], vec![0.0; r], vec![0.0; r], vec![0.0; r]);
            let mut ctx = vec![0.0; cfg.memory_dim()];
            let mut prev = vec![0.0; n];
            prev[0] = 1.0;
            let mut cum = vec![0.0; n];
            let mut frame = vec![0.0; cfg.n_mels];
            let mut mels = Vec::new();
            let mut gates = Vec::new();
            for t in 0..target.rows() {
                let x: Vec<f64> = self.affine("decoder.prenet0", &frame).into_iter().map(|v| v.max(0.0)).collect();
                let x: Vec<f64> = self.affine("decoder.prenet1", &x).into_iter().map(|v| v.max(0.0)).collect();
                let ain: Vec<f64> = x.iter().chain(&ctx).copied().collect();
                (ah, ac) = self.lstm("decoder.attention_rnn", &ain, &ah, &ac);
                let (c, w) = self.attend(&ah, &mem, &prev, &cum);
                ctx = c;
                for i in 0..n {
                    cum[i] += w[i];
                }
                prev = w;
                let din: Vec<f64> = ah.iter().chain(&ctx).copied().collect();
                (dh, dc) = self.lstm("decoder.rnn", &din, &dh, &dc);
                let out: Vec<f64> = dh.iter().chain(&ctx).copied().collect();
                mels.push(self.affine("decoder.proj", &out));
                gates.push(self.affine("decoder.gate", &out)[0]);
                frame = target.row(t).to_vec();
            }
            let mut y = mels.clone();
            for l in 0..cfg.postnet_layers {
                let k = self.t(&format!("postnet.conv{l}.kernel"));
                let b = self.t(&format!("postnet.conv{l}.bias"));
                y = self.conv(&y, k, Some(b));
                if l + 1 < cfg.postnet_layers {
                    y.iter_mut().for_each(|row| row.iter_mut().for_each(|v| *v = v.tanh()));
                }
            }
            let frames = target.rows();
            let mut sse_b = 0.0;
            let mut sse_a = 0.0;
            for t in 0..frames {
                for k in 0..cfg.n_mels {
                    let tv = target[(t, k)];
                    sse_b += (mels[t][k] - tv).powi(2);
                    sse_a += (mels[t][k] + y[t][k] - tv).powi(2);
                }
            }
            let mut bce = 0.0;
            for (t, &z) in gates.iter().enumerate() {
                let p = sig(z);
                let label = if t + 1 == frames { 1.0 } else { 0.0 };
                bce -= label * p.ln() + (1.0 - label) * (1.0 - p).ln();
            }
            (sse_b + sse_a) / (frames * cfg.n_mels) as f64 + bce / frames as f64
        }
    }
}

#[test]
fn encoder_shape_and_determinism() {
    let cfg = toy_config();
    let p = random_params(&cfg, 1);
    let s = seq(&[1, 2, 3, 2, 1, 2]);
    let m = encode(&s, &p, &cfg, RunMode::Deterministic).unwrap();
    assert_eq!(m.shape(), (7, cfg.memory_dim()));
    assert_eq!(m, encode(&s, &p, &cfg, RunMode::Deterministic).unwrap());
    let net = reference::Net { p: &p, cfg: &cfg };
    let oracle = net.encode(s.ids());
    for (t, row) in oracle.iter().enumerate() {
        for (k, v) in row.iter().enumerate() {
            assert!((m[(t, k)] - v).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_parameters_give_zero_memory() {
    let cfg = toy_config();
    let p = init_parameters(&cfg, 0).unwrap().zeros_like();
    let m = encode(&seq(&[1, 2]), &p, &cfg, RunMode::Deterministic).unwrap();
    assert!(m.as_slice().iter().all(|&v| v == 0.0));
}

#[test]
fn out_of_range_symbol() {
    let cfg = ModelConfig { vocab_size: 3, ..toy_config() };
    let p = init_parameters(&cfg, 0).unwrap();
    let r = encode(&seq(&[1]), &p, &cfg, RunMode::Deterministic);
    assert!(matches!(r, Err(ModelError::UnknownSymbol { id: 4, .. })));
}

#[test]
fn attention_singleton_and_uniform() {
    let cfg = toy_config();
    let p = random_params(&cfg, 2);
    let mem = Matrix::from_vec(1, cfg.memory_dim(), (0..cfg.memory_dim()).map(|i| i as f64 * 0.1).collect());
    let q = vec![0.3; cfg.decoder_rnn_dim];
    let (ctx, w) = attention_step(&q, &mem, &AttentionState::initial(1), &p, &cfg).unwrap();
    assert_eq!(w, vec![1.0]);
    assert_eq!(ctx, mem.row(0));

    let mut z = p.clone();
    z.get_mut("attention.v").unwrap().data.iter_mut().for_each(|v| *v = 0.0);
    let mem = random_target(6, cfg.memory_dim(), 3);
    let (_, w) = attention_step(&q, &mem, &AttentionState::initial(6), &z, &cfg).unwrap();
    assert!(w.iter().all(|&x| (x - 1.0 / 6.0).abs() < 1e-15));

    let bad = AttentionState::initial(5);
    assert!(matches!(
        attention_step(&q, &mem, &bad, &p, &cfg),
        Err(ModelError::StateMismatch { expected: 6, found: 5 })
    ));
}

#[test]
fn attention_matches_energy_formula() {
    let cfg = toy_config();
    for seed in 0..3 {
        let p = random_params(&cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let mem = random_target(5, cfg.memory_dim(), seed + 7);
        let q: Vec<f64> = (0..cfg.decoder_rnn_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let raw: Vec<f64> = (0..5).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let state = AttentionState {
            prev_weights: raw.iter().map(|v| v / s).collect(),
            cum_weights: (0..5).map(|_| rng.random_range(0.0..3.0)).collect(),
        };
        let (ctx, w) = attention_step(&q, &mem, &state, &p, &cfg).unwrap();
        let rows: Vec<Vec<f64>> = mem.iter_rows().map(<[f64]>::to_vec).collect();
        let net = reference::Net { p: &p, cfg: &cfg };
        let (octx, ow) = net.attend(&q, &rows, &state.prev_weights, &state.cum_weights);
        for (a, b) in w.iter().zip(&ow).chain(ctx.iter().zip(&octx)) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn teacher_forced_loss_matches_reference() {
    let cfg = toy_config();
    for seed in 0..3 {
        let p = random_params(&cfg, seed);
        let s = seq(&[3, 1]);
        let target = random_target(4, 8, seed + 50);
        let (out, loss) = forward_teacher_forced(&s, &target, &p, &cfg, RunMode::Deterministic).unwrap();
        let oracle = reference::Net { p: &p, cfg: &cfg }.loss(s.ids(), &target);
        assert!((loss.total - oracle).abs() < 1e-8, "{} vs {oracle}", loss.total);
        assert!((loss.total - (loss.mse_before + loss.mse_after + loss.gate_bce)).abs() < 1e-12);
        assert_eq!(out.mel_before.shape(), (4, 8));
        assert_eq!(out.gate_logits.len(), 4);
        assert_eq!(out.alignment.values().shape(), (4, 3));
    }
}

#[test]
fn copying_predictions_gives_zero_mse() {
    let cfg = toy_config();
    let mut p = random_params(&cfg, 9);
    let last = cfg.postnet_layers - 1;
    for n in [format!("postnet.conv{last}.kernel"), format!("postnet.conv{last}.bias")] {
        p.get_mut(&n).unwrap().data.iter_mut().for_each(|v| *v = 0.0);
    }
    p.get_mut("decoder.gate.bias").unwrap().data[0] = -30.0;
    let s = seq(&[1, 2, 3]);
    let run = infer(&s, &p, &cfg, RunMode::Deterministic).unwrap();
    assert_eq!(run.output.mel_after, run.output.mel_before);
    let target = run.output.mel_before.clone();
    let (out, loss) = forward_teacher_forced(&s, &target, &p, &cfg, RunMode::Deterministic).unwrap();
    assert_eq!(loss.mse_before, 0.0);
    assert_eq!(loss.mse_after, 0.0);
    assert_eq!(out.gate_logits, run.output.gate_logits);
}

#[test]
fn every_parameter_gets_a_gradient() {
    let cfg = toy_config();
    let p = random_params(&cfg, 4);
    let (_, g) = backward(&seq(&[1]), &random_target(3, 8, 1), &p, &cfg, RunMode::Deterministic).unwrap();
    assert_eq!(g.len(), p.len());
    for (name, t) in p.iter() {
        let gt = g.get(name).unwrap();
        assert_eq!(gt.shape, t.shape, "{name}");
        assert!(gt.data.iter().any(|v| *v != 0.0), "{name} has an all-zero gradient");
    }
}

fn finite_difference_check(mode: RunMode, seed: u64) -> f64 {
    let cfg = toy_config();
    let p = random_params(&cfg, seed);
    let s = seq(&[2, 1]);
    let target = random_target(4, 8, seed + 11);
    let (_, grads) = backward(&s, &target, &p, &cfg, mode).unwrap();
    let loss = |q: &Parameters| {
        let (l, _) = batch_gradients(&[(&s, &target)], q, &cfg, mode).unwrap();
        l.total
    };
    let h = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 77);
    let mut worst: f64 = 0.0;
    for (name, t) in p.iter() {
        let picks: Vec<usize> = if t.len() <= 50 {
            (0..t.len()).collect()
        } else {
            (0..50).map(|_| rng.random_range(0..t.len())).collect()
        };
        for i in picks {
            let mut plus = p.clone();
            plus.get_mut(name).unwrap().data[i] += h;
            let mut minus = p.clone();
            minus.get_mut(name).unwrap().data[i] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let analytic = grads.get(name).unwrap().data[i];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..3 {
        let worst = finite_difference_check(RunMode::Deterministic, seed);
        assert!(worst <= 1e-4, "seed {seed}: worst relative error {worst}");
    }
}

#[test]
fn gradients_match_with_fixed_dropout_masks() {
    let worst = finite_difference_check(RunMode::Train { seed: 5 }, 7);
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

#[test]
fn batch_gradient_is_frame_weighted_sum() {
    let cfg = toy_config();
    let p = random_params(&cfg, 3);
    let (a, b) = (seq(&[1]), seq(&[3, 0, 2]));
    let (ta, tb) = (random_target(3, 8, 1), random_target(5, 8, 2));
    let (joint, jg) = batch_gradients(&[(&a, &ta), (&b, &tb)], &p, &cfg, RunMode::Deterministic).unwrap();
    let (la, ga) = backward(&a, &ta, &p, &cfg, RunMode::Deterministic).unwrap();
    let (lb, gb) = backward(&b, &tb, &p, &cfg, RunMode::Deterministic).unwrap();
    let expect = (la.total * 3.0 + lb.total * 5.0) / 8.0;
    assert!((joint.total - expect).abs() < 1e-12);
    let w = jg.get("decoder.proj.weight").unwrap();
    let (x, y) = (ga.get("decoder.proj.weight").unwrap(), gb.get("decoder.proj.weight").unwrap());
    for i in 0..w.len() {
        assert!((w.data[i] - (x.data[i] * 3.0 + y.data[i] * 5.0) / 8.0).abs() < 1e-12);
    }
}

fn gated(bias: f64, max_steps: usize) -> (ModelConfig, Parameters) {
    let cfg = ModelConfig {
        max_decoder_steps: max_steps,
        ..toy_config()
    };
    let mut p = random_params(&cfg, 6);
    p.get_mut("decoder.gate.weight").unwrap().data.iter_mut().for_each(|v| *v = 0.0);
    p.get_mut("decoder.gate.bias").unwrap().data[0] = bias;
    (cfg, p)
}

#[test]
fn gate_high_stops_after_one_frame() {
    let (cfg, p) = gated(10.0, 50);
    let r = infer(&seq(&[1, 2, 3]), &p, &cfg, RunMode::Deterministic).unwrap();
    assert_eq!(r.stop_reason, StopReason::GateFired);
    assert_eq!(r.output.mel_after.rows(), 1);
}

#[test]
fn gate_low_runs_to_cap() {
    let (cfg, p) = gated(-10.0, 9);
    let r = infer(&seq(&[1, 2, 3]), &p, &cfg, RunMode::Deterministic).unwrap();
    assert_eq!(r.stop_reason, StopReason::MaxSteps);
    assert_eq!(r.output.mel_after.rows(), 9);
    assert_eq!(r.output.alignment.n_dec_steps(), 9);
}

#[test]
fn gate_exactly_at_threshold_stops() {
    let logit = (0.4f64 / 0.6).ln();
    assert!(gate_fires(logit, 0.4));
    assert!(!gate_fires(logit - 1e-12, 0.4));
    let (cfg, p) = gated(logit, 9);
    let r = infer(&seq(&[1, 2]), &p, &cfg, RunMode::Deterministic).unwrap();
    assert_eq!(r.stop_reason, StopReason::GateFired);
    assert_eq!(r.output.mel_after.rows(), 1);
}

#[test]
fn inference_dropout_is_seeded() {
    let (cfg, p) = gated(-10.0, 6);
    let s = seq(&[1, 3, 2]);
    let a = infer(&s, &p, &cfg, RunMode::Inference { seed: 1 }).unwrap();
    let b = infer(&s, &p, &cfg, RunMode::Inference { seed: 1 }).unwrap();
    let c = infer(&s, &p, &cfg, RunMode::Inference { seed: 2 }).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.output.mel_after, c.output.mel_after);
    let d = infer(&s, &p, &cfg, RunMode::Deterministic).unwrap();
    assert_eq!(d, infer(&s, &p, &cfg, RunMode::Deterministic).unwrap());
}

#[test]
fn attention_rows_and_cumulative_mass() {
    let (cfg, p) = gated(-10.0, 15);
    let r = infer(&seq(&[1, 2, 3, 0]), &p, &cfg, RunMode::Inference { seed: 3 }).unwrap();
    let a = r.output.alignment.values();
    let mut cum = 0.0;
    for row in a.iter_rows() {
        assert!(row.iter().all(|&w| w >= 0.0));
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        cum += s;
    }
    assert!((cum - 15.0).abs() < 1e-5);
}

#[test]
fn bad_target_rejected() {
    let cfg = toy_config();
    let p = random_params(&cfg, 0);
    let r = forward_teacher_forced(&seq(&[1]), &Matrix::zeros(0, 8), &p, &cfg, RunMode::Deterministic);
    assert!(matches!(r, Err(ModelError::BadTarget { .. })));
    let zero = Tensor::zeros(&[1]);
    assert_eq!(zero.len(), 1);
}
