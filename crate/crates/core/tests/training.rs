use lowres_tts::corpus::{normalize_text, SymbolTable};
use lowres_tts::features::{mel_spectrogram, FeatureConfig};
use lowres_tts::model::{init_parameters, ModelConfig};
use lowres_tts::synthetic::{tone_corpus, ToneVoice};
use lowres_tts::trainer::{fit, AdamConfig, StopCause, TrainConfig, TrainItem};
use lowres_tts::transfer::{load_checkpoint, save_checkpoint, Checkpoint};

const RATE: u32 = 4000;

fn features() -> FeatureConfig {
    FeatureConfig {
        fft_size: 256,
        hop: 200,
        win_length: 256,
        n_mels: 20,
        fmax_hz: 2000.0,
        sample_rate_hz: RATE,
        log_floor: 1e-2,
        ..FeatureConfig::default()
    }
}

fn model(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        embed_dim: 16,
        encoder_conv_layers: 1,
        encoder_kernel: 5,
        encoder_rnn_dim: 16,
        attention_dim: 16,
        location_filters: 4,
        location_kernel: 7,
        decoder_rnn_dim: 32,
        prenet_dim: 16,
        n_mels: 20,
        postnet_layers: 2,
        postnet_kernel: 5,
        postnet_dim: 16,
        max_decoder_steps: 100,
        ..ModelConfig::default()
    }
}

fn corpus(n: usize, seed: u64) -> (SymbolTable, Vec<TrainItem>) {
    let alphabet: Vec<char> = "abcdefgh".chars().collect();
    let voice = ToneVoice::evenly_spaced(&alphabet, RATE, 300.0, 1700.0);
    let table = SymbolTable::new(alphabet.iter().copied().chain([' ']).collect()).unwrap();
    let items = tone_corpus(&voice, n, 4, 7, seed)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, (text, clip))| TrainItem {
            id: format!("u{i}"),
            symbols: normalize_text(&text, &table).unwrap(),
            mel: mel_spectrogram(&clip, &features()).unwrap().values,
        })
        .collect();
    (table, items)
}

fn train_cfg(seed: u64, iterations: u64) -> TrainConfig {
    TrainConfig {
        epochs: usize::MAX,
        batch_size: 2,
        max_iterations: Some(iterations),
        validation_interval_iters: 50,
        seed,
        ..TrainConfig::default()
    }
}

fn adam() -> AdamConfig {
    AdamConfig {
        lr: 5e-3,
        ..AdamConfig::default()
    }
}

#[test]
fn two_hundred_iterations_log_two_hundred_records_deterministically() {
    let (table, items) = corpus(5, 7);
    let cfg = model(table.len());
    let go = || {
        let mut improvements = Vec::new();
        let out = fit(&items, init_parameters(&cfg, 3).unwrap(), &cfg, &train_cfg(3, 200), &adam(), None, |p| {
            if p.improved {
                improvements.push(p.record.iteration);
            }
            true
        })
        .unwrap();
        (out, improvements)
    };
    let (a, improved_a) = go();
    assert_eq!(a.stop, StopCause::MaxIterations);
    assert_eq!(a.records.len(), 200);
    assert!(a.records.windows(2).all(|w| w[1].iteration > w[0].iteration));
    assert!(a.records.windows(2).all(|w| w[1].lr <= w[0].lr));
    assert_eq!(a.records.iter().filter(|r| r.val_loss.is_some()).count(), 4);
    assert!(!improved_a.is_empty());
    let first = a.records[..10].iter().map(|r| r.train_loss).sum::<f64>();
    let last = a.records[190..].iter().map(|r| r.train_loss).sum::<f64>();
    assert!(last < first, "training loss did not fall: {first} -> {last}");

    let (b, improved_b) = go();
    assert_eq!(improved_a, improved_b);
    assert_eq!(a.records, b.records);
    assert_eq!(a.params, b.params);
}

#[test]
fn resuming_from_a_checkpoint_continues_the_optimizer() {
    let (table, items) = corpus(4, 9);
    let cfg = model(table.len());
    let first = fit(&items, init_parameters(&cfg, 1).unwrap(), &cfg, &train_cfg(1, 20), &adam(), None, |_| true).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("last.ckpt");
    let mut ckpt = Checkpoint::new(cfg.clone(), table.symbols().to_vec(), first.params.clone());
    ckpt.optimizer = Some(first.optimizer.clone());
    save_checkpoint(&ckpt, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let opt = loaded.optimizer.unwrap();
    assert_eq!(opt.step, first.optimizer.step);

    let second = fit(&items, loaded.params, &cfg, &train_cfg(1, 5), &adam(), Some(opt), |_| true).unwrap();
    assert_eq!(second.records.len(), 5);
    assert_eq!(second.optimizer.step, first.optimizer.step + 5);
}
