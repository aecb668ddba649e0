use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lowres_tts::audio::write_wav;
use lowres_tts::synthetic::{pad_silence, tone_corpus, ToneVoice};

const TOY_CONFIG: &str = "\
seed=11
prep.rate=4000
feature.sample_rate_hz=4000
feature.fft_size=256
feature.hop=200
feature.win_length=256
feature.n_mels=20
feature.fmax_hz=2000.0
feature.log_floor=0.01
model.embed_dim=16
model.encoder_conv_layers=1
model.encoder_kernel=5
model.encoder_rnn_dim=16
model.attention_dim=16
model.location_filters=4
model.location_kernel=7
model.decoder_rnn_dim=32
model.prenet_dim=16
model.postnet_layers=2
model.postnet_kernel=5
model.postnet_dim=16
model.max_decoder_steps=60
train.batch_size=4
train.validation_interval=50
train.max_iterations=200
adam.lr=0.005
synth.gl_iters=8
";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_lowres-tts"));
    c.env("LOWRES_TTS_THREADS", "1");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn lowres-tts")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Raw `<stem>.wav` / `<stem>.txt` pairs rendered at 8 kHz with padding
/// silence, so prep has something to resample and trim.
fn toy_raw(dir: &Path, alphabet: &str, n: usize, seed: u64) {
    std::fs::create_dir_all(dir).unwrap();
    let chars: Vec<char> = alphabet.chars().collect();
    let voice = ToneVoice::evenly_spaced(&chars, 8000, 300.0, 1700.0);
    for (i, (text, clip)) in tone_corpus(&voice, n, 4, 6, seed).unwrap().into_iter().enumerate() {
        let clip = pad_silence(&clip, 0.3).unwrap();
        write_wav(dir.join(format!("utt{i:02}.wav")), &clip).unwrap();
        std::fs::write(dir.join(format!("utt{i:02}.txt")), format!("{text}\n")).unwrap();
    }
}

fn toy_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("toy.cfg");
    std::fs::write(&p, format!("{TOY_CONFIG}{extra}")).unwrap();
    p
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn stats_on_two_entry_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let voice = ToneVoice::evenly_spaced(&['क', 'ख'], 4000, 300.0, 900.0);
    std::fs::create_dir(dir.path().join("wavs")).unwrap();
    write_wav(dir.path().join("wavs/a.wav"), &voice.render("कख").unwrap()).unwrap();
    write_wav(dir.path().join("wavs/b.wav"), &voice.render("खक ख").unwrap()).unwrap();
    let manifest = dir.path().join("m.tsv");
    std::fs::write(&manifest, "wavs/a.wav\tकख\nwavs/b.wav\tखक ख\n").unwrap();
    let o = run(&["stats", "--manifest", s(&manifest)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("num_utterances=2"), "{out}");
    assert!(out.contains("word_vocab_size=3"), "{out}");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = run(&["stats", "--manifest", "m.tsv", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage:"), "{}", stderr(&o));
    let o = run(&["align-score", "--alignment", "a.csv", "--band", "2"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_lists_every_subcommand() {
    let o = run(&["--help"]);
    assert!(o.status.success());
    let out = stdout(&o);
    for sub in ["prep", "stats", "features", "train", "synth", "align-score", "mos", "surgery", "pipeline"] {
        assert!(out.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn train_without_feature_cache_reports_missing_features() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.tsv");
    std::fs::write(&manifest, "wavs/a.wav\tकख\n").unwrap();
    let feats = dir.path().join("feats");
    let o = run(&["train", "--manifest", s(&manifest), "--features", s(&feats), "--out", s(&dir.path().join("ck"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("E_FEATURES_MISSING: "), "{err}");
    assert!(err.contains("feats"), "{err}");
}

#[test]
fn mos_and_align_score() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["mos", "--invert", "--n", "37", "--half-width", "0.33"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("0.98") || stdout(&o).contains("0.99"), "{}", stdout(&o));

    let ratings = dir.path().join("r.csv");
    std::fs::write(
        &ratings,
        "rater_id,utterance_id,dimension,score\nr1,u1,naturalness,4\nr2,u1,naturalness,3\nr1,u1,pronunciation,5\nr2,u1,pronunciation,4\n",
    )
    .unwrap();
    let o = run(&["mos", "--ratings", s(&ratings)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("3.50") && out.contains("4.50") && out.contains("overall: 4.00"), "{out}");

    let csv = dir.path().join("a.csv");
    std::fs::write(&csv, "1,0,0\n0,1,0\n0,0,1\n").unwrap();
    let o = run(&["align-score", "--alignment", s(&csv)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "1.000000");

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "0.5,abc\n").unwrap();
    let o = run(&["align-score", "--alignment", s(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("E_ALIGNMENT: "), "{}", stderr(&o));
}

#[test]
fn pipeline_runs_resumes_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    toy_raw(&raw, "कखगघचछजझ", 5, 3);
    let cfg = toy_config(dir.path(), "");
    let run_a = dir.path().join("run_a");

    let o = run(&["--config", s(&cfg), "pipeline", "--raw", s(&raw), "--run", s(&run_a)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("ran [prep,features,train,synth]"), "{}", stdout(&o));
    for f in [
        "RUNFMT",
        "config.txt",
        "corpus/manifest.tsv",
        "features/features.cfg",
        "train/best.ckpt",
        "train/last.ckpt",
        "train/loss_log.csv",
        "train/loss_log.svg",
        "train/alignment.pgm",
        "train/alignment.csv",
        "synth/sample.wav",
        "synth/alignment.pgm",
        "stamps/synth.done",
    ] {
        assert!(run_a.join(f).is_file(), "{f} missing");
    }
    let log = std::fs::read_to_string(run_a.join("train/loss_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 201, "header plus one row per iteration");

    let o = run(&["--config", s(&cfg), "pipeline", "--raw", s(&raw), "--run", s(&run_a)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("ran [] skipped [prep,features,train,synth]"), "{}", stdout(&o));

    let o = run(&["--config", s(&cfg), "--seed", "12", "pipeline", "--raw", s(&raw), "--run", s(&run_a)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("E_RUN_DIR: "), "{}", stderr(&o));

    // Stop after features, then resume: training is the first stage to run.
    let run_b = dir.path().join("run_b");
    let o = run(&["--config", s(&cfg), "pipeline", "--raw", s(&raw), "--run", s(&run_b), "--stop-after", "features"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("ran [prep,features] skipped []"), "{}", stdout(&o));
    assert!(!run_b.join("train").exists());
    let o = run(&["--config", s(&cfg), "pipeline", "--raw", s(&raw), "--run", s(&run_b)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("ran [train,synth] skipped [prep,features]"), "{}", stdout(&o));

    let a = tree(&run_a);
    let b = tree(&run_b);
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (k, v) in &a {
        assert!(b[k] == *v, "{k} differs between identical runs");
    }
}

#[test]
fn incompatible_warm_start_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    toy_raw(&raw, "कखगघ", 3, 5);

    // A source model with a different embedding width.
    let src_cfg = toy_config(dir.path(), "model.encoder_rnn_dim=8\ntrain.max_iterations=2\n");
    let src_run = dir.path().join("src");
    let o = run(&["--config", s(&src_cfg), "pipeline", "--raw", s(&raw), "--run", s(&src_run), "--stop-after", "train"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let cfg = toy_config(dir.path(), "");
    let target = dir.path().join("target");
    let o = run(&[
        "--config",
        s(&cfg),
        "pipeline",
        "--raw",
        s(&raw),
        "--run",
        s(&target),
        "--warm-start",
        s(&src_run.join("train/best.ckpt")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("E_INCOMPATIBLE_ARCHITECTURE: train: transfer: "), "{err}");
    assert!(!target.join("train/last.ckpt").exists());
    assert!(!target.join("stamps/train.done").exists());
}

#[test]
fn surgery_and_synth_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    toy_raw(&raw, "कखगघ", 3, 8);
    let cfg = toy_config(dir.path(), "train.max_iterations=5\n");
    let src_run = dir.path().join("src");
    let o = run(&["--config", s(&cfg), "pipeline", "--raw", s(&raw), "--run", s(&src_run)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let raw_b = dir.path().join("raw_b");
    toy_raw(&raw_b, "चछजझट", 3, 9);
    let o = run(&["--config", s(&cfg), "prep", "--in", s(&raw_b), "--out", s(&dir.path().join("corpus_b"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest_b = dir.path().join("corpus_b/manifest.tsv");
    let ckpt = src_run.join("train/best.ckpt");

    let o = run(&["surgery", "--src", s(&ckpt), "--manifest", s(&manifest_b), "--dry-run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let plan = stdout(&o);
    assert!(plan.contains("REINIT embedding."), "{plan}");
    assert!(!plan.contains("MISMATCH"), "{plan}");

    let warm = dir.path().join("warm.ckpt");
    let o = run(&["--seed", "4", "surgery", "--src", s(&ckpt), "--manifest", s(&manifest_b), "--out", s(&warm)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let loaded = lowres_tts::transfer::load_checkpoint(&warm).unwrap();
    assert!(loaded.vocab.iter().all(|c| "चछजझट ".contains(*c)), "{:?}", loaded.vocab);
    assert!(loaded.optimizer.is_some());

    let wav = dir.path().join("out.wav");
    let pgm = dir.path().join("att.pgm");
    let o = run(&["--config", s(&cfg), "synth", "--ckpt", s(&ckpt), "--text", "कख", "--out", s(&wav), "--alignment", s(&pgm)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let clip = lowres_tts::audio::read_wav(&wav).unwrap();
    assert_eq!(clip.sample_rate_hz(), 4000);
    assert!(pgm.is_file());

    let o = run(&["synth", "--ckpt", s(&ckpt), "--text", "ञ", "--out", s(&wav)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("E_TEXT: "), "{}", stderr(&o));

    let flow = dir.path().join("flow.ckpt");
    let o = run(&["--config", s(&cfg), "flow-init", "--out", s(&flow), "--n-flows", "2", "--hidden", "8"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&[
        "--config", s(&cfg), "synth", "--ckpt", s(&ckpt), "--text", "कख", "--out", s(&wav), "--vocoder", "flow",
        "--flow-ckpt", s(&flow),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(lowres_tts::audio::read_wav(&wav).unwrap().sample_rate_hz(), 4000);
}
