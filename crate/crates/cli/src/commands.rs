//! Subcommand bodies. Each takes resolved settings and explicit paths so
//! that the pipeline can call them directly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use lowres_tts::audio::{read_wav, write_wav, AudioClip};
use lowres_tts::corpus::{
    clean_text, corpus_stats, normalize_text, prepare_directory, read_manifest, read_manifest_entries, ManifestEntry,
    PrepConfig, SymbolTable,
};
use lowres_tts::evaluation::{
    diagonality, export_loss_plot, implied_std_dev, mos_report, overall_mos, parse_mos_csv, AlignmentMatrix,
    MosDimension,
};
use lowres_tts::features::{mel_spectrogram, read_mel_cache, write_mel_cache, FeatureConfig, MelSpectrogram};
use lowres_tts::matrix::Matrix;
use lowres_tts::model::{self, init_parameters, ModelConfig, RunMode, StopReason};
use lowres_tts::trainer::{fit, StopCause, TrainItem};
use lowres_tts::transfer::{
    compat_report, load_checkpoint, save_checkpoint, warm_start_checkpoint, Checkpoint, TransferSpec,
};
use lowres_tts::vocoder::{
    flow_inverse, griffin_lim_with_seed, train_flow, upsample_condition, FlowConfig, FlowParams,
};

use crate::errors::coded;
use crate::settings::Settings;

pub const FEATURES_CFG: &str = "features.cfg";

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

pub fn prep(in_dir: &Path, out_dir: &Path, cfg: &PrepConfig) -> Result<Vec<ManifestEntry>> {
    let entries = prepare_directory(in_dir, out_dir, cfg)?;
    if entries.is_empty() {
        return Err(coded("E_MANIFEST", format!("no <stem>.wav/<stem>.txt pairs in {}", in_dir.display())));
    }
    Ok(entries)
}

pub fn stats(manifest: &Path) -> Result<String> {
    let entries = read_manifest_entries(manifest)?;
    let s = corpus_stats(&entries)?;
    Ok(format!("{s}\n{}", s.key_values()))
}

/// Cache file for a manifest audio path: the audio file stem with `.mel`.
pub fn cache_path(features_dir: &Path, audio_path: &str) -> PathBuf {
    let stem = Path::new(audio_path).file_stem().unwrap_or_default();
    features_dir.join(stem).with_extension("mel")
}

fn pairs_text(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn features(manifest: &Path, out_dir: &Path, cfg: &FeatureConfig) -> Result<usize> {
    let rows = read_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    create_dir(out_dir)?;
    let mut seen = BTreeMap::new();
    for (audio, _) in &rows {
        if let Some(prev) = seen.insert(cache_path(out_dir, audio), audio.clone()) {
            return Err(coded("E_MANIFEST", format!("{prev} and {audio} share a file stem")));
        }
    }
    rows.par_iter().try_for_each(|(audio, _)| -> Result<()> {
        let clip = read_wav(base.join(audio)).with_context(|| audio.clone())?;
        let mel = mel_spectrogram(&clip, cfg).with_context(|| audio.clone())?;
        write_mel_cache(&cache_path(out_dir, audio), &mel.values)?;
        Ok(())
    })?;
    write(&out_dir.join(FEATURES_CFG), pairs_text(&cfg.to_pairs()))?;
    Ok(rows.len())
}

fn read_features_cfg(dir: &Path) -> Result<FeatureConfig> {
    let path = dir.join(FEATURES_CFG);
    if !path.is_file() {
        return Err(coded("E_FEATURES_MISSING", path.display().to_string()));
    }
    let body = std::fs::read_to_string(&path).with_context(|| path.display().to_string())?;
    let mut cfg = FeatureConfig::default();
    for line in body.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| coded("E_FEATURES_CORRUPT", format!("{}: bad line {line:?}", path.display())))?;
        if !cfg.set(k, v)? {
            return Err(coded("E_FEATURES_CORRUPT", format!("{}: unknown key {k}", path.display())));
        }
    }
    Ok(cfg)
}

/// Feature settings recorded in a checkpoint, if any.
fn checkpoint_features(ckpt: &Checkpoint) -> Result<Option<FeatureConfig>> {
    let mut cfg = FeatureConfig::default();
    let mut any = false;
    for (k, v) in &ckpt.extra {
        if k.starts_with("feature.") {
            cfg.set(k, v)?;
            any = true;
        }
    }
    Ok(any.then_some(cfg))
}

pub struct TrainRequest<'a> {
    pub manifest: &'a Path,
    pub features: &'a Path,
    pub out: &'a Path,
    pub warm_start: Option<&'a Path>,
    pub verbose: bool,
}

#[derive(Debug)]
pub struct TrainSummary {
    pub iterations: u64,
    pub final_loss: f64,
    pub best: Option<(u64, f64)>,
    pub stop: StopCause,
}

pub fn train(req: &TrainRequest, settings: &Settings) -> Result<TrainSummary> {
    let rows = read_manifest(req.manifest)?;
    if rows.is_empty() {
        return Err(coded("E_MANIFEST", format!("{} has no entries", req.manifest.display())));
    }
    let feat = read_features_cfg(req.features)?;
    let table = SymbolTable::from_texts(rows.iter().map(|(_, t)| t.as_str()));
    let mut items = Vec::with_capacity(rows.len());
    for (audio, text) in &rows {
        let path = cache_path(req.features, audio);
        if !path.is_file() {
            return Err(coded("E_FEATURES_MISSING", path.display().to_string()));
        }
        let mel = read_mel_cache(&path)?;
        if mel.cols() != feat.n_mels {
            return Err(coded(
                "E_FEATURES_CORRUPT",
                format!("{} has {} mel bands, {FEATURES_CFG} says {}", path.display(), mel.cols(), feat.n_mels),
            ));
        }
        items.push(TrainItem {
            id: audio.clone(),
            symbols: normalize_text(text, &table).with_context(|| audio.clone())?,
            mel,
        });
    }
    let model_cfg = ModelConfig {
        vocab_size: table.len(),
        n_mels: feat.n_mels,
        ..settings.model.clone()
    };
    model_cfg.validate()?;
    let train_cfg = lowres_tts::trainer::TrainConfig {
        seed: settings.seed,
        ..settings.train.clone()
    };

    let (params, optimizer) = match req.warm_start {
        Some(path) => {
            let src = load_checkpoint(path).with_context(|| format!("transfer: {}", path.display()))?;
            let spec = TransferSpec {
                seed: settings.seed,
                ..TransferSpec::default()
            };
            let warm = warm_start_checkpoint(&src, &table, &spec, &model_cfg).context("transfer")?;
            (warm.params, warm.optimizer)
        }
        None => (init_parameters(&model_cfg, settings.seed)?, None),
    };

    create_dir(req.out)?;
    let mut extra: BTreeMap<String, String> = feat.to_pairs().into_iter().collect();
    extra.insert("train.manifest_entries".into(), rows.len().to_string());
    let make_ckpt = |params: &lowres_tts::model::Parameters, iteration: u64| {
        let mut c = Checkpoint::new(model_cfg.clone(), table.symbols().to_vec(), params.clone());
        c.iteration = iteration;
        c.seed = settings.seed;
        c.extra = extra.clone();
        c
    };
    let best_path = req.out.join("best.ckpt");
    let mut save_err = None;
    let outcome = fit(
        &items,
        params,
        &model_cfg,
        &train_cfg,
        &settings.adam,
        optimizer,
        |p| {
            if req.verbose && (p.record.iteration % 50 == 0 || p.record.val_loss.is_some()) {
                eprintln!(
                    "iter {} train {:.4}{} lr {:.2e}",
                    p.record.iteration,
                    p.record.train_loss,
                    p.record.val_loss.map_or(String::new(), |v| format!(" val {v:.4}")),
                    p.record.lr
                );
            }
            if p.improved {
                if let Err(e) = save_checkpoint(&make_ckpt(p.params, p.record.iteration), &best_path) {
                    save_err = Some(e);
                    return false;
                }
            }
            true
        },
    )?;
    if let Some(e) = save_err {
        return Err(e.into());
    }
    let iterations = outcome.records.last().map_or(0, |r| r.iteration);
    let mut last = make_ckpt(&outcome.params, iterations);
    last.optimizer = Some(outcome.optimizer.clone());
    save_checkpoint(&last, &req.out.join("last.ckpt"))?;
    if outcome.best.is_none() {
        save_checkpoint(&make_ckpt(&outcome.params, iterations), &best_path)?;
    }
    if !outcome.records.is_empty() {
        export_loss_plot(&outcome.records, &req.out.join("loss_log"))?;
    }
    let (aligned, _) =
        model::forward_teacher_forced(&items[0].symbols, &items[0].mel, &outcome.params, &model_cfg, RunMode::Deterministic)?;
    write(&req.out.join("alignment.pgm"), aligned.alignment.to_pgm())?;
    write(&req.out.join("alignment.csv"), aligned.alignment.to_csv())?;

    if let StopCause::Diverged(msg) = &outcome.stop {
        return Err(coded(
            "E_DIVERGED",
            format!("{msg}; last good parameters saved to {}", req.out.join("last.ckpt").display()),
        ));
    }
    Ok(TrainSummary {
        iterations,
        final_loss: outcome.records.last().map_or(f64::NAN, |r| r.train_loss),
        best: outcome.best.as_ref().map(|b| (b.0, b.1)),
        stop: outcome.stop,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Vocoder {
    Griffinlim,
    Flow,
}

pub struct SynthRequest<'a> {
    pub ckpt: &'a Path,
    pub text: &'a str,
    pub out: &'a Path,
    pub vocoder: Vocoder,
    pub flow_ckpt: Option<&'a Path>,
    pub gl_iters: usize,
    pub alignment_out: Option<&'a Path>,
}

#[derive(Debug)]
pub struct SynthSummary {
    pub frames: usize,
    pub samples: usize,
    pub stop: StopReason,
}

pub fn synth(req: &SynthRequest, settings: &Settings) -> Result<SynthSummary> {
    let ckpt = load_checkpoint(req.ckpt).with_context(|| req.ckpt.display().to_string())?;
    let table = ckpt.symbol_table()?;
    let feat = checkpoint_features(&ckpt)?.unwrap_or(settings.features);
    let symbols = normalize_text(&clean_text(req.text), &table)?;
    let inf = model::infer(&symbols, &ckpt.params, &ckpt.model_cfg, RunMode::Inference { seed: settings.seed })?;
    let mel = MelSpectrogram {
        values: inf.output.mel_after.clone(),
        config: feat,
    };
    let clip = match req.vocoder {
        Vocoder::Griffinlim => griffin_lim_with_seed(&mel, req.gl_iters, &feat, settings.seed)?.clip,
        Vocoder::Flow => {
            let path = req
                .flow_ckpt
                .ok_or_else(|| coded("E_CONFIG", "--vocoder flow requires --flow-ckpt"))?;
            flow_vocode(&mel, path, settings.seed)?
        }
    };
    write_wav(req.out, &clip).with_context(|| req.out.display().to_string())?;
    if let Some(p) = req.alignment_out {
        write(p, inf.output.alignment.to_pgm())?;
    }
    Ok(SynthSummary {
        frames: mel.values.rows(),
        samples: clip.len(),
        stop: inf.stop_reason,
    })
}

fn flow_config(ckpt: &Checkpoint) -> Result<FlowConfig> {
    if ckpt.extra.get("kind").map(String::as_str) != Some("flow") {
        return Err(coded("E_CHECKPOINT", "not a flow vocoder checkpoint"));
    }
    let get = |k: &str| -> Result<String> {
        ckpt.extra
            .get(k)
            .cloned()
            .ok_or_else(|| coded("E_CHECKPOINT_CORRUPT", format!("flow checkpoint lacks {k}")))
    };
    let num = |k: &str| -> Result<f64> {
        get(k)?
            .parse()
            .map_err(|_| coded("E_CHECKPOINT_CORRUPT", format!("flow checkpoint has a bad {k}")))
    };
    Ok(FlowConfig {
        n_flows: num("flow.n_flows")? as usize,
        group_size: num("flow.group_size")? as usize,
        coupling_hidden: num("flow.coupling_hidden")? as usize,
        mel_cond_dim: num("flow.mel_cond_dim")? as usize,
        sigma: num("flow.sigma")?,
    })
}

fn flow_vocode(mel: &MelSpectrogram, path: &Path, seed: u64) -> Result<AudioClip> {
    let ckpt = load_checkpoint(path).with_context(|| path.display().to_string())?;
    let cfg = flow_config(&ckpt)?;
    if cfg.mel_cond_dim != mel.values.cols() {
        return Err(coded(
            "E_VOCODER",
            format!("flow expects {} mel bands, model produces {}", cfg.mel_cond_dim, mel.values.cols()),
        ));
    }
    let params = FlowParams::from_parameters(&ckpt.params, &cfg)?;
    let hop = mel.config.hop;
    let n_groups = (mel.values.rows() * hop / cfg.group_size).max(1);
    let cond = upsample_condition(&mel.values, n_groups, cfg.group_size, hop);
    let normal = Normal::new(0.0, cfg.sigma).map_err(|e| coded("E_CONFIG", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Matrix::from_vec(
        n_groups,
        cfg.group_size,
        (0..n_groups * cfg.group_size).map(|_| normal.sample(&mut rng)).collect(),
    );
    let x = flow_inverse(&z, &cond, &params, &cfg)?;
    let mut samples = x.as_slice().to_vec();
    let peak = samples.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if peak > 0.0 {
        samples.iter_mut().for_each(|v| *v *= 0.95 / peak);
    }
    Ok(AudioClip::clamped(samples, mel.config.sample_rate_hz)?)
}

pub struct FlowInitRequest<'a> {
    pub out: &'a Path,
    pub cfg: FlowConfig,
    pub train_wav: Option<&'a Path>,
    pub steps: usize,
    pub lr: f64,
}

/// Random flow, optionally fitted to one recording. Returns the NLL
/// history of the fit.
pub fn flow_init(req: &FlowInitRequest, settings: &Settings) -> Result<Vec<f64>> {
    let mut params = FlowParams::random(&req.cfg, settings.seed)?;
    let mut history = Vec::new();
    if let Some(wav) = req.train_wav {
        let clip = read_wav(wav).with_context(|| wav.display().to_string())?;
        let mel = mel_spectrogram(&clip, &settings.features)?;
        let g = req.cfg.group_size;
        let n_groups = clip.len() / g;
        if n_groups == 0 {
            return Err(coded("E_AUDIO", format!("{} is shorter than one group", wav.display())));
        }
        let x = Matrix::from_vec(n_groups, g, clip.samples()[..n_groups * g].to_vec());
        let cond = upsample_condition(&mel.values, n_groups, g, settings.features.hop);
        history = train_flow(&x, &cond, &mut params, &req.cfg, req.steps, req.lr)?;
    }
    let mut ckpt = Checkpoint::new(ModelConfig::default(), Vec::new(), params.to_parameters());
    ckpt.seed = settings.seed;
    ckpt.extra.insert("kind".into(), "flow".into());
    for (k, v) in [
        ("flow.n_flows", req.cfg.n_flows.to_string()),
        ("flow.group_size", req.cfg.group_size.to_string()),
        ("flow.coupling_hidden", req.cfg.coupling_hidden.to_string()),
        ("flow.mel_cond_dim", req.cfg.mel_cond_dim.to_string()),
        ("flow.sigma", format!("{:?}", req.cfg.sigma)),
    ] {
        ckpt.extra.insert(k.into(), v);
    }
    for (k, v) in settings.features.to_pairs() {
        ckpt.extra.insert(k, v);
    }
    save_checkpoint(&ckpt, req.out)?;
    Ok(history)
}

pub fn align_score(path: &Path, band: f64) -> Result<f64> {
    let is_pgm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    let a = if is_pgm {
        let bytes = std::fs::read(path).with_context(|| path.display().to_string())?;
        AlignmentMatrix::from_pgm(&bytes)?
    } else {
        let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
        AlignmentMatrix::from_csv(&text)?
    };
    Ok(diagonality(&a, band)?)
}

pub fn mos(ratings: &Path, confidence: f64) -> Result<String> {
    let text = std::fs::read_to_string(ratings).with_context(|| ratings.display().to_string())?;
    let samples = parse_mos_csv(&text)?;
    let mut reports = Vec::new();
    for dim in MosDimension::ALL {
        if samples.iter().any(|s| s.dimension == dim) {
            reports.push(mos_report(&samples, dim, confidence)?);
        }
    }
    let mut out: String = reports.iter().map(|r| format!("{r}\n")).collect();
    if let Some(overall) = overall_mos(&reports) {
        out.push_str(&format!("overall: {overall:.2}\n"));
    }
    Ok(out)
}

pub fn mos_invert(n: usize, half_width: f64, confidence: f64) -> Result<f64> {
    Ok(implied_std_dev(n, half_width, confidence)?)
}

pub struct SurgeryRequest<'a> {
    pub src: &'a Path,
    pub target_manifest: &'a Path,
    pub out: Option<&'a Path>,
    pub exclude: Vec<String>,
    pub dry_run: bool,
}

pub fn surgery(req: &SurgeryRequest, settings: &Settings) -> Result<String> {
    let src = load_checkpoint(req.src).with_context(|| req.src.display().to_string())?;
    let rows = read_manifest(req.target_manifest)?;
    let table = SymbolTable::from_texts(rows.iter().map(|(_, t)| t.as_str()));
    let target_cfg = ModelConfig {
        vocab_size: table.len(),
        ..src.model_cfg.clone()
    };
    let mut spec = TransferSpec {
        seed: settings.seed,
        ..TransferSpec::default()
    };
    if !req.exclude.is_empty() {
        spec.exclude_name_prefixes = req.exclude.clone();
    }
    let report = compat_report(&src, &target_cfg, &spec);
    if req.dry_run {
        if !report.is_compatible() {
            return Err(coded("E_INCOMPATIBLE_ARCHITECTURE", report.mismatches.join("; ")));
        }
        return Ok(report.to_string());
    }
    let out = req.out.ok_or_else(|| coded("E_CONFIG", "--out is required unless --dry-run is given"))?;
    let warm = warm_start_checkpoint(&src, &table, &spec, &target_cfg)?;
    save_checkpoint(&warm, out)?;
    Ok(format!(
        "copied {} tensors, re-initialised {}, dropped {}; wrote {}\n",
        report.count(lowres_tts::transfer::Decision::Copy),
        report.count(lowres_tts::transfer::Decision::Reinit),
        report.count(lowres_tts::transfer::Decision::Drop),
        out.display()
    ))
}
