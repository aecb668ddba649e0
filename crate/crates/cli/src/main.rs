mod commands;
mod errors;
mod pipeline;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use lowres_tts::vocoder::FlowConfig;

use commands::Vocoder;
use pipeline::Stage;
use settings::Settings;

/// Low-resource text-to-speech toolkit.
#[derive(Debug, Parser)]
#[command(name = "lowres-tts", version, propagate_version = true)]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// key=value settings file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Progress on stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Resample, trim and segment a directory of <stem>.wav / <stem>.txt pairs.
    Prep(PrepArgs),
    /// Print corpus statistics for a manifest.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Compute the log-mel cache for every manifest entry.
    Features(FeaturesArgs),
    /// Train the spectrogram model.
    Train(TrainArgs),
    /// Synthesise one sentence.
    Synth(SynthArgs),
    /// Diagonality of an attention matrix.
    AlignScore {
        /// CSV or 8-bit PGM alignment.
        #[arg(long)]
        alignment: PathBuf,
        #[arg(long, default_value_t = 0.15, value_parser = band)]
        band: f64,
    },
    /// MOS confidence intervals, or the rater spread implied by a published one.
    Mos(MosArgs),
    /// Warm-start a checkpoint for a new symbol set.
    Surgery(SurgeryArgs),
    /// Create a flow vocoder checkpoint, optionally fitted to one recording.
    FlowInit(FlowInitArgs),
    /// Run prep, features, train and synth in one run directory.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
struct PrepArgs {
    #[arg(long = "in", value_name = "DIR")]
    input: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Target sample rate in Hz.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1000..=192000))]
    rate: Option<u32>,
    /// Interior silences are shortened to this many seconds.
    #[arg(long, value_parser = non_negative)]
    max_silence: Option<f64>,
    /// Longest chunk in seconds.
    #[arg(long, value_parser = positive)]
    max_chunk: Option<f64>,
}

#[derive(Debug, Args)]
struct FeatureFlags {
    #[arg(long, value_parser = clap::value_parser!(u32).range(1000..=192000))]
    sample_rate: Option<u32>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=512))]
    n_mels: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..=65536))]
    fft_size: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=65536))]
    hop: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=65536))]
    win_length: Option<u64>,
    #[arg(long, value_parser = positive)]
    fmax: Option<f64>,
}

#[derive(Debug, Args)]
struct FeaturesArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[command(flatten)]
    feature: FeatureFlags,
}

#[derive(Debug, Args)]
struct TrainFlags {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    max_iterations: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    batch_size: Option<u64>,
    #[arg(long, value_parser = positive)]
    lr: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory written by `features`.
    #[arg(long, value_name = "DIR")]
    features: PathBuf,
    /// Checkpoint directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Pretrained checkpoint to transfer from.
    #[arg(long, value_name = "CKPT")]
    warm_start: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, value_name = "CKPT")]
    ckpt: PathBuf,
    #[arg(long)]
    text: String,
    #[arg(long, value_name = "WAV")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Vocoder::Griffinlim)]
    vocoder: Vocoder,
    #[arg(long, value_name = "CKPT", required_if_eq("vocoder", "flow"))]
    flow_ckpt: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=10000))]
    gl_iters: Option<u64>,
    /// Also write the attention matrix as a PGM image.
    #[arg(long, value_name = "PGM")]
    alignment: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MosArgs {
    /// CSV with header rater_id,utterance_id,dimension,score.
    #[arg(long, required_unless_present = "invert", conflicts_with = "invert")]
    ratings: Option<PathBuf>,
    #[arg(long, default_value_t = 0.95, value_parser = open_unit)]
    confidence: f64,
    /// Recover the rater standard deviation from n and a half-width.
    #[arg(long, requires_all = ["n", "half_width"])]
    invert: bool,
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    n: Option<u64>,
    #[arg(long, value_parser = positive)]
    half_width: Option<f64>,
}

#[derive(Debug, Args)]
struct SurgeryArgs {
    #[arg(long, value_name = "CKPT")]
    src: PathBuf,
    /// Manifest of the target corpus; its transcripts define the new symbols.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_name = "CKPT", required_unless_present = "dry_run")]
    out: Option<PathBuf>,
    /// Tensor name prefix to re-initialise instead of copying. Repeatable.
    #[arg(long, value_name = "PREFIX")]
    exclude: Vec<String>,
    /// Print the per-tensor plan without writing anything.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Debug, Args)]
struct FlowInitArgs {
    #[arg(long, value_name = "CKPT")]
    out: PathBuf,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..=64))]
    n_flows: u64,
    /// Even number of samples per group.
    #[arg(long, default_value_t = 8, value_parser = even_group)]
    group_size: usize,
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u64).range(1..=4096))]
    hidden: u64,
    #[arg(long, default_value_t = 1.0, value_parser = positive)]
    sigma: f64,
    /// Recording to fit the flow to.
    #[arg(long, value_name = "WAV")]
    train_wav: Option<PathBuf>,
    #[arg(long, default_value_t = 100, requires = "train_wav")]
    steps: usize,
    #[arg(long, default_value_t = 1e-3, value_parser = positive, requires = "train_wav")]
    flow_lr: f64,
    #[command(flatten)]
    feature: FeatureFlags,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    /// Directory of raw <stem>.wav / <stem>.txt pairs.
    #[arg(long, value_name = "DIR")]
    raw: PathBuf,
    #[arg(long, value_name = "DIR")]
    run: PathBuf,
    #[arg(long, value_name = "CKPT")]
    warm_start: Option<PathBuf>,
    /// Sentence for the final sample.
    #[arg(long)]
    text: Option<String>,
    #[arg(long, value_enum)]
    stop_after: Option<Stage>,
    #[command(flatten)]
    train: TrainFlags,
}

fn parse_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|_| format!("{s:?} is not a number"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{s} is not finite"))
    }
}

fn positive(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err("must be greater than 0".into())
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v >= 0.0 {
        Ok(v)
    } else {
        Err("must not be negative".into())
    }
}

fn open_unit(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err("must lie strictly between 0 and 1".into())
    }
}

fn band(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err("must lie in [0, 1]".into())
    }
}

fn even_group(s: &str) -> Result<usize, String> {
    let v: usize = s.trim().parse().map_err(|_| format!("{s:?} is not a count"))?;
    if v >= 2 && v % 2 == 0 && v <= 4096 {
        Ok(v)
    } else {
        Err("must be an even number between 2 and 4096".into())
    }
}

impl FeatureFlags {
    fn apply(&self, s: &mut Settings) {
        let f = &mut s.features;
        if let Some(v) = self.sample_rate {
            f.sample_rate_hz = v;
        }
        if let Some(v) = self.n_mels {
            f.n_mels = v as usize;
        }
        if let Some(v) = self.fft_size {
            f.fft_size = v as usize;
        }
        if let Some(v) = self.hop {
            f.hop = v as usize;
        }
        if let Some(v) = self.win_length {
            f.win_length = v as usize;
        }
        if let Some(v) = self.fmax {
            f.fmax_hz = v;
        }
    }
}

impl TrainFlags {
    fn apply(&self, s: &mut Settings) {
        if let Some(v) = self.max_iterations {
            s.train.max_iterations = Some(v);
        }
        if let Some(v) = self.batch_size {
            s.train.batch_size = v as usize;
        }
        if let Some(v) = self.lr {
            s.adam.lr = v;
        }
    }
}

/// Built-in defaults, then the settings file, then flags.
fn resolve_settings(cli: &Cli) -> Result<Settings> {
    let mut s = Settings::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        s.seed = seed;
    }
    match &cli.command {
        Command::Prep(a) => {
            if let Some(v) = a.rate {
                s.prep.target_rate_hz = v;
            }
            if let Some(v) = a.max_silence {
                s.prep.vad.max_internal_silence_sec = v;
            }
            if let Some(v) = a.max_chunk {
                s.prep.max_chunk_sec = v;
            }
        }
        Command::Features(a) => a.feature.apply(&mut s),
        Command::FlowInit(a) => a.feature.apply(&mut s),
        Command::Train(a) => a.train.apply(&mut s),
        Command::Synth(a) => {
            if let Some(v) = a.gl_iters {
                s.synth.gl_iters = v as usize;
            }
        }
        Command::Pipeline(a) => {
            a.train.apply(&mut s);
            if let Some(t) = &a.text {
                s.synth.text = Some(t.clone());
            }
        }
        _ => {}
    }
    s.validate()?;
    Ok(s)
}

fn run(cli: Cli) -> Result<()> {
    let settings = resolve_settings(&cli)?;
    match &cli.command {
        Command::Prep(a) => {
            let entries = commands::prep(&a.input, &a.out, &settings.prep)?;
            println!("wrote {} utterances to {}", entries.len(), a.out.join("manifest.tsv").display());
        }
        Command::Stats { manifest } => print!("{}", commands::stats(manifest)?),
        Command::Features(a) => {
            let n = commands::features(&a.manifest, &a.out, &settings.features)?;
            println!("wrote {n} mel caches to {}", a.out.display());
        }
        Command::Train(a) => {
            let s = commands::train(
                &commands::TrainRequest {
                    manifest: &a.manifest,
                    features: &a.features,
                    out: &a.out,
                    warm_start: a.warm_start.as_deref(),
                    verbose: cli.verbose,
                },
                &settings,
            )?;
            print!("trained {} iterations, final train loss {:.4}", s.iterations, s.final_loss);
            if let Some((it, loss)) = s.best {
                print!(", best validation loss {loss:.4} at {it}");
            }
            println!(" ({:?})", s.stop);
        }
        Command::Synth(a) => {
            let s = commands::synth(
                &commands::SynthRequest {
                    ckpt: &a.ckpt,
                    text: &a.text,
                    out: &a.out,
                    vocoder: a.vocoder,
                    flow_ckpt: a.flow_ckpt.as_deref(),
                    gl_iters: settings.synth.gl_iters,
                    alignment_out: a.alignment.as_deref(),
                },
                &settings,
            )?;
            println!("{} frames, {} samples ({:?})", s.frames, s.samples, s.stop);
        }
        Command::AlignScore { alignment, band } => {
            println!("{:.6}", commands::align_score(alignment, *band)?);
        }
        Command::Mos(a) => {
            if a.invert {
                let n = a.n.unwrap_or(2) as usize;
                let hw = a.half_width.unwrap_or(0.0);
                let s = commands::mos_invert(n, hw, a.confidence)?;
                println!("implied rater standard deviation: {s:.4}");
            } else if let Some(r) = &a.ratings {
                print!("{}", commands::mos(r, a.confidence)?);
            }
        }
        Command::Surgery(a) => {
            let out = commands::surgery(
                &commands::SurgeryRequest {
                    src: &a.src,
                    target_manifest: &a.manifest,
                    out: a.out.as_deref(),
                    exclude: a.exclude.clone(),
                    dry_run: a.dry_run,
                },
                &settings,
            )?;
            print!("{out}");
        }
        Command::FlowInit(a) => {
            let cfg = FlowConfig {
                n_flows: a.n_flows as usize,
                group_size: a.group_size,
                coupling_hidden: a.hidden as usize,
                mel_cond_dim: settings.features.n_mels,
                sigma: a.sigma,
            };
            let history = commands::flow_init(
                &commands::FlowInitRequest {
                    out: &a.out,
                    cfg,
                    train_wav: a.train_wav.as_deref(),
                    steps: a.steps,
                    lr: a.flow_lr,
                },
                &settings,
            )?;
            match (history.first(), history.last()) {
                (Some(a0), Some(a1)) => println!("flow NLL {a0:.4} -> {a1:.4}"),
                _ => println!("wrote untrained flow"),
            }
        }
        Command::Pipeline(a) => {
            let report = pipeline::run(
                &pipeline::PipelineRequest {
                    raw: &a.raw,
                    run: &a.run,
                    warm_start: a.warm_start.as_deref(),
                    stop_after: a.stop_after,
                    verbose: cli.verbose,
                },
                &settings,
            )?;
            let names = |v: &[Stage]| v.iter().map(|s| s.name()).collect::<Vec<_>>().join(",");
            println!("ran [{}] skipped [{}]", names(&report.ran), names(&report.skipped));
        }
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("LOWRES_TTS_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| errors::coded("E_CONFIG", format!("LOWRES_TTS_THREADS={v:?} is not a positive integer")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| errors::coded("E_RUNTIME", e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match configure_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", errors::render(&e));
            ExitCode::from(1)
        }
    }
}
