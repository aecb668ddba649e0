//! End-to-end run: prep → features → train → synth in one run directory,
//! resumable per stage through stamp files.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use lowres_tts::corpus::read_manifest;

use crate::commands::{self, SynthRequest, TrainRequest, Vocoder};
use crate::errors::coded;
use crate::settings::Settings;

pub const RUNFMT: &str = "RUNFMT=1\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, clap::ValueEnum)]
pub enum Stage {
    Prep,
    Features,
    Train,
    Synth,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Prep, Stage::Features, Stage::Train, Stage::Synth];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Prep => "prep",
            Stage::Features => "features",
            Stage::Train => "train",
            Stage::Synth => "synth",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub struct PipelineRequest<'a> {
    pub raw: &'a Path,
    pub run: &'a Path,
    pub warm_start: Option<&'a Path>,
    pub stop_after: Option<Stage>,
    pub verbose: bool,
}

#[derive(Debug, Default, PartialEq)]
pub struct PipelineReport {
    pub ran: Vec<Stage>,
    pub skipped: Vec<Stage>,
}

struct Layout {
    root: PathBuf,
}

impl Layout {
    fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }
    fn manifest(&self) -> PathBuf {
        self.corpus().join("manifest.tsv")
    }
    fn features(&self) -> PathBuf {
        self.root.join("features")
    }
    fn train(&self) -> PathBuf {
        self.root.join("train")
    }
    fn synth(&self) -> PathBuf {
        self.root.join("synth")
    }
    fn stamp(&self, stage: Stage) -> PathBuf {
        self.root.join("stamps").join(format!("{stage}.done"))
    }
}

/// The settings text that pins a run directory. The warm-start source is
/// part of it so that resuming cannot silently switch initialisation.
fn pinned_config(settings: &Settings, warm_start: Option<&Path>) -> String {
    let mut text = settings.to_text();
    if let Some(p) = warm_start {
        text.push_str(&format!("# warm_start={}\n", p.display()));
    }
    text
}

fn open_run_dir(layout: &Layout, config: &str) -> Result<()> {
    let root = &layout.root;
    let marker = root.join("RUNFMT");
    let cfg_path = root.join("config.txt");
    if marker.exists() {
        let found = std::fs::read_to_string(&marker).with_context(|| marker.display().to_string())?;
        if found != RUNFMT {
            return Err(coded(
                "E_RUN_DIR",
                format!("{} has run format {:?}, expected {:?}", root.display(), found.trim(), RUNFMT.trim()),
            ));
        }
        let previous = std::fs::read_to_string(&cfg_path).with_context(|| cfg_path.display().to_string())?;
        if previous != config {
            return Err(coded(
                "E_RUN_DIR",
                format!("{} was started with different settings; use a new run directory", root.display()),
            ));
        }
        return Ok(());
    }
    if root.exists() && std::fs::read_dir(root)?.next().is_some() {
        return Err(coded("E_RUN_DIR", format!("{} is not empty and is not a run directory", root.display())));
    }
    std::fs::create_dir_all(root.join("stamps")).with_context(|| root.display().to_string())?;
    std::fs::write(&cfg_path, config).with_context(|| cfg_path.display().to_string())?;
    std::fs::write(&marker, RUNFMT).with_context(|| marker.display().to_string())?;
    Ok(())
}

pub fn run(req: &PipelineRequest, settings: &Settings) -> Result<PipelineReport> {
    let layout = Layout {
        root: req.run.to_path_buf(),
    };
    open_run_dir(&layout, &pinned_config(settings, req.warm_start))?;
    let mut report = PipelineReport::default();
    for stage in Stage::ALL {
        if layout.stamp(stage).exists() {
            if req.verbose {
                eprintln!("{stage}: already done");
            }
            report.skipped.push(stage);
        } else {
            if req.verbose {
                eprintln!("{stage}: running");
            }
            run_stage(stage, &layout, req, settings).with_context(|| stage.name())?;
            let stamp = layout.stamp(stage);
            std::fs::write(&stamp, "").with_context(|| stamp.display().to_string())?;
            report.ran.push(stage);
        }
        if req.stop_after == Some(stage) {
            break;
        }
    }
    Ok(report)
}

fn run_stage(stage: Stage, layout: &Layout, req: &PipelineRequest, settings: &Settings) -> Result<()> {
    match stage {
        Stage::Prep => {
            commands::prep(req.raw, &layout.corpus(), &settings.prep)?;
        }
        Stage::Features => {
            commands::features(&layout.manifest(), &layout.features(), &settings.features)?;
        }
        Stage::Train => {
            commands::train(
                &TrainRequest {
                    manifest: &layout.manifest(),
                    features: &layout.features(),
                    out: &layout.train(),
                    warm_start: req.warm_start,
                    verbose: req.verbose,
                },
                settings,
            )?;
        }
        Stage::Synth => {
            let text = match &settings.synth.text {
                Some(t) => t.clone(),
                None => read_manifest(&layout.manifest())?
                    .into_iter()
                    .next()
                    .map(|(_, t)| t)
                    .ok_or_else(|| coded("E_MANIFEST", "empty manifest"))?,
            };
            let dir = layout.synth();
            std::fs::create_dir_all(&dir).with_context(|| dir.display().to_string())?;
            std::fs::write(dir.join("sample.txt"), format!("{text}\n"))?;
            commands::synth(
                &SynthRequest {
                    ckpt: &layout.train().join("best.ckpt"),
                    text: &text,
                    out: &dir.join("sample.wav"),
                    vocoder: Vocoder::Griffinlim,
                    flow_ckpt: None,
                    gl_iters: settings.synth.gl_iters,
                    alignment_out: Some(&dir.join("alignment.pgm")),
                },
                settings,
            )?;
        }
    }
    Ok(())
}
