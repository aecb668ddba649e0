//! Checkpoint files and warm-start surgery.
//!
//! A checkpoint is `"LRTT"`, a little-endian u32 version, a u64 meta length,
//! a UTF-8 meta block of `key: value` lines including a tensor directory,
//! then raw little-endian f32 payloads in directory order.
//!
//! Surgery carries every tensor of a source model over to a new vocabulary
//! except the excluded ones (by default the text embedding and all
//! optimizer state), which are dropped or freshly initialised.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::SymbolTable;
use crate::model::{parameter_shapes, ModelConfig, ModelError, Parameters, Tensor};
use crate::trainer::OptimizerState;

pub const MAGIC: &[u8; 4] = b"LRTT";
pub const FORMAT_VERSION: u32 = 1;
const OPT_M: &str = "optimizer.m.";
const OPT_V: &str = "optimizer.v.";

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint version {found} is not supported (expected {FORMAT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("incompatible architecture: {}", .0.join(", "))]
    IncompatibleArchitecture(Vec<String>),
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("invalid transfer spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn corrupt(msg: impl Into<String>) -> TransferError {
    TransferError::CorruptCheckpoint(msg.into())
}

/// Model parameters plus everything needed to resume or transfer them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_cfg: ModelConfig,
    /// Character vocabulary in id order (padding and EOS excluded).
    pub vocab: Vec<char>,
    pub iteration: u64,
    pub seed: u64,
    /// Free-form metadata such as the feature configuration.
    pub extra: BTreeMap<String, String>,
    pub params: Parameters,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn new(model_cfg: ModelConfig, vocab: Vec<char>, params: Parameters) -> Self {
        Self {
            model_cfg,
            vocab,
            iteration: 0,
            seed: 0,
            extra: BTreeMap::new(),
            params,
            optimizer: None,
        }
    }

    pub fn symbol_table(&self) -> Result<SymbolTable, TransferError> {
        SymbolTable::new(self.vocab.clone()).map_err(|e| corrupt(format!("vocabulary: {e}")))
    }

    /// Every stored tensor by its on-disk name.
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self.params.iter().map(|(k, t)| (k.clone(), t)).collect();
        if let Some(opt) = &self.optimizer {
            out.extend(opt.m.iter().map(|(k, t)| (format!("{OPT_M}{k}"), t)));
            out.extend(opt.v.iter().map(|(k, t)| (format!("{OPT_V}{k}"), t)));
        }
        out
    }

    /// Serialises to bytes. Values are stored as f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.named_tensors();
        let mut meta = String::new();
        let mut line = |k: &str, v: &str| {
            meta.push_str(k);
            meta.push_str(": ");
            meta.push_str(v);
            meta.push('\n');
        };
        line("iteration", &self.iteration.to_string());
        line("seed", &self.seed.to_string());
        let vocab: Vec<String> = self.vocab.iter().map(|c| format!("{:04X}", *c as u32)).collect();
        line("vocab", &vocab.join(" "));
        for (k, v) in self.model_cfg.to_pairs() {
            line(&k, &v);
        }
        for (k, v) in &self.extra {
            line(&format!("extra.{k}"), v);
        }
        if let Some(opt) = &self.optimizer {
            line("optimizer.step", &opt.step.to_string());
        }
        line("tensors", &tensors.len().to_string());
        let mut offset = 0usize;
        for (name, t) in &tensors {
            let shape: Vec<String> = t.shape.iter().map(usize::to_string).collect();
            line(
                "tensor",
                &format!("{name} dtype=f32 shape={} offset={offset}", shape.join("x")),
            );
            offset += t.data.len() * 4;
        }
        let mut out = Vec::with_capacity(16 + meta.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        for (_, t) in &tensors {
            for v in &t.data {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TransferError> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic or truncated header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(TransferError::VersionMismatch { found: version });
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let meta_end = 16usize.checked_add(meta_len).filter(|&e| e <= bytes.len());
        let meta_end = meta_end.ok_or_else(|| corrupt("meta block runs past end of file"))?;
        let meta = std::str::from_utf8(&bytes[16..meta_end]).map_err(|_| corrupt("meta block is not UTF-8"))?;
        let payload = &bytes[meta_end..];

        let mut cfg = ModelConfig::default();
        let mut ckpt = Checkpoint::new(ModelConfig::default(), Vec::new(), Parameters::new());
        let mut opt_step = None;
        let mut declared = None;
        let mut directory = Vec::new();
        for raw in meta.lines() {
            let (key, value) = raw.split_once(": ").ok_or_else(|| corrupt(format!("bad meta line {raw:?}")))?;
            let num = |v: &str| v.parse::<u64>().map_err(|_| corrupt(format!("bad number in {raw:?}")));
            match key {
                "iteration" => ckpt.iteration = num(value)?,
                "seed" => ckpt.seed = num(value)?,
                "vocab" => {
                    ckpt.vocab = value
                        .split_whitespace()
                        .map(|h| u32::from_str_radix(h, 16).ok().and_then(char::from_u32))
                        .collect::<Option<_>>()
                        .ok_or_else(|| corrupt("bad vocabulary entry"))?;
                }
                "optimizer.step" => opt_step = Some(num(value)?),
                "tensors" => declared = Some(num(value)? as usize),
                "tensor" => directory.push(parse_directory_entry(value)?),
                k if k.starts_with("model.") => {
                    if !cfg.set(k, value).map_err(|e| corrupt(e.to_string()))? {
                        return Err(corrupt(format!("unknown model field {k}")));
                    }
                }
                k if k.starts_with("extra.") => {
                    ckpt.extra.insert(k["extra.".len()..].to_string(), value.to_string());
                }
                other => return Err(corrupt(format!("unknown meta key {other}"))),
            }
        }
        if declared != Some(directory.len()) {
            return Err(corrupt("tensor count does not match directory"));
        }
        let mut seen = BTreeSet::new();
        let mut expected_offset = 0usize;
        let mut m = Parameters::new();
        let mut v = Parameters::new();
        for (name, shape, offset) in directory {
            if !seen.insert(name.clone()) {
                return Err(corrupt(format!("duplicate tensor {name}")));
            }
            if offset != expected_offset {
                return Err(corrupt(format!("tensor {name} offset {offset} out of order")));
            }
            let n: usize = shape.iter().product();
            let end = offset + n * 4;
            let data = payload
                .get(offset..end)
                .ok_or_else(|| corrupt(format!("payload truncated in tensor {name}")))?
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
                .collect();
            expected_offset = end;
            let t = Tensor { shape, data };
            if let Some(base) = name.strip_prefix(OPT_M) {
                m.insert(base, t);
            } else if let Some(base) = name.strip_prefix(OPT_V) {
                v.insert(base, t);
            } else {
                ckpt.params.insert(name, t);
            }
        }
        if expected_offset != payload.len() {
            return Err(corrupt("trailing bytes after last tensor"));
        }
        ckpt.model_cfg = cfg;
        if let Some(step) = opt_step {
            ckpt.optimizer = Some(OptimizerState { step, m, v });
        } else if !m.is_empty() || !v.is_empty() {
            return Err(corrupt("optimizer tensors without optimizer.step"));
        }
        Ok(ckpt)
    }
}

fn parse_directory_entry(value: &str) -> Result<(String, Vec<usize>, usize), TransferError> {
    let mut parts = value.split_whitespace();
    let name = parts.next().ok_or_else(|| corrupt("empty tensor entry"))?.to_string();
    let (mut shape, mut offset, mut dtype) = (None, None, None);
    for kv in parts {
        match kv.split_once('=') {
            Some(("dtype", d)) => dtype = Some(d),
            Some(("shape", s)) => {
                shape = s
                    .split('x')
                    .map(|d| d.parse::<usize>().ok())
                    .collect::<Option<Vec<_>>>();
            }
            Some(("offset", o)) => offset = o.parse::<usize>().ok(),
            _ => return Err(corrupt(format!("bad tensor attribute {kv:?}"))),
        }
    }
    if dtype != Some("f32") {
        return Err(corrupt(format!("tensor {name}: unsupported dtype")));
    }
    match (shape, offset) {
        (Some(s), Some(o)) => Ok((name, s, o)),
        _ => Err(corrupt(format!("tensor {name}: missing shape or offset"))),
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), TransferError> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|source| TransferError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TransferError> {
    let bytes = std::fs::read(path).map_err(|source| TransferError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}

/// Which tensors to leave behind and how to initialise replacements.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferSpec {
    pub exclude_name_prefixes: Vec<String>,
    /// Replacements are drawn from uniform(−half_range, half_range).
    pub half_range: f64,
    pub seed: u64,
}

impl Default for TransferSpec {
    fn default() -> Self {
        Self {
            exclude_name_prefixes: vec!["embedding.".into(), "optimizer.".into()],
            half_range: 0.1,
            seed: 0,
        }
    }
}

impl TransferSpec {
    pub fn excludes(&self, name: &str) -> bool {
        self.exclude_name_prefixes.iter().any(|p| name.starts_with(p.as_str()))
    }

    fn validate(&self) -> Result<(), TransferError> {
        if self.exclude_name_prefixes.iter().any(String::is_empty) {
            return Err(TransferError::InvalidSpec("empty exclude prefix".into()));
        }
        if !(self.half_range > 0.0) {
            return Err(TransferError::InvalidSpec("half_range must be positive".into()));
        }
        Ok(())
    }

    /// Per-tensor stream so a tensor's values depend only on the seed and
    /// its name.
    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in name.bytes() {
            h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
        }
        ChaCha8Rng::seed_from_u64(self.seed ^ h)
    }
}

fn architecture_diff(src: &ModelConfig, target: &ModelConfig) -> Vec<String> {
    src.diff(target).into_iter().filter(|f| f != "vocab_size").collect()
}

/// Builds warm-start parameters for `target_cfg` from `src`.
pub fn surgery(
    src: &Checkpoint,
    target_vocab: &SymbolTable,
    spec: &TransferSpec,
    target_cfg: &ModelConfig,
) -> Result<Parameters, TransferError> {
    spec.validate()?;
    target_cfg.validate()?;
    let mut diff = architecture_diff(&src.model_cfg, target_cfg);
    if target_cfg.vocab_size != target_vocab.len() {
        diff.push(format!(
            "vocab_size ({} in config, {} in symbol table)",
            target_cfg.vocab_size,
            target_vocab.len()
        ));
    }
    if !diff.is_empty() {
        return Err(TransferError::IncompatibleArchitecture(diff));
    }
    let mut out = Parameters::new();
    for (name, shape) in parameter_shapes(target_cfg) {
        if spec.excludes(&name) {
            let mut rng = spec.rng_for(&name);
            let mut t = Tensor::zeros(&shape);
            let r = spec.half_range;
            t.data.iter_mut().for_each(|v| *v = rng.random_range(-r..r));
            out.insert(name, t);
            continue;
        }
        let t = src.params.get(&name).ok_or_else(|| TransferError::MissingTensor(name.clone()))?;
        if t.shape != shape {
            return Err(TransferError::IncompatibleArchitecture(vec![format!(
                "{name} has shape {:?}, expected {shape:?}",
                t.shape
            )]));
        }
        out.insert(name, t.clone());
    }
    out.validate(target_cfg)?;
    Ok(out)
}

/// [`surgery`] packaged as a fresh checkpoint: iteration 0, zeroed
/// optimizer state, the source's `extra` metadata carried over.
pub fn warm_start_checkpoint(
    src: &Checkpoint,
    target_vocab: &SymbolTable,
    spec: &TransferSpec,
    target_cfg: &ModelConfig,
) -> Result<Checkpoint, TransferError> {
    let params = surgery(src, target_vocab, spec, target_cfg)?;
    let mut out = Checkpoint::new(target_cfg.clone(), target_vocab.symbols().to_vec(), params);
    out.seed = spec.seed;
    out.extra = src.extra.clone();
    out.optimizer = Some(OptimizerState::new(&out.params));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Copy,
    Reinit,
    Drop,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Copy => "COPY",
            Decision::Reinit => "REINIT",
            Decision::Drop => "DROP",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompatRow {
    pub name: String,
    pub decision: Decision,
    pub src_shape: Option<Vec<usize>>,
    pub target_shape: Option<Vec<usize>>,
}

/// Dry run of [`surgery`]: what happens to each tensor, and every problem
/// that would make the real run fail.
#[derive(Debug, Clone, PartialEq)]
pub struct CompatReport {
    pub rows: Vec<CompatRow>,
    pub mismatches: Vec<String>,
}

impl CompatReport {
    pub fn is_compatible(&self) -> bool {
        self.mismatches.is_empty()
    }

    pub fn count(&self, d: Decision) -> usize {
        self.rows.iter().filter(|r| r.decision == d).count()
    }
}

impl fmt::Display for CompatReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let shape = |s: &Option<Vec<usize>>| {
            s.as_ref().map_or("-".to_string(), |v| {
                v.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
            })
        };
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
        for r in &self.rows {
            writeln!(
                f,
                "{:<6} {:<width$}  {} -> {}",
                r.decision.to_string(),
                r.name,
                shape(&r.src_shape),
                shape(&r.target_shape)
            )?;
        }
        for m in &self.mismatches {
            writeln!(f, "MISMATCH {m}")?;
        }
        Ok(())
    }
}

pub fn compat_report(src: &Checkpoint, target_cfg: &ModelConfig, spec: &TransferSpec) -> CompatReport {
    let mut rows = Vec::new();
    let mut mismatches: Vec<String> = architecture_diff(&src.model_cfg, target_cfg)
        .into_iter()
        .map(|f| format!("model.{f} differs"))
        .collect();
    let target: BTreeMap<String, Vec<usize>> = parameter_shapes(target_cfg).into_iter().collect();
    for (name, shape) in &target {
        let src_shape = src.params.get(name).map(|t| t.shape.clone());
        let decision = if spec.excludes(name) {
            Decision::Reinit
        } else {
            match &src_shape {
                None => mismatches.push(format!("{name} missing from source")),
                Some(s) if s != shape => mismatches.push(format!("{name} shape {s:?} vs {shape:?}")),
                _ => {}
            }
            Decision::Copy
        };
        rows.push(CompatRow {
            name: name.clone(),
            decision,
            src_shape,
            target_shape: Some(shape.clone()),
        });
    }
    for (name, t) in src.named_tensors() {
        if !target.contains_key(&name) {
            rows.push(CompatRow {
                name,
                decision: Decision::Drop,
                src_shape: Some(t.shape.clone()),
                target_shape: None,
            });
        }
    }
    CompatReport { rows, mismatches }
}
