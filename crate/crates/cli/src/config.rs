//! TOML run configurations: defaults, file loading, flag overrides, and the
//! resolved-config audit file every command writes before doing any work.
//!
//! Output directories are deliberately not part of the config files; a
//! config describes the run, `--out` says where it lands, so a rerun from
//! an emitted `run_config.toml` reproduces the artifacts byte for byte.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const RUN_CONFIG_FILE: &str = "run_config.toml";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub docs: usize,
    pub n: usize,
    pub l: usize,
    pub classes: usize,
    pub vocab_size: usize,
    pub signal_tokens: usize,
    pub noise_rate: f64,
    pub eval_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            docs: 2000,
            n: 8,
            l: 32,
            classes: 3,
            vocab_size: 400,
            signal_tokens: 16,
            noise_rate: 1.0,
            eval_fraction: 0.3,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthRunConfig {
    pub command: Option<String>,
    pub corpus: CorpusSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub n: usize,
    pub l: usize,
    pub classes: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            train: None,
            test: None,
            vocab: None,
            n: 8,
            l: 32,
            classes: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadSection {
    /// Truncation cap for the `truncate` baseline.
    pub truncate_cap: usize,
    /// Per-side token count for the `headtail` baseline.
    pub head_tail_len: usize,
}

impl Default for HeadSection {
    fn default() -> Self {
        HeadSection {
            truncate_cap: 512,
            head_tail_len: 128,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRunConfig {
    pub command: Option<String>,
    /// `skin` or a baseline: `truncate` | `headtail` | `slidewindow`.
    pub model: String,
    /// Encoder size preset: `toy` | `full`.
    pub preset: String,
    pub data: DataSection,
    pub head: HeadSection,
    pub train: skin_core::TrainConfig,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            command: None,
            model: "skin".into(),
            preset: "toy".into(),
            data: DataSection::default(),
            head: HeadSection::default(),
            train: skin_core::TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalRunConfig {
    pub command: Option<String>,
    /// `skin` | `prc` | `truncate` | `headtail` | `slidewindow`.
    pub model: String,
    pub checkpoint: Option<PathBuf>,
    pub data: DataSection,
}

impl Default for EvalRunConfig {
    fn default() -> Self {
        EvalRunConfig {
            command: None,
            model: "skin".into(),
            checkpoint: None,
            data: DataSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchRunConfig {
    pub command: Option<String>,
    pub sweep: SweepSection,
}

impl Default for BenchRunConfig {
    fn default() -> Self {
        BenchRunConfig {
            command: None,
            sweep: SweepSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub methods: Vec<String>,
    pub lengths: Vec<usize>,
    pub trials: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dims: String,
    pub fixed_segments: usize,
    pub fixed_seg_len: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            methods: vec![
                "bert".into(),
                "slidewindow".into(),
                "skin-invariable".into(),
                "skin-variable".into(),
            ],
            lengths: vec![128, 256, 512, 1024, 2048],
            trials: 5,
            batch_size: 16,
            seed: 7,
            dims: "toy".into(),
            fixed_segments: 8,
            fixed_seg_len: 32,
        }
    }
}

impl SweepSection {
    pub fn to_sweep_config(&self) -> Result<skin_core::cost::SweepConfig> {
        let methods = self
            .methods
            .iter()
            .map(|m| skin_core::cost::Method::parse(m).map_err(anyhow::Error::from))
            .collect::<Result<Vec<_>>>()?;
        Ok(skin_core::cost::SweepConfig {
            methods,
            lengths: self.lengths.clone(),
            trials: self.trials,
            batch_size: self.batch_size,
            seed: self.seed,
            dims: skin_core::cost::DimPreset::parse(&self.dims)?,
            fixed_segments: self.fixed_segments,
            fixed_seg_len: self.fixed_seg_len,
        })
    }
}

/// Load a TOML config of any command shape, rejecting unknown keys and
/// cross-command reuse.
pub fn load_config<T: serde::de::DeserializeOwned>(path: &Path, command: &str) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let value: toml::Value = toml::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))?;
    if let Some(cmd) = value.get("command").and_then(|v| v.as_str()) {
        if cmd != command {
            bail!(
                "config {} was emitted by `{}`, not `{}`",
                path.display(),
                cmd,
                command
            );
        }
    }
    let cfg: T = toml::from_str(&text)
        .with_context(|| format!("interpreting config {}", path.display()))?;
    Ok(cfg)
}

/// Refuse to write into an existing non-empty output directory unless
/// forced, then create it.
pub fn prepare_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let non_empty = std::fs::read_dir(out)
            .map(|mut d| d.next().is_some())
            .unwrap_or(false);
        if non_empty && !force {
            bail!(
                "output directory {} already exists and is not empty (use --force to overwrite)",
                out.display()
            );
        }
    }
    std::fs::create_dir_all(out)
        .with_context(|| format!("creating output directory {}", out.display()))?;
    Ok(())
}

/// Serialize the fully-resolved run config next to the outputs before any
/// work happens. This is the audit trail a rerun starts from.
pub fn write_run_config<T: Serialize>(out: &Path, cfg: &T) -> Result<PathBuf> {
    let path = out.join(RUN_CONFIG_FILE);
    let text = toml::to_string_pretty(cfg).context("serializing run config")?;
    std::fs::write(&path, text)
        .with_context(|| format!("writing run config {}", path.display()))?;
    Ok(path)
}
