//! Run configuration: one JSON file drives data generation, training,
//! evaluation, sampling and plotting. Unknown keys are rejected at every
//! level, and parse errors carry the line and column of the offending token.
//!
//! Relative paths in the file resolve against the file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{AnnotatorPolicy, Dataset, Split, SynthSpec};
use crate::metrics::GedEstimator;
use crate::model::{channel_schedule, default_alpha, CeReduction, ModelConfig};
use crate::train::{AnnotatorScope, EvalConfig, TrainConfig, ValLoss};
use crate::{Error, Result};

/// Environment variable naming the default output root.
pub const RUN_ROOT_ENV: &str = "PHISEG_RUN_ROOT";
/// Output root when neither a flag, the config nor the environment names one.
pub const DEFAULT_RUN_ROOT: &str = "phiseg_runs";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Phiseg,
    Deterministic,
}

/// One model variant. Image size, input channels and classes come from
/// the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub name: String,
    pub kind: MethodKind,
    #[serde(default = "default_latent_levels")]
    pub latent_levels: usize,
    #[serde(default = "default_resolution_levels")]
    pub resolution_levels: usize,
    #[serde(default = "default_latent_channels")]
    pub latent_channels: usize,
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    /// Per-level KL weights; `2^(l-1)` when absent.
    #[serde(default)]
    pub alpha: Option<Vec<f64>>,
    #[serde(default)]
    pub ce_reduction: CeReduction,
}

fn default_latent_levels() -> usize {
    3
}
fn default_resolution_levels() -> usize {
    4
}
fn default_latent_channels() -> usize {
    2
}
fn default_base_channels() -> usize {
    4
}

impl MethodSpec {
    pub fn new(name: impl Into<String>, kind: MethodKind, latent_levels: usize) -> Self {
        Self {
            name: name.into(),
            kind,
            latent_levels,
            resolution_levels: default_resolution_levels().max(latent_levels),
            latent_channels: default_latent_channels(),
            base_channels: default_base_channels(),
            alpha: None,
            ce_reduction: CeReduction::Sum,
        }
    }

    /// Default name for a kind: `det` or `phiseg_l<L>`.
    pub fn default_name(kind: MethodKind, latent_levels: usize) -> String {
        match kind {
            MethodKind::Phiseg => format!("phiseg_l{latent_levels}"),
            MethodKind::Deterministic => "det".into(),
        }
    }

    pub fn model_config(&self, ds: &Dataset) -> Result<ModelConfig> {
        let deterministic = self.kind == MethodKind::Deterministic;
        let levels = if deterministic { 1 } else { self.latent_levels };
        let cfg = ModelConfig {
            latent_levels: levels,
            resolution_levels: self.resolution_levels,
            latent_channels: self.latent_channels,
            classes: ds.classes(),
            height: ds.manifest.height,
            width: ds.manifest.width,
            input_channels: ds.manifest.channels,
            channels: channel_schedule(self.base_channels, self.resolution_levels),
            alpha: self.alpha.clone().unwrap_or_else(|| default_alpha(levels)),
            deterministic,
            ce_reduction: self.ce_reduction,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub max_steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub val_interval: usize,
    pub policy: AnnotatorPolicy,
    pub val_loss: ValLoss,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            max_steps: 500,
            learning_rate: 1e-3,
            batch_size: 8,
            val_interval: 100,
            policy: AnnotatorPolicy::RandomPerImage,
            val_loss: ValLoss::Total,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, model: ModelConfig, seed: u64, checkpoint_dir: PathBuf) -> TrainConfig {
        TrainConfig {
            model,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_steps: self.max_steps,
            val_interval: self.val_interval,
            policy: self.policy,
            seed,
            val_loss: self.val_loss,
            checkpoint_dir: Some(checkpoint_dir),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n_samples: usize,
    pub split: Split,
    pub scope: AnnotatorScope,
    pub dice_annotator: usize,
    pub classes: Option<Vec<u8>>,
    pub estimator: GedEstimator,
    pub max_cases: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            n_samples: e.n_samples,
            split: e.split,
            scope: e.scope,
            dice_annotator: e.dice_annotator,
            classes: e.classes,
            estimator: e.estimator,
            max_cases: e.max_cases,
        }
    }
}

impl EvalSection {
    pub fn eval_config(&self, seed: u64) -> EvalConfig {
        EvalConfig {
            n_samples: self.n_samples,
            split: self.split,
            scope: self.scope,
            dice_annotator: self.dice_annotator,
            classes: self.classes.clone(),
            estimator: self.estimator,
            seed,
            max_cases: self.max_cases,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    /// Samples drawn per case.
    pub n: usize,
    /// Cases to sample; the first test case when empty.
    pub cases: Vec<String>,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self { n: 8, cases: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlotSection {
    /// Cases to plot; the sample section's cases when empty.
    pub cases: Vec<String>,
    /// Sample tiles per method row.
    pub tiles: usize,
    /// Integer magnification of every tile.
    pub scale: usize,
}

impl Default for PlotSection {
    fn default() -> Self {
        Self {
            cases: Vec::new(),
            tiles: 6,
            scale: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Output root. Overridden by `--out`; falls back to `$PHISEG_RUN_ROOT`.
    pub out: Option<PathBuf>,
    /// Seed for training, evaluation and sampling.
    pub seed: u64,
    pub data: SynthSpec,
    pub methods: Vec<MethodSpec>,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub sample: SampleSection,
    pub plot: PlotSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: None,
            seed: 0,
            data: SynthSpec::default(),
            methods: vec![MethodSpec::new("phiseg_l3", MethodKind::Phiseg, 3)],
            train: TrainSection::default(),
            eval: EvalSection::default(),
            sample: SampleSection::default(),
            plot: PlotSection::default(),
        }
    }
}

impl RunConfig {
    /// Parses a config; `origin` only labels diagnostics.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| {
            Error::InvalidConfig(format!("{}:{}:{}: {e}", origin.display(), e.line(), e.column()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and parses a config file, resolving relative paths against
    /// its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(out) = &cfg.out {
            if out.is_relative() {
                cfg.out = Some(base.join(out));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.methods {
            let ok = !m.name.is_empty() && m.name.chars().all(|c| c.is_ascii_alphanumeric() || "_-.".contains(c));
            if !ok || m.name.starts_with('.') {
                return Err(Error::InvalidConfig(format!("method name {:?} must be a plain file name", m.name)));
            }
            if !seen.insert(&m.name) {
                return Err(Error::InvalidConfig(format!("method {:?} listed twice", m.name)));
            }
        }
        if self.sample.n < 1 {
            return Err(Error::InvalidConfig("sample.n must be at least 1".into()));
        }
        if self.plot.tiles < 1 || self.plot.scale < 1 {
            return Err(Error::InvalidConfig("plot.tiles and plot.scale must be at least 1".into()));
        }
        Ok(())
    }

    /// Sets every seed in the file, the dataset's included.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.seed = seed;
    }

    pub fn method(&self, name: &str) -> Option<&MethodSpec> {
        self.methods.iter().find(|m| m.name == name)
    }
}

/// Output root: the flag, then the config, then `$PHISEG_RUN_ROOT`, then
/// [`DEFAULT_RUN_ROOT`]. The result is absolute.
pub fn resolve_run_root(flag: Option<&Path>, config: Option<&Path>) -> Result<PathBuf> {
    let env = std::env::var_os(RUN_ROOT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
    let chosen = flag
        .map(Path::to_path_buf)
        .or_else(|| config.map(Path::to_path_buf))
        .or(env)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_RUN_ROOT));
    if chosen.is_absolute() {
        return Ok(chosen);
    }
    let cwd = std::env::current_dir().map_err(|e| Error::io(".", e))?;
    Ok(cwd.join(chosen))
}

/// Directory layout of one run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: PathBuf) -> Self {
        Self { root }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn model_dir(&self, method: &str) -> PathBuf {
        self.root.join("models").join(method)
    }

    pub fn checkpoint(&self, method: &str) -> PathBuf {
        self.model_dir(method).join("best.ckpt")
    }

    pub fn metrics(&self, method: &str) -> PathBuf {
        self.root.join("eval").join(method).join("metrics.csv")
    }

    pub fn samples(&self, method: &str, case: &str) -> PathBuf {
        self.root.join("samples").join(method).join(case)
    }

    /// The binary sample set the plot command reads.
    pub fn sample_set(&self, method: &str, case: &str) -> PathBuf {
        self.samples(method, case).join("samples.bin")
    }

    pub fn plot(&self, case: &str) -> PathBuf {
        self.root.join("plots").join(format!("{case}.png"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = RunConfig::parse("{}", Path::new("x.json")).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_key_reports_line() {
        let text = "{\n  \"seed\": 1,\n  \"trian\": {}\n}";
        let err = RunConfig::parse(text, Path::new("run.json")).unwrap_err().to_string();
        assert!(err.contains("run.json:3:"), "{err}");
        assert!(err.contains("trian"), "{err}");
    }

    #[test]
    fn duplicate_methods_rejected() {
        let text = r#"{"methods":[{"name":"a","kind":"phiseg"},{"name":"a","kind":"deterministic"}]}"#;
        assert!(matches!(RunConfig::parse(text, Path::new("r.json")), Err(Error::InvalidConfig(_))));
    }
}
