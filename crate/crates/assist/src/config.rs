use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use textrestore::degrade::DescribeMode;
use textrestore::model::{ModelConfig, Variant};
use textrestore::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Oracle,
    Remote,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    None,
    Oracle,
}

/// Which user text drives a refine request.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineText {
    /// Only the refine message itself.
    Latest,
    /// Every user message of the session so far, joined in order.
    History,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    /// Description endpoint (`{image_b64, prompt}` → `{text}`).
    pub mllm_endpoint: Option<String>,
    /// Optional text-encoder endpoint (`{text}` → `{rows}`).
    pub encoder_endpoint: Option<String>,
    pub timeout_secs: f64,
    pub fallback: Fallback,
    /// Description mode of the oracle provider.
    pub oracle_mode: DescribeMode,
    pub oracle_seed: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Oracle,
            mllm_endpoint: None,
            encoder_endpoint: None,
            timeout_secs: textrestore::textio::DEFAULT_TIMEOUT.as_secs_f64(),
            fallback: Fallback::None,
            oracle_mode: DescribeMode::Gt,
            oracle_seed: 0,
        }
    }
}

impl ProviderConfig {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs.max(0.001))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub checkpoint: Option<PathBuf>,
    pub port: u16,
    pub provider: ProviderConfig,
    pub refine_text: RefineText,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { checkpoint: None, port: 8080, provider: ProviderConfig::default(), refine_text: RefineText::Latest }
    }
}

impl ServiceConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Toy,
    Full,
}

/// Training configuration file: model preset and variant plus the
/// optimizer/data settings under `[train]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainFile {
    pub preset: Preset,
    pub variant: Variant,
    pub model_seed: u64,
    /// Overrides applied on top of the preset's training defaults.
    pub train: toml::Table,
}

impl Default for TrainFile {
    fn default() -> Self {
        Self { preset: Preset::Toy, variant: Variant::Full, model_seed: 0, train: toml::Table::new() }
    }
}

impl TrainFile {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn model(&self) -> ModelConfig {
        let base = match self.preset {
            Preset::Toy => ModelConfig::toy(),
            Preset::Full => ModelConfig::full(),
        };
        base.with_variant(self.variant).with_seed(self.model_seed)
    }

    /// The preset's training defaults with `[train]` keys overlaid.
    pub fn train(&self) -> anyhow::Result<TrainConfig> {
        let base = match self.preset {
            Preset::Toy => TrainConfig::toy(),
            Preset::Full => TrainConfig::default(),
        };
        let mut table = toml::Table::try_from(&base)?;
        for (k, v) in &self.train {
            if !table.contains_key(k) {
                anyhow::bail!("unknown training key `{k}`");
            }
            table.insert(k.clone(), v.clone());
        }
        Ok(table.try_into()?)
    }
}
