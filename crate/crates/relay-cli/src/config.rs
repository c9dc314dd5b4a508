//! Per-command JSON configuration. Unknown keys are rejected; every run
//! writes its fully-resolved config next to its outputs.

use relay_core::bridge::BridgeSpec;
use relay_core::data::{ReorderRule, SampleCounts};
use relay_core::decode::DecodeSettings;
use relay_core::harness::ModelShape;
use relay_core::lora::LoraSettings;
use relay_core::model::PretrainSettings;
use relay_core::optim::AdamConfig;
use relay_core::relay::BridgeTrainSettings;
use relay_core::vocab::PromptTemplate;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub seed: u64,
    /// Monolingual corpus, one sentence per line.
    pub corpus: PathBuf,
    /// Parameter name prefix for the checkpoint ("a", "b", ...).
    #[serde(default = "default_prefix")]
    pub prefix: String,
    pub model: ModelShape,
    pub train: PretrainSettings,
    pub optim: AdamConfig,
    /// Extra lines folded into vocabulary construction only (e.g. the
    /// rendered prompt, so its tokens are in-vocabulary later).
    #[serde(default)]
    pub vocab_extra_lines: Vec<String>,
}

fn default_prefix() -> String {
    "lm".into()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainBridgeConfig {
    pub seed: u64,
    pub ckpt_a: PathBuf,
    pub ckpt_b: PathBuf,
    pub train_src: PathBuf,
    pub train_tgt: PathBuf,
    #[serde(default)]
    pub heldout_src: Option<PathBuf>,
    #[serde(default)]
    pub heldout_tgt: Option<PathBuf>,
    #[serde(default)]
    pub bridge: BridgeSpec,
    #[serde(default)]
    pub lora: LoraSettings,
    #[serde(default)]
    pub finetune_a: bool,
    #[serde(default)]
    pub finetune_b: bool,
    pub prompt: PromptTemplate,
    pub train: BridgeTrainSettings,
    pub optim: AdamConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslateConfig {
    pub checkpoint: PathBuf,
    #[serde(default)]
    pub decode: DecodeSettings,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Relay checkpoint to decode with; omit when scoring a hypothesis file.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub decode: DecodeSettings,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    pub seed: u64,
    pub n_symbols: usize,
    pub len_range: (usize, usize),
    pub reorder: ReorderRule,
    pub counts: SampleCounts,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    pub seed: u64,
    pub n_symbols: usize,
    pub len_range: (usize, usize),
    pub reorder: ReorderRule,
    pub counts: SampleCounts,
    pub shape_a: ModelShape,
    pub shape_b: ModelShape,
    pub prompt: PromptTemplate,
    pub pretrain: PretrainSettings,
    pub pretrain_optim: AdamConfig,
    pub train: BridgeTrainSettings,
    pub optim: AdamConfig,
    #[serde(default)]
    pub lora: LoraSettings,
    #[serde(default)]
    pub decode: DecodeSettings,
    /// Nested training-set sizes for the data-size axis.
    #[serde(default = "default_sizes")]
    pub data_sizes: Vec<usize>,
}

fn default_sizes() -> Vec<usize> {
    vec![1000, 2000, 4000, 8000]
}

/// Parse with unknown-key rejection.
pub fn load_config<C: for<'de> Deserialize<'de>>(path: &std::path::Path) -> anyhow::Result<C> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| anyhow::anyhow!("config error: cannot read {}: {e}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(|e| anyhow::anyhow!("config error: {} is invalid: {e}", path.display()))
}

/// Canonical JSON (sorted keys) of the resolved config.
pub fn write_resolved<C: Serialize>(out_dir: &std::path::Path, config: &C) -> anyhow::Result<()> {
    let v = serde_json::to_value(config)?;
    let text = serde_json::to_string_pretty(&v)?;
    std::fs::write(out_dir.join("config.json"), text + "\n")?;
    Ok(())
}
