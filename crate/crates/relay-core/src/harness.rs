//! End-to-end experiment pipeline on the synthetic language pair:
//! generate data, pretrain both monolingual models, assemble the relay,
//! train the bridge, evaluate. The ablation sweeps drive this with one
//! axis varied and all seeds shared.

use crate::bridge::{BridgeSpec, BridgeVariant};
use crate::data::{gen_synthetic_pair, subset, ParallelCorpus, SampleCounts, SyntheticData, SyntheticLangSpec};
use crate::decode::DecodeSettings;
use crate::error::Result;
use crate::lora::LoraSettings;
use crate::metrics::{self, EvalReport};
use crate::model::{pretrain_lm, PretrainSettings, TransformerConfig, TransformerLM};
use crate::optim::AdamConfig;
use crate::params::ParamStore;
use crate::relay::{self, BridgeTrainSettings, RelayModel, TrainOutcome};
use crate::vocab::{PromptTemplate, TokenizerKind, Vocabulary};
use serde::{Deserialize, Serialize};

/// Model geometry without the vocab size (filled from data).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl ModelShape {
    pub fn with_vocab(&self, vocab_size: usize) -> TransformerConfig {
        TransformerConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PipelineSettings {
    pub shape_a: ModelShape,
    pub shape_b: ModelShape,
    pub prompt: PromptTemplate,
    pub pretrain: PretrainSettings,
    pub pretrain_adam: AdamConfig,
    pub bridge_train: BridgeTrainSettings,
    pub bridge_adam: AdamConfig,
    pub decode: DecodeSettings,
    pub seed: u64,
}

/// A pretrained monolingual model with its vocabulary and weights.
pub struct PretrainedLm {
    pub store: ParamStore<f32>,
    pub model: TransformerLM,
    pub vocab: Vocabulary,
    pub log: Vec<crate::model::TrainLogRow>,
}

/// Pretrain one LM on monolingual sentences. The rendered empty prompt is
/// appended to the vocabulary corpus (not the training data) so prompt
/// tokens are in-vocabulary for the target-side model.
pub fn pretrain_monolingual(
    sentences: &[String],
    shape: &ModelShape,
    prompt_line: Option<&str>,
    settings: &PretrainSettings,
    adam: &AdamConfig,
    prefix: &str,
    seed: u64,
) -> Result<PretrainedLm> {
    let mut vocab_corpus: Vec<String> = sentences.to_vec();
    if let Some(line) = prompt_line {
        vocab_corpus.push(line.to_string());
    }
    let vocab = Vocabulary::build(&vocab_corpus, TokenizerKind::WhitespaceWord)?;
    let mut store = ParamStore::new();
    let model = TransformerLM::init(&mut store, shape.with_vocab(vocab.size()), prefix, seed)?;
    let log = pretrain_lm(&model, &mut store, sentences, &vocab, settings, adam, seed)?;
    Ok(PretrainedLm {
        store,
        model,
        vocab,
        log,
    })
}

pub struct ExperimentOutcome {
    pub report: EvalReport,
    pub train: TrainOutcome,
    pub relay: RelayModel,
    pub store: ParamStore<f32>,
}

/// Assemble a relay from two pretrained LMs, train the bridge on `train`,
/// and evaluate greedily on `eval_corpus`.
#[allow(clippy::too_many_arguments)]
pub fn run_relay_experiment(
    lm_a: &PretrainedLm,
    lm_b: &PretrainedLm,
    bridge_spec: &BridgeSpec,
    finetune_a: bool,
    finetune_b: bool,
    lora: &LoraSettings,
    train: &ParallelCorpus,
    heldout: Option<&ParallelCorpus>,
    eval_corpus: &ParallelCorpus,
    settings: &PipelineSettings,
) -> Result<ExperimentOutcome> {
    let (mut store, relay) = relay::assemble_relay_in_memory(
        &lm_a.store,
        &lm_a.model,
        lm_a.vocab.clone(),
        &lm_b.store,
        &lm_b.model,
        lm_b.vocab.clone(),
        bridge_spec,
        settings.prompt.clone(),
        finetune_a,
        finetune_b,
        lora.clone(),
        settings.seed,
    )?;
    let train_outcome = relay.train_bridge(
        &mut store,
        train,
        &settings.bridge_train,
        &settings.bridge_adam,
        heldout,
        settings.seed,
    )?;
    let report = metrics::evaluate(&relay, &store, eval_corpus, &settings.decode, None)?;
    Ok(ExperimentOutcome {
        report,
        train: train_outcome,
        relay,
        store,
    })
}

/// One generated dataset plus the two pretrained models, shared across
/// sweep rows so rows differ only on the swept axis.
pub struct SharedFixture {
    pub data: SyntheticData,
    pub lm_a: PretrainedLm,
    pub lm_b: PretrainedLm,
}

pub fn build_fixture(
    spec: &SyntheticLangSpec,
    counts: &SampleCounts,
    settings: &PipelineSettings,
) -> Result<SharedFixture> {
    let data = gen_synthetic_pair(spec, counts)?;
    let prompt_line = settings.prompt.render("");
    let lm_a = pretrain_monolingual(
        &data.mono_a,
        &settings.shape_a,
        None,
        &settings.pretrain,
        &settings.pretrain_adam,
        "a",
        settings.seed,
    )?;
    let lm_b = pretrain_monolingual(
        &data.mono_b,
        &settings.shape_b,
        Some(&prompt_line),
        &settings.pretrain,
        &settings.pretrain_adam,
        "b",
        settings.seed.wrapping_add(1),
    )?;
    Ok(SharedFixture { data, lm_a, lm_b })
}

/// Rows of a sweep report: one per setting, BLEU/chrF columns.
#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub label: String,
    pub bleu: f64,
    pub chrf: f64,
    pub final_loss: f64,
}

/// The four freeze/finetune combinations.
pub fn finetune_grid(fixture: &SharedFixture, lora: &LoraSettings, settings: &PipelineSettings) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for (fa, fb) in [(false, false), (false, true), (true, false), (true, true)] {
        let out = run_relay_experiment(
            &fixture.lm_a,
            &fixture.lm_b,
            &BridgeSpec::default(),
            fa,
            fb,
            lora,
            &fixture.data.train,
            None,
            &fixture.data.heldout,
            settings,
        )?;
        rows.push(SweepRow {
            label: format!(
                "finetune_a={} finetune_b={}",
                if fa { "yes" } else { "no" },
                if fb { "yes" } else { "no" }
            ),
            bleu: out.report.bleu,
            chrf: out.report.chrf,
            final_loss: out.train.final_loss,
        });
    }
    Ok(rows)
}

/// Nested training subsets of increasing size, shared seed.
pub fn data_size_sweep(
    fixture: &SharedFixture,
    sizes: &[usize],
    lora: &LoraSettings,
    settings: &PipelineSettings,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &n in sizes {
        let train = subset(&fixture.data.train, n, settings.seed)?;
        let out = run_relay_experiment(
            &fixture.lm_a,
            &fixture.lm_b,
            &BridgeSpec::default(),
            false,
            true,
            lora,
            &train,
            None,
            &fixture.data.heldout,
            settings,
        )?;
        rows.push(SweepRow {
            label: format!("{n}"),
            bleu: out.report.bleu,
            chrf: out.report.chrf,
            final_loss: out.train.final_loss,
        });
    }
    Ok(rows)
}

/// FC / CA / CA-Q comparison.
pub fn mapping_variant_sweep(
    fixture: &SharedFixture,
    lora: &LoraSettings,
    settings: &PipelineSettings,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for variant in [BridgeVariant::Fc, BridgeVariant::Ca, BridgeVariant::CaQ] {
        let spec = BridgeSpec {
            variant,
            ..Default::default()
        };
        let out = run_relay_experiment(
            &fixture.lm_a,
            &fixture.lm_b,
            &spec,
            false,
            true,
            lora,
            &fixture.data.train,
            None,
            &fixture.data.heldout,
            settings,
        )?;
        rows.push(SweepRow {
            label: variant.to_string(),
            bleu: out.report.bleu,
            chrf: out.report.chrf,
            final_loss: out.train.final_loss,
        });
    }
    Ok(rows)
}
