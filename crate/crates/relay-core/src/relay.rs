//! Composition of the two language models and the bridge.
//!
//! The concatenated input is [mapped hidden prefix ; prompt embeddings ;
//! BOS + teacher-forced targets] on one shared positional axis: the first
//! prompt row sits at position P1, the first target row at P1 + P2. The
//! training objective is the mean negative log-likelihood of target tokens
//! plus EOS, read only at masked positions.

use crate::autodiff::{Graph, Var};
use crate::bridge::{Bridge, BridgeSpec, BridgeVariant};
use crate::checkpoint::{self, Checkpoint};
use crate::data::ParallelCorpus;
use crate::error::{Error, Result};
use crate::lora::{apply_lora, LoraAdapter, LoraSettings, ProjSlot};
use crate::model::{ForwardInput, TrainLogRow, TransformerConfig, TransformerLM};
use crate::optim::{Adam, AdamConfig};
use crate::params::{ParamId, ParamStore};
use crate::rng::substream;
use crate::tensor::Scalar;
use crate::vocab::{PromptTemplate, TokenizerKind, Vocabulary, BOS, EOS};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug)]
pub struct RelayModel {
    pub model_a: TransformerLM,
    pub model_b: TransformerLM,
    pub bridge: Bridge,
    pub vocab_a: Vocabulary,
    pub vocab_b: Vocabulary,
    pub prompt: PromptTemplate,
    pub finetune_a: bool,
    pub finetune_b: bool,
    pub lora_settings: LoraSettings,
}

/// One taped concatenated input.
#[derive(Debug)]
pub struct RelayInput {
    pub seq: Var,
    /// True exactly on rows predicting y_1..y_T and EOS.
    pub mask: Vec<bool>,
    /// Gold ids for the masked rows, in order (y_1..y_T, EOS).
    pub labels: Vec<u32>,
    pub prefix_len: usize,
    pub prompt_len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeTrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    /// Evaluate held-out BLEU every this many steps; 0 disables.
    #[serde(default)]
    pub eval_every: usize,
    /// Cap on held-out sentences scored during training.
    #[serde(default = "default_eval_cap")]
    pub eval_cap: usize,
}

fn default_eval_cap() -> usize {
    64
}

pub struct TrainOutcome {
    pub log: Vec<TrainLogRow>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl RelayModel {
    /// Fresh relay with newly initialized models (tests and small runs).
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        config_a: TransformerConfig,
        config_b: TransformerConfig,
        vocab_a: Vocabulary,
        vocab_b: Vocabulary,
        bridge_spec: &BridgeSpec,
        prompt: PromptTemplate,
        finetune_a: bool,
        finetune_b: bool,
        lora_settings: LoraSettings,
        seed: u64,
    ) -> Result<Self> {
        let model_a = TransformerLM::init(store, config_a, "a", seed)?;
        let model_b = TransformerLM::init(store, config_b, "b", seed.wrapping_add(1))?;
        let bridge = Bridge::init(
            store,
            bridge_spec,
            model_a.config.d_model,
            model_b.config.d_model,
            seed,
        )?;
        let mut relay = Self {
            model_a,
            model_b,
            bridge,
            vocab_a,
            vocab_b,
            prompt,
            finetune_a,
            finetune_b,
            lora_settings,
        };
        relay.attach_adapters(store, seed)?;
        relay.set_training_mode(store);
        Ok(relay)
    }

    fn attach_adapters<T: Scalar>(&mut self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        if self.finetune_a {
            apply_lora(&mut self.model_a, store, &self.lora_settings, seed)?;
        }
        if self.finetune_b {
            apply_lora(&mut self.model_b, store, &self.lora_settings, seed)?;
        }
        Ok(())
    }

    /// Bridge parameters are always trainable; model parameters only via
    /// their adapters. Base weights are frozen.
    pub fn set_training_mode<T: Scalar>(&self, store: &mut ParamStore<T>) {
        self.model_a.set_base_trainable(store, false);
        self.model_b.set_base_trainable(store, false);
        for id in self.bridge.param_ids() {
            store.set_trainable(id, true);
        }
        for ad in self.model_a.lora.iter().chain(&self.model_b.lora) {
            store.set_trainable(ad.a, true);
            store.set_trainable(ad.b, true);
        }
    }

    pub fn trainable_ids<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<ParamId> {
        let mut ids = self.bridge.param_ids();
        for ad in self.model_a.lora.iter().chain(&self.model_b.lora) {
            ids.push(ad.a);
            ids.push(ad.b);
        }
        ids.retain(|&id| store.is_trainable(id));
        ids
    }

    pub fn named_params<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<(String, ParamId)> {
        let mut out = self.model_a.named_params(store);
        out.extend(self.model_b.named_params(store));
        out.extend(self.bridge.named_params(store));
        out
    }

    /// BOS-framed source token ids for the hidden-state pass.
    pub fn framed_src_ids(&self, x_text: &str) -> Vec<u32> {
        let mut ids = vec![BOS];
        ids.extend(self.vocab_a.encode(x_text));
        ids.push(EOS);
        ids
    }

    pub fn prompt_ids(&self, x_text: &str) -> Vec<u32> {
        self.vocab_b.encode(&self.prompt.render(x_text))
    }

    fn ca_query_ids(&self, x_text: &str) -> Vec<u32> {
        self.vocab_b.encode(x_text)
    }

    fn check_total_len(&self, p1: usize, p2: usize, t_rows: usize) -> Result<()> {
        let total = p1 + p2 + t_rows;
        if total > self.model_b.config.max_seq_len {
            return Err(Error::Capacity(format!(
                "relay input of {total} rows (prefix {p1} + prompt {p2} + target {t_rows}) \
                 exceeds max_seq_len {}",
                self.model_b.config.max_seq_len
            )));
        }
        Ok(())
    }

    /// Taped concatenated input. With `y_ids` the target segment is
    /// [BOS, y_1..y_T] and the mask selects the T+1 predicting rows;
    /// without it the sequence is [prefix ; prompt] and the mask is empty.
    pub fn build_input<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        x_text: &str,
        y_ids: Option<&[u32]>,
    ) -> Result<RelayInput> {
        if let Some(y) = y_ids {
            if y.is_empty() {
                return Err(Error::contract("empty target sequence"));
            }
        }
        let src_ids = self.framed_src_ids(x_text);
        let h = if self.finetune_a {
            self.model_a.forward_hidden(store, g, &src_ids)?
        } else {
            let hv = self.model_a.infer_hidden(store, &src_ids)?;
            g.constant(hv)
        };
        let ca_queries = if self.bridge.variant == BridgeVariant::Ca {
            let q_ids = self.ca_query_ids(x_text);
            if q_ids.is_empty() {
                return Err(Error::contract("CA bridge got an empty query tokenization"));
            }
            Some(self.model_b.embed_graph(store, g, &q_ids, 0)?)
        } else {
            None
        };
        let mapped = self.bridge.apply(store, g, h, ca_queries)?;
        let p1 = g.value(mapped).rows();
        // the soft prefix is ordered by the target model's positional table
        let pos_table = g.param(store, self.model_b.pos);
        let pos_rows: Vec<usize> = (0..p1).collect();
        if p1 > self.model_b.config.max_seq_len {
            return Err(Error::Capacity(format!(
                "mapped prefix of {p1} rows exceeds max_seq_len {}",
                self.model_b.config.max_seq_len
            )));
        }
        let prefix_pos = g.gather_rows(pos_table, &pos_rows)?;
        let prefix = g.add(mapped, prefix_pos)?;

        let prompt_ids = self.prompt_ids(x_text);
        let p2 = prompt_ids.len();
        let t_rows = y_ids.map(|y| y.len() + 1).unwrap_or(0);
        self.check_total_len(p1, p2, t_rows)?;

        let prompt_embs = self.model_b.embed_graph(store, g, &prompt_ids, p1)?;
        let mut parts = vec![prefix, prompt_embs];
        let mut mask = vec![false; p1 + p2];
        let mut labels = Vec::new();
        if let Some(y) = y_ids {
            let mut tgt_inputs = vec![BOS];
            tgt_inputs.extend_from_slice(y);
            let tgt_embs = self.model_b.embed_graph(store, g, &tgt_inputs, p1 + p2)?;
            parts.push(tgt_embs);
            mask.extend(std::iter::repeat(true).take(y.len() + 1));
            labels.extend_from_slice(y);
            labels.push(EOS);
        }
        let seq = g.concat_rows(&parts)?;
        Ok(RelayInput {
            seq,
            mask,
            labels,
            prefix_len: p1,
            prompt_len: p2,
        })
    }

    /// Scalar graph node for l(X, Y) = sum of gold-token log-probabilities
    /// (targets plus EOS) at masked rows.
    fn log_likelihood_node<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        x_text: &str,
        y_ids: &[u32],
    ) -> Result<Var> {
        let input = self.build_input(store, g, x_text, Some(y_ids))?;
        let logits = self
            .model_b
            .forward_logits(store, g, ForwardInput::Embeddings(input.seq))?;
        let logp = g.log_softmax(logits)?;
        let picks: Vec<(usize, usize)> = input
            .mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .zip(&input.labels)
            .map(|((row, _), &label)| (row, label as usize))
            .collect();
        g.pick_sum(logp, &picks)
    }

    /// l(X, Y), always <= 0.
    pub fn sentence_log_likelihood<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x_text: &str,
        y_text: &str,
    ) -> Result<f64> {
        let y_ids = self.vocab_b.encode(y_text);
        if y_ids.is_empty() {
            return Err(Error::contract("empty target sentence"));
        }
        let mut g = Graph::new();
        let l = self.log_likelihood_node(store, &mut g, x_text, &y_ids)?;
        Ok(g.scalar_value(l).as_f64())
    }

    fn batch_loss_node<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        pairs: &[(&str, &str)],
    ) -> Result<Var> {
        if pairs.is_empty() {
            return Err(Error::contract("batch loss over zero pairs"));
        }
        let mut terms = Vec::with_capacity(pairs.len());
        for (x, y) in pairs {
            let y_ids = self.vocab_b.encode(y);
            if y_ids.is_empty() {
                return Err(Error::contract("empty target sentence in batch"));
            }
            terms.push(self.log_likelihood_node(store, g, x, &y_ids)?);
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = g.add(total, t)?;
        }
        Ok(g.scale(total, T::from_f64(-1.0 / pairs.len() as f64)))
    }

    /// L = -(1/N) sum l(X_i, Y_i).
    pub fn batch_loss<T: Scalar>(&self, store: &ParamStore<T>, pairs: &[(&str, &str)]) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.batch_loss_node(store, &mut g, pairs)?;
        Ok(g.scalar_value(loss).as_f64())
    }

    /// L with gradients scattered into the store.
    pub fn batch_loss_backward<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        pairs: &[(&str, &str)],
    ) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.batch_loss_node(store, &mut g, pairs)?;
        let value = g.scalar_value(loss).as_f64();
        g.backward(loss, store)?;
        Ok(value)
    }

    /// Minimize L over shuffled mini-batches; bridge always trains, adapters
    /// per the finetune flags, base weights stay bit-identical.
    pub fn train_bridge<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        corpus: &ParallelCorpus,
        settings: &BridgeTrainSettings,
        adam_cfg: &AdamConfig,
        heldout: Option<&ParallelCorpus>,
        seed: u64,
    ) -> Result<TrainOutcome> {
        if corpus.is_empty() {
            return Err(Error::data("bridge training corpus is empty"));
        }
        if self.bridge.d_h != self.model_a.config.d_model
            || self.bridge.d_e != self.model_b.config.d_model
        {
            return Err(Error::config(format!(
                "bridge dims ({}, {}) do not match models ({}, {})",
                self.bridge.d_h,
                self.bridge.d_e,
                self.model_a.config.d_model,
                self.model_b.config.d_model
            )));
        }
        let trainable = self.trainable_ids(store);
        let mut adam = Adam::new(adam_cfg.clone());
        let mut shuffle_rng = substream(seed, "bridge.shuffle");
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut cursor = 0usize;
        let mut log = Vec::with_capacity(settings.steps);
        let mut initial_loss = f64::NAN;
        let mut final_loss = f64::NAN;

        for step in 0..settings.steps {
            let mut batch = Vec::with_capacity(settings.batch_size);
            for _ in 0..settings.batch_size {
                if cursor >= order.len() {
                    order.shuffle(&mut shuffle_rng);
                    cursor = 0;
                }
                let p = &corpus.pairs[order[cursor]];
                cursor += 1;
                batch.push((p.src.as_str(), p.tgt.as_str()));
            }
            store.zero_grads();
            let loss = self.batch_loss_backward(store, &batch)?;
            if !loss.is_finite() {
                return Err(Error::contract(format!("non-finite loss at step {step}")));
            }
            let lr = adam.step(store, &trainable)?;
            if step == 0 {
                initial_loss = loss;
            }
            final_loss = loss;
            let heldout_bleu = match (heldout, settings.eval_every) {
                (Some(h), every) if every > 0 && (step + 1) % every == 0 => {
                    Some(self.heldout_bleu(store, h, settings.eval_cap)?)
                }
                _ => None,
            };
            log.push(TrainLogRow {
                step: step + 1,
                lr,
                loss,
                heldout_bleu,
            });
        }
        Ok(TrainOutcome {
            log,
            initial_loss,
            final_loss,
        })
    }

    pub fn heldout_bleu<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        heldout: &ParallelCorpus,
        cap: usize,
    ) -> Result<f64> {
        let n = heldout.len().min(cap.max(1));
        let settings = crate::decode::DecodeSettings::default();
        let mut hyps = Vec::with_capacity(n);
        let mut refs = Vec::with_capacity(n);
        for p in heldout.pairs.iter().take(n) {
            let gen = crate::decode::greedy_generate(self, store, &p.src, &settings)?;
            hyps.push(gen.text);
            refs.push(p.tgt.clone());
        }
        Ok(crate::metrics::bleu(&hyps, &refs)?.bleu)
    }
}

// ── checkpoint wiring ───────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct LmMeta {
    kind: String,
    config: TransformerConfig,
    prefix: String,
    tokenizer: TokenizerKind,
    vocab: Vec<String>,
}

pub fn save_lm_checkpoint(
    path: &Path,
    model: &TransformerLM,
    store: &ParamStore<f32>,
    vocab: &Vocabulary,
) -> Result<()> {
    let meta = LmMeta {
        kind: "lm".into(),
        config: model.config.clone(),
        prefix: model.prefix.clone(),
        tokenizer: vocab.kind,
        vocab: vocab.tokens().to_vec(),
    };
    let ckpt = Checkpoint {
        config: serde_json::to_value(&meta).expect("meta serializes"),
        tensors: checkpoint::tensors_from_store(store, &model.named_params(store)),
    };
    checkpoint::save(path, &ckpt)
}

pub fn load_lm_checkpoint(path: &Path) -> Result<(ParamStore<f32>, TransformerLM, Vocabulary)> {
    let ckpt = checkpoint::load(path)?;
    let meta: LmMeta = serde_json::from_value(ckpt.config.clone())
        .map_err(|e| Error::Format(format!("bad LM checkpoint config: {e}")))?;
    if meta.kind != "lm" {
        return Err(Error::Format(format!(
            "expected an LM checkpoint, found kind {:?}",
            meta.kind
        )));
    }
    let mut store = ParamStore::new();
    for (name, tensor) in ckpt.tensors {
        store.add(name, tensor, false)?;
    }
    let model = TransformerLM::wire(&store, meta.config, &meta.prefix)?;
    let vocab = Vocabulary::from_tokens(meta.vocab, meta.tokenizer)?;
    Ok((store, model, vocab))
}

#[derive(Serialize, Deserialize)]
struct LoraMeta {
    target: String,
    rank: usize,
    alpha: f64,
}

#[derive(Serialize, Deserialize)]
struct RelayMeta {
    kind: String,
    config_a: TransformerConfig,
    config_b: TransformerConfig,
    tokenizer_a: TokenizerKind,
    vocab_a: Vec<String>,
    tokenizer_b: TokenizerKind,
    vocab_b: Vec<String>,
    bridge: BridgeSpec,
    prompt: PromptTemplate,
    finetune_a: bool,
    finetune_b: bool,
    lora_settings: LoraSettings,
    lora: Vec<LoraMeta>,
}

pub fn save_relay_checkpoint(
    path: &Path,
    relay: &RelayModel,
    store: &ParamStore<f32>,
) -> Result<()> {
    let lora = relay
        .model_a
        .lora
        .iter()
        .chain(&relay.model_b.lora)
        .map(|a| LoraMeta {
            target: a.target.clone(),
            rank: a.rank,
            alpha: a.alpha,
        })
        .collect();
    let meta = RelayMeta {
        kind: "relay".into(),
        config_a: relay.model_a.config.clone(),
        config_b: relay.model_b.config.clone(),
        tokenizer_a: relay.vocab_a.kind,
        vocab_a: relay.vocab_a.tokens().to_vec(),
        tokenizer_b: relay.vocab_b.kind,
        vocab_b: relay.vocab_b.tokens().to_vec(),
        bridge: BridgeSpec {
            variant: relay.bridge.variant,
            n_heads: relay.bridge.n_heads,
            n_queries: relay.bridge.n_queries,
        },
        prompt: relay.prompt.clone(),
        finetune_a: relay.finetune_a,
        finetune_b: relay.finetune_b,
        lora_settings: relay.lora_settings.clone(),
        lora,
    };
    let ckpt = Checkpoint {
        config: serde_json::to_value(&meta).expect("meta serializes"),
        tensors: checkpoint::tensors_from_store(store, &relay.named_params(store)),
    };
    checkpoint::save(path, &ckpt)
}

fn parse_lora_target(target: &str) -> Result<(String, usize, ProjSlot)> {
    // "<prefix>.layers.<i>.attn.w<slot>"
    let parts: Vec<&str> = target.split('.').collect();
    if parts.len() == 5 && parts[1] == "layers" && parts[3] == "attn" {
        let layer: usize = parts[2]
            .parse()
            .map_err(|_| Error::Format(format!("bad lora target {target:?}")))?;
        let slot = match parts[4] {
            "wq" => ProjSlot::Q,
            "wk" => ProjSlot::K,
            "wv" => ProjSlot::V,
            "wo" => ProjSlot::O,
            _ => return Err(Error::Format(format!("bad lora target {target:?}"))),
        };
        return Ok((parts[0].to_string(), layer, slot));
    }
    Err(Error::Format(format!("bad lora target {target:?}")))
}

pub fn load_relay_checkpoint(path: &Path) -> Result<(ParamStore<f32>, RelayModel)> {
    let ckpt = checkpoint::load(path)?;
    let meta: RelayMeta = serde_json::from_value(ckpt.config.clone())
        .map_err(|e| Error::Format(format!("bad relay checkpoint config: {e}")))?;
    if meta.kind != "relay" {
        return Err(Error::Format(format!(
            "expected a relay checkpoint, found kind {:?}",
            meta.kind
        )));
    }
    let mut store = ParamStore::new();
    for (name, tensor) in ckpt.tensors {
        store.add(name, tensor, false)?;
    }
    let mut model_a = TransformerLM::wire(&store, meta.config_a.clone(), "a")?;
    let mut model_b = TransformerLM::wire(&store, meta.config_b.clone(), "b")?;
    let bridge = Bridge::wire(
        &store,
        &meta.bridge,
        meta.config_a.d_model,
        meta.config_b.d_model,
    )?;
    for lm in &meta.lora {
        let (prefix, layer, slot) = parse_lora_target(&lm.target)?;
        let a = store
            .lookup(&format!("lora.{}.a", lm.target))
            .ok_or_else(|| Error::Format(format!("missing adapter tensor for {:?}", lm.target)))?;
        let b = store
            .lookup(&format!("lora.{}.b", lm.target))
            .ok_or_else(|| Error::Format(format!("missing adapter tensor for {:?}", lm.target)))?;
        let adapter = LoraAdapter {
            target: lm.target.clone(),
            layer,
            slot,
            a,
            b,
            rank: lm.rank,
            alpha: lm.alpha,
        };
        match prefix.as_str() {
            "a" => model_a.lora.push(adapter),
            "b" => model_b.lora.push(adapter),
            other => {
                return Err(Error::Format(format!(
                    "adapter target {:?} names unknown model {other:?}",
                    lm.target
                )))
            }
        }
    }
    let relay = RelayModel {
        model_a,
        model_b,
        bridge,
        vocab_a: Vocabulary::from_tokens(meta.vocab_a, meta.tokenizer_a)?,
        vocab_b: Vocabulary::from_tokens(meta.vocab_b, meta.tokenizer_b)?,
        prompt: meta.prompt,
        finetune_a: meta.finetune_a,
        finetune_b: meta.finetune_b,
        lora_settings: meta.lora_settings,
    };
    relay.set_training_mode(&mut store);
    Ok((store, relay))
}

/// Build a relay from two pretrained LM checkpoints: tensors are copied into
/// one store under the "a." / "b." prefixes, a fresh bridge is initialized,
/// and adapters attach per the finetune flags.
#[allow(clippy::too_many_arguments)]
pub fn assemble_relay(
    ckpt_a: &Path,
    ckpt_b: &Path,
    bridge_spec: &BridgeSpec,
    prompt: PromptTemplate,
    finetune_a: bool,
    finetune_b: bool,
    lora_settings: LoraSettings,
    seed: u64,
) -> Result<(ParamStore<f32>, RelayModel)> {
    let (store_a, lm_a, vocab_a) = load_lm_checkpoint(ckpt_a)?;
    let (store_b, lm_b, vocab_b) = load_lm_checkpoint(ckpt_b)?;
    assemble_relay_in_memory(
        &store_a,
        &lm_a,
        vocab_a,
        &store_b,
        &lm_b,
        vocab_b,
        bridge_spec,
        prompt,
        finetune_a,
        finetune_b,
        lora_settings,
        seed,
    )
}

/// Same assembly from already-loaded parts; tensors are copied into one
/// fresh store under the "a." / "b." prefixes.
#[allow(clippy::too_many_arguments)]
pub fn assemble_relay_in_memory(
    store_a: &ParamStore<f32>,
    lm_a: &TransformerLM,
    vocab_a: Vocabulary,
    store_b: &ParamStore<f32>,
    lm_b: &TransformerLM,
    vocab_b: Vocabulary,
    bridge_spec: &BridgeSpec,
    prompt: PromptTemplate,
    finetune_a: bool,
    finetune_b: bool,
    lora_settings: LoraSettings,
    seed: u64,
) -> Result<(ParamStore<f32>, RelayModel)> {
    let mut store = ParamStore::new();
    let copy = |src_store: &ParamStore<f32>,
                lm: &TransformerLM,
                new_prefix: &str,
                store: &mut ParamStore<f32>|
     -> Result<()> {
        for (name, id) in lm.named_params(src_store) {
            let suffix = name
                .strip_prefix(&format!("{}.", lm.prefix))
                .ok_or_else(|| Error::Format(format!("unexpected tensor name {name:?}")))?;
            store.add(
                format!("{new_prefix}.{suffix}"),
                src_store.value(id).clone(),
                false,
            )?;
        }
        Ok(())
    };
    copy(store_a, lm_a, "a", &mut store)?;
    copy(store_b, lm_b, "b", &mut store)?;
    let mut model_a = TransformerLM::wire(&store, lm_a.config.clone(), "a")?;
    let mut model_b = TransformerLM::wire(&store, lm_b.config.clone(), "b")?;
    let bridge = Bridge::init(
        &mut store,
        bridge_spec,
        model_a.config.d_model,
        model_b.config.d_model,
        seed,
    )?;
    if finetune_a {
        apply_lora(&mut model_a, &mut store, &lora_settings, seed)?;
    }
    if finetune_b {
        apply_lora(&mut model_b, &mut store, &lora_settings, seed)?;
    }
    let relay = RelayModel {
        model_a,
        model_b,
        bridge,
        vocab_a,
        vocab_b,
        prompt,
        finetune_a,
        finetune_b,
        lora_settings,
    };
    relay.set_training_mode(&mut store);
    Ok((store, relay))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::UNK;

    fn tiny_cfg(v: usize, d: usize, max_len: usize) -> TransformerConfig {
        TransformerConfig {
            vocab_size: v,
            d_model: d,
            n_layers: 1,
            n_heads: 2,
            d_ff: 2 * d,
            max_seq_len: max_len,
        }
    }

    fn make_relay(
        variant: BridgeVariant,
        finetune_a: bool,
        finetune_b: bool,
    ) -> (ParamStore<f64>, RelayModel) {
        let corpus_a: Vec<String> = (0..8).map(|i| format!("a{i}")).collect();
        let corpus_b: Vec<String> = (0..8)
            .map(|i| format!("b{i}"))
            .chain(["### [A]: ### [B]: ".to_string()])
            .collect();
        let vocab_a = Vocabulary::build(&corpus_a, TokenizerKind::WhitespaceWord).unwrap();
        let vocab_b = Vocabulary::build(&corpus_b, TokenizerKind::WhitespaceWord).unwrap();
        let prompt = PromptTemplate {
            src_lang: "A".into(),
            tgt_lang: "B".into(),
            include_source_text: false,
        };
        let mut store = ParamStore::new();
        let relay = RelayModel::init(
            &mut store,
            tiny_cfg(vocab_a.size(), 8, 32),
            tiny_cfg(vocab_b.size(), 12, 48),
            vocab_a,
            vocab_b,
            &BridgeSpec {
                variant,
                n_heads: 2,
                n_queries: 5,
            },
            prompt,
            finetune_a,
            finetune_b,
            LoraSettings {
                rank: 2,
                alpha: 4.0,
                ..Default::default()
            },
            13,
        )
        .unwrap();
        (store, relay)
    }

    #[test]
    fn build_input_length_bookkeeping_fc() {
        let (store, relay) = make_relay(BridgeVariant::Fc, false, false);
        let mut g = Graph::new();
        // "a1 a2" -> K = 4 framed rows; prompt "### [A]: ### [B]:" -> 4 tokens
        let input = relay.build_input(&store, &mut g, "a1 a2", None).unwrap();
        assert_eq!(input.prefix_len, 4);
        assert_eq!(input.prompt_len, relay.prompt_ids("a1 a2").len());
        assert_eq!(
            g.value(input.seq).rows(),
            input.prefix_len + input.prompt_len
        );
        assert!(input.mask.iter().all(|&m| !m));
        assert!(input.labels.is_empty());
    }

    #[test]
    fn build_input_mask_counts_targets_plus_eos() {
        let (store, relay) = make_relay(BridgeVariant::Fc, false, false);
        let mut g = Graph::new();
        let y_ids = relay.vocab_b.encode("b3 b1 b2");
        let input = relay
            .build_input(&store, &mut g, "a1 a2", Some(&y_ids))
            .unwrap();
        assert_eq!(input.mask.iter().filter(|&&m| m).count(), 4);
        assert_eq!(input.labels.len(), 4);
        assert_eq!(*input.labels.last().unwrap(), EOS);
        // mask-true rows are exactly the target-segment rows
        let start = input.prefix_len + input.prompt_len;
        for (i, &m) in input.mask.iter().enumerate() {
            assert_eq!(m, i >= start);
        }
    }

    #[test]
    fn caq_prefix_length_is_fixed() {
        let (store, relay) = make_relay(BridgeVariant::CaQ, false, false);
        let mut g = Graph::new();
        let short = relay.build_input(&store, &mut g, "a1", None).unwrap();
        let long = relay
            .build_input(&store, &mut g, "a1 a2 a3 a4 a5", None)
            .unwrap();
        assert_eq!(short.prefix_len, 5);
        assert_eq!(long.prefix_len, 5);
    }

    #[test]
    fn ca_prefix_length_tracks_target_tokenization() {
        let (store, relay) = make_relay(BridgeVariant::Ca, false, false);
        let mut g = Graph::new();
        let input = relay.build_input(&store, &mut g, "a1 a2 a3", None).unwrap();
        // vocab_b tokenizes "a1 a2 a3" as three UNKs
        assert_eq!(relay.ca_query_ids("a1 a2 a3"), vec![UNK, UNK, UNK]);
        assert_eq!(input.prefix_len, 3);
    }

    #[test]
    fn position_continuity_of_prompt_segment() {
        let (store, relay) = make_relay(BridgeVariant::Fc, false, false);
        let mut g = Graph::new();
        let input = relay.build_input(&store, &mut g, "a1 a2", None).unwrap();
        let prompt_ids = relay.prompt_ids("a1 a2");
        let want = relay
            .model_b
            .embed_graph(&store, &mut g, &prompt_ids, input.prefix_len)
            .unwrap();
        let seq = g.value(input.seq).clone();
        let w = g.value(want);
        for r in 0..prompt_ids.len() {
            for c in 0..relay.model_b.config.d_model {
                assert_eq!(seq.at(input.prefix_len + r, c), w.at(r, c));
            }
        }
    }

    #[test]
    fn uniform_logits_give_minus_t_ln_v() {
        // zero the output projection: logits uniform over |vocab_b| = 8
        let corpus_a: Vec<String> = (0..4).map(|i| format!("a{i}")).collect();
        let corpus_b: Vec<String> = (0..4).map(|i| format!("b{i}")).collect();
        let vocab_a = Vocabulary::build(&corpus_a, TokenizerKind::WhitespaceWord).unwrap();
        let vocab_b = Vocabulary::build(&corpus_b, TokenizerKind::WhitespaceWord).unwrap();
        assert_eq!(vocab_b.size(), 8);
        let mut store = ParamStore::<f64>::new();
        let relay = RelayModel::init(
            &mut store,
            tiny_cfg(8, 8, 32),
            tiny_cfg(8, 8, 32),
            vocab_a,
            vocab_b,
            &BridgeSpec::default(),
            PromptTemplate {
                src_lang: "A".into(),
                tgt_lang: "B".into(),
                include_source_text: false,
            },
            false,
            false,
            LoraSettings::default(),
            17,
        )
        .unwrap();
        store.value_mut(relay.model_b.w_out).fill(0.0);
        // T + 1 = 3 scored tokens
        let l = relay
            .sentence_log_likelihood(&store, "a1 a2", "b1 b2")
            .unwrap();
        assert!((l - (-3.0 * 8.0f64.ln())).abs() < 1e-9, "l = {l}");
        assert!((l - (-6.2383246250)).abs() < 1e-6);
    }

    #[test]
    fn batch_loss_is_mean_of_sentence_losses() {
        let (store, relay) = make_relay(BridgeVariant::Fc, false, false);
        let pairs = [("a1 a2", "b2 b1"), ("a3", "b3"), ("a1 a4 a5", "b5 b4 b1")];
        let l: Vec<f64> = pairs
            .iter()
            .map(|(x, y)| relay.sentence_log_likelihood(&store, x, y).unwrap())
            .collect();
        assert!(l.iter().all(|&v| v <= 0.0));
        let want = -(l[0] + l[1] + l[2]) / 3.0;
        let got = relay.batch_loss(&store, &pairs).unwrap();
        assert!((got - want).abs() < 1e-9);
        // N = 1 and duplicated-pair invariance
        let single = relay.batch_loss(&store, &pairs[..1]).unwrap();
        assert!((single - (-l[0])).abs() < 1e-12);
        let dup = relay.batch_loss(&store, &[pairs[0], pairs[0]]).unwrap();
        assert!((dup - single).abs() < 1e-9);
        assert!(relay.batch_loss(&store, &[]).is_err());
    }

    #[test]
    fn frozen_training_leaves_base_weights_bit_identical() {
        let (mut store, relay) = make_relay(BridgeVariant::Fc, false, false);
        let snapshot: Vec<Vec<f64>> = relay
            .model_a
            .base_param_ids()
            .iter()
            .chain(relay.model_b.base_param_ids().iter())
            .map(|&id| store.value(id).data().to_vec())
            .collect();
        let corpus = ParallelCorpus {
            pairs: (0..6)
                .map(|i| crate::data::Pair {
                    src: format!("a{} a{}", i % 4, (i + 1) % 4),
                    tgt: format!("b{} b{}", (i + 1) % 4, i % 4),
                })
                .collect(),
            provenance: "test".into(),
        };
        relay
            .train_bridge(
                &mut store,
                &corpus,
                &BridgeTrainSettings {
                    steps: 3,
                    batch_size: 2,
                    eval_every: 0,
                    eval_cap: 8,
                },
                &AdamConfig {
                    base_lr: 1e-3,
                    warmup_steps: 0,
                    ..Default::default()
                },
                None,
                23,
            )
            .unwrap();
        let after: Vec<Vec<f64>> = relay
            .model_a
            .base_param_ids()
            .iter()
            .chain(relay.model_b.base_param_ids().iter())
            .map(|&id| store.value(id).data().to_vec())
            .collect();
        assert_eq!(snapshot, after, "frozen base weights moved");
    }

    #[test]
    fn bridge_gets_nonzero_gradients_with_frozen_models() {
        let (mut store, relay) = make_relay(BridgeVariant::Fc, false, false);
        let pairs = [("a1 a2", "b2 b1"), ("a3 a5", "b5 b3")];
        store.zero_grads();
        relay.batch_loss_backward(&mut store, &pairs).unwrap();
        let mut nonzero = 0;
        for id in relay.bridge.param_ids() {
            let g = store.grad(id).expect("bridge grad populated");
            if g.data().iter().any(|&v| v != 0.0) {
                nonzero += 1;
            }
        }
        assert!(nonzero >= 1, "no bridge parameter received gradient");
        // frozen model parameters collected no gradient at all
        for id in relay
            .model_a
            .base_param_ids()
            .into_iter()
            .chain(relay.model_b.base_param_ids())
        {
            assert!(store.grad(id).is_none());
        }
    }

    #[test]
    fn adapters_get_gradients_when_flags_on() {
        let (mut store, relay) = make_relay(BridgeVariant::Fc, true, true);
        assert!(!relay.model_a.lora.is_empty() && !relay.model_b.lora.is_empty());
        let pairs = [("a1 a2 a3", "b3 b2 b1")];
        store.zero_grads();
        relay.batch_loss_backward(&mut store, &pairs).unwrap();
        // the B matrices are zero-init, so dL/dA is zero but dL/dB is not
        for ad in relay.model_a.lora.iter().chain(&relay.model_b.lora) {
            let gb = store.grad(ad.b).expect("adapter B grad");
            assert!(gb.data().iter().any(|&v| v != 0.0), "B grad all zero");
        }
    }

    #[test]
    fn capacity_error_reports_segment_breakdown() {
        // source fits model A (max 32) but prefix + prompt + targets
        // overflow model B (max 48)
        let (store, relay) = make_relay(BridgeVariant::Fc, false, false);
        let long_src = (0..28).map(|i| format!("a{}", i % 8)).collect::<Vec<_>>().join(" ");
        let y_ids: Vec<u32> = (0..20).map(|i| relay.vocab_b.id(&format!("b{}", i % 8))).collect();
        let mut g = Graph::new();
        let err = relay
            .build_input(&store, &mut g, &long_src, Some(&y_ids))
            .unwrap_err()
            .to_string();
        assert!(err.contains("prefix 30") && err.contains("prompt"), "{err}");
    }

    #[test]
    fn lm_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.ckpt");
        let corpus: Vec<String> = (0..6).map(|i| format!("w{i}")).collect();
        let vocab = Vocabulary::build(&corpus, TokenizerKind::WhitespaceWord).unwrap();
        let mut store = ParamStore::<f32>::new();
        let model =
            TransformerLM::init(&mut store, tiny_cfg(vocab.size(), 8, 16), "lm", 3).unwrap();
        save_lm_checkpoint(&path, &model, &store, &vocab).unwrap();
        let (store2, model2, vocab2) = load_lm_checkpoint(&path).unwrap();
        assert_eq!(vocab2.tokens(), vocab.tokens());
        assert_eq!(model2.config, model.config);
        for (name, id) in model.named_params(&store) {
            let id2 = store2.lookup(&name).expect("tensor present");
            assert_eq!(store.value(id).data(), store2.value(id2).data());
        }
    }

    #[test]
    fn relay_checkpoint_round_trip_preserves_all_tensors() {
        let (store64, relay) = make_relay(BridgeVariant::CaQ, false, true);
        let store: ParamStore<f32> = store64.cast();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("relay.ckpt");
        save_relay_checkpoint(&path, &relay, &store).unwrap();
        let (store2, relay2) = load_relay_checkpoint(&path).unwrap();
        assert_eq!(relay2.bridge.variant, BridgeVariant::CaQ);
        assert_eq!(relay2.model_b.lora.len(), relay.model_b.lora.len());
        for (name, id) in relay.named_params(&store) {
            let id2 = store2.lookup(&name).expect("tensor present");
            assert_eq!(store.value(id).data(), store2.value(id2).data(), "{name}");
        }
        // saving again is byte-identical
        let path2 = dir.path().join("relay2.ckpt");
        save_relay_checkpoint(&path2, &relay2, &store2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }
}
