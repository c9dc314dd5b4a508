//! Autoregressive generation from a trained relay.
//!
//! Greedy and length-normalized beam search over the target model, seeded
//! with [mapped prefix ; prompt ; BOS]. PAD and BOS are never emitted; EOS
//! ends a hypothesis. Both strategies share one argmax tie-break (lowest
//! index wins) so beam width 1 reproduces greedy exactly.

use crate::error::{Error, Result};
use crate::model::KvCache;
use crate::params::ParamStore;
use crate::relay::RelayModel;
use crate::tensor::{log_softmax_rows, Scalar, Tensor};
use crate::vocab::{PromptTemplate, Vocabulary, BOS, EOS, PAD};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    Beam,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeSettings {
    pub strategy: Strategy,
    #[serde(default = "default_beam_width")]
    pub beam_width: usize,
    /// None means 2 * K + 16 where K is the framed source length.
    #[serde(default)]
    pub max_new_tokens: Option<usize>,
    /// Length-penalty exponent; 0 disables normalization.
    #[serde(default)]
    pub length_penalty: f64,
}

fn default_beam_width() -> usize {
    4
}

impl Default for DecodeSettings {
    fn default() -> Self {
        Self {
            strategy: Strategy::Greedy,
            beam_width: default_beam_width(),
            max_new_tokens: None,
            length_penalty: 0.0,
        }
    }
}

impl DecodeSettings {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::config("beam_width must be at least 1"));
        }
        if let Some(0) = self.max_new_tokens {
            return Err(Error::config("max_new_tokens must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Generation {
    pub text: String,
    pub ids: Vec<u32>,
    /// Sum of chosen-token log-probabilities (including the EOS step),
    /// divided by count^length_penalty.
    pub score: f64,
    /// True when the length budget ended generation before EOS.
    pub truncated: bool,
}

fn normalized(logp: f64, steps: usize, length_penalty: f64) -> f64 {
    if length_penalty == 0.0 || steps == 0 {
        logp
    } else {
        logp / (steps as f64).powf(length_penalty)
    }
}

/// Log-probabilities over the vocabulary for the last hidden row, with PAD
/// and BOS banned.
fn step_logprobs<T: Scalar>(
    relay: &RelayModel,
    store: &ParamStore<T>,
    hidden_row: &Tensor<T>,
) -> Result<Vec<f64>> {
    let logits = relay.model_b.logits_infer(store, hidden_row)?;
    let logp = log_softmax_rows(&logits);
    let mut out: Vec<f64> = logp.row(0).iter().map(|v| v.as_f64()).collect();
    out[PAD as usize] = f64::NEG_INFINITY;
    out[BOS as usize] = f64::NEG_INFINITY;
    Ok(out)
}

fn argmax(logp: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in logp.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

#[derive(Clone)]
struct DecodeState<T> {
    cache: KvCache<T>,
    /// Hidden row for the position about to predict.
    hidden: Tensor<T>,
    /// Next position index to embed at.
    next_pos: usize,
}

/// Prefill [mapped prefix ; prompt ; BOS] and return the decoding state.
fn seed_state<T: Scalar>(
    relay: &RelayModel,
    store: &ParamStore<T>,
    x_text: &str,
) -> Result<(DecodeState<T>, usize)> {
    let src_ids = relay.framed_src_ids(x_text);
    let k = src_ids.len();
    let h = relay.model_a.infer_hidden(store, &src_ids)?;
    let ca_queries = if relay.bridge.variant == crate::bridge::BridgeVariant::Ca {
        let q_ids = relay.vocab_b.encode(x_text);
        if q_ids.is_empty() {
            return Err(Error::contract("CA bridge got an empty query tokenization"));
        }
        Some(relay.model_b.embed_infer(store, &q_ids, 0)?)
    } else {
        None
    };
    let mut prefix = relay.bridge.apply_infer(store, &h, ca_queries.as_ref())?;
    let p1 = prefix.rows();
    if p1 > relay.model_b.config.max_seq_len {
        return Err(Error::Capacity(format!(
            "mapped prefix of {p1} rows exceeds max_seq_len {}",
            relay.model_b.config.max_seq_len
        )));
    }
    // the soft prefix is ordered by the target model's positional table
    let pos_table = store.value(relay.model_b.pos);
    let d_e = relay.model_b.config.d_model;
    for i in 0..p1 {
        let row = pos_table.row(i).to_vec();
        for j in 0..d_e {
            prefix.data_mut()[i * d_e + j] += row[j];
        }
    }
    let prompt_ids = relay.prompt_ids(x_text);
    let prompt_embs = relay.model_b.embed_infer(store, &prompt_ids, p1)?;
    let p2 = prompt_ids.len();
    let bos = relay.model_b.embed_infer(store, &[BOS], p1 + p2)?;

    let d = relay.model_b.config.d_model;
    let total = p1 + p2 + 1;
    if total + 1 > relay.model_b.config.max_seq_len {
        return Err(Error::Capacity(format!(
            "prefix {p1} + prompt {p2} + BOS leave no room to generate within max_seq_len {}",
            relay.model_b.config.max_seq_len
        )));
    }
    let mut rows = Vec::with_capacity(total * d);
    rows.extend_from_slice(prefix.data());
    rows.extend_from_slice(prompt_embs.data());
    rows.extend_from_slice(bos.data());
    let seed = Tensor::new(vec![total, d], rows)?;

    let mut cache = KvCache::new(relay.model_b.config.n_layers);
    let hidden_all = relay.model_b.infer_extend(store, &seed, &mut cache)?;
    let last = Tensor::new(vec![1, d], hidden_all.row(total - 1).to_vec())?;
    Ok((
        DecodeState {
            cache,
            hidden: last,
            next_pos: total,
        },
        k,
    ))
}

fn advance<T: Scalar>(
    relay: &RelayModel,
    store: &ParamStore<T>,
    state: &mut DecodeState<T>,
    token: u32,
) -> Result<()> {
    let emb = relay.model_b.embed_infer(store, &[token], state.next_pos)?;
    state.hidden = relay.model_b.infer_extend(store, &emb, &mut state.cache)?;
    state.next_pos += 1;
    Ok(())
}

fn budget(relay: &RelayModel, state: &DecodeState<impl Scalar>, k: usize, settings: &DecodeSettings) -> usize {
    let requested = settings.max_new_tokens.unwrap_or(2 * k + 16);
    // room left on the positional axis
    let room = relay.model_b.config.max_seq_len.saturating_sub(state.next_pos);
    requested.min(room)
}

/// Deterministic argmax decoding.
pub fn greedy_generate<T: Scalar>(
    relay: &RelayModel,
    store: &ParamStore<T>,
    x_text: &str,
    settings: &DecodeSettings,
) -> Result<Generation> {
    settings.validate()?;
    let (mut state, k) = seed_state(relay, store, x_text)?;
    let max_new = budget(relay, &state, k, settings);
    let mut ids = Vec::new();
    let mut logp_total = 0.0;
    let mut truncated = true;
    for _ in 0..max_new {
        let logp = step_logprobs(relay, store, &state.hidden)?;
        let tok = argmax(&logp) as u32;
        logp_total += logp[tok as usize];
        if tok == EOS {
            truncated = false;
            break;
        }
        ids.push(tok);
        if state.next_pos >= relay.model_b.config.max_seq_len {
            break;
        }
        advance(relay, store, &mut state, tok)?;
    }
    let steps = ids.len() + usize::from(!truncated);
    Ok(Generation {
        text: relay.vocab_b.decode(&ids)?,
        ids,
        score: normalized(logp_total, steps.max(1), settings.length_penalty),
        truncated,
    })
}

#[derive(Clone)]
struct Beam<T> {
    state: DecodeState<T>,
    ids: Vec<u32>,
    logp: f64,
    finished: bool,
}

/// Length-normalized beam search; returns the best hypothesis and the
/// normalized scores of all finished-or-surviving beams.
pub fn beam_generate<T: Scalar>(
    relay: &RelayModel,
    store: &ParamStore<T>,
    x_text: &str,
    settings: &DecodeSettings,
) -> Result<(Generation, Vec<f64>)> {
    settings.validate()?;
    let width = settings.beam_width;
    let (state, k) = seed_state(relay, store, x_text)?;
    let max_new = budget(relay, &state, k, settings);
    let mut beams = vec![Beam {
        state,
        ids: Vec::new(),
        logp: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Beam<T>> = Vec::new();

    for _ in 0..max_new {
        if beams.is_empty() {
            break;
        }
        // (beam index, token, cumulative logp); finished beams carry over
        let mut candidates: Vec<(usize, u32, f64)> = Vec::new();
        for (bi, beam) in beams.iter().enumerate() {
            let logp = step_logprobs(relay, store, &beam.state.hidden)?;
            let mut order: Vec<usize> = (0..logp.len()).collect();
            order.sort_by(|&i, &j| {
                logp[j]
                    .partial_cmp(&logp[i])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(i.cmp(&j))
            });
            for &tok in order.iter().take(width) {
                candidates.push((bi, tok as u32, beam.logp + logp[tok]));
            }
        }
        candidates.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
                .then(a.1.cmp(&b.1))
        });
        let mut next: Vec<Beam<T>> = Vec::with_capacity(width);
        for (bi, tok, logp) in candidates {
            if next.len() >= width {
                break;
            }
            let parent = &beams[bi];
            if tok == EOS {
                finished.push(Beam {
                    state: parent.state.clone(),
                    ids: parent.ids.clone(),
                    logp,
                    finished: true,
                });
                continue;
            }
            if parent.state.next_pos >= relay.model_b.config.max_seq_len {
                continue;
            }
            let mut child = Beam {
                state: parent.state.clone(),
                ids: parent.ids.clone(),
                logp,
                finished: false,
            };
            advance(relay, store, &mut child.state, tok)?;
            child.ids.push(tok);
            next.push(child);
        }
        beams = next;
        if finished.len() >= width {
            break;
        }
    }

    let score_of = |b: &Beam<T>| {
        let steps = b.ids.len() + usize::from(b.finished);
        normalized(b.logp, steps.max(1), settings.length_penalty)
    };
    let mut pool: Vec<&Beam<T>> = finished.iter().collect();
    let truncated = pool.is_empty();
    if truncated {
        pool = beams.iter().collect();
    }
    if pool.is_empty() {
        return Err(Error::contract("beam search retained no hypotheses"));
    }
    let mut scores: Vec<f64> = pool.iter().map(|b| score_of(b)).collect();
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    let chosen = pool[best];
    let gen = Generation {
        text: relay.vocab_b.decode(&chosen.ids)?,
        ids: chosen.ids.clone(),
        score: scores[best],
        truncated,
    };
    scores.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    Ok((gen, scores))
}

/// Strategy dispatch.
pub fn generate<T: Scalar>(
    relay: &RelayModel,
    store: &ParamStore<T>,
    x_text: &str,
    settings: &DecodeSettings,
) -> Result<Generation> {
    match settings.strategy {
        Strategy::Greedy => greedy_generate(relay, store, x_text, settings),
        Strategy::Beam => beam_generate(relay, store, x_text, settings).map(|(g, _)| g),
    }
}

/// Line-by-line translation, order preserving.
pub fn translate_lines<T: Scalar>(
    relay: &RelayModel,
    store: &ParamStore<T>,
    lines: &[impl AsRef<str>],
    settings: &DecodeSettings,
) -> Result<Vec<String>> {
    lines
        .iter()
        .map(|l| generate(relay, store, l.as_ref(), settings).map(|g| g.text))
        .collect()
}

/// Conditioning on the prompt alone (no mapped prefix, no training): the
/// reference point a trained bridge has to beat.
pub fn prompt_only_generate<T: Scalar>(
    model_b: &crate::model::TransformerLM,
    store: &ParamStore<T>,
    vocab_b: &Vocabulary,
    prompt: &PromptTemplate,
    x_text: &str,
    settings: &DecodeSettings,
) -> Result<Generation> {
    settings.validate()?;
    let prompt_ids = vocab_b.encode(&prompt.render(x_text));
    let p2 = prompt_ids.len();
    let d = model_b.config.d_model;
    let prompt_embs = model_b.embed_infer(store, &prompt_ids, 0)?;
    let bos = model_b.embed_infer(store, &[BOS], p2)?;
    let mut rows = Vec::with_capacity((p2 + 1) * d);
    rows.extend_from_slice(prompt_embs.data());
    rows.extend_from_slice(bos.data());
    let seed = Tensor::new(vec![p2 + 1, d], rows)?;
    let mut cache = KvCache::new(model_b.config.n_layers);
    let hidden_all = model_b.infer_extend(store, &seed, &mut cache)?;
    let mut hidden = Tensor::new(vec![1, d], hidden_all.row(p2).to_vec())?;
    let mut next_pos = p2 + 1;

    let max_new = settings
        .max_new_tokens
        .unwrap_or(2 * (x_text.split_whitespace().count() + 2) + 16)
        .min(model_b.config.max_seq_len.saturating_sub(next_pos));
    let mut ids = Vec::new();
    let mut logp_total = 0.0;
    let mut truncated = true;
    for _ in 0..max_new {
        let logits = model_b.logits_infer(store, &hidden)?;
        let lp = log_softmax_rows(&logits);
        let mut row: Vec<f64> = lp.row(0).iter().map(|v| v.as_f64()).collect();
        row[PAD as usize] = f64::NEG_INFINITY;
        row[BOS as usize] = f64::NEG_INFINITY;
        let tok = argmax(&row) as u32;
        logp_total += row[tok as usize];
        if tok == EOS {
            truncated = false;
            break;
        }
        ids.push(tok);
        if next_pos >= model_b.config.max_seq_len {
            break;
        }
        let emb = model_b.embed_infer(store, &[tok], next_pos)?;
        hidden = model_b.infer_extend(store, &emb, &mut cache)?;
        next_pos += 1;
    }
    let steps = ids.len() + usize::from(!truncated);
    Ok(Generation {
        text: vocab_b.decode(&ids)?,
        ids,
        score: normalized(logp_total, steps.max(1), settings.length_penalty),
        truncated,
    })
}
