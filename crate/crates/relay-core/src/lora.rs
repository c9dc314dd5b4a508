//! Low-rank adapters: y = Wx + (alpha/r) * B(Ax) with W frozen.
//!
//! A is random-normal, B is zero, so a fresh adapter is exactly neutral.
//! Adapters serialize as named tensors prefixed "lora.".

use crate::error::{Error, Result};
use crate::model::TransformerLM;
use crate::params::{ParamId, ParamStore};
use crate::rng::substream;
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

/// A uses fan-in scaling so fresh adapters produce usable gradients for B.
pub fn lora_a_std(d_in: usize) -> f64 {
    1.0 / (d_in as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjSlot {
    Q,
    K,
    V,
    O,
}

impl ProjSlot {
    pub fn layer_suffix(&self) -> &'static str {
        match self {
            ProjSlot::Q => "attn.wq",
            ProjSlot::K => "attn.wk",
            ProjSlot::V => "attn.wv",
            ProjSlot::O => "attn.wo",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "attn.wq" => Some(ProjSlot::Q),
            "attn.wk" => Some(ProjSlot::K),
            "attn.wv" => Some(ProjSlot::V),
            "attn.wo" => Some(ProjSlot::O),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LoraAdapter {
    /// Full target layer name, e.g. "b.layers.0.attn.wq".
    pub target: String,
    pub layer: usize,
    pub slot: ProjSlot,
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraSettings {
    pub rank: usize,
    pub alpha: f64,
    /// Slot names like "attn.wq" (all layers) or "layers.2.attn.wv" (one).
    pub targets: Vec<String>,
}

impl Default for LoraSettings {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            targets: vec!["attn.wq".into(), "attn.wv".into()],
        }
    }
}

fn parse_target(t: &str, n_layers: usize) -> Result<Vec<(usize, ProjSlot)>> {
    if let Some(slot) = ProjSlot::parse(t) {
        return Ok((0..n_layers).map(|l| (l, slot)).collect());
    }
    if let Some(rest) = t.strip_prefix("layers.") {
        if let Some((idx, suffix)) = rest.split_once('.') {
            if let (Ok(layer), Some(slot)) = (idx.parse::<usize>(), ProjSlot::parse(suffix)) {
                if layer < n_layers {
                    return Ok(vec![(layer, slot)]);
                }
                return Err(Error::config(format!(
                    "lora target {t:?} names layer {layer}, model has {n_layers}"
                )));
            }
        }
    }
    Err(Error::config(format!(
        "unknown lora target {t:?}; expected one of attn.wq/wk/wv/wo or layers.<i>.<slot>"
    )))
}

/// Attach adapters to the named projection layers. Base weights are frozen;
/// only A and B are trainable. With B = 0 the model output is unchanged.
pub fn apply_lora<T: Scalar>(
    model: &mut TransformerLM,
    store: &mut ParamStore<T>,
    settings: &LoraSettings,
    seed: u64,
) -> Result<()> {
    let d = model.config.d_model;
    if settings.rank == 0 || settings.rank > d {
        return Err(Error::config(format!(
            "lora rank {} must be in 1..={d}",
            settings.rank
        )));
    }
    if settings.alpha <= 0.0 {
        return Err(Error::config("lora alpha must be positive"));
    }
    let mut slots = Vec::new();
    for t in &settings.targets {
        slots.extend(parse_target(t, model.config.n_layers)?);
    }
    slots.sort_by_key(|&(l, s)| (l, s.layer_suffix()));
    slots.dedup();
    let mut rng = substream(seed, &format!("lora.{}", model.prefix));
    for (layer, slot) in slots {
        if model.adapter_for(layer, slot).is_some() {
            return Err(Error::contract(format!(
                "adapter already attached to layer {layer} {}",
                slot.layer_suffix()
            )));
        }
        let target = format!("{}.layers.{layer}.{}", model.prefix, slot.layer_suffix());
        let a = store.add(
            format!("lora.{target}.a"),
            Tensor::randn(vec![settings.rank, d], lora_a_std(d), &mut rng),
            true,
        )?;
        let b = store.add(
            format!("lora.{target}.b"),
            Tensor::zeros(vec![d, settings.rank]),
            true,
        )?;
        model.lora.push(LoraAdapter {
            target,
            layer,
            slot,
            a,
            b,
            rank: settings.rank,
            alpha: settings.alpha,
        });
    }
    Ok(())
}

/// Fold adapters into base weights (W += (alpha/r) * A^T B^T in the
/// x·W convention) and detach them.
pub fn merge_lora<T: Scalar>(model: &mut TransformerLM, store: &mut ParamStore<T>) -> Result<()> {
    if model.lora.is_empty() {
        return Err(Error::contract("merge_lora with no adapters attached"));
    }
    for ad in std::mem::take(&mut model.lora) {
        let a = store.value(ad.a).clone();
        let b = store.value(ad.b).clone();
        let delta = a.transpose2d().matmul(&b.transpose2d())?;
        let layer = &model.layers[ad.layer];
        let w = match ad.slot {
            ProjSlot::Q => layer.wq,
            ProjSlot::K => layer.wk,
            ProjSlot::V => layer.wv,
            ProjSlot::O => layer.wo,
        };
        store
            .value_mut(w)
            .add_scaled(&delta, T::from_f64(ad.alpha / ad.rank as f64));
    }
    Ok(())
}

/// Trainable adapter parameter count: sum of r * (d_in + d_out).
pub fn trainable_param_count(model: &TransformerLM) -> usize {
    let d = model.config.d_model;
    model.lora.iter().map(|a| a.rank * (d + d)).sum()
}
