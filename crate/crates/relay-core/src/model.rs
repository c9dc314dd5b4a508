//! Decoder-only transformer LM.
//!
//! Pre-norm blocks (LN -> attention -> residual, LN -> SiLU FFN -> residual),
//! learned absolute positions, a final layer norm, and an untied output
//! projection. The same struct plays the source-side hidden-state producer
//! and the target-side generator.
//!
//! Two forward drivers share the numeric kernels: a taped version for
//! training and a KV-cached no-grad version for decoding.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, ProjSlot};
use crate::optim::{Adam, AdamConfig};
use crate::params::{ParamId, ParamStore};
use crate::rng::substream;
use crate::tensor::{layer_norm_rows, silu, softmax_rows, Scalar, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub const LN_EPS: f64 = 1e-5;

/// Init scale for embedding and positional tables.
pub const EMBED_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.d_model == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.d_ff == 0
        {
            return Err(Error::config("all transformer dimensions must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::config("max_seq_len must be at least 2"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count:
    ///   V*d + S*d
    /// + n_layers * (4*d*d + 4*d          attention projections and biases
    ///               + 2*d + 2*d          two layer norms
    ///               + 2*d*d_ff + d_ff + d  FFN)
    /// + 2*d                              final layer norm
    /// + d*V                              output projection
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let v = self.vocab_size;
        let per_layer = 4 * d * d + 4 * d + 2 * d + 2 * d + 2 * d * self.d_ff + self.d_ff + d;
        v * d + self.max_seq_len * d + self.n_layers * per_layer + 2 * d + d * v
    }
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct TransformerLM {
    pub config: TransformerConfig,
    pub prefix: String,
    pub embed: ParamId,
    pub pos: ParamId,
    pub layers: Vec<LayerParams>,
    pub lnf_g: ParamId,
    pub lnf_b: ParamId,
    pub w_out: ParamId,
    /// Attached low-rank adapters; empty when none.
    pub lora: Vec<LoraAdapter>,
}

/// Token ids or pre-built embedding rows.
pub enum ForwardInput<'a> {
    Tokens(&'a [u32]),
    Embeddings(Var),
}

impl TransformerLM {
    /// Allocate freshly initialized parameters in the store under
    /// `{prefix}.`; projections use fan-in scaling, tables use std 0.02.
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        config: TransformerConfig,
        prefix: &str,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, &format!("init.{prefix}"));
        let d = config.d_model;
        let proj_std = 1.0 / (d as f64).sqrt();
        let add = |store: &mut ParamStore<T>, name: String, t: Tensor<T>| store.add(name, t, true);

        let embed = add(
            store,
            format!("{prefix}.embed"),
            Tensor::randn(vec![config.vocab_size, d], EMBED_INIT_STD, &mut rng),
        )?;
        let pos = add(
            store,
            format!("{prefix}.pos"),
            Tensor::randn(vec![config.max_seq_len, d], EMBED_INIT_STD, &mut rng),
        )?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = format!("{prefix}.layers.{i}");
            let layer = LayerParams {
                ln1_g: add(store, format!("{p}.ln1.g"), Tensor::full(vec![d], T::one()))?,
                ln1_b: add(store, format!("{p}.ln1.b"), Tensor::zeros(vec![d]))?,
                wq: add(store, format!("{p}.attn.wq"), Tensor::randn(vec![d, d], proj_std, &mut rng))?,
                bq: add(store, format!("{p}.attn.bq"), Tensor::zeros(vec![d]))?,
                wk: add(store, format!("{p}.attn.wk"), Tensor::randn(vec![d, d], proj_std, &mut rng))?,
                bk: add(store, format!("{p}.attn.bk"), Tensor::zeros(vec![d]))?,
                wv: add(store, format!("{p}.attn.wv"), Tensor::randn(vec![d, d], proj_std, &mut rng))?,
                bv: add(store, format!("{p}.attn.bv"), Tensor::zeros(vec![d]))?,
                wo: add(store, format!("{p}.attn.wo"), Tensor::randn(vec![d, d], proj_std, &mut rng))?,
                bo: add(store, format!("{p}.attn.bo"), Tensor::zeros(vec![d]))?,
                ln2_g: add(store, format!("{p}.ln2.g"), Tensor::full(vec![d], T::one()))?,
                ln2_b: add(store, format!("{p}.ln2.b"), Tensor::zeros(vec![d]))?,
                w1: add(
                    store,
                    format!("{p}.ffn.w1"),
                    Tensor::randn(vec![d, config.d_ff], proj_std, &mut rng),
                )?,
                b1: add(store, format!("{p}.ffn.b1"), Tensor::zeros(vec![config.d_ff]))?,
                w2: add(
                    store,
                    format!("{p}.ffn.w2"),
                    Tensor::randn(vec![config.d_ff, d], 1.0 / (config.d_ff as f64).sqrt(), &mut rng),
                )?,
                b2: add(store, format!("{p}.ffn.b2"), Tensor::zeros(vec![d]))?,
            };
            layers.push(layer);
        }
        let lnf_g = add(store, format!("{prefix}.lnf.g"), Tensor::full(vec![d], T::one()))?;
        let lnf_b = add(store, format!("{prefix}.lnf.b"), Tensor::zeros(vec![d]))?;
        // the unembedding stays small so a fresh model starts near-uniform
        let w_out = add(
            store,
            format!("{prefix}.w_out"),
            Tensor::randn(vec![d, config.vocab_size], EMBED_INIT_STD, &mut rng),
        )?;
        Ok(Self {
            config,
            prefix: prefix.to_string(),
            embed,
            pos,
            layers,
            lnf_g,
            lnf_b,
            w_out,
            lora: Vec::new(),
        })
    }

    /// Wire a model onto parameters already present in the store (e.g. after
    /// loading a checkpoint).
    pub fn wire<T: Scalar>(
        store: &ParamStore<T>,
        config: TransformerConfig,
        prefix: &str,
    ) -> Result<Self> {
        config.validate()?;
        let get = |name: String| {
            store
                .lookup(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name:?}")))
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = format!("{prefix}.layers.{i}");
            layers.push(LayerParams {
                ln1_g: get(format!("{p}.ln1.g"))?,
                ln1_b: get(format!("{p}.ln1.b"))?,
                wq: get(format!("{p}.attn.wq"))?,
                bq: get(format!("{p}.attn.bq"))?,
                wk: get(format!("{p}.attn.wk"))?,
                bk: get(format!("{p}.attn.bk"))?,
                wv: get(format!("{p}.attn.wv"))?,
                bv: get(format!("{p}.attn.bv"))?,
                wo: get(format!("{p}.attn.wo"))?,
                bo: get(format!("{p}.attn.bo"))?,
                ln2_g: get(format!("{p}.ln2.g"))?,
                ln2_b: get(format!("{p}.ln2.b"))?,
                w1: get(format!("{p}.ffn.w1"))?,
                b1: get(format!("{p}.ffn.b1"))?,
                w2: get(format!("{p}.ffn.w2"))?,
                b2: get(format!("{p}.ffn.b2"))?,
            });
        }
        Ok(Self {
            config,
            prefix: prefix.to_string(),
            embed: get(format!("{prefix}.embed"))?,
            pos: get(format!("{prefix}.pos"))?,
            layers,
            lnf_g: get(format!("{prefix}.lnf.g"))?,
            lnf_b: get(format!("{prefix}.lnf.b"))?,
            w_out: get(format!("{prefix}.w_out"))?,
            lora: Vec::new(),
        })
    }

    /// Base parameters in checkpoint order; adapters are listed separately.
    pub fn named_params<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<(String, ParamId)> {
        let mut out = vec![
            (store.name(self.embed).to_string(), self.embed),
            (store.name(self.pos).to_string(), self.pos),
        ];
        for l in &self.layers {
            for id in [
                l.ln1_g, l.ln1_b, l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo, l.ln2_g, l.ln2_b,
                l.w1, l.b1, l.w2, l.b2,
            ] {
                out.push((store.name(id).to_string(), id));
            }
        }
        out.push((store.name(self.lnf_g).to_string(), self.lnf_g));
        out.push((store.name(self.lnf_b).to_string(), self.lnf_b));
        out.push((store.name(self.w_out).to_string(), self.w_out));
        for ad in &self.lora {
            out.push((store.name(ad.a).to_string(), ad.a));
            out.push((store.name(ad.b).to_string(), ad.b));
        }
        out
    }

    pub fn base_param_ids(&self) -> Vec<ParamId> {
        let mut out = vec![self.embed, self.pos];
        for l in &self.layers {
            out.extend([
                l.ln1_g, l.ln1_b, l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo, l.ln2_g, l.ln2_b,
                l.w1, l.b1, l.w2, l.b2,
            ]);
        }
        out.extend([self.lnf_g, self.lnf_b, self.w_out]);
        out
    }

    pub fn set_base_trainable<T: Scalar>(&self, store: &mut ParamStore<T>, trainable: bool) {
        for id in self.base_param_ids() {
            store.set_trainable(id, trainable);
        }
    }

    pub fn adapter_for(&self, layer: usize, slot: ProjSlot) -> Option<&LoraAdapter> {
        self.lora.iter().find(|a| a.layer == layer && a.slot == slot)
    }

    fn check_len(&self, offset: usize, k: usize) -> Result<()> {
        if offset + k > self.config.max_seq_len {
            return Err(Error::Capacity(format!(
                "sequence positions {}..{} exceed max_seq_len {}",
                offset,
                offset + k,
                self.config.max_seq_len
            )));
        }
        Ok(())
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Range(format!(
                "token id {bad} out of range for vocab of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    // ── taped forward ──────────────────────────────────────────────────

    /// Token plus positional embeddings for the given position offset.
    pub fn embed_graph<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        ids: &[u32],
        offset: usize,
    ) -> Result<Var> {
        self.check_ids(ids)?;
        self.check_len(offset, ids.len())?;
        let table = g.param(store, self.embed);
        let rows: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let tok = g.gather_rows(table, &rows)?;
        let pos_table = g.param(store, self.pos);
        let pos_rows: Vec<usize> = (offset..offset + ids.len()).collect();
        let pos = g.gather_rows(pos_table, &pos_rows)?;
        g.add(tok, pos)
    }

    fn linear_graph<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        x: Var,
        w: ParamId,
        b: ParamId,
        adapter: Option<&LoraAdapter>,
    ) -> Result<Var> {
        let wv = g.param(store, w);
        let bv = g.param(store, b);
        let mut y = g.matmul(x, wv)?;
        y = g.add_row(y, bv)?;
        if let Some(ad) = adapter {
            let a = g.param(store, ad.a);
            let at = g.transpose(a);
            let xa = g.matmul(x, at)?;
            let bmat = g.param(store, ad.b);
            let bt = g.transpose(bmat);
            let xab = g.matmul(xa, bt)?;
            let scaled = g.scale(xab, T::from_f64(ad.alpha / ad.rank as f64));
            y = g.add(y, scaled)?;
        }
        Ok(y)
    }

    /// Pre-norm decoder stack over embedding rows; returns post-final-LN
    /// hidden states [L, d].
    pub fn forward_body<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        embs: Var,
    ) -> Result<Var> {
        let l = g.value(embs).rows();
        let d = self.config.d_model;
        if g.value(embs).cols() != d {
            return Err(Error::shape(format!(
                "embedding width {} does not match d_model {d}",
                g.value(embs).cols()
            )));
        }
        let dh = self.config.head_dim();
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mask = causal_mask::<T>(l);
        let mut x = embs;
        for (li, layer) in self.layers.iter().enumerate() {
            let ln1g = g.param(store, layer.ln1_g);
            let ln1b = g.param(store, layer.ln1_b);
            let h = g.layer_norm(x, ln1g, ln1b, LN_EPS)?;
            let q = self.linear_graph(store, g, h, layer.wq, layer.bq, self.adapter_for(li, ProjSlot::Q))?;
            let k = self.linear_graph(store, g, h, layer.wk, layer.bk, self.adapter_for(li, ProjSlot::K))?;
            let v = self.linear_graph(store, g, h, layer.wv, layer.bv, self.adapter_for(li, ProjSlot::V))?;
            let mut heads = Vec::with_capacity(self.config.n_heads);
            for hd in 0..self.config.n_heads {
                let qh = g.slice_cols(q, hd * dh, dh)?;
                let kh = g.slice_cols(k, hd * dh, dh)?;
                let vh = g.slice_cols(v, hd * dh, dh)?;
                let kt = g.transpose(kh);
                let scores = g.matmul(qh, kt)?;
                let scaled = g.scale(scores, scale);
                let masked = g.add_const(scaled, &mask)?;
                let probs = g.softmax(masked)?;
                heads.push(g.matmul(probs, vh)?);
            }
            let cat = g.concat_cols(&heads)?;
            let attn_out =
                self.linear_graph(store, g, cat, layer.wo, layer.bo, self.adapter_for(li, ProjSlot::O))?;
            x = g.add(x, attn_out)?;

            let ln2g = g.param(store, layer.ln2_g);
            let ln2b = g.param(store, layer.ln2_b);
            let h2 = g.layer_norm(x, ln2g, ln2b, LN_EPS)?;
            let w1 = g.param(store, layer.w1);
            let b1 = g.param(store, layer.b1);
            let mut f = g.matmul(h2, w1)?;
            f = g.add_row(f, b1)?;
            f = g.silu(f);
            let w2 = g.param(store, layer.w2);
            let b2 = g.param(store, layer.b2);
            let mut f2 = g.matmul(f, w2)?;
            f2 = g.add_row(f2, b2)?;
            x = g.add(x, f2)?;
        }
        let lnfg = g.param(store, self.lnf_g);
        let lnfb = g.param(store, self.lnf_b);
        g.layer_norm(x, lnfg, lnfb, LN_EPS)
    }

    /// Last-layer hidden states for a token sequence (one teacher-forced
    /// pass, causal masking; no sampling).
    pub fn forward_hidden<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        ids: &[u32],
    ) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::contract("forward_hidden on an empty sequence"));
        }
        let embs = self.embed_graph(store, g, ids, 0)?;
        self.forward_body(store, g, embs)
    }

    /// Next-token logits [L, V] for token or embedding input.
    pub fn forward_logits<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        input: ForwardInput<'_>,
    ) -> Result<Var> {
        let embs = match input {
            ForwardInput::Tokens(ids) => {
                if ids.is_empty() {
                    return Err(Error::contract("forward_logits on an empty sequence"));
                }
                self.embed_graph(store, g, ids, 0)?
            }
            ForwardInput::Embeddings(v) => {
                self.check_len(0, g.value(v).rows())?;
                v
            }
        };
        let hidden = self.forward_body(store, g, embs)?;
        let w = g.param(store, self.w_out);
        g.matmul(hidden, w)
    }

    // ── no-grad inference with KV cache ────────────────────────────────

    pub fn embed_infer<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        ids: &[u32],
        offset: usize,
    ) -> Result<Tensor<T>> {
        self.check_ids(ids)?;
        self.check_len(offset, ids.len())?;
        let d = self.config.d_model;
        let table = store.value(self.embed);
        let pos = store.value(self.pos);
        let mut out = Tensor::zeros(vec![ids.len(), d]);
        for (i, &t) in ids.iter().enumerate() {
            let trow = table.row(t as usize);
            let prow = pos.row(offset + i);
            for j in 0..d {
                out.data_mut()[i * d + j] = trow[j] + prow[j];
            }
        }
        Ok(out)
    }

    fn linear_infer<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        w: ParamId,
        b: ParamId,
        adapter: Option<&LoraAdapter>,
    ) -> Result<Tensor<T>> {
        let mut y = x.matmul(store.value(w))?;
        let bias = store.value(b);
        let (m, n) = (y.rows(), y.cols());
        for i in 0..m {
            for j in 0..n {
                y.data_mut()[i * n + j] += bias.data()[j];
            }
        }
        if let Some(ad) = adapter {
            let xa = x.matmul_bt(store.value(ad.a))?;
            let xab = xa.matmul(&store.value(ad.b).transpose2d())?;
            y.add_scaled(&xab, T::from_f64(ad.alpha / ad.rank as f64));
        }
        Ok(y)
    }

    /// Run the block stack over `embs` while appending K/V rows to `cache`;
    /// `past` is the number of rows already cached (0 for a fresh prefill).
    /// Returns post-final-LN hidden states for the new rows.
    pub fn infer_extend<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        embs: &Tensor<T>,
        cache: &mut KvCache<T>,
    ) -> Result<Tensor<T>> {
        let l = embs.rows();
        let d = self.config.d_model;
        let dh = self.config.head_dim();
        let past = cache.len;
        self.check_len(0, past + l)?;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut x = embs.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            let (h, _, _) = layer_norm_rows(
                &x,
                store.value(layer.ln1_g),
                store.value(layer.ln1_b),
                LN_EPS,
            );
            let q = self.linear_infer(store, &h, layer.wq, layer.bq, self.adapter_for(li, ProjSlot::Q))?;
            let k = self.linear_infer(store, &h, layer.wk, layer.bk, self.adapter_for(li, ProjSlot::K))?;
            let v = self.linear_infer(store, &h, layer.wv, layer.bv, self.adapter_for(li, ProjSlot::V))?;
            cache.append(li, &k, &v);
            let k_all = cache.k_tensor(li, d);
            let v_all = cache.v_tensor(li, d);
            let total = past + l;
            let mut attn = Tensor::zeros(vec![l, d]);
            for hd in 0..self.config.n_heads {
                let qh = slice_cols_tensor(&q, hd * dh, dh);
                let kh = slice_cols_tensor(&k_all, hd * dh, dh);
                let vh = slice_cols_tensor(&v_all, hd * dh, dh);
                let mut scores = qh.matmul_bt(&kh)?;
                for i in 0..l {
                    for j in 0..total {
                        let idx = i * total + j;
                        if j > past + i {
                            scores.data_mut()[idx] = T::neg_infinity();
                        } else {
                            scores.data_mut()[idx] *= scale;
                        }
                    }
                }
                let probs = softmax_rows(&scores);
                let oh = probs.matmul(&vh)?;
                for i in 0..l {
                    for j in 0..dh {
                        attn.data_mut()[i * d + hd * dh + j] = oh.at(i, j);
                    }
                }
            }
            let attn_out =
                self.linear_infer(store, &attn, layer.wo, layer.bo, self.adapter_for(li, ProjSlot::O))?;
            x.add_scaled(&attn_out, T::one());

            let (h2, _, _) = layer_norm_rows(
                &x,
                store.value(layer.ln2_g),
                store.value(layer.ln2_b),
                LN_EPS,
            );
            let mut f = self.linear_infer(store, &h2, layer.w1, layer.b1, None)?;
            f = f.map(silu);
            let f2 = self.linear_infer(store, &f, layer.w2, layer.b2, None)?;
            x.add_scaled(&f2, T::one());
        }
        cache.len += l;
        let (out, _, _) = layer_norm_rows(&x, store.value(self.lnf_g), store.value(self.lnf_b), LN_EPS);
        Ok(out)
    }

    /// Hidden states for a full sequence without recording a tape.
    pub fn infer_hidden<T: Scalar>(&self, store: &ParamStore<T>, ids: &[u32]) -> Result<Tensor<T>> {
        if ids.is_empty() {
            return Err(Error::contract("infer_hidden on an empty sequence"));
        }
        let embs = self.embed_infer(store, ids, 0)?;
        let mut cache = KvCache::new(self.config.n_layers);
        self.infer_extend(store, &embs, &mut cache)
    }

    /// Next-token logits for hidden rows.
    pub fn logits_infer<T: Scalar>(&self, store: &ParamStore<T>, hidden: &Tensor<T>) -> Result<Tensor<T>> {
        hidden.matmul(store.value(self.w_out))
    }
}

/// Per-layer cached key/value rows for incremental decoding.
#[derive(Clone, Debug)]
pub struct KvCache<T> {
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    pub len: usize,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(n_layers: usize) -> Self {
        Self {
            k: vec![Vec::new(); n_layers],
            v: vec![Vec::new(); n_layers],
            len: 0,
        }
    }

    fn append(&mut self, layer: usize, k: &Tensor<T>, v: &Tensor<T>) {
        self.k[layer].extend_from_slice(k.data());
        self.v[layer].extend_from_slice(v.data());
    }

    fn k_tensor(&self, layer: usize, d: usize) -> Tensor<T> {
        Tensor::new(vec![self.k[layer].len() / d, d], self.k[layer].clone()).expect("cache shape")
    }

    fn v_tensor(&self, layer: usize, d: usize) -> Tensor<T> {
        Tensor::new(vec![self.v[layer].len() / d, d], self.v[layer].clone()).expect("cache shape")
    }
}

fn slice_cols_tensor<T: Scalar>(x: &Tensor<T>, start: usize, width: usize) -> Tensor<T> {
    let (m, n) = (x.rows(), x.cols());
    let mut data = Vec::with_capacity(m * width);
    for i in 0..m {
        data.extend_from_slice(&x.data()[i * n + start..i * n + start + width]);
    }
    Tensor::new(vec![m, width], data).expect("slice shape")
}

/// Strictly-upper -inf, zero elsewhere.
pub fn causal_mask<T: Scalar>(l: usize) -> Tensor<T> {
    let mut m = Tensor::zeros(vec![l, l]);
    for i in 0..l {
        for j in (i + 1)..l {
            m.data_mut()[i * l + j] = T::neg_infinity();
        }
    }
    m
}

// ── pretraining ─────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    /// Embed each training sequence at a random position offset so the
    /// whole positional table trains and the model learns BOS-relative
    /// structure instead of absolute-position shortcuts.
    #[serde(default)]
    pub offset_jitter: bool,
    /// Compose each training row as the framed sentence twice in a row.
    /// Predicting the second copy requires attending to the first, which
    /// builds the copying circuits that natural-text repetition gives
    /// full-scale models.
    #[serde(default)]
    pub echo: bool,
}

#[derive(Clone, Debug)]
pub struct TrainLogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub heldout_bleu: Option<f64>,
}

/// Next-token cross-entropy over BOS-prefixed, EOS-terminated sequences.
/// Returns the per-step mean per-token loss log.
pub fn pretrain_lm<T: Scalar>(
    model: &TransformerLM,
    store: &mut ParamStore<T>,
    sentences: &[impl AsRef<str>],
    vocab: &crate::vocab::Vocabulary,
    settings: &PretrainSettings,
    adam_cfg: &AdamConfig,
    seed: u64,
) -> Result<Vec<TrainLogRow>> {
    use crate::vocab::{BOS, EOS};
    if sentences.is_empty() {
        return Err(Error::data("pretraining corpus is empty"));
    }
    let mut framed: Vec<Vec<u32>> = Vec::with_capacity(sentences.len());
    for (i, s) in sentences.iter().enumerate() {
        let mut ids = vec![BOS];
        ids.extend(vocab.encode(s.as_ref()));
        ids.push(EOS);
        if settings.echo {
            let copy = ids.clone();
            ids.extend(copy);
        }
        if ids.len() - 1 > model.config.max_seq_len {
            return Err(Error::data(format!(
                "line {}: sentence needs {} positions, max_seq_len is {}",
                i + 1,
                ids.len() - 1,
                model.config.max_seq_len
            )));
        }
        framed.push(ids);
    }

    let trainable = store.trainable_ids();
    let mut adam = Adam::new(adam_cfg.clone());
    let mut shuffle_rng = substream(seed, "pretrain.shuffle");
    let mut offset_rng = substream(seed, "pretrain.offsets");
    let mut order: Vec<usize> = (0..framed.len()).collect();
    order.shuffle(&mut shuffle_rng);
    let mut cursor = 0usize;
    let mut log = Vec::with_capacity(settings.steps);

    for step in 0..settings.steps {
        let mut g = Graph::new();
        let mut sentence_losses = Vec::with_capacity(settings.batch_size);
        let mut total_tokens = 0usize;
        for _ in 0..settings.batch_size {
            if cursor >= order.len() {
                order.shuffle(&mut shuffle_rng);
                cursor = 0;
            }
            let ids = &framed[order[cursor]];
            cursor += 1;
            let inputs = &ids[..ids.len() - 1];
            let offset = if settings.offset_jitter {
                use rand::Rng;
                let room = model.config.max_seq_len - inputs.len();
                offset_rng.gen_range(0..=room)
            } else {
                0
            };
            let embs = model.embed_graph(store, &mut g, inputs, offset)?;
            let logits = model.forward_logits(store, &mut g, ForwardInput::Embeddings(embs))?;
            let logp = g.log_softmax(logits)?;
            let picks: Vec<(usize, usize)> = ids[1..]
                .iter()
                .enumerate()
                .map(|(t, &y)| (t, y as usize))
                .collect();
            total_tokens += picks.len();
            sentence_losses.push(g.pick_sum(logp, &picks)?);
        }
        let mut total = sentence_losses[0];
        for &l in &sentence_losses[1..] {
            total = g.add(total, l)?;
        }
        let loss = g.scale(total, T::from_f64(-1.0 / total_tokens as f64));
        let loss_val = g.scalar_value(loss).as_f64();
        if !loss_val.is_finite() {
            return Err(Error::contract(format!("non-finite loss at step {step}")));
        }
        store.zero_grads();
        g.backward(loss, store)?;
        let lr = adam.step(store, &trainable)?;
        log.push(TrainLogRow {
            step: step + 1,
            lr,
            loss: loss_val,
            heldout_bleu: None,
        });
    }
    Ok(log)
}
