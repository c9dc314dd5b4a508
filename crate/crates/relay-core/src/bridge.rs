//! The mapping layer between the source model's hidden space (width D_h)
//! and the target model's embedding space (width D_e).
//!
//! Three variants: a linear map (FC), cross-attention with caller-supplied
//! queries (CA), and cross-attention over a learned query table (CA-Q).
//! Output width is always D_e; output length is K for FC, the query count
//! for CA, and the fixed table size M for CA-Q.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::substream;
use crate::tensor::{softmax_rows, Scalar, Tensor};
use serde::{Deserialize, Serialize};

pub const BRIDGE_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BridgeVariant {
    Fc,
    Ca,
    CaQ,
}

impl std::fmt::Display for BridgeVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BridgeVariant::Fc => write!(f, "fc"),
            BridgeVariant::Ca => write!(f, "ca"),
            BridgeVariant::CaQ => write!(f, "ca-q"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeSpec {
    pub variant: BridgeVariant,
    #[serde(default = "default_bridge_heads")]
    pub n_heads: usize,
    /// Learned query count M for CA-Q.
    #[serde(default = "default_n_queries")]
    pub n_queries: usize,
}

fn default_bridge_heads() -> usize {
    4
}
fn default_n_queries() -> usize {
    32
}

impl Default for BridgeSpec {
    fn default() -> Self {
        Self {
            variant: BridgeVariant::Fc,
            n_heads: default_bridge_heads(),
            n_queries: default_n_queries(),
        }
    }
}

#[derive(Clone, Debug)]
enum BridgeParams {
    Fc {
        w: ParamId,
        b: ParamId,
    },
    Ca {
        wq: ParamId,
        wk: ParamId,
        wv: ParamId,
        wo: ParamId,
        /// Learned query table [M, D_e]; present only for CA-Q.
        queries: Option<ParamId>,
    },
}

#[derive(Clone, Debug)]
pub struct Bridge {
    pub variant: BridgeVariant,
    pub d_h: usize,
    pub d_e: usize,
    pub n_heads: usize,
    pub n_queries: usize,
    params: BridgeParams,
}

impl Bridge {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        spec: &BridgeSpec,
        d_h: usize,
        d_e: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = substream(seed, "init.bridge");
        let params = match spec.variant {
            BridgeVariant::Fc => BridgeParams::Fc {
                w: store.add(
                    "bridge.w",
                    Tensor::randn(vec![d_h, d_e], BRIDGE_INIT_STD, &mut rng),
                    true,
                )?,
                b: store.add("bridge.b", Tensor::zeros(vec![d_e]), true)?,
            },
            BridgeVariant::Ca | BridgeVariant::CaQ => {
                if d_e % spec.n_heads != 0 {
                    return Err(Error::config(format!(
                        "bridge heads {} must divide D_e {d_e}",
                        spec.n_heads
                    )));
                }
                let qk_std = 1.0 / (d_e as f64).sqrt();
                let kv_std = 1.0 / (d_h as f64).sqrt();
                let wq = store.add(
                    "bridge.wq",
                    Tensor::randn(vec![d_e, d_e], qk_std, &mut rng),
                    true,
                )?;
                let wk = store.add(
                    "bridge.wk",
                    Tensor::randn(vec![d_h, d_e], kv_std, &mut rng),
                    true,
                )?;
                let wv = store.add(
                    "bridge.wv",
                    Tensor::randn(vec![d_h, d_e], kv_std, &mut rng),
                    true,
                )?;
                let wo = store.add(
                    "bridge.wo",
                    Tensor::randn(vec![d_e, d_e], qk_std, &mut rng),
                    true,
                )?;
                let queries = if spec.variant == BridgeVariant::CaQ {
                    Some(store.add(
                        "bridge.queries",
                        Tensor::randn(vec![spec.n_queries, d_e], BRIDGE_INIT_STD, &mut rng),
                        true,
                    )?)
                } else {
                    None
                };
                BridgeParams::Ca {
                    wq,
                    wk,
                    wv,
                    wo,
                    queries,
                }
            }
        };
        Ok(Self {
            variant: spec.variant,
            d_h,
            d_e,
            n_heads: spec.n_heads,
            n_queries: spec.n_queries,
            params,
        })
    }

    pub fn wire<T: Scalar>(
        store: &ParamStore<T>,
        spec: &BridgeSpec,
        d_h: usize,
        d_e: usize,
    ) -> Result<Self> {
        let get = |name: &str| {
            store
                .lookup(name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name:?}")))
        };
        let params = match spec.variant {
            BridgeVariant::Fc => BridgeParams::Fc {
                w: get("bridge.w")?,
                b: get("bridge.b")?,
            },
            BridgeVariant::Ca | BridgeVariant::CaQ => BridgeParams::Ca {
                wq: get("bridge.wq")?,
                wk: get("bridge.wk")?,
                wv: get("bridge.wv")?,
                wo: get("bridge.wo")?,
                queries: match spec.variant {
                    BridgeVariant::CaQ => Some(get("bridge.queries")?),
                    _ => None,
                },
            },
        };
        Ok(Self {
            variant: spec.variant,
            d_h,
            d_e,
            n_heads: spec.n_heads,
            n_queries: spec.n_queries,
            params,
        })
    }

    pub fn named_params<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<(String, ParamId)> {
        self.param_ids()
            .into_iter()
            .map(|id| (store.name(id).to_string(), id))
            .collect()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match &self.params {
            BridgeParams::Fc { w, b } => vec![*w, *b],
            BridgeParams::Ca {
                wq,
                wk,
                wv,
                wo,
                queries,
            } => {
                let mut ids = vec![*wq, *wk, *wv, *wo];
                if let Some(q) = queries {
                    ids.push(*q);
                }
                ids
            }
        }
    }

    /// Prefix length produced for a source of K hidden rows with Q queries.
    pub fn output_len(&self, k: usize, n_queries_from_text: usize) -> usize {
        match self.variant {
            BridgeVariant::Fc => k,
            BridgeVariant::Ca => n_queries_from_text,
            BridgeVariant::CaQ => self.n_queries,
        }
    }

    fn check_h_width(&self, width: usize) -> Result<()> {
        if width != self.d_h {
            return Err(Error::shape(format!(
                "bridge expects hidden width {}, got {width}",
                self.d_h
            )));
        }
        Ok(())
    }

    /// FC: mapped = H W + b, row-wise.
    pub fn map_fc<T: Scalar>(&self, store: &ParamStore<T>, g: &mut Graph<T>, h: Var) -> Result<Var> {
        let BridgeParams::Fc { w, b } = &self.params else {
            return Err(Error::contract("map_fc on a non-FC bridge"));
        };
        self.check_h_width(g.value(h).cols())?;
        let wv = g.param(store, *w);
        let bv = g.param(store, *b);
        let y = g.matmul(h, wv)?;
        g.add_row(y, bv)
    }

    /// CA: multi-head cross-attention; queries cover the output positions,
    /// keys and values are projections of H. No residual path (query and
    /// hidden spaces have different widths in general).
    pub fn map_ca<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        h: Var,
        query_embs: Var,
    ) -> Result<Var> {
        let BridgeParams::Ca { wq, wk, wv, wo, .. } = &self.params else {
            return Err(Error::contract("map_ca on an FC bridge"));
        };
        if g.value(h).rows() == 0 || g.value(query_embs).rows() == 0 {
            return Err(Error::contract("map_ca needs at least one key and one query"));
        }
        self.check_h_width(g.value(h).cols())?;
        if g.value(query_embs).cols() != self.d_e {
            return Err(Error::shape(format!(
                "bridge queries must have width {}, got {}",
                self.d_e,
                g.value(query_embs).cols()
            )));
        }
        let dh = self.d_e / self.n_heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let wqv = g.param(store, *wq);
        let wkv = g.param(store, *wk);
        let wvv = g.param(store, *wv);
        let wov = g.param(store, *wo);
        let q = g.matmul(query_embs, wqv)?;
        let k = g.matmul(h, wkv)?;
        let v = g.matmul(h, wvv)?;
        let mut heads = Vec::with_capacity(self.n_heads);
        for hd in 0..self.n_heads {
            let qh = g.slice_cols(q, hd * dh, dh)?;
            let kh = g.slice_cols(k, hd * dh, dh)?;
            let vh = g.slice_cols(v, hd * dh, dh)?;
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt)?;
            let scaled = g.scale(scores, scale);
            let probs = g.softmax(scaled)?;
            heads.push(g.matmul(probs, vh)?);
        }
        let cat = g.concat_cols(&heads)?;
        g.matmul(cat, wov)
    }

    /// CA-Q: map_ca over the learned query table; output length is the
    /// fixed M regardless of K.
    pub fn map_caq<T: Scalar>(&self, store: &ParamStore<T>, g: &mut Graph<T>, h: Var) -> Result<Var> {
        let BridgeParams::Ca {
            queries: Some(q), ..
        } = &self.params
        else {
            return Err(Error::contract("map_caq on a bridge without a query table"));
        };
        let qv = g.param(store, *q);
        self.map_ca(store, g, h, qv)
    }

    /// Taped dispatch over the variant.
    pub fn apply<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        h: Var,
        ca_queries: Option<Var>,
    ) -> Result<Var> {
        match self.variant {
            BridgeVariant::Fc => self.map_fc(store, g, h),
            BridgeVariant::Ca => {
                let q = ca_queries
                    .ok_or_else(|| Error::contract("CA bridge needs query embeddings"))?;
                self.map_ca(store, g, h, q)
            }
            BridgeVariant::CaQ => self.map_caq(store, g, h),
        }
    }

    /// No-grad twin of `apply` for decoding.
    pub fn apply_infer<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        h: &Tensor<T>,
        ca_queries: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        self.check_h_width(h.cols())?;
        match &self.params {
            BridgeParams::Fc { w, b } => {
                let mut y = h.matmul(store.value(*w))?;
                let bias = store.value(*b);
                let (m, n) = (y.rows(), y.cols());
                for i in 0..m {
                    for j in 0..n {
                        y.data_mut()[i * n + j] += bias.data()[j];
                    }
                }
                Ok(y)
            }
            BridgeParams::Ca {
                wq,
                wk,
                wv,
                wo,
                queries,
            } => {
                let q_embs = match (self.variant, ca_queries, queries) {
                    (BridgeVariant::CaQ, _, Some(qid)) => store.value(*qid).clone(),
                    (BridgeVariant::Ca, Some(q), _) => q.clone(),
                    _ => return Err(Error::contract("CA bridge needs query embeddings")),
                };
                if h.rows() == 0 || q_embs.rows() == 0 {
                    return Err(Error::contract("map_ca needs at least one key and one query"));
                }
                let dh = self.d_e / self.n_heads;
                let scale = T::from_f64(1.0 / (dh as f64).sqrt());
                let q = q_embs.matmul(store.value(*wq))?;
                let k = h.matmul(store.value(*wk))?;
                let v = h.matmul(store.value(*wv))?;
                let (m, d_e) = (q.rows(), self.d_e);
                let mut cat = Tensor::zeros(vec![m, d_e]);
                for hd in 0..self.n_heads {
                    let qh = slice_cols(&q, hd * dh, dh);
                    let kh = slice_cols(&k, hd * dh, dh);
                    let vh = slice_cols(&v, hd * dh, dh);
                    let scores = qh.matmul_bt(&kh)?.scale(scale);
                    let probs = softmax_rows(&scores);
                    let oh = probs.matmul(&vh)?;
                    for i in 0..m {
                        for j in 0..dh {
                            cat.data_mut()[i * d_e + hd * dh + j] = oh.at(i, j);
                        }
                    }
                }
                cat.matmul(store.value(*wo))
            }
        }
    }
}

fn slice_cols<T: Scalar>(x: &Tensor<T>, start: usize, width: usize) -> Tensor<T> {
    let (m, n) = (x.rows(), x.cols());
    let mut data = Vec::with_capacity(m * width);
    for i in 0..m {
        data.extend_from_slice(&x.data()[i * n + start..i * n + start + width]);
    }
    Tensor::new(vec![m, width], data).expect("slice shape")
}
