//! Candidate-aware target attention over interacted clusters, the MLP
//! scorer and the log-loss objective.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Scaled dot-product attention with the candidate as the single query and
/// every cluster of every codebook as a key/value.
#[derive(Debug, Clone)]
pub struct TargetAttention {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub scale: f32,
}

/// Attention result; `degenerate` is set when no cluster was unmasked.
#[derive(Debug, Clone, Copy)]
pub struct Attended {
    pub output: Var,
    pub weights: Option<Var>,
    pub degenerate: bool,
}

impl TargetAttention {
    pub fn init<R: Rng>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Self {
        let std = 1.0 / (dim as f32).sqrt();
        Self {
            query: store.add_normal("head.attn.query", &[dim, dim], std, rng),
            key: store.add_normal("head.attn.key", &[dim, dim], std, rng),
            value: store.add_normal("head.attn.value", &[dim, dim], std, rng),
            scale: std,
        }
    }

    pub(crate) fn bind(store: &ParamStore) -> Result<Self> {
        let query = crate::model::lookup(store, "head.attn.query")?;
        let dim = store.get(query).cols();
        Ok(Self {
            query,
            key: crate::model::lookup(store, "head.attn.key")?,
            value: crate::model::lookup(store, "head.attn.value")?,
            scale: 1.0 / (dim as f32).sqrt(),
        })
    }

    /// `clusters` holds all `N·W` cluster rows; `mask` marks the nonempty ones.
    pub fn attend<'p>(
        &self,
        g: &mut Graph<'p>,
        store: &'p ParamStore,
        clusters: Var,
        mask: &[bool],
        candidate: Var,
    ) -> Result<Attended> {
        let dim = g.shape(candidate).1;
        if !mask.iter().any(|&m| m) {
            return Ok(Attended {
                output: g.zeros(1, dim),
                weights: None,
                degenerate: true,
            });
        }
        let wq = g.param(store, self.query);
        let wk = g.param(store, self.key);
        let wv = g.param(store, self.value);
        let q = g.matmul(candidate, wq)?;
        let k = g.matmul(clusters, wk)?;
        let v = g.matmul(clusters, wv)?;
        let logits = g.matmul_bt(q, k)?;
        let logits = g.scale(logits, self.scale);
        let weights = g.masked_softmax(logits, mask)?;
        Ok(Attended {
            output: g.matmul(weights, v)?,
            weights: Some(weights),
            degenerate: false,
        })
    }
}

/// Fully connected scorer: SiLU hidden layers, sigmoid output.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// `widths` runs from the input width to the final `1`.
    pub fn init<R: Rng>(store: &mut ParamStore, widths: &[usize], rng: &mut R) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let std = 1.0 / (w[0] as f32).sqrt();
                let weight = store.add_normal(format!("head.mlp.{i}.weight"), &[w[0], w[1]], std, rng);
                let bias = store.add_normal(format!("head.mlp.{i}.bias"), &[1, w[1]], 0.0, rng);
                (weight, bias)
            })
            .collect();
        Self { layers }
    }

    pub(crate) fn bind(store: &ParamStore, depth: usize) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| {
                Ok((
                    crate::model::lookup(store, &format!("head.mlp.{i}.weight"))?,
                    crate::model::lookup(store, &format!("head.mlp.{i}.bias"))?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        for pair in layers.windows(2) {
            if store.get(pair[0].0).cols() != store.get(pair[1].0).rows() {
                return Err(Error::Checkpoint("MLP layer widths disagree".into()));
            }
        }
        Ok(Self { layers })
    }

    pub fn input_width(&self, store: &ParamStore) -> usize {
        store.get(self.layers[0].0).rows()
    }

    /// Click probability `σ(MLP(x))` as a `1×1` value.
    pub fn forward<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let wv = g.param(store, w);
            let bv = g.param(store, b);
            h = g.matmul(h, wv)?;
            h = g.add_row(h, bv)?;
            h = if i == last { g.sigmoid(h) } else { g.silu(h) };
        }
        Ok(h)
    }

    /// `σ(MLP([interest | side | candidate]))`.
    pub fn predict<'p>(
        &self,
        g: &mut Graph<'p>,
        store: &'p ParamStore,
        interest: Var,
        side: Var,
        candidate: Var,
    ) -> Result<Var> {
        let x = g.concat_cols(&[interest, side, candidate])?;
        self.forward(g, store, x)
    }
}

pub const PROB_CLIP: f64 = 1e-7;

/// `−(y·ln p + (1−y)·ln(1−p))` with `p` clipped to `[clip, 1 − clip]`.
pub fn logloss_value(p: f64, y: f64, clip: f64) -> f64 {
    let p = p.clamp(clip, 1.0 - clip);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Mean log-loss over a batch.
pub fn batch_logloss(probs: &[f32], labels: &[u8]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if probs.is_empty() {
        return Err(Error::UndefinedMetric("log-loss of an empty batch".into()));
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| logloss_value(p as f64, y as f64, PROB_CLIP))
        .sum();
    Ok(total / probs.len() as f64)
}
