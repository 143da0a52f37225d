//! Cluster interaction with stacked HSTU blocks, applied to each
//! codebook's `W` clusters independently.
//!
//! One block computes
//!
//! ```text
//! U, V, Q, K = split(SiLU(X·F1 + b1))
//! A          = SiLU(Q·Kᵀ + B_rel) / W      (masked key columns zeroed)
//! Y          = (LayerNorm(A·V) ⊙ U)·F2 + b2 (masked rows zeroed)
//! ```
//!
//! The first layer maps the pooled clusters directly; later layers add
//! their output to their input.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct HstuLayer {
    pub f1_weight: ParamId,
    pub f1_bias: ParamId,
    pub f2_weight: ParamId,
    pub f2_bias: ParamId,
    pub rel_bias: ParamId,
    pub norm_gain: ParamId,
    pub norm_offset: ParamId,
}

#[derive(Debug, Clone)]
pub struct Hstu {
    pub layers: Vec<HstuLayer>,
    /// Cluster count `W`; sizes the relative-bias table and scales `A`.
    pub clusters: usize,
    pub dim: usize,
    pub norm_eps: f32,
}

const LAYER_FIELDS: [&str; 7] = [
    "f1_weight",
    "f1_bias",
    "f2_weight",
    "f2_bias",
    "rel_bias",
    "norm_gain",
    "norm_offset",
];

impl Hstu {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        num_layers: usize,
        clusters: usize,
        dim: usize,
        norm_eps: f32,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (dim as f32).sqrt();
        let layers = (0..num_layers)
            .map(|l| {
                let name = |f: &str| format!("{prefix}.{l}.{f}");
                HstuLayer {
                    f1_weight: store.add_normal(name("f1_weight"), &[dim, 4 * dim], std, rng),
                    f1_bias: store.add_normal(name("f1_bias"), &[1, 4 * dim], 0.0, rng),
                    f2_weight: store.add_normal(name("f2_weight"), &[dim, dim], std, rng),
                    f2_bias: store.add_normal(name("f2_bias"), &[1, dim], 0.0, rng),
                    rel_bias: store.add_normal(name("rel_bias"), &[1, 2 * clusters - 1], 0.0, rng),
                    norm_gain: store.add(name("norm_gain"), crate::tensor::Tensor::from_fn(&[1, dim], |_| 1.0)),
                    norm_offset: store.add_normal(name("norm_offset"), &[1, dim], 0.0, rng),
                }
            })
            .collect();
        Self {
            layers,
            clusters,
            dim,
            norm_eps,
        }
    }

    pub(crate) fn bind(store: &ParamStore, prefix: &str, num_layers: usize, norm_eps: f32) -> Result<Self> {
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let mut ids = [ParamId(0); 7];
            for (id, f) in ids.iter_mut().zip(LAYER_FIELDS) {
                *id = crate::model::lookup(store, &format!("{prefix}.{l}.{f}"))?;
            }
            let [f1_weight, f1_bias, f2_weight, f2_bias, rel_bias, norm_gain, norm_offset] = ids;
            layers.push(HstuLayer {
                f1_weight,
                f1_bias,
                f2_weight,
                f2_bias,
                rel_bias,
                norm_gain,
                norm_offset,
            });
        }
        let first = layers
            .first()
            .ok_or_else(|| Error::Checkpoint("no interaction layers".into()))?;
        let dim = store.get(first.f2_weight).cols();
        let clusters = store.get(first.rel_bias).numel().div_ceil(2);
        Ok(Self {
            layers,
            clusters,
            dim,
            norm_eps,
        })
    }

    /// One block on `x[w×D]` with per-row `mask`; `w` may differ from the
    /// configured cluster count (relative offsets are clipped).
    pub fn block<'p>(
        &self,
        g: &mut Graph<'p>,
        store: &'p ParamStore,
        layer: usize,
        x: Var,
        mask: &[bool],
    ) -> Result<Var> {
        if !mask.iter().any(|&m| m) {
            return Err(Error::contract("interaction block needs at least one unmasked cluster"));
        }
        let p = &self.layers[layer];
        let d = self.dim;
        let f1 = g.param(store, p.f1_weight);
        let b1 = g.param(store, p.f1_bias);
        let z = g.matmul(x, f1)?;
        let z = g.add_row(z, b1)?;
        let z = g.silu(z);
        let u = g.slice_cols(z, 0, d)?;
        let v = g.slice_cols(z, d, d)?;
        let q = g.slice_cols(z, 2 * d, d)?;
        let k = g.slice_cols(z, 3 * d, d)?;

        let logits = g.matmul_bt(q, k)?;
        let rel = g.param(store, p.rel_bias);
        let logits = g.add_rel_bias(logits, rel)?;
        let a = g.silu(logits);
        let a = g.mask_cols(a, mask)?;
        let a = g.scale(a, 1.0 / self.clusters as f32);
        let av = g.matmul(a, v)?;

        let gain = g.param(store, p.norm_gain);
        let offset = g.param(store, p.norm_offset);
        let normed = g.layer_norm(av, gain, offset, self.norm_eps)?;
        let gated = g.mul(normed, u)?;
        let f2 = g.param(store, p.f2_weight);
        let b2 = g.param(store, p.f2_bias);
        let y = g.matmul(gated, f2)?;
        let y = g.add_row(y, b2)?;
        g.mask_rows(y, mask)
    }

    /// All layers on one codebook slice. A slice with no nonempty cluster
    /// yields zeros.
    pub fn interact_slice<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, reps: Var, mask: &[bool]) -> Result<Var> {
        if !mask.iter().any(|&m| m) {
            let (w, d) = g.shape(reps);
            return Ok(g.zeros(w, d));
        }
        let mut x = reps;
        for l in 0..self.layers.len() {
            let y = self.block(g, store, l, x, mask)?;
            x = if l == 0 { y } else { g.add(x, y)? };
        }
        Ok(x)
    }

    /// Applies [`Hstu::interact_slice`] to every codebook independently.
    pub fn interact<'p>(
        &self,
        g: &mut Graph<'p>,
        store: &'p ParamStore,
        reps: &[Var],
        masks: &[Vec<bool>],
    ) -> Result<Vec<Var>> {
        reps.iter()
            .zip(masks)
            .map(|(&r, m)| self.interact_slice(g, store, r, m))
            .collect()
    }
}
