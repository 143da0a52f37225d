//! Embedding tables and the per-event feature fusion.
//!
//! A behavior event is embedded as `[item | category | event type |
//! position] · F`, four `D/4`-wide lookups concatenated and mapped to `D`
//! by the trainable fusion matrix `F`. The candidate reuses the item and
//! category tables and the matching rows of `F`. User and context fields
//! are looked up and concatenated into the side vector.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::data::{BehaviorEvent, TrainingInstance};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::{ParamId, ParamStore};
use crate::seed::mix64;

/// Table row for a raw id: 0 is the unknown row, ids inside the vocabulary
/// map to themselves and larger ids are hashed into `1..vocab`.
pub fn vocab_row(id: u64, vocab: usize) -> usize {
    let v = vocab as u64;
    if id == 0 || v <= 1 {
        0
    } else if id < v {
        id as usize
    } else {
        (1 + mix64(id) % (v - 1)) as usize
    }
}

/// Table rows for one instance after truncation to the most recent events.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedIds {
    pub user_id: u64,
    pub items: Vec<usize>,
    pub categories: Vec<usize>,
    pub event_types: Vec<usize>,
    pub positions: Vec<usize>,
    pub candidate_item: usize,
    pub candidate_category: usize,
    pub user_rows: Vec<usize>,
    pub context_rows: Vec<usize>,
}

impl EncodedIds {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Encoded behavior sequence of one user. `embeddings` is `None` for a user
/// without behaviors (the degenerate case).
#[derive(Debug, Clone)]
pub struct EncodedSequence {
    pub user_id: u64,
    pub embeddings: Option<Var>,
    pub length: usize,
    pub positions: Vec<usize>,
}

impl EncodedSequence {
    pub fn is_degenerate(&self) -> bool {
        self.embeddings.is_none()
    }
}

#[derive(Debug, Clone)]
pub struct EncodedInstance {
    pub sequence: EncodedSequence,
    pub candidate: Var,
    pub side: Var,
}

#[derive(Debug, Clone)]
pub struct FeatureEncoder {
    pub item: ParamId,
    pub category: ParamId,
    pub event_type: ParamId,
    pub position: ParamId,
    pub user: ParamId,
    pub context: ParamId,
    pub fusion: ParamId,
    field_dim: usize,
    max_len: usize,
    item_vocab: usize,
    category_vocab: usize,
    user_vocab: usize,
    context_vocab: usize,
    user_fields: usize,
    context_fields: usize,
}

pub(crate) const EMBED_STD: f32 = 0.5;

impl FeatureEncoder {
    pub fn init<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let f = cfg.dim / 4;
        let mut table = |name: &str, rows: usize| store.add_normal(name, &[rows, f], EMBED_STD, rng);
        let item = table("encoder.item", cfg.item_vocab);
        let category = table("encoder.category", cfg.category_vocab);
        let event_type = table("encoder.event_type", 4);
        let position = table("encoder.position", cfg.max_len);
        let user = table("encoder.user", cfg.user_vocab);
        let context = table("encoder.context", cfg.context_vocab);
        let fusion = store.add_normal("encoder.fusion", &[4 * f, cfg.dim], 1.0 / (4.0 * f as f32).sqrt(), rng);
        Self::from_parts(cfg, [item, category, event_type, position, user, context, fusion])
    }

    pub(crate) fn bind(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let ids = [
            "encoder.item",
            "encoder.category",
            "encoder.event_type",
            "encoder.position",
            "encoder.user",
            "encoder.context",
            "encoder.fusion",
        ]
        .map(|n| crate::model::lookup(store, n));
        let mut out = [ParamId(0); 7];
        for (o, id) in out.iter_mut().zip(ids) {
            *o = id?;
        }
        Ok(Self::from_parts(cfg, out))
    }

    fn from_parts(cfg: &ModelConfig, ids: [ParamId; 7]) -> Self {
        let [item, category, event_type, position, user, context, fusion] = ids;
        Self {
            item,
            category,
            event_type,
            position,
            user,
            context,
            fusion,
            field_dim: cfg.dim / 4,
            max_len: cfg.max_len,
            item_vocab: cfg.item_vocab,
            category_vocab: cfg.category_vocab,
            user_vocab: cfg.user_vocab,
            context_vocab: cfg.context_vocab,
            user_fields: cfg.user_fields,
            context_fields: cfg.context_fields,
        }
    }

    /// Width of each per-feature embedding (`D/4`).
    pub fn field_dim(&self) -> usize {
        self.field_dim
    }

    pub fn side_dim(&self) -> usize {
        (self.user_fields + self.context_fields) * self.field_dim
    }

    /// Maps an instance to table rows, keeping the `max_len` most recent
    /// behaviors and renumbering their positions from 0.
    pub fn ids(&self, inst: &TrainingInstance) -> EncodedIds {
        let skip = inst.behaviors.len().saturating_sub(self.max_len);
        let kept = &inst.behaviors[skip..];
        let field = |feats: &[u64], n: usize, vocab: usize| -> Vec<usize> {
            (0..n)
                .map(|j| feats.get(j).map_or(0, |&id| vocab_row(id, vocab)))
                .collect()
        };
        EncodedIds {
            user_id: inst.user_id,
            items: kept.iter().map(|b| vocab_row(b.item_id, self.item_vocab)).collect(),
            categories: kept
                .iter()
                .map(|b| vocab_row(b.category_id, self.category_vocab))
                .collect(),
            event_types: kept.iter().map(|b| b.event_type.index()).collect(),
            positions: (0..kept.len()).collect(),
            candidate_item: vocab_row(inst.candidate.item_id, self.item_vocab),
            candidate_category: vocab_row(inst.candidate.category_id, self.category_vocab),
            user_rows: field(&inst.user_feats, self.user_fields, self.user_vocab),
            context_rows: field(&inst.context_feats, self.context_fields, self.context_vocab),
        }
    }

    fn fuse<'p>(
        &self,
        g: &mut Graph<'p>,
        store: &'p ParamStore,
        items: &[usize],
        cats: &[usize],
        types: &[usize],
        positions: &[usize],
    ) -> Result<Var> {
        if let Some(&p) = positions.iter().find(|&&p| p >= self.max_len) {
            return Err(Error::contract(format!(
                "position {p} outside the {}-row position table",
                self.max_len
            )));
        }
        let parts = [
            (self.item, items),
            (self.category, cats),
            (self.event_type, types),
            (self.position, positions),
        ];
        let mut cols = Vec::with_capacity(4);
        for (table, rows) in parts {
            let t = g.param(store, table);
            cols.push(g.gather(t, rows)?);
        }
        let x = g.concat_cols(&cols)?;
        let fusion = g.param(store, self.fusion);
        g.matmul(x, fusion)
    }

    /// Embedding of a single event at `position` (`1×D`).
    pub fn encode_behavior<'p>(
        &self,
        g: &mut Graph<'p>,
        store: &'p ParamStore,
        event: &BehaviorEvent,
        position: usize,
    ) -> Result<Var> {
        self.fuse(
            g,
            store,
            &[vocab_row(event.item_id, self.item_vocab)],
            &[vocab_row(event.category_id, self.category_vocab)],
            &[event.event_type.index()],
            &[position],
        )
    }

    pub fn encode_sequence<'p>(
        &self,
        g: &mut Graph<'p>,
        store: &'p ParamStore,
        ids: &EncodedIds,
    ) -> Result<EncodedSequence> {
        let embeddings = if ids.is_empty() {
            None
        } else {
            Some(self.fuse(g, store, &ids.items, &ids.categories, &ids.event_types, &ids.positions)?)
        };
        Ok(EncodedSequence {
            user_id: ids.user_id,
            embeddings,
            length: ids.len(),
            positions: ids.positions.clone(),
        })
    }

    /// Candidate embedding (`1×D`): item and category rows through the
    /// first two blocks of the fusion matrix.
    pub fn encode_candidate<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, ids: &EncodedIds) -> Result<Var> {
        let item = g.param(store, self.item);
        let item = g.gather(item, &[ids.candidate_item])?;
        let cat = g.param(store, self.category);
        let cat = g.gather(cat, &[ids.candidate_category])?;
        let x = g.concat_cols(&[item, cat])?;
        let fusion = g.param_rows(store, self.fusion, 0, 2 * self.field_dim)?;
        g.matmul(x, fusion)
    }

    /// User and context field embeddings concatenated (`1×D_side`).
    pub fn encode_side<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, ids: &EncodedIds) -> Result<Var> {
        let mut parts = Vec::with_capacity(ids.user_rows.len() + ids.context_rows.len());
        for (table, rows) in [(self.user, &ids.user_rows), (self.context, &ids.context_rows)] {
            for &r in rows {
                let t = g.param(store, table);
                parts.push(g.gather(t, &[r])?);
            }
        }
        g.concat_cols(&parts)
    }

    pub fn encode_instance<'p>(
        &self,
        g: &mut Graph<'p>,
        store: &'p ParamStore,
        ids: &EncodedIds,
    ) -> Result<EncodedInstance> {
        Ok(EncodedInstance {
            sequence: self.encode_sequence(g, store, ids)?,
            candidate: self.encode_candidate(g, store, ids)?,
            side: self.encode_side(g, store, ids)?,
        })
    }
}
