//! Model assembly: encoder, interest module and scoring head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::TrainingInstance;
use crate::encoder::{EncodedIds, EncodedSequence, FeatureEncoder};
use crate::error::{Error, Result};
use crate::head::{Mlp, TargetAttention, PROB_CLIP};
use crate::hstu::Hstu;
use crate::mcqm::{CodebookOutput, CodebookSet, QuantizeOptions};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::seed::derive;
use crate::tensor::Tensor;

/// How the behavior sequence is summarized before the MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterestKind {
    /// Quantize, interact, then attend from the candidate.
    #[default]
    Dmqn,
    /// Plain average of all behavior embeddings.
    MeanPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Embedding width `D`; must be divisible by 4.
    pub dim: usize,
    pub num_codebooks: usize,
    pub codebook_size: usize,
    pub hstu_layers: usize,
    pub max_len: usize,
    pub item_vocab: usize,
    pub category_vocab: usize,
    pub user_vocab: usize,
    pub context_vocab: usize,
    pub user_fields: usize,
    pub context_fields: usize,
    pub mlp_hidden: Vec<usize>,
    pub interest: InterestKind,
    pub norm_eps: f32,
    pub pool_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            num_codebooks: 2,
            codebook_size: 32,
            hstu_layers: 2,
            max_len: 1024,
            item_vocab: 6401,
            category_vocab: 129,
            user_vocab: 101,
            context_vocab: 25,
            user_fields: 2,
            context_fields: 1,
            mlp_hidden: vec![128, 64],
            interest: InterestKind::Dmqn,
            norm_eps: 1e-5,
            pool_eps: 1e-9,
        }
    }
}

impl ModelConfig {
    /// Small configuration for tests and gradient checks.
    pub fn tiny() -> Self {
        Self {
            dim: 8,
            num_codebooks: 2,
            codebook_size: 4,
            hstu_layers: 2,
            max_len: 16,
            item_vocab: 40,
            category_vocab: 10,
            user_vocab: 10,
            context_vocab: 6,
            user_fields: 2,
            context_fields: 1,
            mlp_hidden: vec![8],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("num_codebooks", self.num_codebooks),
            ("codebook_size", self.codebook_size),
            ("hstu_layers", self.hstu_layers),
            ("max_len", self.max_len),
            ("item_vocab", self.item_vocab),
            ("category_vocab", self.category_vocab),
            ("user_vocab", self.user_vocab),
            ("context_vocab", self.context_vocab),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("model.{name} must be positive")));
        }
        if !self.dim.is_multiple_of(4) {
            return Err(Error::config(format!("model.dim must be divisible by 4, got {}", self.dim)));
        }
        if self.mlp_hidden.contains(&0) {
            return Err(Error::config("model.mlp_hidden widths must be positive"));
        }
        if !(self.norm_eps > 0.0) || !(self.pool_eps > 0.0) {
            return Err(Error::config("model.norm_eps and model.pool_eps must be positive"));
        }
        Ok(())
    }

    pub fn side_dim(&self) -> usize {
        (self.user_fields + self.context_fields) * (self.dim / 4)
    }

    /// `[D + D_side + D, hidden…, 1]`.
    pub fn mlp_widths(&self) -> Vec<usize> {
        let mut w = vec![2 * self.dim + self.side_dim()];
        w.extend(&self.mlp_hidden);
        w.push(1);
        w
    }
}

/// Looks a parameter up by name, failing with a checkpoint error.
pub fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .find(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
}

#[derive(Debug, Clone)]
pub struct DmqnParts {
    pub codebooks: CodebookSet,
    pub hstu: Hstu,
    pub attention: TargetAttention,
}

/// Interacted clusters of one user as plain values: `N·W` rows of `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractedClusters {
    pub values: Tensor,
    pub mask: Vec<bool>,
}

impl InteractedClusters {
    pub fn empty(rows: usize, dim: usize) -> Self {
        Self {
            values: Tensor::zeros(&[rows, dim]),
            mask: vec![false; rows],
        }
    }
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub prob: Var,
    pub candidate: Var,
    pub side: Var,
    pub interest: Var,
    /// Per-codebook quantizer outputs (empty for the mean-pool model or an
    /// empty sequence).
    pub codebooks: Vec<CodebookOutput>,
    pub degenerate: bool,
}

/// Evaluation temperature. Without noise it only changes the soft
/// probabilities, never the hard assignment or the forward value.
pub const EVAL_TEMPERATURE: f32 = 1.0;

const INIT_STREAM: u64 = 0x696e_6974;

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: FeatureEncoder,
    pub dmqn: Option<DmqnParts>,
    pub mlp: Mlp,
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, INIT_STREAM, 0));
        let mut store = ParamStore::new();
        let encoder = FeatureEncoder::init(&mut store, &config, &mut rng);
        let dmqn = match config.interest {
            InterestKind::Dmqn => {
                let (n, w, d) = (config.num_codebooks, config.codebook_size, config.dim);
                Some(DmqnParts {
                    codebooks: CodebookSet::init(&mut store, n, w, d, &mut rng),
                    hstu: Hstu::init(&mut store, "icim", config.hstu_layers, w, d, config.norm_eps, &mut rng),
                    attention: TargetAttention::init(&mut store, d, &mut rng),
                })
            }
            InterestKind::MeanPool => None,
        };
        let mlp = Mlp::init(&mut store, &config.mlp_widths(), &mut rng);
        Ok(Self {
            config,
            store,
            encoder,
            dmqn,
            mlp,
        })
    }

    /// Rebinds a loaded parameter store to its roles, checking shapes.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let fresh = Model::new(config.clone(), 0)?;
        if fresh.store.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                fresh.store.len(),
                store.len()
            )));
        }
        for (_, name, t) in fresh.store.iter() {
            let id = lookup(&store, name)?;
            if store.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    store.get(id).shape(),
                    t.shape()
                )));
            }
        }
        let encoder = FeatureEncoder::bind(&store, &config)?;
        let dmqn = match config.interest {
            InterestKind::Dmqn => Some(DmqnParts {
                codebooks: CodebookSet::bind(&store)?,
                hstu: Hstu::bind(&store, "icim", config.hstu_layers, config.norm_eps)?,
                attention: TargetAttention::bind(&store)?,
            }),
            InterestKind::MeanPool => None,
        };
        let mlp = Mlp::bind(&store, config.mlp_widths().len() - 1)?;
        Ok(Self {
            config,
            store,
            encoder,
            dmqn,
            mlp,
        })
    }

    pub fn ids(&self, inst: &TrainingInstance) -> EncodedIds {
        self.encoder.ids(inst)
    }

    fn parts(&self) -> Result<&DmqnParts> {
        self.dmqn
            .as_ref()
            .ok_or_else(|| Error::contract("the mean-pool model has no interest clusters"))
    }

    /// Quantizes and interacts an encoded sequence. Returns the `N·W × D`
    /// cluster rows, their mask and the quantizer outputs.
    pub fn clusters<'p>(
        &'p self,
        g: &mut Graph<'p>,
        seq: &EncodedSequence,
        opts: QuantizeOptions,
    ) -> Result<(Var, Vec<bool>, Vec<CodebookOutput>)> {
        let parts = self.parts()?;
        let rows = self.config.num_codebooks * self.config.codebook_size;
        let Some(emb) = seq.embeddings else {
            return Ok((g.zeros(rows, self.config.dim), vec![false; rows], Vec::new()));
        };
        let outs = parts
            .codebooks
            .quantize(g, &self.store, emb, opts, self.config.pool_eps)?;
        let reps: Vec<Var> = outs.iter().map(|o| o.reps).collect();
        let masks: Vec<Vec<bool>> = outs.iter().map(|o| o.mask.clone()).collect();
        let ys = parts.hstu.interact(g, &self.store, &reps, &masks)?;
        let all = g.concat_rows(&ys)?;
        Ok((all, masks.concat(), outs))
    }

    /// Attention and MLP over already interacted clusters; shared by the
    /// online and cached paths.
    pub fn head<'p>(
        &'p self,
        g: &mut Graph<'p>,
        clusters: Var,
        mask: &[bool],
        candidate: Var,
        side: Var,
    ) -> Result<(Var, Var, bool)> {
        let attended = self.parts()?.attention.attend(g, &self.store, clusters, mask, candidate)?;
        let prob = self.mlp.predict(g, &self.store, attended.output, side, candidate)?;
        Ok((prob, attended.output, attended.degenerate))
    }

    pub fn forward<'p>(&'p self, g: &mut Graph<'p>, ids: &EncodedIds, opts: QuantizeOptions) -> Result<Forward> {
        let enc = self.encoder.encode_instance(g, &self.store, ids)?;
        match self.config.interest {
            InterestKind::Dmqn => {
                let (clusters, mask, codebooks) = self.clusters(g, &enc.sequence, opts)?;
                let (prob, interest, degenerate) = self.head(g, clusters, &mask, enc.candidate, enc.side)?;
                Ok(Forward {
                    prob,
                    candidate: enc.candidate,
                    side: enc.side,
                    interest,
                    codebooks,
                    degenerate,
                })
            }
            InterestKind::MeanPool => {
                let (interest, degenerate) = match enc.sequence.embeddings {
                    Some(e) => (g.mean_rows(e), false),
                    None => (g.zeros(1, self.config.dim), true),
                };
                let prob = self.mlp.predict(g, &self.store, interest, enc.side, enc.candidate)?;
                Ok(Forward {
                    prob,
                    candidate: enc.candidate,
                    side: enc.side,
                    interest,
                    codebooks: Vec::new(),
                    degenerate,
                })
            }
        }
    }

    /// Noise-free click probability.
    pub fn predict(&self, inst: &TrainingInstance) -> Result<f32> {
        let ids = self.ids(inst);
        let mut g = Graph::for_store(&self.store);
        let f = self.forward(&mut g, &ids, QuantizeOptions::eval(EVAL_TEMPERATURE))?;
        Ok(g.scalar(f.prob))
    }

    /// Log-loss, predicted probability and parameter gradients of one
    /// labeled instance.
    pub fn loss_and_grads(&self, inst: &TrainingInstance, opts: QuantizeOptions) -> Result<(f64, f32, Gradients)> {
        let ids = self.ids(inst);
        let mut g = Graph::for_store(&self.store);
        let f = self.forward(&mut g, &ids, opts)?;
        let loss = g.logloss(f.prob, inst.label as f32, PROB_CLIP as f32)?;
        let prob = g.scalar(f.prob);
        let loss_value = crate::head::logloss_value(prob as f64, inst.label as f64, PROB_CLIP);
        g.backward(loss)?;
        Ok((loss_value, prob, g.into_param_grads()))
    }

    /// Noise-free interacted clusters of one user's behaviors (the cached
    /// quantity).
    pub fn interest_clusters(&self, inst: &TrainingInstance) -> Result<InteractedClusters> {
        let ids = self.ids(inst);
        let mut g = Graph::for_store(&self.store);
        let seq = self.encoder.encode_sequence(&mut g, &self.store, &ids)?;
        let (rows, mask, _) = self.clusters(&mut g, &seq, QuantizeOptions::eval(EVAL_TEMPERATURE))?;
        let (r, c) = g.shape(rows);
        Ok(InteractedClusters {
            values: Tensor::new(vec![r, c], g.value(rows).to_vec())?,
            mask,
        })
    }

    /// Click probability from precomputed clusters: only the candidate
    /// side, attention and MLP run.
    pub fn predict_cached(&self, inst: &TrainingInstance, cached: &InteractedClusters) -> Result<f32> {
        let rows = self.config.num_codebooks * self.config.codebook_size;
        if cached.values.shape() != [rows, self.config.dim] || cached.mask.len() != rows {
            return Err(Error::contract(format!(
                "cached clusters have shape {:?}, model expects [{rows}, {}]",
                cached.values.shape(),
                self.config.dim
            )));
        }
        let ids = self.ids(inst);
        let mut g = Graph::for_store(&self.store);
        let candidate = self.encoder.encode_candidate(&mut g, &self.store, &ids)?;
        let side = self.encoder.encode_side(&mut g, &self.store, &ids)?;
        let clusters = g.tensor(&cached.values, false);
        let (prob, _, _) = self.head(&mut g, clusters, &cached.mask, candidate, side)?;
        Ok(g.scalar(prob))
    }
}
