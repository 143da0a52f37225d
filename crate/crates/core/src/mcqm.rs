//! Multi-codebook quantization of a behavior sequence.
//!
//! For each of `N` codebooks the sequence `E[L×D]` is projected
//! (`H = E·P_n`), scored against the `W` codewords by dot product
//! (`S = H·C_nᵀ`), turned into assignment probabilities with a
//! Gumbel-Softmax over `(S + g)/τ`, hard-assigned by argmax, and
//! average-pooled into `W` interest clusters. Pooling uses a
//! straight-through estimator so codewords and projections receive
//! gradient through the soft probabilities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::seed::derive;
use crate::tensor::{self, Tensor};

/// Whether Gumbel noise is drawn. Evaluation and cache precompute never
/// add noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizeOptions {
    pub temperature: f32,
    pub noise_seed: Option<u64>,
}

impl QuantizeOptions {
    pub fn eval(temperature: f32) -> Self {
        Self {
            temperature,
            noise_seed: None,
        }
    }
}

/// `N` codebooks of `W` codewords plus one `D×D` projection per codebook.
#[derive(Debug, Clone)]
pub struct CodebookSet {
    pub codewords: ParamId,
    pub projections: ParamId,
    pub num_codebooks: usize,
    pub size: usize,
    pub dim: usize,
}

/// Per-codebook output of [`CodebookSet::quantize`].
#[derive(Debug, Clone)]
pub struct CodebookOutput {
    pub scores: Var,
    pub probs: Var,
    pub reps: Var,
    pub indices: Vec<usize>,
    pub counts: Vec<u32>,
    pub mask: Vec<bool>,
}

/// Pooled clusters for all codebooks as plain tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSummary {
    /// `N×W×D`.
    pub reps: Tensor,
    /// `N·W`, row-major by codebook.
    pub mask: Vec<bool>,
    pub counts: Vec<u32>,
}

/// Scores, probabilities and assignments for all codebooks.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationState {
    /// `N×L×W`.
    pub scores: Tensor,
    /// `N×L×W`.
    pub probs: Tensor,
    /// `N·L`, row-major by codebook.
    pub indices: Vec<usize>,
    pub temperature: f32,
    pub noise_seed: Option<u64>,
}

impl CodebookSet {
    pub fn init<R: Rng>(store: &mut ParamStore, n: usize, w: usize, d: usize, rng: &mut R) -> Self {
        let codewords = store.add_normal("mcqm.codewords", &[n, w, d], 1.0, rng);
        let projections = store.add_normal("mcqm.projections", &[n, d, d], 1.0 / (d as f32).sqrt(), rng);
        Self {
            codewords,
            projections,
            num_codebooks: n,
            size: w,
            dim: d,
        }
    }

    pub(crate) fn bind(store: &ParamStore) -> Result<Self> {
        let codewords = crate::model::lookup(store, "mcqm.codewords")?;
        let projections = crate::model::lookup(store, "mcqm.projections")?;
        let shape = store.get(codewords).shape();
        if shape.len() != 3 || store.get(projections).shape() != [shape[0], shape[2], shape[2]] {
            return Err(Error::Checkpoint("codebook tensors have inconsistent shapes".into()));
        }
        Ok(Self {
            codewords,
            projections,
            num_codebooks: shape[0],
            size: shape[1],
            dim: shape[2],
        })
    }

    /// `H_n = E · P_n` for every codebook.
    pub fn project<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, emb: Var) -> Result<Vec<Var>> {
        (0..self.num_codebooks)
            .map(|n| {
                let p = g.param_rows(store, self.projections, n * self.dim, self.dim)?;
                g.matmul(emb, p)
            })
            .collect()
    }

    /// `S_n[i][k] = ⟨H_n[i], C_n[k]⟩`.
    pub fn score<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, h: &[Var]) -> Result<Vec<Var>> {
        if h.len() != self.num_codebooks {
            return Err(Error::contract(format!(
                "expected {} projected sequences, got {}",
                self.num_codebooks,
                h.len()
            )));
        }
        h.iter()
            .enumerate()
            .map(|(n, &hn)| {
                let c = g.param_rows(store, self.codewords, n * self.size, self.size)?;
                g.matmul_bt(hn, c)
            })
            .collect()
    }

    /// Full pipeline for one sequence: project, score, sample, pool.
    pub fn quantize<'p>(
        &self,
        g: &mut Graph<'p>,
        store: &'p ParamStore,
        emb: Var,
        opts: QuantizeOptions,
        pool_eps: f64,
    ) -> Result<Vec<CodebookOutput>> {
        let h = self.project(g, store, emb)?;
        let scores = self.score(g, store, &h)?;
        scores
            .into_iter()
            .enumerate()
            .map(|(n, s)| {
                let seed = opts.noise_seed.map(|seed| codebook_noise_seed(seed, n));
                let (probs, indices) = gumbel_softmax(g, s, opts.temperature, seed)?;
                let pooled = pool(g, emb, probs, &indices, pool_eps)?;
                Ok(CodebookOutput {
                    scores: s,
                    probs,
                    reps: pooled.reps,
                    indices,
                    counts: pooled.counts,
                    mask: pooled.mask,
                })
            })
            .collect()
    }
}

/// Noise stream of codebook `n` for an instance seeded with `seed`.
pub fn codebook_noise_seed(seed: u64, n: usize) -> u64 {
    derive(seed, 0x6d63_716d, n as u64)
}

/// Gumbel(0, 1) samples `−ln(−ln u)`, `u ~ U(0, 1)`, from a seeded stream.
pub fn gumbel_noise(seed: u64, len: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| {
            let u: f32 = rng.random_range(f32::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Softmax over `(scores + g)/τ` per row, with `g` drawn from `noise_seed`
/// when present and zero otherwise. Returns the probabilities and each row's
/// argmax (ties to the lowest index).
pub fn gumbel_softmax(
    g: &mut Graph<'_>,
    scores: Var,
    temperature: f32,
    noise_seed: Option<u64>,
) -> Result<(Var, Vec<usize>)> {
    if !(temperature > 0.0) {
        return Err(Error::contract(format!("temperature must be positive, got {temperature}")));
    }
    let (l, w) = g.shape(scores);
    let logits = match noise_seed {
        Some(seed) => g.shift(scores, &gumbel_noise(seed, l * w))?,
        None => scores,
    };
    let logits = g.scale(logits, 1.0 / temperature);
    let probs = g.softmax(logits);
    let indices = g.value(probs).chunks_exact(w).map(tensor::argmax).collect();
    Ok((probs, indices))
}

pub struct Pooled {
    pub reps: Var,
    pub counts: Vec<u32>,
    pub mask: Vec<bool>,
}

/// Averages the rows of `emb` sharing an index; empty clusters are zero
/// with `mask = false`.
pub fn pool(g: &mut Graph<'_>, emb: Var, probs: Var, indices: &[usize], eps: f64) -> Result<Pooled> {
    let w = g.shape(probs).1;
    let reps = g.st_pool(probs, emb, indices, eps)?;
    let mut counts = vec![0u32; w];
    for &k in indices {
        counts[k] += 1;
    }
    let mask = counts.iter().map(|&c| c > 0).collect();
    Ok(Pooled { reps, counts, mask })
}

/// Collects per-codebook outputs into tensor form.
pub fn summarize(g: &Graph<'_>, outs: &[CodebookOutput], temperature: f32, noise_seed: Option<u64>) -> (ClusterSummary, QuantizationState) {
    let n = outs.len();
    let (w, d) = g.shape(outs[0].reps);
    let l = outs[0].indices.len();
    let cat = |f: &dyn Fn(&CodebookOutput) -> Var| -> Vec<f32> {
        outs.iter().flat_map(|o| g.value(f(o)).iter().copied()).collect()
    };
    let summary = ClusterSummary {
        reps: Tensor::new(vec![n, w, d], cat(&|o| o.reps)).expect("reps shape"),
        mask: outs.iter().flat_map(|o| o.mask.iter().copied()).collect(),
        counts: outs.iter().flat_map(|o| o.counts.iter().copied()).collect(),
    };
    let state = QuantizationState {
        scores: Tensor::new(vec![n, l, w], cat(&|o| o.scores)).expect("scores shape"),
        probs: Tensor::new(vec![n, l, w], cat(&|o| o.probs)).expect("probs shape"),
        indices: outs.iter().flat_map(|o| o.indices.iter().copied()).collect(),
        temperature,
        noise_seed,
    };
    (summary, state)
}
