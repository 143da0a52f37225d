//! Forward-time scaling in sequence length: the quantized model against
//! full self-attention over the raw sequence.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{InstanceSource, SyntheticDataset, SyntheticSpec, TrainingInstance};
use crate::error::{Error, Result};
use crate::hstu::Hstu;
use crate::mcqm::QuantizeOptions;
use crate::model::{Model, ModelConfig, EVAL_TEMPERATURE};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub trials: usize,
    pub num_codebooks: usize,
    pub codebook_size: usize,
    pub dim: usize,
    /// Codebook sizes for the stage breakdown at `sweep_length`.
    pub w_sweep: Vec<usize>,
    pub sweep_length: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![512, 1024, 2048, 4096],
            trials: 5,
            num_codebooks: 2,
            codebook_size: 32,
            dim: 32,
            w_sweep: vec![32, 64],
            sweep_length: 1024,
            seed: 11,
        }
    }
}

/// Median seconds per stage of one noise-free forward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub encode: f64,
    pub quantize: f64,
    pub interact: f64,
}

impl StageTimes {
    pub fn total(&self) -> f64 {
        self.encode + self.quantize + self.interact
    }

    pub fn shares(&self) -> StageTimes {
        let t = self.total();
        StageTimes {
            encode: self.encode / t,
            quantize: self.quantize / t,
            interact: self.interact / t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthPoint {
    pub length: usize,
    pub dmqn_seconds: f64,
    pub full_attention_seconds: f64,
    pub stages: StageTimes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub codebook_size: usize,
    pub length: usize,
    pub stages: StageTimes,
    pub shares: StageTimes,
}

/// Least-squares fit `y = intercept + slope·x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fit {
    pub intercept: f64,
    pub slope: f64,
    pub r_squared: f64,
}

/// Fits of one timing curve against `L` and against `L²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveFits {
    pub linear: Fit,
    pub quadratic: Fit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub config: BenchConfig,
    pub points: Vec<LengthPoint>,
    pub dmqn: CurveFits,
    pub full_attention: CurveFits,
    pub w_sweep: Vec<SweepPoint>,
}

pub fn least_squares(xs: &[f64], ys: &[f64]) -> Fit {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 0.0 };
    Fit {
        intercept,
        slope,
        r_squared,
    }
}

fn curve_fits(lengths: &[usize], ys: &[f64]) -> CurveFits {
    let l: Vec<f64> = lengths.iter().map(|&x| x as f64).collect();
    let l2: Vec<f64> = l.iter().map(|x| x * x).collect();
    CurveFits {
        linear: least_squares(&l, ys),
        quadratic: least_squares(&l2, ys),
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn sequences(length: usize, count: usize, seed: u64) -> Result<Vec<TrainingInstance>> {
    let ds = SyntheticDataset::new(SyntheticSpec {
        users: count,
        sequence_length: length,
        seed,
        ..SyntheticSpec::default()
    })?;
    Ok((0..count).map(|i| ds.instance(i).into_owned()).collect())
}

/// Times the encode, quantize and interact stages of one forward.
pub fn time_stages(model: &Model, inst: &TrainingInstance) -> Result<StageTimes> {
    let parts = model
        .dmqn
        .as_ref()
        .ok_or_else(|| Error::contract("stage timing needs the quantized model"))?;
    let ids = model.ids(inst);
    let mut g = Graph::for_store(&model.store);
    let t0 = Instant::now();
    let seq = model.encoder.encode_sequence(&mut g, &model.store, &ids)?;
    let emb = seq
        .embeddings
        .ok_or_else(|| Error::contract("stage timing needs a nonempty sequence"))?;
    let t1 = Instant::now();
    let outs = parts.codebooks.quantize(
        &mut g,
        &model.store,
        emb,
        QuantizeOptions::eval(EVAL_TEMPERATURE),
        model.config.pool_eps,
    )?;
    let t2 = Instant::now();
    let reps: Vec<_> = outs.iter().map(|o| o.reps).collect();
    let masks: Vec<_> = outs.iter().map(|o| o.mask.clone()).collect();
    let ys = parts.hstu.interact(&mut g, &model.store, &reps, &masks)?;
    std::hint::black_box(g.value(ys[0]));
    let t3 = Instant::now();
    Ok(StageTimes {
        encode: (t1 - t0).as_secs_f64(),
        quantize: (t2 - t1).as_secs_f64(),
        interact: (t3 - t2).as_secs_f64(),
    })
}

/// One self-attention block of the same form over the raw sequence.
struct FullAttention {
    store: ParamStore,
    hstu: Hstu,
}

impl FullAttention {
    fn new(length: usize, dim: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let hstu = Hstu::init(&mut store, "full", 1, length, dim, 1e-5, &mut ChaCha8Rng::seed_from_u64(seed));
        Self { store, hstu }
    }

    fn time(&self, model: &Model, inst: &TrainingInstance) -> Result<f64> {
        let ids = model.ids(inst);
        let mut g = Graph::for_store(&model.store);
        let t0 = Instant::now();
        let seq = model.encoder.encode_sequence(&mut g, &model.store, &ids)?;
        let emb = seq
            .embeddings
            .ok_or_else(|| Error::contract("baseline needs a nonempty sequence"))?;
        let x = g.to_tensor(emb);
        let mut h = Graph::for_store(&self.store);
        let xv = h.tensor(&x, false);
        let y = self.hstu.block(&mut h, &self.store, 0, xv, &vec![true; seq.length])?;
        std::hint::black_box(h.value(y));
        Ok(t0.elapsed().as_secs_f64())
    }
}

fn bench_model(cfg: &BenchConfig, codebook_size: usize, max_len: usize) -> Result<Model> {
    Model::new(
        ModelConfig {
            dim: cfg.dim,
            num_codebooks: cfg.num_codebooks,
            codebook_size,
            max_len,
            ..ModelConfig::default()
        },
        cfg.seed,
    )
}

fn median_stages(model: &Model, insts: &[TrainingInstance]) -> Result<StageTimes> {
    let runs = insts.iter().map(|i| time_stages(model, i)).collect::<Result<Vec<_>>>()?;
    Ok(StageTimes {
        encode: median(runs.iter().map(|s| s.encode).collect()),
        quantize: median(runs.iter().map(|s| s.quantize).collect()),
        interact: median(runs.iter().map(|s| s.interact).collect()),
    })
}

pub fn bench_scaling(cfg: &BenchConfig) -> Result<ScalingReport> {
    if cfg.lengths.len() < 2 || cfg.trials == 0 {
        return Err(Error::config("bench needs at least two lengths and one trial"));
    }
    let max_len = cfg.lengths.iter().copied().chain([cfg.sweep_length]).max().unwrap_or(1);
    let model = bench_model(cfg, cfg.codebook_size, max_len)?;
    let mut points = Vec::with_capacity(cfg.lengths.len());
    for &length in &cfg.lengths {
        let insts = sequences(length, cfg.trials, cfg.seed)?;
        // warm-up so first-touch allocation is not timed
        time_stages(&model, &insts[0])?;
        let runs = insts.iter().map(|i| time_stages(&model, i)).collect::<Result<Vec<_>>>()?;
        let stages = StageTimes {
            encode: median(runs.iter().map(|s| s.encode).collect()),
            quantize: median(runs.iter().map(|s| s.quantize).collect()),
            interact: median(runs.iter().map(|s| s.interact).collect()),
        };
        let dmqn_seconds = median(runs.iter().map(StageTimes::total).collect());
        let full = FullAttention::new(length, cfg.dim, cfg.seed);
        full.time(&model, &insts[0])?;
        let full_attention_seconds = median(
            insts
                .iter()
                .map(|i| full.time(&model, i))
                .collect::<Result<Vec<_>>>()?,
        );
        log::info!("L={length}: quantized {dmqn_seconds:.6}s, full attention {full_attention_seconds:.6}s");
        points.push(LengthPoint {
            length,
            dmqn_seconds,
            full_attention_seconds,
            stages,
        });
    }
    let dm: Vec<f64> = points.iter().map(|p| p.dmqn_seconds).collect();
    let fa: Vec<f64> = points.iter().map(|p| p.full_attention_seconds).collect();
    for (name, ys) in [("quantized", &dm), ("full-attention", &fa)] {
        if ys.iter().all(|&y| y == ys[0]) {
            return Err(Error::Bench(format!(
                "all {name} medians are equal ({:.3e}s); timer too coarse, raise the trial count",
                ys[0]
            )));
        }
    }
    let mut w_sweep = Vec::with_capacity(cfg.w_sweep.len());
    let insts = sequences(cfg.sweep_length, cfg.trials, cfg.seed)?;
    for &w in &cfg.w_sweep {
        let m = bench_model(cfg, w, max_len)?;
        time_stages(&m, &insts[0])?;
        let stages = median_stages(&m, &insts)?;
        w_sweep.push(SweepPoint {
            codebook_size: w,
            length: cfg.sweep_length,
            stages,
            shares: stages.shares(),
        });
    }
    Ok(ScalingReport {
        config: cfg.clone(),
        dmqn: curve_fits(&cfg.lengths, &dm),
        full_attention: curve_fits(&cfg.lengths, &fa),
        points,
        w_sweep,
    })
}
