//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Set `ACCEPTANCE_ONLY=1,4` to run a subset.

mod reference;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dmqn::autodiff::Graph;
use dmqn::bench::{bench_scaling, BenchConfig};
use dmqn::cache::{precompute, InterestCache};
use dmqn::data::{
    BehaviorEvent, Candidate, EventType, InstanceSource, Subset, SyntheticDataset, SyntheticSpec, TrainingInstance,
};
use dmqn::head::{batch_logloss, PROB_CLIP};
use dmqn::hstu::Hstu;
use dmqn::mcqm::{codebook_noise_seed, gumbel_noise, QuantizeOptions};
use dmqn::params::{Gradients, ParamStore};
use dmqn::serving::{ScoreRequest, Scorer};
use dmqn::train::{auc, evaluate, train, TrainConfig};
use dmqn::{Exec, InterestKind, Model, ModelConfig};
use dmqn_cli::{run, Cli};

use reference::{Frozen, Params, Shape};

type Criterion = (u32, &'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let mut model = Model::new(ModelConfig::tiny(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.name(id).to_string();
        if name.ends_with("bias") || name.ends_with("offset") {
            for v in model.store.get_mut(id).values_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
    let ds = SyntheticDataset::new(SyntheticSpec {
        num_topics: 4,
        items_per_topic: 12,
        categories_per_topic: 2,
        users: 4,
        sequence_length: 16,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let batch: Vec<TrainingInstance> = (0..4).map(|u| ds.instance(u).into_owned()).collect();
    let shape = Shape::of(&model);
    let base = Params::of(&model);
    let tau = 0.5f32;
    let mut grads = Gradients::for_store(&model.store);
    let mut cases = Vec::new();
    for (j, inst) in batch.iter().enumerate() {
        let opts = QuantizeOptions {
            temperature: tau,
            noise_seed: Some(900 + j as u64),
        };
        let ids = model.ids(inst);
        let indices: Vec<Vec<usize>> = {
            let mut g = Graph::for_store(&model.store);
            let f = model.forward(&mut g, &ids, opts).unwrap();
            f.codebooks.iter().map(|c| c.indices.clone()).collect()
        };
        let (_, prob, g) = model.loss_and_grads(inst, opts).unwrap();
        grads.accumulate(&g);
        let noise = (0..shape.codebooks)
            .map(|n| {
                gumbel_noise(codebook_noise_seed(900 + j as u64, n), ids.len() * shape.size)
                    .into_iter()
                    .map(f64::from)
                    .collect()
            })
            .collect();
        let mut frozen = Frozen {
            indices,
            noise,
            temperature: tau as f64,
            probs: None,
        };
        let (p0, probs) = reference::forward(&base, &shape, &ids, &frozen);
        if (p0 - prob as f64).abs() > 1e-5 {
            return outcome(false, format!("reference forward {p0} disagrees with model {prob}"));
        }
        frozen.probs = Some(probs);
        cases.push((ids, frozen, inst.label as f64));
    }
    grads.scale(1.0 / batch.len() as f32);
    let loss = |p: &Params| -> f64 {
        cases
            .iter()
            .map(|(ids, fz, y)| reference::logloss(reference::forward(p, &shape, ids, fz).0, *y))
            .sum::<f64>()
            / cases.len() as f64
    };

    let h = 1e-5;
    let mut params = base.clone();
    let (mut checked, mut passed, mut zero) = (0usize, 0usize, 0usize);
    let mut worst = (0.0f64, String::new());
    for (id, name, t) in model.store.iter() {
        let analytic = grads.get(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.values().len()]);
        for (c, &a) in analytic.iter().enumerate() {
            let orig = params.0[name][c];
            params.0.get_mut(name).unwrap()[c] = orig + h;
            let up = loss(&params);
            params.0.get_mut(name).unwrap()[c] = orig - h;
            let down = loss(&params);
            params.0.get_mut(name).unwrap()[c] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = a as f64;
            let scale = a.abs().max(fd.abs());
            if scale < 1e-9 {
                zero += 1;
                continue;
            }
            checked += 1;
            let rel = (a - fd).abs() / scale.max(1e-6);
            if rel < 1e-3 {
                passed += 1;
            } else if rel > worst.0 {
                worst = (rel, format!("{name}[{c}]: autodiff {a:.6e}, fd {fd:.6e}"));
            }
        }
    }
    let rate = passed as f64 / checked as f64;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        rate >= 0.99 && secs < 60.0,
        format!(
            "{passed}/{checked} coordinates within 1e-3 ({:.2}%), {zero} with no gradient, {secs:.1}s; worst {}",
            100.0 * rate,
            if worst.1.is_empty() { "none".into() } else { format!("{:.2e} at {}", worst.0, worst.1) }
        ),
    )
}

fn random_behaviors(n: usize, rng: &mut impl Rng) -> Vec<BehaviorEvent> {
    let types = [EventType::View, EventType::Click, EventType::AddToCart, EventType::Browse];
    (0..n)
        .map(|i| BehaviorEvent {
            item_id: rng.random_range(1..6400),
            category_id: rng.random_range(1..128),
            event_type: types[rng.random_range(0..4)],
            ts: i as i64,
        })
        .collect()
}

fn quantization_oracle() -> Outcome {
    let model = Model::new(ModelConfig::default(), 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let inst = TrainingInstance {
        user_id: 1,
        behaviors: random_behaviors(1000, &mut rng),
        candidate: Candidate { item_id: 5, category_id: 2 },
        user_feats: vec![],
        context_feats: vec![],
        label: 0,
    };
    let parts = model.dmqn.as_ref().unwrap();
    let ids = model.ids(&inst);
    let mut g = Graph::for_store(&model.store);
    let seq = model.encoder.encode_sequence(&mut g, &model.store, &ids).unwrap();
    let emb = seq.embeddings.unwrap();
    let outs = parts
        .codebooks
        .quantize(&mut g, &model.store, emb, QuantizeOptions::eval(1.0), model.config.pool_eps)
        .unwrap();
    let (l, d, w) = (ids.len(), model.config.dim, model.config.codebook_size);
    let e: Vec<f64> = g.value(emb).iter().map(|&v| v as f64).collect();
    let proj = model.store.get(parts.codebooks.projections).values();
    let words = model.store.get(parts.codebooks.codewords).values();
    let (mut mismatches, mut max_err) = (0usize, 0.0f64);
    for (n, out) in outs.iter().enumerate() {
        let mut sums = vec![0.0f64; w * d];
        let mut counts = vec![0usize; w];
        for i in 0..l {
            let h: Vec<f64> = (0..d)
                .map(|c| (0..d).map(|t| e[i * d + t] * proj[n * d * d + t * d + c] as f64).sum())
                .collect();
            let mut best = (0usize, f64::NEG_INFINITY);
            for k in 0..w {
                let s: f64 = (0..d).map(|c| h[c] * words[(n * w + k) * d + c] as f64).sum();
                if s > best.1 {
                    best = (k, s);
                }
            }
            if best.0 != out.indices[i] {
                mismatches += 1;
            }
            counts[best.0] += 1;
            for c in 0..d {
                sums[best.0 * d + c] += e[i * d + c];
            }
        }
        for (k, (&cnt, got)) in counts.iter().zip(g.value(out.reps).chunks_exact(d)).enumerate() {
            for c in 0..d {
                let want = if cnt == 0 { 0.0 } else { sums[k * d + c] / cnt as f64 };
                max_err = max_err.max((want - got[c] as f64).abs());
            }
        }
    }
    outcome(
        mismatches == 0 && max_err <= 1e-6,
        format!("{mismatches} assignment mismatches over {l} behaviors x {} codebooks, max pooled error {max_err:.2e}", outs.len()),
    )
}

fn count_conservation() -> Outcome {
    let cfg = ModelConfig {
        max_len: 256,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, 31).unwrap();
    let ds = SyntheticDataset::new(SyntheticSpec {
        users: 10_000,
        sequence_length: 256,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let violations: Vec<usize> = Exec::Parallel.map(ds.len(), |i| {
        let mut inst = ds.instance(i).into_owned();
        inst.behaviors.truncate(1 + i % 256);
        let opts = QuantizeOptions {
            temperature: 0.7,
            noise_seed: (i % 2 == 0).then_some(i as u64),
        };
        let ids = model.ids(&inst);
        let mut g = Graph::for_store(&model.store);
        let f = model.forward(&mut g, &ids, opts).unwrap();
        f.codebooks
            .iter()
            .filter(|c| {
                let total: u64 = c.counts.iter().map(|&x| x as u64).sum();
                total != ids.len() as u64 || c.mask.iter().zip(&c.counts).any(|(&m, &n)| m != (n > 0))
            })
            .count()
    });
    let bad: usize = violations.iter().sum();
    outcome(bad == 0, format!("{bad} codebook outputs violate sum(counts) == L over {} instances", ds.len()))
}

fn masked_neutrality() -> Outcome {
    let (w, d) = (8, 8);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let hstu = Hstu::init(&mut store, "icim", 2, w, d, 1e-5, &mut rng);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        if name.ends_with("bias") || name.ends_with("offset") {
            for v in store.get_mut(id).values_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }
    let mut max_diff = 0.0f64;
    for trial in 0..500 {
        let m = 1 + trial % (w - 1);
        let x: Vec<f32> = (0..w * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let garbage = trial % 2 == 1;
        let padded: Vec<f32> = x[..m * d]
            .iter()
            .copied()
            .chain((m * d..w * d).map(|i| if garbage { x[i] } else { 0.0 }))
            .collect();
        let mut g = Graph::for_store(&store);
        let short = g.input(m, d, x[..m * d].to_vec(), false).unwrap();
        let long = g.input(w, d, padded, false).unwrap();
        let a = hstu.interact_slice(&mut g, &store, short, &vec![true; m]).unwrap();
        let mask: Vec<bool> = (0..w).map(|i| i < m).collect();
        let b = hstu.interact_slice(&mut g, &store, long, &mask).unwrap();
        for (p, q) in g.value(a).iter().zip(&g.value(b)[..m * d]) {
            max_diff = max_diff.max((p - q).abs() as f64);
        }
    }
    outcome(max_diff <= 1e-6, format!("max unmasked output change {max_diff:.2e} over 500 trials"))
}

fn cache_consistency() -> Outcome {
    let model = Model::new(ModelConfig::default(), 51).unwrap();
    let ds = SyntheticDataset::new(SyntheticSpec {
        users: 1000,
        seed: 52,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let users: Vec<TrainingInstance> = (0..ds.len()).map(|u| ds.instance(u).into_owned()).collect();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.cache"), dir.path().join("b.cache"));
    precompute(&model, &users, &a, Exec::Parallel).unwrap();
    precompute(&model, &users, &b, Exec::Parallel).unwrap();
    let identical = std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap();
    let scorer = Scorer::new(model, Some(InterestCache::open(&a).unwrap())).unwrap();
    let reqs: Vec<ScoreRequest> = users.iter().map(ScoreRequest::from).collect();
    let cached = scorer.score_batch(&reqs, Exec::Parallel);
    let online = Exec::Parallel.map(reqs.len(), |i| scorer.score_online(&reqs[i]).unwrap());
    let hits = cached.iter().filter(|r| r.as_ref().unwrap().cached).count();
    let equal = cached
        .iter()
        .zip(&online)
        .filter(|(c, o)| c.as_ref().unwrap().p.to_bits() == o.p.to_bits())
        .count();
    outcome(
        hits == users.len() && equal == users.len() && identical,
        format!(
            "{hits} cache hits, {equal}/{} bitwise equal, rerun byte-identical: {identical}",
            users.len()
        ),
    )
}

fn learning_signal() -> Outcome {
    let start = Instant::now();
    let ds = SyntheticDataset::new(SyntheticSpec {
        num_topics: 32,
        users: 55_000,
        sequence_length: 1024,
        beta: 8.0,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let train_idx: Vec<usize> = (0..50_000).collect();
    let test_idx: Vec<usize> = (50_000..55_000).collect();
    let (train_set, test_set) = (Subset::new(&ds, &train_idx), Subset::new(&ds, &test_idx));
    let tc = TrainConfig::default();
    let run = |interest: InterestKind| {
        let cfg = ModelConfig {
            interest,
            ..ModelConfig::default()
        };
        let mut model = Model::new(cfg, tc.seed).unwrap();
        train(&mut model, &train_set, &tc, Exec::Parallel).unwrap();
        evaluate(&model, &test_set, Exec::Parallel).unwrap().auc.unwrap()
    };
    let dmqn = run(InterestKind::Dmqn);
    let mean = run(InterestKind::MeanPool);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        dmqn >= 0.80 && dmqn - mean >= 0.03 && secs < 1800.0,
        format!(
            "quantized AUC {dmqn:.4}, mean-pool AUC {mean:.4}, margin {:.4}, {:.1} min",
            dmqn - mean,
            secs / 60.0
        ),
    )
}

fn complexity_shape() -> Outcome {
    let start = Instant::now();
    let r = bench_scaling(&BenchConfig::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let points: Vec<String> = r
        .points
        .iter()
        .map(|p| format!("L={} {:.2}/{:.1}ms", p.length, p.dmqn_seconds * 1e3, p.full_attention_seconds * 1e3))
        .collect();
    outcome(
        r.dmqn.linear.r_squared >= 0.95
            && r.full_attention.quadratic.r_squared > r.full_attention.linear.r_squared
            && secs < 300.0,
        format!(
            "quantized linear R2 {:.4}; full attention R2 linear {:.4} vs quadratic {:.4}; {}; {secs:.1}s",
            r.dmqn.linear.r_squared,
            r.full_attention.linear.r_squared,
            r.full_attention.quadratic.r_squared,
            points.join(", ")
        ),
    )
}

fn pairwise_auc(scores: &[f32], labels: &[u8]) -> f64 {
    let (mut num, mut pos, mut neg) = (0u64, 0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] == 1 {
            pos += 1;
        } else {
            neg += 1;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                num += match si.partial_cmp(&sj).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    num as f64 / (2 * pos * neg) as f64
}

fn metric_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let mut auc_mismatch = 0;
    for _ in 0..100 {
        let m = rng.random_range(2..=50);
        let levels = rng.random_range(2..12);
        let scores: Vec<f32> = (0..m).map(|_| rng.random_range(0..levels) as f32 / levels as f32).collect();
        let mut labels: Vec<u8> = (0..m).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        if auc(&scores, &labels).unwrap() != pairwise_auc(&scores, &labels) {
            auc_mismatch += 1;
        }
    }
    let batches: [(&[f32], &[u8]); 4] = [
        (&[0.9, 0.1, 0.5, 0.999], &[1, 0, 1, 0]),
        (&[0.25], &[1]),
        (&[0.01, 0.02, 0.97, 0.6, 0.4], &[0, 0, 1, 1, 0]),
        (&[0.5, 0.5], &[0, 1]),
    ];
    let mut max_err = 0.0f64;
    for (p, y) in batches {
        let want = p
            .iter()
            .zip(y)
            .map(|(&p, &y)| {
                let (p, y) = ((p as f64).clamp(PROB_CLIP, 1.0 - PROB_CLIP), y as f64);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / p.len() as f64;
        max_err = max_err.max((batch_logloss(p, y).unwrap() - want).abs());
    }
    outcome(
        auc_mismatch == 0 && max_err <= 1e-9,
        format!("{auc_mismatch}/100 AUC mismatches against pairwise counting, max logloss error {max_err:.2e}"),
    )
}

/// Runs one `dmqn` command line through the CLI entry point.
fn dmqn(args: &[&str]) -> (bool, String) {
    let cli = Cli::try_parse_from(std::iter::once("dmqn").chain(args.iter().copied())).unwrap();
    let mut out = Vec::new();
    let ok = run(&cli, std::io::empty(), &mut out).is_ok();
    (ok, String::from_utf8(out).unwrap())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let config = dir.path().join("run.json");
    let json = serde_json::json!({
        "model": { "dim": 16, "codebook_size": 8, "max_len": 64, "mlp_hidden": [32, 16] },
        "data": { "synthetic": { "users": 1500, "sequence_length": 64 }, "dir": data },
        "train": { "epochs": 2, "batch_size": 16 },
    });
    std::fs::write(&config, json.to_string()).unwrap();
    let cfg = config.to_str().unwrap();
    let mut ok = dmqn(&["--config", cfg, "gen-data"]).0;
    let mut evals = Vec::new();
    let mut ckpts = Vec::new();
    for run in ["a", "b"] {
        let ckpt = dir.path().join(format!("{run}.ckpt"));
        let c = ckpt.to_str().unwrap();
        ok &= dmqn(&["--config", cfg, "train", "--checkpoint", c]).0;
        let (eval_ok, stdout) = dmqn(&["--config", cfg, "eval", "--checkpoint", c]);
        ok &= eval_ok;
        evals.push(stdout);
        ckpts.push(std::fs::read(&ckpt).unwrap_or_default());
    }
    let same_ckpt = !ckpts[0].is_empty() && ckpts[0] == ckpts[1];
    let same_eval = evals[0] == evals[1];
    outcome(
        ok && same_ckpt && same_eval,
        format!(
            "pipeline ok: {ok}, checkpoints identical: {same_ckpt} ({} bytes), eval identical: {same_eval} {}",
            ckpts[0].len(),
            evals[0].trim()
        ),
    )
}

fn main() -> ExitCode {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [Criterion; 9] = [
        (1, "gradient integrity", gradient_integrity),
        (2, "quantization oracle", quantization_oracle),
        (3, "count conservation", count_conservation),
        (4, "masked-cluster neutrality", masked_neutrality),
        (5, "cache consistency", cache_consistency),
        (6, "learning signal", learning_signal),
        (7, "complexity shape", complexity_shape),
        (8, "metric correctness", metric_correctness),
        (9, "determinism", determinism),
    ];
    let mut failed = 0;
    for (n, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !result.pass {
            failed += 1;
        }
        println!(
            "criterion {n} ({name}): {} [{:.1}s] {}",
            if result.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            result.detail
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion/criteria failed");
        ExitCode::FAILURE
    }
}
