//! Plain f64 re-implementation of the full forward pass, used as the
//! finite-difference oracle. Hard assignments are frozen at the values the
//! model chose; the soft probabilities enter through `one_hot + p − p̄`,
//! which equals the one-hot at the base point and carries the
//! straight-through gradient away from it.

use std::collections::BTreeMap;

use dmqn::encoder::EncodedIds;
use dmqn::Model;

#[derive(Clone)]
pub struct Params(pub BTreeMap<String, Vec<f64>>);

impl Params {
    pub fn of(model: &Model) -> Self {
        Self(
            model
                .store
                .iter()
                .map(|(_, name, t)| (name.to_string(), t.values().iter().map(|&v| v as f64).collect()))
                .collect(),
        )
    }

    fn v(&self, name: &str) -> &[f64] {
        self.0.get(name).unwrap_or_else(|| panic!("no parameter {name}"))
    }

    fn row(&self, name: &str, r: usize, width: usize) -> &[f64] {
        &self.v(name)[r * width..(r + 1) * width]
    }
}

pub struct Shape {
    pub dim: usize,
    pub codebooks: usize,
    pub size: usize,
    pub layers: usize,
    pub norm_eps: f64,
    pub attn_scale: f64,
    pub mlp_layers: usize,
}

impl Shape {
    pub fn of(model: &Model) -> Self {
        let c = &model.config;
        Self {
            dim: c.dim,
            codebooks: c.num_codebooks,
            size: c.codebook_size,
            layers: c.hstu_layers,
            norm_eps: c.norm_eps as f64,
            attn_scale: model.dmqn.as_ref().expect("quantized model").attention.scale as f64,
            mlp_layers: c.mlp_hidden.len() + 1,
        }
    }
}

/// Per-instance state fixed at the base parameters.
pub struct Frozen {
    pub indices: Vec<Vec<usize>>,
    pub noise: Vec<Vec<f64>>,
    pub temperature: f64,
    /// `p̄` per codebook; `None` on the base evaluation that produces it.
    pub probs: Option<Vec<Vec<f64>>>,
}

fn mm(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for t in 0..k {
            let av = a[i * k + t];
            for j in 0..m {
                out[i * m + j] += av * b[t * m + j];
            }
        }
    }
    out
}

fn mm_bt(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|t| a[i * k + t] * b[j * k + t]).sum();
        }
    }
    out
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(row: &[f64], keep: impl Fn(usize) -> bool) -> Vec<f64> {
    let max = (0..row.len()).filter(|&j| keep(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = (0..row.len())
        .map(|j| if keep(j) { (row[j] - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn rel_index(q: usize, k: usize, len: usize) -> usize {
    let c = (len / 2) as isize;
    ((k as isize - q as isize).clamp(-c, c) + c) as usize
}

fn hstu(p: &Params, s: &Shape, x: &[f64], mask: &[bool]) -> Vec<f64> {
    let (w, d) = (s.size, s.dim);
    if !mask.iter().any(|&m| m) {
        return vec![0.0; w * d];
    }
    let mut cur = x.to_vec();
    for l in 0..s.layers {
        let name = |f: &str| format!("icim.{l}.{f}");
        let mut z = mm(&cur, w, d, p.v(&name("f1_weight")), 4 * d);
        let b1 = p.v(&name("f1_bias"));
        for r in 0..w {
            for c in 0..4 * d {
                z[r * 4 * d + c] = silu(z[r * 4 * d + c] + b1[c]);
            }
        }
        let col = |r: usize, part: usize, c: usize| z[r * 4 * d + part * d + c];
        let rel = p.v(&name("rel_bias"));
        let mut att = vec![0.0; w * w];
        for a in 0..w {
            for b in 0..w {
                if mask[b] {
                    let logit: f64 = (0..d).map(|c| col(a, 2, c) * col(b, 3, c)).sum::<f64>() + rel[rel_index(a, b, rel.len())];
                    att[a * w + b] = silu(logit) / w as f64;
                }
            }
        }
        let (gain, offset) = (p.v(&name("norm_gain")), p.v(&name("norm_offset")));
        let mut gated = vec![0.0; w * d];
        for a in 0..w {
            let av: Vec<f64> = (0..d).map(|c| (0..w).map(|b| att[a * w + b] * col(b, 1, c)).sum()).collect();
            let mean = av.iter().sum::<f64>() / d as f64;
            let var = av.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + s.norm_eps).sqrt();
            for c in 0..d {
                gated[a * d + c] = ((av[c] - mean) * rstd * gain[c] + offset[c]) * col(a, 0, c);
            }
        }
        let mut y = mm(&gated, w, d, p.v(&name("f2_weight")), d);
        let b2 = p.v(&name("f2_bias"));
        for a in 0..w {
            for c in 0..d {
                y[a * d + c] = if mask[a] { y[a * d + c] + b2[c] } else { 0.0 };
            }
        }
        cur = if l == 0 { y } else { cur.iter().zip(&y).map(|(a, b)| a + b).collect() };
    }
    cur
}

/// Click probability and the per-codebook soft assignment probabilities.
pub fn forward(p: &Params, s: &Shape, ids: &EncodedIds, frozen: &Frozen) -> (f64, Vec<Vec<f64>>) {
    let (d, w) = (s.dim, s.size);
    let f = d / 4;
    let l = ids.items.len();
    let fusion = p.v("encoder.fusion");

    let mut x = Vec::with_capacity(l * 4 * f);
    for i in 0..l {
        x.extend_from_slice(p.row("encoder.item", ids.items[i], f));
        x.extend_from_slice(p.row("encoder.category", ids.categories[i], f));
        x.extend_from_slice(p.row("encoder.event_type", ids.event_types[i], f));
        x.extend_from_slice(p.row("encoder.position", ids.positions[i], f));
    }
    let e = mm(&x, l, 4 * f, fusion, d);

    let mut cx = p.row("encoder.item", ids.candidate_item, f).to_vec();
    cx.extend_from_slice(p.row("encoder.category", ids.candidate_category, f));
    let cand = mm(&cx, 1, 2 * f, &fusion[..2 * f * d], d);

    let mut side = Vec::new();
    for &r in &ids.user_rows {
        side.extend_from_slice(p.row("encoder.user", r, f));
    }
    for &r in &ids.context_rows {
        side.extend_from_slice(p.row("encoder.context", r, f));
    }

    let (proj, words) = (p.v("mcqm.projections"), p.v("mcqm.codewords"));
    let mut clusters = Vec::with_capacity(s.codebooks * w * d);
    let mut masks = Vec::with_capacity(s.codebooks * w);
    let mut all_probs = Vec::with_capacity(s.codebooks);
    for n in 0..s.codebooks {
        let h = mm(&e, l, d, &proj[n * d * d..(n + 1) * d * d], d);
        let scores = mm_bt(&h, l, d, &words[n * w * d..(n + 1) * w * d], w);
        let probs: Vec<f64> = scores
            .chunks_exact(w)
            .enumerate()
            .flat_map(|(i, row)| {
                let logits: Vec<f64> = row
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| (v + frozen.noise[n][i * w + k]) / frozen.temperature)
                    .collect();
                softmax(&logits, |_| true)
            })
            .collect();
        let pbar = frozen.probs.as_ref().map_or(&probs, |pb| &pb[n]);
        let idx = &frozen.indices[n];
        let mask: Vec<bool> = (0..w).map(|k| idx.contains(&k)).collect();
        let mut reps = vec![0.0; w * d];
        for k in (0..w).filter(|&k| mask[k]) {
            let mut total = 0.0;
            for i in 0..l {
                let s_ik = f64::from(u8::from(idx[i] == k)) + probs[i * w + k] - pbar[i * w + k];
                total += s_ik;
                for c in 0..d {
                    reps[k * d + c] += s_ik * e[i * d + c];
                }
            }
            reps[k * d..(k + 1) * d].iter_mut().for_each(|v| *v /= total);
        }
        clusters.extend(hstu(p, s, &reps, &mask));
        masks.extend(mask);
        all_probs.push(probs);
    }

    let rows = s.codebooks * w;
    let q = mm(&cand, 1, d, p.v("head.attn.query"), d);
    let k = mm(&clusters, rows, d, p.v("head.attn.key"), d);
    let v = mm(&clusters, rows, d, p.v("head.attn.value"), d);
    let logits: Vec<f64> = mm_bt(&q, 1, d, &k, rows).iter().map(|x| x * s.attn_scale).collect();
    let weights = softmax(&logits, |j| masks[j]);
    let interest = mm(&weights, 1, rows, &v, d);

    let mut h: Vec<f64> = interest.into_iter().chain(side).chain(cand).collect();
    for i in 0..s.mlp_layers {
        let b = p.v(&format!("head.mlp.{i}.bias"));
        let mut z = mm(&h, 1, h.len(), p.v(&format!("head.mlp.{i}.weight")), b.len());
        for (zv, bv) in z.iter_mut().zip(b) {
            *zv += bv;
            *zv = if i + 1 == s.mlp_layers { sigmoid(*zv) } else { silu(*zv) };
        }
        h = z;
    }
    (h[0], all_probs)
}

pub fn logloss(p: f64, y: f64) -> f64 {
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}
