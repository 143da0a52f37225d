//! Reverse-mode automatic differentiation over row-major matrices.
//!
//! A [`Graph`] records every operation in construction order, which is
//! also a valid topological order; [`Graph::backward`] walks it in reverse.
//! Every value is a 2-D matrix (vectors are `1×n`). Parameters are borrowed
//! from a [`ParamStore`] without copying, and their gradients accumulate into
//! a dense [`Gradients`] buffer owned by the graph.
//!
//! The only broadcast is "matrix op row-vector" ([`Graph::add_row`],
//! [`Graph::layer_norm`]); every other shape disagreement is a
//! [`ShapeError`].

use std::ops::Deref;

use crate::error::{Error, Result, ShapeError};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'p> {
    Owned(Vec<f32>),
    Borrowed(&'p [f32]),
}

impl Deref for Value<'_> {
    type Target = [f32];

    fn deref(&self) -> &[f32] {
        match self {
            Value::Owned(v) => v,
            Value::Borrowed(v) => v,
        }
    }
}

enum Op {
    Input,
    Param { id: ParamId, offset: usize, len: usize },
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Shift(Var),
    Silu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, offset: Var, stats: Vec<(f64, f64)> },
    Gather { table: Var, rows: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    MaskRows(Var, Vec<bool>),
    MaskCols(Var, Vec<bool>),
    RelBias { x: Var, table: Var },
    StPool { probs: Var, emb: Var, indices: Vec<usize>, denom: Vec<f64> },
    MeanRows(Var),
    Sum(Var),
    LogLoss { p: Var, label: f32, lo: f32, hi: f32 },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param { .. } => Vec::new(),
            Op::MatMul(a, b) | Op::MatMulBt(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Shift(x)
            | Op::Silu(x)
            | Op::Sigmoid(x)
            | Op::Softmax(x)
            | Op::SliceCols { x, .. }
            | Op::MaskRows(x, _)
            | Op::MaskCols(x, _)
            | Op::MeanRows(x)
            | Op::Sum(x)
            | Op::LogLoss { p: x, .. }
            | Op::Gather { table: x, .. } => vec![*x],
            Op::LayerNorm { x, gain, offset, .. } => vec![*x, *gain, *offset],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
            Op::RelBias { x, table } => vec![*x, *table],
            Op::StPool { probs, emb, .. } => vec![*probs, *emb],
        }
    }
}

struct Node<'p> {
    rows: usize,
    cols: usize,
    value: Value<'p>,
    op: Op,
    requires_grad: bool,
}

/// Operation record plus the gradients accumulated by [`Graph::backward`].
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    input_grads: Vec<Option<Vec<f32>>>,
    param_grads: Gradients,
}

impl<'p> Graph<'p> {
    /// A graph whose parameters come from a store with `num_params` entries.
    pub fn new(num_params: usize) -> Self {
        Self {
            nodes: Vec::new(),
            input_grads: Vec::new(),
            param_grads: Gradients::new(num_params),
        }
    }

    pub fn for_store(store: &ParamStore) -> Self {
        Self::new(store.len())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Value<'p>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        debug_assert!(
            matches!(op, Op::Input | Op::Param { .. })
                || value.iter().all(|v| v.is_finite())
                || op.inputs().iter().any(|x| self.nodes[x.0].value.iter().any(|v| !v.is_finite())),
            "non-finite value produced from finite inputs by graph node {}",
            self.nodes.len()
        );
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            requires_grad,
        });
        self.input_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'p> {
        &self.nodes[v.0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.node(v).value
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.value(v)[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(vec![n.rows, n.cols], n.value.to_vec()).expect("node shape")
    }

    // ---- leaves -------------------------------------------------------

    /// Leaf matrix. `requires_grad` inputs receive gradients readable via
    /// [`Graph::grad`].
    pub fn input(&mut self, rows: usize, cols: usize, values: Vec<f32>, requires_grad: bool) -> Result<Var> {
        if rows * cols != values.len() || rows == 0 || cols == 0 {
            return Err(ShapeError::new("input", &[rows, cols], &[values.len()]).into());
        }
        Ok(self.push(rows, cols, Value::Owned(values), Op::Input, requires_grad))
    }

    pub fn tensor(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.push(t.rows(), t.cols(), Value::Owned(t.values().to_vec()), Op::Input, requires_grad)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, values: Vec<f32>) -> Result<Var> {
        self.input(rows, cols, values, false)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.push(rows, cols, Value::Owned(vec![0.0; rows * cols]), Op::Input, false)
    }

    /// The whole parameter viewed as a matrix (leading axes flattened).
    pub fn param(&mut self, store: &'p ParamStore, id: ParamId) -> Var {
        let rows = store.get(id).rows();
        self.param_rows(store, id, 0, rows).expect("full range")
    }

    /// Rows `start..start+count` of a parameter's matrix view.
    pub fn param_rows(&mut self, store: &'p ParamStore, id: ParamId, start: usize, count: usize) -> Result<Var> {
        let t = store.get(id);
        let cols = t.cols();
        if count == 0 || start + count > t.rows() {
            return Err(ShapeError::new("param_rows", t.shape(), &[start, count]).into());
        }
        let offset = start * cols;
        let len = count * cols;
        let slice = &t.values()[offset..offset + len];
        Ok(self.push(
            count,
            cols,
            Value::Borrowed(slice),
            Op::Param { id, offset, len: t.numel() },
            true,
        ))
    }

    // ---- dense algebra -------------------------------------------------

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(ShapeError::new("matmul", &[m, k], &[k2, n]).into());
        }
        let out = tensor::matmul(self.value(a), self.value(b), m, k, n);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, Value::Owned(out), Op::MatMul(a, b), rg))
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (n, k2)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(ShapeError::new("matmul_bt", &[m, k], &[n, k2]).into());
        }
        let out = tensor::matmul_bt(self.value(a), self.value(b), m, k, n);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, Value::Owned(out), Op::MatMulBt(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(ShapeError::new(op, &[sa.0, sa.1], &[sb.0, sb.1]).into());
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, Value::Owned(out), Op::Add(a, b), rg))
    }

    /// `x[m×n] + row[1×n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let ((m, n), (one, n2)) = (self.shape(x), self.shape(row));
        if one != 1 || n != n2 {
            return Err(ShapeError::new("add_row", &[m, n], &[one, n2]).into());
        }
        let bias = self.value(row);
        let out = self
            .value(x)
            .chunks_exact(n)
            .flat_map(|r| r.iter().zip(bias).map(|(a, b)| a + b))
            .collect();
        let rg = self.needs(x) || self.needs(row);
        Ok(self.push(m, n, Value::Owned(out), Op::AddRow(x, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, Value::Owned(out), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let (r, c) = self.shape(x);
        let out = self.value(x).iter().map(|v| v * s).collect();
        let rg = self.needs(x);
        self.push(r, c, Value::Owned(out), Op::Scale(x, s), rg)
    }

    /// Adds a constant (non-differentiable) matrix of the same shape.
    pub fn shift(&mut self, x: Var, offset: &[f32]) -> Result<Var> {
        let (r, c) = self.shape(x);
        if offset.len() != r * c {
            return Err(ShapeError::new("shift", &[r, c], &[offset.len()]).into());
        }
        let out = self.value(x).iter().zip(offset).map(|(a, b)| a + b).collect();
        let rg = self.needs(x);
        Ok(self.push(r, c, Value::Owned(out), Op::Shift(x), rg))
    }

    // ---- nonlinearities ------------------------------------------------

    pub fn silu(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out = self.value(x).iter().map(|&v| v * tensor::sigmoid(v)).collect();
        let rg = self.needs(x);
        self.push(r, c, Value::Owned(out), Op::Silu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out = self.value(x).iter().map(|&v| tensor::sigmoid(v)).collect();
        let rg = self.needs(x);
        self.push(r, c, Value::Owned(out), Op::Sigmoid(x), rg)
    }

    /// Softmax over the last axis of every row.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out = tensor::softmax_rows(self.value(x), c, None);
        let rg = self.needs(x);
        self.push(r, c, Value::Owned(out), Op::Softmax(x), rg)
    }

    /// Softmax restricted to columns where `mask` is true; the rest get
    /// exactly zero weight.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.shape(x);
        if mask.len() != c {
            return Err(ShapeError::new("masked_softmax", &[r, c], &[mask.len()]).into());
        }
        let out = tensor::softmax_rows(self.value(x), c, Some(mask));
        let rg = self.needs(x);
        Ok(self.push(r, c, Value::Owned(out), Op::Softmax(x), rg))
    }

    /// Per-row standardization over the last axis followed by `gain`/`offset`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var, eps: f32) -> Result<Var> {
        let (r, c) = self.shape(x);
        for p in [gain, offset] {
            if self.shape(p) != (1, c) {
                let s = self.shape(p);
                return Err(ShapeError::new("layer_norm", &[r, c], &[s.0, s.1]).into());
            }
        }
        let (g, b) = (self.value(gain), self.value(offset));
        let mut stats = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(x).chunks_exact(c) {
            let mean = row.iter().fold(0.0f64, |s, &v| s + v as f64) / c as f64;
            let var = row
                .iter()
                .fold(0.0f64, |s, &v| s + (v as f64 - mean).powi(2))
                / c as f64;
            let rstd = 1.0 / (var + eps as f64).sqrt();
            stats.push((mean, rstd));
            for (j, &v) in row.iter().enumerate() {
                let xhat = ((v as f64 - mean) * rstd) as f32;
                out.push(xhat * g[j] + b[j]);
            }
        }
        let rg = self.needs(x) || self.needs(gain) || self.needs(offset);
        Ok(self.push(
            r,
            c,
            Value::Owned(out),
            Op::LayerNorm { x, gain, offset, stats },
            rg,
        ))
    }

    // ---- indexing and layout ------------------------------------------

    /// Rows of `table` selected by `rows` (embedding lookup).
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (tr, c) = self.shape(table);
        if rows.is_empty() {
            return Err(ShapeError::new("gather", &[tr, c], &[0]).into());
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= tr) {
            return Err(ShapeError::new("gather", &[tr, c], &[bad]).into());
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.needs(table);
        Ok(self.push(
            rows.len(),
            c,
            Value::Owned(out),
            Op::Gather { table, rows: rows.to_vec() },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.shape(parts[0]).0;
        if let Some(&p) = parts.iter().find(|&&p| self.shape(p).0 != r) {
            let s = self.shape(p);
            return Err(ShapeError::new("concat_cols", &[r], &[s.0, s.1]).into());
        }
        let c: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                let pc = self.shape(p).1;
                out.extend_from_slice(&self.value(p)[i * pc..(i + 1) * pc]);
            }
        }
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(r, c, Value::Owned(out), Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.shape(parts[0]).1;
        if let Some(&p) = parts.iter().find(|&&p| self.shape(p).1 != c) {
            let s = self.shape(p);
            return Err(ShapeError::new("concat_rows", &[c], &[s.0, s.1]).into());
        }
        let r: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut out = Vec::with_capacity(r * c);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(r, c, Value::Owned(out), Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `start..start+width`.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if width == 0 || start + width > c {
            return Err(ShapeError::new("slice_cols", &[r, c], &[start, width]).into());
        }
        let out = self
            .value(x)
            .chunks_exact(c)
            .flat_map(|row| row[start..start + width].iter().copied())
            .collect();
        let rg = self.needs(x);
        Ok(self.push(r, width, Value::Owned(out), Op::SliceCols { x, start }, rg))
    }

    /// Zeroes every row whose mask entry is false.
    pub fn mask_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.shape(x);
        if mask.len() != r {
            return Err(ShapeError::new("mask_rows", &[r, c], &[mask.len()]).into());
        }
        let out = self
            .value(x)
            .chunks_exact(c)
            .zip(mask)
            .flat_map(|(row, &keep)| row.iter().map(move |&v| if keep { v } else { 0.0 }))
            .collect();
        let rg = self.needs(x);
        Ok(self.push(r, c, Value::Owned(out), Op::MaskRows(x, mask.to_vec()), rg))
    }

    /// Zeroes every column whose mask entry is false.
    pub fn mask_cols(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.shape(x);
        if mask.len() != c {
            return Err(ShapeError::new("mask_cols", &[r, c], &[mask.len()]).into());
        }
        let out = self
            .value(x)
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(mask).map(|(&v, &keep)| if keep { v } else { 0.0 }))
            .collect();
        let rg = self.needs(x);
        Ok(self.push(r, c, Value::Owned(out), Op::MaskCols(x, mask.to_vec()), rg))
    }

    /// Adds `table[clip(k − q) + center]` to entry `(q, k)` of a square
    /// matrix, where `table` holds `2·center + 1` relative-offset biases.
    pub fn add_rel_bias(&mut self, x: Var, table: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let (one, t) = self.shape(table);
        if r != c || one != 1 || t % 2 == 0 {
            return Err(ShapeError::new("add_rel_bias", &[r, c], &[one, t]).into());
        }
        let bias = self.value(table);
        let mut out = self.value(x).to_vec();
        for q in 0..r {
            for k in 0..c {
                out[q * c + k] += bias[rel_index(q, k, t)];
            }
        }
        let rg = self.needs(x) || self.needs(table);
        Ok(self.push(r, c, Value::Owned(out), Op::RelBias { x, table }, rg))
    }

    /// Straight-through average pooling of `emb[L×D]` rows into `W` groups.
    ///
    /// Forward: row `k` is the mean of the `emb` rows with `indices[i] == k`
    /// (zero when the group is empty). Backward treats the hard one-hot
    /// assignment as if it were `probs[L×W]`, i.e. differentiates
    /// `r_k = Σ_i s_ik e_i / max(Σ_i s_ik, eps)` at `s = one_hot(indices)`.
    pub fn st_pool(&mut self, probs: Var, emb: Var, indices: &[usize], eps: f64) -> Result<Var> {
        let ((l, w), (l2, d)) = (self.shape(probs), self.shape(emb));
        if l != l2 || indices.len() != l || indices.iter().any(|&k| k >= w) {
            return Err(ShapeError::new("st_pool", &[l, w], &[l2, d, indices.len()]).into());
        }
        let e = self.value(emb);
        let mut sums = vec![0.0f64; w * d];
        let mut counts = vec![0.0f64; w];
        for (i, &k) in indices.iter().enumerate() {
            counts[k] += 1.0;
            for (s, &v) in sums[k * d..(k + 1) * d].iter_mut().zip(&e[i * d..(i + 1) * d]) {
                *s += v as f64;
            }
        }
        let denom: Vec<f64> = counts.iter().map(|&c| c.max(eps)).collect();
        let out = sums
            .chunks_exact(d)
            .zip(&denom)
            .flat_map(|(row, &z)| row.iter().map(move |&s| (s / z) as f32))
            .collect();
        let rg = self.needs(probs) || self.needs(emb);
        Ok(self.push(
            w,
            d,
            Value::Owned(out),
            Op::StPool { probs, emb, indices: indices.to_vec(), denom },
            rg,
        ))
    }

    // ---- reductions ----------------------------------------------------

    /// Column means, `1×n`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let mut acc = vec![0.0f64; c];
        for row in self.value(x).chunks_exact(c) {
            acc.iter_mut().zip(row).for_each(|(s, &v)| *s += v as f64);
        }
        let out = acc.into_iter().map(|s| (s / r as f64) as f32).collect();
        let rg = self.needs(x);
        self.push(1, c, Value::Owned(out), Op::MeanRows(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().fold(0.0f64, |s, &v| s + v as f64) as f32;
        let rg = self.needs(x);
        self.push(1, 1, Value::Owned(vec![s]), Op::Sum(x), rg)
    }

    /// Negative log-likelihood of a `1×1` probability against a 0/1 label,
    /// with the probability clipped to `[clip, 1 − clip]`.
    pub fn logloss(&mut self, p: Var, label: f32, clip: f32) -> Result<Var> {
        if self.shape(p) != (1, 1) {
            let s = self.shape(p);
            return Err(ShapeError::new("logloss", &[s.0, s.1], &[1, 1]).into());
        }
        let (lo, hi) = (clip, 1.0 - clip);
        let loss = crate::head::logloss_value(self.scalar(p) as f64, label as f64, clip as f64);
        let rg = self.needs(p);
        Ok(self.push(1, 1, Value::Owned(vec![loss as f32]), Op::LogLoss { p, label, lo, hi }, rg))
    }

    // ---- gradients -----------------------------------------------------

    /// Propagates `d loss / d ·` to every differentiable leaf. Gradients add
    /// to whatever earlier calls left behind.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got a {r}×{c} value"
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        Ok(())
    }

    /// Gradient held by a `requires_grad` input leaf.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.input_grads[v.0].as_deref()
    }

    pub fn param_grads(&self) -> &Gradients {
        &self.param_grads
    }

    pub fn into_param_grads(self) -> Gradients {
        self.param_grads
    }

    fn backward_node(&mut self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let (rows, cols) = (node.rows, node.cols);
        let needs = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| -> &[f32] { &nodes[v.0].value };
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f32])| {
            if nodes[v.0].requires_grad {
                let n = nodes[v.0].value.len();
                f(grads[v.0].get_or_insert_with(|| vec![0.0; n]));
            }
        };
        match &node.op {
            Op::Input => {
                let buf = self.input_grads[i].get_or_insert_with(|| vec![0.0; g.len()]);
                add_into(buf, g);
            }
            Op::Param { id, offset, len } => {
                let buf = self.param_grads.buffer(*id, *len);
                add_into(&mut buf[*offset..*offset + g.len()], g);
            }
            &Op::MatMul(a, b) => {
                let k = nodes[a.0].cols;
                if needs(a) {
                    let da = tensor::matmul_bt(g, val(b), rows, cols, k);
                    acc(a, &mut |buf| add_into(buf, &da));
                }
                if needs(b) {
                    let db = tensor::matmul_at(val(a), g, rows, k, cols);
                    acc(b, &mut |buf| add_into(buf, &db));
                }
            }
            &Op::MatMulBt(a, b) => {
                let k = nodes[a.0].cols;
                if needs(a) {
                    let da = tensor::matmul(g, val(b), rows, cols, k);
                    acc(a, &mut |buf| add_into(buf, &da));
                }
                if needs(b) {
                    let db = tensor::matmul_at(g, val(a), rows, cols, k);
                    acc(b, &mut |buf| add_into(buf, &db));
                }
            }
            &Op::Add(a, b) => {
                acc(a, &mut |buf| add_into(buf, g));
                acc(b, &mut |buf| add_into(buf, g));
            }
            &Op::AddRow(x, row) => {
                acc(x, &mut |buf| add_into(buf, g));
                if needs(row) {
                    let cs = col_sums(g, cols);
                    acc(row, &mut |buf| add_into(buf, &cs));
                }
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                acc(a, &mut |buf| {
                    buf.iter_mut().zip(g.iter().zip(vb)).for_each(|(d, (g, y))| *d += g * y)
                });
                acc(b, &mut |buf| {
                    buf.iter_mut().zip(g.iter().zip(va)).for_each(|(d, (g, x))| *d += g * x)
                });
            }
            &Op::Scale(x, s) => acc(x, &mut |buf| {
                buf.iter_mut().zip(g).for_each(|(d, g)| *d += g * s)
            }),
            &Op::Shift(x) => acc(x, &mut |buf| add_into(buf, g)),
            &Op::Silu(x) => {
                let vx = val(x);
                acc(x, &mut |buf| {
                    for ((d, &g), &x) in buf.iter_mut().zip(g).zip(vx) {
                        let s = tensor::sigmoid(x);
                        *d += g * s * (1.0 + x * (1.0 - s));
                    }
                })
            }
            &Op::Sigmoid(x) => {
                let y = &node.value;
                acc(x, &mut |buf| {
                    for ((d, &g), &y) in buf.iter_mut().zip(g).zip(y.iter()) {
                        *d += g * y * (1.0 - y);
                    }
                })
            }
            &Op::Softmax(x) => {
                let y = &node.value;
                acc(x, &mut |buf| {
                    for ((drow, grow), yrow) in buf
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(y.chunks_exact(cols))
                    {
                        let dot = tensor::dot64(grow, yrow) as f32;
                        for ((d, &g), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (g - dot);
                        }
                    }
                })
            }
            Op::LayerNorm { x, gain, offset, stats } => {
                let (x, gain, offset) = (*x, *gain, *offset);
                let (vx, vg) = (val(x), val(gain));
                let xhat: Vec<f32> = vx
                    .chunks_exact(cols)
                    .zip(stats)
                    .flat_map(|(row, &(m, r))| row.iter().map(move |&v| ((v as f64 - m) * r) as f32))
                    .collect();
                if needs(x) {
                    let mut dx = vec![0.0f32; rows * cols];
                    for (((drow, grow), hrow), &(_, rstd)) in dx
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(xhat.chunks_exact(cols))
                        .zip(stats)
                    {
                        let mut m1 = 0.0f64;
                        let mut m2 = 0.0f64;
                        for j in 0..cols {
                            let dh = (grow[j] * vg[j]) as f64;
                            m1 += dh;
                            m2 += dh * hrow[j] as f64;
                        }
                        m1 /= cols as f64;
                        m2 /= cols as f64;
                        for j in 0..cols {
                            let dh = (grow[j] * vg[j]) as f64;
                            drow[j] = (rstd * (dh - m1 - hrow[j] as f64 * m2)) as f32;
                        }
                    }
                    acc(x, &mut |buf| add_into(buf, &dx));
                }
                if needs(gain) {
                    let gh: Vec<f32> = g.iter().zip(&xhat).map(|(a, b)| a * b).collect();
                    let cs = col_sums(&gh, cols);
                    acc(gain, &mut |buf| add_into(buf, &cs));
                }
                if needs(offset) {
                    let cs = col_sums(g, cols);
                    acc(offset, &mut |buf| add_into(buf, &cs));
                }
            }
            Op::Gather { table, rows: idx } => acc(*table, &mut |buf| {
                for (grow, &r) in g.chunks_exact(cols).zip(idx) {
                    add_into(&mut buf[r * cols..(r + 1) * cols], grow);
                }
            }),
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let pc = nodes[p.0].cols;
                    acc(p, &mut |buf| {
                        for (brow, grow) in buf.chunks_exact_mut(pc).zip(g.chunks_exact(cols)) {
                            add_into(brow, &grow[start..start + pc]);
                        }
                    });
                    start += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = nodes[p.0].value.len();
                    acc(p, &mut |buf| add_into(buf, &g[start..start + n]));
                    start += n;
                }
            }
            &Op::SliceCols { x, start } => {
                let xc = nodes[x.0].cols;
                acc(x, &mut |buf| {
                    for (brow, grow) in buf.chunks_exact_mut(xc).zip(g.chunks_exact(cols)) {
                        add_into(&mut brow[start..start + cols], grow);
                    }
                })
            }
            Op::MaskRows(x, mask) => acc(*x, &mut |buf| {
                for ((brow, grow), &keep) in buf.chunks_exact_mut(cols).zip(g.chunks_exact(cols)).zip(mask) {
                    if keep {
                        add_into(brow, grow);
                    }
                }
            }),
            Op::MaskCols(x, mask) => acc(*x, &mut |buf| {
                for (brow, grow) in buf.chunks_exact_mut(cols).zip(g.chunks_exact(cols)) {
                    for ((d, &g), &keep) in brow.iter_mut().zip(grow).zip(mask) {
                        if keep {
                            *d += g;
                        }
                    }
                }
            }),
            &Op::RelBias { x, table } => {
                acc(x, &mut |buf| add_into(buf, g));
                let t = nodes[table.0].cols;
                acc(table, &mut |buf| {
                    for q in 0..rows {
                        for k in 0..cols {
                            buf[rel_index(q, k, t)] += g[q * cols + k];
                        }
                    }
                });
            }
            Op::StPool { probs, emb, indices, denom } => {
                let (probs, emb) = (*probs, *emb);
                let d = cols;
                let w = rows;
                if needs(probs) {
                    // dS[i,k] = <dr_k, e_i − r_k> / S_k (or <dr_k, e_i> / eps if empty)
                    let ve = val(emb);
                    let mut ds = tensor::matmul_bt(ve, g, indices.len(), d, w);
                    let r = &node.value;
                    let shift: Vec<f32> = (0..w)
                        .map(|k| {
                            if denom[k] >= 1.0 {
                                tensor::dot64(&g[k * d..(k + 1) * d], &r[k * d..(k + 1) * d]) as f32
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    for row in ds.chunks_exact_mut(w) {
                        for (k, v) in row.iter_mut().enumerate() {
                            *v = ((*v - shift[k]) as f64 / denom[k]) as f32;
                        }
                    }
                    acc(probs, &mut |buf| add_into(buf, &ds));
                }
                acc(emb, &mut |buf| {
                    for (brow, &k) in buf.chunks_exact_mut(d).zip(indices.iter()) {
                        let inv = 1.0 / denom[k];
                        for (b, &gv) in brow.iter_mut().zip(&g[k * d..(k + 1) * d]) {
                            *b += (gv as f64 * inv) as f32;
                        }
                    }
                });
            }
            &Op::MeanRows(x) => {
                let r = nodes[x.0].rows;
                let inv = 1.0 / r as f32;
                acc(x, &mut |buf| {
                    for brow in buf.chunks_exact_mut(cols) {
                        brow.iter_mut().zip(g).for_each(|(b, &gv)| *b += gv * inv);
                    }
                })
            }
            &Op::Sum(x) => acc(x, &mut |buf| buf.iter_mut().for_each(|b| *b += g[0])),
            &Op::LogLoss { p, label, lo, hi } => {
                let pv = val(p)[0];
                if pv > lo && pv < hi {
                    let (pv, y) = (pv as f64, label as f64);
                    let dp = -(y / pv - (1.0 - y) / (1.0 - pv));
                    let dp = (dp * g[0] as f64) as f32;
                    acc(p, &mut |buf| buf[0] += dp);
                }
            }
        }
    }
}

/// Offset `k − q` clipped to the table's range, shifted to a table index.
pub(crate) fn rel_index(q: usize, k: usize, table_len: usize) -> usize {
    let center = (table_len / 2) as isize;
    let off = (k as isize - q as isize).clamp(-center, center);
    (off + center) as usize
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn col_sums(g: &[f32], cols: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; cols];
    for row in g.chunks_exact(cols) {
        acc.iter_mut().zip(row).for_each(|(s, &v)| *s += v as f64);
    }
    acc.into_iter().map(|s| s as f32).collect()
}
