//! Dense row-major `f32` tensors and the matrix kernels shared by the
//! forward and backward passes.
//!
//! All reductions accumulate in `f64` and visit terms left to right, so a
//! kernel's output is a pure function of its inputs.

use crate::error::ShapeError;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f32>) -> Result<Self, ShapeError> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || numel != values.len() {
            return Err(ShapeError::new("tensor", &shape, &[values.len()]));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![0.0; numel],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: (0..numel).map(&mut f).collect(),
        }
    }

    /// Row-major matrix from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[f32]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            shape: vec![rows.len(), cols],
            values: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// Product of all leading axes, i.e. the row count of the matrix view.
    pub fn rows(&self) -> usize {
        self.values.len() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, ShapeError> {
        if shape.iter().product::<usize>() != self.values.len() {
            return Err(ShapeError::new("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

const PANEL: usize = 8;

/// `out[m×n] = a[m×k] · b[k×n]`.
///
/// Every output accumulates in f64 over `p = 0..k` in order. `b` is widened
/// once into column panels of eight so the inner loop stays in registers.
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0f32; m * n];
    if k == 0 || n == 0 {
        return out;
    }
    let panels = n / PANEL;
    let mut packed = vec![0.0f64; panels * k * PANEL];
    for (q, panel) in packed.chunks_exact_mut(k * PANEL).enumerate() {
        for (p, dst) in panel.chunks_exact_mut(PANEL).enumerate() {
            let src = &b[p * n + q * PANEL..p * n + (q + 1) * PANEL];
            dst.iter_mut().zip(src).for_each(|(d, &s)| *d = s as f64);
        }
    }
    for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (panel, oblock) in packed.chunks_exact(k * PANEL).zip(orow.chunks_exact_mut(PANEL)) {
            let mut acc = [0.0f64; PANEL];
            for (&av, brow) in arow.iter().zip(panel.chunks_exact(PANEL)) {
                let av = av as f64;
                for t in 0..PANEL {
                    acc[t] += av * brow[t];
                }
            }
            oblock.iter_mut().zip(acc).for_each(|(o, s)| *o = s as f32);
        }
        for j in panels * PANEL..n {
            let s = arow
                .iter()
                .enumerate()
                .fold(0.0f64, |s, (p, &av)| s + av as f64 * b[p * n + j] as f64);
            orow[j] = s as f32;
        }
    }
    out
}

/// `out[k×n] = aᵀ · b` for `a[m×k]`, `b[m×n]`; accumulates over `i = 0..m`
/// in order.
pub fn matmul_at(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut out = vec![0.0f32; k * n];
    if m == 0 || n == 0 {
        return out;
    }
    let panels = n / PANEL;
    let mut packed = vec![0.0f64; panels * m * PANEL];
    for (q, panel) in packed.chunks_exact_mut(m * PANEL).enumerate() {
        for (i, dst) in panel.chunks_exact_mut(PANEL).enumerate() {
            let src = &b[i * n + q * PANEL..i * n + (q + 1) * PANEL];
            dst.iter_mut().zip(src).for_each(|(d, &s)| *d = s as f64);
        }
    }
    for (p, orow) in out.chunks_exact_mut(n).enumerate() {
        for (panel, oblock) in packed.chunks_exact(m * PANEL).zip(orow.chunks_exact_mut(PANEL)) {
            let mut acc = [0.0f64; PANEL];
            for (i, brow) in panel.chunks_exact(PANEL).enumerate() {
                let av = a[i * k + p] as f64;
                for t in 0..PANEL {
                    acc[t] += av * brow[t];
                }
            }
            oblock.iter_mut().zip(acc).for_each(|(o, s)| *o = s as f32);
        }
        for j in panels * PANEL..n {
            let s = (0..m).fold(0.0f64, |s, i| s + a[i * k + p] as f64 * b[i * n + j] as f64);
            orow[j] = s as f32;
        }
    }
    out
}

/// `out[m×n] = a[m×k] · bᵀ` for `b[n×k]`.
pub fn matmul_bt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    matmul(a, &transpose(b, n, k), m, k, n)
}

pub fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0f64, |s, (&x, &y)| s + x as f64 * y as f64)
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction; masked-out columns get exactly 0.
/// A row with every column masked is left all zero.
pub fn softmax_rows(x: &[f32], cols: usize, mask: Option<&[bool]>) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for (row, orow) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let keep = |j: usize| mask.is_none_or(|m| m[j]);
        let mut max = f32::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if keep(j) && v > max {
                max = v;
            }
        }
        if max == f32::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0f64;
        for (j, (&v, o)) in row.iter().zip(orow.iter_mut()).enumerate() {
            if keep(j) {
                let e = (v - max).exp();
                *o = e;
                total += e as f64;
            }
        }
        let inv = 1.0 / total;
        for o in orow.iter_mut() {
            *o = (*o as f64 * inv) as f32;
        }
    }
    out
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}
