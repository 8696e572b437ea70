//! Dense linear algebra and sampling primitives used by the forward pass.
//!
//! Everything here is single-threaded with a fixed reduction order so that
//! results are bit-reproducible across runs. Products accumulate in `f64`
//! and truncate to `f32` on store.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{contract, require, Result};

/// Row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        require!(
            data.len() == rows * cols,
            "matrix data length {} != {rows}x{cols}",
            data.len()
        );
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            require!(r.len() == cols, "row {i} has width {} != {cols}", r.len());
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Entries drawn i.i.d. from N(0, std²).
    pub fn random_normal(rows: usize, cols: usize, std: f32, rng: &mut RngState) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.normal() as f32 * std)
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    /// Appends one row at the bottom.
    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if self.rows == 0 && self.cols == 0 {
            self.cols = row.len();
        }
        require!(
            row.len() == self.cols,
            "row width {} != matrix width {}",
            row.len(),
            self.cols
        );
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// Keeps only the rows for which `keep` returns true, preserving order.
    pub fn retain_rows(&mut self, mut keep: impl FnMut(usize) -> bool) {
        let cols = self.cols;
        let mut write = 0;
        for read in 0..self.rows {
            if keep(read) {
                if write != read {
                    self.data
                        .copy_within(read * cols..(read + 1) * cols, write * cols);
                }
                write += 1;
            }
        }
        self.rows = write;
        self.data.truncate(write * cols);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Standard matrix product with a fixed `i, j, k` loop order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    require!(
        a.cols == b.rows,
        "matmul shape mismatch: {}x{} * {}x{}",
        a.rows,
        a.cols,
        b.rows,
        b.cols
    );
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let lhs = a.row(i);
        for j in 0..b.cols {
            let mut acc = 0.0f64;
            for (k, &x) in lhs.iter().enumerate() {
                acc += x as f64 * b.data[k * b.cols + j] as f64;
            }
            out.data[i * b.cols + j] = acc as f32;
        }
    }
    Ok(out)
}

/// Row vector times matrix, `x · W`.
pub fn vec_mat(x: &[f32], w: &Matrix) -> Result<Vec<f32>> {
    require!(
        x.len() == w.rows,
        "vec_mat shape mismatch: 1x{} * {}x{}",
        x.len(),
        w.rows,
        w.cols
    );
    let mut acc = vec![0.0f64; w.cols];
    for (k, &xk) in x.iter().enumerate() {
        let xk = xk as f64;
        for (a, &wkj) in acc.iter_mut().zip(w.row(k)) {
            *a += xk * wkj as f64;
        }
    }
    Ok(acc.into_iter().map(|v| v as f32).collect())
}

/// Dot product accumulated in `f64`.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0f64, |acc, (&x, &y)| acc + x as f64 * y as f64)
}

/// Numerically stable softmax over `f32` logits.
pub fn softmax_row(logits: &[f32]) -> Result<Vec<f32>> {
    let wide: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
    Ok(softmax_f64(&wide)?.into_iter().map(|p| p as f32).collect())
}

/// Softmax in `f64`. Attention probabilities stay in this precision.
pub fn softmax_f64(logits: &[f64]) -> Result<Vec<f64>> {
    require!(!logits.is_empty(), "softmax of an empty row");
    require!(
        logits.iter().all(|v| v.is_finite()),
        "softmax input contains a non-finite value"
    );
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// Rotary position embedding over every `head_dim` chunk of `vec`.
///
/// Pair `(2i, 2i+1)` of each head is rotated by `position * base^(-2i/head_dim)`.
pub fn rope_apply(vec: &[f32], position: usize, head_dim: usize, base: f32) -> Result<Vec<f32>> {
    require!(
        head_dim > 0 && head_dim.is_multiple_of(2),
        "rope head_dim must be even, got {head_dim}"
    );
    require!(
        vec.len().is_multiple_of(head_dim),
        "rope input length {} is not a multiple of head_dim {head_dim}",
        vec.len()
    );
    let mut out = vec.to_vec();
    if position == 0 {
        return Ok(out);
    }
    let base = base as f64;
    for head in out.chunks_mut(head_dim) {
        for i in 0..head_dim / 2 {
            let inv_freq = base.powf(-((2 * i) as f64) / head_dim as f64);
            let (sin, cos) = (position as f64 * inv_freq).sin_cos();
            let x0 = head[2 * i] as f64;
            let x1 = head[2 * i + 1] as f64;
            head[2 * i] = (x0 * cos - x1 * sin) as f32;
            head[2 * i + 1] = (x0 * sin + x1 * cos) as f32;
        }
    }
    Ok(out)
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Nucleus sampling.
///
/// Tokens are ranked by descending probability (ties toward the lower
/// index); the smallest prefix whose mass reaches `p` is kept and one token
/// is drawn from it proportionally.
pub fn sample_top_p(probs: &[f32], p: f64, rng: &mut RngState) -> Result<usize> {
    require!(!probs.is_empty(), "sample_top_p on an empty distribution");
    require!(p > 0.0 && p <= 1.0, "top-p must lie in (0, 1], got {p}");
    let total: f64 = probs.iter().map(|&v| v as f64).sum();
    require!(
        (total - 1.0).abs() <= 1e-5,
        "probabilities sum to {total}, expected 1"
    );

    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));

    let mut mass = 0.0f64;
    let mut cut = order.len();
    for (rank, &idx) in order.iter().enumerate() {
        mass += probs[idx] as f64;
        if mass >= p {
            cut = rank + 1;
            break;
        }
    }
    let nucleus = &order[..cut];
    let nucleus_mass: f64 = nucleus.iter().map(|&i| probs[i] as f64).sum();

    let target = rng.uniform() * nucleus_mass;
    let mut acc = 0.0f64;
    for &idx in nucleus {
        acc += probs[idx] as f64;
        if target < acc {
            return Ok(idx);
        }
    }
    // Rounding left `target` at the very top of the range.
    match nucleus.iter().rev().find(|&&i| probs[i] > 0.0) {
        Some(&idx) => Ok(idx),
        None => contract!("nucleus has zero mass"),
    }
}

/// Seeded deterministic generator (ChaCha with 8 rounds).
///
/// ChaCha8 output is specified bit-for-bit, so a given seed and call
/// sequence yields identical draws on every platform.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform index in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn inner_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.inner
    }
}
