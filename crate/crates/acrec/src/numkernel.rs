//! Minimal dense numeric kernels: row-major matrices, stable softmax,
//! deterministic top-K, a seedable RNG, Glorot initialization and Adam.
//!
//! Everything runs in f64 so gradient checks can use tight tolerances. All
//! kernels are pure functions over caller-owned buffers; `Rng` is the only
//! stateful type and is single-owner.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Build from explicit rows; every row must have the same length.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        assert!(!rows.is_empty(), "matrix needs at least one row");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix { rows: rows.len(), cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copy column `c` into `out` (columns are strided in row-major order).
    pub fn col_into(&self, c: usize, out: &mut [f64]) {
        assert!(c < self.cols, "column {} out of range for {}x{}", c, self.rows, self.cols);
        assert_eq!(out.len(), self.rows);
        for (r, slot) in out.iter_mut().enumerate() {
            *slot = self.data[r * self.cols + c];
        }
    }

    /// Add `scale * v` to column `c`.
    pub fn col_add(&mut self, c: usize, v: &[f64], scale: f64) {
        assert!(c < self.cols && v.len() == self.rows);
        for (r, &x) in v.iter().enumerate() {
            self.data[r * self.cols + c] += scale * x;
        }
    }

    /// Rank-one update: `self += scale * u vᵀ`.
    pub fn add_outer(&mut self, u: &[f64], v: &[f64], scale: f64) {
        assert_eq!(u.len(), self.rows);
        assert_eq!(v.len(), self.cols);
        for (r, &ur) in u.iter().enumerate() {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            let s = scale * ur;
            for (slot, &vc) in row.iter_mut().zip(v) {
                *slot += s * vc;
            }
        }
    }
}

/// `W x` for an m×n matrix and length-n vector.
pub fn matvec(w: &Matrix, x: &[f64]) -> Vec<f64> {
    assert_eq!(w.cols, x.len(), "matvec: {}x{} applied to vector of length {}", w.rows, w.cols, x.len());
    let mut out = vec![0.0; w.rows];
    for (r, slot) in out.iter_mut().enumerate() {
        let row = &w.data[r * w.cols..(r + 1) * w.cols];
        *slot = row.iter().zip(x).map(|(&a, &b)| a * b).sum();
    }
    out
}

/// `Wᵀ y` for an m×n matrix and length-m vector.
pub fn matvec_t(w: &Matrix, y: &[f64]) -> Vec<f64> {
    assert_eq!(w.rows, y.len(), "matvec_t: {}x{} transposed applied to vector of length {}", w.rows, w.cols, y.len());
    let mut out = vec![0.0; w.cols];
    for (r, &yr) in y.iter().enumerate() {
        let row = &w.data[r * w.cols..(r + 1) * w.cols];
        for (slot, &a) in out.iter_mut().zip(row) {
            *slot += a * yr;
        }
    }
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax with max-subtraction. Rejects non-finite logits.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logit at index {bad}")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// `log(Σ exp(x_i))`, stable under large magnitudes.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Indices of the K largest scores, descending; ties broken by ascending
/// index so rankings are deterministic.
pub fn topk(scores: &[f64], k: usize) -> Vec<usize> {
    assert!(k <= scores.len(), "topk: K={} exceeds vector length {}", k, scores.len());
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_unstable_by(|&a, &b| {
        scores[b].total_cmp(&scores[a]).then_with(|| a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Deterministic seedable RNG. Identical seed ⇒ identical stream of draws,
/// across platforms and thread counts.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream. Used to decouple e.g. parameter init from
    /// batch shuffling, and to give each synthetic session its own stream.
    pub fn derive(&self, stream: u64) -> Rng {
        // splitmix64 finalizer over (seed, stream)
        let mut z = self.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        Rng::new(z)
    }

    /// Uniform draw in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform draw in [lo, hi).
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.gen_range(0..n)
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        xs.shuffle(&mut self.inner);
    }
}

/// Glorot-uniform matrix: entries from [−s, s] with s = sqrt(6/(rows+cols)).
pub fn glorot_init(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    assert!(rows >= 1 && cols >= 1);
    let s = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.range(-s, s)).collect();
    Matrix { rows, cols, data }
}

/// Adam moment buffers. One (m, v) pair per parameter tensor, aligned by
/// position with the tensor list handed to [`adam_step`].
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(shapes: &[usize]) -> Self {
        AdamState {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }
}

/// One Adam update with bias correction (β1=0.9, β2=0.999, ε=1e-8).
///
/// `params`, `grads` and `names` are parallel lists; `names` only serves
/// error reporting. Gradients are validated before any state is touched, so
/// a failed step leaves parameters and moments unchanged.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    names: &[&str],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    for (i, g) in grads.iter().enumerate() {
        assert_eq!(g.len(), params[i].len(), "adam_step: shape mismatch in {}", names[i]);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in tensor {}", names[i])));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..params.len() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..params[i].len() {
            let g = grads[i][j];
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            params[i][j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}
