//! Dense row-major matrices, numerically stable reductions, and the seeded
//! RNG that every stochastic step in the crate draws from.
//!
//! Everything is 64-bit: the gradient checks elsewhere in the crate need
//! ~1e-6 relative agreement with finite differences, which 32-bit floats
//! cannot deliver. Storage is row-major dense only; problem sizes stay at
//! desk scale (a few thousand samples, a few dozen dimensions).
//!
//! # RNG portability contract
//!
//! Recorded streams (golden files, replayable datasets) must be
//! reproducible by any implementation, so the generator is pinned:
//!
//! * State advances by the splitmix64 recurrence
//!   (`state += 0x9E3779B97F4A7C15`, then the two-round xor-multiply
//!   scramble).
//! * Uniform doubles are `(next_u64() >> 11) * 2^-53`, in `[0, 1)`.
//! * Gaussians use the Marsaglia polar method; each accepted pair yields
//!   exactly one value (the second is discarded), so the state stream
//!   stays a single 64-bit word.
//! * Sub-streams for distinct purposes come from
//!   `mix64(seed ^ fnv1a(tag)) `, optionally folded with an index, where
//!   `mix64` is the splitmix64 output scramble and `fnv1a` is the 64-bit
//!   FNV-1a hash of the tag bytes.

use thiserror::Error;

/// Errors produced by the numeric kernels.
#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{what} contains a non-finite value at row {row}, col {col}")]
    NonFinite {
        what: String,
        row: usize,
        col: usize,
    },
    #[error("{what} must not be empty")]
    Empty { what: String },
    #[error("data length {len} does not match {rows}x{cols}")]
    ShapeMismatch { len: usize, rows: usize, cols: usize },
}

/// Dense row-major matrix of 64-bit reals.
///
/// Shape mismatches between operands are programmer errors and panic;
/// value-level problems (non-finite entries crossing a public boundary)
/// are reported as [`NumericsError`].
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from a row-major buffer, rejecting shape/value violations.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::ShapeMismatch {
                len: data.len(),
                rows,
                cols,
            });
        }
        let m = Matrix { rows, cols, data };
        m.check_finite("matrix")?;
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        if rows.is_empty() {
            return Err(NumericsError::Empty {
                what: "row list".into(),
            });
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `self * other`, (r x k)(k x c) -> (r x c).
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self * other^T`, (r x k)(c x k) -> (r x c).
    pub fn matmul_transpose(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_transpose shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let arow = self.row(i);
            for j in 0..other.rows {
                let brow = other.row(j);
                let mut acc = 0.0;
                for (a, b) in arow.iter().zip(brow) {
                    acc += a * b;
                }
                out.data[i * other.rows + j] = acc;
            }
        }
        out
    }

    /// `self^T * other`, (k x r)(k x c) -> (r x c).
    pub fn transpose_matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "transpose_matmul shape mismatch");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let arow = self.row(k);
            let brow = other.row(k);
            for (i, a) in arow.iter().enumerate() {
                if *a == 0.0 {
                    continue;
                }
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self += scale * other`, element-wise.
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn check_finite(&self, what: &str) -> Result<(), NumericsError> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(NumericsError::NonFinite {
                    what: what.into(),
                    row: i / self.cols.max(1),
                    col: i % self.cols.max(1),
                });
            }
        }
        Ok(())
    }
}

const SPLITMIX_INC: u64 = 0x9E37_79B9_7F4A_7C15;

/// splitmix64 output scramble (no increment); also used for sub-seeding.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a over the tag bytes, used to derive purpose sub-streams.
fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Deterministic splitmix64 stream with documented sub-seeding.
///
/// Two generators constructed with the same seed produce bit-identical
/// streams. Sub-streams derived with the same `(seed, tag)` or
/// `(seed, tag, index)` are likewise identical, regardless of how far the
/// parent has advanced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeededRng {
    seed: u64,
    state: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng { seed, state: seed }
    }

    /// Derive an independent stream for a named purpose.
    pub fn child(&self, tag: &str) -> SeededRng {
        SeededRng::new(mix64(self.seed ^ fnv1a(tag)))
    }

    /// Derive an indexed stream (per sample, per epoch, ...).
    pub fn child_indexed(&self, tag: &str, index: u64) -> SeededRng {
        let folded = mix64(self.seed ^ fnv1a(tag)) ^ index.wrapping_mul(SPLITMIX_INC);
        SeededRng::new(mix64(folded))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(SPLITMIX_INC);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 random mantissa bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + self.next_f64() * (hi - lo)
    }

    /// Uniform integer in `[0, n)` by modulo reduction. The bias is
    /// 2^-64-scale and irrelevant at desk-scale `n`, and the modulo form
    /// keeps the stream trivially portable.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        self.next_u64() % n
    }

    /// Standard normal draw via the Marsaglia polar method. One value per
    /// accepted pair; the companion value is discarded.
    pub fn next_gaussian(&mut self) -> f64 {
        loop {
            let u = 2.0 * self.next_f64() - 1.0;
            let v = 2.0 * self.next_f64() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                return u * (-2.0 * s.ln() / s).sqrt();
            }
        }
    }

    /// Fisher-Yates shuffle, descending index order, using `below`.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// Gamma(shape, 1) via Marsaglia-Tsang squeeze; shapes below one use
    /// the boost `Gamma(shape + 1) * U^{1/shape}`.
    pub fn next_gamma(&mut self, shape: f64) -> f64 {
        assert!(shape > 0.0, "gamma shape must be positive");
        if shape < 1.0 {
            let boost = self.next_gamma(shape + 1.0);
            let mut u = self.next_f64();
            while u == 0.0 {
                u = self.next_f64();
            }
            return boost * u.powf(1.0 / shape);
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (3.0 * d.sqrt());
        loop {
            let x = self.next_gaussian();
            let t = 1.0 + c * x;
            if t <= 0.0 {
                continue;
            }
            let v = t * t * t;
            let u = self.next_f64();
            if u < 1.0 - 0.0331 * x * x * x * x {
                return d * v;
            }
            if u > 0.0 && u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
                return d * v;
            }
        }
    }

    /// Beta(a, b) from two gamma draws.
    pub fn next_beta(&mut self, a: f64, b: f64) -> f64 {
        let x = self.next_gamma(a);
        let y = self.next_gamma(b);
        x / (x + y)
    }

    /// (seed, state) pair for checkpointing.
    pub fn to_parts(&self) -> (u64, u64) {
        (self.seed, self.state)
    }

    pub fn from_parts(seed: u64, state: u64) -> Self {
        SeededRng { seed, state }
    }
}

/// Row-wise softmax with max subtraction.
///
/// Each output row is non-negative and sums to one within 1e-12 for any
/// finite input, including entries of magnitude 1e3 and beyond.
pub fn softmax_rows(m: &Matrix) -> Result<Matrix, NumericsError> {
    m.check_finite("softmax input")?;
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Result of [`l2_normalize_rows`]: the normalized matrix plus a flag per
/// row marking inputs whose norm fell below `eps` and were passed through
/// unchanged.
#[derive(Debug, Clone)]
pub struct NormalizedRows {
    pub matrix: Matrix,
    pub degenerate: Vec<bool>,
}

/// Scale each row to unit Euclidean norm. Rows with norm below `eps` are
/// returned unchanged and flagged rather than treated as fatal.
pub fn l2_normalize_rows(m: &Matrix, eps: f64) -> NormalizedRows {
    assert!(eps > 0.0, "eps must be positive");
    let mut out = m.clone();
    let mut degenerate = vec![false; m.rows()];
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < eps {
            degenerate[r] = true;
            continue;
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    NormalizedRows {
        matrix: out,
        degenerate,
    }
}

/// `ln(sum_i exp(v_i))` with max subtraction. Empty input is rejected.
pub fn log_sum_exp(v: &[f64]) -> Result<f64, NumericsError> {
    if v.is_empty() {
        return Err(NumericsError::Empty {
            what: "log_sum_exp input".into(),
        });
    }
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        // All entries -inf (or a NaN slipped in); -inf terms alone sum to 0.
        return Err(NumericsError::NonFinite {
            what: "log_sum_exp input".into(),
            row: 0,
            col: 0,
        });
    }
    let sum: f64 = v.iter().map(|x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

/// `log_sum_exp` over entries that may legitimately be -inf (vanished
/// terms contribute zero weight; at least one entry must be finite).
pub(crate) fn log_sum_exp_allow_neg_inf(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    debug_assert!(max.is_finite());
    let sum: f64 = v
        .iter()
        .map(|x| if *x == f64::NEG_INFINITY { 0.0 } else { (x - max).exp() })
        .sum();
    max + sum.ln()
}
