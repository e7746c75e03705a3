//! Single-sequence attention: scoring functions, the general attention
//! function, vectorized scaled dot-product attention, masking and entropy.

use crate::error::{invalid, Error, Result};
use crate::numerics::{gemm_slice, matmul, softmax_row_slices, stable_softmax_rows_in_place, Matrix};
use crate::scalar::Scalar;

/// Additive score assigned to disallowed positions before the softmax.
pub const MASK_SCORE: f64 = -1e10;

/// Compatibility function between a query and a key.
#[derive(Debug, Clone, PartialEq)]
pub enum ScoreVariant<T> {
    /// `v_a^T tanh(W_q q + W_k k)`, bias-free.
    Additive {
        wq: Matrix<T>,
        wk: Matrix<T>,
        va: Vec<T>,
    },
    /// Bilinear `q^T W k`.
    Multiplicative { w: Matrix<T> },
    Dot,
    /// `q^T k / sqrt(d_k)`.
    ScaledDot,
}

impl<T: Scalar> ScoreVariant<T> {
    pub fn additive(wq: Matrix<T>, wk: Matrix<T>, va: Vec<T>) -> Result<Self> {
        if wq.rows() != va.len() || wk.rows() != va.len() {
            return Err(invalid(format!(
                "additive scorer needs W_q and W_k with {} rows, got {} and {}",
                va.len(),
                wq.rows(),
                wk.rows()
            )));
        }
        Ok(Self::Additive { wq, wk, va })
    }
}

/// Which key positions each query may attend to.
#[derive(Debug, Clone, PartialEq)]
pub enum Mask {
    None,
    /// Query `i` sees keys `j <= i`.
    Causal,
    /// Row-major `rows x cols` allow-list.
    Explicit {
        rows: usize,
        cols: usize,
        allowed: Vec<bool>,
    },
}

impl Mask {
    pub fn explicit(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(invalid("explicit mask size does not match its dims"));
        }
        Ok(Mask::Explicit {
            rows,
            cols,
            allowed,
        })
    }

    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        match self {
            Mask::None => true,
            Mask::Causal => j <= i,
            Mask::Explicit { cols, allowed, .. } => allowed[i * cols + j],
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, Mask::None)
    }

    /// Checks the mask against an `m x n` score matrix and rejects fully
    /// masked rows.
    pub fn validate(&self, m: usize, n: usize) -> Result<()> {
        if let Mask::Explicit { rows, cols, .. } = self {
            if (*rows, *cols) != (m, n) {
                return Err(Error::Shape {
                    op: "mask",
                    lhs: (*rows, *cols),
                    rhs: (m, n),
                });
            }
        }
        if matches!(self, Mask::None) {
            return Ok(());
        }
        for i in 0..m {
            if !(0..n).any(|j| self.allows(i, j)) {
                return Err(Error::FullyMaskedRow { row: i });
            }
        }
        Ok(())
    }

    /// Adds [`MASK_SCORE`] to every disallowed score.
    pub fn apply<T: Scalar>(&self, scores: &mut Matrix<T>) {
        let cols = scores.cols();
        self.apply_rows(scores.data_mut(), 0, cols);
    }

    /// [`Self::apply`] on a row-major block whose first row is query `row0`.
    pub(crate) fn apply_rows<T: Scalar>(&self, block: &mut [T], row0: usize, cols: usize) {
        if self.is_none() || cols == 0 {
            return;
        }
        let penalty = T::lit(MASK_SCORE);
        for (r, row) in block.chunks_mut(cols).enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                if !self.allows(row0 + r, j) {
                    *x += penalty;
                }
            }
        }
    }
}

/// Output rows together with the retained attention weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionResult<T> {
    pub output: Matrix<T>,
    pub weights: Matrix<T>,
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn mat_vec<T: Scalar>(m: &Matrix<T>, v: &[T]) -> Vec<T> {
    (0..m.rows()).map(|r| dot(m.row(r), v)).collect()
}

fn dim_error(what: &str, a: usize, b: usize) -> Error {
    invalid(format!("{what}: dimension {a} does not match {b}"))
}

/// Scalar compatibility between `q` and `k`.
pub fn score<T: Scalar>(variant: &ScoreVariant<T>, q: &[T], k: &[T]) -> Result<T> {
    match variant {
        ScoreVariant::Additive { wq, wk, va } => {
            if wq.cols() != q.len() {
                return Err(dim_error("additive W_q", wq.cols(), q.len()));
            }
            if wk.cols() != k.len() {
                return Err(dim_error("additive W_k", wk.cols(), k.len()));
            }
            let pq = mat_vec(wq, q);
            let pk = mat_vec(wk, k);
            Ok(pq
                .iter()
                .zip(&pk)
                .zip(va)
                .map(|((&a, &b), &v)| v * (a + b).tanh())
                .sum())
        }
        ScoreVariant::Multiplicative { w } => {
            if w.rows() != q.len() || w.cols() != k.len() {
                return Err(invalid(format!(
                    "bilinear W is {:?}, query {} key {}",
                    w.shape(),
                    q.len(),
                    k.len()
                )));
            }
            Ok(dot(q, &mat_vec(w, k)))
        }
        ScoreVariant::Dot => {
            if q.len() != k.len() {
                return Err(dim_error("dot score", q.len(), k.len()));
            }
            Ok(dot(q, k))
        }
        ScoreVariant::ScaledDot => {
            if q.len() != k.len() {
                return Err(dim_error("scaled dot score", q.len(), k.len()));
            }
            Ok(dot(q, k) / T::lit(k.len() as f64).sqrt())
        }
    }
}

/// Attention of one query over `n` key/value rows: softmax of the scores,
/// then the weighted sum of value rows.
pub fn attention_single<T: Scalar>(
    q: &[T],
    keys: &Matrix<T>,
    values: &Matrix<T>,
    variant: &ScoreVariant<T>,
) -> Result<Vec<T>> {
    let n = keys.rows();
    if n == 0 {
        return Err(invalid("attention over zero keys"));
    }
    if values.rows() != n {
        return Err(Error::Shape {
            op: "attention_single",
            lhs: keys.shape(),
            rhs: values.shape(),
        });
    }
    let mut scores = Matrix::zeros(1, n);
    for j in 0..n {
        scores[(0, j)] = score(variant, q, keys.row(j))?;
    }
    stable_softmax_rows_in_place(&mut scores);
    let mut out = vec![T::zero(); values.cols()];
    for j in 0..n {
        let a = scores[(0, j)];
        for (o, &v) in out.iter_mut().zip(values.row(j)) {
            *o += a * v;
        }
    }
    Ok(out)
}

/// Masked score matrix `Q K^T` (optionally divided by `sqrt(d_k)`).
pub(crate) fn masked_scores<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    mask: &Mask,
    scale: bool,
) -> Result<Matrix<T>> {
    check_qk(q, k)?;
    let mut s = Matrix::zeros(q.rows(), k.rows());
    gemm_slice(score_scale(q.cols(), scale), q.data(), q.cols(), k, true, s.data_mut());
    mask.apply(&mut s);
    Ok(s)
}

fn score_scale<T: Scalar>(d_k: usize, scale: bool) -> T {
    if scale {
        T::one() / T::lit(d_k as f64).sqrt()
    } else {
        T::one()
    }
}

fn check_qk<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>) -> Result<()> {
    if q.cols() != k.cols() {
        return Err(Error::Shape {
            op: "attention (Q vs K)",
            lhs: q.shape(),
            rhs: k.shape(),
        });
    }
    Ok(())
}

/// Score rows held per block in [`attention_batch`]: about 512 KiB of `f64`,
/// small enough that scoring, masking, softmax and the value product of a
/// block all run out of cache.
const BLOCK_ELEMS: usize = 1 << 16;

/// Vectorized attention `softmax(Q K^T / sqrt(d_k) + M) V` for `m` queries
/// over `n` keys.
pub fn attention_batch<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    mask: &Mask,
    scale: bool,
) -> Result<AttentionResult<T>> {
    if q.cols() != k.cols() {
        return Err(Error::Shape {
            op: "attention_batch (Q vs K)",
            lhs: q.shape(),
            rhs: k.shape(),
        });
    }
    if k.rows() != v.rows() {
        return Err(Error::Shape {
            op: "attention_batch (K vs V)",
            lhs: k.shape(),
            rhs: v.shape(),
        });
    }
    if k.rows() == 0 {
        return Err(invalid("attention over zero keys"));
    }
    mask.validate(q.rows(), k.rows())?;
    let (m, n, dv) = (q.rows(), k.rows(), v.cols());
    let alpha = score_scale(q.cols(), scale);
    let mut weights = Matrix::zeros(m, n);
    let mut output = Matrix::zeros(m, dv);
    let block = (BLOCK_ELEMS / n).max(1);
    let mut r0 = 0;
    while r0 < m {
        let rows = block.min(m - r0);
        let w = &mut weights.data_mut()[r0 * n..(r0 + rows) * n];
        let d = q.cols();
        gemm_slice(alpha, &q.data()[r0 * d..(r0 + rows) * d], d, k, true, w);
        mask.apply_rows(w, r0, n);
        softmax_row_slices(w, n);
        gemm_slice(T::one(), w, n, v, false, &mut output.data_mut()[r0 * dv..(r0 + rows) * dv]);
        r0 += rows;
    }
    Ok(AttentionResult { output, weights })
}

/// Self-attention with learned projections `Q = X W^Q`, `K = X W^K`,
/// `V = X W^V`, scaled.
pub fn self_attention<T: Scalar>(
    x: &Matrix<T>,
    wq: &Matrix<T>,
    wk: &Matrix<T>,
    wv: &Matrix<T>,
    mask: &Mask,
) -> Result<AttentionResult<T>> {
    let q = matmul(x, wq)?;
    let k = matmul(x, wk)?;
    let v = matmul(x, wv)?;
    attention_batch(&q, &k, &v, mask, true)
}

/// Per-row natural-log entropy `-sum_j a_ij ln a_ij` with `0 ln 0 = 0`.
pub fn attention_entropy<T: Scalar>(weights: &Matrix<T>) -> Result<Vec<T>> {
    let tol = T::lit(1e-9);
    (0..weights.rows())
        .map(|i| {
            let row = weights.row(i);
            let total: T = row.iter().copied().sum();
            if row.iter().any(|&a| !(a >= -tol)) || (total - T::one()).abs() > tol {
                return Err(Error::NotADistribution { row: i });
            }
            Ok(row
                .iter()
                .filter(|&&a| a > T::zero())
                .map(|&a| -a * a.ln())
                .sum())
        })
        .collect()
}
