//! Multi-head attention via combined projections and contiguous column-block
//! head slicing.
//!
//! The forward pass projects once with `d_model x d_model` matrices, views
//! the projection as `h` column blocks of width `d_model / h`, attends per
//! head, concatenates and projects by `W^O`. Several independent sequences
//! may be stacked row-wise; each [`Segment`] attends only within itself.

use crate::attention::{masked_scores, Mask};
use crate::error::{invalid, Error, Result};
use crate::numerics::{matmul, stable_softmax_rows_in_place, Matrix, Rng};
use crate::scalar::Scalar;
use crate::training::regularization::DropoutCtx;

/// Combined projections for `heads` heads of width `d_model / heads`.
#[derive(Debug, Clone, PartialEq)]
pub struct MhaParams<T> {
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub heads: usize,
}

impl<T: Scalar> MhaParams<T> {
    pub fn new(wq: Matrix<T>, wk: Matrix<T>, wv: Matrix<T>, wo: Matrix<T>, heads: usize) -> Result<Self> {
        let p = Self { wq, wk, wv, wo, heads };
        p.validate()?;
        Ok(p)
    }

    /// Normal init with std `1 / sqrt(fan_in)`.
    pub fn init(d_model: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        let std = 1.0 / (d_model as f64).sqrt();
        let mut w = || crate::numerics::gaussian_fill(rng, d_model, d_model, 0.0, std);
        let (wq, wk, wv, wo) = (w()?, w()?, w()?, w()?);
        Self::new(wq, wk, wv, wo, heads)
    }

    /// Same weights in another scalar type.
    pub fn cast<U: Scalar>(&self) -> MhaParams<U> {
        MhaParams {
            wq: self.wq.cast(),
            wk: self.wk.cast(),
            wv: self.wv.cast(),
            wo: self.wo.cast(),
            heads: self.heads,
        }
    }

    pub fn d_model(&self) -> usize {
        self.wq.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model() / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.wq.rows();
        if self.heads == 0 || d % self.heads != 0 {
            return Err(invalid(format!("d_model {d} is not divisible by {} heads", self.heads)));
        }
        for (name, w) in [("W^Q", &self.wq), ("W^K", &self.wk), ("W^V", &self.wv), ("W^O", &self.wo)] {
            if w.shape() != (d, d) {
                return Err(invalid(format!("{name} must be {d}x{d}, got {:?}", w.shape())));
            }
        }
        Ok(())
    }
}

/// Output rows and one retained weight matrix per head.
#[derive(Debug, Clone, PartialEq)]
pub struct MhaResult<T> {
    pub output: Matrix<T>,
    pub head_weights: Vec<Matrix<T>>,
}

/// A contiguous run of rows belonging to one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    /// Back-to-back segments with the given lengths.
    pub fn from_lengths(lengths: impl IntoIterator<Item = usize>) -> Vec<Segment> {
        let mut start = 0;
        lengths
            .into_iter()
            .map(|len| {
                let s = Segment { start, len };
                start += len;
                s
            })
            .collect()
    }

    pub fn whole(len: usize) -> Vec<Segment> {
        vec![Segment { start: 0, len }]
    }
}

/// Splits `m` into `h` contiguous column blocks.
pub fn split_heads<T: Scalar>(m: &Matrix<T>, h: usize) -> Result<Vec<Matrix<T>>> {
    if h == 0 || m.cols() % h != 0 {
        return Err(invalid(format!("{} columns cannot be split into {h} heads", m.cols())));
    }
    let w = m.cols() / h;
    Ok((0..h).map(|i| m.col_block(i * w, w)).collect())
}

/// Inverse of [`split_heads`].
pub fn merge_heads<T: Scalar>(heads: &[Matrix<T>]) -> Result<Matrix<T>> {
    let first = heads.first().ok_or_else(|| invalid("merge_heads needs at least one head"))?;
    let (rows, w) = first.shape();
    let mut out = Matrix::zeros(rows, w * heads.len());
    for (i, h) in heads.iter().enumerate() {
        if h.shape() != (rows, w) {
            return Err(Error::Shape {
                op: "merge_heads",
                lhs: (rows, w),
                rhs: h.shape(),
            });
        }
        out.set_block(0, i * w, h);
    }
    Ok(out)
}

/// Multi-head attention of one query sequence over one key/value sequence.
pub fn mha_forward<T: Scalar>(
    xq: &Matrix<T>,
    xk: &Matrix<T>,
    xv: &Matrix<T>,
    params: &MhaParams<T>,
    mask: &Mask,
) -> Result<MhaResult<T>> {
    let mut rng = Rng::seed(0);
    let mut ctx = DropoutCtx {
        rng: &mut rng,
        train: false,
    };
    let (output, cache) = mha_forward_cached(
        xq,
        xk,
        xv,
        params,
        &Segment::whole(xq.rows()),
        &Segment::whole(xk.rows()),
        mask,
        0.0,
        &mut ctx,
    )?;
    Ok(MhaResult {
        output,
        head_weights: cache.heads.into_iter().map(|h| h.weights).collect(),
    })
}

/// Per (segment, head) softmax weights and attention-dropout keep mask.
#[derive(Debug, Clone)]
pub(crate) struct HeadCache<T> {
    pub weights: Matrix<T>,
    pub drop_mask: Option<Matrix<T>>,
}

/// Everything the backward pass of one multi-head block needs.
#[derive(Debug, Clone)]
pub(crate) struct MhaCache<T> {
    pub xq: Matrix<T>,
    pub xk: Matrix<T>,
    pub xv: Matrix<T>,
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
    pub concat: Matrix<T>,
    /// Indexed `segment * heads + head`.
    pub heads: Vec<HeadCache<T>>,
    pub q_segs: Vec<Segment>,
    pub kv_segs: Vec<Segment>,
    pub attn_dropout: f64,
}

fn check_segments(segs: &[Segment], rows: usize, what: &str) -> Result<()> {
    let mut next = 0;
    for s in segs {
        if s.start != next || s.len == 0 {
            return Err(invalid(format!("{what} segments must tile the rows contiguously")));
        }
        next += s.len;
    }
    if next != rows {
        return Err(invalid(format!("{what} segments cover {next} rows, input has {rows}")));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn mha_forward_cached<T: Scalar>(
    xq: &Matrix<T>,
    xk: &Matrix<T>,
    xv: &Matrix<T>,
    params: &MhaParams<T>,
    q_segs: &[Segment],
    kv_segs: &[Segment],
    mask: &Mask,
    attn_dropout: f64,
    ctx: &mut DropoutCtx<'_>,
) -> Result<(Matrix<T>, MhaCache<T>)> {
    params.validate()?;
    let d = params.d_model();
    for (name, x) in [("X_q", xq), ("X_k", xk), ("X_v", xv)] {
        if x.cols() != d {
            return Err(invalid(format!("{name} has width {}, expected d_model = {d}", x.cols())));
        }
    }
    if xk.rows() != xv.rows() {
        return Err(Error::Shape {
            op: "mha_forward (X_k vs X_v)",
            lhs: xk.shape(),
            rhs: xv.shape(),
        });
    }
    check_segments(q_segs, xq.rows(), "query")?;
    check_segments(kv_segs, xk.rows(), "key/value")?;
    if q_segs.len() != kv_segs.len() {
        return Err(invalid("query and key/value segment counts differ"));
    }

    let q = matmul(xq, &params.wq)?;
    let k = matmul(xk, &params.wk)?;
    let v = matmul(xv, &params.wv)?;
    let h = params.heads;
    let dh = params.head_dim();
    let mut concat = Matrix::zeros(xq.rows(), d);
    let mut heads = Vec::with_capacity(q_segs.len() * h);
    for (qs, ks) in q_segs.iter().zip(kv_segs) {
        mask.validate(qs.len, ks.len)?;
        for head in 0..h {
            let qh = q.block(qs.start, qs.len, head * dh, dh);
            let kh = k.block(ks.start, ks.len, head * dh, dh);
            let vh = v.block(ks.start, ks.len, head * dh, dh);
            let mut weights = masked_scores(&qh, &kh, mask, true)?;
            stable_softmax_rows_in_place(&mut weights);
            let (out, drop_mask) = if ctx.train && attn_dropout > 0.0 {
                let mut dropped = weights.clone();
                let m = ctx.apply(&mut dropped, attn_dropout);
                (matmul(&dropped, &vh)?, m)
            } else {
                (matmul(&weights, &vh)?, None)
            };
            concat.set_block(qs.start, head * dh, &out);
            heads.push(HeadCache { weights, drop_mask });
        }
    }
    let output = matmul(&concat, &params.wo)?;
    let cache = MhaCache {
        xq: xq.clone(),
        xk: xk.clone(),
        xv: xv.clone(),
        q,
        k,
        v,
        concat,
        heads,
        q_segs: q_segs.to_vec(),
        kv_segs: kv_segs.to_vec(),
        attn_dropout,
    };
    Ok((output, cache))
}

/// Matmul FLOPs (two per multiply-add) of one multi-head attention block
/// with `n_q` queries over `n_kv` keys. Softmax and scaling are excluded.
pub fn mha_flops(n_q: usize, n_kv: usize, d_model: usize, heads: usize) -> u64 {
    let (nq, nkv, d, h) = (n_q as u64, n_kv as u64, d_model as u64, heads as u64);
    let dh = d / h;
    let projections = 2 * nq * d * d + 2 * 2 * nkv * d * d;
    let attention = h * (2 * nq * nkv * dh + 2 * nq * nkv * dh);
    let output = 2 * nq * d * d;
    projections + attention + output
}
