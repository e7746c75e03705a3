use crate::attention::{AttentionResult, Mask};
use crate::error::{invalid, Error, Result};
use crate::multihead::{MhaCache, MhaParams};
use crate::numerics::{matmul, matmul_nt, matmul_tn, Matrix, Rng};
use crate::scalar::Scalar;
use crate::training::regularization::{backward_opt, DropoutCtx};
use crate::transformer::config::Activation;
use crate::transformer::layers::{activate_grad, ffn_rows_cached, layer_norm_rows_cached, FfnCache, LnCache};
use crate::transformer::params::{FfnParams, LayerNormParams};

/// Gradient through softmax: `a * (upstream - <a, upstream>)`.
pub fn softmax_backward<T: Scalar>(a: &[T], upstream: &[T]) -> Result<Vec<T>> {
    if a.len() != upstream.len() {
        return Err(invalid(format!(
            "softmax_backward lengths differ: {} vs {}",
            a.len(),
            upstream.len()
        )));
    }
    let inner: T = a.iter().zip(upstream).map(|(&x, &g)| x * g).sum();
    Ok(a.iter().zip(upstream).map(|(&x, &g)| x * (g - inner)).collect())
}

/// Row-wise softmax backward on a weight matrix, in place on `g`.
pub(crate) fn softmax_backward_rows<T: Scalar>(a: &Matrix<T>, g: &mut Matrix<T>) {
    for r in 0..a.rows() {
        let ar = a.row(r);
        let gr = g.row_mut(r);
        let inner: T = ar.iter().zip(gr.iter()).map(|(&x, &y)| x * y).sum();
        for (y, &x) in gr.iter_mut().zip(ar) {
            *y = x * (*y - inner);
        }
    }
}

/// Forward record of one scaled dot-product attention call.
#[derive(Debug, Clone)]
pub struct AttentionTape<T> {
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    weights: Matrix<T>,
    scaled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads<T> {
    pub dq: Matrix<T>,
    pub dk: Matrix<T>,
    pub dv: Matrix<T>,
}

/// [`crate::attention::attention_batch`] that also returns its tape.
pub fn attention_forward<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    mask: &Mask,
    scale: bool,
) -> Result<(AttentionResult<T>, AttentionTape<T>)> {
    let result = crate::attention::attention_batch(q, k, v, mask, scale)?;
    let tape = AttentionTape {
        q: q.clone(),
        k: k.clone(),
        v: v.clone(),
        weights: result.weights.clone(),
        scaled: scale,
    };
    Ok((result, tape))
}

/// Gradients of attention with respect to `Q`, `K` and `V`.
///
/// Masked positions carry zero weight and therefore zero score gradient.
pub fn attention_backward<T: Scalar>(tape: &AttentionTape<T>, upstream: &Matrix<T>) -> Result<AttentionGrads<T>> {
    if upstream.shape() != (tape.q.rows(), tape.v.cols()) {
        return Err(Error::TapeMismatch(format!(
            "upstream {:?} for an attention output of {:?}",
            upstream.shape(),
            (tape.q.rows(), tape.v.cols())
        )));
    }
    let (dq, dk, dv) = attention_core_backward(&tape.q, &tape.k, &tape.v, &tape.weights, None, 0.0, tape.scaled, upstream)?;
    Ok(AttentionGrads { dq, dk, dv })
}

/// Shared core: weights `a` (pre-dropout), optional dropout keep mask.
#[allow(clippy::too_many_arguments)]
fn attention_core_backward<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    a: &Matrix<T>,
    drop_mask: Option<&Matrix<T>>,
    p: f64,
    scaled: bool,
    upstream: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>)> {
    let dv = match drop_mask {
        Some(m) => {
            let mut dropped = a.hadamard(m)?;
            dropped.scale_in_place(T::lit(1.0 / (1.0 - p)));
            matmul_tn(&dropped, upstream)?
        }
        None => matmul_tn(a, upstream)?,
    };
    let mut ds = backward_opt(matmul_nt(upstream, v)?, drop_mask, p);
    softmax_backward_rows(a, &mut ds);
    if scaled {
        ds.scale_in_place(T::one() / T::lit(q.cols() as f64).sqrt());
    }
    let dq = matmul(&ds, k)?;
    let dk = matmul_tn(&ds, q)?;
    Ok((dq, dk, dv))
}

/// Multi-head backward. Accumulates parameter gradients into `grads` and
/// returns the gradients with respect to the query, key and value inputs.
pub(crate) fn mha_backward<T: Scalar>(
    cache: &MhaCache<T>,
    params: &MhaParams<T>,
    upstream: &Matrix<T>,
    grads: &mut MhaParams<T>,
) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>)> {
    let h = params.heads;
    let dh = params.head_dim();
    grads.wo.add_assign(&matmul_tn(&cache.concat, upstream)?)?;
    let dconcat = matmul_nt(upstream, &params.wo)?;
    let mut dq = Matrix::zeros(cache.q.rows(), cache.q.cols());
    let mut dk = Matrix::zeros(cache.k.rows(), cache.k.cols());
    let mut dv = Matrix::zeros(cache.v.rows(), cache.v.cols());
    for (s, (qs, ks)) in cache.q_segs.iter().zip(&cache.kv_segs).enumerate() {
        for head in 0..h {
            let hc = &cache.heads[s * h + head];
            let qh = cache.q.block(qs.start, qs.len, head * dh, dh);
            let kh = cache.k.block(ks.start, ks.len, head * dh, dh);
            let vh = cache.v.block(ks.start, ks.len, head * dh, dh);
            let up = dconcat.block(qs.start, qs.len, head * dh, dh);
            let (gq, gk, gv) = attention_core_backward(
                &qh,
                &kh,
                &vh,
                &hc.weights,
                hc.drop_mask.as_ref(),
                cache.attn_dropout,
                true,
                &up,
            )?;
            dq.set_block(qs.start, head * dh, &gq);
            dk.add_block(ks.start, head * dh, &gk);
            dv.add_block(ks.start, head * dh, &gv);
        }
    }
    grads.wq.add_assign(&matmul_tn(&cache.xq, &dq)?)?;
    grads.wk.add_assign(&matmul_tn(&cache.xk, &dk)?)?;
    grads.wv.add_assign(&matmul_tn(&cache.xv, &dv)?)?;
    Ok((
        matmul_nt(&dq, &params.wq)?,
        matmul_nt(&dk, &params.wk)?,
        matmul_nt(&dv, &params.wv)?,
    ))
}

/// Forward record of a row-wise layer norm.
#[derive(Debug, Clone)]
pub struct LayerNormTape<T> {
    cache: LnCache<T>,
    gamma: Matrix<T>,
}

/// Row-wise layer norm that also returns its tape.
pub fn layer_norm_forward<T: Scalar>(
    x: &Matrix<T>,
    ln: &LayerNormParams<T>,
    eps: f64,
) -> Result<(Matrix<T>, LayerNormTape<T>)> {
    let (y, cache) = layer_norm_rows_cached(x, ln, eps)?;
    Ok((
        y,
        LayerNormTape {
            cache,
            gamma: ln.gamma.clone(),
        },
    ))
}

/// Gradients of a row-wise layer norm with respect to `x`, `gamma`, `beta`.
pub fn layer_norm_backward<T: Scalar>(
    tape: &LayerNormTape<T>,
    upstream: &Matrix<T>,
) -> Result<(Matrix<T>, LayerNormParams<T>)> {
    if upstream.shape() != tape.cache.xhat.shape() {
        return Err(Error::TapeMismatch(format!(
            "upstream {:?} for a layer norm over {:?}",
            upstream.shape(),
            tape.cache.xhat.shape()
        )));
    }
    let mut grads = LayerNormParams {
        gamma: Matrix::zeros(1, upstream.cols()),
        beta: Matrix::zeros(1, upstream.cols()),
    };
    let dx = ln_backward(upstream, &tape.cache, &tape.gamma, &mut grads);
    Ok((dx, grads))
}

/// With `g = dL/dy` and `xhat` the normalized input:
/// `dgamma += sum g * xhat`, `dbeta += sum g`, and with `u = g * gamma`,
/// `dx = inv_std * (u - mean(u) - xhat * mean(u * xhat))`.
pub(crate) fn ln_backward<T: Scalar>(
    upstream: &Matrix<T>,
    cache: &LnCache<T>,
    gamma: &Matrix<T>,
    grads: &mut LayerNormParams<T>,
) -> Matrix<T> {
    let (n, d) = upstream.shape();
    let gamma = gamma.row(0);
    let dn = T::lit(d as f64);
    let mut dx = Matrix::zeros(n, d);
    let mut u = vec![T::zero(); d];
    for r in 0..n {
        let g = upstream.row(r);
        let xh = cache.xhat.row(r);
        {
            let dg = grads.gamma.row_mut(0);
            for c in 0..d {
                dg[c] += g[c] * xh[c];
            }
        }
        {
            let db = grads.beta.row_mut(0);
            for c in 0..d {
                db[c] += g[c];
            }
        }
        let mut mean_u = T::zero();
        let mut mean_ux = T::zero();
        for c in 0..d {
            u[c] = g[c] * gamma[c];
            mean_u += u[c];
            mean_ux += u[c] * xh[c];
        }
        mean_u /= dn;
        mean_ux /= dn;
        let s = cache.inv_std[r];
        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = s * (u[c] - mean_u - xh[c] * mean_ux);
        }
    }
    dx
}

/// Forward record of a position-wise feed-forward network.
#[derive(Debug, Clone)]
pub struct FfnTape<T> {
    cache: FfnCache<T>,
    activation: Activation,
    params: FfnParams<T>,
}

/// [`crate::transformer::ffn_rows`] that also returns its tape.
pub fn ffn_forward_taped<T: Scalar>(
    x: &Matrix<T>,
    params: &FfnParams<T>,
    activation: Activation,
) -> Result<(Matrix<T>, FfnTape<T>)> {
    let mut rng = Rng::seed(0);
    let mut ctx = DropoutCtx { rng: &mut rng, train: false };
    let (y, cache) = ffn_rows_cached(x, params, activation, 0.0, &mut ctx)?;
    Ok((
        y,
        FfnTape {
            cache,
            activation,
            params: params.clone(),
        },
    ))
}

/// Gradients of the feed-forward network with respect to its input and
/// weights.
pub fn ffn_backward<T: Scalar>(tape: &FfnTape<T>, upstream: &Matrix<T>) -> Result<(Matrix<T>, FfnParams<T>)> {
    if upstream.shape() != tape.cache.x.shape() {
        return Err(Error::TapeMismatch(format!(
            "upstream {:?} for a feed-forward output of {:?}",
            upstream.shape(),
            tape.cache.x.shape()
        )));
    }
    let p = &tape.params;
    let mut grads = FfnParams {
        w1: Matrix::zeros(p.w1.rows(), p.w1.cols()),
        b1: Matrix::zeros(1, p.b1.cols()),
        w2: Matrix::zeros(p.w2.rows(), p.w2.cols()),
        b2: Matrix::zeros(1, p.b2.cols()),
    };
    let dx = ffn_backward_acc(&tape.cache, p, tape.activation, 0.0, upstream, &mut grads)?;
    Ok((dx, grads))
}

pub(crate) fn ffn_backward_acc<T: Scalar>(
    cache: &FfnCache<T>,
    params: &FfnParams<T>,
    act: Activation,
    hidden_dropout: f64,
    upstream: &Matrix<T>,
    grads: &mut FfnParams<T>,
) -> Result<Matrix<T>> {
    grads.w2.add_assign(&matmul_tn(&cache.hidden, upstream)?)?;
    grads.b2.add_assign(&upstream.col_sums())?;
    let dhidden = backward_opt(matmul_nt(upstream, &params.w2)?, cache.drop_mask.as_ref(), hidden_dropout);
    let mut dpre = dhidden;
    for (g, &z) in dpre.data_mut().iter_mut().zip(cache.pre.data()) {
        *g *= activate_grad(act, z);
    }
    grads.w1.add_assign(&matmul_tn(&cache.x, &dpre)?)?;
    grads.b1.add_assign(&dpre.col_sums())?;
    matmul_nt(&dpre, &params.w1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian_fill, stable_softmax_rows_in_place};

    #[test]
    fn softmax_backward_examples() {
        let a = [0.2, 0.3, 0.5];
        let g = softmax_backward(&a, &[4.0, 4.0, 4.0]).unwrap();
        assert!(g.iter().all(|v: &f64| v.abs() < 1e-15));
        let g = softmax_backward(&[0.0, 1.0, 0.0], &[1.5, -2.0, 7.0]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(softmax_backward(&a, &[1.0]).is_err());
    }

    #[test]
    fn softmax_backward_matches_explicit_jacobian() {
        let mut rng = Rng::seed(11);
        for _ in 0..50 {
            let n = 1 + rng.below(8);
            let logits: Vec<f64> = (0..n).map(|_| rng.normal() * 2.0).collect();
            let mut a = Matrix::row_vector(&logits);
            stable_softmax_rows_in_place(&mut a);
            let a = a.row(0).to_vec();
            let up: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            // J_jk = a_j (delta_jk - a_k); the gradient is J^T up.
            let mut want = vec![0.0; n];
            for k in 0..n {
                for j in 0..n {
                    let jac = if j == k { a[j] * (1.0 - a[j]) } else { -a[j] * a[k] };
                    want[k] += jac * up[j];
                }
            }
            let got = softmax_backward(&a, &up).unwrap();
            for k in 0..n {
                assert!((got[k] - want[k]).abs() < 1e-12);
            }
            assert!(got.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn attention_backward_trivial_cases() {
        let mut rng = Rng::seed(12);
        let q = gaussian_fill::<f64>(&mut rng, 3, 4, 0.0, 1.0).unwrap();
        let k = gaussian_fill::<f64>(&mut rng, 5, 4, 0.0, 1.0).unwrap();
        let v = gaussian_fill::<f64>(&mut rng, 5, 2, 0.0, 1.0).unwrap();
        let (_, tape) = attention_forward(&q, &k, &v, &Mask::None, true).unwrap();
        let g = attention_backward(&tape, &Matrix::zeros(3, 2)).unwrap();
        assert_eq!(g.dq.max_abs() + g.dk.max_abs() + g.dv.max_abs(), 0.0);
        assert!(matches!(attention_backward(&tape, &Matrix::zeros(2, 2)), Err(Error::TapeMismatch(_))));

        let (q1, k1, v1) = (q.row_block(0, 1), k.row_block(0, 1), v.row_block(0, 1));
        let (_, tape) = attention_forward(&q1, &k1, &v1, &Mask::None, true).unwrap();
        let up = gaussian_fill::<f64>(&mut rng, 1, 2, 0.0, 1.0).unwrap();
        let g = attention_backward(&tape, &up).unwrap();
        assert_eq!(g.dv, up);
        assert_eq!(g.dq.max_abs(), 0.0);
        assert_eq!(g.dk.max_abs(), 0.0);
    }

    #[test]
    fn masked_keys_get_no_gradient() {
        let mut rng = Rng::seed(13);
        let x = gaussian_fill::<f64>(&mut rng, 4, 3, 0.0, 1.0).unwrap();
        let (_, tape) = attention_forward(&x, &x, &x, &Mask::Causal, true).unwrap();
        // The last key is visible only to the last query, which gets no
        // upstream gradient here.
        let mut up = gaussian_fill::<f64>(&mut rng, 4, 3, 0.0, 1.0).unwrap();
        up.row_mut(3).iter_mut().for_each(|v| *v = 0.0);
        let g = attention_backward(&tape, &up).unwrap();
        assert!(g.dk.row(3).iter().all(|&v| v == 0.0));
        assert!(g.dv.row(3).iter().all(|&v| v == 0.0));
        assert!(g.dk.row(2).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn layer_norm_gamma_gradient_is_upstream_times_xhat() {
        let mut rng = Rng::seed(14);
        let x = gaussian_fill::<f64>(&mut rng, 1, 6, 0.0, 2.0).unwrap();
        let ln = LayerNormParams::identity(6);
        let (y, tape) = layer_norm_forward(&x, &ln, 1e-6).unwrap();
        let up = gaussian_fill::<f64>(&mut rng, 1, 6, 0.0, 1.0).unwrap();
        let (_, g) = layer_norm_backward(&tape, &up).unwrap();
        // with gamma = 1 and beta = 0 the output is xhat itself
        assert!(g.gamma.max_abs_diff(&up.hadamard(&y).unwrap()).unwrap() < 1e-15);
        assert_eq!(g.beta, up);
        let (dx, g) = layer_norm_backward(&tape, &Matrix::zeros(1, 6)).unwrap();
        assert_eq!(dx.max_abs() + g.gamma.max_abs() + g.beta.max_abs(), 0.0);
    }

    #[test]
    fn backward_passes_are_repeatable() {
        let mut rng = Rng::seed(15);
        let p = FfnParams::<f64>::init(4, 7, &mut rng).unwrap();
        let x = gaussian_fill::<f64>(&mut rng, 3, 4, 0.0, 1.0).unwrap();
        let (_, tape) = ffn_forward_taped(&x, &p, Activation::Gelu).unwrap();
        let up = gaussian_fill::<f64>(&mut rng, 3, 4, 0.0, 1.0).unwrap();
        assert_eq!(ffn_backward(&tape, &up).unwrap(), ffn_backward(&tape, &up).unwrap());
    }
}
