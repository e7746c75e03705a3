use crate::error::{invalid, Error, Result};
use crate::numerics::{matmul, Matrix, Rng};
use crate::scalar::Scalar;
use crate::training::regularization::DropoutCtx;
use crate::transformer::config::{Activation, NormPlacement};
use crate::transformer::params::{FfnParams, LayerNormParams};

/// Normalizes `x` to zero mean and unit population variance, then applies
/// the gain `gamma` and bias `beta`.
pub fn layer_norm<T: Scalar>(x: &[T], gamma: &[T], beta: &[T], eps: f64) -> Result<Vec<T>> {
    if gamma.len() != x.len() || beta.len() != x.len() {
        return Err(invalid(format!(
            "layer_norm lengths differ: x {}, gamma {}, beta {}",
            x.len(),
            gamma.len(),
            beta.len()
        )));
    }
    if x.is_empty() {
        return Err(invalid("layer_norm of an empty vector"));
    }
    if !(eps > 0.0) {
        return Err(invalid(format!("layer_norm eps must be positive, got {eps}")));
    }
    let mut out = vec![T::zero(); x.len()];
    let _ = normalize_row(x, gamma, beta, T::lit(eps), &mut out);
    Ok(out)
}

/// Writes the normalized row into `out`; returns `1 / sqrt(var + eps)`.
fn normalize_row<T: Scalar>(x: &[T], gamma: &[T], beta: &[T], eps: T, out: &mut [T]) -> T {
    let d = T::lit(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / d;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
    let inv_std = T::one() / (var + eps).sqrt();
    for i in 0..x.len() {
        out[i] = gamma[i] * (x[i] - mean) * inv_std + beta[i];
    }
    inv_std
}

/// Values kept from a row-wise layer norm for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LnCache<T> {
    /// Normalized input before gain and bias.
    pub xhat: Matrix<T>,
    pub inv_std: Vec<T>,
}

/// Layer norm applied independently to each row.
pub fn layer_norm_rows<T: Scalar>(x: &Matrix<T>, ln: &LayerNormParams<T>, eps: f64) -> Result<Matrix<T>> {
    Ok(layer_norm_rows_cached(x, ln, eps)?.0)
}

pub(crate) fn layer_norm_rows_cached<T: Scalar>(
    x: &Matrix<T>,
    ln: &LayerNormParams<T>,
    eps: f64,
) -> Result<(Matrix<T>, LnCache<T>)> {
    let d = x.cols();
    if ln.gamma.shape() != (1, d) || ln.beta.shape() != (1, d) {
        return Err(Error::Shape {
            op: "layer_norm (x vs gamma)",
            lhs: x.shape(),
            rhs: ln.gamma.shape(),
        });
    }
    let ones = vec![T::one(); d];
    let zeros = vec![T::zero(); d];
    let eps = T::lit(eps);
    let mut xhat = Matrix::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        inv_std.push(normalize_row(x.row(r), &ones, &zeros, eps, xhat.row_mut(r)));
    }
    let (g, b) = (ln.gamma.row(0), ln.beta.row(0));
    let mut out = xhat.clone();
    for r in 0..out.rows() {
        for (c, v) in out.row_mut(r).iter_mut().enumerate() {
            *v = g[c] * *v + b[c];
        }
    }
    Ok((out, LnCache { xhat, inv_std }))
}

/// Pointwise nonlinearity.
pub fn activate<T: Scalar>(act: Activation, x: T) -> T {
    match act {
        Activation::Relu => x.max(T::zero()),
        Activation::Gelu => x * std_normal_cdf(x),
        Activation::Swish { beta } => x * sigmoid(T::lit(beta) * x),
    }
}

/// Derivative of [`activate`]. ReLU takes slope zero at the kink.
pub fn activate_grad<T: Scalar>(act: Activation, x: T) -> T {
    match act {
        Activation::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Activation::Gelu => {
            let pdf = (-(x * x) / T::lit(2.0)).exp() / T::lit((2.0 * std::f64::consts::PI).sqrt());
            std_normal_cdf(x) + x * pdf
        }
        Activation::Swish { beta } => {
            let b = T::lit(beta);
            let s = sigmoid(b * x);
            s + b * x * s * (T::one() - s)
        }
    }
}

fn std_normal_cdf<T: Scalar>(x: T) -> T {
    T::lit(0.5) * (T::one() + (x / T::lit(std::f64::consts::SQRT_2)).erf())
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Feed-forward network on a single position.
pub fn ffn_forward<T: Scalar>(x: &[T], params: &FfnParams<T>, act: Activation) -> Result<Vec<T>> {
    Ok(ffn_rows(&Matrix::row_vector(x), params, act)?.into_vec())
}

/// Intermediate values of [`ffn_rows`] kept for backward.
#[derive(Debug, Clone)]
pub(crate) struct FfnCache<T> {
    pub x: Matrix<T>,
    /// `x W1 + b1`, before the nonlinearity.
    pub pre: Matrix<T>,
    pub hidden: Matrix<T>,
    pub drop_mask: Option<Matrix<T>>,
}

/// Feed-forward network applied to every row independently.
pub fn ffn_rows<T: Scalar>(x: &Matrix<T>, params: &FfnParams<T>, act: Activation) -> Result<Matrix<T>> {
    let mut rng = Rng::seed(0);
    let mut ctx = DropoutCtx { rng: &mut rng, train: false };
    Ok(ffn_rows_cached(x, params, act, 0.0, &mut ctx)?.0)
}

fn check_ffn<T: Scalar>(x: &Matrix<T>, p: &FfnParams<T>) -> Result<()> {
    let (d, f) = p.w1.shape();
    let shape_err = |op, rhs| Error::Shape { op, lhs: x.shape(), rhs };
    if x.cols() != d {
        return Err(shape_err("ffn (x vs W1)", p.w1.shape()));
    }
    if p.b1.shape() != (1, f) {
        return Err(shape_err("ffn (x vs b1)", p.b1.shape()));
    }
    if p.w2.shape() != (f, d) {
        return Err(shape_err("ffn (x vs W2)", p.w2.shape()));
    }
    if p.b2.shape() != (1, d) {
        return Err(shape_err("ffn (x vs b2)", p.b2.shape()));
    }
    Ok(())
}

/// `dropout_p` applies to the hidden activations; the model itself uses zero
/// and drops only sub-layer outputs.
pub(crate) fn ffn_rows_cached<T: Scalar>(
    x: &Matrix<T>,
    params: &FfnParams<T>,
    act: Activation,
    dropout_p: f64,
    ctx: &mut DropoutCtx<'_>,
) -> Result<(Matrix<T>, FfnCache<T>)> {
    check_ffn(x, params)?;
    let mut pre = matmul(x, &params.w1)?;
    pre.add_row_broadcast(&params.b1)?;
    let mut hidden = pre.map(|v| activate(act, v));
    let drop_mask = ctx.apply(&mut hidden, dropout_p);
    let mut out = matmul(&hidden, &params.w2)?;
    out.add_row_broadcast(&params.b2)?;
    Ok((
        out,
        FfnCache {
            x: x.clone(),
            pre,
            hidden,
            drop_mask,
        },
    ))
}

/// Residual sub-layer wrapper.
///
/// Post-norm computes `LN(x + drop(f(x)))`; pre-norm computes
/// `x + drop(f(LN(x)))`. `f` must keep the shape of its input.
#[allow(clippy::too_many_arguments)]
pub fn sublayer<T: Scalar>(
    x: &Matrix<T>,
    f: impl FnOnce(&Matrix<T>) -> Result<Matrix<T>>,
    placement: NormPlacement,
    ln: &LayerNormParams<T>,
    eps: f64,
    dropout_p: f64,
    rng: &mut Rng,
    train_mode: bool,
) -> Result<Matrix<T>> {
    if !(0.0..1.0).contains(&dropout_p) {
        return Err(invalid(format!("dropout probability must lie in [0, 1), got {dropout_p}")));
    }
    let mut ctx = DropoutCtx { rng, train: train_mode };
    let check = |y: &Matrix<T>| {
        if y.shape() != x.shape() {
            Err(Error::Shape {
                op: "sublayer (input vs sub-layer output)",
                lhs: x.shape(),
                rhs: y.shape(),
            })
        } else {
            Ok(())
        }
    };
    match placement {
        NormPlacement::PostNorm => {
            let mut y = f(x)?;
            check(&y)?;
            ctx.apply(&mut y, dropout_p);
            y.add_assign(x)?;
            layer_norm_rows(&y, ln, eps)
        }
        NormPlacement::PreNorm => {
            let mut y = f(&layer_norm_rows(x, ln, eps)?)?;
            check(&y)?;
            ctx.apply(&mut y, dropout_p);
            y.add_assign(x)?;
            Ok(y)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::numerics::Rng;

    #[test]
    fn layer_norm_examples() {
        let y = layer_norm(&[4.0; 5], &[1.0; 5], &[0.0; 5], 1e-6).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
        let y: Vec<f64> = layer_norm(&[1.0, 3.0], &[1.0, 1.0], &[0.0, 0.0], 1e-300).unwrap();
        assert!((y[0] + 1.0).abs() < 1e-12 && (y[1] - 1.0).abs() < 1e-12);
        assert!(layer_norm(&[1.0, 2.0], &[1.0], &[0.0, 0.0], 1e-6).is_err());
        assert!(layer_norm(&[1.0, 2.0], &[1.0; 2], &[0.0; 2], 0.0).is_err());
    }

    #[test]
    fn layer_norm_moments() {
        let mut rng = Rng::seed(4);
        for _ in 0..100 {
            let d = 2 + rng.below(60);
            let x: Vec<f64> = (0..d).map(|_| rng.uniform_in(-5.0, 5.0)).collect();
            let y = layer_norm(&x, &vec![1.0; d], &vec![0.0; d], 1e-6).unwrap();
            let mean = y.iter().sum::<f64>() / d as f64;
            let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let raw_var = {
                let m = x.iter().sum::<f64>() / d as f64;
                x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d as f64
            };
            assert!(mean.abs() < 1e-9);
            // eps shrinks the variance by exactly var / (var + eps)
            assert!((var - raw_var / (raw_var + 1e-6)).abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn gelu_matches_erf_oracle() {
        // x * Phi(x) at x = 1, 30 digits
        assert!((activate(Activation::Gelu, 1.0f64) - 0.841344746068542948585232545632).abs() < 1e-15);
        assert_eq!(activate(Activation::Gelu, 0.0f64), 0.0);
        for x in [-3.0f64, -0.5, 0.2, 2.5] {
            // x Phi(x) - (-x) Phi(-x) = x (Phi(x) + Phi(-x)) = x
            let diff = activate(Activation::Gelu, x) - activate(Activation::Gelu, -x);
            assert!((diff - x).abs() < 1e-14);
        }
    }

    #[test]
    fn activation_derivatives_match_central_differences() {
        let h = 1e-6;
        for act in [Activation::Gelu, Activation::Swish { beta: 1.0 }, Activation::Swish { beta: 1.7 }, Activation::Relu] {
            for x in [-2.3f64, -0.4, 0.3, 1.1, 3.0] {
                let num = (activate(act, x + h) - activate(act, x - h)) / (2.0 * h);
                assert!((num - activate_grad(act, x)).abs() < 1e-8, "{act} at {x}");
            }
        }
    }

    fn identity_ffn(d: usize) -> FfnParams<f64> {
        FfnParams {
            w1: Matrix::identity(d),
            b1: Matrix::zeros(1, d),
            w2: Matrix::identity(d),
            b2: Matrix::zeros(1, d),
        }
    }

    #[test]
    fn ffn_examples() {
        let p = identity_ffn(2);
        assert_eq!(ffn_forward(&[-1.0, 2.0], &p, Activation::Relu).unwrap(), vec![0.0, 2.0]);
        let zero = FfnParams {
            w1: Matrix::zeros(3, 5),
            b1: Matrix::zeros(1, 5),
            w2: Matrix::zeros(5, 3),
            b2: Matrix::zeros(1, 3),
        };
        assert_eq!(ffn_forward(&[1.0, -2.0, 3.0], &zero, Activation::Gelu).unwrap(), vec![0.0; 3]);
        assert!(ffn_forward(&[1.0, 2.0], &zero, Activation::Relu).is_err());
    }

    #[test]
    fn ffn_is_position_wise() {
        let mut rng = Rng::seed(8);
        let p = FfnParams::<f64>::init(6, 10, &mut rng).unwrap();
        let x = crate::numerics::gaussian_fill(&mut rng, 7, 6, 0.0, 1.0).unwrap();
        let perm = rng.permutation(7);
        let a = ffn_rows(&x.permute_rows(&perm), &p, Activation::Gelu).unwrap();
        let b = ffn_rows(&x, &p, Activation::Gelu).unwrap().permute_rows(&perm);
        assert_eq!(a, b);
        for r in 0..7 {
            assert_eq!(ffn_forward(x.row(r), &p, Activation::Gelu).unwrap(), ffn_rows(&x, &p, Activation::Gelu).unwrap().row(r));
        }
    }

    #[test]
    fn sublayer_zero_function() {
        let mut rng = Rng::seed(2);
        let x = crate::numerics::gaussian_fill::<f64>(&mut rng, 4, 6, 0.0, 2.0).unwrap();
        let ln = LayerNormParams::identity(6);
        let zero = |m: &Matrix<f64>| Ok(Matrix::zeros(m.rows(), m.cols()));
        let post = sublayer(&x, zero, NormPlacement::PostNorm, &ln, 1e-6, 0.0, &mut rng, false).unwrap();
        assert_eq!(post, layer_norm_rows(&x, &ln, 1e-6).unwrap());
        let pre = sublayer(&x, zero, NormPlacement::PreNorm, &ln, 1e-6, 0.5, &mut rng, true).unwrap();
        assert_eq!(pre, x);
        let widen = |m: &Matrix<f64>| Ok(Matrix::zeros(m.rows(), m.cols() + 1));
        assert!(sublayer(&x, widen, NormPlacement::PreNorm, &ln, 1e-6, 0.0, &mut rng, false).is_err());
    }

    #[test]
    fn sublayer_matches_composition() {
        let mut rng = Rng::seed(3);
        let p = FfnParams::<f64>::init(6, 12, &mut rng).unwrap();
        let ln = LayerNormParams {
            gamma: crate::numerics::gaussian_fill(&mut rng, 1, 6, 1.0, 0.3).unwrap(),
            beta: crate::numerics::gaussian_fill(&mut rng, 1, 6, 0.0, 0.3).unwrap(),
        };
        let x = crate::numerics::gaussian_fill::<f64>(&mut rng, 5, 6, 0.0, 1.0).unwrap();
        let f = |m: &Matrix<f64>| ffn_rows(m, &p, Activation::Relu);
        let got = sublayer(&x, f, NormPlacement::PostNorm, &ln, 1e-6, 0.0, &mut rng, true).unwrap();
        let want = layer_norm_rows(&x.add(&f(&x).unwrap()).unwrap(), &ln, 1e-6).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
        let got = sublayer(&x, f, NormPlacement::PreNorm, &ln, 1e-6, 0.0, &mut rng, true).unwrap();
        let want = x.add(&f(&layer_norm_rows(&x, &ln, 1e-6).unwrap()).unwrap()).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
    }

    proptest! {
        #[test]
        fn layer_norm_rows_agrees_with_vector_form(seed in 0u64..500, n in 1usize..5, d in 2usize..9) {
            let mut rng = crate::numerics::Rng::seed(seed);
            let x = crate::numerics::gaussian_fill::<f64>(&mut rng, n, d, 0.0, 3.0).unwrap();
            let ln = LayerNormParams {
                gamma: crate::numerics::gaussian_fill(&mut rng, 1, d, 1.0, 0.5).unwrap(),
                beta: crate::numerics::gaussian_fill(&mut rng, 1, d, 0.0, 0.5).unwrap(),
            };
            let rows = layer_norm_rows(&x, &ln, 1e-6).unwrap();
            for r in 0..n {
                let v = layer_norm(x.row(r), ln.gamma.row(0), ln.beta.row(0), 1e-6).unwrap();
                for c in 0..d {
                    prop_assert!((v[c] - rows[(r, c)]).abs() < 1e-13);
                }
            }
        }
    }
}
