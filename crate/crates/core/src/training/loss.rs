use crate::error::{invalid, Error, Result};
use crate::numerics::Matrix;
use crate::scalar::Scalar;
use crate::transformer::config::PAD;

/// Smoothed target distribution: `1 - eps + eps / V` on the true class and
/// `eps / V` elsewhere.
pub fn smoothed_target<T: Scalar>(target: usize, vocab: usize, eps: f64) -> Result<Vec<T>> {
    if target >= vocab {
        return Err(Error::TokenOutOfRange { token: target, vocab });
    }
    check_eps(eps)?;
    let off = eps / vocab as f64;
    let mut row = vec![T::lit(off); vocab];
    row[target] = T::lit(1.0 - eps + off);
    Ok(row)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(0.0..1.0).contains(&eps) {
        return Err(invalid(format!("label smoothing must lie in [0, 1), got {eps}")));
    }
    Ok(())
}

/// Label-smoothed cross-entropy averaged over non-PAD targets.
///
/// Returns the loss and its gradient with respect to the logits,
/// `(softmax(z) - q) / count` on counted rows and zero on PAD rows.
pub fn cross_entropy<T: Scalar>(logits: &Matrix<T>, targets: &[usize], eps: f64) -> Result<(T, Matrix<T>)> {
    check_eps(eps)?;
    let (m, vocab) = logits.shape();
    if targets.len() != m {
        return Err(invalid(format!("{} targets for {m} logit rows", targets.len())));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= vocab) {
        return Err(Error::TokenOutOfRange { token: t, vocab });
    }
    let mut grad = Matrix::zeros(m, vocab);
    let count = targets.iter().filter(|&&t| t != PAD).count();
    if count == 0 {
        return Ok((T::zero(), grad));
    }
    let inv_count = T::one() / T::lit(count as f64);
    let off = T::lit(eps / vocab as f64);
    let on = T::lit(1.0 - eps) + off;
    let mut total = T::zero();
    for (r, &y) in targets.iter().enumerate() {
        if y == PAD {
            continue;
        }
        let z = logits.row(r);
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = z.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        let g = grad.row_mut(r);
        for (v, (&zv, gv)) in z.iter().zip(g.iter_mut()).enumerate() {
            let q = if v == y { on } else { off };
            total -= q * (zv - lse);
            *gv = ((zv - max).exp() / sum - q) * inv_count;
        }
    }
    Ok((total * inv_count, grad))
}
