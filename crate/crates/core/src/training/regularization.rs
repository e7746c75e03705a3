use crate::error::{invalid, Result};
use crate::numerics::{Matrix, Rng};
use crate::scalar::Scalar;

fn check_p(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(invalid(format!("dropout probability must lie in [0, 1), got {p}")));
    }
    Ok(())
}

/// Inverted dropout. Returns the masked input and the 0/1 keep mask.
///
/// In training mode each entry is zeroed with probability `p` and survivors
/// are scaled by `1 / (1 - p)`. In evaluation mode the input is returned
/// unchanged with a mask of ones.
pub fn dropout_apply<T: Scalar>(
    x: &Matrix<T>,
    p: f64,
    rng: &mut Rng,
    train_mode: bool,
) -> Result<(Matrix<T>, Matrix<T>)> {
    check_p(p)?;
    if !train_mode || p == 0.0 {
        return Ok((x.clone(), Matrix::filled(x.rows(), x.cols(), T::one())));
    }
    let (out, mask) = sample(x, p, rng);
    Ok((out, mask))
}

fn sample<T: Scalar>(x: &Matrix<T>, p: f64, rng: &mut Rng) -> (Matrix<T>, Matrix<T>) {
    let keep_scale = T::lit(1.0 / (1.0 - p));
    let mut out = x.clone();
    let mut mask = Matrix::zeros(x.rows(), x.cols());
    for (o, m) in out.data_mut().iter_mut().zip(mask.data_mut()) {
        if rng.uniform() < p {
            *o = T::zero();
        } else {
            *m = T::one();
            *o *= keep_scale;
        }
    }
    (out, mask)
}

/// Dropout state threaded through a forward pass.
pub struct DropoutCtx<'a> {
    pub rng: &'a mut Rng,
    pub train: bool,
}

impl DropoutCtx<'_> {
    /// Applies dropout in place; returns the keep mask only when something
    /// could have been dropped.
    pub(crate) fn apply<T: Scalar>(&mut self, x: &mut Matrix<T>, p: f64) -> Option<Matrix<T>> {
        if !self.train || p == 0.0 {
            return None;
        }
        let (out, mask) = sample(x, p, self.rng);
        *x = out;
        Some(mask)
    }
}

/// Backward of inverted dropout: `mask * upstream / (1 - p)`.
pub fn dropout_backward<T: Scalar>(upstream: &Matrix<T>, mask: &Matrix<T>, p: f64) -> Result<Matrix<T>> {
    let mut g = upstream.hadamard(mask)?;
    g.scale_in_place(T::lit(1.0 / (1.0 - p)));
    Ok(g)
}

pub(crate) fn backward_opt<T: Scalar>(upstream: Matrix<T>, mask: Option<&Matrix<T>>, p: f64) -> Matrix<T> {
    match mask {
        Some(m) => dropout_backward(&upstream, m, p).expect("mask recorded with matching shape"),
        None => upstream,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_probability_and_eval_are_identity() {
        let mut rng = Rng::seed(1);
        let x = Matrix::<f64>::from_fn(3, 4, |r, c| (r * 4 + c) as f64);
        let (y, m) = dropout_apply(&x, 0.0, &mut rng, true).unwrap();
        assert_eq!(y, x);
        assert!(m.data().iter().all(|&v| v == 1.0));
        let (y, m) = dropout_apply(&x, 0.7, &mut rng, false).unwrap();
        assert_eq!(y, x);
        assert!(m.data().iter().all(|&v| v == 1.0));
        assert!(dropout_apply(&x, 1.0, &mut rng, true).is_err());
        assert!(dropout_apply(&x, -0.1, &mut rng, true).is_err());
    }

    #[test]
    fn inverted_dropout_is_unbiased() {
        let x = Matrix::<f64>::filled(1000, 1000, 1.0);
        let (y, mask) = dropout_apply(&x, 0.5, &mut Rng::seed(99), true).unwrap();
        let mean = y.sum() / 1e6;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        for (v, m) in y.data().iter().zip(mask.data()) {
            assert!((*m == 0.0 && *v == 0.0) || (*m == 1.0 && *v == 2.0));
        }
    }

    #[test]
    fn backward_reuses_the_mask() {
        let x = Matrix::<f64>::filled(4, 5, 3.0);
        let (_, mask) = dropout_apply(&x, 0.25, &mut Rng::seed(3), true).unwrap();
        let up = Matrix::filled(4, 5, 1.0);
        let a = dropout_backward(&up, &mask, 0.25).unwrap();
        let b = dropout_backward(&up, &mask, 0.25).unwrap();
        assert_eq!(a, b);
        for (g, m) in a.data().iter().zip(mask.data()) {
            assert_eq!(*g, m / 0.75);
        }
    }
}
