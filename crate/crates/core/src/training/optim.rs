use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::transformer::params::ModelParams;

/// Adam moments, aligned name for name with the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    /// Completed steps.
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ModelParams<T>, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(invalid("Adam betas must lie in [0, 1)"));
        }
        if !(eps > 0.0) {
            return Err(invalid("Adam eps must be positive"));
        }
        Ok(Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            beta1,
            beta2,
            eps,
        })
    }
}

/// One bias-corrected Adam update with learning rate `lr`.
///
/// With `decoupled` the decay enters as a separate `-lr * weight_decay * theta`
/// term; otherwise `weight_decay * theta` is added to the gradient before the
/// moments see it.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    weight_decay: f64,
    decoupled: bool,
) -> Result<()> {
    params.check_aligned(grads)?;
    params.check_aligned(&state.m)?;
    params.check_aligned(&state.v)?;
    state.t += 1;
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let (one, eps, lr_t, wd) = (T::one(), T::lit(state.eps), T::lit(lr), T::lit(weight_decay));
    let t = state.t as i32;
    let c1 = one - b1.powi(t);
    let c2 = one - b2.powi(t);
    let mats = params
        .matrices_mut()
        .into_iter()
        .zip(grads.matrices())
        .zip(state.m.matrices_mut().into_iter().zip(state.v.matrices_mut()));
    for ((p, g), (m, v)) in mats {
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut()));
        for ((theta, &g), (m, v)) in it {
            let g = if decoupled { g } else { g + wd * *theta };
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let step = lr_t * (*m / c1) / ((*v / c2).sqrt() + eps);
            let decay = if decoupled { lr_t * wd * *theta } else { T::zero() };
            *theta = *theta - step - decay;
        }
    }
    Ok(())
}

/// Rescales the whole gradient tree so its global norm is at most
/// `threshold`. Returns the norm before clipping.
pub fn clip_gradients<T: Scalar>(grads: &mut ModelParams<T>, threshold: f64) -> Result<T> {
    if !(threshold > 0.0) {
        return Err(invalid(format!("clip threshold must be positive, got {threshold}")));
    }
    let norm = grads.global_norm();
    let theta = T::lit(threshold);
    if norm > theta {
        let s = theta / norm;
        for m in grads.matrices_mut() {
            m.scale_in_place(s);
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::transformer::config::ModelConfig;
    use proptest::prelude::*;

    fn tiny() -> ModelParams<f64> {
        let cfg = ModelConfig {
            vocab_size: 5,
            d_model: 2,
            heads: 1,
            d_ff: 3,
            n_layers: 1,
            max_len: 4,
            ..ModelConfig::default()
        };
        ModelParams::init(&cfg, &mut Rng::seed(9)).unwrap()
    }

    fn fill(p: &mut ModelParams<f64>, mut f: impl FnMut(f64) -> f64) {
        for m in p.matrices_mut() {
            m.data_mut().iter_mut().for_each(|x| *x = f(*x));
        }
    }

    fn flat(p: &ModelParams<f64>) -> Vec<f64> {
        p.matrices().iter().flat_map(|m| m.data().to_vec()).collect()
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = tiny();
        let before = flat(&p);
        let mut g = p.zeros_like();
        fill(&mut g, |_| 1.0);
        let mut s = OptimizerState::new(&p, 0.9, 0.999, 1e-8).unwrap();
        adam_step(&mut p, &g, &mut s, 0.1, 0.0, true).unwrap();
        for (a, b) in flat(&p).iter().zip(&before) {
            assert!((a - b + 0.1).abs() < 1e-8);
        }
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op_but_counts() {
        let mut p = tiny();
        let before = flat(&p);
        let g = p.zeros_like();
        let mut s = OptimizerState::new(&p, 0.9, 0.999, 1e-8).unwrap();
        for _ in 0..3 {
            adam_step(&mut p, &g, &mut s, 0.1, 0.0, false).unwrap();
        }
        assert_eq!(flat(&p), before);
        assert_eq!(s.t, 3);
    }

    // Plain transcription of the update for one scalar, written without the
    // tree machinery.
    fn scalar_adam(theta0: f64, steps: usize, lr: f64, wd: f64, decoupled: bool) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let (mut th, mut m, mut v) = (theta0, 0.0f64, 0.0f64);
        let mut out = Vec::new();
        for t in 1..=steps {
            let mut g = 2.0 * (th - 3.0);
            if !decoupled {
                g += wd * th;
            }
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            let mut next = th - lr * mh / (vh.sqrt() + eps);
            if decoupled {
                next -= lr * wd * th;
            }
            th = next;
            out.push(th);
        }
        out
    }

    #[test]
    fn quadratic_trajectory_matches_scalar_reference() {
        for (wd, decoupled) in [(0.0, true), (0.01, true), (0.01, false)] {
            let mut p = tiny();
            let start = flat(&p);
            let mut s = OptimizerState::new(&p, 0.9, 0.999, 1e-8).unwrap();
            let refs: Vec<Vec<f64>> = start.iter().map(|&x| scalar_adam(x, 3, 0.05, wd, decoupled)).collect();
            for step in 0..3 {
                let mut g = p.clone();
                fill(&mut g, |x| 2.0 * (x - 3.0));
                adam_step(&mut p, &g, &mut s, 0.05, wd, decoupled).unwrap();
                for (x, r) in flat(&p).iter().zip(&refs) {
                    assert!((x - r[step]).abs() <= 1e-12, "{x} vs {}", r[step]);
                }
            }
        }
    }

    // Starting from zero keeps the subtraction exact, so the comparison can
    // be bitwise.
    #[test]
    fn halving_lr_halves_first_displacement() {
        let base = tiny().zeros_like();
        let mut g = base.zeros_like();
        let mut rng = Rng::seed(2);
        fill(&mut g, |_| rng.normal());
        let disp = |lr: f64| {
            let mut p = base.clone();
            let mut s = OptimizerState::new(&p, 0.9, 0.999, 1e-8).unwrap();
            adam_step(&mut p, &g, &mut s, lr, 0.0, true).unwrap();
            flat(&p).iter().zip(flat(&base)).map(|(a, b)| a - b).collect::<Vec<_>>()
        };
        let (full, half) = (disp(0.08), disp(0.04));
        for (f, h) in full.iter().zip(&half) {
            assert_eq!(f * 0.5, *h);
        }
    }

    #[test]
    fn misaligned_trees_rejected() {
        let mut p = tiny();
        let other_cfg = ModelConfig {
            vocab_size: 6,
            d_model: 2,
            heads: 1,
            d_ff: 3,
            n_layers: 1,
            max_len: 4,
            ..ModelConfig::default()
        };
        let g = ModelParams::<f64>::init(&other_cfg, &mut Rng::seed(1)).unwrap();
        let mut s = OptimizerState::new(&p, 0.9, 0.999, 1e-8).unwrap();
        assert!(matches!(
            adam_step(&mut p, &g, &mut s, 0.1, 0.0, true),
            Err(crate::error::Error::KeyMismatch(_))
        ));
        assert_eq!(s.t, 0);
        assert!(OptimizerState::new(&p, 1.0, 0.9, 1e-8).is_err());
    }

    #[test]
    fn clip_examples() {
        let mut g = tiny().zeros_like();
        g.output_projection.data_mut()[0] = 3.0;
        g.output_projection.data_mut()[1] = 4.0;
        assert_eq!(clip_gradients(&mut g, 1.0).unwrap(), 5.0);
        assert!((g.output_projection.data()[0] - 0.6).abs() < 1e-15);
        assert!((g.output_projection.data()[1] - 0.8).abs() < 1e-15);

        let mut g = tiny().zeros_like();
        g.output_projection.data_mut()[0] = 0.3;
        g.output_projection.data_mut()[1] = 0.4;
        let before = g.clone();
        assert_eq!(clip_gradients(&mut g, 1.0).unwrap(), 0.5);
        assert_eq!(g.matrices(), before.matrices());
        assert!(clip_gradients(&mut g, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn clipped_norm_is_min_of_norm_and_threshold(seed in any::<u64>(), scale in 0.01f64..10.0, theta in 0.1f64..5.0) {
            let mut g = tiny();
            let mut rng = Rng::seed(seed);
            fill(&mut g, |_| scale * rng.normal());
            let before = g.clone();
            let pre = clip_gradients(&mut g, theta).unwrap();
            prop_assert!((g.global_norm() - pre.min(theta)).abs() <= 1e-12);
            // Direction is kept: every entry scaled by one common factor.
            let k = g.global_norm() / pre;
            for (a, b) in flat(&g).iter().zip(flat(&before)) {
                prop_assert!((a - k * b).abs() <= 1e-12);
            }
        }
    }
}
