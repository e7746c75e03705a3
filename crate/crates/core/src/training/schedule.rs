use crate::error::{invalid, Result};

/// Warmup then inverse-square-root decay:
/// `d_model^-0.5 * min(t^-0.5, t * warmup^-1.5)`.
///
/// The two branches meet at `t = warmup`. Steps count from 1.
pub fn lr(t: u64, d_model: usize, warmup_steps: u64) -> Result<f64> {
    if t == 0 {
        return Err(invalid("learning-rate step must be at least 1"));
    }
    if d_model == 0 || warmup_steps == 0 {
        return Err(invalid("d_model and warmup_steps must be positive"));
    }
    let t = t as f64;
    let decay = t.powf(-0.5);
    let warm = t * (warmup_steps as f64).powf(-1.5);
    Ok((d_model as f64).powf(-0.5) * decay.min(warm))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    // References from 50-digit mpmath evaluations of the closed form.
    #[test]
    fn spot_values() {
        assert!(rel(lr(1, 512, 4000).unwrap(), 1.7469281074217107003e-7) < 1e-12);
        assert!(rel(lr(16000, 512, 4000).unwrap(), 3.49385621484342140064e-4) < 1e-12);
        assert!(rel(lr(4000, 512, 4000).unwrap(), 6.98771242968684280128e-4) < 1e-12);
    }

    #[test]
    fn branches_meet_at_warmup() {
        for (d, w) in [(512, 4000), (64, 4000), (128, 8000), (1, 1)] {
            let a = (d as f64).powf(-0.5) * (w as f64).powf(-0.5);
            let b = (d as f64).powf(-0.5) * (w as f64) * (w as f64).powf(-1.5);
            assert!(rel(a, b) <= 1e-15, "{d} {w}");
            assert!(rel(lr(w, d, w).unwrap(), a) <= 1e-15);
        }
    }

    #[test]
    fn rises_then_falls() {
        let w = 400;
        let vals: Vec<f64> = (1..=10 * w).map(|t| lr(t, 64, w).unwrap()).collect();
        let wu = w as usize;
        assert!(vals[..wu].windows(2).all(|p| p[1] > p[0]));
        assert!(vals[wu - 1..].windows(2).all(|p| p[1] < p[0]));
    }

    #[test]
    fn rejects_step_zero() {
        assert!(lr(0, 512, 4000).is_err());
        assert!(lr(1, 0, 4000).is_err());
        assert!(lr(1, 512, 0).is_err());
    }
}
