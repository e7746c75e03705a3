use crate::error::{invalid, Result};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

/// Angular frequency of the sine/cosine pair starting at column `2i`.
pub fn pe_frequency(i: usize, d_model: usize) -> f64 {
    1.0 / 10000f64.powf((2 * i) as f64 / d_model as f64)
}

/// Sinusoidal encodings for positions `0..n`: even columns take the sine,
/// odd columns the cosine of `pos * omega_i`.
pub fn sinusoidal_pe<T: Scalar>(n: usize, d_model: usize) -> Result<Matrix<T>> {
    if n == 0 {
        return Err(invalid("sinusoidal_pe needs at least one position"));
    }
    if d_model == 0 || d_model % 2 != 0 {
        return Err(invalid(format!("sinusoidal_pe needs an even d_model, got {d_model}")));
    }
    let freqs: Vec<f64> = (0..d_model / 2).map(|i| pe_frequency(i, d_model)).collect();
    Ok(Matrix::from_fn(n, d_model, |pos, c| {
        let angle = pos as f64 * freqs[c / 2];
        T::lit(if c % 2 == 0 { angle.sin() } else { angle.cos() })
    }))
}

/// Block-diagonal matrix `R_k` with `PE[pos + k] = PE[pos] * R_k` (row
/// vectors) for every position: one 2x2 rotation by `omega_i * k` per pair.
pub fn pe_offset_matrix<T: Scalar>(k: i64, d_model: usize) -> Result<Matrix<T>> {
    if d_model == 0 || d_model % 2 != 0 {
        return Err(invalid(format!("pe_offset_matrix needs an even d_model, got {d_model}")));
    }
    let mut r = Matrix::zeros(d_model, d_model);
    for i in 0..d_model / 2 {
        let theta = pe_frequency(i, d_model) * k as f64;
        let (s, c) = theta.sin_cos();
        let (a, b) = (2 * i, 2 * i + 1);
        r[(a, a)] = T::lit(c);
        r[(b, a)] = T::lit(s);
        r[(a, b)] = T::lit(-s);
        r[(b, b)] = T::lit(c);
    }
    Ok(r)
}
