//! Dense row-major matrices and the handful of primitives the engine is
//! built from.

mod dd;
mod matrix;
mod rng;

pub use matrix::{
    frobenius_norm, gaussian_fill, matmul, matmul_nt, matmul_tn, stable_softmax_rows,
    stable_softmax_rows_in_place, Matrix,
};
pub use dd::DoubleDouble;
pub(crate) use matrix::{gemm_slice, softmax_row_slices};
pub use rng::Rng;
