//! Deterministic dense-math kernel shared by every other module.

mod matrix;
mod prng;

pub use matrix::{
    floored_ln, matmul, matmul_transposed, mean_over, softmax_rows, Axis, Matrix, LOG_FLOOR,
};
pub(crate) use matrix::softmax_in_place;
pub use prng::Prng;
