//! SplitMix64 generator with Box–Muller Gaussians.
//!
//! The stream is fully specified so that traces can be reproduced by other
//! implementations:
//!
//! * `next_u64`: `state += 0x9E3779B97F4A7C15`, then the SplitMix64 finalizer.
//! * `next_uniform`: top 53 bits of `next_u64`, scaled by `2^-53`, in `[0, 1)`.
//! * `next_gaussian`: draws `u1`, then `u2`, and returns
//!   `sqrt(-2 ln(1 - u1)) * cos(2π u2)`. One Gaussian per two uniforms, no
//!   caching of the sine branch. `ln` and `cos` come from `libm` so the result
//!   does not depend on the platform math library.

use super::Matrix;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prng {
    state: u64,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    #[inline]
    pub fn next_uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = self.next_uniform();
        let u2 = self.next_uniform();
        let radius = (-2.0 * libm::log(1.0 - u1)).sqrt();
        radius * libm::cos(std::f64::consts::TAU * u2)
    }

    /// A `rows x cols` matrix of independent standard normals, filled row-major.
    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.next_gaussian())
    }
}
