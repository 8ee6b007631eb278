//! Residual-guided under-sampling pattern optimization for multi-modal MRI.
//!
//! A fully-sampled reference contrast is translated into the target contrast,
//! and the k-space residual of that translation seeds a probabilistic sampling
//! mask. The mask is then refined by gradient descent through a differentiable
//! relaxation of binarization and a zero-filled reconstruction surrogate.
//!
//! Conventions used throughout the crate:
//! - grids are row-major, `(row, col)` indexed;
//! - k-space is DC-centered, with DC stored at `(height / 2, width / 2)`;
//! - forward and inverse transforms both carry a `1/sqrt(MN)` factor.

pub mod dataio;
pub mod error;
pub mod fourier;
pub mod grid;
pub mod metrics;
pub mod motion;
pub mod optimizer;
pub mod patterns;
pub mod pipeline;
pub mod probmask;
pub mod recon;
pub mod translator;

pub use error::{Error, Result};
pub use rustfft::num_complex::Complex64;
pub use fourier::{fft2_centered, ifft2_centered, magnitude, KSpace2D};
pub use grid::{ComplexImage2D, Grid, Image2D};
pub use patterns::BinaryMask;
pub use probmask::{ProbMask, ResidualMap, ThresholdMatrix, WeightMap};

/// Number of samples required by factor `r` on a grid of `n` pixels, `floor(r * n)`.
///
/// A small tolerance absorbs representation error so that e.g. `(1/3) * 9` is 3.
pub fn target_count(r: f64, n: usize) -> usize {
    let exact = r * n as f64;
    let rounded = exact.round();
    if (exact - rounded).abs() < 1e-9 * exact.abs().max(1.0) {
        rounded as usize
    } else {
        exact.floor().max(0.0) as usize
    }
}

/// Derives an independent RNG seed for `stream` from `base` (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn check_factor(r: f64) -> Result<()> {
    if r.is_finite() && r > 0.0 && r <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "under-sampling factor must lie in (0, 1], got {r}"
        )))
    }
}
