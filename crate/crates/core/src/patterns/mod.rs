//! Fixed baseline under-sampling patterns and the binary mask type.
//!
//! Every generator here returns exactly `floor(R * M * N)` samples (or
//! `round(R * M)` full rows for the 1D Gaussian pattern).

mod center;
mod gaussian;
mod poisson;

pub use center::gen_center;
pub use gaussian::{gaussian_row_weights, gen_gaussian_1d};
pub use poisson::{gen_poisson_variable_density, poisson_with_trace, PoissonTrace};

use serde::{Deserialize, Serialize};

use crate::fourier::KSpace2D;
use crate::grid::Grid;
use crate::{Error, Result};

/// Squared Euclidean distance of row-major index `i` from the DC pixel.
#[inline]
pub(crate) fn dc_distance_sq(i: usize, height: usize, width: usize) -> usize {
    let dr = (i / width).abs_diff(height / 2);
    let dc = (i % width).abs_diff(width / 2);
    dr * dr + dc * dc
}

/// Chebyshev distance of row-major index `i` from the DC pixel.
#[inline]
pub(crate) fn dc_chebyshev(i: usize, height: usize, width: usize) -> usize {
    let dr = (i / width).abs_diff(height / 2);
    let dc = (i % width).abs_diff(width / 2);
    dr.max(dc)
}

/// Binary sampling pattern in DC-centered k-space layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
    /// Nominal factor: the requested `R` for generators, the realized
    /// fraction for random draws.
    factor: f64,
}

impl BinaryMask {
    /// Mask whose factor is the realized sampling fraction.
    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        let count = bits.iter().filter(|&&b| b).count();
        let factor = if bits.is_empty() { 0.0 } else { count as f64 / bits.len() as f64 };
        Self::with_factor(height, width, bits, factor)
    }

    pub fn with_factor(height: usize, width: usize, bits: Vec<bool>, factor: f64) -> Result<Self> {
        if height == 0 || width == 0 || bits.len() != height * width {
            return Err(Error::InvalidParameter(format!(
                "mask of {} bits does not fit {height}x{width}",
                bits.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
            factor,
        })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self::with_factor(height, width, vec![true; height * width], 1.0).expect("positive dims")
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::with_factor(height, width, vec![false; height * width], 0.0).expect("positive dims")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn factor(&self) -> f64 {
        self.factor
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_grid(&self) -> Grid<f64> {
        Grid::from_vec(
            self.height,
            self.width,
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("validated shape")
    }

    /// Retrospective under-sampling: zero every unsampled coefficient.
    pub fn apply(&self, k: &KSpace2D) -> Result<KSpace2D> {
        k.ensure_shape(self.shape())?;
        let mut out = k.clone();
        for (z, &b) in out.grid_mut().data_mut().iter_mut().zip(&self.bits) {
            if !b {
                *z = Default::default();
            }
        }
        Ok(out)
    }
}
