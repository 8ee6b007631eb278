//! Probabilistic sampling masks: adjustment of the residual prior by the
//! learnable weights, rescaling to the sampling factor, sigmoid relaxation of
//! binarization, and extraction of a binary pattern.

use std::ops::Deref;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grid::Grid;
use crate::patterns::{dc_distance_sq, BinaryMask};
use crate::{check_factor, target_count, Error, Result};

/// Learnable weight map. Clipping to `[-1, 1]` happens where it is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMap(pub Grid<f64>);

impl Deref for WeightMap {
    type Target = Grid<f64>;
    fn deref(&self) -> &Grid<f64> {
        &self.0
    }
}

/// Nonnegative k-space residual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualMap(Grid<f64>);

impl ResidualMap {
    pub fn new(grid: Grid<f64>) -> Result<Self> {
        if let Some(v) = grid.data().iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "residual map values must be finite and nonnegative, found {v}"
            )));
        }
        Ok(Self(grid))
    }

    /// Constant map; used as a flat prior when no informative residual exists.
    pub fn uniform(height: usize, width: usize, value: f64) -> Self {
        Self(Grid::filled(height, width, value.max(0.0)))
    }

    pub fn grid(&self) -> &Grid<f64> {
        &self.0
    }

    pub fn into_grid(self) -> Grid<f64> {
        self.0
    }
}

impl Deref for ResidualMap {
    type Target = Grid<f64>;
    fn deref(&self) -> &Grid<f64> {
        &self.0
    }
}

/// Per-pixel sampling probabilities whose mean equals the target factor.
///
/// Values are not clipped to 1; see [`bernoulli_realize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbMask {
    grid: Grid<f64>,
    target_factor: f64,
}

impl ProbMask {
    /// Wraps an existing grid without rescaling. Values must be nonnegative.
    pub fn from_grid(grid: Grid<f64>, target_factor: f64) -> Result<Self> {
        check_factor(target_factor)?;
        if grid.data().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidParameter(
                "probability mask values must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { grid, target_factor })
    }

    pub fn grid(&self) -> &Grid<f64> {
        &self.grid
    }

    pub fn target_factor(&self) -> f64 {
        self.target_factor
    }
}

impl Deref for ProbMask {
    type Target = Grid<f64>;
    fn deref(&self) -> &Grid<f64> {
        &self.grid
    }
}

/// Uniform thresholds in `[0, 1)` for the sigmoid binarization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMatrix(Grid<f64>);

impl ThresholdMatrix {
    pub fn random(height: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::sample(height, width, &mut rng)
    }

    pub fn sample(height: usize, width: usize, rng: &mut impl Rng) -> Self {
        Self(Grid::from_fn(height, width, |_, _| rng.gen::<f64>()))
    }

    pub fn from_grid(grid: Grid<f64>) -> Result<Self> {
        if grid.data().iter().any(|v| !(0.0..1.0).contains(v)) {
            return Err(Error::InvalidParameter("thresholds must lie in [0, 1)".into()));
        }
        Ok(Self(grid))
    }
}

impl Deref for ThresholdMatrix {
    type Target = Grid<f64>;
    fn deref(&self) -> &Grid<f64> {
        &self.0
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `m = ReLU(clip(w, -1, 1) + r_norm)`.
pub fn adjusted_mass(w: &WeightMap, r_norm: &ResidualMap) -> Result<Grid<f64>> {
    w.zip_map(r_norm, |&wi, &ri| (wi.clamp(-1.0, 1.0) + ri).max(0.0))
}

/// `P = R * m / mean(m)`.
pub fn scale_to_factor(m: &Grid<f64>, r: f64) -> Result<ProbMask> {
    check_factor(r)?;
    let mean = m.mean();
    if !(mean > 0.0) {
        return Err(Error::DegenerateMass);
    }
    let scale = r / mean;
    Ok(ProbMask {
        grid: m.map(|&v| v * scale),
        target_factor: r,
    })
}

/// `sigmoid(slope * (P - th))`, elementwise.
pub fn soft_binarize(p: &ProbMask, th: &ThresholdMatrix, sigma_p: f64) -> Result<Grid<f64>> {
    if !(sigma_p > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "sigmoid slope must be positive, got {sigma_p}"
        )));
    }
    p.grid.zip_map(th, |&pi, &ti| sigmoid(sigma_p * (pi - ti)))
}

/// Independent Bernoulli draw per pixel with success probability `min(P, 1)`.
pub fn bernoulli_realize(p: &ProbMask, seed: u64) -> BinaryMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = p
        .grid
        .data()
        .iter()
        .map(|&pi| rng.gen::<f64>() < pi.min(1.0))
        .collect();
    BinaryMask::from_bits(p.height(), p.width(), data)
        .expect("shape copied from probability mask")
}

/// The `floor(R * M * N)` pixels with the largest probability.
///
/// Ties go to the pixel closer to DC, then to the smaller row-major index.
pub fn topk_extract(p: &ProbMask, r: f64) -> Result<BinaryMask> {
    check_factor(r)?;
    let (h, w) = p.shape();
    let k = target_count(r, h * w);
    if k == 0 {
        return Err(Error::InvalidParameter(format!(
            "factor {r} selects no pixels on a {h}x{w} grid"
        )));
    }
    let values = p.data();
    let mut order: Vec<usize> = (0..h * w).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .total_cmp(&values[a])
            .then_with(|| dc_distance_sq(a, h, w).cmp(&dc_distance_sq(b, h, w)))
            .then_with(|| a.cmp(&b))
    });
    let mut bits = vec![false; h * w];
    for &i in &order[..k] {
        bits[i] = true;
    }
    BinaryMask::with_factor(h, w, bits, r)
}
