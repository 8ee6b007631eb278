//! PSNR and SSIM, plus per-set summaries.

use serde::{Deserialize, Serialize};

use crate::grid::{Grid, Image2D};
use crate::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const DYNAMIC_RANGE: f64 = 1.0;

fn sum_sq_error(reference: &Image2D, reconstruction: &Image2D) -> Result<f64> {
    reference.ensure_shape(reconstruction.shape())?;
    Ok(reference
        .data()
        .iter()
        .zip(reconstruction.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// `10 log10(MN * max(ref) / sum (ref - rec)^2)`; the peak enters unsquared.
///
/// For references normalized to a peak of 1 this coincides with
/// [`psnr_standard`]. Returns `+inf` for a perfect reconstruction.
pub fn psnr(reference: &Image2D, reconstruction: &Image2D) -> Result<f64> {
    let sse = sum_sq_error(reference, reconstruction)?;
    if sse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (reference.len() as f64 * reference.max() / sse).log10())
}

/// Conventional `10 log10(max(ref)^2 / MSE)`.
pub fn psnr_standard(reference: &Image2D, reconstruction: &Image2D) -> Result<f64> {
    let sse = sum_sq_error(reference, reconstruction)?;
    if sse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let peak = reference.max();
    Ok(10.0 * (peak * peak * reference.len() as f64 / sse).log10())
}

/// Normalized 1D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - half;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Reflect an out-of-range index: `... b a | a b c ... y z | z y ...`.
#[inline]
pub(crate) fn symmetric_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian filtering with symmetric boundaries.
fn filter(img: &Grid<f64>, taps: &[f64]) -> Grid<f64> {
    let (h, w) = img.shape();
    let half = (taps.len() / 2) as isize;
    let rows: Grid<f64> = Grid::from_fn(h, w, |r, c| {
        taps.iter()
            .enumerate()
            .map(|(t, &k)| k * img.get(r, symmetric_index(c as isize + t as isize - half, w)))
            .sum()
    });
    Grid::from_fn(h, w, |r, c| {
        taps.iter()
            .enumerate()
            .map(|(t, &k)| k * rows.get(symmetric_index(r as isize + t as isize - half, h), c))
            .sum()
    })
}

/// Local SSIM map with an 11x11 Gaussian window (sigma 1.5), `L = 1`.
pub fn ssim_map(reference: &Image2D, reconstruction: &Image2D) -> Result<Image2D> {
    reference.ensure_shape(reconstruction.shape())?;
    let (h, w) = reference.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidParameter(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let x = reference;
    let y = reconstruction;
    let mu_x = filter(x, &taps);
    let mu_y = filter(y, &taps);
    let xx = filter(&x.zip_map(x, |a, b| a * b)?, &taps);
    let yy = filter(&y.zip_map(y, |a, b| a * b)?, &taps);
    let xy = filter(&x.zip_map(y, |a, b| a * b)?, &taps);

    let c1 = (K1 * DYNAMIC_RANGE).powi(2);
    let c2 = (K2 * DYNAMIC_RANGE).powi(2);
    Ok(Grid::from_fn(h, w, |r, c| {
        let mx = *mu_x.get(r, c);
        let my = *mu_y.get(r, c);
        let vx = xx.get(r, c) - mx * mx;
        let vy = yy.get(r, c) - my * my;
        let cov = xy.get(r, c) - mx * my;
        ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    }))
}

/// Mean of the local SSIM map.
pub fn ssim(reference: &Image2D, reconstruction: &Image2D) -> Result<f64> {
    Ok(ssim_map(reference, reconstruction)?.mean())
}

/// Summary statistics of one metric over a set of slices.
///
/// Only finite entries enter the mean and standard deviation; infinite
/// values (perfect reconstructions) are counted separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
    pub infinite_count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        let count = finite.len();
        let mean = if count > 0 {
            finite.iter().sum::<f64>() / count as f64
        } else {
            f64::NAN
        };
        let std = if count > 1 {
            (finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            std,
            count,
            infinite_count: values.iter().filter(|v| v.is_infinite()).count(),
        }
    }
}

/// Per-slice PSNR and SSIM for one reconstruction setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub labels: Vec<String>,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
}

impl MetricReport {
    pub fn new() -> Self {
        Self {
            labels: Vec::new(),
            psnr: Vec::new(),
            ssim: Vec::new(),
        }
    }

    pub fn push(&mut self, label: impl Into<String>, psnr: f64, ssim: f64) {
        self.labels.push(label.into());
        self.psnr.push(psnr);
        self.ssim.push(ssim);
    }

    /// Scores `reconstructions` against `references`, using the literal or
    /// standard PSNR form.
    pub fn evaluate(
        references: &[Image2D],
        reconstructions: &[Image2D],
        labels: &[String],
        standard_psnr: bool,
    ) -> Result<Self> {
        if references.len() != reconstructions.len() || references.len() != labels.len() {
            return Err(Error::InvalidParameter(
                "reference, reconstruction and label counts differ".into(),
            ));
        }
        let mut report = Self::new();
        for ((x, y), label) in references.iter().zip(reconstructions).zip(labels) {
            let p = if standard_psnr {
                psnr_standard(x, y)?
            } else {
                psnr(x, y)?
            };
            report.push(label.clone(), p, ssim(x, y)?);
        }
        Ok(report)
    }

    /// `label,psnr,ssim` rows; infinite PSNR is written as `inf`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,psnr,ssim\n");
        for ((label, p), s) in self.labels.iter().zip(&self.psnr).zip(&self.ssim) {
            out.push_str(&format!("{label},{p},{s}\n"));
        }
        out
    }

    pub fn psnr_summary(&self) -> Summary {
        Summary::of(&self.psnr)
    }

    pub fn ssim_summary(&self) -> Summary {
        Summary::of(&self.ssim)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl Default for MetricReport {
    fn default() -> Self {
        Self::new()
    }
}
