//! Reconstruction from under-sampled k-space.
//!
//! `zero_filled` is the differentiable surrogate used while learning the
//! pattern. `regularized_ls` solves
//! `min_x ||M . F(x) - y||^2 + lambda ||G x||^2` for evaluation, with `G`
//! either the identity (closed form) or periodic first differences (CG).

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::fourier::{fft2_centered, ifft2_centered, magnitude, KSpace2D};
use crate::grid::{ComplexImage2D, Grid, Image2D};
use crate::patterns::BinaryMask;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconKind {
    ZeroFilled,
    RegularizedLs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    Identity,
    FirstDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconConfig {
    pub kind: ReconKind,
    pub lambda: f64,
    pub regularizer: Regularizer,
    pub cg_max_iters: usize,
    pub cg_tol: f64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            kind: ReconKind::ZeroFilled,
            lambda: 0.0,
            regularizer: Regularizer::Identity,
            cg_max_iters: 200,
            cg_tol: 1e-8,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        if !(self.cg_tol > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "CG tolerance must be positive, got {}",
                self.cg_tol
            )));
        }
        Ok(())
    }
}

/// Result of a regularized reconstruction. The image is returned even when
/// CG stops at the iteration cap.
#[derive(Debug, Clone)]
pub struct ReconOutput {
    pub image: Image2D,
    pub complex: ComplexImage2D,
    pub iterations: usize,
    /// Final `||r|| / ||b||` of the normal equations.
    pub relative_residual: f64,
    pub converged: bool,
    /// Objective after each CG iteration (including the starting point), when recorded.
    pub objective_history: Vec<f64>,
}

/// `|F^-1(y_u)|`.
pub fn zero_filled(y_u: &KSpace2D) -> Image2D {
    magnitude(&ifft2_centered(y_u))
}

/// Periodic forward differences `(D_row x, D_col x)`.
pub fn first_differences(x: &ComplexImage2D) -> (ComplexImage2D, ComplexImage2D) {
    let (h, w) = x.shape();
    let dv = Grid::from_fn(h, w, |r, c| x.get((r + 1) % h, c) - x.get(r, c));
    let dh = Grid::from_fn(h, w, |r, c| x.get(r, (c + 1) % w) - x.get(r, c));
    (dv, dh)
}

/// `D_row^T D_row x + D_col^T D_col x`.
fn difference_gram(x: &ComplexImage2D) -> ComplexImage2D {
    let (h, w) = x.shape();
    let (dv, dh) = first_differences(x);
    Grid::from_fn(h, w, |r, c| {
        dv.get((r + h - 1) % h, c) - dv.get(r, c) + dh.get(r, (c + w - 1) % w) - dh.get(r, c)
    })
}

fn masked(k: &KSpace2D, mask: &BinaryMask) -> Result<KSpace2D> {
    mask.apply(k)
}

fn dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm(a: &[Complex64]) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// `||M . F(x) - y_u||^2 + lambda ||G x||^2`.
pub fn objective(
    x: &ComplexImage2D,
    y_u: &KSpace2D,
    mask: &BinaryMask,
    lambda: f64,
    regularizer: Regularizer,
) -> Result<f64> {
    let fx = masked(&fft2_centered(x), mask)?;
    let data: f64 = fx
        .data()
        .iter()
        .zip(y_u.data())
        .map(|(a, b)| (a - b).norm_sqr())
        .sum();
    let reg = match regularizer {
        Regularizer::Identity => x.energy(),
        Regularizer::FirstDifference => {
            let (dv, dh) = first_differences(x);
            dv.energy() + dh.energy()
        }
    };
    Ok(data + lambda * reg)
}

/// Conjugate gradient on the normal equations
/// `(F^H M F + lambda G^H G) x = F^H M y_u`, starting from zero.
pub fn cg_solve(
    y_u: &KSpace2D,
    mask: &BinaryMask,
    lambda: f64,
    regularizer: Regularizer,
    max_iters: usize,
    tol: f64,
    record_objective: bool,
) -> Result<ReconOutput> {
    y_u.ensure_shape(mask.shape())?;
    let (h, w) = y_u.shape();
    let apply = |x: &ComplexImage2D| -> Result<ComplexImage2D> {
        let data = ifft2_centered(&masked(&fft2_centered(x), mask)?);
        let reg = match regularizer {
            Regularizer::Identity => x.clone(),
            Regularizer::FirstDifference => difference_gram(x),
        };
        data.zip_map(&reg, |a, b| a + b * lambda)
    };

    let b = ifft2_centered(&masked(y_u, mask)?);
    let b_norm = norm(b.data());
    let mut x = Grid::zeros_complex(h, w);
    let mut history = Vec::new();
    if record_objective {
        history.push(objective(&x, y_u, mask, lambda, regularizer)?);
    }
    if b_norm == 0.0 {
        return Ok(ReconOutput {
            image: magnitude(&x),
            complex: x,
            iterations: 0,
            relative_residual: 0.0,
            converged: true,
            objective_history: history,
        });
    }

    let mut r = b.clone();
    let mut p = r.clone();
    let mut rr = dot(r.data(), r.data()).re;
    let mut iterations = 0;
    let mut rel = rr.sqrt() / b_norm;
    while rel > tol && iterations < max_iters {
        let ap = apply(&p)?;
        let pap = dot(p.data(), ap.data()).re;
        if !(pap > 0.0) {
            break;
        }
        let alpha = rr / pap;
        for (xi, pi) in x.data_mut().iter_mut().zip(p.data()) {
            *xi += pi * alpha;
        }
        for (ri, api) in r.data_mut().iter_mut().zip(ap.data()) {
            *ri -= api * alpha;
        }
        let rr_new = dot(r.data(), r.data()).re;
        let beta = rr_new / rr;
        for (pi, ri) in p.data_mut().iter_mut().zip(r.data()) {
            *pi = ri + *pi * beta;
        }
        rr = rr_new;
        iterations += 1;
        rel = rr.sqrt() / b_norm;
        if record_objective {
            history.push(objective(&x, y_u, mask, lambda, regularizer)?);
        }
    }
    Ok(ReconOutput {
        image: magnitude(&x),
        complex: x,
        iterations,
        relative_residual: rel,
        converged: rel <= tol,
        objective_history: history,
    })
}

/// Minimizer of the regularized least-squares objective, as a magnitude image.
pub fn regularized_ls(y_u: &KSpace2D, mask: &BinaryMask, cfg: &ReconConfig) -> Result<ReconOutput> {
    cfg.validate()?;
    y_u.ensure_shape(mask.shape())?;
    match cfg.regularizer {
        Regularizer::Identity => {
            // per coefficient: sampled -> y / (1 + lambda), unsampled -> 0
            let mut k = masked(y_u, mask)?;
            let scale = 1.0 / (1.0 + cfg.lambda);
            for z in k.grid_mut().data_mut() {
                *z *= scale;
            }
            let x = ifft2_centered(&k);
            Ok(ReconOutput {
                image: magnitude(&x),
                complex: x,
                iterations: 0,
                relative_residual: 0.0,
                converged: true,
                objective_history: Vec::new(),
            })
        }
        Regularizer::FirstDifference => cg_solve(
            y_u,
            mask,
            cfg.lambda,
            cfg.regularizer,
            cfg.cg_max_iters,
            cfg.cg_tol,
            false,
        ),
    }
}

/// Dispatches on `cfg.kind`.
pub fn reconstruct(y_u: &KSpace2D, mask: &BinaryMask, cfg: &ReconConfig) -> Result<Image2D> {
    match cfg.kind {
        ReconKind::ZeroFilled => {
            y_u.ensure_shape(mask.shape())?;
            Ok(zero_filled(y_u))
        }
        ReconKind::RegularizedLs => regularized_ls(y_u, mask, cfg).map(|o| o.image),
    }
}
