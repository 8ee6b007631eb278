//! Rigid in-plane motion for robustness experiments.
//!
//! One pixel is taken to be one millimetre.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grid::{Grid, Image2D};
use crate::{Error, Result};

/// Translation in pixels followed by a rotation in degrees about the image center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub dx: f64,
    pub dy: f64,
    pub theta: f64,
}

impl RigidTransform {
    pub const IDENTITY: Self = Self {
        dx: 0.0,
        dy: 0.0,
        theta: 0.0,
    };
}

/// `dx, dy ~ U(-t_bound, t_bound)`, `theta ~ U(-r_bound, r_bound)`.
pub fn sample_rigid(seed: u64, t_bound: f64, r_bound: f64) -> Result<RigidTransform> {
    if !(t_bound >= 0.0 && r_bound >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "motion bounds must be nonnegative, got {t_bound} px / {r_bound} deg"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |bound: f64| {
        if bound == 0.0 {
            0.0
        } else {
            rng.gen_range(-bound..=bound)
        }
    };
    let dx = draw(t_bound);
    let dy = draw(t_bound);
    let theta = draw(r_bound);
    Ok(RigidTransform { dx, dy, theta })
}

// coordinates within this distance of a lattice point are snapped to it
const SNAP: f64 = 1e-9;

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

/// Translate by `(dx, dy)`, then rotate by `theta` about the image center.
///
/// Bilinear interpolation; pixels outside the source read as zero.
/// Content moves toward `+x` (columns) and `+y` (rows) for positive shifts.
pub fn apply_rigid(img: &Image2D, t: &RigidTransform) -> Image2D {
    let (h, w) = img.shape();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (sin, cos) = t.theta.to_radians().sin_cos();

    let sample = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            0.0
        } else {
            *img.get(r as usize, c as usize)
        }
    };

    Grid::from_fn(h, w, |r, c| {
        // inverse map: undo the rotation, then the shift
        let ox = c as f64 - cx;
        let oy = r as f64 - cy;
        let sx = snap(cos * ox + sin * oy + cx - t.dx);
        let sy = snap(-sin * ox + cos * oy + cy - t.dy);

        let x0 = sx.floor();
        let y0 = sy.floor();
        let fx = sx - x0;
        let fy = sy - y0;
        let (x0, y0) = (x0 as isize, y0 as isize);
        if x0 < -1 || y0 < -1 || x0 >= w as isize || y0 >= h as isize {
            return 0.0;
        }
        let mut v = (1.0 - fx) * (1.0 - fy) * sample(y0, x0);
        if fx > 0.0 {
            v += fx * (1.0 - fy) * sample(y0, x0 + 1);
        }
        if fy > 0.0 {
            v += (1.0 - fx) * fy * sample(y0 + 1, x0);
            if fx > 0.0 {
                v += fx * fy * sample(y0 + 1, x0 + 1);
            }
        }
        v
    })
}
