//! Variable-density Poisson-disc pattern.
//!
//! Bridson dart throwing on the pixel lattice with an exclusion radius that
//! grows linearly with distance from DC: `radius(p) = r0 * (1 + s * d(p) / d_max)`.
//! Two accepted pixels `p`, `q` always satisfy `|p - q| >= max(radius(p), radius(q))`.
//! The slope `s` is found by binary search on the produced count, and the
//! final set is trimmed or padded to the exact cardinality.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::BinaryMask;
use crate::{check_factor, target_count, Error, Result};

/// Candidate attempts per active point.
const ATTEMPTS: usize = 30;
const MAX_BISECTIONS: usize = 40;
const MAX_DOUBLINGS: usize = 40;

/// Intermediate results of [`poisson_with_trace`].
#[derive(Debug, Clone)]
pub struct PoissonTrace {
    /// Density slope chosen by the search.
    pub slope: f64,
    /// Dart-throwing output before the cardinality fix-up, as `(row, col)`.
    pub darts: Vec<(usize, usize)>,
    /// Number of bisection steps taken.
    pub bisections: usize,
    pub r0: f64,
    pub d_max: f64,
}

impl PoissonTrace {
    /// Exclusion radius at `(row, col)` for the chosen slope.
    pub fn radius(&self, row: usize, col: usize, height: usize, width: usize) -> f64 {
        radius_at(row, col, height, width, self.r0, self.slope, self.d_max)
    }
}

fn dc_distance(row: usize, col: usize, height: usize, width: usize) -> f64 {
    let dr = row as f64 - (height / 2) as f64;
    let dc = col as f64 - (width / 2) as f64;
    (dr * dr + dc * dc).sqrt()
}

fn radius_at(row: usize, col: usize, h: usize, w: usize, r0: f64, slope: f64, d_max: f64) -> f64 {
    if d_max > 0.0 {
        r0 * (1.0 + slope * dc_distance(row, col, h, w) / d_max)
    } else {
        r0
    }
}

struct Lattice {
    height: usize,
    width: usize,
    r0: f64,
    d_max: f64,
}

impl Lattice {
    fn new(height: usize, width: usize, r0: f64) -> Self {
        let d_max = (0..height)
            .flat_map(|r| [(r, 0), (r, width - 1)])
            .map(|(r, c)| dc_distance(r, c, height, width))
            .fold(0.0, f64::max);
        Self {
            height,
            width,
            r0,
            d_max,
        }
    }

    fn radius(&self, row: usize, col: usize, slope: f64) -> f64 {
        radius_at(row, col, self.height, self.width, self.r0, slope, self.d_max)
    }

    /// Bridson dart throwing, seeded at the DC pixel.
    fn throw(&self, slope: f64, seed: u64) -> Vec<(usize, usize)> {
        let (h, w) = (self.height, self.width);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut occupied: Vec<Option<f64>> = vec![None; h * w];
        let reach = (self.r0 * (1.0 + slope)).ceil() as isize;

        let start = (h / 2, w / 2);
        let mut points = vec![start];
        let mut active = vec![start];
        occupied[start.0 * w + start.1] = Some(self.radius(start.0, start.1, slope));

        while !active.is_empty() {
            let slot = rng.gen_range(0..active.len());
            let (pr, pc) = active[slot];
            let rp = self.radius(pr, pc, slope);
            let mut placed = false;
            for _ in 0..ATTEMPTS {
                // uniform in the annulus [rp, 2 rp]
                let u: f64 = rng.gen();
                let dist = (rp * rp * (1.0 + 3.0 * u)).sqrt();
                let angle = rng.gen::<f64>() * std::f64::consts::TAU;
                let cr = (pr as f64 + dist * angle.sin()).round();
                let cc = (pc as f64 + dist * angle.cos()).round();
                if cr < 0.0 || cc < 0.0 || cr >= h as f64 || cc >= w as f64 {
                    continue;
                }
                let (cr, cc) = (cr as usize, cc as usize);
                if occupied[cr * w + cc].is_some() {
                    continue;
                }
                let rc = self.radius(cr, cc, slope);
                if self.fits(&occupied, cr, cc, rc, reach) {
                    occupied[cr * w + cc] = Some(rc);
                    points.push((cr, cc));
                    active.push((cr, cc));
                    placed = true;
                    break;
                }
            }
            if !placed {
                active.swap_remove(slot);
            }
        }
        points
    }

    fn fits(&self, occupied: &[Option<f64>], row: usize, col: usize, rc: f64, reach: isize) -> bool {
        let (h, w) = (self.height as isize, self.width as isize);
        let (row, col) = (row as isize, col as isize);
        for r in (row - reach).max(0)..=(row + reach).min(h - 1) {
            for c in (col - reach).max(0)..=(col + reach).min(w - 1) {
                if let Some(rq) = occupied[(r * w + c) as usize] {
                    let dr = (r - row) as f64;
                    let dc = (c - col) as f64;
                    let limit = rc.max(rq);
                    if dr * dr + dc * dc < limit * limit {
                        return false;
                    }
                }
            }
        }
        true
    }
}

/// Weighted sample of `k` items without replacement (exponential keys).
fn weighted_pick(
    candidates: &[usize],
    weights: impl Fn(usize) -> f64,
    k: usize,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = candidates
        .iter()
        .map(|&i| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            (u.ln() / weights(i), i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Variable-density Poisson-disc pattern with exactly `floor(R * M * N)` samples.
pub fn gen_poisson_variable_density(
    height: usize,
    width: usize,
    r: f64,
    r0: f64,
    seed: u64,
) -> Result<BinaryMask> {
    poisson_with_trace(height, width, r, r0, seed).map(|(mask, _)| mask)
}

/// As [`gen_poisson_variable_density`], also returning the pre-fix-up darts.
pub fn poisson_with_trace(
    height: usize,
    width: usize,
    r: f64,
    r0: f64,
    seed: u64,
) -> Result<(BinaryMask, PoissonTrace)> {
    check_factor(r)?;
    if !(r0 > 0.0 && r0.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "base radius must be positive, got {r0}"
        )));
    }
    if height == 0 || width == 0 {
        return Err(Error::InvalidParameter("empty grid".into()));
    }
    let n = height * width;
    let target = target_count(r, n);
    if (target as f64) < 4.0 {
        return Err(Error::InvalidParameter(format!(
            "factor {r} gives {target} samples; at least 4 are required"
        )));
    }
    let lattice = Lattice::new(height, width, r0);
    let tolerance = (0.01 * target as f64).floor() as usize;
    let within = |count: usize| count.abs_diff(target) <= tolerance;

    let at_zero = lattice.throw(0.0, seed);
    if at_zero.len() < target {
        return Err(Error::BracketFailure {
            target,
            at_zero: at_zero.len(),
        });
    }

    let mut best = (0.0, at_zero);
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut bisections = 0;
    if !within(best.1.len()) {
        let mut bracketed = false;
        for _ in 0..MAX_DOUBLINGS {
            let darts = lattice.throw(hi, seed);
            let count = darts.len();
            if count.abs_diff(target) < best.1.len().abs_diff(target) {
                best = (hi, darts);
            }
            if count <= target {
                bracketed = true;
                break;
            }
            lo = hi;
            hi *= 2.0;
        }
        if !bracketed {
            return Err(Error::BracketFailure {
                target,
                at_zero: best.1.len(),
            });
        }
        while !within(best.1.len()) && bisections < MAX_BISECTIONS {
            bisections += 1;
            let mid = 0.5 * (lo + hi);
            let darts = lattice.throw(mid, seed);
            let count = darts.len();
            if count > target {
                lo = mid;
            } else {
                hi = mid;
            }
            if count.abs_diff(target) < best.1.len().abs_diff(target) {
                best = (mid, darts);
            }
        }
    }

    let (slope, darts) = best;
    let mut bits = vec![false; n];
    for &(row, col) in &darts {
        bits[row * width + col] = true;
    }

    // exact cardinality: sample proportional to the local density 1 / radius^2
    let density = |i: usize| {
        let rad = lattice.radius(i / width, i % width, slope);
        1.0 / (rad * rad)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let count = darts.len();
    if count < target {
        let free: Vec<usize> = (0..n).filter(|&i| !bits[i]).collect();
        for i in weighted_pick(&free, density, target - count, &mut rng) {
            bits[i] = true;
        }
    } else if count > target {
        let taken: Vec<usize> = (0..n).filter(|&i| bits[i]).collect();
        for i in weighted_pick(&taken, density, count - target, &mut rng) {
            bits[i] = false;
        }
    }

    let mask = BinaryMask::with_factor(height, width, bits, r)?;
    let trace = PoissonTrace {
        slope,
        darts,
        bisections,
        r0,
        d_max: lattice.d_max,
    };
    Ok((mask, trace))
}
