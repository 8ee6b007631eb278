use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::BinaryMask;
use crate::{check_factor, Error, Result};

/// Unnormalized Gaussian weight of each row, centered on the DC row.
pub fn gaussian_row_weights(height: usize, sigma_rows: f64) -> Vec<f64> {
    let center = (height / 2) as f64;
    (0..height)
        .map(|r| {
            let z = (r as f64 - center) / sigma_rows;
            (-0.5 * z * z).exp()
        })
        .collect()
}

/// 1D Gaussian pattern: `round(R * M)` fully sampled rows drawn without
/// replacement, each draw proportional to a Gaussian centered at the DC row.
///
/// The DC row is not forced into the pattern.
pub fn gen_gaussian_1d(
    height: usize,
    width: usize,
    r: f64,
    sigma_rows: f64,
    seed: u64,
) -> Result<BinaryMask> {
    check_factor(r)?;
    if !(sigma_rows > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "row standard deviation must be positive, got {sigma_rows}"
        )));
    }
    let n_rows = (r * height as f64).round() as usize;
    if n_rows == 0 || n_rows > height {
        return Err(Error::InvalidParameter(format!(
            "factor {r} selects {n_rows} of {height} rows"
        )));
    }

    let mut weights = gaussian_row_weights(height, sigma_rows);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected = vec![false; height];
    for _ in 0..n_rows {
        let total: f64 = weights.iter().sum();
        let row = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &w) in weights.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if u < w {
                        break;
                    }
                    u -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            // far tails underflowed to zero; fall back to the first free row
            // nearest DC
            (0..height)
                .filter(|&i| !selected[i])
                .min_by_key(|&i| (i.abs_diff(height / 2), i))
                .expect("fewer selections than rows")
        };
        selected[row] = true;
        weights[row] = 0.0;
    }

    let bits = (0..height)
        .flat_map(|row| std::iter::repeat(selected[row]).take(width))
        .collect();
    BinaryMask::with_factor(height, width, bits, r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn selected_rows(m: &BinaryMask) -> Vec<usize> {
        (0..m.height()).filter(|&r| m.get(r, 0)).collect()
    }

    #[test]
    fn full_factor_takes_every_row() {
        for seed in 0..5 {
            assert_eq!(gen_gaussian_1d(17, 3, 1.0, 17.0 / 6.0, seed).unwrap().count(), 51);
        }
    }

    #[test]
    fn quarter_of_192() {
        let m = gen_gaussian_1d(192, 192, 0.25, 32.0, 3).unwrap();
        assert_eq!(selected_rows(&m).len(), 48);
        assert_eq!(m.count(), 9216);
        for r in 0..192 {
            let first = m.get(r, 0);
            assert!((0..192).all(|c| m.get(r, c) == first));
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = gen_gaussian_1d(64, 64, 0.25, 64.0 / 6.0, 11).unwrap();
        let b = gen_gaussian_1d(64, 64, 0.25, 64.0 / 6.0, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn narrow_sigma_still_exact() {
        // tails underflow to zero weight; cardinality still honoured
        let m = gen_gaussian_1d(64, 4, 0.5, 0.05, 1).unwrap();
        assert_eq!(selected_rows(&m).len(), 32);
    }

    #[test]
    fn rejects_zero_rows() {
        assert!(gen_gaussian_1d(8, 8, 0.05, 1.0, 0).is_err());
        assert!(gen_gaussian_1d(8, 8, 0.25, 0.0, 0).is_err());
    }
}
