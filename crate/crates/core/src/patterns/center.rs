use super::{dc_chebyshev, dc_distance_sq, BinaryMask};
use crate::{check_factor, target_count, Error, Result};

/// Centered rectangular pattern.
///
/// Takes the `floor(R * M * N)` pixels closest to DC in Chebyshev distance,
/// breaking ties by Euclidean distance and then row-major order.
pub fn gen_center(height: usize, width: usize, r: f64) -> Result<BinaryMask> {
    check_factor(r)?;
    let n = height * width;
    let k = target_count(r, n);
    if k == 0 {
        return Err(Error::InvalidParameter(format!(
            "factor {r} selects no pixels on a {height}x{width} grid"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| {
        (
            dc_chebyshev(i, height, width),
            dc_distance_sq(i, height, width),
            i,
        )
    });
    let mut bits = vec![false; n];
    for &i in &order[..k] {
        bits[i] = true;
    }
    BinaryMask::with_factor(height, width, bits, r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_factor_is_full_mask() {
        assert_eq!(gen_center(9, 6, 1.0).unwrap().count(), 54);
    }

    #[test]
    fn four_by_four_quarter() {
        // Enumerated by hand: DC (2,2), then the Chebyshev-1 ring ordered by
        // Euclidean distance; the three edge neighbours earliest in row-major
        // order are (1,2), (2,1), (2,3).
        let m = gen_center(4, 4, 0.25).unwrap();
        let ones: Vec<(usize, usize)> = (0..16)
            .filter(|&i| m.bits()[i])
            .map(|i| (i / 4, i % 4))
            .collect();
        assert_eq!(ones, vec![(1, 2), (2, 1), (2, 2), (2, 3)]);
    }

    #[test]
    fn eighth_of_192_fits_side_69() {
        let m = gen_center(192, 192, 0.125).unwrap();
        assert_eq!(m.count(), 4608);
        for i in 0..192 * 192 {
            if m.bits()[i] {
                assert!(dc_chebyshev(i, 192, 192) <= 34);
            }
        }
    }

    #[test]
    fn rejects_empty_selection() {
        assert!(gen_center(3, 3, 0.1).is_err());
    }
}
