//! Centered, unitary 2D Fourier transforms.
//!
//! Both directions are computed as `fftshift(fft(ifftshift(x))) / sqrt(MN)`,
//! so image-domain and k-space origins sit at `(M/2, N/2)` (integer division)
//! and energy is preserved exactly up to rounding.

use std::cell::RefCell;
use std::ops::Deref;

use rustfft::num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

use crate::grid::{ComplexImage2D, Grid, Image2D};

/// DC-centered k-space samples.
#[derive(Debug, Clone, PartialEq)]
pub struct KSpace2D(Grid<Complex64>);

impl KSpace2D {
    pub fn new(grid: Grid<Complex64>) -> Self {
        Self(grid)
    }

    pub fn grid(&self) -> &Grid<Complex64> {
        &self.0
    }

    pub fn grid_mut(&mut self) -> &mut Grid<Complex64> {
        &mut self.0
    }

    pub fn into_grid(self) -> Grid<Complex64> {
        self.0
    }
}

impl Deref for KSpace2D {
    type Target = Grid<Complex64>;

    fn deref(&self) -> &Self::Target {
        &self.0
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Unnormalized 2D FFT of a row-major buffer, in place.
fn fft2_raw(buf: &mut [Complex64], height: usize, width: usize, direction: FftDirection) {
    PLANNER.with(|planner| {
        let mut planner = planner.borrow_mut();
        let row_fft = planner.plan_fft(width, direction);
        let col_fft = planner.plan_fft(height, direction);

        row_fft.process(buf);

        let mut transposed = vec![Complex64::new(0.0, 0.0); height * width];
        for r in 0..height {
            for c in 0..width {
                transposed[c * height + r] = buf[r * width + c];
            }
        }
        col_fft.process(&mut transposed);
        for c in 0..width {
            for r in 0..height {
                buf[r * width + c] = transposed[c * height + r];
            }
        }
    });
}

fn centered_transform(src: &Grid<Complex64>, direction: FftDirection) -> Grid<Complex64> {
    let (h, w) = src.shape();
    let (ch, cw) = (h / 2, w / 2);
    let scale = 1.0 / ((h * w) as f64).sqrt();

    // ifftshift: origin of the raw buffer takes the centered sample
    let mut buf = Vec::with_capacity(h * w);
    for r in 0..h {
        let sr = (r + ch) % h;
        for c in 0..w {
            buf.push(*src.get(sr, (c + cw) % w));
        }
    }

    fft2_raw(&mut buf, h, w, direction);

    // fftshift back to centered storage
    Grid::from_fn(h, w, |r, c| {
        buf[((r + h - ch) % h) * w + (c + w - cw) % w] * scale
    })
}

/// Forward centered unitary transform from image domain to k-space.
pub fn fft2_centered(img: &ComplexImage2D) -> KSpace2D {
    KSpace2D(centered_transform(img, FftDirection::Forward))
}

/// Forward transform of a real image.
pub fn fft2_real(img: &Image2D) -> KSpace2D {
    fft2_centered(&img.to_complex())
}

/// Inverse centered unitary transform from k-space to image domain.
pub fn ifft2_centered(k: &KSpace2D) -> ComplexImage2D {
    centered_transform(&k.0, FftDirection::Inverse)
}

/// Elementwise modulus.
pub fn magnitude(c: &ComplexImage2D) -> Image2D {
    c.map(|z| z.norm())
}
