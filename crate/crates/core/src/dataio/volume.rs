use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::grid::{Grid, Image2D};
use crate::{Error, Result};

/// Stack of equally sized slices, `[slices, height, width]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Volume {
    dims: [usize; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidParameter(format!("volume dims must be positive, got {dims:?}")));
        }
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::InvalidParameter(format!(
                "volume data has {} voxels, dims {dims:?} need {}",
                data.len(),
                dims.iter().product::<usize>()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_slices(slices: &[Image2D]) -> Result<Self> {
        let first = slices.first().ok_or(Error::EmptyInput("volume slices"))?;
        let (h, w) = first.shape();
        let mut data = Vec::with_capacity(slices.len() * h * w);
        for s in slices {
            first.ensure_shape(s.shape())?;
            data.extend(s.data().iter().map(|&v| v as f32));
        }
        Self::new([slices.len(), h, w], data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn slices(&self) -> usize {
        self.dims[0]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn slice(&self, index: usize) -> Image2D {
        let [_, h, w] = self.dims;
        let start = index * h * w;
        Grid::from_vec(h, w, self.data[start..start + h * w].iter().map(|&v| v as f64).collect())
            .expect("dims validated")
    }

    pub fn to_slices(&self) -> Vec<Image2D> {
        (0..self.slices()).map(|i| self.slice(i)).collect()
    }

    /// Reads raw little-endian `f32` data, rejecting any non-finite voxel.
    pub fn load(path: &Path, dims: [usize; 3]) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let expected = dims.iter().product::<usize>() as u64 * 4;
        if bytes.len() as u64 != expected {
            return Err(Error::SizeMismatch {
                path: path.to_path_buf(),
                expected,
                actual: bytes.len() as u64,
            });
        }
        let per_slice = dims[1] * dims[2];
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                path: path.to_path_buf(),
                slice: i / per_slice,
                index: i % per_slice,
            });
        }
        Self::new(dims, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// Center crop to `crop x crop`, then min-max normalize the whole volume to
/// `[0, 1]` with a single min and max. A constant volume maps to zeros with
/// the degeneracy flag set.
pub fn preprocess(volume: &Volume, crop: usize) -> Result<(Vec<Image2D>, bool)> {
    let [n, h, w] = volume.dims();
    if crop == 0 || h < crop || w < crop {
        return Err(Error::InvalidParameter(format!(
            "cannot crop {h}x{w} slices to {crop}x{crop}"
        )));
    }
    let (r0, c0) = ((h - crop) / 2, (w - crop) / 2);
    let cropped: Vec<Image2D> = (0..n)
        .map(|i| {
            let s = volume.slice(i);
            Grid::from_fn(crop, crop, |r, c| *s.get(r0 + r, c0 + c))
        })
        .collect();
    let lo = cropped.iter().map(|s| s.min()).fold(f64::INFINITY, f64::min);
    let hi = cropped.iter().map(|s| s.max()).fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Ok((cropped.iter().map(|s| Image2D::zeros(s.height(), s.width())).collect(), true));
    }
    let span = hi - lo;
    Ok((
        cropped
            .iter()
            .map(|s| s.map(|&v| ((v - lo) / span).clamp(0.0, 1.0)))
            .collect(),
        false,
    ))
}
