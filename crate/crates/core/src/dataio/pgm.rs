use std::fs;
use std::path::Path;

use crate::grid::Grid;
use crate::patterns::BinaryMask;
use crate::probmask::ProbMask;
use crate::{Error, Result};

/// Parsed binary (P5) graymap. Samples are widened to `u16` regardless of
/// the stored depth.
#[derive(Debug, Clone, PartialEq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub comments: Vec<String>,
    pub pixels: Vec<u16>,
}

impl Pgm {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = b"P5\n".to_vec();
        for c in &self.comments {
            out.extend_from_slice(format!("# {c}\n").as_bytes());
        }
        out.extend_from_slice(format!("{} {}\n{}\n", self.width, self.height, self.maxval).as_bytes());
        if self.maxval < 256 {
            out.extend(self.pixels.iter().map(|&p| p as u8));
        } else {
            out.extend(self.pixels.iter().flat_map(|p| p.to_be_bytes()));
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut comments = Vec::new();
        let magic = header_token(bytes, &mut pos, &mut comments)?.to_string();
        let mut field = || -> Result<usize> {
            let token = header_token(bytes, &mut pos, &mut comments)?;
            token
                .parse()
                .map_err(|_| Error::Format(format!("bad graymap header field {token:?}")))
        };
        let (width, height, maxval) = (field()?, field()?, field()?);
        if magic != "P5" {
            return Err(Error::Format(format!("expected P5 graymap, found {magic:?}")));
        }
        if maxval == 0 || maxval > 65535 {
            return Err(Error::Format(format!("graymap maxval {maxval} out of range")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let n = width * height;
        let depth = if maxval < 256 { 1 } else { 2 };
        let raster = bytes.get(pos..).unwrap_or_default();
        if raster.len() != n * depth {
            return Err(Error::Format(format!(
                "graymap raster has {} bytes, expected {}",
                raster.len(),
                n * depth
            )));
        }
        let pixels = if depth == 1 {
            raster.iter().map(|&b| b as u16).collect()
        } else {
            raster.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()
        };
        Ok(Self {
            width,
            height,
            maxval: maxval as u16,
            comments,
            pixels,
        })
    }

    /// Value of `key=value` in any comment line.
    pub fn comment_value(&self, key: &str) -> Option<&str> {
        let prefix = format!("{key}=");
        self.comments
            .iter()
            .flat_map(|c| c.split_whitespace())
            .find_map(|t| t.strip_prefix(prefix.as_str()))
    }
}

/// Next whitespace-delimited header token, collecting `#` comment lines.
fn header_token<'a>(bytes: &'a [u8], pos: &mut usize, comments: &mut Vec<String>) -> Result<&'a str> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if bytes.get(*pos) != Some(&b'#') {
            break;
        }
        let end = bytes[*pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map_or(bytes.len(), |e| *pos + e);
        comments.push(String::from_utf8_lossy(&bytes[*pos + 1..end]).trim().to_string());
        *pos = end;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| Error::Format("non-ascii graymap header".into()))
}

fn write(pgm: &Pgm, path: &Path) -> Result<()> {
    fs::write(path, pgm.encode()).map_err(|e| Error::io(path, e))
}

/// 8-bit graymap, sampled positions 255.
pub fn export_mask_pgm(mask: &BinaryMask, path: &Path) -> Result<()> {
    let (h, w) = mask.shape();
    write(
        &Pgm {
            width: w,
            height: h,
            maxval: 255,
            comments: vec![format!("mask R={} dims={h}x{w} count={}", mask.factor(), mask.count())],
            pixels: mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect(),
        },
        path,
    )
}

fn scaled(grid: &Grid<f64>) -> (f64, Vec<u16>) {
    let max = grid.max();
    let pixels = if max > 0.0 {
        grid.data().iter().map(|v| (v / max * 65535.0).round() as u16).collect()
    } else {
        vec![0; grid.len()]
    };
    (max, pixels)
}

/// 16-bit graymap scaled so the largest probability maps to 65535.
pub fn export_probmask_pgm(p: &ProbMask, path: &Path) -> Result<()> {
    export_scaled(p.grid(), &format!("probmask R={}", p.target_factor()), path)
}

/// 16-bit graymap of any nonnegative map, e.g. a residual map.
pub fn export_map_pgm(map: &Grid<f64>, label: &str, path: &Path) -> Result<()> {
    export_scaled(map, label, path)
}

fn export_scaled(grid: &Grid<f64>, label: &str, path: &Path) -> Result<()> {
    let (h, w) = grid.shape();
    let (max, pixels) = scaled(grid);
    write(
        &Pgm {
            width: w,
            height: h,
            maxval: 65535,
            comments: vec![format!("{label} dims={h}x{w} scale={max:e}")],
            pixels,
        },
        path,
    )
}

pub fn read_pgm(path: &Path) -> Result<Pgm> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Pgm::decode(&bytes)
}

/// Reads a mask graymap; any nonzero pixel is sampled. The nominal factor is
/// restored from the header comment when present.
pub fn read_mask_pgm(path: &Path) -> Result<BinaryMask> {
    let pgm = read_pgm(path)?;
    let bits = pgm.pixels.iter().map(|&p| p > 0).collect();
    match pgm.comment_value("R").and_then(|r| r.parse::<f64>().ok()) {
        Some(r) => BinaryMask::with_factor(pgm.height, pgm.width, bits, r),
        None => BinaryMask::from_bits(pgm.height, pgm.width, bits),
    }
}
