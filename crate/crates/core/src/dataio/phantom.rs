use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Manifest, Subject, Volume};
use crate::probmask::sigmoid;
use crate::{Error, Result};

/// Reference-like contrast: bright tissue, dark fluid.
pub const MODALITY_A: &str = "A";
/// Target-like contrast: inverted fluid contrast plus an unpredictable texture.
pub const MODALITY_B: &str = "B";

/// Pixels whose head coverage falls below this are forced to zero in both
/// modalities, so that A and B share one support.
const SUPPORT_CUTOFF: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Tissue {
    Head,
    Gray,
    Csf,
    Lesion,
}

impl Tissue {
    fn contrast_a(self) -> f64 {
        match self {
            Tissue::Head => 0.8,
            Tissue::Gray => 0.55,
            Tissue::Csf => 0.15,
            Tissue::Lesion => 0.35,
        }
    }

    fn contrast_b(self) -> f64 {
        match self {
            Tissue::Head => 0.35,
            Tissue::Gray => 0.5,
            Tissue::Csf => 0.9,
            Tissue::Lesion => 0.7,
        }
    }
}

#[derive(Debug, Clone)]
struct Ellipse {
    tissue: Tissue,
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
    // per-slice drift
    dcx: f64,
    dcy: f64,
    dscale: f64,
}

impl Ellipse {
    /// Soft coverage in `[0, 1]` at normalized coordinates for slice offset `t`.
    fn coverage(&self, x: f64, y: f64, t: f64, edge: f64) -> f64 {
        let (cx, cy) = (self.cx + self.dcx * t, self.cy + self.dcy * t);
        let s = 1.0 + self.dscale * t;
        let (sin, cos) = self.angle.sin_cos();
        let (u, v) = (x - cx, y - cy);
        let xr = cos * u + sin * v;
        let yr = -sin * u + cos * v;
        let rho = ((xr / (self.a * s)).powi(2) + (yr / (self.b * s)).powi(2)).sqrt();
        sigmoid((1.0 - rho) * self.a.min(self.b) * s / edge)
    }
}

/// One synthetic subject: two co-registered contrasts of the same anatomy.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSubject {
    pub id: String,
    pub a: Volume,
    pub b: Volume,
}

fn sample_geometry(rng: &mut ChaCha8Rng, slices: usize) -> Vec<Ellipse> {
    // cumulative drift across the stack stays bounded for tall volumes
    let step = 0.006f64.min(0.15 / slices as f64);
    let drift = |rng: &mut ChaCha8Rng| rng.gen_range(-step..=step);
    let mut shapes = vec![Ellipse {
        tissue: Tissue::Head,
        cx: rng.gen_range(-0.03..0.03),
        cy: rng.gen_range(-0.03..0.03),
        a: rng.gen_range(0.68..0.76),
        b: rng.gen_range(0.8..0.88),
        angle: rng.gen_range(-0.15..0.15),
        dcx: 0.0,
        dcy: 0.0,
        dscale: drift(rng),
    }];
    shapes.push(Ellipse {
        tissue: Tissue::Gray,
        cx: rng.gen_range(-0.04..0.04),
        cy: rng.gen_range(-0.04..0.04),
        a: rng.gen_range(0.5..0.58),
        b: rng.gen_range(0.6..0.7),
        angle: rng.gen_range(-0.2..0.2),
        dcx: drift(rng),
        dcy: drift(rng),
        dscale: drift(rng),
    });
    let inner = rng.gen_range(4..=8) - 1;
    for i in 0..inner {
        let tissue = match i {
            0 => Tissue::Csf,
            1 => Tissue::Lesion,
            _ => [Tissue::Gray, Tissue::Csf, Tissue::Lesion][rng.gen_range(0..3)],
        };
        let r = rng.gen_range(0.0..0.35);
        let phi = rng.gen_range(0.0..2.0 * PI);
        shapes.push(Ellipse {
            tissue,
            cx: r * phi.cos(),
            cy: r * phi.sin(),
            a: rng.gen_range(0.06..0.2),
            b: rng.gen_range(0.06..0.2),
            angle: rng.gen_range(0.0..PI),
            dcx: drift(rng),
            dcy: drift(rng),
            dscale: 4.0 * drift(rng),
        });
    }
    shapes
}

/// Texture wave vector `(rows, cols)` in cycles per image, about 0.3 cycles
/// per pixel and outside the central quarter of k-space.
fn texture_wave(size: usize) -> (f64, f64) {
    let s = size as f64;
    ((0.28 * s).round(), (0.12 * s).round())
}

fn render_subject(id: String, slices: usize, size: usize, rng: &mut ChaCha8Rng) -> Result<PhantomSubject> {
    let shapes = sample_geometry(rng, slices);
    let amplitude = rng.gen_range(0.06..0.08);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let (ky, kx) = texture_wave(size);
    let edge = 2.0 / size as f64;
    let n = size * size;
    let mut a = Vec::with_capacity(slices * n);
    let mut b = Vec::with_capacity(slices * n);
    for s in 0..slices {
        let t = s as f64 - (slices as f64 - 1.0) / 2.0;
        for row in 0..size {
            for col in 0..size {
                let x = (2.0 * col as f64 + 1.0) / size as f64 - 1.0;
                let y = (2.0 * row as f64 + 1.0) / size as f64 - 1.0;
                let head = shapes[0].coverage(x, y, t, edge);
                if head < SUPPORT_CUTOFF {
                    a.push(0.0);
                    b.push(0.0);
                    continue;
                }
                let (mut va, mut vb) = (Tissue::Head.contrast_a(), Tissue::Head.contrast_b());
                for e in &shapes[1..] {
                    let alpha = e.coverage(x, y, t, edge);
                    va += alpha * (e.tissue.contrast_a() - va);
                    vb += alpha * (e.tissue.contrast_b() - vb);
                }
                let arg = 2.0 * PI * (ky * row as f64 + kx * col as f64) / size as f64 + phase;
                vb += amplitude * arg.cos();
                a.push((head * va).clamp(0.0, 1.0) as f32);
                b.push((head * vb).clamp(0.0, 1.0) as f32);
            }
        }
    }
    Ok(PhantomSubject {
        id,
        a: Volume::new([slices, size, size], a)?,
        b: Volume::new([slices, size, size], b)?,
    })
}

fn subject_entry(id: &str, slices: usize, size: usize) -> Subject {
    Subject {
        id: id.to_string(),
        dims: [slices, size, size],
        voxel_size: [1.0, 1.0, 1.0],
        volumes: BTreeMap::from([
            (MODALITY_A.to_string(), PathBuf::from(format!("{id}_{MODALITY_A}.raw"))),
            (MODALITY_B.to_string(), PathBuf::from(format!("{id}_{MODALITY_B}.raw"))),
        ]),
    }
}

/// Paired two-contrast phantoms with shared ellipse anatomy.
///
/// The returned manifest has relative volume paths and an empty root; see
/// [`write_phantom_dataset`] to materialize it on disk.
pub fn gen_phantom_pairs(
    n_subjects: usize,
    slices_per: usize,
    size: usize,
    seed: u64,
) -> Result<(Manifest, Vec<PhantomSubject>)> {
    if size < 32 {
        return Err(Error::InvalidParameter(format!("phantom size must be at least 32, got {size}")));
    }
    if n_subjects == 0 || slices_per == 0 {
        return Err(Error::InvalidParameter("phantom needs at least one subject and one slice".into()));
    }
    let mut subjects = Vec::with_capacity(n_subjects);
    let mut entries = Vec::with_capacity(n_subjects);
    for i in 0..n_subjects {
        let id = format!("phantom_{i:03}");
        let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, i as u64));
        entries.push(subject_entry(&id, slices_per, size));
        subjects.push(render_subject(id, slices_per, size, &mut rng)?);
    }
    Ok((Manifest::new(entries, PathBuf::new())?, subjects))
}

/// Writes the phantom volumes and `manifest.json` into `dir`, returning the
/// manifest rooted there.
pub fn write_phantom_dataset(
    dir: &Path,
    n_subjects: usize,
    slices_per: usize,
    size: usize,
    seed: u64,
) -> Result<Manifest> {
    let (mut manifest, subjects) = gen_phantom_pairs(n_subjects, slices_per, size, seed)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    manifest.root = dir.to_path_buf();
    for (entry, subject) in manifest.subjects.iter().zip(&subjects) {
        subject.a.save(&manifest.volume_path(entry, MODALITY_A)?)?;
        subject.b.save(&manifest.volume_path(entry, MODALITY_B)?)?;
    }
    manifest.save(dir.join("manifest.json"))?;
    Ok(manifest)
}
