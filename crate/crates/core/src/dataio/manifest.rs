use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Volume;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    /// `[slices, height, width]`.
    pub dims: [usize; 3],
    /// Millimetres, `[slice, row, col]`.
    #[serde(default = "unit_voxel")]
    pub voxel_size: [f64; 3],
    /// Modality tag to volume path; relative paths resolve against the
    /// manifest directory.
    pub volumes: BTreeMap<String, PathBuf>,
}

fn unit_voxel() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}

/// Human-editable JSON listing of subjects and their per-modality volumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub subjects: Vec<Subject>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn new(subjects: Vec<Subject>, root: impl Into<PathBuf>) -> Result<Self> {
        let m = Self {
            subjects,
            root: root.into(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        let mut paths = HashSet::new();
        for s in &self.subjects {
            if !ids.insert(&s.id) {
                return Err(Error::Format(format!("duplicate subject id {}", s.id)));
            }
            if s.dims.iter().any(|&d| d == 0) {
                return Err(Error::Format(format!("subject {} has empty dims {:?}", s.id, s.dims)));
            }
            for p in s.volumes.values() {
                if !paths.insert(self.root.join(p)) {
                    return Err(Error::Format(format!(
                        "volume {} listed more than once",
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Self = serde_json::from_str(&text)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn subject(&self, id: &str) -> Option<&Subject> {
        self.subjects.iter().find(|s| s.id == id)
    }

    pub fn volume_path(&self, subject: &Subject, modality: &str) -> Result<PathBuf> {
        subject
            .volumes
            .get(modality)
            .map(|p| self.root.join(p))
            .ok_or_else(|| Error::Format(format!("subject {} has no {modality} volume", subject.id)))
    }

    pub fn load_volume(&self, subject: &Subject, modality: &str) -> Result<Volume> {
        Volume::load(&self.volume_path(subject, modality)?, subject.dims)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Subject-disjoint 3:1:1 assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl SplitSpec {
    pub fn assignment(&self, id: &str) -> Option<Split> {
        if self.train.iter().any(|s| s == id) {
            Some(Split::Train)
        } else if self.validation.iter().any(|s| s == id) {
            Some(Split::Validation)
        } else if self.test.iter().any(|s| s == id) {
            Some(Split::Test)
        } else {
            None
        }
    }
}

/// Seeded shuffle, then `round(n/5)` validation, `round(n/5)` test, the rest train.
pub fn split_subjects(manifest: &Manifest, seed: u64) -> Result<SplitSpec> {
    let ids: Vec<String> = manifest.subjects.iter().map(|s| s.id.clone()).collect();
    split_ids(ids, seed)
}

/// [`split_subjects`] over bare ids.
pub fn split_ids(mut ids: Vec<String>, seed: u64) -> Result<SplitSpec> {
    let n = ids.len();
    if n < 5 {
        return Err(Error::InvalidParameter(format!(
            "need at least 5 subjects for a 3:1:1 split, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let held = (n as f64 / 5.0).round() as usize;
    let test = ids.split_off(n - held);
    let validation = ids.split_off(n - 2 * held);
    Ok(SplitSpec {
        seed,
        train: ids,
        validation,
        test,
    })
}
