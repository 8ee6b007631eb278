//! Dataset ingestion, preprocessing, splitting, synthetic phantoms and file I/O.
//!
//! Volumes are raw little-endian `f32`, slice-major then row-major, described
//! by a JSON manifest. Masks and maps are exported as binary PGM.

mod manifest;
mod phantom;
mod pgm;
mod volume;

pub use manifest::{split_ids, split_subjects, Manifest, Split, SplitSpec, Subject};

pub use phantom::{gen_phantom_pairs, write_phantom_dataset, PhantomSubject, MODALITY_A, MODALITY_B};
pub use pgm::{export_map_pgm, export_mask_pgm, export_probmask_pgm, read_pgm, read_mask_pgm, Pgm};
pub use volume::{preprocess, Volume};
