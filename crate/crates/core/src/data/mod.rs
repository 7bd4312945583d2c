//! Synthetic scenes, quality labels and raster I/O.

mod dataset;
mod mask;
pub mod netpbm;
mod scene;
mod sqa;

pub use dataset::{
    image_planes, labels_from_pgm, make_batch, mask_from_pgm, mask_to_pgm, read_dataset, sha256_hex, write_dataset, Batch, FileHashes,
    Manifest, ManifestEntry, MANIFEST,
};
pub use mask::{disk, Mask};
pub use scene::{
    generate_scene, generate_scenes, perturb_mask, AppliedPerturbation, Blob, Building, PerturbConfig, SceneConfig, SqaTriplet,
};
pub use sqa::sqa_ground_truth;
