//! Synthetic scenes, sparse sampling, augmentation and file formats.

mod augment;
mod io;
mod scene;
mod sparse;

pub use augment::{augment, AugmentationConfig};
pub use io::{
    quantize_depth, read_depth_png, read_manifest, read_rgb_png, write_dataset, write_depth_png,
    write_manifest, write_rgb_png, ManifestEntry, MAX_PNG_DEPTH,
};
pub use scene::{generate_dataset, generate_scene, scene_seed, Scene, SceneConfig};
pub use sparse::{sample_count, sample_sparse, SparseSample};
