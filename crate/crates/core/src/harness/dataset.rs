use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::DataConfig;
use crate::data::{
    augment, generate_scene, read_manifest, sample_sparse, scene_seed, AugmentationConfig, Scene,
    SparseSample,
};
use crate::error::{Error, Result};

const SPARSE_SALT: u64 = 0x5EED_0F5A_3F1E;

/// A frame together with its (fixed) sparse observation.
#[derive(Clone, Debug)]
pub struct Example {
    pub name: String,
    pub scene: Scene,
    pub sample: SparseSample,
}

#[derive(Clone, Debug)]
pub struct Split {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

/// Every tenth frame (index % 10 == 9) is held out for validation.
pub fn is_validation(index: usize) -> bool {
    index % 10 == 9
}

/// Seed of the sparse sample drawn for frame `index`.
pub fn sparse_seed(base: u64, index: usize) -> u64 {
    scene_seed(base ^ SPARSE_SALT, index)
}

/// Frames from the manifest, or freshly generated scenes.
pub fn load_frames(data: &DataConfig) -> Result<Vec<(String, Scene)>> {
    match &data.manifest {
        Some(path) => read_manifest(path)?
            .iter()
            .enumerate()
            .map(|(i, e)| Ok((format!("{i:05}"), e.load()?)))
            .collect(),
        None => (0..data.scenes)
            .map(|i| {
                Ok((
                    format!("{i:05}"),
                    generate_scene(scene_seed(data.scene_seed, i), &data.scene)?,
                ))
            })
            .collect(),
    }
}

/// Attaches one sparse sample per frame (fixed for the whole run) and splits.
pub fn prepare(data: &DataConfig, density: f64) -> Result<Split> {
    let frames = load_frames(data)?;
    if frames.is_empty() {
        return Err(Error::invalid("the dataset is empty"));
    }
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
    };
    for (i, (name, scene)) in frames.into_iter().enumerate() {
        let sample = sample_sparse(&scene, density, sparse_seed(data.scene_seed, i))?;
        let ex = Example {
            name,
            scene,
            sample,
        };
        if is_validation(i) {
            split.val.push(ex);
        } else {
            split.train.push(ex);
        }
    }
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::invalid(
            "need at least one training and one validation frame (10 or more frames)",
        ));
    }
    Ok(split)
}

/// The augmented batch used at `step`. A pure function of its arguments, so
/// resumed runs see exactly the batches an uninterrupted run would.
pub fn training_batch(
    train: &[Example],
    batch: usize,
    aug: &AugmentationConfig,
    seed: u64,
    step: usize,
) -> Result<Vec<(Scene, SparseSample)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(seed, step));
    (0..batch)
        .map(|_| {
            let ex = &train[rng.gen_range(0..train.len())];
            augment(&ex.scene, &ex.sample, aug, rng.gen())
        })
        .collect()
}
