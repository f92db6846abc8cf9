//! Evaluation of trained checkpoints and the nearest-valid-point baseline.

use std::path::Path;

use super::dataset::{sparse_seed, Example};
use super::train::evaluate_dcn;
use crate::data::{read_manifest, sample_sparse, Scene, SparseSample};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, compute_metrics, to_csv, Aggregation, EvalResult};
use crate::networks::{load_checkpoint, DcnModel};
use crate::tensor::{Shape, Tensor};

/// Fills every pixel with the depth of its closest sample (squared pixel
/// distance; ties go to the earlier sample in raster order).
pub fn nearest_valid_baseline(sample: &SparseSample) -> Result<Tensor> {
    if sample.is_empty() {
        return Err(Error::invalid(
            "nearest-valid baseline needs at least one sample",
        ));
    }
    let (h, w) = (sample.height, sample.width);
    let pts: Vec<(i64, i64, f64)> = sample
        .omega
        .iter()
        .zip(&sample.z)
        .map(|(&i, &z)| ((i / w) as i64, (i % w) as i64, z))
        .collect();
    Ok(Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, y, x| {
        let (y, x) = (y as i64, x as i64);
        let mut best = (i64::MAX, 0.0);
        for &(py, px, z) in &pts {
            let d = (py - y).pow(2) + (px - x).pow(2);
            if d < best.0 {
                best = (d, z);
            }
        }
        best.1
    }))
}

pub fn evaluate_baseline(examples: &[Example], how: Aggregation) -> Result<EvalResult> {
    let rows = examples
        .iter()
        .map(|ex| {
            compute_metrics(
                &nearest_valid_baseline(&ex.sample)?,
                &ex.scene.depth,
                &ex.scene.validity(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(&rows, how)
}

/// Re-samples every frame at `density` (seeded per frame index).
pub fn examples_at_density(
    frames: &[(String, Scene)],
    density: f64,
    seed: u64,
) -> Result<Vec<Example>> {
    frames
        .iter()
        .enumerate()
        .map(|(i, (name, scene))| {
            Ok(Example {
                name: name.clone(),
                scene: scene.clone(),
                sample: sample_sparse(scene, density, sparse_seed(seed, i))?,
            })
        })
        .collect()
}

/// Per-image rows plus the aggregate row, as CSV.
pub fn evaluate_csv(model: &DcnModel, examples: &[Example], how: Aggregation) -> Result<String> {
    if examples.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    for ex in examples {
        let s = ex.scene.image.shape();
        if !model.input_shape_ok(s) {
            return Err(Error::invalid(format!(
                "frame {} is {}x{}, not divisible by the model's reduction {}",
                ex.name,
                s.h,
                s.w,
                model.config().reduction()
            )));
        }
    }
    to_csv(&evaluate_dcn(model, examples)?, how)
}

/// Evaluates a completion checkpoint on every frame of a manifest.
pub fn cmd_eval(
    checkpoint: &Path,
    manifest: &Path,
    density: f64,
    seed: u64,
    how: Aggregation,
) -> Result<String> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::invalid(format!(
            "density must lie in (0, 1], got {density}"
        )));
    }
    let model = DcnModel::from_checkpoint(&load_checkpoint(checkpoint)?)?;
    let entries = read_manifest(manifest)?;
    if entries.is_empty() {
        return Err(Error::format(manifest, "manifest lists no frames"));
    }
    let frames = entries
        .iter()
        .enumerate()
        .map(|(i, e)| Ok((format!("{i:05}"), e.load()?)))
        .collect::<Result<Vec<_>>>()?;
    evaluate_csv(&model, &examples_at_density(&frames, density, seed)?, how)
}
