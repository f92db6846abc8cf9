//! Dense prediction for a single frame, with optional error map and score.

use std::path::{Path, PathBuf};

use crate::data::{
    read_depth_png, read_rgb_png, write_depth_png, write_rgb_png, SparseSample, MAX_PNG_DEPTH,
};
use crate::error::{Error, Result};
use crate::losses::{posterior_score, NormSpec, SparseInputs};
use crate::networks::{load_checkpoint, CpnModel, DcnModel};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug)]
pub struct PredictRequest {
    pub checkpoint: PathBuf,
    pub image: PathBuf,
    /// Depth PNG whose nonzero pixels are the sparse observations.
    pub sparse: PathBuf,
    pub ground_truth: Option<PathBuf>,
    pub cpn_checkpoint: Option<PathBuf>,
    pub norms: NormSpec,
    pub alpha: f64,
    pub out: PathBuf,
}

#[derive(Clone, Debug)]
pub struct PredictOutput {
    pub depth_png: PathBuf,
    pub error_png: Option<PathBuf>,
    /// The dense depth as stored (after 1/256 m quantization).
    pub depth: Tensor,
    /// Negative log posterior of the stored depth, when a prior is given.
    pub posterior: Option<f64>,
}

/// Jet-like ramp from dark blue (t = 0) through cyan and yellow to dark red.
pub fn jet(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    let ramp = |c: f64| (1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0);
    [ramp(3.0), ramp(2.0), ramp(1.0)]
}

/// Colour-coded |pred − gt| over valid pixels, scaled to the largest error;
/// invalid pixels get the coldest colour.
pub fn error_map(pred: &Tensor, gt: &Tensor, validity: &Tensor) -> Result<Tensor> {
    let s = pred.shape();
    if gt.shape() != s || validity.shape() != s {
        return Err(Error::ShapeMismatch {
            op: "error_map",
            left: s,
            right: gt.shape(),
        });
    }
    let err: Vec<f64> = (0..pred.len())
        .map(|i| {
            if validity.data()[i] != 0.0 {
                (pred.data()[i] - gt.data()[i]).abs()
            } else {
                0.0
            }
        })
        .collect();
    let max = err.iter().cloned().fold(0.0, f64::max);
    Ok(Tensor::from_fn(Shape::new(1, 3, s.h, s.w), |_, c, y, x| {
        let e = err[y * s.w + x];
        jet(if max > 0.0 { e / max } else { 0.0 })[c]
    }))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "frame".to_string())
}

pub fn cmd_predict(req: &PredictRequest) -> Result<PredictOutput> {
    let model = DcnModel::from_checkpoint(&load_checkpoint(&req.checkpoint)?)?;
    let image = read_rgb_png(&req.image)?;
    let (z_map, z_valid) = read_depth_png(&req.sparse)?;
    if !image.shape().same_spatial(&z_map.shape()) {
        return Err(Error::ShapeMismatch {
            op: "predict inputs",
            left: image.shape(),
            right: z_map.shape(),
        });
    }
    if !model.input_shape_ok(image.shape()) {
        return Err(Error::invalid(format!(
            "{}: size {}x{} is not divisible by the model's reduction {}",
            req.image.display(),
            image.shape().h,
            image.shape().w,
            model.config().reduction()
        )));
    }
    let prior = req
        .cpn_checkpoint
        .as_deref()
        .map(|p| CpnModel::from_checkpoint(&load_checkpoint(p)?))
        .transpose()?;
    let gt = req
        .ground_truth
        .as_deref()
        .map(read_depth_png)
        .transpose()?;

    std::fs::create_dir_all(&req.out).map_err(|e| Error::io(&req.out, e))?;
    let name = stem(&req.image);
    let pred = model.predict(&z_map, &image)?;
    let lo = 1.0 / 256.0;
    let hi = MAX_PNG_DEPTH - 2.0 / 256.0;
    let clamped = pred.map(|d| d.clamp(lo, hi));
    let depth_png = req.out.join(format!("{name}_depth.png"));
    write_depth_png(&depth_png, &clamped, &Tensor::ones(clamped.shape()))?;
    let (depth, _) = read_depth_png(&depth_png)?;

    let error_png = match &gt {
        Some((gt, valid)) => {
            let path = req.out.join(format!("{name}_error.png"));
            write_rgb_png(&path, &error_map(&depth, gt, valid)?)?;
            Some(path)
        }
        None => None,
    };
    let posterior = match &prior {
        Some(cpn) => {
            let sample = SparseSample::from_maps(&z_map, &z_valid)?;
            let (zm, zv) = (sample.z_map(), sample.validity());
            let sparse = SparseInputs {
                z_map: &zm,
                validity: &zv,
            };
            Some(posterior_score(
                &depth, &image, sparse, cpn, req.norms, req.alpha,
            )?)
        }
        None => None,
    };
    Ok(PredictOutput {
        depth_png,
        error_png,
        depth,
        posterior,
    })
}
