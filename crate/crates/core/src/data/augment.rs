use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Scene, SparseSample};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationConfig {
    /// Random crop `(height, width)`; `None` keeps the full frame.
    pub crop: Option<(usize, usize)>,
    pub flip_h: f64,
    pub flip_v: f64,
    pub hist_eq: bool,
    /// Moves every sample by an independent offset in {−1, 0, 1}².
    pub sparse_shift: bool,
}

impl AugmentationConfig {
    pub fn identity() -> Self {
        AugmentationConfig {
            crop: None,
            flip_h: 0.0,
            flip_v: 0.0,
            hist_eq: false,
            sparse_shift: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("flip_h", self.flip_h), ("flip_v", self.flip_v)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!(
                    "{name} must be a probability, got {p}"
                )));
            }
        }
        if let Some((h, w)) = self.crop {
            if h == 0 || w == 0 {
                return Err(Error::invalid("crop must be non-empty"));
            }
        }
        Ok(())
    }
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig::identity()
    }
}

fn remap(t: &Tensor, h: usize, w: usize, f: impl Fn(usize, usize) -> (usize, usize)) -> Tensor {
    let s = t.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, h, w), |n, c, y, x| {
        let (sy, sx) = f(y, x);
        t.at(n, c, sy, sx)
    })
}

/// Histogram equalisation of luminance; chroma is preserved by scaling RGB
/// with the luminance ratio. The mapping is built from `reference` and
/// applied to every image in `images`.
fn equalize(reference: &Tensor, images: &mut [&mut Tensor]) {
    const BINS: usize = 256;
    let s = reference.shape();
    let lum = |t: &Tensor, y: usize, x: usize| {
        0.299 * t.at(0, 0, y, x) + 0.587 * t.at(0, 1, y, x) + 0.114 * t.at(0, 2, y, x)
    };
    let bin = |l: f64| ((l.clamp(0.0, 1.0) * (BINS - 1) as f64).round()) as usize;
    let mut hist = [0usize; BINS];
    for y in 0..s.h {
        for x in 0..s.w {
            hist[bin(lum(reference, y, x))] += 1;
        }
    }
    let total = (s.h * s.w) as f64;
    let mut cdf = [0.0; BINS];
    let mut acc = 0usize;
    for (c, h) in cdf.iter_mut().zip(hist) {
        acc += h;
        *c = acc as f64 / total;
    }
    for img in images.iter_mut() {
        let src = img.clone();
        for y in 0..s.h {
            for x in 0..s.w {
                let l = lum(&src, y, x);
                let target = cdf[bin(l)];
                let ratio = if l > 1e-6 { target / l } else { 0.0 };
                for c in 0..3 {
                    let v = if l > 1e-6 {
                        src.at(0, c, y, x) * ratio
                    } else {
                        target
                    };
                    img.set(0, c, y, x, v.clamp(0.0, 1.0));
                }
            }
        }
    }
}

/// Applies crop, flips, histogram equalisation and sample jitter. Geometric
/// operations act identically on every image, the depth and the samples.
pub fn augment(
    scene: &Scene,
    sample: &SparseSample,
    cfg: &AugmentationConfig,
    seed: u64,
) -> Result<(Scene, SparseSample)> {
    cfg.validate()?;
    let (h0, w0) = (scene.height(), scene.width());
    if sample.height != h0 || sample.width != w0 {
        return Err(Error::invalid("sparse sample and scene sizes differ"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ch, cw) = cfg.crop.unwrap_or((h0, w0));
    if ch > h0 || cw > w0 {
        return Err(Error::invalid(format!(
            "crop {ch}x{cw} exceeds scene {h0}x{w0}"
        )));
    }
    let oy = if ch < h0 {
        rng.gen_range(0..=h0 - ch)
    } else {
        0
    };
    let ox = if cw < w0 {
        rng.gen_range(0..=w0 - cw)
    } else {
        0
    };
    let fh = cfg.flip_h > 0.0 && rng.gen_bool(cfg.flip_h);
    let fv = cfg.flip_v > 0.0 && rng.gen_bool(cfg.flip_v);

    // output (y, x) -> source (y, x)
    let src = |y: usize, x: usize| {
        let y = if fv { ch - 1 - y } else { y };
        let x = if fh { cw - 1 - x } else { x };
        (y + oy, x + ox)
    };
    // source -> output, None when cropped away
    let dst = |y: usize, x: usize| -> Option<(usize, usize)> {
        if y < oy || x < ox || y >= oy + ch || x >= ox + cw {
            return None;
        }
        let (y, x) = (y - oy, x - ox);
        Some((
            if fv { ch - 1 - y } else { y },
            if fh { cw - 1 - x } else { x },
        ))
    };

    let warp = |t: &Tensor| remap(t, ch, cw, src);
    let mut image = warp(&scene.image);
    let mut stereo_image = scene.stereo_image.as_ref().map(warp);
    if cfg.hist_eq {
        let reference = image.clone();
        match stereo_image.as_mut() {
            Some(s) => equalize(&reference, &mut [&mut image, s]),
            None => equalize(&reference, &mut [&mut image]),
        }
    }
    let out_scene = Scene {
        image,
        depth: warp(&scene.depth),
        depth_validity: scene.depth_validity.as_ref().map(warp),
        stereo_image,
        rig: scene.rig,
        warp_sign: if fh {
            -scene.warp_sign
        } else {
            scene.warp_sign
        },
        visibility: scene.visibility.as_ref().map(warp),
        seed: scene.seed,
    };

    // samples: shift (collisions keep the larger depth), then crop/flip
    let mut grid: Vec<Option<f64>> = vec![None; h0 * w0];
    for (&i, &z) in sample.omega.iter().zip(&sample.z) {
        let (mut y, mut x) = ((i / w0) as i64, (i % w0) as i64);
        if cfg.sparse_shift {
            y += rng.gen_range(-1..=1);
            x += rng.gen_range(-1..=1);
        }
        if y < 0 || x < 0 || y >= h0 as i64 || x >= w0 as i64 {
            continue;
        }
        let cell = &mut grid[y as usize * w0 + x as usize];
        *cell = Some(cell.map_or(z, |old| old.max(z)));
    }
    let pairs = grid
        .iter()
        .enumerate()
        .filter_map(|(i, z)| {
            let z = (*z)?;
            let (y, x) = dst(i / w0, i % w0)?;
            Some((y * cw + x, z))
        })
        .collect();
    Ok((out_scene, SparseSample::new(pairs, ch, cw)?))
}
