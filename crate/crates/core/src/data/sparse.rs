use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Scene;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Sparse depth observations on an `height × width` lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseSample {
    /// Depth values, one per index in `omega`.
    pub z: Vec<f64>,
    /// Row-major pixel indices, ascending.
    pub omega: Vec<usize>,
    pub height: usize,
    pub width: usize,
}

impl SparseSample {
    pub fn new(mut pairs: Vec<(usize, f64)>, height: usize, width: usize) -> Result<Self> {
        pairs.sort_by_key(|p| p.0);
        if pairs.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::invalid("duplicate sample position"));
        }
        if let Some(&(i, _)) = pairs.iter().find(|p| p.0 >= height * width) {
            return Err(Error::invalid(format!(
                "sample index {i} outside a {height}x{width} lattice"
            )));
        }
        Ok(SparseSample {
            z: pairs.iter().map(|p| p.1).collect(),
            omega: pairs.iter().map(|p| p.0).collect(),
            height,
            width,
        })
    }

    /// Reads samples off a depth map: every pixel with `validity == 1`.
    pub fn from_maps(depth: &Tensor, validity: &Tensor) -> Result<Self> {
        let s = depth.shape();
        if validity.shape() != s || s.n != 1 || s.c != 1 {
            return Err(Error::ShapeMismatch {
                op: "sparse sample maps",
                left: s,
                right: validity.shape(),
            });
        }
        let pairs = (0..depth.len())
            .filter(|&i| validity.data()[i] != 0.0)
            .map(|i| (i, depth.data()[i]))
            .collect();
        SparseSample::new(pairs, s.h, s.w)
    }

    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }

    pub fn density(&self) -> f64 {
        self.len() as f64 / (self.height * self.width) as f64
    }

    fn shape(&self) -> Shape {
        Shape::new(1, 1, self.height, self.width)
    }

    /// 0/1 map, 1 exactly on `omega`.
    pub fn validity(&self) -> Tensor {
        let mut t = Tensor::zeros(self.shape());
        for &i in &self.omega {
            t.data_mut()[i] = 1.0;
        }
        t
    }

    /// Depth map holding `z` on `omega` and zeros elsewhere.
    pub fn z_map(&self) -> Tensor {
        let mut t = Tensor::zeros(self.shape());
        for (&i, &z) in self.omega.iter().zip(&self.z) {
            t.data_mut()[i] = z;
        }
        t
    }
}

/// Number of samples for a density: `floor(density·H·W + 1/2)`.
pub fn sample_count(density: f64, pixels: usize) -> usize {
    (density * pixels as f64 + 0.5).floor() as usize
}

/// Draws `round(density·H·W)` distinct pixels uniformly and copies their depth.
/// With a fixed seed the samples for a lower density are a subset of those
/// for a higher one.
pub fn sample_sparse(scene: &Scene, density: f64, seed: u64) -> Result<SparseSample> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::invalid(format!(
            "density must lie in (0, 1], got {density}"
        )));
    }
    let (h, w) = (scene.height(), scene.width());
    let k = sample_count(density, h * w);
    if k == 0 {
        return Err(Error::invalid(format!(
            "density {density} on a {h}x{w} image yields no samples"
        )));
    }
    let candidates: Vec<usize> = match &scene.depth_validity {
        None => (0..h * w).collect(),
        Some(v) => (0..h * w).filter(|&i| v.data()[i] != 0.0).collect(),
    };
    if k > candidates.len() {
        return Err(Error::invalid(format!(
            "{k} samples requested but only {} pixels have depth",
            candidates.len()
        )));
    }
    // a prefix of a seeded permutation: for one seed, sparser samples are
    // subsets of denser ones
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = candidates;
    order.shuffle(&mut rng);
    let pairs = order[..k]
        .iter()
        .map(|&i| (i, scene.depth.data()[i]))
        .collect();
    SparseSample::new(pairs, h, w)
}
