//! Depth/disparity conversion, horizontal warping and SSIM.
//!
//! The warp and SSIM kernels here back the corresponding [`Graph`] ops; the
//! free functions are convenience wrappers for gradient-free use.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Shape, Tensor, Var};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Rectified stereo rig: focal length in pixels and baseline in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StereoRig {
    pub focal_px: f64,
    pub baseline_m: f64,
}

impl StereoRig {
    pub fn new(focal_px: f64, baseline_m: f64) -> Result<Self> {
        if !(focal_px > 0.0 && focal_px.is_finite() && baseline_m > 0.0 && baseline_m.is_finite()) {
            return Err(Error::invalid(format!(
                "stereo rig needs positive focal length and baseline, got F={focal_px} B={baseline_m}"
            )));
        }
        Ok(StereoRig {
            focal_px,
            baseline_m,
        })
    }

    /// `F·B`, the depth-disparity product.
    pub fn fb(&self) -> f64 {
        self.focal_px * self.baseline_m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap {
    pub values: Tensor,
    /// 1 where `x + sign·s(x)` lands inside the row.
    pub oob_mask: Tensor,
}

/// `s = F·B / d` with the in-bounds mask for warping in direction `sign`.
pub fn disparity_from_depth(depth: &Tensor, rig: &StereoRig, sign: f64) -> Result<DisparityMap> {
    check_positive(depth)?;
    let values = depth.map(|d| rig.fb() / d);
    let oob_mask = in_bounds_mask(&values, sign);
    Ok(DisparityMap { values, oob_mask })
}

/// Graph version of [`disparity_from_depth`]: differentiable in `depth`.
pub fn disparity_var(g: &mut Graph, depth: Var, rig: &StereoRig) -> Result<Var> {
    g.scaled_reciprocal(depth, rig.fb())
}

pub(crate) fn check_positive(depth: &Tensor) -> Result<()> {
    match depth.data().iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        Some((index, &value)) => Err(Error::NonPositiveDepth { index, value }),
        None => Ok(()),
    }
}

fn in_bounds_mask(disparity: &Tensor, sign: f64) -> Tensor {
    let s = disparity.shape();
    Tensor::from_fn(s, |n, c, y, x| {
        let u = x as f64 + sign * disparity.at(n, c, y, x);
        if u >= 0.0 && u <= (s.w - 1) as f64 {
            1.0
        } else {
            0.0
        }
    })
}

/// Warps `image` by `disparity` without recording gradients.
pub fn warp_horizontal(
    image: &Tensor,
    disparity: &DisparityMap,
    sign: f64,
) -> Result<(Tensor, Tensor)> {
    let (si, sd) = (image.shape(), disparity.values.shape());
    if sd.c != 1 || !si.same_spatial(&sd) {
        return Err(Error::ShapeMismatch {
            op: "warp_horizontal",
            left: si,
            right: sd,
        });
    }
    Ok(warp_forward(image, &disparity.values, sign))
}

/// Per-channel SSIM map without recording gradients.
pub fn ssim_map(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "ssim_map",
            left: a.shape(),
            right: b.shape(),
        });
    }
    if a.shape().h < 3 || a.shape().w < 3 {
        return Err(Error::invalid(format!(
            "ssim_map: images must be at least 3x3, got {}",
            a.shape()
        )));
    }
    Ok(ssim_forward(a, b))
}

#[inline]
fn sample_coords(x: usize, s: f64, sign: f64, w: usize) -> Option<(usize, usize, f64)> {
    let u = x as f64 + sign * s;
    if !(u >= 0.0 && u <= (w - 1) as f64) {
        return None;
    }
    let x0 = (u.floor() as usize).min(w - 1);
    let x1 = (x0 + 1).min(w - 1);
    Some((x0, x1, u - x0 as f64))
}

pub(crate) fn warp_forward(image: &Tensor, disparity: &Tensor, sign: f64) -> (Tensor, Tensor) {
    let s = image.shape();
    let mut out = Tensor::zeros(s);
    let mut mask = Tensor::zeros(disparity.shape());
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let Some((x0, x1, f)) = sample_coords(x, disparity.at(n, 0, y, x), sign, s.w)
                else {
                    continue;
                };
                mask.set(n, 0, y, x, 1.0);
                for c in 0..s.c {
                    let v = (1.0 - f) * image.at(n, c, y, x0) + f * image.at(n, c, y, x1);
                    out.set(n, c, y, x, v);
                }
            }
        }
    }
    (out, mask)
}

pub(crate) fn warp_backward(
    image: &Tensor,
    disparity: &Tensor,
    sign: f64,
    grad_out: &[f64],
    mut grad_image: Option<&mut [f64]>,
    mut grad_disparity: Option<&mut [f64]>,
) {
    let s = image.shape();
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let Some((x0, x1, f)) = sample_coords(x, disparity.at(n, 0, y, x), sign, s.w)
                else {
                    continue;
                };
                let mut ds = 0.0;
                for c in 0..s.c {
                    let go = grad_out[image.index(n, c, y, x)];
                    if let Some(gi) = grad_image.as_deref_mut() {
                        gi[image.index(n, c, y, x0)] += go * (1.0 - f);
                        gi[image.index(n, c, y, x1)] += go * f;
                    }
                    if x1 != x0 {
                        ds += go * (image.at(n, c, y, x1) - image.at(n, c, y, x0));
                    }
                }
                if let Some(gd) = grad_disparity.as_deref_mut() {
                    gd[disparity.index(n, 0, y, x)] += sign * ds;
                }
            }
        }
    }
}

/// Local moments over the (border-clipped) 3×3 window of one pixel.
struct Moments {
    count: f64,
    ma: f64,
    mb: f64,
    eaa: f64,
    ebb: f64,
    eab: f64,
}

#[inline]
fn window(
    y: usize,
    x: usize,
    h: usize,
    w: usize,
) -> (
    std::ops::RangeInclusive<usize>,
    std::ops::RangeInclusive<usize>,
) {
    (
        y.saturating_sub(1)..=(y + 1).min(h - 1),
        x.saturating_sub(1)..=(x + 1).min(w - 1),
    )
}

fn moments(a: &[f64], b: &[f64], y: usize, x: usize, h: usize, w: usize) -> Moments {
    let (rows, cols) = window(y, x, h, w);
    let mut m = Moments {
        count: 0.0,
        ma: 0.0,
        mb: 0.0,
        eaa: 0.0,
        ebb: 0.0,
        eab: 0.0,
    };
    for yy in rows {
        for xx in cols.clone() {
            let (va, vb) = (a[yy * w + xx], b[yy * w + xx]);
            m.count += 1.0;
            m.ma += va;
            m.mb += vb;
            m.eaa += va * va;
            m.ebb += vb * vb;
            m.eab += va * vb;
        }
    }
    let inv = 1.0 / m.count;
    m.ma *= inv;
    m.mb *= inv;
    m.eaa *= inv;
    m.ebb *= inv;
    m.eab *= inv;
    m
}

struct SsimTerms {
    a1: f64,
    a2: f64,
    b1: f64,
    b2: f64,
}

impl SsimTerms {
    fn new(m: &Moments) -> Self {
        SsimTerms {
            a1: 2.0 * m.ma * m.mb + SSIM_C1,
            a2: 2.0 * (m.eab - m.ma * m.mb) + SSIM_C2,
            b1: m.ma * m.ma + m.mb * m.mb + SSIM_C1,
            b2: (m.eaa - m.ma * m.ma) + (m.ebb - m.mb * m.mb) + SSIM_C2,
        }
    }

    fn value(&self) -> f64 {
        (self.a1 * self.a2) / (self.b1 * self.b2)
    }
}

pub(crate) fn ssim_forward(a: &Tensor, b: &Tensor) -> Tensor {
    let s = a.shape();
    let plane = s.plane();
    let mut out = Tensor::zeros(s);
    for nc in 0..s.n * s.c {
        let pa = &a.data()[nc * plane..(nc + 1) * plane];
        let pb = &b.data()[nc * plane..(nc + 1) * plane];
        let dst = &mut out.data_mut()[nc * plane..(nc + 1) * plane];
        for y in 0..s.h {
            for x in 0..s.w {
                let m = moments(pa, pb, y, x, s.h, s.w);
                dst[y * s.w + x] = SsimTerms::new(&m).value().clamp(-1.0, 1.0);
            }
        }
    }
    out
}

pub(crate) fn ssim_backward(
    a: &Tensor,
    b: &Tensor,
    grad_out: &[f64],
    mut grad_a: Option<&mut [f64]>,
    mut grad_b: Option<&mut [f64]>,
) {
    let s: Shape = a.shape();
    let plane = s.plane();
    for nc in 0..s.n * s.c {
        let pa = &a.data()[nc * plane..(nc + 1) * plane];
        let pb = &b.data()[nc * plane..(nc + 1) * plane];
        for y in 0..s.h {
            for x in 0..s.w {
                let go = grad_out[nc * plane + y * s.w + x];
                if go == 0.0 {
                    continue;
                }
                let m = moments(pa, pb, y, x, s.h, s.w);
                let t = SsimTerms::new(&m);
                let den = t.b1 * t.b2;
                let ssim = t.value();
                let scale = go / (den * m.count);
                // d(N - S·D) for each raw moment, divided by D and the window size.
                let d_ma = (2.0 * m.mb * t.a2
                    - 2.0 * m.mb * t.a1
                    - ssim * (2.0 * m.ma * t.b2 - 2.0 * m.ma * t.b1))
                    * scale;
                let d_mb = (2.0 * m.ma * t.a2
                    - 2.0 * m.ma * t.a1
                    - ssim * (2.0 * m.mb * t.b2 - 2.0 * m.mb * t.b1))
                    * scale;
                let d_eab = 2.0 * t.a1 * scale;
                let d_eaa = -ssim * t.b1 * scale;
                let d_ebb = d_eaa;
                let (rows, cols) = window(y, x, s.h, s.w);
                for yy in rows {
                    for xx in cols.clone() {
                        let i = yy * s.w + xx;
                        let (va, vb) = (pa[i], pb[i]);
                        if let Some(ga) = grad_a.as_deref_mut() {
                            ga[nc * plane + i] += d_ma + d_eaa * 2.0 * va + d_eab * vb;
                        }
                        if let Some(gb) = grad_b.as_deref_mut() {
                            gb[nc * plane + i] += d_mb + d_ebb * 2.0 * vb + d_eab * va;
                        }
                    }
                }
            }
        }
    }
}
