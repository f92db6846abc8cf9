//! Training objectives and the posterior score.
//!
//! Every loss is a sum (not a mean) over its support. Graph-level functions
//! (suffix `_var`) build differentiable nodes; the plain versions evaluate on
//! tensors.

use crate::error::{Error, Result};
use crate::geometry::{disparity_var, StereoRig};
use crate::networks::{Bound, CpnModel};
use crate::tensor::{Graph, Shape, Tensor, Var};

/// Exponents of the fidelity (`gamma`) and prior (`eta`) penalties.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormSpec {
    pub gamma: u32,
    pub eta: u32,
}

impl NormSpec {
    pub fn new(gamma: u32, eta: u32) -> Result<Self> {
        let n = NormSpec { gamma, eta };
        n.validate()?;
        Ok(n)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma", self.gamma), ("eta", self.eta)] {
            if v != 1 && v != 2 {
                return Err(Error::invalid(format!("{name} must be 1 or 2, got {v}")));
            }
        }
        Ok(())
    }
}

impl Default for NormSpec {
    fn default() -> Self {
        NormSpec { gamma: 1, eta: 2 }
    }
}

/// Weights of the prior (`alpha`) and photometric terms. Any likelihood
/// temperature is folded into the photometric weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    /// Weight of the raw photometric term when it is used alone.
    pub beta: f64,
    pub beta_c: f64,
    pub beta_s: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("beta_c", self.beta_c),
            ("beta_s", self.beta_s),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.045,
            beta: 1.2,
            beta_c: 0.15,
            beta_s: 0.425,
        }
    }
}

/// `Σ_{i∈Ω} |z_i − d[Ω_i]|^γ`, with `omega` indexing the flattened `d`.
pub fn sparse_fidelity(d: &Tensor, z: &[f64], omega: &[usize], gamma: u32) -> Result<f64> {
    if omega.is_empty() {
        return Err(Error::invalid("sparse fidelity over an empty sample set"));
    }
    if z.len() != omega.len() {
        return Err(Error::invalid(format!(
            "{} values for {} sample positions",
            z.len(),
            omega.len()
        )));
    }
    if gamma != 1 && gamma != 2 {
        return Err(Error::invalid(format!("gamma must be 1 or 2, got {gamma}")));
    }
    let mut total = 0.0;
    for (&zi, &i) in z.iter().zip(omega) {
        let di = *d.data().get(i).ok_or_else(|| {
            Error::invalid(format!(
                "sample index {i} outside a map of {} values",
                d.len()
            ))
        })?;
        let r = (zi - di).abs();
        total += if gamma == 1 { r } else { r * r };
    }
    Ok(total)
}

fn nonempty(mask: &Tensor, what: &str) -> Result<()> {
    if mask.data().iter().all(|&m| m == 0.0) {
        return Err(Error::invalid(format!("{what} has no valid pixels")));
    }
    Ok(())
}

/// Graph form of [`sparse_fidelity`]: `z_map` holds samples where `validity` is 1.
pub fn sparse_fidelity_var(
    g: &mut Graph,
    d: Var,
    z_map: &Tensor,
    validity: &Tensor,
    gamma: u32,
) -> Result<Var> {
    nonempty(validity, "sparse sample")?;
    let z = g.constant(z_map.clone());
    let r = g.sub(d, z)?;
    g.power_penalty(r, gamma, Some(validity))
}

/// `Σ_valid |pred − gt|`.
pub fn supervised_loss_var(
    g: &mut Graph,
    pred: Var,
    gt: &Tensor,
    gt_validity: &Tensor,
) -> Result<Var> {
    nonempty(gt_validity, "ground truth")?;
    let t = g.constant(gt.clone());
    let r = g.sub(pred, t)?;
    g.power_penalty(r, 1, Some(gt_validity))
}

pub fn supervised_loss(pred: &Tensor, gt: &Tensor, gt_validity: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let l = supervised_loss_var(&mut g, p, gt, gt_validity)?;
    Ok(g.value(l).item())
}

/// `Σ|w_cpn(d, I) − d|^η` through a frozen prior network.
pub fn prior_var(
    g: &mut Graph,
    cpn: &CpnModel,
    cpn_params: &Bound,
    d: Var,
    image: Var,
    eta: u32,
) -> Result<Var> {
    let recon = cpn.forward(g, cpn_params, d, image)?;
    let r = g.sub(recon, d)?;
    g.power_penalty(r, eta, None)
}

#[derive(Clone, Copy, Debug)]
pub struct UnsupervisedTerms {
    pub total: Var,
    pub fidelity: Var,
    pub prior: Var,
}

/// Sparse inputs of one batch.
#[derive(Clone, Copy, Debug)]
pub struct SparseInputs<'a> {
    pub z_map: &'a Tensor,
    pub validity: &'a Tensor,
}

/// `fidelity + α·prior` for a predicted depth `d`. Without a prior network α
/// must be 0, and the returned `prior` node is zero.
pub fn unsupervised_loss_var(
    g: &mut Graph,
    d: Var,
    image: Var,
    sparse: SparseInputs<'_>,
    cpn: Option<(&CpnModel, &Bound)>,
    norms: NormSpec,
    weights: &LossWeights,
) -> Result<UnsupervisedTerms> {
    norms.validate()?;
    weights.validate()?;
    let fidelity = sparse_fidelity_var(g, d, sparse.z_map, sparse.validity, norms.gamma)?;
    let prior = match cpn {
        Some((m, p)) => prior_var(g, m, p, d, image, norms.eta)?,
        None if weights.alpha == 0.0 => g.constant(Tensor::scalar(0.0)),
        None => return Err(Error::invalid("a prior network is required when alpha > 0")),
    };
    let weighted = g.scale(prior, weights.alpha);
    let total = g.add(fidelity, weighted)?;
    Ok(UnsupervisedTerms {
        total,
        fidelity,
        prior,
    })
}

fn repeat_channels(mask: &Tensor, c: usize) -> Tensor {
    let s = mask.shape();
    Tensor::from_fn(s.with_channels(c), |n, _, h, w| mask.at(n, 0, h, w))
}

/// Stereo pair and rig. `sign` is the direction in which the second image is
/// sampled: `I(x) ≈ I′(x + sign·s(x))`.
#[derive(Clone, Copy, Debug)]
pub struct StereoInputs<'a> {
    pub stereo_image: &'a Tensor,
    pub rig: &'a StereoRig,
    pub sign: f64,
}

/// The second view warped into the first by depth `d`, plus the in-bounds
/// mask repeated over the image channels.
fn warp_second(g: &mut Graph, d: Var, stereo: StereoInputs<'_>) -> Result<(Var, Tensor)> {
    let disparity = disparity_var(g, d, stereo.rig)?;
    let second = g.constant(stereo.stereo_image.clone());
    let (warped, mask) = g.warp_horizontal(second, disparity, stereo.sign)?;
    let c = stereo.stereo_image.shape().c;
    Ok((warped, repeat_channels(&mask, c)))
}

fn check_pair(image: Shape, stereo: &Tensor) -> Result<()> {
    if stereo.shape() != image {
        return Err(Error::ShapeMismatch {
            op: "stereo pair",
            left: image,
            right: stereo.shape(),
        });
    }
    Ok(())
}

/// ψ_c: Σ over in-bounds pixels of the L1 colour difference `|I(x) − I′(x + s)|`.
pub fn photometric_raw_var(
    g: &mut Graph,
    image: Var,
    d: Var,
    stereo: StereoInputs<'_>,
) -> Result<Var> {
    check_pair(g.shape(image), stereo.stereo_image)?;
    let (warped, mask) = warp_second(g, d, stereo)?;
    let diff = g.sub(image, warped)?;
    g.power_penalty(diff, 1, Some(&mask))
}

/// 1 where the whole (border-clipped) 3×3 neighbourhood is 1.
fn erode3(mask: &Tensor) -> Tensor {
    let s = mask.shape();
    Tensor::from_fn(s, |n, c, y, x| {
        for yy in y.saturating_sub(1)..=(y + 1).min(s.h - 1) {
            for xx in x.saturating_sub(1)..=(x + 1).min(s.w - 1) {
                if mask.at(n, c, yy, xx) == 0.0 {
                    return 0.0;
                }
            }
        }
        1.0
    })
}

/// ψ_s: Σ of `1 − SSIM`, averaged over colour channels, over pixels whose
/// whole 3×3 warped patch is in bounds.
pub fn photometric_ssim_var(
    g: &mut Graph,
    image: Var,
    d: Var,
    stereo: StereoInputs<'_>,
) -> Result<Var> {
    check_pair(g.shape(image), stereo.stereo_image)?;
    let (warped, mask) = warp_second(g, d, stereo)?;
    let mask = erode3(&mask);
    let ssim = g.ssim_map(image, warped)?;
    let c = stereo.stereo_image.shape().c as f64;
    let dissim = g.affine(ssim, -1.0 / c, 1.0 / c);
    g.masked_sum(dissim, Some(&mask))
}

fn eval_photometric(
    f: fn(&mut Graph, Var, Var, StereoInputs<'_>) -> Result<Var>,
    image: &Tensor,
    d: &Tensor,
    stereo: StereoInputs<'_>,
) -> Result<f64> {
    let mut g = Graph::new();
    let i = g.constant(image.clone());
    let dv = g.constant(d.clone());
    let v = f(&mut g, i, dv, stereo)?;
    Ok(g.value(v).item())
}

pub fn photometric_raw(image: &Tensor, d: &Tensor, stereo: StereoInputs<'_>) -> Result<f64> {
    eval_photometric(photometric_raw_var, image, d, stereo)
}

pub fn photometric_ssim(image: &Tensor, d: &Tensor, stereo: StereoInputs<'_>) -> Result<f64> {
    eval_photometric(photometric_ssim_var, image, d, stereo)
}

#[derive(Clone, Copy, Debug)]
pub struct StereoTerms {
    pub total: Var,
    pub unsupervised: UnsupervisedTerms,
    pub psi_c: Var,
    pub psi_s: Var,
}

/// `L^u + β_c·ψ_c + β_s·ψ_s`.
#[allow(clippy::too_many_arguments)]
pub fn stereo_loss_var(
    g: &mut Graph,
    d: Var,
    image: Var,
    sparse: SparseInputs<'_>,
    stereo: StereoInputs<'_>,
    cpn: Option<(&CpnModel, &Bound)>,
    norms: NormSpec,
    weights: &LossWeights,
) -> Result<StereoTerms> {
    let unsupervised = unsupervised_loss_var(g, d, image, sparse, cpn, norms, weights)?;
    let psi_c = photometric_raw_var(g, image, d, stereo)?;
    let psi_s = photometric_ssim_var(g, image, d, stereo)?;
    let wc = g.scale(psi_c, weights.beta_c);
    let ws = g.scale(psi_s, weights.beta_s);
    let t = g.add(unsupervised.total, wc)?;
    let total = g.add(t, ws)?;
    Ok(StereoTerms {
        total,
        unsupervised,
        psi_c,
        psi_s,
    })
}

/// Negative log posterior of a candidate depth map, up to a constant:
/// `fidelity(d) + α·E_prior(d)`. Lower is better.
pub fn posterior_score(
    d: &Tensor,
    image: &Tensor,
    sparse: SparseInputs<'_>,
    cpn: &CpnModel,
    norms: NormSpec,
    alpha: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = cpn.params.bind(&mut g, false);
    let dv = g.constant(d.clone());
    let iv = g.constant(image.clone());
    let weights = LossWeights {
        alpha,
        ..LossWeights::default()
    };
    let terms = unsupervised_loss_var(&mut g, dv, iv, sparse, Some((cpn, &p)), norms, &weights)?;
    Ok(g.value(terms.total).item())
}
