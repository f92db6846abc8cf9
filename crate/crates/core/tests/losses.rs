use depthpost_core::geometry::StereoRig;
use depthpost_core::losses::{
    photometric_raw, photometric_ssim, posterior_score, sparse_fidelity, sparse_fidelity_var,
    stereo_loss_var, supervised_loss, unsupervised_loss_var, LossWeights, NormSpec, SparseInputs,
    StereoInputs,
};
use depthpost_core::networks::{
    build_cpn, build_dcn, Bound, CpnConfig, CpnModel, DcnConfig, DcnModel, ParamStore,
};
use depthpost_core::tensor::grad_check_sampled;
use depthpost_core::{Graph, Shape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: Shape, lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

/// Smooth, textured image so photometric terms are informative.
fn textured(shape: Shape, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f: Vec<f64> = (0..6).map(|_| rng.gen_range(0.2..0.9)).collect();
    Tensor::from_fn(shape, |_, c, h, w| {
        0.5 + 0.2 * ((w as f64) * f[c] + (h as f64) * f[c + 3]).sin()
            + 0.1 * ((w as f64) * 0.37 * (c + 1) as f64).cos()
    })
}

struct Sparse {
    z_map: Tensor,
    validity: Tensor,
    z: Vec<f64>,
    omega: Vec<usize>,
}

fn sparse_from(depth: &Tensor, every: usize) -> Sparse {
    let s = depth.shape();
    let mut z_map = Tensor::zeros(s);
    let mut validity = Tensor::zeros(s);
    let (mut z, mut omega) = (Vec::new(), Vec::new());
    for i in (3..depth.len()).step_by(every) {
        z_map.data_mut()[i] = depth.data()[i];
        validity.data_mut()[i] = 1.0;
        z.push(depth.data()[i]);
        omega.push(i);
    }
    Sparse {
        z_map,
        validity,
        z,
        omega,
    }
}

impl Sparse {
    fn inputs(&self) -> SparseInputs<'_> {
        SparseInputs {
            z_map: &self.z_map,
            validity: &self.validity,
        }
    }
}

#[test]
fn fidelity_examples() {
    let d = Tensor::from_vec(Shape::new(1, 1, 1, 4), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(sparse_fidelity(&d, &[2.0, 4.0], &[1, 3], 1).unwrap(), 0.0);
    assert_eq!(sparse_fidelity(&d, &[4.0], &[1], 1).unwrap(), 2.0);
    assert_eq!(sparse_fidelity(&d, &[4.0], &[1], 2).unwrap(), 4.0);
    assert!(sparse_fidelity(&d, &[], &[], 1).is_err());
    assert!(sparse_fidelity(&d, &[1.0], &[9], 1).is_err());
}

#[test]
fn fidelity_graph_form_matches_loop() {
    let s = Shape::new(1, 1, 6, 7);
    let d = random(s, 1.0, 10.0, 1);
    let truth = random(s, 1.0, 10.0, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let omega = rand::seq::index::sample(&mut rng, s.numel(), 10).into_vec();
    let mut z_map = Tensor::zeros(s);
    let mut validity = Tensor::zeros(s);
    for &i in &omega {
        z_map.data_mut()[i] = truth.data()[i];
        validity.data_mut()[i] = 1.0;
    }
    for gamma in [1, 2] {
        let mut brute = 0.0;
        for &i in &omega {
            brute += (truth.data()[i] - d.data()[i]).abs().powi(gamma as i32);
        }
        let mut g = Graph::new();
        let dv = g.constant(d.clone());
        let l = sparse_fidelity_var(&mut g, dv, &z_map, &validity, gamma).unwrap();
        assert!((g.value(l).item() - brute).abs() <= 1e-12 * brute);
        let z: Vec<f64> = omega.iter().map(|&i| truth.data()[i]).collect();
        assert!((sparse_fidelity(&d, &z, &omega, gamma).unwrap() - brute).abs() <= 1e-12 * brute);
    }
}

#[test]
fn supervised_examples() {
    let s = Shape::new(1, 1, 10, 10);
    let gt = random(s, 1.0, 5.0, 1);
    let ones = Tensor::ones(s);
    assert_eq!(supervised_loss(&gt, &gt, &ones).unwrap(), 0.0);
    let plus = gt.map(|v| v + 1.0);
    assert!((supervised_loss(&plus, &gt, &ones).unwrap() - 100.0).abs() < 1e-9);
    let mut mask = Tensor::zeros(s);
    mask.data_mut()[..30].iter_mut().for_each(|m| *m = 1.0);
    let mut perturbed = gt.clone();
    perturbed.data_mut()[50..]
        .iter_mut()
        .for_each(|v| *v += 7.0);
    assert_eq!(supervised_loss(&perturbed, &gt, &mask).unwrap(), 0.0);
    assert!(supervised_loss(&gt, &gt, &Tensor::zeros(s)).is_err());
}

fn jitter_biases(params: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = params.names().to_vec();
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        if name.ends_with(".bias") {
            t.data_mut()
                .iter_mut()
                .for_each(|b| *b = rng.gen_range(-0.2..0.2));
        }
    }
}

struct Fixture {
    dcn: DcnModel,
    cpn: CpnModel,
    image: Tensor,
    second: Tensor,
    sparse: Sparse,
    rig: StereoRig,
}

fn fixture() -> Fixture {
    let s = Shape::new(1, 1, 16, 24);
    let mut dcfg = DcnConfig::desk(false);
    dcfg.depth_encoder.k = 0.125;
    dcfg.image_encoder.k = 0.25;
    dcfg.decoder_k = 0.25;
    let mut dcn = build_dcn(dcfg, 1).unwrap();
    let mut cpn = build_cpn(CpnConfig::new(16, 24, 3, 0.0625, 2), 2).unwrap();
    // generic point: zero biases on zero inputs would sit exactly on ReLU kinks
    jitter_biases(&mut dcn.params, 10);
    jitter_biases(&mut cpn.params, 11);
    let depth = random(s, 3.0, 12.0, 3);
    Fixture {
        dcn,
        cpn,
        image: textured(s.with_channels(3), 4),
        second: textured(s.with_channels(3), 5),
        sparse: sparse_from(&depth, 7),
        rig: StereoRig::new(12.0, 0.5).unwrap(),
    }
}

#[test]
fn loss_identities() {
    let fx = fixture();
    let norms = NormSpec::default();
    let mut g = Graph::new();
    let dp = fx.dcn.params.bind(&mut g, true);
    let cp = fx.cpn.params.bind(&mut g, false);
    let z = g.constant(fx.sparse.z_map.clone());
    let img = g.constant(fx.image.clone());
    let d = fx.dcn.forward(&mut g, &dp, z, img).unwrap();
    let dval = g.value(d).clone();
    let stereo = StereoInputs {
        stereo_image: &fx.second,
        rig: &fx.rig,
        sign: 1.0,
    };

    // alpha = 0 reduces to the fidelity
    let w0 = LossWeights {
        alpha: 0.0,
        ..LossWeights::default()
    };
    let u0 = unsupervised_loss_var(
        &mut g,
        d,
        img,
        fx.sparse.inputs(),
        Some((&fx.cpn, &cp)),
        norms,
        &w0,
    )
    .unwrap();
    let fid = sparse_fidelity(&dval, &fx.sparse.z, &fx.sparse.omega, norms.gamma).unwrap();
    assert!((g.value(u0.total).item() - fid).abs() <= 1e-9 * fid.max(1.0));

    // zero photometric weights reduce the stereo loss to L^u
    let w = LossWeights {
        beta_c: 0.0,
        beta_s: 0.0,
        ..LossWeights::default()
    };
    let u = unsupervised_loss_var(
        &mut g,
        d,
        img,
        fx.sparse.inputs(),
        Some((&fx.cpn, &cp)),
        norms,
        &w,
    )
    .unwrap();
    let st = stereo_loss_var(
        &mut g,
        d,
        img,
        fx.sparse.inputs(),
        stereo,
        Some((&fx.cpn, &cp)),
        norms,
        &w,
    )
    .unwrap();
    let lu = g.value(u.total).item();
    assert!((g.value(st.total).item() - lu).abs() <= 1e-9 * lu);
    assert!(g.value(u.prior).item() > 0.0);

    // posterior score at a fixed depth equals L^u
    let post = posterior_score(
        &dval,
        &fx.image,
        fx.sparse.inputs(),
        &fx.cpn,
        norms,
        w.alpha,
    )
    .unwrap();
    assert!((post - lu).abs() <= 1e-9 * lu);
    let again = posterior_score(
        &dval,
        &fx.image,
        fx.sparse.inputs(),
        &fx.cpn,
        norms,
        w.alpha,
    )
    .unwrap();
    assert_eq!(post, again);

    // bookkeeping of the full stereo loss
    let wf = LossWeights::default();
    let st = stereo_loss_var(
        &mut g,
        d,
        img,
        fx.sparse.inputs(),
        stereo,
        Some((&fx.cpn, &cp)),
        norms,
        &wf,
    )
    .unwrap();
    let parts = g.value(st.unsupervised.total).item()
        + wf.beta_c * g.value(st.psi_c).item()
        + wf.beta_s * g.value(st.psi_s).item();
    assert!((g.value(st.total).item() - parts).abs() <= 1e-9 * parts);
}

#[test]
fn alpha_monotone_and_prior_required() {
    let fx = fixture();
    let s = fx.sparse.z_map.shape();
    let d = random(s, 3.0, 12.0, 9);
    let scores: Vec<f64> = [0.0, 0.01, 0.1, 1.0]
        .iter()
        .map(|&a| {
            posterior_score(
                &d,
                &fx.image,
                fx.sparse.inputs(),
                &fx.cpn,
                NormSpec::default(),
                a,
            )
            .unwrap()
        })
        .collect();
    assert!(scores.windows(2).all(|w| w[0] < w[1]), "{scores:?}");

    let mut g = Graph::new();
    let dv = g.constant(d);
    let img = g.constant(fx.image.clone());
    let w = LossWeights::default();
    assert!(unsupervised_loss_var(
        &mut g,
        dv,
        img,
        fx.sparse.inputs(),
        None,
        NormSpec::default(),
        &w
    )
    .is_err());
    assert!(NormSpec::new(3, 1).is_err());
    let neg = LossWeights { alpha: -1.0, ..w };
    assert!(neg.validate().is_err());
}

#[test]
fn photometric_zero_disparity_limit() {
    let s = Shape::new(1, 3, 8, 12);
    let img = textured(s, 1);
    let rig = StereoRig::new(6.0, 0.5).unwrap();
    let far = Tensor::full(s.with_channels(1), 1e12);
    let st = StereoInputs {
        stereo_image: &img,
        rig: &rig,
        sign: 1.0,
    };
    assert!(photometric_raw(&img, &far, st).unwrap() <= 1e-6);
    assert!(photometric_ssim(&img, &far, st).unwrap() <= 1e-6);
}

#[test]
fn photometric_known_shift() {
    let s = Shape::new(1, 3, 8, 12);
    let img = textured(s, 2);
    // I(x) = I'(x + 1)
    let second = Tensor::from_fn(
        s,
        |n, c, h, w| if w == 0 { 0.0 } else { img.at(n, c, h, w - 1) },
    );
    let rig = StereoRig::new(6.0, 0.5).unwrap();
    let d = Tensor::full(s.with_channels(1), rig.fb());
    let st = StereoInputs {
        stereo_image: &second,
        rig: &rig,
        sign: 1.0,
    };
    assert!(photometric_raw(&img, &d, st).unwrap() <= 1e-9);
    let unrelated = random(s, 0.0, 1.0, 3);
    let st = StereoInputs {
        stereo_image: &unrelated,
        ..st
    };
    assert!(photometric_raw(&img, &d, st).unwrap() > 0.0);
    assert!(photometric_raw(&img, &Tensor::zeros(s.with_channels(1)), st).is_err());
}

/// Direct evaluation of the SSIM formula on each clipped 3×3 patch.
fn brute_ssim(a: &Tensor, b: &Tensor, c: usize, y: usize, x: usize) -> f64 {
    let s = a.shape();
    let (mut pa, mut pb) = (Vec::new(), Vec::new());
    for yy in y.saturating_sub(1)..=(y + 1).min(s.h - 1) {
        for xx in x.saturating_sub(1)..=(x + 1).min(s.w - 1) {
            pa.push(a.at(0, c, yy, xx));
            pb.push(b.at(0, c, yy, xx));
        }
    }
    let n = pa.len() as f64;
    let ma = pa.iter().sum::<f64>() / n;
    let mb = pb.iter().sum::<f64>() / n;
    let va = pa.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / n;
    let vb = pb.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / n;
    let cov = pa
        .iter()
        .zip(&pb)
        .map(|(p, q)| (p - ma) * (q - mb))
        .sum::<f64>()
        / n;
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}

#[test]
fn ssim_term_matches_direct_formula() {
    let s = Shape::new(1, 3, 6, 9);
    let img = textured(s, 5);
    let second = random(s, 0.0, 1.0, 6);
    let rig = StereoRig::new(4.0, 0.5).unwrap();
    // huge depth: the warp is the identity, so the term compares img and second directly
    let far = Tensor::full(s.with_channels(1), 1e13);
    let st = StereoInputs {
        stereo_image: &second,
        rig: &rig,
        sign: 1.0,
    };
    // the last column samples just past the edge, so patches touching it are excluded
    let mut brute = 0.0;
    for y in 0..s.h {
        for x in 0..s.w - 2 {
            let mut per_pixel = 0.0;
            for c in 0..3 {
                per_pixel += (1.0 - brute_ssim(&img, &second, c, y, x)) / 3.0;
            }
            assert!((0.0..=2.0).contains(&per_pixel));
            brute += per_pixel;
        }
    }
    let got = photometric_ssim(&img, &far, st).unwrap();
    assert!((got - brute).abs() <= 1e-6 * brute, "{got} vs {brute}");
    let same = StereoInputs {
        stereo_image: &img,
        ..st
    };
    assert!(photometric_ssim(&img, &far, same).unwrap().abs() <= 1e-9);
}

fn loss_grad_check(stereo_mode: bool) -> f64 {
    let fx = fixture();
    let n_dcn = fx.dcn.params.len();
    let mut inputs: Vec<Tensor> = fx.dcn.params.tensors().to_vec();
    inputs.push(fx.sparse.z_map.clone());
    inputs.push(fx.image.clone());
    grad_check_sampled(
        |g: &mut Graph, v| {
            let dp = Bound {
                vars: v[..n_dcn].to_vec(),
            };
            let cp = fx.cpn.params.bind(g, false);
            let (z, img) = (v[n_dcn], v[n_dcn + 1]);
            let d = fx.dcn.forward(g, &dp, z, img)?;
            let w = LossWeights::default();
            let norms = NormSpec::default();
            if stereo_mode {
                let st = StereoInputs {
                    stereo_image: &fx.second,
                    rig: &fx.rig,
                    sign: 1.0,
                };
                Ok(stereo_loss_var(
                    g,
                    d,
                    img,
                    fx.sparse.inputs(),
                    st,
                    Some((&fx.cpn, &cp)),
                    norms,
                    &w,
                )?
                .total)
            } else {
                Ok(unsupervised_loss_var(
                    g,
                    d,
                    img,
                    fx.sparse.inputs(),
                    Some((&fx.cpn, &cp)),
                    norms,
                    &w,
                )?
                .total)
            }
        },
        &inputs,
        1e-5,
        6,
        17,
    )
    .unwrap()
}

#[test]
fn unsupervised_loss_gradient() {
    let err = loss_grad_check(false);
    assert!(err <= 1e-4, "max rel err {err}");
}

#[test]
fn stereo_loss_gradient() {
    let err = loss_grad_check(true);
    assert!(err <= 1e-4, "max rel err {err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn losses_non_negative(seed in 0u64..1000, gamma in 1u32..=2) {
        let s = Shape::new(1, 1, 4, 5);
        let d = random(s, 0.5, 9.0, seed);
        let t = random(s, 0.5, 9.0, seed + 1);
        let sp = sparse_from(&t, 3);
        let f = sparse_fidelity(&d, &sp.z, &sp.omega, gamma).unwrap();
        prop_assert!(f >= 0.0);
        prop_assert!(supervised_loss(&d, &t, &Tensor::ones(s)).unwrap() >= 0.0);
        prop_assert_eq!(sparse_fidelity(&t, &sp.z, &sp.omega, gamma).unwrap(), 0.0);
    }
}
