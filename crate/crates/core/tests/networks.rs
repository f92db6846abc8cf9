use std::collections::BTreeMap;
use std::time::Instant;

use depthpost_core::networks::{
    build_cpn, build_dcn, count_parameters, cpn_score, load_checkpoint, save_checkpoint, BlockKind,
    ConvLayerSpec, CpnConfig, CpnModel, DcnConfig, DcnModel, LayerKind,
};
use depthpost_core::tensor::grad_check;
use depthpost_core::{Graph, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: Shape, lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

fn sparse(shape: Shape, density: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| {
        if rng.gen::<f64>() < density {
            rng.gen_range(2.0..30.0)
        } else {
            0.0
        }
    })
}

#[test]
fn second_layer_arithmetic() {
    let full = DcnConfig::full(false);
    let two = count_parameters(&full.plan(), false);
    assert_eq!(two.layer("depth.stage1.conv1"), Some(4608));
    assert_eq!(two.layer("image.stage1.conv1"), Some(41472));
    let fused = count_parameters(&full.fused_plan(), false);
    assert_eq!(fused.layer("fused.stage1.conv1"), Some(73728));
}

#[test]
fn full_size_total_near_reported_and_below_fused() {
    let full = DcnConfig::full(false);
    let total = count_parameters(&full.plan(), false).total;
    let fused = count_parameters(&full.fused_plan(), false).total;
    assert!(
        (total as f64 - 18.8e6).abs() <= 0.2 * 18.8e6,
        "total {total}"
    );
    assert!(total < fused, "{total} vs {fused}");
}

#[test]
fn late_fusion_cheaper_at_every_stage() {
    let full = DcnConfig::full(false);
    let two = count_parameters(&full.plan(), false);
    let fused = count_parameters(&full.fused_plan(), false);
    for stage in 0..full.stages() {
        let sum = |pc: &depthpost_core::networks::ParameterCount, prefixes: &[&str]| -> usize {
            pc.per_layer
                .iter()
                .filter(|(n, _)| {
                    prefixes
                        .iter()
                        .any(|p| n.starts_with(&format!("{p}.stage{stage}.")))
                })
                .map(|(_, c)| c)
                .sum()
        };
        assert!(
            sum(&two, &["depth", "image"]) < sum(&fused, &["fused"]),
            "stage {stage}"
        );
    }
}

#[test]
fn full_size_instantiates() {
    let m = build_dcn(DcnConfig::full(false), 1).unwrap();
    assert_eq!(m.params.scalar_count(), m.count_parameters(true).total);
}

#[test]
fn zero_stage_plan_counts_zero() {
    assert_eq!(count_parameters(&[], true).total, 0);
    let l = ConvLayerSpec::conv("x", 64, 128, 3, 2);
    assert_eq!(count_parameters(&[l], false).total, 73728);
}

#[test]
fn same_seed_same_parameters() {
    let a = build_dcn(DcnConfig::desk(false), 7).unwrap();
    let b = build_dcn(DcnConfig::desk(false), 7).unwrap();
    let c = build_dcn(DcnConfig::desk(false), 8).unwrap();
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, c.params);
    let a = build_cpn(CpnConfig::desk(32, 32), 3).unwrap();
    let b = build_cpn(CpnConfig::desk(32, 32), 3).unwrap();
    assert_eq!(a.params, b.params);
}

#[test]
fn unsupervised_variant_layers() {
    let sup = build_dcn(DcnConfig::desk(false), 1).unwrap();
    let uns = build_dcn(DcnConfig::desk(true), 1).unwrap();
    let first = |m: &DcnModel| {
        m.layers()
            .iter()
            .find(|l| l.name == "depth.stage0.conv1")
            .unwrap()
            .stride
    };
    assert_eq!(first(&sup), 1);
    assert_eq!(first(&uns), 2);
    assert!(!sup.final_upsample());
    assert!(uns.final_upsample());
    let s = Shape::new(1, 1, 16, 32);
    let out = uns
        .predict(&sparse(s, 0.1, 1), &random(s.with_channels(3), 0.0, 1.0, 2))
        .unwrap();
    assert_eq!(out.shape(), s);
    // nearest upsample: every 2x2 block is constant
    for h in (0..16).step_by(2) {
        for w in (0..32).step_by(2) {
            let v = out.at(0, 0, h, w);
            assert_eq!(v, out.at(0, 0, h + 1, w + 1));
            assert_eq!(v, out.at(0, 0, h, w + 1));
        }
    }
}

#[test]
fn mismatched_variant_stride_rejected() {
    let mut cfg = DcnConfig::desk(false);
    cfg.unsupervised_variant = true;
    assert!(build_dcn(cfg, 0).is_err());
}

#[test]
fn dcn_output_positive_and_shaped() {
    let m = build_dcn(DcnConfig::desk(false), 3).unwrap();
    for (h, w) in [(16, 48), (32, 96)] {
        let s = Shape::new(2, 1, h, w);
        let out = m
            .predict(
                &sparse(s, 0.05, 4),
                &random(s.with_channels(3), 0.0, 1.0, 5),
            )
            .unwrap();
        assert_eq!(out.shape(), s);
        assert!(out.min() > 0.0);
        assert!(out.is_finite());
    }
}

#[test]
fn dcn_depends_on_both_inputs() {
    let m = build_dcn(DcnConfig::desk(false), 3).unwrap();
    let s = Shape::new(1, 1, 16, 48);
    let z = sparse(s, 0.2, 4);
    let img = random(s.with_channels(3), 0.0, 1.0, 5);
    let base = m.predict(&z, &img).unwrap();
    let other = m.predict(&sparse(s, 0.2, 9), &img).unwrap();
    assert_ne!(base, other);
    assert_ne!(base, m.predict(&Tensor::zeros(s), &img).unwrap());
    assert_ne!(
        base,
        m.predict(&z, &Tensor::zeros(s.with_channels(3))).unwrap()
    );
    assert_eq!(base, m.predict(&z, &img).unwrap());
}

#[test]
fn dcn_rejects_misaligned_inputs() {
    let m = build_dcn(DcnConfig::desk(false), 3).unwrap();
    let err = m
        .predict(
            &Tensor::zeros(Shape::new(1, 1, 16, 48)),
            &Tensor::zeros(Shape::new(1, 3, 16, 32)),
        )
        .unwrap_err();
    assert!(err.to_string().contains("(1, 1, 16, 48)"), "{err}");
    assert!(m
        .predict(
            &Tensor::zeros(Shape::new(1, 1, 18, 48)),
            &Tensor::zeros(Shape::new(1, 3, 18, 48))
        )
        .is_err());
}

#[test]
fn cpn_reconstruction_shape() {
    for (h, w) in [(64, 192), (32, 96)] {
        let m = build_cpn(CpnConfig::desk(h, w), 1).unwrap();
        let s = Shape::new(1, 1, h, w);
        let out = m
            .reconstruct(
                &random(s, 1.0, 50.0, 1),
                &random(s.with_channels(3), 0.0, 1.0, 2),
            )
            .unwrap();
        assert_eq!(out.shape(), s);
        let zero = m
            .reconstruct(&Tensor::zeros(s), &Tensor::zeros(s.with_channels(3)))
            .unwrap();
        assert!(zero.is_finite());
    }
}

#[test]
fn cpn_desk_forward_under_a_second() {
    let start = Instant::now();
    let mut cfg = CpnConfig::desk(32, 32);
    cfg.image_encoder.k = 0.125;
    let m = build_cpn(cfg, 1).unwrap();
    let s = Shape::new(1, 1, 32, 32);
    m.reconstruct(
        &random(s, 1.0, 50.0, 1),
        &random(s.with_channels(3), 0.0, 1.0, 2),
    )
    .unwrap();
    assert!(start.elapsed().as_secs_f64() < 1.0);
}

#[test]
fn cpn_rejects_bad_eta_and_wide_bottleneck() {
    let mut cfg = CpnConfig::desk(32, 32);
    cfg.eta = 3;
    assert!(build_cpn(cfg, 0).is_err());
    let mut cfg = CpnConfig::desk(32, 32);
    cfg.bottleneck_channels = 64; // 64 * 4 * 4 = 1024 = 32 * 32
    let err = build_cpn(cfg, 0).unwrap_err();
    assert!(err.to_string().contains("compress"), "{err}");
    let cfg = CpnConfig::desk(32, 32);
    assert_eq!(cfg.bottleneck_size() * 16, 32 * 32);
}

#[test]
fn cpn_has_no_depth_skips() {
    let cfg = CpnConfig::desk(32, 32);
    let plan = cfg.plan();
    // the decoder only ever sees the bottleneck: first decoder layer consumes code + context
    let first = plan
        .iter()
        .find(|l| l.kind == LayerKind::ConvTranspose)
        .unwrap();
    assert_eq!(
        first.in_c,
        cfg.bottleneck_channels + cfg.image_encoder.channels()[2]
    );
    let ups: Vec<_> = plan
        .iter()
        .filter(|l| l.name.starts_with("decoder.up"))
        .collect();
    for w in ups.windows(2) {
        assert_eq!(w[0].out_c, w[1].in_c);
    }
}

#[test]
fn cpn_score_properties() {
    let m = build_cpn(CpnConfig::desk(16, 16), 2).unwrap();
    let s = Shape::new(1, 1, 16, 16);
    let d = random(s, 2.0, 20.0, 3);
    let img = random(s.with_channels(3), 0.0, 1.0, 4);
    let recon = m.reconstruct(&d, &img).unwrap();
    let e = cpn_score(&m, &d, &img).unwrap();
    let direct: f64 = recon
        .data()
        .iter()
        .zip(d.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    assert!((e - direct).abs() <= 1e-9 * direct.max(1.0));
    assert!(e >= 0.0);
}

fn toy_cpn() -> CpnModel {
    let mut cfg = CpnConfig::new(8, 8, 2, 0.0625, 2);
    cfg.bottleneck_channels = 1;
    cfg.depth_scale = 1.0;
    build_cpn(cfg, 11).unwrap()
}

#[test]
fn cpn_full_gradient_check() {
    let m = toy_cpn();
    let s = Shape::new(1, 1, 8, 8);
    let d = random(s, 0.5, 2.0, 1);
    let img = random(s.with_channels(3), 0.0, 1.0, 2);
    let mut inputs = vec![d, img];
    inputs.extend(m.params.tensors().iter().cloned());
    let err = grad_check(
        |g: &mut Graph, v| {
            let p = depthpost_core::networks::Bound {
                vars: v[2..].to_vec(),
            };
            let out = m.forward(g, &p, v[0], v[1])?;
            let sq = g.mul(out, out)?;
            Ok(g.sum(sq))
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "max rel err {err}");
}

#[test]
fn checkpoint_round_trip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_dcn(DcnConfig::desk(true), 5).unwrap();
    let mut meta = BTreeMap::new();
    meta.insert("step".to_string(), "42".to_string());
    let path = dir.path().join("dcn.ckpt");
    save_checkpoint(&path, &m.to_checkpoint(meta)).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.step(), 42);
    let back = DcnModel::from_checkpoint(&ck).unwrap();
    assert_eq!(back.config(), m.config());
    for (a, b) in back.params.tensors().iter().zip(m.params.tensors()) {
        let (a, b): (Vec<u64>, Vec<u64>) = (
            a.data().iter().map(|x| x.to_bits()).collect(),
            b.data().iter().map(|x| x.to_bits()).collect(),
        );
        assert_eq!(a, b);
    }
    assert!(CpnModel::from_checkpoint(&ck).is_err());

    let c = build_cpn(CpnConfig::desk(32, 96), 6).unwrap();
    let path = dir.path().join("cpn.ckpt");
    save_checkpoint(&path, &c.to_checkpoint(BTreeMap::new())).unwrap();
    let back = CpnModel::from_checkpoint(&load_checkpoint(&path).unwrap()).unwrap();
    assert_eq!(back.params, c.params);
    assert_eq!(back.config().depth_encoder.block, BlockKind::PlainConv);
}

#[test]
fn corrupt_checkpoint_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_cpn(CpnConfig::desk(16, 16), 5).unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &m.to_checkpoint(BTreeMap::new())).unwrap();
    let blob = dir.path().join("m.ckpt.bin");
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
    assert!(load_checkpoint(&path).is_err());
    std::fs::write(&path, "garbage\n").unwrap();
    assert!(load_checkpoint(&path)
        .unwrap_err()
        .to_string()
        .contains("m.ckpt"));
}
