use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use depthpost_core::data::{generate_scene, sample_sparse, SceneConfig};
use depthpost_core::geometry::ssim_map;
use depthpost_core::networks::{build_cpn, build_dcn, CpnConfig, DcnConfig};
use depthpost_core::{Graph, Shape, Tensor};

fn filled(shape: Shape, seed: usize) -> Tensor {
    Tensor::from_fn(shape, |n, c, h, w| {
        (((n + 3 * c + 7 * h + 11 * w + seed) % 17) as f64) / 17.0 - 0.4
    })
}

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3x3_forward_backward");
    for &(ch, h, w) in &[(8usize, 32usize, 96usize), (32, 16, 48)] {
        let x = filled(Shape::new(1, ch, h, w), 1);
        let k = filled(Shape::new(ch, ch, 3, 3), 2);
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{ch}x{h}x{w}")),
            &(x, k),
            |b, (x, k)| {
                b.iter(|| {
                    let mut g = Graph::new();
                    let xv = g.param(x.clone());
                    let kv = g.param(k.clone());
                    let y = g.conv2d(xv, kv, None, 1, 1).unwrap();
                    let l = g.sum(y);
                    g.backward(l).unwrap();
                    black_box(g.grad(kv))
                })
            },
        );
    }
    group.finish();
}

fn networks(c: &mut Criterion) {
    let scene = generate_scene(1, &SceneConfig::new(32, 96)).unwrap();
    let sample = sample_sparse(&scene, 0.05, 1).unwrap();
    let z = sample.z_map();
    let dcn = build_dcn(DcnConfig::desk(false), 0).unwrap();
    c.bench_function("dcn_desk_step_32x96", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let p = dcn.params.bind(&mut g, true);
            let zv = g.constant(z.clone());
            let iv = g.constant(scene.image.clone());
            let d = dcn.forward(&mut g, &p, zv, iv).unwrap();
            let l = g.sum(d);
            g.backward(l).unwrap();
            black_box(g.grad(p.vars[0]))
        })
    });
    let cpn = build_cpn(CpnConfig::desk(32, 96), 0).unwrap();
    c.bench_function("cpn_desk_step_32x96", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let p = cpn.params.bind(&mut g, true);
            let dv = g.constant(scene.depth.clone());
            let iv = g.constant(scene.image.clone());
            let e = cpn.score_var(&mut g, &p, dv, iv).unwrap();
            g.backward(e).unwrap();
            black_box(g.grad(p.vars[0]))
        })
    });
}

fn ssim(c: &mut Criterion) {
    let a = filled(Shape::new(1, 3, 64, 192), 3);
    let b = filled(Shape::new(1, 3, 64, 192), 5);
    c.bench_function("ssim_map_64x192", |bench| {
        bench.iter(|| black_box(ssim_map(&a, &b).unwrap()))
    });
}

criterion_group!(benches, conv, networks, ssim);
criterion_main!(benches);
