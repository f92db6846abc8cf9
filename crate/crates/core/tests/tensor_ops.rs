use depthpost_core::tensor::grad_check;
use depthpost_core::{Error, Graph, Shape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: Shape, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

fn row(values: &[f64]) -> Tensor {
    Tensor::from_vec(Shape::new(1, 1, 1, values.len()), values.to_vec()).unwrap()
}

/// Direct summation over the receptive field, no im2col.
fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let oh = (xs.h + 2 * pad - ws.h) / stride + 1;
    let ow = (xs.w + 2 * pad - ws.w) / stride + 1;
    Tensor::from_fn(Shape::new(xs.n, ws.n, oh, ow), |n, oc, oy, ox| {
        let mut acc = b[oc];
        for ic in 0..xs.c {
            for ky in 0..ws.h {
                for kx in 0..ws.w {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                        acc += x.at(n, ic, iy as usize, ix as usize) * w.at(oc, ic, ky, kx);
                    }
                }
            }
        }
        acc
    })
}

#[test]
fn conv_center_element_sums_receptive_field() {
    let x = Tensor::from_vec(Shape::new(1, 1, 3, 3), (1..=9).map(f64::from).collect()).unwrap();
    let w = Tensor::ones(Shape::new(1, 1, 3, 3));
    let mut g = Graph::new();
    let (xv, wv, bv) = (
        g.constant(x.clone()),
        g.constant(w.clone()),
        g.constant(Tensor::zeros(Shape::new(1, 1, 1, 1))),
    );
    let y = g.conv2d(xv, wv, Some(bv), 1, 1).unwrap();
    assert_eq!(g.value(y).at(0, 0, 1, 1), 45.0);
    assert_eq!(g.value(y), &naive_conv(&x, &w, &[0.0], 1, 1));
}

#[test]
fn conv_matches_naive_for_strides() {
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (2, 0, 3), (1, 0, 1), (2, 1, 4)] {
        let x = random(Shape::new(2, 3, 7, 6), 11);
        let w = random(Shape::new(4, 3, k, k), 12);
        let b = vec![0.1, -0.2, 0.3, 0.0];
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let bv = g.constant(Tensor::from_vec(Shape::new(1, 1, 1, 4), b.clone()).unwrap());
        let y = g.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let expect = naive_conv(&x, &w, &b, stride, pad);
        assert_eq!(g.shape(y), expect.shape());
        for (a, e) in g.value(y).data().iter().zip(expect.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn delta_kernel_is_identity_and_zero_input_gives_zero() {
    let x = random(Shape::new(1, 1, 5, 4), 3);
    let mut delta = Tensor::zeros(Shape::new(1, 1, 3, 3));
    delta.set(0, 0, 1, 1, 1.0);
    let mut g = Graph::new();
    let (xv, dv) = (g.constant(x.clone()), g.constant(delta));
    let y = g.conv2d(xv, dv, None, 1, 1).unwrap();
    assert_eq!(g.value(y), &x);

    let z = g.constant(Tensor::zeros(Shape::new(1, 1, 5, 4)));
    let w = g.constant(random(Shape::new(2, 1, 3, 3), 4));
    let y = g.conv2d(z, w, None, 1, 1).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(Shape::new(1, 2, 4, 4)));
    let w = g.constant(Tensor::zeros(Shape::new(3, 5, 3, 3)));
    let err = g.conv2d(x, w, None, 1, 1).unwrap_err();
    let msg = err.to_string();
    assert!(
        msg.contains("(1, 2, 4, 4)") && msg.contains("(3, 5, 3, 3)"),
        "{msg}"
    );
    assert!(g.conv2d(x, x, None, 3, 1).is_err());
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    for (stride, pad, k, h, w) in [(1, 1, 3, 6, 5), (2, 1, 4, 8, 6), (2, 1, 3, 7, 9)] {
        let weight = random(Shape::new(3, 2, k, k), 21);
        let y = random(Shape::new(2, 2, h, w), 22);
        let mut g = Graph::new();
        let (yv, wv) = (g.constant(y.clone()), g.constant(weight.clone()));
        let conv_y = g.conv2d(yv, wv, None, stride, pad).unwrap();
        let x = random(g.shape(conv_y), 23);
        let xv = g.constant(x.clone());
        let convt_x = g.conv_transpose2d(xv, wv, None, stride, pad).unwrap();
        let expect_h = (g.shape(conv_y).h - 1) * stride + k - 2 * pad;
        assert_eq!(g.shape(convt_x).h, expect_h);
        if expect_h != h {
            continue;
        }
        let lhs = g.value(convt_x).dot(&y).unwrap();
        let rhs = x.dot(g.value(conv_y)).unwrap();
        assert!(
            (lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()),
            "{lhs} vs {rhs}"
        );
    }
}

#[test]
fn conv_transpose_trivial_cases() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(Shape::new(1, 1, 1, 1), 3.0));
    let w = g.constant(Tensor::full(Shape::new(1, 1, 1, 1), -2.5));
    let y = g.conv_transpose2d(x, w, None, 1, 0).unwrap();
    assert_eq!(g.value(y).data(), &[-7.5]);

    let z = g.constant(Tensor::zeros(Shape::new(1, 2, 3, 3)));
    let w = g.constant(random(Shape::new(2, 3, 4, 4), 5));
    let y = g.conv_transpose2d(z, w, None, 2, 1).unwrap();
    assert_eq!(g.shape(y), Shape::new(1, 3, 6, 6));
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    assert!(g.conv_transpose2d(w, w, None, 2, 1).is_err());
}

#[test]
fn relu_values_and_gradient() {
    let mut g = Graph::new();
    let x = g.param(row(&[-1.0, 0.0, 2.0]));
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);

    let mut g = Graph::new();
    let x = g.param(row(&[-1.0, -3.0]));
    let y = g.relu(x);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0]);
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0]);

    let x = random(Shape::new(1, 2, 3, 3), 30).map(|v| if v.abs() < 0.05 { 0.3 } else { v });
    let err = grad_check(
        |g, v| {
            let r = g.relu(v[0]);
            let sq = g.mul(r, r)?;
            Ok(g.sum(sq))
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn concat_and_slice() {
    let a = random(Shape::new(1, 2, 4, 4), 40);
    let b = random(Shape::new(1, 3, 4, 4), 41);
    let mut g = Graph::new();
    let (av, bv) = (g.param(a.clone()), g.param(b.clone()));
    let c = g.concat_channels(av, bv).unwrap();
    assert_eq!(g.shape(c), Shape::new(1, 5, 4, 4));
    assert_eq!(g.value(c).slice_channels(0, 2).unwrap(), a);
    assert_eq!(g.value(c).slice_channels(2, 5).unwrap(), b);
    let s = g.sum(c);
    g.backward(s).unwrap();
    assert!(g.grad(av).unwrap().data().iter().all(|&v| v == 1.0));
    assert!(g.grad(bv).unwrap().data().iter().all(|&v| v == 1.0));

    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(Shape::new(1, 1, 4, 4)));
    let y = g.constant(Tensor::zeros(Shape::new(1, 1, 4, 5)));
    assert!(matches!(
        g.concat_channels(x, y),
        Err(Error::ShapeMismatch { .. })
    ));

    let err = grad_check(
        |g, v| {
            let c = g.concat_channels(v[0], v[1])?;
            let sq = g.mul(c, c)?;
            Ok(g.sum(sq))
        },
        &[
            random(Shape::new(2, 1, 2, 3), 42),
            random(Shape::new(2, 2, 2, 3), 43),
        ],
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn upsample_blocks() {
    let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = g.upsample_nearest2x(xv);
    let expect = [
        1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.,
    ];
    assert_eq!(g.value(y).data(), &expect);
    assert_eq!(g.value(y).sum(), 4.0 * x.sum());
    let err = grad_check(
        |g, v| {
            let u = g.upsample_nearest2x(v[0]);
            let sq = g.mul(u, u)?;
            Ok(g.sum(sq))
        },
        &[random(Shape::new(1, 2, 3, 2), 50)],
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn power_penalty_values() {
    let mut g = Graph::new();
    let a = g.constant(row(&[3.0, -4.0]));
    let p1 = g.power_penalty(a, 1, None).unwrap();
    let b = g.constant(row(&[3.0, 4.0]));
    let p2 = g.power_penalty(b, 2, None).unwrap();
    assert_eq!(g.value(p1).item(), 7.0);
    assert_eq!(g.value(p2).item(), 25.0);
    assert!(g.power_penalty(a, 3, None).is_err());
    let mask = row(&[1.0, 0.0]);
    let pm = g.power_penalty(a, 1, Some(&mask)).unwrap();
    assert_eq!(g.value(pm).item(), 3.0);
}

#[test]
fn power_penalty_gradients() {
    for p in [1, 2] {
        let x =
            random(Shape::new(1, 1, 3, 4), 60 + p as u64)
                .map(|v| if v.abs() < 0.05 { 0.5 } else { v });
        let mask = Tensor::from_fn(x.shape(), |_, _, h, w| ((h + w) % 2) as f64);
        let err = grad_check(|g, v| g.power_penalty(v[0], p, Some(&mask)), &[x], 1e-5).unwrap();
        assert!(err <= 1e-5, "p={p}: {err}");
    }
    // subgradient at exactly zero is zero
    let mut g = Graph::new();
    let x = g.param(row(&[0.0, 2.0]));
    let p = g.power_penalty(x, 1, None).unwrap();
    g.backward(p).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn backward_chain_rule_and_errors() {
    let mut g = Graph::new();
    let x = g.param(row(&[1.0]));
    let two_x = g.scale(x, 2.0);
    let loss = g.power_penalty(two_x, 2, None).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 8.0);
    assert!(matches!(g.backward(loss), Err(Error::BackwardTwice)));

    let mut g = Graph::new();
    let x = g.param(row(&[1.0, 2.0]));
    let c = g.constant(row(&[5.0]));
    let loss = g.sum(c);
    g.backward(loss).unwrap();
    assert_eq!(g.grad_or_zeros(x).data(), &[0.0, 0.0]);

    let mut g = Graph::new();
    let x = g.param(row(&[1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn grad_check_linear_and_degenerate_eps() {
    let w = random(Shape::new(1, 1, 2, 3), 70);
    let err = grad_check(
        |g, v| {
            let wv = g.constant(w.clone());
            let p = g.mul(v[0], wv)?;
            Ok(g.sum(p))
        },
        &[random(Shape::new(1, 1, 2, 3), 71)],
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-9, "{err}");
    assert!(grad_check(|g, v| Ok(g.sum(v[0])), &[row(&[1.0])], 0.0).is_err());
}

#[test]
fn conv_relu_penalty_composite_gradient() {
    let x = random(Shape::new(2, 2, 5, 5), 80);
    let w = random(Shape::new(3, 2, 3, 3), 81);
    let b = random(Shape::new(1, 1, 1, 3), 82);
    let wt = random(Shape::new(3, 2, 4, 4), 83);
    let err = grad_check(
        |g, v| {
            let h = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            let h = g.relu(h);
            let up = g.conv_transpose2d(h, v[3], None, 2, 1)?;
            let sp = g.softplus(up);
            g.power_penalty(sp, 2, None)
        },
        &[x, w, b, wt],
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn forward_ops_are_pure() {
    let x = random(Shape::new(1, 2, 6, 6), 90);
    let w = random(Shape::new(2, 2, 3, 3), 91);
    let run = || {
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv2d(xv, wv, None, 2, 1).unwrap();
        let y = g.softplus(y);
        g.value(y).clone()
    };
    assert_eq!(run().data(), run().data());
}

proptest! {
    #[test]
    fn l1_bounded_by_l2(values in proptest::collection::vec(-100.0f64..100.0, 1..40)) {
        let n = values.len() as f64;
        let mut g = Graph::new();
        let x = g.constant(row(&values));
        let l1 = g.power_penalty(x, 1, None).unwrap();
        let l2 = g.power_penalty(x, 2, None).unwrap();
        prop_assert!(g.value(l1).item() <= (n * g.value(l2).item()).sqrt() * (1.0 + 1e-12) + 1e-12);
    }
}
