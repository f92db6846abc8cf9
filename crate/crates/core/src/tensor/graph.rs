use crate::error::{Error, Result};
use crate::geometry::{ssim_backward, ssim_forward, warp_backward, warp_forward};

use super::kernels::{self, ConvGeom};
use super::{Shape, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Relu(Var),
    Softplus(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: f64,
    },
    ConcatChannels(Var, Var),
    UpsampleNearest2x(Var),
    PowerPenalty {
        x: Var,
        p: u32,
        mask: Option<Tensor>,
    },
    MaskedSum {
        x: Var,
        mask: Option<Tensor>,
    },
    ScaledReciprocal {
        x: Var,
        numerator: f64,
    },
    WarpHorizontal {
        image: Var,
        disparity: Var,
        sign: f64,
    },
    Ssim(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A reverse-mode tape. Nodes are appended in evaluation order, so the node
/// list is always a valid topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn mismatch(op: &'static str, left: Shape, right: Shape) -> Error {
    Error::ShapeMismatch { op, left, right }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf. Leaves with `requires_grad` receive a gradient on backward.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads[v.0].as_ref()?;
        Tensor::from_vec(self.shape(v), g.clone()).ok()
    }

    /// Like [`Graph::grad`] but returns zeros for leaves the loss does not reach.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v).unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        if ws.c != xs.c {
            return Err(mismatch("conv2d", xs, ws));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::invalid(format!(
                "conv2d: stride must be 1 or 2, got {stride}"
            )));
        }
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs.numel() != ws.n {
                return Err(mismatch("conv2d bias", ws, bs));
            }
        }
        let geom = ConvGeom::new(xs.c, xs.h, xs.w, ws.h, ws.w, stride, pad)
            .ok_or_else(|| mismatch("conv2d", xs, ws))?;
        let out_shape = Shape::new(xs.n, ws.n, geom.out_h, geom.out_w);
        let mut out = vec![0.0; out_shape.numel()];
        kernels::conv2d_forward(
            &geom,
            xs.n,
            ws.n,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &mut out,
        );
        let rg = self.rg(&[input, weight]) || bias.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(
            Tensor::from_vec(out_shape, out)?,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Transposed convolution with weight layout `(in_c, out_c, k_h, k_w)`.
    /// Output size is `(H - 1)·stride - 2·pad + k`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        if ws.n != xs.c {
            return Err(mismatch("conv_transpose2d", xs, ws));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::invalid(format!(
                "conv_transpose2d: stride must be 1 or 2, got {stride}"
            )));
        }
        let out_h = ((xs.h - 1) * stride + ws.h).checked_sub(2 * pad);
        let out_w = ((xs.w - 1) * stride + ws.w).checked_sub(2 * pad);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(mismatch("conv_transpose2d", xs, ws));
        };
        if xs.h == 0 || xs.w == 0 || out_h == 0 || out_w == 0 {
            return Err(mismatch("conv_transpose2d", xs, ws));
        }
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs.numel() != ws.c {
                return Err(mismatch("conv_transpose2d bias", ws, bs));
            }
        }
        let geom = ConvGeom::new(ws.c, out_h, out_w, ws.h, ws.w, stride, pad)
            .ok_or_else(|| mismatch("conv_transpose2d", xs, ws))?;
        debug_assert_eq!((geom.out_h, geom.out_w), (xs.h, xs.w));
        let out_shape = Shape::new(xs.n, ws.c, out_h, out_w);
        let mut out = vec![0.0; out_shape.numel()];
        kernels::conv_transpose_forward(
            &geom,
            xs.n,
            xs.c,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &mut out,
        );
        let rg = self.rg(&[input, weight]) || bias.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(
            Tensor::from_vec(out_shape, out)?,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.requires_grad(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(softplus);
        let rg = self.requires_grad(x);
        self.push(out, Op::Softplus(x), rg)
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op, sa, sb));
        }
        self.value(a).zip_map(self.value(b), f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `scale·x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let rg = self.requires_grad(x);
        self.push(out, Op::Affine { x, scale }, rg)
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !sa.same_spatial(&sb) {
            return Err(mismatch("concat_channels", sa, sb));
        }
        let out_shape = sa.with_channels(sa.c + sb.c);
        let (la, lb) = (sa.c * sa.plane(), sb.c * sb.plane());
        let mut out = Vec::with_capacity(out_shape.numel());
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for n in 0..sa.n {
            out.extend_from_slice(&da[n * la..(n + 1) * la]);
            out.extend_from_slice(&db[n * lb..(n + 1) * lb]);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_vec(out_shape, out)?,
            Op::ConcatChannels(a, b),
            rg,
        ))
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let src = self.value(x);
        let out = Tensor::from_fn(Shape::new(s.n, s.c, 2 * s.h, 2 * s.w), |n, c, h, w| {
            src.at(n, c, h / 2, w / 2)
        });
        let rg = self.requires_grad(x);
        self.push(out, Op::UpsampleNearest2x(x), rg)
    }

    /// `Σ mask_i·|x_i|^p` for `p ∈ {1, 2}`; the subgradient of `|x|` at 0 is 0.
    pub fn power_penalty(&mut self, x: Var, p: u32, mask: Option<&Tensor>) -> Result<Var> {
        if !(p == 1 || p == 2) {
            return Err(Error::invalid(format!(
                "power_penalty: exponent must be 1 or 2, got {p}"
            )));
        }
        let xv = self.value(x);
        if let Some(m) = mask {
            if m.shape() != xv.shape() {
                return Err(mismatch("power_penalty mask", xv.shape(), m.shape()));
            }
        }
        let term = |v: f64| if p == 1 { v.abs() } else { v * v };
        let total: f64 = match mask {
            Some(m) => xv
                .data()
                .iter()
                .zip(m.data())
                .map(|(&v, &w)| w * term(v))
                .sum(),
            None => xv.data().iter().map(|&v| term(v)).sum(),
        };
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::scalar(total),
            Op::PowerPenalty {
                x,
                p,
                mask: mask.cloned(),
            },
            rg,
        ))
    }

    /// `Σ mask_i·x_i` (plain sum when no mask is given).
    pub fn masked_sum(&mut self, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(m) = mask {
            if m.shape() != xv.shape() {
                return Err(mismatch("masked_sum mask", xv.shape(), m.shape()));
            }
        }
        let total = match mask {
            Some(m) => xv.dot(m)?,
            None => xv.sum(),
        };
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::scalar(total),
            Op::MaskedSum {
                x,
                mask: mask.cloned(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.masked_sum(x, None).expect("unmasked sum cannot fail")
    }

    /// `numerator / x`, elementwise; every element of `x` must be positive.
    pub fn scaled_reciprocal(&mut self, x: Var, numerator: f64) -> Result<Var> {
        let xv = self.value(x);
        if let Some((index, &value)) = xv.data().iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(Error::NonPositiveDepth { index, value });
        }
        let out = xv.map(|v| numerator / v);
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::ScaledReciprocal { x, numerator }, rg))
    }

    /// Samples `image` along each row at `x + sign·disparity(x)` with linear
    /// interpolation. Returns the warped image and a 0/1 in-bounds mask
    /// shaped like `disparity`.
    pub fn warp_horizontal(
        &mut self,
        image: Var,
        disparity: Var,
        sign: f64,
    ) -> Result<(Var, Tensor)> {
        let (si, sd) = (self.shape(image), self.shape(disparity));
        if sd.c != 1 || !si.same_spatial(&sd) {
            return Err(mismatch("warp_horizontal", si, sd));
        }
        let (out, mask) = warp_forward(self.value(image), self.value(disparity), sign);
        let rg = self.rg(&[image, disparity]);
        let v = self.push(
            out,
            Op::WarpHorizontal {
                image,
                disparity,
                sign,
            },
            rg,
        );
        Ok((v, mask))
    }

    /// Per-channel SSIM over 3×3 neighbourhoods (clipped at the border).
    pub fn ssim_map(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch("ssim_map", sa, sb));
        }
        if sa.h < 3 || sa.w < 3 {
            return Err(Error::invalid(format!(
                "ssim_map: images must be at least 3x3, got {sa}"
            )));
        }
        let out = ssim_forward(self.value(a), self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Ssim(a, b), rg))
    }

    /// Back-propagates from a scalar. Allowed once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let ls = self.shape(loss);
        if !ls.is_scalar() {
            return Err(Error::NonScalarLoss(ls));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g);
        }
        for (node, grad) in self.nodes.iter().zip(&mut self.grads) {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                *grad = None;
            }
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: &[f64]) {
        let mut acc = GradAcc {
            nodes: &self.nodes,
            grads: &mut self.grads,
        };
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (n, oc) = (
                    nodes[input.0].value.shape().n,
                    nodes[weight.0].value.shape().n,
                );
                let mut gi = acc.take(*input);
                let mut gw = acc.take(*weight);
                let mut gb = bias.and_then(|b| acc.take(b));
                kernels::conv2d_backward(
                    geom,
                    n,
                    oc,
                    val(*input),
                    val(*weight),
                    g,
                    gi.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                acc.put(*input, gi);
                acc.put(*weight, gw);
                if let Some(b) = bias {
                    acc.put(*b, gb);
                }
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let xs = nodes[input.0].value.shape();
                let mut gi = acc.take(*input);
                let mut gw = acc.take(*weight);
                let mut gb = bias.and_then(|b| acc.take(b));
                kernels::conv_transpose_backward(
                    geom,
                    xs.n,
                    xs.c,
                    val(*input),
                    val(*weight),
                    g,
                    gi.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                acc.put(*input, gi);
                acc.put(*weight, gw);
                if let Some(b) = bias {
                    acc.put(*b, gb);
                }
            }
            Op::Relu(x) => {
                let xv = val(*x);
                acc.update(*x, |gx| {
                    for ((o, &gv), &v) in gx.iter_mut().zip(g).zip(xv) {
                        if v > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Softplus(x) => {
                let xv = val(*x);
                acc.update(*x, |gx| {
                    for ((o, &gv), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *o += gv * sigmoid(v);
                    }
                });
            }
            Op::Add(a, b) => {
                acc.update(*a, |gx| axpy(gx, g, 1.0));
                acc.update(*b, |gx| axpy(gx, g, 1.0));
            }
            Op::Sub(a, b) => {
                acc.update(*a, |gx| axpy(gx, g, 1.0));
                acc.update(*b, |gx| axpy(gx, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc.update(*a, |gx| {
                    for ((o, &gv), &y) in gx.iter_mut().zip(g).zip(bv) {
                        *o += gv * y;
                    }
                });
                acc.update(*b, |gx| {
                    for ((o, &gv), &y) in gx.iter_mut().zip(g).zip(av) {
                        *o += gv * y;
                    }
                });
            }
            Op::Affine { x, scale } => {
                acc.update(*x, |gx| axpy(gx, g, *scale));
            }
            Op::ConcatChannels(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (la, lb) = (sa.c * sa.plane(), sb.c * sb.plane());
                acc.update(*a, |ga| {
                    for n in 0..sa.n {
                        axpy(
                            &mut ga[n * la..(n + 1) * la],
                            &g[n * (la + lb)..n * (la + lb) + la],
                            1.0,
                        );
                    }
                });
                acc.update(*b, |gb| {
                    for n in 0..sa.n {
                        axpy(
                            &mut gb[n * lb..(n + 1) * lb],
                            &g[n * (la + lb) + la..(n + 1) * (la + lb)],
                            1.0,
                        );
                    }
                });
            }
            Op::UpsampleNearest2x(x) => {
                let s = nodes[x.0].value.shape();
                acc.update(*x, |gx| {
                    let ow = 2 * s.w;
                    for nc in 0..s.n * s.c {
                        let src = &g[nc * 4 * s.plane()..(nc + 1) * 4 * s.plane()];
                        let dst = &mut gx[nc * s.plane()..(nc + 1) * s.plane()];
                        for y in 0..2 * s.h {
                            for xx in 0..ow {
                                dst[(y / 2) * s.w + xx / 2] += src[y * ow + xx];
                            }
                        }
                    }
                });
            }
            Op::PowerPenalty { x, p, mask } => {
                let xv = val(*x);
                let go = g[0];
                let d = |v: f64| if *p == 1 { sign0(v) } else { 2.0 * v };
                acc.update(*x, |gx| match mask {
                    Some(m) => {
                        for ((o, &v), &w) in gx.iter_mut().zip(xv).zip(m.data()) {
                            *o += go * w * d(v);
                        }
                    }
                    None => {
                        for (o, &v) in gx.iter_mut().zip(xv) {
                            *o += go * d(v);
                        }
                    }
                });
            }
            Op::MaskedSum { x, mask } => {
                let go = g[0];
                acc.update(*x, |gx| match mask {
                    Some(m) => axpy(gx, m.data(), go),
                    None => gx.iter_mut().for_each(|o| *o += go),
                });
            }
            Op::ScaledReciprocal { x, numerator } => {
                let xv = val(*x);
                acc.update(*x, |gx| {
                    for ((o, &gv), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *o -= gv * numerator / (v * v);
                    }
                });
            }
            Op::WarpHorizontal {
                image,
                disparity,
                sign,
            } => {
                let (iv, dv) = (&nodes[image.0].value, &nodes[disparity.0].value);
                let mut gi = acc.take(*image);
                let mut gd = acc.take(*disparity);
                warp_backward(iv, dv, *sign, g, gi.as_deref_mut(), gd.as_deref_mut());
                acc.put(*image, gi);
                acc.put(*disparity, gd);
            }
            Op::Ssim(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let mut ga = acc.take(*a);
                let mut gb = if a == b { acc.fresh(*b) } else { acc.take(*b) };
                ssim_backward(av, bv, g, ga.as_deref_mut(), gb.as_deref_mut());
                acc.put(*a, ga);
                if a == b {
                    if let Some(gb) = gb {
                        acc.update(*b, |gx| axpy(gx, &gb, 1.0));
                    }
                } else {
                    acc.put(*b, gb);
                }
            }
        }
    }
}

/// Gradient buffers of a graph during one backward step. Buffers are taken
/// out while a kernel writes into them and put back afterwards.
struct GradAcc<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl GradAcc<'_> {
    fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(
            self.grads[v.0]
                .take()
                .unwrap_or_else(|| vec![0.0; node.value.len()]),
        )
    }

    fn fresh(&self, v: Var) -> Option<Vec<f64>> {
        let node = &self.nodes[v.0];
        node.requires_grad.then(|| vec![0.0; node.value.len()])
    }

    fn put(&mut self, v: Var, g: Option<Vec<f64>>) {
        if let Some(g) = g {
            self.grads[v.0] = Some(g);
        }
    }

    fn update(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if let Some(mut g) = self.take(v) {
            f(&mut g);
            self.grads[v.0] = Some(g);
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
