//! Convolution kernels (im2col + GEMM) on raw `f64` buffers.

/// Geometry of a 2-D convolution over one image plane stack.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        in_c: usize,
        in_h: usize,
        in_w: usize,
        k_h: usize,
        k_w: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        let span_h = in_h + 2 * pad;
        let span_w = in_w + 2 * pad;
        if span_h < k_h || span_w < k_w || stride == 0 {
            return None;
        }
        Some(ConvGeom {
            in_c,
            in_h,
            in_w,
            k_h,
            k_w,
            stride,
            pad,
            out_h: (span_h - k_h) / stride + 1,
            out_w: (span_w - k_w) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.in_c * self.k_h * self.k_w
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// `c = a · b (+ c when accumulate)`, with `a` m×k and `b` k×n, both
/// optionally stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds `input` (in_c × in_h × in_w) into `col` (in_c·k_h·k_w × out_h·out_w).
pub(crate) fn im2col(g: &ConvGeom, input: &[f64], col: &mut [f64]) {
    let cols = g.col_cols();
    let mut row = 0;
    for c in 0..g.in_c {
        let plane = &input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k_h {
            for kx in 0..g.k_w {
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `col` back into `out`, accumulating.
pub(crate) fn col2im(g: &ConvGeom, col: &[f64], out: &mut [f64]) {
    let cols = g.col_cols();
    let mut row = 0;
    for c in 0..g.in_c {
        let plane = &mut out[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k_h {
            for kx in 0..g.k_w {
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, &v) in src[oy * g.out_w..(oy + 1) * g.out_w].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            dst[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Forward convolution over a batch. `weight` is out_c × (in_c·k_h·k_w).
pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    batch: usize,
    out_c: usize,
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    out: &mut [f64],
) {
    let in_len = g.in_c * g.in_h * g.in_w;
    let out_len = out_c * g.col_cols();
    let mut col = vec![0.0; g.col_rows() * g.col_cols()];
    for b in 0..batch {
        im2col(g, &input[b * in_len..(b + 1) * in_len], &mut col);
        let dst = &mut out[b * out_len..(b + 1) * out_len];
        gemm(
            out_c,
            g.col_rows(),
            g.col_cols(),
            weight,
            false,
            &col,
            false,
            dst,
            false,
        );
        if let Some(bias) = bias {
            for (oc, &bv) in bias.iter().enumerate() {
                for v in &mut dst[oc * g.col_cols()..(oc + 1) * g.col_cols()] {
                    *v += bv;
                }
            }
        }
    }
}

/// Gradients of [`conv2d_forward`]; each destination is accumulated into.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    batch: usize,
    out_c: usize,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    mut grad_input: Option<&mut [f64]>,
    mut grad_weight: Option<&mut [f64]>,
    mut grad_bias: Option<&mut [f64]>,
) {
    let in_len = g.in_c * g.in_h * g.in_w;
    let cols = g.col_cols();
    let out_len = out_c * cols;
    let mut col = vec![0.0; g.col_rows() * cols];
    for b in 0..batch {
        let go = &grad_out[b * out_len..(b + 1) * out_len];
        if let Some(gw) = grad_weight.as_deref_mut() {
            im2col(g, &input[b * in_len..(b + 1) * in_len], &mut col);
            gemm(out_c, cols, g.col_rows(), go, false, &col, true, gw, true);
        }
        if let Some(gi) = grad_input.as_deref_mut() {
            gemm(
                g.col_rows(),
                out_c,
                cols,
                weight,
                true,
                go,
                false,
                &mut col,
                false,
            );
            col2im(g, &col, &mut gi[b * in_len..(b + 1) * in_len]);
        }
        if let Some(gb) = grad_bias.as_deref_mut() {
            for (oc, acc) in gb.iter_mut().enumerate() {
                *acc += go[oc * cols..(oc + 1) * cols].iter().sum::<f64>();
            }
        }
    }
}

/// Transposed convolution: the adjoint of a convolution whose geometry `g`
/// maps the (wide) output back to the input. `weight` is
/// in_t × (out_t·k_h·k_w) where `in_t == g.out` channels.
pub(crate) fn conv_transpose_forward(
    g: &ConvGeom,
    batch: usize,
    in_t: usize,
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    out: &mut [f64],
) {
    let cols = g.col_cols();
    let in_len = in_t * cols;
    let out_len = g.in_c * g.in_h * g.in_w;
    let mut col = vec![0.0; g.col_rows() * cols];
    for b in 0..batch {
        gemm(
            g.col_rows(),
            in_t,
            cols,
            weight,
            true,
            &input[b * in_len..(b + 1) * in_len],
            false,
            &mut col,
            false,
        );
        let dst = &mut out[b * out_len..(b + 1) * out_len];
        col2im(g, &col, dst);
        if let Some(bias) = bias {
            let plane = g.in_h * g.in_w;
            for (oc, &bv) in bias.iter().enumerate() {
                for v in &mut dst[oc * plane..(oc + 1) * plane] {
                    *v += bv;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose_backward(
    g: &ConvGeom,
    batch: usize,
    in_t: usize,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    mut grad_input: Option<&mut [f64]>,
    mut grad_weight: Option<&mut [f64]>,
    mut grad_bias: Option<&mut [f64]>,
) {
    let cols = g.col_cols();
    let in_len = in_t * cols;
    let out_len = g.in_c * g.in_h * g.in_w;
    let plane = g.in_h * g.in_w;
    let mut col = vec![0.0; g.col_rows() * cols];
    for b in 0..batch {
        let go = &grad_out[b * out_len..(b + 1) * out_len];
        im2col(g, go, &mut col);
        if let Some(gi) = grad_input.as_deref_mut() {
            gemm(
                in_t,
                g.col_rows(),
                cols,
                weight,
                false,
                &col,
                false,
                &mut gi[b * in_len..(b + 1) * in_len],
                true,
            );
        }
        if let Some(gw) = grad_weight.as_deref_mut() {
            gemm(
                in_t,
                cols,
                g.col_rows(),
                &input[b * in_len..(b + 1) * in_len],
                false,
                &col,
                true,
                gw,
                true,
            );
        }
        if let Some(gb) = grad_bias.as_deref_mut() {
            for (oc, acc) in gb.iter_mut().enumerate() {
                *acc += go[oc * plane..(oc + 1) * plane].iter().sum::<f64>();
            }
        }
    }
}
