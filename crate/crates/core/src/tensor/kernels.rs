//! Raw slice kernels shared by the tape and by untaped simulation code.

use super::{Boundary, Padding};

/// `c = a · b + beta · c` for logical shapes `a: [m, k]`, `b: [k, n]`.
///
/// With `a_t` set, `a` is stored as `[k, m]`; with `b_t`, `b` as `[n, k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above pin every buffer to exactly the extent the
    // strides address, and `c` does not alias `a` or `b`.
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

#[inline]
fn pad_index(i: isize, n: usize, pad: Padding) -> Option<usize> {
    let n_i = n as isize;
    if (0..n_i).contains(&i) {
        return Some(i as usize);
    }
    match pad {
        Padding::Zero => None,
        Padding::Reflect => {
            let r = if i < 0 { -i } else { 2 * n_i - 2 - i };
            Some(r as usize)
        }
    }
}

pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvDims {
    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.batch * self.h * self.w
    }
}

/// Unfolds `x: [B, Ci, H, W]` into `[Ci·K·K, B·H·W]`.
fn im2col(x: &[f64], d: &ConvDims, pad: Padding) -> Vec<f64> {
    let (h, w, k) = (d.h, d.w, d.k);
    let p = (k / 2) as isize;
    let hw = h * w;
    let n = d.cols();
    let mut cols = vec![0.0; d.rows() * n];
    for c in 0..d.c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for b in 0..d.batch {
                    let src = &x[(b * d.c_in + c) * hw..(b * d.c_in + c + 1) * hw];
                    for y in 0..h {
                        let Some(sy) = pad_index(y as isize + ky as isize - p, h, pad) else {
                            continue;
                        };
                        let out = &mut dst[b * hw + y * w..b * hw + (y + 1) * w];
                        for (xx, o) in out.iter_mut().enumerate() {
                            if let Some(sx) = pad_index(xx as isize + kx as isize - p, w, pad) {
                                *o = src[sy * w + sx];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im(cols: &[f64], d: &ConvDims, pad: Padding) -> Vec<f64> {
    let (h, w, k) = (d.h, d.w, d.k);
    let p = (k / 2) as isize;
    let hw = h * w;
    let n = d.cols();
    let mut x = vec![0.0; d.batch * d.c_in * hw];
    for c in 0..d.c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for b in 0..d.batch {
                    let dst = &mut x[(b * d.c_in + c) * hw..(b * d.c_in + c + 1) * hw];
                    for y in 0..h {
                        let Some(sy) = pad_index(y as isize + ky as isize - p, h, pad) else {
                            continue;
                        };
                        for xx in 0..w {
                            if let Some(sx) = pad_index(xx as isize + kx as isize - p, w, pad) {
                                dst[sy * w + sx] += src[b * hw + y * w + xx];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

pub(crate) fn conv2d_forward(
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    d: &ConvDims,
    pad: Padding,
) -> Vec<f64> {
    let cols = im2col(x, d, pad);
    let n = d.cols();
    let mut out_mat = vec![0.0; d.c_out * n];
    gemm(d.c_out, d.rows(), n, weight, false, &cols, false, 0.0, &mut out_mat);
    let hw = d.h * d.w;
    let mut out = vec![0.0; d.batch * d.c_out * hw];
    for co in 0..d.c_out {
        let b0 = bias.map_or(0.0, |b| b[co]);
        for b in 0..d.batch {
            let src = &out_mat[co * n + b * hw..co * n + (b + 1) * hw];
            let dst = &mut out[(b * d.c_out + co) * hw..(b * d.c_out + co + 1) * hw];
            for (o, s) in dst.iter_mut().zip(src) {
                *o = s + b0;
            }
        }
    }
    out
}

/// Returns `(d_input, d_weight, d_bias)`.
pub(crate) fn conv2d_backward(
    grad: &[f64],
    x: &[f64],
    weight: &[f64],
    d: &ConvDims,
    pad: Padding,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hw = d.h * d.w;
    let n = d.cols();
    let mut g_mat = vec![0.0; d.c_out * n];
    let mut d_bias = vec![0.0; d.c_out];
    for co in 0..d.c_out {
        for b in 0..d.batch {
            let src = &grad[(b * d.c_out + co) * hw..(b * d.c_out + co + 1) * hw];
            g_mat[co * n + b * hw..co * n + (b + 1) * hw].copy_from_slice(src);
            d_bias[co] += src.iter().sum::<f64>();
        }
    }
    let cols = im2col(x, d, pad);
    let mut d_weight = vec![0.0; d.c_out * d.rows()];
    gemm(d.c_out, n, d.rows(), &g_mat, false, &cols, true, 0.0, &mut d_weight);
    let mut d_cols = vec![0.0; d.rows() * n];
    gemm(d.rows(), d.c_out, n, weight, true, &g_mat, false, 0.0, &mut d_cols);
    (col2im(&d_cols, d, pad), d_weight, d_bias)
}

/// Five-point Laplacian over the two trailing axes of `[planes, h, w]` data.
///
/// Both boundary rules give a symmetric operator, so the same routine also
/// applies the adjoint.
pub(crate) fn laplacian(x: &[f64], h: usize, w: usize, spacing: f64, bc: Boundary) -> Vec<f64> {
    let inv_h2 = 1.0 / (spacing * spacing);
    let plane = h * w;
    let mut out = vec![0.0; x.len()];
    let wrap = |i: isize, n: usize| -> usize {
        let n_i = n as isize;
        match bc {
            Boundary::Periodic => i.rem_euclid(n_i) as usize,
            Boundary::Neumann => i.clamp(0, n_i - 1) as usize,
        }
    };
    for (src, dst) in x.chunks_exact(plane).zip(out.chunks_exact_mut(plane)) {
        for i in 0..h {
            let up = wrap(i as isize - 1, h) * w;
            let down = wrap(i as isize + 1, h) * w;
            let row = i * w;
            for j in 0..w {
                let left = wrap(j as isize - 1, w);
                let right = wrap(j as isize + 1, w);
                let c = src[row + j];
                dst[row + j] = (src[up + j] + src[down + j] + src[row + left] + src[row + right]
                    - 4.0 * c)
                    * inv_h2;
            }
        }
    }
    out
}

/// Per-channel batch statistics over `[B, C, S]` data: `(mean, biased var)`.
pub(crate) fn channel_stats(x: &[f64], batch: usize, ch: usize, s: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (batch * s) as f64;
    let mut mean = vec![0.0; ch];
    let mut var = vec![0.0; ch];
    for c in 0..ch {
        let mut acc = 0.0;
        for b in 0..batch {
            acc += x[(b * ch + c) * s..(b * ch + c + 1) * s].iter().sum::<f64>();
        }
        let m = acc / n;
        let mut sq = 0.0;
        for b in 0..batch {
            sq += x[(b * ch + c) * s..(b * ch + c + 1) * s]
                .iter()
                .map(|v| (v - m) * (v - m))
                .sum::<f64>();
        }
        mean[c] = m;
        var[c] = sq / n;
    }
    (mean, var)
}

/// `y = (x - shift[c]) * scale[c] * gamma[c] + beta[c]` over `[B, C, S]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn channel_affine(
    x: &[f64],
    batch: usize,
    ch: usize,
    s: usize,
    shift: &[f64],
    scale: &[f64],
    gamma: &[f64],
    beta: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..ch {
            let r = (b * ch + c) * s..(b * ch + c + 1) * s;
            let a = scale[c] * gamma[c];
            for (o, v) in out[r.clone()].iter_mut().zip(&x[r]) {
                *o = (v - shift[c]) * a + beta[c];
            }
        }
    }
    out
}
