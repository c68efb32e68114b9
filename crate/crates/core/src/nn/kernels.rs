//! 3×3 convolution kernels built on im2col + GEMM.
//!
//! All convolutions use zero padding 1. A stride-`s` convolution maps an
//! `h × w` plane onto a `((h-1)/s+1) × ((w-1)/s+1)` grid; the transposed
//! convolution is its exact adjoint and maps a grid back onto `h·s × w·s`.

pub const K: usize = 3;
pub const TAPS: usize = K * K;

/// Row-major GEMM: `c = alpha * op(a) * op(b) + beta * c`, with `op(a)` of
/// shape `m × k` and `op(b)` of shape `k × n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the strided extents described above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

pub fn strided_dim(size: usize, stride: usize) -> usize {
    size.div_ceil(stride)
}

/// Unfold `x` (`ch × h × w`) into a `(ch·9) × (oh·ow)` patch matrix for a
/// stride-`s` convolution whose output grid is `oh × ow`.
#[allow(clippy::too_many_arguments)]
pub fn im2col(x: &[f64], ch: usize, h: usize, w: usize, oh: usize, ow: usize, s: usize, cols: &mut [f64]) {
    let npix = oh * ow;
    debug_assert_eq!(cols.len(), ch * TAPS * npix);
    for c in 0..ch {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..K {
            for kx in 0..K {
                let row = &mut cols[((c * TAPS) + ky * K + kx) * npix..][..npix];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - 1;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - 1;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patches back onto `x` (accumulates).
#[allow(clippy::too_many_arguments)]
pub fn col2im(cols: &[f64], ch: usize, h: usize, w: usize, oh: usize, ow: usize, s: usize, x: &mut [f64]) {
    let npix = oh * ow;
    for c in 0..ch {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ky in 0..K {
            for kx in 0..K {
                let row = &cols[((c * TAPS) + ky * K + kx) * npix..][..npix];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in row[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = (ox * s + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Geometry of one convolution: the "large" side is `in_ch × h × w`, the grid
/// side is `out_ch × oh × ow`.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn strided(in_ch: usize, out_ch: usize, h: usize, w: usize, stride: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            h,
            w,
            oh: strided_dim(h, stride),
            ow: strided_dim(w, stride),
            stride,
        }
    }

    fn patches(&self, x: &[f64]) -> Vec<f64> {
        let mut cols = vec![0.0; self.in_ch * TAPS * self.oh * self.ow];
        im2col(x, self.in_ch, self.h, self.w, self.oh, self.ow, self.stride, &mut cols);
        cols
    }
}

/// Strided convolution. `weight` is `out_ch × in_ch × 3 × 3`.
pub fn conv_forward(g: &ConvGeom, x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let npix = g.oh * g.ow;
    let cols = g.patches(x);
    let mut out = vec![0.0; g.out_ch * npix];
    for (o, b) in bias.iter().enumerate() {
        out[o * npix..(o + 1) * npix].iter_mut().for_each(|v| *v = *b);
    }
    gemm(g.out_ch, g.in_ch * TAPS, npix, 1.0, weight, false, &cols, false, 1.0, &mut out);
    out
}

/// Gradients of [`conv_forward`]; weight and bias gradients accumulate,
/// the returned input gradient is fresh.
pub fn conv_backward(
    g: &ConvGeom,
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) -> Vec<f64> {
    let npix = g.oh * g.ow;
    let kdim = g.in_ch * TAPS;
    let cols = g.patches(x);
    gemm(g.out_ch, npix, kdim, 1.0, grad_out, false, &cols, true, 1.0, grad_w);
    for (o, gb) in grad_b.iter_mut().enumerate() {
        *gb += grad_out[o * npix..(o + 1) * npix].iter().sum::<f64>();
    }
    let mut dcols = vec![0.0; kdim * npix];
    gemm(kdim, g.out_ch, npix, 1.0, weight, true, grad_out, false, 0.0, &mut dcols);
    let mut dx = vec![0.0; g.in_ch * g.h * g.w];
    col2im(&dcols, g.in_ch, g.h, g.w, g.oh, g.ow, g.stride, &mut dx);
    dx
}

/// Transposed convolution: the adjoint of a strided convolution sharing the
/// same weight tensor. Here the input lives on the grid (`out_ch` channels of
/// the geometry) and the output on the large side (`in_ch` channels).
/// `weight` is laid out `grid_ch × large_ch × 3 × 3`.
pub fn upconv_forward(g: &ConvGeom, x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let npix = g.oh * g.ow;
    let kdim = g.in_ch * TAPS;
    let mut cols = vec![0.0; kdim * npix];
    gemm(kdim, g.out_ch, npix, 1.0, weight, true, x, false, 0.0, &mut cols);
    let plane = g.h * g.w;
    let mut out = vec![0.0; g.in_ch * plane];
    for (c, b) in bias.iter().enumerate() {
        out[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v = *b);
    }
    col2im(&cols, g.in_ch, g.h, g.w, g.oh, g.ow, g.stride, &mut out);
    out
}

pub fn upconv_backward(
    g: &ConvGeom,
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) -> Vec<f64> {
    let npix = g.oh * g.ow;
    let kdim = g.in_ch * TAPS;
    let plane = g.h * g.w;
    for (c, gb) in grad_b.iter_mut().enumerate() {
        *gb += grad_out[c * plane..(c + 1) * plane].iter().sum::<f64>();
    }
    let cols = g.patches(grad_out);
    gemm(g.out_ch, npix, kdim, 1.0, x, false, &cols, true, 1.0, grad_w);
    let mut dx = vec![0.0; g.out_ch * npix];
    gemm(g.out_ch, kdim, npix, 1.0, weight, false, &cols, false, 0.0, &mut dx);
    dx
}
