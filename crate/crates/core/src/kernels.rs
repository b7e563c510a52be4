//! Convolution kernels built on im2col + GEMM.
//!
//! Layouts are NCHW. Conv kernels are `[F, C, kH, kW]`; transposed-conv
//! kernels are `[C_in, C_out, kH, kW]`, i.e. the kernel of the conv whose
//! adjoint they compute.

/// Geometry of a strided, zero-padded 2-D cross-correlation on one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Returns `None` when the output size is not integral or the kernel
    /// does not fit the padded input.
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || kh == 0 || kw == 0 {
            return None;
        }
        let ph = height + 2 * pad;
        let pw = width + 2 * pad;
        if kh > ph || kw > pw || (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return None;
        }
        Some(Self {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            pad,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        })
    }

    pub fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// `c = alpha * op(a) * op(b) + beta * c`, all row-major.
/// `op(a)` is `m x k`, `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
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
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths match the strides computed above.
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

fn im2col(input: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let npix = g.out_pixels();
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds columns back into an image; the adjoint of [`im2col`].
fn col2im(cols: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let npix = g.out_pixels();
    for c in 0..g.channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let src_row = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, &v) in src_row.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Column matrix for one sample, borrowing the input when the conv is pointwise.
fn columns<'a>(input: &'a [f64], g: &ConvGeom, scratch: &'a mut Vec<f64>) -> &'a [f64] {
    if g.is_pointwise() {
        input
    } else {
        scratch.resize(g.patch_len() * g.out_pixels(), 0.0);
        im2col(input, g, scratch);
        scratch
    }
}

/// `y[n] = W * cols(x[n])` for every sample.
pub(crate) fn conv_forward(x: &[f64], batch: usize, w: &[f64], filters: usize, g: &ConvGeom) -> Vec<f64> {
    let npix = g.out_pixels();
    let mut y = vec![0.0; batch * filters * npix];
    let mut scratch = Vec::new();
    for n in 0..batch {
        let cols = columns(&x[n * g.in_len()..(n + 1) * g.in_len()], g, &mut scratch);
        gemm(
            filters,
            g.patch_len(),
            npix,
            w,
            false,
            cols,
            false,
            0.0,
            &mut y[n * filters * npix..(n + 1) * filters * npix],
        );
    }
    y
}

/// Gradient of a conv w.r.t. its input: `dx[n] = col2im(W^T * dy[n])`.
pub(crate) fn conv_backward_input(dy: &[f64], batch: usize, w: &[f64], filters: usize, g: &ConvGeom) -> Vec<f64> {
    let npix = g.out_pixels();
    let mut dx = vec![0.0; batch * g.in_len()];
    let mut dcols = vec![0.0; g.patch_len() * npix];
    for n in 0..batch {
        let dy_n = &dy[n * filters * npix..(n + 1) * filters * npix];
        let dx_n = &mut dx[n * g.in_len()..(n + 1) * g.in_len()];
        if g.is_pointwise() {
            gemm(g.patch_len(), filters, npix, w, true, dy_n, false, 0.0, dx_n);
        } else {
            gemm(g.patch_len(), filters, npix, w, true, dy_n, false, 0.0, &mut dcols);
            col2im(&dcols, g, dx_n);
        }
    }
    dx
}

/// Gradient of a conv w.r.t. its kernel: `dW = sum_n dy[n] * cols(x[n])^T`.
pub(crate) fn conv_backward_kernel(x: &[f64], dy: &[f64], batch: usize, filters: usize, g: &ConvGeom) -> Vec<f64> {
    let npix = g.out_pixels();
    let mut dw = vec![0.0; filters * g.patch_len()];
    let mut scratch = Vec::new();
    for n in 0..batch {
        let cols = columns(&x[n * g.in_len()..(n + 1) * g.in_len()], g, &mut scratch);
        gemm(
            filters,
            npix,
            g.patch_len(),
            &dy[n * filters * npix..(n + 1) * filters * npix],
            false,
            cols,
            true,
            if n == 0 { 0.0 } else { 1.0 },
            &mut dw,
        );
    }
    dw
}

/// Transposed conv forward. `g` describes the conv that maps the *output*
/// space (`C_out x OH x OW`) onto the input space (`C_in x H x W`); this
/// routine applies its adjoint.
pub(crate) fn conv_transpose_forward(v: &[f64], batch: usize, k: &[f64], in_channels: usize, g: &ConvGeom) -> Vec<f64> {
    conv_backward_input(v, batch, k, in_channels, g)
}

pub(crate) fn conv_transpose_backward_input(dout: &[f64], batch: usize, k: &[f64], in_channels: usize, g: &ConvGeom) -> Vec<f64> {
    conv_forward(dout, batch, k, in_channels, g)
}

pub(crate) fn conv_transpose_backward_kernel(v: &[f64], dout: &[f64], batch: usize, in_channels: usize, g: &ConvGeom) -> Vec<f64> {
    conv_backward_kernel(dout, v, batch, in_channels, g)
}
