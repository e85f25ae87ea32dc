//! Raw 2-D convolution kernels (im2col + GEMM) shared by the autodiff graph.
//!
//! Indexing follows the dilated definition
//! `out[i, j] = sum_{m, n} in[i*s - p + b*m, j*s - p + b*n] * w[m, n]`
//! summed over input channels, with zero padding outside the input.

use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub out_height: usize,
    pub out_width: usize,
}

/// Output extent along one axis; `None` when no output position fits.
pub fn out_extent(len: usize, kernel: usize, stride: usize, padding: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = len + 2 * padding;
    if padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize, dilation: usize) -> Result<Self> {
        if input.len() != 4 {
            return Err(shape_err(
                "conv2d",
                format!("input must be rank 4 [N,C,H,W], got {input:?}"),
            ));
        }
        if weight.len() != 4 {
            return Err(shape_err(
                "conv2d",
                format!("kernel must be rank 4 [O,C,k,k], got {weight:?}"),
            ));
        }
        if weight[2] != weight[3] {
            return Err(shape_err(
                "conv2d",
                format!("kernel must be square, got {}x{}", weight[2], weight[3]),
            ));
        }
        if weight[1] != input[1] {
            return Err(shape_err(
                "conv2d",
                format!(
                    "channel dimension: input has C={} but kernel expects C={}",
                    input[1], weight[1]
                ),
            ));
        }
        if stride == 0 || dilation == 0 {
            return Err(shape_err("conv2d", "stride and dilation must be >= 1"));
        }
        let k = weight[2];
        let oh = out_extent(input[2], k, stride, padding, dilation).ok_or_else(|| {
            shape_err(
                "conv2d",
                format!(
                    "height: H={} too small for kernel span {}",
                    input[2],
                    dilation * (k - 1) + 1
                ),
            )
        })?;
        let ow = out_extent(input[3], k, stride, padding, dilation).ok_or_else(|| {
            shape_err(
                "conv2d",
                format!(
                    "width: W={} too small for kernel span {}",
                    input[3],
                    dilation * (k - 1) + 1
                ),
            )
        })?;
        Ok(Self {
            batch: input[0],
            in_channels: input[1],
            height: input[2],
            width: input[3],
            out_channels: weight[0],
            kernel: k,
            stride,
            padding,
            dilation,
            out_height: oh,
            out_width: ow,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_height, self.out_width]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_height * self.out_width
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn im2col(&self, input: &[f64], cols: &mut [f64]) {
        let (k, s, p, d) = (self.kernel, self.stride, self.padding as isize, self.dilation);
        let (h, w) = (self.height as isize, self.width as isize);
        let (oh, ow) = (self.out_height, self.out_width);
        let hw = self.height * self.width;
        for c in 0..self.in_channels {
            let plane = &input[c * hw..(c + 1) * hw];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * s + ki * d) as isize - p;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * s + kj * d) as isize - p;
                            *v = if ix < 0 || ix >= w { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Patch matrix `[C*k*k, N*P]` for the whole batch.
    fn batched_cols(&self, input: &[f64]) -> Vec<f64> {
        let (ckk, pos, n) = (self.patch_len(), self.positions(), self.batch);
        let in_len = self.in_channels * self.height * self.width;
        let np = n * pos;
        let mut cols = vec![0.0; ckk * np];
        if self.is_pointwise() {
            for b in 0..n {
                for c in 0..self.in_channels {
                    cols[c * np + b * pos..c * np + (b + 1) * pos]
                        .copy_from_slice(&input[b * in_len + c * pos..b * in_len + (c + 1) * pos]);
                }
            }
            return cols;
        }
        let mut one = vec![0.0; ckk * pos];
        for b in 0..n {
            self.im2col(&input[b * in_len..(b + 1) * in_len], &mut one);
            for r in 0..ckk {
                cols[r * np + b * pos..r * np + (b + 1) * pos].copy_from_slice(&one[r * pos..(r + 1) * pos]);
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], grad_input: &mut [f64]) {
        let (k, s, p, d) = (self.kernel, self.stride, self.padding as isize, self.dilation);
        let (h, w) = (self.height as isize, self.width as isize);
        let (oh, ow) = (self.out_height, self.out_width);
        let hw = self.height * self.width;
        for c in 0..self.in_channels {
            let plane = &mut grad_input[c * hw..(c + 1) * hw];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * s + ki * d) as isize - p;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for ox in 0..ow {
                            let ix = (ox * s + kj * d) as isize - p;
                            if ix >= 0 && ix < w {
                                dst[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c[m,n] = beta * c + a[m,k] * b[k,n]` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    debug_assert!(c.len() >= m * n);
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: bounds of a, b, c were checked above against the strides and extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv2d_forward(g: &ConvGeometry, input: &[f64], weight: &[f64]) -> Vec<f64> {
    let (ckk, pos, n) = (g.patch_len(), g.positions(), g.batch);
    let in_len = g.in_channels * g.height * g.width;
    let cols = g.batched_cols(input);
    // [O, N*P] then reorder to [N, O, P]
    let mut tmp = vec![0.0; g.out_channels * n * pos];
    gemm(
        g.out_channels,
        ckk,
        n * pos,
        weight,
        ckk,
        1,
        &cols,
        n * pos,
        1,
        0.0,
        &mut tmp,
    );
    if n == 1 {
        return tmp;
    }
    debug_assert_eq!(input.len(), n * in_len);
    let mut out = vec![0.0; tmp.len()];
    for o in 0..g.out_channels {
        for b in 0..n {
            out[(b * g.out_channels + o) * pos..(b * g.out_channels + o + 1) * pos]
                .copy_from_slice(&tmp[(o * n + b) * pos..(o * n + b + 1) * pos]);
        }
    }
    out
}

/// Returns `(grad_input, grad_weight)`.
pub fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (ckk, pos, n) = (g.patch_len(), g.positions(), g.batch);
    let in_len = g.in_channels * g.height * g.width;
    // grad_out as [O, N*P]
    let go = if n == 1 {
        grad_out.to_vec()
    } else {
        let mut go = vec![0.0; grad_out.len()];
        for b in 0..n {
            for o in 0..g.out_channels {
                go[(o * n + b) * pos..(o * n + b + 1) * pos]
                    .copy_from_slice(&grad_out[(b * g.out_channels + o) * pos..(b * g.out_channels + o + 1) * pos]);
            }
        }
        go
    };
    let np = n * pos;
    let gw = need_weight.then(|| {
        let cols = g.batched_cols(input);
        let mut gw = vec![0.0; g.out_channels * ckk];
        // gw[O, CKK] = go[O, NP] * cols[CKK, NP]^T
        gemm(g.out_channels, np, ckk, &go, np, 1, &cols, 1, np, 0.0, &mut gw);
        gw
    });
    let gx = need_input.then(|| {
        // d_cols[CKK, NP] = w[O, CKK]^T * go[O, NP]
        let mut dcols = vec![0.0; ckk * np];
        gemm(ckk, g.out_channels, np, weight, 1, ckk, &go, np, 1, 0.0, &mut dcols);
        let mut gx = vec![0.0; n * in_len];
        if g.is_pointwise() {
            for b in 0..n {
                for c in 0..g.in_channels {
                    gx[(b * g.in_channels + c) * pos..(b * g.in_channels + c + 1) * pos]
                        .copy_from_slice(&dcols[c * np + b * pos..c * np + (b + 1) * pos]);
                }
            }
        } else {
            let mut one = vec![0.0; ckk * pos];
            for b in 0..n {
                for r in 0..ckk {
                    one[r * pos..(r + 1) * pos].copy_from_slice(&dcols[r * np + b * pos..r * np + (b + 1) * pos]);
                }
                g.col2im(&one, &mut gx[b * in_len..(b + 1) * in_len]);
            }
        }
        gx
    });
    (gx, gw)
}
