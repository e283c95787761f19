//! Raw convolution / resampling kernels over `[N, C, H, W]` buffers.
//!
//! These are the shared numeric building blocks behind the autodiff ops.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (&[n, cin, h, w], &[cout, kcin, kh, kw]) = (input, kernel) else {
            return Err(Error::Shape(format!(
                "conv2d expects rank-4 input and kernel, got {input:?} and {kernel:?}"
            )));
        };
        if stride == 0 {
            return Err(Error::Param("conv2d stride must be >= 1".into()));
        }
        if kcin != cin {
            return Err(Error::Shape(format!(
                "conv2d kernel expects {kcin} input channels, input has {cin}"
            )));
        }
        if kh == 0 || kw == 0 || kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::Shape(format!(
                "conv2d kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}"
            )));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        Ok(ConvGeometry {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            padding,
            ho,
            wo,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.cout, self.ho, self.wo]
    }

    /// Range of output columns `ox` whose input column `ox*stride + kx - pad`
    /// is inside the image.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let s = self.stride;
        let p = self.padding;
        // smallest ox with ox*s + kx >= p
        let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
        // largest ox with ox*s + kx - p <= w - 1
        let hi = if self.w + p < kx + 1 {
            0
        } else {
            ((self.w + p - kx - 1) / s + 1).min(self.wo)
        };
        (lo, hi.max(lo))
    }

    #[inline]
    fn row_in(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }
}

/// Cross-correlation of `input` with `kernel`.
pub fn conv2d_forward(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0f32; g.n * g.cout * g.ho * g.wo];
    let in_plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    for n in 0..g.n {
        for co in 0..g.cout {
            let o = &mut out[(n * g.cout + co) * out_plane..][..out_plane];
            for ci in 0..g.cin {
                let xin = &x[(n * g.cin + ci) * in_plane..][..in_plane];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = k[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                        let (lo, hi) = g.col_range(kx);
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..g.ho {
                            let Some(iy) = g.row_in(oy, ky) else { continue };
                            let orow = &mut o[oy * g.wo..][lo..hi];
                            let xrow = &xin[iy * g.w..(iy + 1) * g.w];
                            let ix0 = lo * g.stride + kx - g.padding;
                            if g.stride == 1 {
                                for (ov, &xv) in orow.iter_mut().zip(&xrow[ix0..]) {
                                    *ov += wv * xv;
                                }
                            } else {
                                for (j, ov) in orow.iter_mut().enumerate() {
                                    *ov += wv * xrow[ix0 + j * g.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(g.out_shape(), out))
}

/// Gradient of the convolution with respect to its input.
pub fn conv2d_backward_input(grad_out: &[f32], kernel: &Tensor, g: &ConvGeometry) -> Vec<f32> {
    let k = kernel.data();
    let in_plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    let mut gin = vec![0f32; g.n * g.cin * in_plane];
    for n in 0..g.n {
        for co in 0..g.cout {
            let go = &grad_out[(n * g.cout + co) * out_plane..][..out_plane];
            for ci in 0..g.cin {
                let gi = &mut gin[(n * g.cin + ci) * in_plane..][..in_plane];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = k[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                        let (lo, hi) = g.col_range(kx);
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..g.ho {
                            let Some(iy) = g.row_in(oy, ky) else { continue };
                            let grow = &go[oy * g.wo..][lo..hi];
                            let irow = &mut gi[iy * g.w..(iy + 1) * g.w];
                            let ix0 = lo * g.stride + kx - g.padding;
                            if g.stride == 1 {
                                for (iv, &gv) in irow[ix0..].iter_mut().zip(grow) {
                                    *iv += wv * gv;
                                }
                            } else {
                                for (j, &gv) in grow.iter().enumerate() {
                                    irow[ix0 + j * g.stride] += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gin
}

/// Gradient of the convolution with respect to its kernel.
pub fn conv2d_backward_kernel(grad_out: &[f32], input: &Tensor, g: &ConvGeometry) -> Vec<f32> {
    let x = input.data();
    let in_plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    let mut gk = vec![0f64; g.cout * g.cin * g.kh * g.kw];
    for n in 0..g.n {
        for co in 0..g.cout {
            let go = &grad_out[(n * g.cout + co) * out_plane..][..out_plane];
            for ci in 0..g.cin {
                let xin = &x[(n * g.cin + ci) * in_plane..][..in_plane];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let (lo, hi) = g.col_range(kx);
                        if lo >= hi {
                            continue;
                        }
                        let mut acc = 0f64;
                        for oy in 0..g.ho {
                            let Some(iy) = g.row_in(oy, ky) else { continue };
                            let grow = &go[oy * g.wo..][lo..hi];
                            let xrow = &xin[iy * g.w..(iy + 1) * g.w];
                            let ix0 = lo * g.stride + kx - g.padding;
                            let mut row = 0f32;
                            if g.stride == 1 {
                                for (&gv, &xv) in grow.iter().zip(&xrow[ix0..]) {
                                    row += gv * xv;
                                }
                            } else {
                                for (j, &gv) in grow.iter().enumerate() {
                                    row += gv * xrow[ix0 + j * g.stride];
                                }
                            }
                            acc += row as f64;
                        }
                        gk[((co * g.cin + ci) * g.kh + ky) * g.kw + kx] += acc;
                    }
                }
            }
        }
    }
    gk.into_iter().map(|v| v as f32).collect()
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(input: &Tensor, factor: usize) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4()?;
    if factor == 0 {
        return Err(Error::Param("upsample factor must be >= 1".into()));
    }
    let (ho, wo) = (h * factor, w * factor);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in x.chunks_exact(h * w) {
        for oy in 0..ho {
            let row = &plane[(oy / factor) * w..][..w];
            for ox in 0..wo {
                out.push(row[ox / factor]);
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![n, c, ho, wo], out))
}

pub(crate) fn upsample_nearest_backward(grad_out: &[f32], in_shape: &[usize], factor: usize) -> Vec<f32> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (ho, wo) = (h * factor, w * factor);
    let mut gin = vec![0f32; in_shape.iter().product()];
    for (gi, go) in gin.chunks_exact_mut(h * w).zip(grad_out.chunks_exact(ho * wo)) {
        for oy in 0..ho {
            for ox in 0..wo {
                gi[(oy / factor) * w + ox / factor] += go[oy * wo + ox];
            }
        }
    }
    gin
}

/// Non-overlapping `size x size` average pooling.
pub fn avg_pool(input: &Tensor, size: usize) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4()?;
    if size == 0 || h % size != 0 || w % size != 0 {
        return Err(Error::Shape(format!(
            "avg_pool size {size} does not divide {h}x{w}"
        )));
    }
    let (ho, wo) = (h / size, w / size);
    let norm = 1.0 / (size * size) as f32;
    let mut out = vec![0f32; n * c * ho * wo];
    for (o, plane) in out.chunks_exact_mut(ho * wo).zip(input.data().chunks_exact(h * w)) {
        for y in 0..h {
            for x in 0..w {
                o[(y / size) * wo + x / size] += plane[y * w + x] * norm;
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![n, c, ho, wo], out))
}

pub(crate) fn avg_pool_backward(grad_out: &[f32], in_shape: &[usize], size: usize) -> Vec<f32> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (ho, wo) = (h / size, w / size);
    let norm = 1.0 / (size * size) as f32;
    let mut gin = vec![0f32; in_shape.iter().product()];
    for (gi, go) in gin.chunks_exact_mut(h * w).zip(grad_out.chunks_exact(ho * wo)) {
        for y in 0..h {
            for x in 0..w {
                gi[y * w + x] = go[(y / size) * wo + x / size] * norm;
            }
        }
    }
    gin
}

/// Bilinear resize with half-pixel centers (`align_corners = false`).
pub fn resize_bilinear(input: &Tensor, ho: usize, wo: usize) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4()?;
    if ho == 0 || wo == 0 {
        return Err(Error::Shape("resize to empty size".into()));
    }
    if (h, w) == (ho, wo) {
        return Ok(input.clone());
    }
    let src = |o: usize, out_len: usize, in_len: usize| -> (usize, usize, f32) {
        let pos = ((o as f32 + 0.5) * in_len as f32 / out_len as f32 - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        (i0, i1, pos - i0 as f32)
    };
    let ys: Vec<_> = (0..ho).map(|y| src(y, ho, h)).collect();
    let xs: Vec<_> = (0..wo).map(|x| src(x, wo, w)).collect();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in input.data().chunks_exact(h * w) {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![n, c, ho, wo], out))
}
