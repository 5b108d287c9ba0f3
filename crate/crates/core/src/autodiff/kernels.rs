//! Dense inner loops shared by matmul and convolution.

use crate::tensor::Real;

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[Real], b: &[Real], c: &mut [Real]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += aᵀ · b` with `a` stored as `[k×m]`.
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[Real], b: &[Real], c: &mut [Real]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        let acol = &a[p * m..(p + 1) * m];
        for (i, &av) in acol.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a · bᵀ` with `b` stored as `[n×k]`.
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[Real], b: &[Real], c: &mut [Real]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// Geometry of a 2-D convolution over one `[C×H×W]` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// `None` when either output extent would be non-positive.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Option<Self> {
        let extent = |size: usize, k: usize| -> Option<usize> {
            let span = (size + 2 * pad) as i64 - (dilation * (k - 1)) as i64 - 1;
            if span < 0 {
                return None;
            }
            Some(span as usize / stride + 1)
        };
        let out_h = extent(height, kh)?;
        let out_w = extent(width, kw)?;
        Some(ConvGeom {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            pad,
            dilation,
            out_h,
            out_w,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one image into `[C·kh·kw × out_h·out_w]` columns.
pub fn im2col(geom: &ConvGeom, image: &[Real], cols: &mut [Real]) {
    let ConvGeom {
        channels,
        height,
        width,
        kh,
        kw,
        stride,
        pad,
        dilation,
        out_h,
        out_w,
    } = *geom;
    let ncols = out_h * out_w;
    debug_assert_eq!(cols.len(), channels * kh * kw * ncols);
    for c in 0..channels {
        let plane = &image[c * height * width..(c + 1) * height * width];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..out_h {
                    let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                    let line = &mut dst[oy * out_w..(oy + 1) * out_w];
                    if iy < 0 || iy >= height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * width..(iy as usize + 1) * width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                        *v = if ix < 0 || ix >= width as isize {
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

/// Adjoint of [`im2col`]: scatters columns back onto the image, accumulating.
pub fn col2im(geom: &ConvGeom, cols: &[Real], image: &mut [Real]) {
    let ConvGeom {
        channels,
        height,
        width,
        kh,
        kw,
        stride,
        pad,
        dilation,
        out_h,
        out_w,
    } = *geom;
    let ncols = out_h * out_w;
    for c in 0..channels {
        let plane = &mut image[c * height * width..(c + 1) * height * width];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..out_h {
                    let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    let line = &src[oy * out_w..(oy + 1) * out_w];
                    let dst = &mut plane[iy as usize * width..(iy as usize + 1) * width];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < width {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}
