//! Convolution (with dilation) and max pooling over `[C×H×W]` or
//! `[N×C×H×W]` inputs.

use super::graph::{Function, Graph, Var};
use super::kernels::{col2im, gemm_nn, gemm_nt, gemm_tn, im2col, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Default for ConvParams {
    fn default() -> Self {
        ConvParams {
            stride: 1,
            pad: 0,
            dilation: 1,
        }
    }
}

struct Conv2dFn {
    geom: ConvGeom,
    batch: usize,
    filters: usize,
    /// im2col buffers, one per batch item.
    cols: Vec<Vec<Real>>,
    has_bias: bool,
}

impl Function for Conv2dFn {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let geom = &self.geom;
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let f = self.filters;
        let image_len = geom.channels * geom.height * geom.width;
        let kernel = inputs[1];

        let mut gx = needs[0].then(|| inputs[0].zeros_like());
        let mut gk = needs[1].then(|| kernel.zeros_like());
        let mut gb = (self.has_bias && needs[2]).then(|| inputs[2].zeros_like());
        let mut dcols = vec![0.0; rows * ncols];

        for n in 0..self.batch {
            let go = &grad.data()[n * f * ncols..(n + 1) * f * ncols];
            if let Some(gk) = gk.as_mut() {
                gemm_nt(f, ncols, rows, go, &self.cols[n], gk.data_mut());
            }
            if let Some(gb) = gb.as_mut() {
                for (j, b) in gb.data_mut().iter_mut().enumerate() {
                    *b += go[j * ncols..(j + 1) * ncols].iter().sum::<Real>();
                }
            }
            if let Some(gx) = gx.as_mut() {
                dcols.fill(0.0);
                gemm_tn(rows, f, ncols, kernel.data(), go, &mut dcols);
                col2im(
                    geom,
                    &dcols,
                    &mut gx.data_mut()[n * image_len..(n + 1) * image_len],
                );
            }
        }
        let mut out = vec![gx, gk];
        if self.has_bias {
            out.push(gb);
        }
        Ok(out)
    }
}

struct MaxPoolFn {
    /// Input flat index feeding each output element.
    argmax: Vec<usize>,
}

impl Function for MaxPoolFn {
    fn name(&self) -> &'static str {
        "max_pool2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let mut gx = inputs[0].zeros_like();
        let d = gx.data_mut();
        for (&src, &g) in self.argmax.iter().zip(grad.data()) {
            d[src] += g;
        }
        Ok(vec![Some(gx)])
    }
}

/// Leading batch size and the `[C, H, W]` tail of a rank-3 or rank-4 shape.
fn image_dims(op: &'static str, shape: &[usize]) -> Result<(Option<usize>, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((None, c, h, w)),
        [n, c, h, w] => Ok((Some(n), c, h, w)),
        _ => Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("{op} expects [C,H,W] or [N,C,H,W]"),
        }),
    }
}

impl Graph {
    /// Cross-correlation of `input` with `kernels[F×C×kh×kw]`, optionally
    /// adding a per-filter bias. Dilation spaces the kernel taps apart.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernels: Var,
        bias: Option<Var>,
        params: ConvParams,
    ) -> Result<Var> {
        let ConvParams {
            stride,
            pad,
            dilation,
        } = params;
        if stride == 0 || dilation == 0 {
            return Err(Error::Invalid("conv2d stride and dilation must be ≥ 1".into()));
        }
        let tx = self.value(input);
        let tk = self.value(kernels);
        let (batch, c, h, w) = image_dims("conv2d", tx.shape())?;
        let [f, kc, kh, kw] = *tk.shape() else {
            return Err(Error::InvalidShape {
                shape: tk.shape().to_vec(),
                reason: "conv2d kernels must be [F,C,kh,kw]".into(),
            });
        };
        if kc != c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: tx.shape().to_vec(),
                rhs: tk.shape().to_vec(),
            });
        }
        if let Some(b) = bias {
            if self.value(b).len() != f {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: tk.shape().to_vec(),
                    rhs: self.value(b).shape().to_vec(),
                });
            }
        }
        let geom = ConvGeom::new(c, h, w, kh, kw, stride, pad, dilation)
            .ok_or(Error::EmptyOutput { op: "conv2d" })?;
        let n = batch.unwrap_or(1);
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let image_len = c * h * w;
        let mut out = vec![0.0; n * f * ncols];
        let mut cols = Vec::with_capacity(n);
        for i in 0..n {
            let mut col = vec![0.0; rows * ncols];
            im2col(&geom, &tx.data()[i * image_len..(i + 1) * image_len], &mut col);
            let dst = &mut out[i * f * ncols..(i + 1) * f * ncols];
            gemm_nn(f, rows, ncols, tk.data(), &col, dst);
            if let Some(b) = bias {
                let bd = self.value(b).data();
                for (j, &bj) in bd.iter().enumerate() {
                    for v in &mut dst[j * ncols..(j + 1) * ncols] {
                        *v += bj;
                    }
                }
            }
            cols.push(col);
        }
        let shape = match batch {
            Some(n) => vec![n, f, geom.out_h, geom.out_w],
            None => vec![f, geom.out_h, geom.out_w],
        };
        let value = Tensor::new(shape, out)?;
        let func = Conv2dFn {
            geom,
            batch: n,
            filters: f,
            cols,
            has_bias: bias.is_some(),
        };
        let mut ins = vec![input, kernels];
        ins.extend(bias);
        Ok(self.record(func, &ins, value))
    }

    /// Non-overlapping-or-strided max pooling; output extent is
    /// `floor((H − size)/stride) + 1`.
    pub fn max_pool2d(&mut self, input: Var, size: usize, stride: usize) -> Result<Var> {
        let tx = self.value(input);
        let (batch, c, h, w) = image_dims("max_pool2d", tx.shape())?;
        if size == 0 || stride == 0 || size > h || size > w {
            return Err(Error::EmptyOutput { op: "max_pool2d" });
        }
        let (oh, ow) = ((h - size) / stride + 1, (w - size) / stride + 1);
        let planes = batch.unwrap_or(1) * c;
        let d = tx.data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..size {
                        for kx in 0..size {
                            let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                            if d[idx] > d[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        let shape = match batch {
            Some(n) => vec![n, c, oh, ow],
            None => vec![c, oh, ow],
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.record(MaxPoolFn { argmax }, &[input], value))
    }
}
