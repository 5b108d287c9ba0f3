//! Regions of interest and max RoI pooling.

use crate::autodiff::{Function, Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::{Real, Tensor};

/// A candidate region in image pixels, described by its centre and size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Roi {
    pub x_center: Real,
    pub y_center: Real,
    pub width: Real,
    pub height: Real,
    pub source_image: usize,
}

impl Roi {
    pub fn new(x_center: Real, y_center: Real, width: Real, height: Real, source_image: usize) -> Result<Self> {
        if !(width > 0.0 && height > 0.0) {
            return Err(Error::InvalidBox(format!("RoI size {width}×{height} must be positive")));
        }
        Ok(Roi {
            x_center,
            y_center,
            width,
            height,
            source_image,
        })
    }

    pub fn from_bbox(b: &BBox, source_image: usize) -> Self {
        let (cx, cy) = b.center();
        Roi {
            x_center: cx,
            y_center: cy,
            width: b.width,
            height: b.height,
            source_image,
        }
    }

    pub fn to_bbox(&self) -> BBox {
        BBox::from_center(self.x_center, self.y_center, self.width, self.height).expect("RoI has positive size")
    }
}

/// Bin edges `[start, end)` for each of `m` bins over feature cells
/// `[lo, hi)`, clipped to `[0, extent)`.
fn bin_edges(lo: i64, hi: i64, m: usize, extent: usize) -> Vec<(usize, usize)> {
    let span = (hi - lo) as Real;
    let size = span / m as Real;
    (0..m)
        .map(|i| {
            let s = lo + (i as Real * size).floor() as i64;
            let e = lo + ((i + 1) as Real * size).ceil() as i64;
            let s = s.clamp(0, extent as i64) as usize;
            let e = e.clamp(0, extent as i64) as usize;
            (s, e.max(s))
        })
        .collect()
}

struct RoiPoolFn {
    /// Flat input index feeding each output element; `None` for empty bins.
    argmax: Vec<Option<usize>>,
}

impl Function for RoiPoolFn {
    fn name(&self) -> &'static str {
        "roi_pool"
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
        for (src, &g) in self.argmax.iter().zip(grad.data()) {
            if let Some(i) = *src {
                d[i] += g;
            }
        }
        Ok(vec![Some(gx)])
    }
}

impl Graph {
    /// Max-pools each RoI of `features[C×H×W]` into an `m×m` grid, giving
    /// `[R×C×m×m]`. RoI corners are scaled by `spatial_scale` into feature
    /// coordinates and expanded outward to whole cells (floor of the start,
    /// ceil of the end); each bin spans `floor(i·s)..ceil((i+1)·s)` cells.
    /// Bins left empty after clipping output 0.
    pub fn roi_pool(&mut self, features: Var, rois: &[Roi], m: usize, spatial_scale: Real) -> Result<Var> {
        let tf = self.value(features);
        let [c, h, w] = *tf.shape() else {
            return Err(Error::InvalidShape {
                shape: tf.shape().to_vec(),
                reason: "roi_pool expects [C,H,W] features".into(),
            });
        };
        if m == 0 || rois.is_empty() {
            return Err(Error::Invalid("roi_pool needs m ≥ 1 and at least one RoI".into()));
        }
        let d = tf.data();
        let mut out = Vec::with_capacity(rois.len() * c * m * m);
        let mut argmax = Vec::with_capacity(rois.len() * c * m * m);
        for roi in rois {
            let b = roi.to_bbox();
            let x0 = (b.x_min * spatial_scale).floor() as i64;
            let y0 = (b.y_min * spatial_scale).floor() as i64;
            let x1 = (b.x_max() * spatial_scale).ceil() as i64;
            let y1 = (b.y_max() * spatial_scale).ceil() as i64;
            if x1 <= 0 || y1 <= 0 || x0 >= w as i64 || y0 >= h as i64 {
                return Err(Error::RoiOutside);
            }
            let ybins = bin_edges(y0, y1.max(y0 + 1), m, h);
            let xbins = bin_edges(x0, x1.max(x0 + 1), m, w);
            for ch in 0..c {
                let base = ch * h * w;
                for &(ys, ye) in &ybins {
                    for &(xs, xe) in &xbins {
                        let mut best: Option<usize> = None;
                        for y in ys..ye {
                            for x in xs..xe {
                                let i = base + y * w + x;
                                if best.is_none_or(|bi| d[i] > d[bi]) {
                                    best = Some(i);
                                }
                            }
                        }
                        out.push(best.map_or(0.0, |i| d[i]));
                        argmax.push(best);
                    }
                }
            }
        }
        let value = Tensor::new(vec![rois.len(), c, m, m], out)?;
        Ok(self.record(RoiPoolFn { argmax }, &[features], value))
    }

    /// Single-RoI form returning `[C×m×m]`.
    pub fn roi_pool_one(&mut self, features: Var, roi: &Roi, m: usize, spatial_scale: Real) -> Result<Var> {
        let pooled = self.roi_pool(features, std::slice::from_ref(roi), m, spatial_scale)?;
        let shape = self.shape(pooled)[1..].to_vec();
        self.reshape(pooled, &shape)
    }
}
