//! Part score maps and the per-tap heads that produce them.

use rand::Rng;

use super::l2norm::{GAMMA_INIT, L2_EPS};
use super::layers::Conv2dLayer;
use super::roi::Roi;
use crate::autodiff::{ConvParams, Graph, ReduceKind, Var};
use crate::error::{Error, Result};
use crate::params::{Binder, GroupSet, ParamId, Params};
use crate::tensor::{Real, Tensor};

/// Tolerance on the per-cell simplex constraint.
pub const SIMPLEX_TOL: Real = 1e-9;

/// A `K×K×(C+1)` grid of per-cell class distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct PartScoreMap {
    grid: Tensor,
}

impl PartScoreMap {
    /// Validates that every cell is a probability vector.
    pub fn new(grid: Tensor) -> Result<Self> {
        let [k, k2, c1] = *grid.shape() else {
            return Err(Error::InvalidShape {
                shape: grid.shape().to_vec(),
                reason: "part score map must be [K,K,C+1]".into(),
            });
        };
        if k != k2 || c1 < 2 {
            return Err(Error::InvalidShape {
                shape: grid.shape().to_vec(),
                reason: "part score map must be square with at least 2 classes".into(),
            });
        }
        for cell in grid.data().chunks(c1) {
            let sum: Real = cell.iter().sum();
            if cell.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::Invalid(format!("part cell {cell:?} is not a distribution")));
            }
        }
        Ok(PartScoreMap { grid })
    }

    pub fn uniform(k: usize, classes: usize) -> Self {
        PartScoreMap {
            grid: Tensor::full(vec![k, k, classes], 1.0 / classes as Real),
        }
    }

    pub fn k(&self) -> usize {
        self.grid.shape()[0]
    }

    /// Number of classes including background (C+1).
    pub fn classes(&self) -> usize {
        self.grid.shape()[2]
    }

    pub fn grid(&self) -> &Tensor {
        &self.grid
    }

    pub fn cell(&self, row: usize, col: usize) -> &[Real] {
        let c1 = self.classes();
        let start = (row * self.k() + col) * c1;
        &self.grid.data()[start..start + c1]
    }

    /// Largest deviation of any cell's sum from 1.
    pub fn simplex_error(&self) -> Real {
        self.grid
            .data()
            .chunks(self.classes())
            .map(|c| (c.iter().sum::<Real>() - 1.0).abs())
            .fold(0.0, Real::max)
    }
}

/// Mean pedestrian-class probability over every cell of every map.
pub fn part_branch_aggregate(maps: &[PartScoreMap]) -> Real {
    let mut total = 0.0;
    let mut n = 0usize;
    for m in maps {
        let c1 = m.classes();
        for cell in m.grid().data().chunks(c1) {
            total += cell[1];
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as Real
    }
}

/// Head for one trunk tap: L2 normalisation with learned scale, a 3×3
/// conv with ReLU, then a 2×2 stride-2 conv down to `K×K×(C+1)` logits.
#[derive(Clone, Debug)]
pub struct TapHead {
    pub gamma: ParamId,
    pub conv: Conv2dLayer,
    pub score: Conv2dLayer,
}

#[derive(Clone, Debug)]
pub struct PartHead {
    pub taps: Vec<TapHead>,
    pub k: usize,
    pub classes: usize,
}

impl PartHead {
    /// One head per entry of `tap_channels`; parameters go into the `part`
    /// group.
    pub fn new(params: &mut Params, tap_channels: &[usize], hidden: usize, k: usize, classes: usize, rng: &mut impl Rng) -> Self {
        let taps = tap_channels
            .iter()
            .enumerate()
            .map(|(t, &c)| {
                let name = format!("part.tap{t}");
                TapHead {
                    gamma: params.add(format!("{name}.gamma"), Tensor::full(vec![c], GAMMA_INIT)),
                    conv: Conv2dLayer::new(
                        params,
                        &format!("{name}.conv"),
                        c,
                        hidden,
                        3,
                        ConvParams { stride: 1, pad: 1, dilation: 1 },
                        rng,
                    ),
                    score: Conv2dLayer::new(
                        params,
                        &format!("{name}.score"),
                        hidden,
                        classes,
                        2,
                        ConvParams { stride: 2, pad: 0, dilation: 1 },
                        rng,
                    ),
                }
            })
            .collect();
        PartHead { taps, k, classes }
    }

    /// Side of the pooled RoI grid each tap expects.
    pub fn pool_size(&self) -> usize {
        2 * self.k
    }

    /// Maps pooled features `[R×C×2K×2K]` of one tap to per-cell
    /// probabilities `[R×K×K×(C+1)]`.
    pub fn tap_forward(&self, g: &mut Graph, bind: &mut Binder, tap: usize, pooled: Var) -> Result<Var> {
        let head = &self.taps[tap];
        let gamma = bind.var(g, head.gamma);
        let x = g.l2_normalize_scaled(pooled, gamma, L2_EPS)?;
        let x = head.conv.forward(g, bind, x)?;
        let x = g.relu(x)?;
        let logits = head.score.forward(g, bind, x)?;
        let logits = g.permute(logits, &[0, 2, 3, 1])?;
        Ok(g.softmax(logits))
    }

    /// Pools every RoI from each tap's feature map and returns the per-tap
    /// maps stacked on a leading tap axis: `[T×R×K×K×(C+1)]`.
    pub fn forward(&self, g: &mut Graph, bind: &mut Binder, taps: &[(Var, Real)], rois: &[Roi]) -> Result<Var> {
        if taps.len() != self.taps.len() {
            return Err(Error::Invalid(format!(
                "part head has {} taps but {} feature maps were given",
                self.taps.len(),
                taps.len()
            )));
        }
        let mut maps = Vec::with_capacity(taps.len());
        for (t, &(features, scale)) in taps.iter().enumerate() {
            let pooled = g.roi_pool(features, rois, self.pool_size(), scale)?;
            maps.push(self.tap_forward(g, bind, t, pooled)?);
        }
        g.stack(&maps, 0)
    }
}

/// Pedestrian probability averaged over taps and cells of `maps[T×R×K×K×(C+1)]`, giving `[R]`.
pub fn aggregate_scores(g: &mut Graph, maps: Var) -> Result<Var> {
    let shape = g.shape(maps).to_vec();
    let [t, r, k, _, _] = shape[..] else {
        return Err(Error::InvalidShape {
            shape,
            reason: "expected [T,R,K,K,C+1]".into(),
        });
    };
    let fg = g.slice(maps, 4, 1, 1)?;
    let fg = g.reshape(fg, &[t, r, k * k])?;
    let fg = g.permute(fg, &[1, 0, 2])?;
    let fg = g.reshape(fg, &[r, t * k * k])?;
    g.reduce(ReduceKind::Mean, fg, Some(1))
}

/// Value-level head: one map per tap for a single RoI's pooled features.
pub fn part_score_head(roi_feats: &[Tensor], head: &PartHead, params: &Params) -> Result<Vec<PartScoreMap>> {
    if roi_feats.len() != head.taps.len() {
        return Err(Error::Invalid(format!(
            "part head has {} taps but {} RoI features were given",
            head.taps.len(),
            roi_feats.len()
        )));
    }
    let mut g = Graph::new();
    let mut bind = Binder::new(params, GroupSet::empty());
    roi_feats
        .iter()
        .enumerate()
        .map(|(t, f)| {
            let mut shape = vec![1];
            shape.extend_from_slice(f.shape());
            let x = g.input(f.reshaped(shape)?);
            let p = head.tap_forward(&mut g, &mut bind, t, x)?;
            let (k, c1) = (head.k, head.classes);
            PartScoreMap::new(g.value(p).reshaped(vec![k, k, c1])?)
        })
        .collect()
}
