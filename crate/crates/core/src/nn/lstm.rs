//! LSTM cell and the four-direction scan over part score grids.
//!
//! Each direction treats the K×K cells as one sequence of length K²:
//! row-major left to right, its reverse, column-major top to bottom, and
//! its reverse. Per-step hidden states are projected to class logits,
//! softmaxed and written back to their grid cell; the four refined grids
//! are averaged.

use rand::Rng;

use super::layers::normal;
use super::part::PartScoreMap;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Binder, GroupSet, ParamGroup, ParamId, Params};
use crate::tensor::{Real, Tensor};

/// Graph handles for one cell's weights. Gate blocks along the `4·Dh`
/// axis are ordered input, forget, candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    /// `[in × 4Dh]`
    pub w_input: Var,
    /// `[Dh × 4Dh]`
    pub w_hidden: Var,
    /// `[4Dh]`
    pub bias: Var,
}

/// One step: `i,f,o = σ(·)`, `g = tanh(·)`, `c' = f⊙c + i⊙g`,
/// `h' = o⊙tanh(c')`. Rows of `x[R×in]`, `h[R×Dh]`, `c[R×Dh]` are
/// independent sequences.
pub fn lstm_cell(g: &mut Graph, w: &LstmVars, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let dh = g.shape(h)[1];
    if g.shape(w.w_hidden) != [dh, 4 * dh] || g.shape(c) != g.shape(h) {
        return Err(Error::ShapeMismatch {
            op: "lstm_cell",
            lhs: g.shape(h).to_vec(),
            rhs: g.shape(w.w_hidden).to_vec(),
        });
    }
    let xi = g.matmul(x, w.w_input)?;
    let hh = g.matmul(h, w.w_hidden)?;
    let pre = g.add(xi, hh)?;
    let pre = g.add_bias(pre, w.bias, 1)?;
    let i = g.slice(pre, 1, 0, dh)?;
    let f = g.slice(pre, 1, dh, dh)?;
    let gg = g.slice(pre, 1, 2 * dh, dh)?;
    let o = g.slice(pre, 1, 3 * dh, dh)?;
    let i = g.sigmoid(i)?;
    let f = g.sigmoid(f)?;
    let gg = g.tanh(gg)?;
    let o = g.sigmoid(o)?;
    let fc = g.mul(f, c)?;
    let ig = g.mul(i, gg)?;
    let c_next = g.add(fc, ig)?;
    let tc = g.tanh(c_next)?;
    let h_next = g.mul(o, tc)?;
    Ok((h_next, c_next))
}

/// Parameters of one scan direction: the cell plus its output projection.
#[derive(Clone, Debug)]
pub struct LstmDirection {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub proj_weight: ParamId,
    pub proj_bias: ParamId,
}

impl LstmDirection {
    fn new(params: &mut Params, name: &str, inputs: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let std_in = (1.0 / inputs as f64).sqrt();
        let std_h = (1.0 / hidden as f64).sqrt();
        LstmDirection {
            w_input: params.add(format!("{name}.w_input"), normal(rng, vec![inputs, 4 * hidden], std_in)),
            w_hidden: params.add(format!("{name}.w_hidden"), normal(rng, vec![hidden, 4 * hidden], std_h * 0.5)),
            bias: params.add(format!("{name}.bias"), Tensor::zeros(vec![4 * hidden])),
            proj_weight: params.add(format!("{name}.proj_weight"), normal(rng, vec![hidden, inputs], std_h)),
            proj_bias: params.add(format!("{name}.proj_bias"), Tensor::zeros(vec![inputs])),
        }
    }

    fn vars(&self, g: &mut Graph, bind: &mut Binder) -> (LstmVars, Var, Var) {
        let cell = LstmVars {
            w_input: bind.var(g, self.w_input),
            w_hidden: bind.var(g, self.w_hidden),
            bias: bind.var(g, self.bias),
        };
        (cell, bind.var(g, self.proj_weight), bind.var(g, self.proj_bias))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanDirection {
    LeftToRight,
    RightToLeft,
    TopToBottom,
    BottomToTop,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] = [
        ScanDirection::LeftToRight,
        ScanDirection::RightToLeft,
        ScanDirection::TopToBottom,
        ScanDirection::BottomToTop,
    ];

    fn column_major(self) -> bool {
        matches!(self, ScanDirection::TopToBottom | ScanDirection::BottomToTop)
    }

    fn reversed(self) -> bool {
        matches!(self, ScanDirection::RightToLeft | ScanDirection::BottomToTop)
    }

    /// Grid cell (row-major index) visited at each step.
    pub fn order(self, k: usize) -> Vec<usize> {
        let mut cells: Vec<usize> = if self.column_major() {
            (0..k).flat_map(|c| (0..k).map(move |r| r * k + c)).collect()
        } else {
            (0..k * k).collect()
        };
        if self.reversed() {
            cells.reverse();
        }
        cells
    }
}

/// Four independent LSTMs, one per scan direction.
#[derive(Clone, Debug)]
pub struct GridLstm {
    pub directions: Vec<LstmDirection>,
    pub hidden: usize,
    pub classes: usize,
}

impl GridLstm {
    /// `classes` is C+1; every parameter goes into the `lstm` group.
    pub fn new(params: &mut Params, classes: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let names = ["lstm.left", "lstm.right", "lstm.top", "lstm.bottom"];
        let directions = names
            .iter()
            .map(|n| LstmDirection::new(params, n, classes, hidden, rng))
            .collect();
        GridLstm {
            directions,
            hidden,
            classes,
        }
    }

    /// Refines `maps[B×K×K×(C+1)]` of per-cell probabilities, returning a
    /// map of the same shape.
    pub fn forward(&self, g: &mut Graph, bind: &mut Binder, maps: Var) -> Result<Var> {
        let [b, k, k2, c1] = *g.shape(maps) else {
            return Err(Error::InvalidShape {
                shape: g.shape(maps).to_vec(),
                reason: "grid LSTM expects [B,K,K,C+1]".into(),
            });
        };
        if k != k2 || c1 != self.classes {
            return Err(Error::InvalidShape {
                shape: vec![b, k, k2, c1],
                reason: format!("grid LSTM expects a square grid with {} classes", self.classes),
            });
        }
        let cells = k * k;
        let transposed = g.permute(maps, &[0, 2, 1, 3])?;
        let row_seq = g.reshape(maps, &[b, cells, c1])?;
        let col_seq = g.reshape(transposed, &[b, cells, c1])?;

        let mut refined = Vec::with_capacity(4);
        for (dir, params) in ScanDirection::ALL.into_iter().zip(&self.directions) {
            let mut seq = if dir.column_major() { col_seq } else { row_seq };
            if dir.reversed() {
                seq = g.flip(seq, 1)?;
            }
            let (cell, pw, pb) = params.vars(g, bind);
            let mut h = g.input(Tensor::zeros(vec![b, self.hidden]));
            let mut c = g.input(Tensor::zeros(vec![b, self.hidden]));
            let mut outs = Vec::with_capacity(cells);
            for t in 0..cells {
                let x = g.select(seq, 1, t)?;
                (h, c) = lstm_cell(g, &cell, x, h, c)?;
                let logits = g.matmul(h, pw)?;
                let logits = g.add_bias(logits, pb, 1)?;
                outs.push(g.softmax(logits));
            }
            let mut out = g.stack(&outs, 1)?;
            if dir.reversed() {
                out = g.flip(out, 1)?;
            }
            let mut grid = g.reshape(out, &[b, k, k, c1])?;
            if dir.column_major() {
                grid = g.permute(grid, &[0, 2, 1, 3])?;
            }
            refined.push(grid);
        }
        let mut total = refined[0];
        for &r in &refined[1..] {
            total = g.add(total, r)?;
        }
        Ok(g.scale(total, 0.25))
    }

    /// Value-level refinement of a single map.
    pub fn refine(&self, params: &Params, map: &PartScoreMap) -> Result<PartScoreMap> {
        let mut g = Graph::new();
        let mut bind = Binder::new(params, GroupSet::empty());
        let (k, c1) = (map.k(), map.classes());
        let m = g.input(map.grid().reshaped(vec![1, k, k, c1])?);
        let out = self.forward(&mut g, &mut bind, m)?;
        PartScoreMap::new(g.value(out).reshaped(vec![k, k, c1])?)
    }
}

/// Standalone parameter set for refining maps outside a full detector.
pub fn grid_lstm_params(classes: usize, hidden: usize, rng: &mut impl Rng) -> (Params, GridLstm) {
    let mut params = Params::new();
    let grid = GridLstm::new(&mut params, classes, hidden, rng);
    debug_assert!(params.entries().iter().all(|e| e.group == ParamGroup::Lstm));
    (params, grid)
}

/// Convenience for `grid.refine`.
pub fn grid_lstm_refine(map: &PartScoreMap, params: &Params, grid: &GridLstm) -> Result<PartScoreMap> {
    grid.refine(params, map)
}

/// Sets every parameter of the grid LSTM to `value`.
pub fn fill_params(params: &mut Params, ids: impl IntoIterator<Item = ParamId>, value: Real) {
    for id in ids {
        params.get_mut(id).data_mut().fill(value);
    }
}

impl GridLstm {
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.directions
            .iter()
            .flat_map(|d| [d.w_input, d.w_hidden, d.bias, d.proj_weight, d.proj_bias])
            .collect()
    }
}
