use super::graph::{Function, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: Real = 1e-12;

struct SoftmaxFn {
    width: usize,
}

impl Function for SoftmaxFn {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let w = self.width;
        let y = output.data();
        let g = grad.data();
        let mut gx = vec![0.0; y.len()];
        for r in 0..y.len() / w {
            let (yr, gr) = (&y[r * w..(r + 1) * w], &g[r * w..(r + 1) * w]);
            let dot: Real = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
            for j in 0..w {
                gx[r * w + j] = yr[j] * (gr[j] - dot);
            }
        }
        Ok(vec![Some(Tensor::new(output.shape().to_vec(), gx)?)])
    }
}

struct CrossEntropyFn {
    labels: Vec<usize>,
    width: usize,
}

impl Function for CrossEntropyFn {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let p = inputs[0];
        let rows = self.labels.len() as Real;
        let g = grad.item();
        let mut gp = p.zeros_like();
        let d = gp.data_mut();
        for (r, &y) in self.labels.iter().enumerate() {
            let i = r * self.width + y;
            let pv = p.data()[i];
            if pv > PROB_FLOOR {
                d[i] = -g / (pv * rows);
            }
        }
        Ok(vec![Some(gp)])
    }
}

/// Numerically stable softmax of one row.
pub fn softmax_slice(x: &[Real]) -> Vec<Real> {
    let m = x.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let e: Vec<Real> = x.iter().map(|v| (v - m).exp()).collect();
    let s: Real = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl Graph {
    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let w = *tx.shape().last().expect("rank ≥ 1");
        let mut out = Vec::with_capacity(tx.len());
        for row in tx.data().chunks(w) {
            out.extend(softmax_slice(row));
        }
        let value = Tensor::new(tx.shape().to_vec(), out).expect("same shape");
        self.record(SoftmaxFn { width: w }, &[x], value)
    }

    /// Mean over rows of `−ln max(p[row, label], 1e-12)` for probabilities
    /// laid out as `[rows × classes]` (any leading shape flattens to rows).
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let tp = self.value(probs);
        let w = *tp.shape().last().expect("rank ≥ 1");
        let rows = tp.len() / w;
        if labels.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: tp.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= w) {
            return Err(Error::Invalid(format!("label {bad} out of range for {w} classes")));
        }
        let d = tp.data();
        let total: Real = labels
            .iter()
            .enumerate()
            .map(|(r, &y)| -(d[r * w + y].max(PROB_FLOOR)).ln())
            .sum();
        let value = Tensor::scalar(total / rows as Real);
        Ok(self.record(
            CrossEntropyFn {
                labels: labels.to_vec(),
                width: w,
            },
            &[probs],
            value,
        ))
    }
}
