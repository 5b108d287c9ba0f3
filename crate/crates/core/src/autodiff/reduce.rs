use super::graph::{Function, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{split_axis, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    /// Gradient flows to the first maximal element only.
    Max,
}

struct ReduceFn {
    kind: ReduceKind,
    /// `None` reduces every element.
    axis: Option<usize>,
    /// For `Max`: the input offset within each reduced run.
    argmax: Vec<usize>,
}

impl Function for ReduceFn {
    fn name(&self) -> &'static str {
        match self.kind {
            ReduceKind::Sum => "sum",
            ReduceKind::Mean => "mean",
            ReduceKind::Max => "reduce_max",
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let (outer, n, inner) = match self.axis {
            Some(axis) => split_axis(x.shape(), axis),
            None => (1, x.len(), 1),
        };
        let g = grad.data();
        let mut gx = x.zeros_like();
        let d = gx.data_mut();
        for o in 0..outer {
            for r in 0..inner {
                let gi = g[o * inner + r];
                match self.kind {
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let v = if self.kind == ReduceKind::Mean {
                            gi / n as Real
                        } else {
                            gi
                        };
                        for j in 0..n {
                            d[(o * n + j) * inner + r] += v;
                        }
                    }
                    ReduceKind::Max => {
                        let j = self.argmax[o * inner + r];
                        d[(o * n + j) * inner + r] += gi;
                    }
                }
            }
        }
        Ok(vec![Some(gx)])
    }
}

impl Graph {
    /// Reduces along `axis` (removing it), or over all elements when `axis`
    /// is `None`. A fully reduced result has shape `[1]`.
    pub fn reduce(&mut self, kind: ReduceKind, x: Var, axis: Option<usize>) -> Result<Var> {
        let tx = self.value(x);
        let (outer, n, inner, shape) = match axis {
            Some(a) if a >= tx.rank() => {
                return Err(Error::InvalidAxis {
                    axis: a,
                    rank: tx.rank(),
                })
            }
            Some(a) => {
                let (o, n, i) = split_axis(tx.shape(), a);
                let mut shape = tx.shape().to_vec();
                shape.remove(a);
                if shape.is_empty() {
                    shape.push(1);
                }
                (o, n, i, shape)
            }
            None => (1, tx.len(), 1, vec![1]),
        };
        let d = tx.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::new();
        for o in 0..outer {
            for r in 0..inner {
                let item = |j: usize| d[(o * n + j) * inner + r];
                match kind {
                    ReduceKind::Sum => out.push((0..n).map(item).sum()),
                    ReduceKind::Mean => out.push((0..n).map(item).sum::<Real>() / n as Real),
                    ReduceKind::Max => {
                        let mut best = 0;
                        for j in 1..n {
                            if item(j) > item(best) {
                                best = j;
                            }
                        }
                        out.push(item(best));
                        argmax.push(best);
                    }
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.record(ReduceFn { kind, axis, argmax }, &[x], value))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.reduce(ReduceKind::Sum, x, None).expect("full reduction")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        self.reduce(ReduceKind::Mean, x, None).expect("full reduction")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_sum() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_slice(&[2.0, 4.0]));
        let m = g.mean(x);
        assert_eq!(g.value(m).item(), 3.0);
        let z = g.input(Tensor::zeros(vec![3, 2]));
        let s = g.sum(z);
        assert_eq!(g.value(s).item(), 0.0);
    }

    #[test]
    fn max_gradient_goes_to_argmax() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_slice(&[1.0, 3.0, 2.0]));
        let m = g.reduce(ReduceKind::Max, x, Some(0)).unwrap();
        assert_eq!(g.value(m).item(), 3.0);
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn axis_reduction_shapes() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let s0 = g.reduce(ReduceKind::Sum, x, Some(0)).unwrap();
        assert_eq!(g.value(s0).data(), &[5.0, 7.0, 9.0]);
        let m1 = g.reduce(ReduceKind::Mean, x, Some(1)).unwrap();
        assert_eq!(g.value(m1).data(), &[2.0, 5.0]);
        assert!(matches!(
            g.reduce(ReduceKind::Sum, x, Some(2)),
            Err(Error::InvalidAxis { .. })
        ));
    }
}
