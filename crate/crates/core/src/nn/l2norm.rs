use crate::autodiff::{Function, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const L2_EPS: Real = 1e-10;
pub const GAMMA_INIT: Real = 10.0;

/// Layout of a `[C×h×w]` or `[N×C×h×w]` tensor as (batch, channels, spatial).
fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h * w)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "l2_normalize_scaled expects [C,h,w] or [N,C,h,w]".into(),
        }),
    }
}

struct L2NormFn {
    eps: Real,
}

impl Function for L2NormFn {
    fn name(&self) -> &'static str {
        "l2_normalize_scaled"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let (n, c, s) = layout(x.shape())?;
        let (xd, gd, gy) = (x.data(), gamma.data(), grad.data());
        let mut gx = x.zeros_like();
        let mut gg = gamma.zeros_like();
        for b in 0..n {
            for p in 0..s {
                let idx = |ch: usize| (b * c + ch) * s + p;
                let sq: Real = (0..c).map(|ch| xd[idx(ch)] * xd[idx(ch)]).sum();
                let r = 1.0 / (sq + self.eps).sqrt();
                // dn = dy ⊙ γ; dx = r (dn − n ⟨dn, n⟩)
                let mut dot = 0.0;
                for ch in 0..c {
                    let i = idx(ch);
                    let nv = xd[i] * r;
                    gg.data_mut()[ch] += gy[i] * nv;
                    dot += gy[i] * gd[ch] * nv;
                }
                for ch in 0..c {
                    let i = idx(ch);
                    let nv = xd[i] * r;
                    gx.data_mut()[i] = r * (gy[i] * gd[ch] - nv * dot);
                }
            }
        }
        Ok(vec![needs[0].then_some(gx), needs[1].then_some(gg)])
    }
}

impl Graph {
    /// Divides the channel vector at every spatial position by
    /// `sqrt(Σ x² + eps)` and scales channel `c` by `gamma[c]`.
    pub fn l2_normalize_scaled(&mut self, x: Var, gamma: Var, eps: Real) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Invalid(format!("eps must be positive, got {eps}")));
        }
        let (tx, tg) = (self.value(x), self.value(gamma));
        let (n, c, s) = layout(tx.shape())?;
        if tg.len() != c {
            return Err(Error::ShapeMismatch {
                op: "l2_normalize_scaled",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let (xd, gd) = (tx.data(), tg.data());
        let mut out = vec![0.0; tx.len()];
        for b in 0..n {
            for p in 0..s {
                let idx = |ch: usize| (b * c + ch) * s + p;
                let sq: Real = (0..c).map(|ch| xd[idx(ch)] * xd[idx(ch)]).sum();
                let r = 1.0 / (sq + eps).sqrt();
                for ch in 0..c {
                    out[idx(ch)] = xd[idx(ch)] * r * gd[ch];
                }
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.record(L2NormFn { eps }, &[x, gamma], value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(x: &[Real], gamma: Real, eps: Real) -> Vec<Real> {
        let mut g = Graph::new();
        let xv = g.input(Tensor::new(vec![x.len(), 1, 1], x.to_vec()).unwrap());
        let gv = g.input(Tensor::full(vec![x.len()], gamma));
        let y = g.l2_normalize_scaled(xv, gv, eps).unwrap();
        g.value(y).data().to_vec()
    }

    #[test]
    fn three_four_five() {
        let y = run(&[3.0, 4.0], 1.0, 1e-12);
        assert!((y[0] - 0.6).abs() < 1e-12 && (y[1] - 0.8).abs() < 1e-12);
        let y = run(&[3.0, 4.0], 10.0, 1e-12);
        assert!((y[0] - 6.0).abs() < 1e-10 && (y[1] - 8.0).abs() < 1e-10);
    }

    #[test]
    fn zero_vector_stays_zero() {
        assert_eq!(run(&[0.0, 0.0, 0.0], 1.0, L2_EPS), vec![0.0; 3]);
    }
}
