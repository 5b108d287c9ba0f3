use crate::autodiff::{Function, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct MaxoutFn {
    /// Index of the winning source for each element.
    winner: Vec<u8>,
}

impl Function for MaxoutFn {
    fn name(&self) -> &'static str {
        "maxout_merge"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let mut grads: Vec<Option<Tensor>> = inputs
            .iter()
            .zip(needs)
            .map(|(t, &need)| need.then(|| t.zeros_like()))
            .collect();
        for (i, (&w, &g)) in self.winner.iter().zip(grad.data()).enumerate() {
            if let Some(t) = grads[w as usize].as_mut() {
                t.data_mut()[i] = g;
            }
        }
        Ok(grads)
    }
}

impl Graph {
    /// Elementwise maximum over two or more equal-shape maps. Ties go to
    /// the earliest source.
    pub fn maxout_merge(&mut self, maps: &[Var]) -> Result<Var> {
        if maps.len() < 2 || maps.len() > u8::MAX as usize {
            return Err(Error::Invalid(format!("maxout_merge needs 2..=255 maps, got {}", maps.len())));
        }
        let shape = self.shape(maps[0]).to_vec();
        for &m in &maps[1..] {
            if self.shape(m) != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "maxout_merge",
                    lhs: shape,
                    rhs: self.shape(m).to_vec(),
                });
            }
        }
        let mut out = self.value(maps[0]).data().to_vec();
        let mut winner = vec![0u8; out.len()];
        for (k, &m) in maps.iter().enumerate().skip(1) {
            for (i, &v) in self.value(m).data().iter().enumerate() {
                if v > out[i] {
                    out[i] = v;
                    winner[i] = k as u8;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.record(MaxoutFn { winner }, maps, value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Real;

    #[test]
    fn elementwise_winner() {
        let mut g = Graph::new();
        let a = g.param(Tensor::from_slice(&[1.0, 5.0]));
        let b = g.param(Tensor::from_slice(&[4.0, 2.0]));
        let c = g.param(Tensor::from_slice(&[3.0, 3.0]));
        let m = g.maxout_merge(&[a, b, c]).unwrap();
        assert_eq!(g.value(m).data(), &[4.0, 5.0]);
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[0.0, 1.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[1.0, 0.0]);
        assert_eq!(g.grad(c).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn idempotent_and_dominant() {
        let mut g = Graph::new();
        let t = Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 3.5]).unwrap();
        let a = g.input(t.clone());
        let m = g.maxout_merge(&[a, a, a]).unwrap();
        assert_eq!(g.value(m), &t);
        let shifted = g.input(t.map(|v| v - 1.0 as Real));
        let m = g.maxout_merge(&[shifted, a]).unwrap();
        assert_eq!(g.value(m), &t);
    }

    #[test]
    fn rejects_bad_input() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(vec![2]));
        let b = g.input(Tensor::zeros(vec![3]));
        assert!(g.maxout_merge(&[a]).is_err());
        assert!(matches!(g.maxout_merge(&[a, b]), Err(Error::ShapeMismatch { .. })));
    }
}
