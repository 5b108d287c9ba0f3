use super::graph::{Function, Graph, Var};
use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct MatMulFn;

impl Function for MatMulFn {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let ga = needs[0].then(|| {
            let mut d = vec![0.0; m * k];
            gemm_nt(m, n, k, grad.data(), b.data(), &mut d);
            Tensor::new(vec![m, k], d).expect("matmul grad shape")
        });
        let gb = needs[1].then(|| {
            let mut d = vec![0.0; k * n];
            gemm_tn(k, m, n, a.data(), grad.data(), &mut d);
            Tensor::new(vec![k, n], d).expect("matmul grad shape")
        });
        Ok(vec![ga, gb])
    }
}

impl Graph {
    /// `[m×k] · [k×n] → [m×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, ta.data(), tb.data(), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.record(MatMulFn, &[a, b], value))
    }
}
