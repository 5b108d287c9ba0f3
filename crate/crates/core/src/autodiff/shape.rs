//! Element rearrangements: reshape, permute, flip, select, slice, concat,
//! stack and gather. Each backward applies the inverse rearrangement.

use super::graph::{Function, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{check_shape, split_axis, strides, Real, Tensor};

struct ReshapeFn;

impl Function for ReshapeFn {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(grad.reshaped(inputs[0].shape().to_vec())?)])
    }
}

/// Permutes axes so that output axis `i` is input axis `perm[i]`.
pub(crate) fn permute_data(data: &[Real], shape: &[usize], perm: &[usize]) -> (Vec<Real>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

struct PermuteFn {
    perm: Vec<usize>,
}

impl Function for PermuteFn {
    fn name(&self) -> &'static str {
        "permute"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let inv = inverse_perm(&self.perm);
        let (d, s) = permute_data(grad.data(), grad.shape(), &inv);
        Ok(vec![Some(Tensor::new(s, d)?)])
    }
}

fn flip_data(data: &[Real], shape: &[usize], axis: usize) -> Vec<Real> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut out = Vec::with_capacity(data.len());
    for o in 0..outer {
        for j in (0..n).rev() {
            let base = (o * n + j) * inner;
            out.extend_from_slice(&data[base..base + inner]);
        }
    }
    out
}

struct FlipFn {
    axis: usize,
}

impl Function for FlipFn {
    fn name(&self) -> &'static str {
        "flip"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let d = flip_data(grad.data(), grad.shape(), self.axis);
        Ok(vec![Some(Tensor::new(grad.shape().to_vec(), d)?)])
    }
}

/// Takes `len` consecutive indices starting at `start` along `axis`.
struct SliceFn {
    axis: usize,
    start: usize,
}

impl Function for SliceFn {
    fn name(&self) -> &'static str {
        "slice"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let (outer, n, inner) = split_axis(x.shape(), self.axis);
        let len = output.shape().get(self.axis).copied().unwrap_or(1);
        let mut gx = x.zeros_like();
        let d = gx.data_mut();
        let g = grad.data();
        for o in 0..outer {
            let src = &g[o * len * inner..(o + 1) * len * inner];
            let dst = (o * n + self.start) * inner;
            d[dst..dst + len * inner].copy_from_slice(src);
        }
        Ok(vec![Some(gx)])
    }
}

struct ConcatFn {
    axis: usize,
}

impl Function for ConcatFn {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (outer, total, inner) = split_axis(output.shape(), self.axis);
        let g = grad.data();
        let mut offset = 0;
        let mut out = Vec::with_capacity(inputs.len());
        for (x, &need) in inputs.iter().zip(needs) {
            let n = x.shape()[self.axis];
            if need {
                let mut gx = Vec::with_capacity(x.len());
                for o in 0..outer {
                    let base = (o * total + offset) * inner;
                    gx.extend_from_slice(&g[base..base + n * inner]);
                }
                out.push(Some(Tensor::new(x.shape().to_vec(), gx)?));
            } else {
                out.push(None);
            }
            offset += n;
        }
        Ok(out)
    }
}

struct GatherFn {
    indices: Vec<usize>,
}

impl Function for GatherFn {
    fn name(&self) -> &'static str {
        "gather"
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
        for (&i, &g) in self.indices.iter().zip(grad.data()) {
            d[i] += g;
        }
        Ok(vec![Some(gx)])
    }
}

fn check_axis(axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(Error::InvalidAxis { axis, rank })
    } else {
        Ok(())
    }
}

impl Graph {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        check_shape(shape)?;
        let tx = self.value(x);
        let n: usize = shape.iter().product();
        if n != tx.len() {
            return Err(Error::ElementCount {
                from: tx.len(),
                to: n,
            });
        }
        let value = tx.reshaped(shape.to_vec())?;
        Ok(self.record(ReshapeFn, &[x], value))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let rank = tx.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank {
            return Err(Error::Invalid(format!(
                "permutation {perm:?} does not match rank {rank}"
            )));
        }
        for &p in perm {
            check_axis(p, rank)?;
            if std::mem::replace(&mut seen[p], true) {
                return Err(Error::Invalid(format!("axis {p} repeated in {perm:?}")));
            }
        }
        let (d, s) = permute_data(tx.data(), tx.shape(), perm);
        let value = Tensor::new(s, d)?;
        Ok(self.record(PermuteFn { perm: perm.to_vec() }, &[x], value))
    }

    pub fn flip(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        check_axis(axis, tx.rank())?;
        let value = Tensor::new(tx.shape().to_vec(), flip_data(tx.data(), tx.shape(), axis))?;
        Ok(self.record(FlipFn { axis }, &[x], value))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        check_axis(axis, tx.rank())?;
        let (outer, n, inner) = split_axis(tx.shape(), axis);
        if len == 0 || start + len > n {
            return Err(Error::Invalid(format!(
                "slice {start}..{} out of range for axis length {n}",
                start + len
            )));
        }
        let d = tx.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = tx.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.record(SliceFn { axis, start }, &[x], value))
    }

    /// Picks one index along `axis` and drops that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let s = self.slice(x, axis, index, 1)?;
        let mut shape = self.shape(x).to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        self.reshape(s, &shape)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let base_shape = self.shape(*first).to_vec();
        check_axis(axis, base_shape.len())?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base_shape,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let n = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.record(ConcatFn { axis }, parts, value))
    }

    /// Stacks equal-shape tensors along a new axis.
    pub fn stack(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let mut expanded = Vec::with_capacity(parts.len());
        for &p in parts {
            let mut shape = self.shape(p).to_vec();
            if axis > shape.len() {
                return Err(Error::InvalidAxis {
                    axis,
                    rank: shape.len() + 1,
                });
            }
            shape.insert(axis, 1);
            expanded.push(self.reshape(p, &shape)?);
        }
        self.concat(&expanded, axis)
    }

    /// Picks elements by flat index into a rank-1 result.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if indices.is_empty() {
            return Err(Error::Invalid("gather with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= tx.len()) {
            return Err(Error::Invalid(format!(
                "gather index {bad} out of range for {} elements",
                tx.len()
            )));
        }
        let d = tx.data();
        let value = Tensor::from_slice(&indices.iter().map(|&i| d[i]).collect::<Vec<_>>());
        Ok(self.record(
            GatherFn {
                indices: indices.to_vec(),
            },
            &[x],
            value,
        ))
    }
}
