use crate::error::{Error, Result};
use crate::params::{GroupSet, ParamId, Params};
use crate::tensor::{Real, Tensor};

/// Momentum buffers, one per parameter, created on first use.
#[derive(Clone, Debug, Default)]
pub struct Velocity {
    buffers: Vec<Option<Tensor>>,
}

impl Velocity {
    pub fn new(params: &Params) -> Self {
        Velocity {
            buffers: vec![None; params.len()],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdSettings {
    pub lr: Real,
    pub momentum: Real,
    pub weight_decay: Real,
}

/// `v ← μv + (g + λw)`, `w ← w − lr·v` for every gradient whose parameter
/// belongs to a trainable group. Parameters outside `trainable` are never
/// written, whatever gradients are passed.
pub fn sgd_step(params: &mut Params, velocity: &mut Velocity, grads: &[(ParamId, Tensor)], s: SgdSettings, trainable: GroupSet) -> Result<()> {
    if velocity.buffers.len() != params.len() {
        return Err(Error::Invalid("velocity was built for a different parameter set".into()));
    }
    for (id, grad) in grads {
        if !trainable.contains(params.entry(*id).group) {
            continue;
        }
        let w = params.get_mut(*id);
        if grad.shape() != w.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                lhs: w.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        let v = velocity.buffers[id.index()].get_or_insert_with(|| w.zeros_like());
        for ((vi, wi), gi) in v.data_mut().iter_mut().zip(w.data_mut()).zip(grad.data()) {
            *vi = s.momentum * *vi + gi + s.weight_decay * *wi;
            *wi -= s.lr * *vi;
        }
    }
    Ok(())
}
