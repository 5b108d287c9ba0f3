//! Parameterised convolution and fully connected layers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ConvParams, Graph, Var};
use crate::error::Result;
use crate::params::{Binder, ParamId, Params};
use crate::tensor::{Real, Tensor};

/// He-normal initialisation for `fan_in` inputs.
pub fn he_normal(rng: &mut impl Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    normal(rng, shape, (2.0 / fan_in as f64).sqrt())
}

pub fn normal(rng: &mut impl Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng) as Real).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub conv: ConvParams,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut Params,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        conv: ConvParams,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let w = he_normal(rng, vec![out_channels, in_channels, kernel, kernel], fan_in);
        Conv2dLayer {
            weight: params.add(format!("{name}.weight"), w),
            bias: params.add(format!("{name}.bias"), Tensor::zeros(vec![out_channels])),
            conv,
        }
    }

    pub fn forward(&self, g: &mut Graph, bind: &mut Binder, x: Var) -> Result<Var> {
        let w = bind.var(g, self.weight);
        let b = bind.var(g, self.bias);
        g.conv2d(x, w, Some(b), self.conv)
    }
}

/// `y = x·W + b` over rows of `x[R×in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(params: &mut Params, name: &str, inputs: usize, outputs: usize, std: Option<f64>, rng: &mut impl Rng) -> Self {
        let w = match std {
            Some(s) => normal(rng, vec![inputs, outputs], s),
            None => he_normal(rng, vec![inputs, outputs], inputs),
        };
        Linear {
            weight: params.add(format!("{name}.weight"), w),
            bias: params.add(format!("{name}.bias"), Tensor::zeros(vec![outputs])),
        }
    }

    pub fn forward(&self, g: &mut Graph, bind: &mut Binder, x: Var) -> Result<Var> {
        let w = bind.var(g, self.weight);
        let b = bind.var(g, self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b, 1)
    }
}
