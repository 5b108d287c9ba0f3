use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a recorded operation.
///
/// `inputs` are the forward values of the operation's inputs, `output` its
/// forward value and `grad` the gradient flowing into the output. Returns
/// one gradient per input; entries may be `None` when `needs[i]` is false.
pub trait Function {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    func: Option<Box<dyn Function>>,
    requires_grad: bool,
}

/// Define-by-run tape. Nodes are appended in evaluation order, so every
/// node's inputs precede it and a single reverse sweep visits each node once.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Node {
            value,
            inputs: Vec::new(),
            func: None,
            requires_grad,
        })
    }

    pub fn scalar(&mut self, value: Real) -> Var {
        self.input(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Records an operation whose forward value has already been computed.
    pub fn record(&mut self, func: impl Function + 'static, inputs: &[Var], value: Tensor) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let func: Option<Box<dyn Function>> = if requires_grad {
            Some(Box::new(func))
        } else {
            None
        };
        self.push(Node {
            value,
            inputs: inputs.to_vec(),
            func,
            requires_grad,
        })
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a one-element output, seeding its gradient with 1.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let value = &self.nodes[output.0].value;
        if value.len() != 1 {
            return Err(Error::InvalidShape {
                shape: value.shape().to_vec(),
                reason: "backward() needs a one-element output".into(),
            });
        }
        let seed = Tensor::full(value.shape().to_vec(), 1.0);
        self.backward_with(output, seed)
    }

    pub fn backward_with(&mut self, output: Var, seed: Tensor) -> Result<()> {
        if seed.shape() != self.nodes[output.0].value.shape() {
            return Err(Error::ShapeMismatch {
                op: "backward",
                lhs: seed.shape().to_vec(),
                rhs: self.nodes[output.0].value.shape().to_vec(),
            });
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let Some(func) = node.func.as_ref() else {
                continue;
            };
            let Some(grad) = self.grads[idx].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let input_grads = func.backward(&inputs, &node.value, &grad, &needs)?;
            let input_vars = node.inputs.clone();
            // Keep the node's own gradient readable after the sweep.
            self.grads[idx] = Some(grad);
            for ((var, g), need) in input_vars.into_iter().zip(input_grads).zip(needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[var.0].value.shape(), "{}", func_name(&self.nodes[idx]));
                match &mut self.grads[var.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

fn func_name(node: &Node) -> &'static str {
    node.func.as_ref().map(|f| f.name()).unwrap_or("leaf")
}
