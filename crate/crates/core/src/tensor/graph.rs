use super::Tensor;
use crate::error::{contract_err, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Local gradient rule of a recorded op.
///
/// `backward` receives the values of the op's inputs, its output value and the
/// upstream gradient, and returns one gradient per input. Entries for inputs
/// whose `needs` flag is false may be `None`.
pub trait Function: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>>;

    /// Distance from the forward evaluation to the nearest point where the op
    /// is not differentiable (in the op's own units). Smooth ops report
    /// infinity.
    fn kink_margin(&self, _inputs: &[&Tensor], _output: &Tensor) -> f64 {
        f64::INFINITY
    }
}

struct Recorded {
    func: Box<dyn Function>,
    inputs: Vec<Var>,
}

struct Node {
    name: &'static str,
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
    op: Option<Recorded>,
}

/// Dynamic reverse-mode tape.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// topological order of the computation and the graph is acyclic.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Records a leaf. Leaves with `requires_grad` accumulate gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            name: "leaf",
            grad: requires_grad.then(|| Tensor::zeros(value.dims())),
            value,
            requires_grad,
            op: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records the result of `func` applied to `inputs`.
    pub fn apply(&mut self, func: Box<dyn Function>, inputs: &[Var], value: Tensor) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            name: func.name(),
            value,
            requires_grad,
            grad: None,
            op: requires_grad.then(|| Recorded {
                func,
                inputs: inputs.to_vec(),
            }),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf; `None` for constants and interior nodes.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    /// Back-propagates from a scalar `loss`, adding into every reachable
    /// leaf's gradient accumulator.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got dims {:?}",
                loss_value.dims()
            ));
        }
        let mut pending: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        pending[loss.0] = Some(Tensor::full(loss_value.dims(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(grad) = pending[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(rec) = node.op.as_ref() else {
                let acc = self.nodes[idx].grad.as_mut().expect("leaf accumulator");
                acc.add_assign(&grad);
                continue;
            };
            let inputs: Vec<&Tensor> = rec.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = rec
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let grads = rec.func.backward(&inputs, &node.value, &grad, &needs);
            debug_assert_eq!(grads.len(), rec.inputs.len(), "{}", rec.func.name());
            for (input, g) in rec.inputs.iter().zip(grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(
                    g.dims(),
                    self.nodes[input.0].value.dims(),
                    "gradient shape from {}",
                    rec.func.name()
                );
                match pending[input.0].as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => pending[input.0] = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Smallest distance to a non-differentiable point over every recorded op.
    pub fn kink_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|node| {
                node.op.as_ref().map(|rec| {
                    let inputs: Vec<&Tensor> =
                        rec.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                    rec.func.kink_margin(&inputs, &node.value)
                })
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// First node holding a non-finite value, with the name of the op that
    /// produced it.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes.iter().enumerate().find_map(|(i, node)| {
            (!node.value.is_finite())
                .then_some((i, node.name))
        })
    }
}
