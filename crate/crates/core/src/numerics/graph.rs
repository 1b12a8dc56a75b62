use super::tensor::Tensor;
use super::{NumericsError, Result};

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything a backward closure may look at.
pub struct BackwardArgs<'a> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a [f64],
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    /// `needs[i]` is false when input `i` does not require a gradient.
    pub needs: Vec<bool>,
}

/// Maps the output gradient to one gradient per input (`None` = not needed).
pub type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    leaf: bool,
    op: &'static str,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// list is already a topological order and backward is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// Values produced by [`Graph::detach`], in call order.
    detached: Vec<Tensor>,
    /// Values the next detach calls return instead of their live input.
    replay: Vec<Tensor>,
}

/// Result of [`Graph::backward`]: gradients for every leaf that requires one.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose `k`-th [`Graph::detach`] returns `values[k]`, so a
    /// perturbed re-evaluation holds stopped-gradient values fixed.
    pub fn replaying(values: Vec<Tensor>) -> Self {
        Self { replay: values, ..Self::default() }
    }

    pub fn detached_values(&self) -> &[Tensor] {
        &self.detached
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad,
            leaf: true,
            op: "leaf",
        });
        Var(self.nodes.len() - 1)
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

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    /// Copy of `v`'s value with no connection to the tape (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let k = self.detached.len();
        let value = match self.replay.get(k) {
            Some(r) if r.shape() == self.shape(v) => r.clone(),
            _ => self.value(v).clone(),
        };
        self.detached.push(value.clone());
        self.constant(value)
    }

    /// Records an operation. The backward closure is dropped when no input
    /// requires a gradient. Public so tests and callers can register custom ops.
    pub fn custom_op(
        &mut self,
        op: &'static str,
        value: Tensor,
        inputs: &[Var],
        backward: BackwardFn,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.to_vec(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            leaf: false,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let out = self.value(loss);
        if out.numel() != 1 {
            return Err(NumericsError::NonScalarLoss(out.shape().to_vec()));
        }
        if !out.item().is_finite() {
            return Err(NumericsError::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if node.leaf {
                continue;
            }
            let Some(backward) = node.backward.as_ref() else {
                grads[id] = None;
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let args = BackwardArgs {
                grad: &grad,
                inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                output: &node.value,
                needs: node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect(),
            };
            let input_grads = backward(&args);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "op {}", node.op);
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.len(), self.nodes[input.0].value.numel(), "op {}", node.op);
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        for (id, node) in self.nodes.iter().enumerate() {
            if node.leaf && node.requires_grad && grads[id].is_none() {
                grads[id] = Some(vec![0.0; node.value.numel()]);
            }
            if !node.leaf {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let f = g.sum(sq);
        let grads = g.backward(f).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(NumericsError::NonScalarLoss(_))));
    }

    #[test]
    fn constants_and_unreached_leaves() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::from_vec(vec![3.0]));
        let x = g.param(Tensor::from_vec(vec![2.0]));
        let unused = g.param(Tensor::from_vec(vec![5.0, 6.0]));
        let y = g.mul(c, x).unwrap();
        let f = g.sum(y);
        let grads = g.backward(f).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[3.0]);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(unused).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![2.0]));
        let d = g.detach(x);
        let y = g.mul(d, x).unwrap();
        let f = g.sum(y);
        let grads = g.backward(f).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0]);
    }
}
