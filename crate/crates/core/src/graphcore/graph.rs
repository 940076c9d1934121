use crate::graphcore::params::{ParamId, ParameterStore};
use crate::graphcore::tensor::Tensor;
use crate::graphcore::GraphError;
use crate::scalar::Scalar;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward rule sees when it is replayed.
pub struct BackwardCtx<'a, S> {
    pub inputs: Vec<&'a Tensor<S>>,
    pub output: &'a Tensor<S>,
    pub grad: &'a Tensor<S>,
    /// `needs[i]` is false when input `i` does not lead to any gradient-carrying leaf;
    /// rules may return `None` for it.
    pub needs: Vec<bool>,
}

/// A recorded operation's vector-Jacobian product.
pub trait Op<S: Scalar> {
    fn name(&self) -> &'static str;

    /// Gradient with respect to each input, in input order, shaped like that input.
    fn backward(&self, ctx: &BackwardCtx<'_, S>) -> Vec<Option<Tensor<S>>>;
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    inputs: Vec<Var>,
    op: Option<Box<dyn Op<S>>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Append-only tape of tensor operations.
///
/// Nodes are stored in creation order, which is a topological order, so the
/// backward sweep is a single reverse pass. Nodes whose inputs never lead to a
/// gradient-carrying leaf drop their backward rule at record time.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    swept: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            swept: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf (data, noise draws); never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, false, None)
    }

    /// A free leaf that receives a gradient but is not tied to a parameter.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, true, None)
    }

    /// A leaf holding a copy of a stored parameter; its gradient can be
    /// accumulated back into the store after [`Graph::backward`].
    pub fn param(&mut self, store: &ParameterStore<S>, id: ParamId) -> Var {
        let trainable = store.is_trainable(id);
        self.push(store.value(id).clone(), trainable, Some(id))
    }

    /// Copy of `v` that blocks gradient flow: nothing upstream of the copy sees
    /// a contribution routed through it.
    pub fn stop_grad(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.push(value, false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records `value` as the output of `op` applied to `inputs`.
    ///
    /// Fails if the output holds NaN or infinite entries.
    pub fn record(
        &mut self,
        inputs: &[Var],
        value: Tensor<S>,
        op: impl Op<S> + 'static,
    ) -> Result<Var, GraphError> {
        if !value.is_finite() {
            return Err(GraphError::NonFinite {
                op: op.name(),
                shape: value.shape().to_vec(),
            });
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.to_vec(),
            op: if requires_grad { Some(Box::new(op)) } else { None },
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Returns gradients for every leaf reachable from the loss. Leaves that the
    /// loss does not depend on report no gradient (read as zero). A graph can be
    /// swept once; call [`Graph::reset_sweep`] to sweep again.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>, GraphError> {
        if self.swept {
            return Err(GraphError::BackwardTwice);
        }
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(GraphError::Shape {
                op: "backward",
                detail: format!("loss must be scalar, got shape {:?}", loss_value.shape()),
            });
        }
        self.swept = true;

        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads: leaf_grads });
        }
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), S::one()));

        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let Some(op) = node.op.as_ref() else {
                if node.requires_grad {
                    leaf_grads[idx] = Some(grad);
                }
                continue;
            };
            let ctx = BackwardCtx {
                inputs: node.inputs.iter().map(|i| &self.nodes[i.0].value).collect(),
                output: &node.value,
                grad: &grad,
                needs: node
                    .inputs
                    .iter()
                    .map(|i| self.nodes[i.0].requires_grad)
                    .collect(),
            };
            let input_grads = op.backward(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", op.name());
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(
                    g.shape(),
                    self.nodes[input.0].value.shape(),
                    "gradient shape from {}",
                    op.name()
                );
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }

    pub fn reset_sweep(&mut self) {
        self.swept = false;
    }

    /// Parameters referenced by this graph, with the node that holds each copy.
    pub fn param_nodes(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, Var(i))))
    }
}

/// Leaf gradients produced by one backward sweep.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like it when the loss does not reach it.
    pub fn wrt(&self, graph: &Graph<S>, v: Var) -> Tensor<S> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.shape(v)))
    }

    /// Adds every parameter-leaf gradient into the store's accumulators.
    pub fn accumulate_into(&self, graph: &Graph<S>, store: &mut ParameterStore<S>) {
        for (pid, var) in graph.param_nodes() {
            if let Some(g) = self.get(var) {
                store.accumulate_grad(pid, g);
            }
        }
        store.mark_populated();
    }
}
