use super::ops::{self, Op};
use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// Append-only tape. Node order is a valid topological order, so the
/// backward sweep is a reverse scan.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    differentiated: bool,
}

/// Gradients of a scalar with respect to the leaves of a graph.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for a leaf (input or parameter). `None` when the leaf is
    /// untracked or unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
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

    /// Records an untracked value.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// Records a tracked leaf whose gradient is reported by
    /// [`Graph::gradients`].
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true, "input")
    }

    /// Copies every parameter of `store` onto the tape, in store order.
    /// Untracked bindings act as constants: nothing upstream of them is
    /// differentiated and `backward` leaves the store alone.
    pub fn bind(&mut self, store: &ParamStore, track: bool) -> Vec<Var> {
        store
            .iter()
            .enumerate()
            .map(|(index, p)| {
                self.push_unchecked(
                    p.value.clone(),
                    Op::Param {
                        store: store.id(),
                        index,
                    },
                    track,
                )
            })
            .collect()
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

    pub(crate) fn push(
        &mut self,
        value: Tensor,
        op: Op,
        requires_grad: bool,
        name: &'static str,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse-mode sweep from a scalar. May run once per graph.
    pub fn gradients(&mut self, loss: Var) -> Result<Gradients> {
        if self.differentiated {
            return Err(Error::BackwardTwice);
        }
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(Error::Detached);
        }
        self.differentiated = true;

        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf | Op::Param { .. }) {
                continue;
            }
            let Some(grad) = grads[i].take() else {
                continue;
            };
            ops::backprop(&self.nodes, i, &grad, &mut grads);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    /// Differentiates `loss` and writes parameter gradients into the stores
    /// that were bound with tracking on.
    pub fn backward(&mut self, loss: Var, stores: &mut [&mut ParamStore]) -> Result<()> {
        let grads = self.gradients(loss)?;
        for store in stores.iter() {
            if let Some(name) = store.first_pending() {
                return Err(Error::GradientPending(name.to_string()));
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let Op::Param { store, index } = node.op else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            // Tracked but unreachable parameters get an explicit zero.
            let zeros;
            let g = match grads.get(Var(i)) {
                Some(g) => g,
                None => {
                    zeros = vec![0.0; node.value.len()];
                    &zeros
                }
            };
            if let Some(target) = stores.iter_mut().find(|s| s.id() == store) {
                target.accumulate_grad(index, g);
            }
        }
        Ok(())
    }
}
