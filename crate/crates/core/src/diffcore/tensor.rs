//! Dense row-major `f64` tensors with reverse-mode differentiation.
//!
//! Every op allocates a fresh node that remembers its parents and a
//! closure mapping the output gradient to per-parent gradients. The graph is
//! rebuilt on every forward pass; [`Tensor::backward`] linearises it into a
//! tape (reverse topological order) and sweeps it once.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

pub(crate) type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Cheap-to-clone handle to an immutable tensor node.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &self.0.data)
            .finish()
    }
}

impl Tensor {
    /// Constant tensor (no gradient tracking).
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::leaf(shape, data, false)
    }

    /// Trainable leaf: gradients are accumulated into it by [`Tensor::backward`].
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::leaf(shape, data, true)
    }

    fn leaf(shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) && !data.is_empty() {
            return Err(Error::dim(format!("zero-sized dim in {shape:?} with data")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self::raw(shape.to_vec(), data, requires_grad, Vec::new(), None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::raw(shape.to_vec(), vec![0.0; n], false, Vec::new(), None)
    }

    pub fn scalar(v: f64) -> Self {
        Self::raw(vec![1], vec![v], false, Vec::new(), None)
    }

    fn raw(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Self {
        Tensor(Arc::new(Node {
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            parents,
            backward,
        }))
    }

    /// Builds an op output. The graph edge is only recorded when some parent
    /// tracks gradients.
    pub fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: &[&Tensor],
        backward: impl Fn(&[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync + 'static,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let tracked = parents.iter().any(|p| p.requires_grad());
        if tracked {
            let parents = parents.iter().map(|&p| p.clone()).collect();
            Self::raw(shape, data, true, parents, Some(Box::new(backward)))
        } else {
            Self::raw(shape, data, false, Vec::new(), None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.0.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::contract(format!("item() on shape {:?}", self.0.shape))),
        }
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::raw(self.0.shape.clone(), self.0.data.clone(), false, Vec::new(), None)
    }

    /// A fresh leaf with new values and the same gradient-tracking flag.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Tensor> {
        Self::leaf(&self.0.shape, data, self.0.requires_grad)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ptr(&self) -> *const () {
        Arc::as_ptr(&self.0) as *const ()
    }

    /// Reverse sweep from a one-element output. Leaves that track gradients
    /// accumulate `d(self)/d(leaf)`; calling twice without
    /// [`Tensor::zero_grad`] sums the two results.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "backward() needs a scalar output, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::contract("backward() on a tensor with no recorded graph"));
        }

        let tape = self.topo_order();
        let mut pending: HashMap<*const (), Vec<f64>> = HashMap::new();
        pending.insert(self.ptr(), vec![1.0]);

        for node in tape.iter().rev() {
            let Some(g) = pending.remove(&node.ptr()) else {
                continue;
            };
            match &node.0.backward {
                None => {
                    if node.requires_grad() {
                        let mut slot = node.0.grad.lock().expect("grad lock");
                        match slot.as_mut() {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                            None => *slot = Some(g),
                        }
                    }
                }
                Some(f) => {
                    let grads = f(&g);
                    debug_assert_eq!(grads.len(), node.0.parents.len());
                    for (parent, pg) in node.0.parents.iter().zip(grads) {
                        let Some(pg) = pg else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), parent.numel());
                        match pending.get_mut(&parent.ptr()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                pending.insert(parent.ptr(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Parents-before-children ordering of every tracked node reachable from
    /// `self`.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // (node, children_pushed)
        let mut stack = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.ptr()) {
                continue;
            }
            stack.push((node.clone(), true));
            for p in &node.0.parents {
                if p.requires_grad() && !visited.contains(&p.ptr()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}
