//! Dense f64 tensors with a dynamic reverse-mode differentiation graph.
//!
//! A [`Tensor`] is an immutable, reference-counted value. Operations on
//! tensors that require gradients record a node holding their parents and a
//! local vector-Jacobian rule; [`Tensor::backward`] walks that graph in
//! reverse topological order. The graph is rebuilt on every forward pass, so
//! sequence length and resampling connectivity may change from step to step.
//!
//! Random draws ([`sample_uniform`], [`sample_gaussian`]) are graph leaves.
//! Gradients therefore flow only along the pathwise (reparameterized) route;
//! ancestor indices and noise are treated as constants.

mod conv;
mod gemm;
mod ops;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{shape_err, Error, Result};
use crate::rng::RngStream;

pub use ops::{concat, lse};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

fn next_id() -> usize {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// What a backward rule sees when it runs.
pub struct BackwardCtx<'a> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a [f64],
    /// This node's forward output.
    pub out: &'a [f64],
    pub parents: &'a [Tensor],
    /// `needs[i]` is false when parent `i` does not require a gradient.
    pub needs: &'a [bool],
}

pub(crate) type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>>;

struct Node {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: usize,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    node: Option<Node>,
}

impl Drop for Inner {
    // Unrolled sequences build long parent chains; drop them iteratively so
    // a deep graph never recurses through the stack.
    fn drop(&mut self) {
        let Some(node) = self.node.take() else {
            return;
        };
        let mut stack = node.parents;
        while let Some(t) = stack.pop() {
            if let Ok(mut inner) = Rc::try_unwrap(t.0) {
                if let Some(n) = inner.node.take() {
                    stack.extend(n.parents);
                }
            }
        }
    }
}

#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn make(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, node: Option<Node>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Inner {
            id: next_id(),
            shape,
            data,
            requires_grad,
            node,
        }))
    }

    /// A constant tensor (no gradient tracking).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(shape_err(
                "new",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Self::make(data, shape.to_vec(), false, None))
    }

    /// A trainable leaf.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        Ok(t.into_param())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::make(vec![0.0; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::make(vec![value; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn scalar(value: f64) -> Self {
        Self::make(vec![value], Vec::new(), false, None)
    }

    /// Copy of this value as a fresh trainable leaf.
    pub fn into_param(self) -> Self {
        Self::make(self.data().to_vec(), self.shape().to_vec(), true, None)
    }

    /// Build the result of a differentiable operation. If no parent requires
    /// a gradient the node is not recorded.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        let node = requires_grad.then_some(Node { parents, backward });
        Self::make(data, shape, requires_grad, node)
    }

    pub fn id(&self) -> usize {
        self.0.id
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

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::make(self.data().to_vec(), self.shape().to_vec(), false, None)
    }

    /// Apply an in-place update to a trainable leaf. The tensor's storage is
    /// reused when nothing else holds it, otherwise a new leaf is created.
    pub fn update_leaf(&mut self, f: impl FnOnce(&mut [f64])) {
        let requires_grad = self.requires_grad();
        match Rc::get_mut(&mut self.0) {
            Some(inner) if inner.node.is_none() => f(&mut inner.data),
            _ => {
                let mut data = self.data().to_vec();
                f(&mut data);
                *self = Self::make(data, self.shape().to_vec(), requires_grad, None);
            }
        }
    }

    /// Reverse-mode accumulation from a scalar loss.
    ///
    /// Returns gradients for every leaf reachable from `self` that requires a
    /// gradient. Leaves not on any path are absent and read as zero through
    /// [`Gradients::get_or_zeros`].
    pub fn backward(&self) -> Result<Gradients> {
        if self.numel() != 1 {
            return Err(Error::NotScalar(self.shape().to_vec()));
        }
        let mut out = Gradients::default();
        if !self.requires_grad() {
            return Ok(out);
        }
        let order = self.topo_order();
        let mut pending: HashMap<usize, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(grad) = pending.remove(&t.id()) else {
                continue;
            };
            let Some(node) = &t.0.node else {
                out.grads.insert(t.id(), grad);
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(Tensor::requires_grad).collect();
            let ctx = BackwardCtx {
                grad: &grad,
                out: t.data(),
                parents: &node.parents,
                needs: &needs,
            };
            let parent_grads = (node.backward)(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !p.requires_grad() {
                    continue;
                }
                debug_assert_eq!(g.len(), p.numel());
                match pending.get_mut(&p.id()) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        pending.insert(p.id(), g);
                    }
                }
            }
        }
        Ok(out)
    }

    // Post-order DFS over the grad-requiring subgraph; parents before children.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for p in node.parents.iter().rev() {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

/// Leaf gradients produced by [`Tensor::backward`], keyed by tensor identity.
#[derive(Default, Debug)]
pub struct Gradients {
    grads: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.grads.get(&t.id()).map(Vec::as_slice)
    }

    pub fn get_or_zeros(&self, t: &Tensor) -> Vec<f64> {
        self.get(t)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()])
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Uniform draws on `[lo, hi)` as a constant leaf.
pub fn sample_uniform(rng: &mut RngStream, lo: f64, hi: f64, shape: &[usize]) -> Result<Tensor> {
    if lo >= hi || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Config(format!("uniform range [{lo}, {hi}) is empty")));
    }
    let data = (0..numel(shape)).map(|_| rng.uniform_range(lo, hi)).collect();
    Tensor::new(data, shape)
}

/// Standard normal draws as a constant leaf.
pub fn sample_gaussian(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    let data = (0..numel(shape)).map(|_| rng.gaussian()).collect();
    Tensor::make(data, shape.to_vec(), false, None)
}
