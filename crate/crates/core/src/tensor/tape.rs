use std::cell::RefCell;
use std::sync::Arc;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn<T> = Box<dyn Fn(&[T], &mut GradSink<'_, T>) + Send>;

struct Node<T> {
    value: Arc<Vec<T>>,
    shape: Vec<usize>,
    requires_grad: bool,
    leaf: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

/// Append-only record of a forward computation.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Write access to the gradient buffers of one node's parents during backward.
pub struct GradSink<'a, T> {
    grads: &'a mut [Option<Vec<T>>],
    parents: &'a [usize],
    wants: &'a [bool],
    lens: &'a [usize],
}

impl<T: Real> GradSink<'_, T> {
    pub fn wants(&self, slot: usize) -> bool {
        self.wants[slot]
    }

    /// Gradient accumulator for parent `slot`, or `None` if it needs no gradient.
    pub fn get(&mut self, slot: usize) -> Option<&mut [T]> {
        if !self.wants[slot] {
            return None;
        }
        let id = self.parents[slot];
        let len = self.lens[slot];
        Some(self.grads[id].get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice())
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    lens: Vec<usize>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a leaf; zeros if the root does not depend on it.
    pub fn wrt(&self, v: Var) -> Vec<T> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); self.lens[v.0]],
        }
    }

    pub fn take(&mut self, v: Var) -> Vec<T> {
        match self.grads.get_mut(v.0).and_then(Option::take) {
            Some(g) => g,
            None => vec![T::zero(); self.lens[v.0]],
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, t: &Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: t.arc().clone(),
            shape: t.shape().to_vec(),
            requires_grad,
            leaf: true,
            parents: Vec::new(),
            backward: None,
        });
        Var(nodes.len() - 1)
    }

    pub fn param(&self, t: &Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    pub fn constant(&self, t: &Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn constant_vec(&self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Var {
        let shape = shape.into();
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.constant(&Tensor::from_arc(shape, Arc::new(data)))
    }

    pub fn value(&self, v: Var) -> Arc<Vec<T>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes.borrow()[v.0].value.len()
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        Tensor::from_arc(nodes[v.0].shape.clone(), nodes[v.0].value.clone())
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Records an op. `backward` receives the output gradient and accumulates
    /// into the parents' gradients through the sink; it is dropped unless some
    /// parent requires a gradient.
    pub fn push<F>(&self, value: Vec<T>, shape: Vec<usize>, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&[T], &mut GradSink<'_, T>) + Send + 'static,
    {
        self.push_arc(Arc::new(value), shape, parents, backward)
    }

    pub(crate) fn push_arc<F>(
        &self,
        value: Arc<Vec<T>>,
        shape: Vec<usize>,
        parents: &[Var],
        backward: F,
    ) -> Var
    where
        F: Fn(&[T], &mut GradSink<'_, T>) + Send + 'static,
    {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.0].requires_grad);
        let (parents, backward): (Vec<usize>, Option<BackwardFn<T>>) = if requires_grad {
            (parents.iter().map(|p| p.0).collect(), Some(Box::new(backward)))
        } else {
            (Vec::new(), None)
        };
        nodes.push(Node { value, shape, requires_grad, leaf: false, parents, backward });
        Var(nodes.len() - 1)
    }

    /// Reverse sweep from a scalar root. Each node is visited once, in reverse
    /// creation order. Returns gradients for every leaf that requires one.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let seed = {
            let nodes = self.nodes.borrow();
            let n = &nodes[root.0];
            if n.value.len() != 1 {
                return Err(Error::NonScalarRoot(n.shape.clone()));
            }
            vec![T::one()]
        };
        self.backward_with(root, seed)
    }

    /// Reverse sweep seeded with an arbitrary output gradient (vector-Jacobian product).
    pub fn backward_with(&self, root: Var, seed: Vec<T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let lens: Vec<usize> = nodes.iter().map(|n| n.value.len()).collect();
        if seed.len() != lens[root.0] {
            return Err(Error::shape(
                "backward",
                format!("seed has {} elements, root has {}", seed.len(), lens[root.0]),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        if nodes[root.0].requires_grad {
            grads[root.0] = Some(seed);
        }
        let mut wants = Vec::new();
        let mut plens = Vec::new();
        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if node.leaf {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let Some(bw) = node.backward.as_ref() else { continue };
            wants.clear();
            plens.clear();
            for &p in &node.parents {
                wants.push(nodes[p].requires_grad);
                plens.push(lens[p]);
            }
            let mut sink = GradSink {
                grads: &mut grads,
                parents: &node.parents,
                wants: &wants,
                lens: &plens,
            };
            bw(&g, &mut sink);
        }
        // Keep only leaf gradients.
        for (i, g) in grads.iter_mut().enumerate() {
            if !nodes[i].leaf || !nodes[i].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, lens })
    }
}
