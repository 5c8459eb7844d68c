//! A small define-by-run reverse-mode autodiff engine.
//!
//! Tensors are immutable, reference-counted, row-major (NCHW for images).
//! Every backward rule is itself written with tensor ops, so gradients can be
//! differentiated again (`create_graph = true`), which the critic's gradient
//! penalty relies on.

mod conv;
mod element;
mod ops;
mod optim;
mod params;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

pub use conv::Conv2dGeometry;
pub use element::{DType, Element};
pub use optim::{Adam, AdamConfig, AdamSlot};
pub use params::ParamStore;

use crate::error::{Error, Result};

type BackwardFn<E> = dyn Fn(&[Tensor<E>], &Tensor<E>, &Tensor<E>) -> Result<Vec<Option<Tensor<E>>>>;

struct Node<E: Element> {
    name: &'static str,
    parents: Vec<Tensor<E>>,
    backward: Box<BackwardFn<E>>,
}

struct Inner<E: Element> {
    id: u64,
    shape: Vec<usize>,
    data: Rc<Vec<E>>,
    requires_grad: bool,
    node: Option<Node<E>>,
}

pub struct Tensor<E: Element> {
    inner: Rc<Inner<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = self.inner.node.as_ref().map(|n| n.name).unwrap_or("leaf");
        write!(
            f,
            "Tensor<{}>{:?} op={} grad={}",
            E::DTYPE,
            self.inner.shape,
            op,
            self.inner.requires_grad
        )
    }
}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Restores the previous grad mode on drop.
pub struct GradModeGuard {
    prev: bool,
}

impl GradModeGuard {
    pub fn new(enabled: bool) -> Self {
        let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
        GradModeGuard { prev }
    }
}

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

/// Runs `f` without recording any graph.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let _guard = GradModeGuard::new(false);
    f()
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<E: Element> Tensor<E> {
    fn build(shape: Vec<usize>, data: Rc<Vec<E>>, requires_grad: bool, node: Option<Node<E>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data,
                requires_grad,
                node,
            }),
        }
    }

    /// Constant tensor (never requires grad).
    pub fn from_vec(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        Ok(Self::build(shape.to_vec(), Rc::new(data), false, None))
    }

    /// Leaf that participates in gradient computation.
    pub fn leaf(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        let t = Self::from_vec(data, shape)?;
        Ok(t.into_leaf())
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(data.iter().map(|&v| E::from_f64_lossy(v)).collect(), shape)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), Rc::new(vec![E::zero(); numel(shape)]), false, None)
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        Self::build(shape.to_vec(), Rc::new(vec![value; numel(shape)]), false, None)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, E::one())
    }

    pub fn scalar(value: E) -> Self {
        Self::full(&[], value)
    }

    /// Same values, no history; marks the result as a fresh gradient leaf.
    pub fn into_leaf(self) -> Self {
        Self::build(self.inner.shape.clone(), Rc::clone(&self.inner.data), true, None)
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::build(self.inner.shape.clone(), Rc::clone(&self.inner.data), false, None)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.inner.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.inner.data.as_ref().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.inner.data.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<E> {
        if self.numel() != 1 {
            return Err(Error::dim(format!("item() on tensor of shape {:?}", self.shape())));
        }
        Ok(self.inner.data[0])
    }

    pub fn item_f64(&self) -> Result<f64> {
        Ok(self.item()?.to_f64().unwrap_or(f64::NAN))
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> E {
        self.inner
            .data
            .iter()
            .fold(E::zero(), |m, v| if v.abs() > m { v.abs() } else { m })
    }

    /// Converts element type (graph is not carried over).
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        let data = self
            .inner
            .data
            .iter()
            .map(|v| F::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN)))
            .collect();
        Tensor::build(self.inner.shape.clone(), Rc::new(data), false, None)
    }

    /// Wraps freshly computed data as the output of an op over `parents`.
    pub(crate) fn from_op<F>(
        name: &'static str,
        data: Vec<E>,
        shape: Vec<usize>,
        parents: Vec<Tensor<E>>,
        backward: F,
    ) -> Self
    where
        F: Fn(&[Tensor<E>], &Tensor<E>, &Tensor<E>) -> Result<Vec<Option<Tensor<E>>>> + 'static,
    {
        let track = is_grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let node = track.then(|| Node {
            name,
            parents,
            backward: Box::new(backward),
        });
        Self::build(shape, Rc::new(data), track, node)
    }
}

/// Gradients keyed by tensor identity.
#[derive(Default)]
pub struct Gradients<E: Element> {
    grads: HashMap<u64, Tensor<E>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, t: &Tensor<E>) -> Option<&Tensor<E>> {
        self.grads.get(&t.id())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn topo_order<E: Element>(root: &Tensor<E>) -> Vec<Tensor<E>> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    // Iterative post-order DFS; recursion would overflow on long graphs.
    let mut stack: Vec<(Tensor<E>, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(node) = &t.inner.node {
            for p in &node.parents {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}

fn run_backward<E: Element>(
    root: &Tensor<E>,
    seed: Tensor<E>,
    keep: Option<&HashSet<u64>>,
    create_graph: bool,
) -> Result<HashMap<u64, Tensor<E>>> {
    let _guard = GradModeGuard::new(create_graph);
    let order = topo_order(root);
    let mut grads: HashMap<u64, Tensor<E>> = HashMap::new();
    grads.insert(root.id(), seed);
    let mut out = HashMap::new();
    for t in order.iter().rev() {
        let Some(g) = grads.remove(&t.id()) else {
            continue;
        };
        if let Some(node) = &t.inner.node {
            let parent_grads = (node.backward)(&node.parents, t, &g)?;
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !p.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.shape(), p.shape(), "gradient shape for op {}", node.name);
                let acc = match grads.remove(&p.id()) {
                    Some(prev) => prev.add(&pg)?,
                    None => pg,
                };
                grads.insert(p.id(), acc);
            }
        }
        let wanted = match keep {
            Some(ids) => ids.contains(&t.id()),
            None => t.is_leaf(),
        };
        if wanted {
            out.insert(t.id(), g);
        }
    }
    Ok(out)
}

impl<E: Element> Tensor<E> {
    /// Gradients of this scalar with respect to every leaf that requires grad.
    pub fn backward(&self) -> Result<Gradients<E>> {
        if self.numel() != 1 {
            return Err(Error::dim(format!(
                "backward() needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(Gradients::default());
        }
        let seed = Tensor::ones(self.shape());
        let grads = run_backward(self, seed, None, false)?;
        Ok(Gradients { grads })
    }
}

/// Gradient of the sum of `output` with respect to each of `inputs`.
///
/// With `create_graph` the returned tensors carry history and can be
/// differentiated again. Inputs the output does not depend on get zeros.
pub fn grad<E: Element>(
    output: &Tensor<E>,
    inputs: &[&Tensor<E>],
    create_graph: bool,
) -> Result<Vec<Tensor<E>>> {
    let keep: HashSet<u64> = inputs.iter().map(|t| t.id()).collect();
    let mut grads = if output.requires_grad() {
        run_backward(output, Tensor::ones(output.shape()), Some(&keep), create_graph)?
    } else {
        HashMap::new()
    };
    Ok(inputs
        .iter()
        .map(|t| grads.remove(&t.id()).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}
