use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any operation on the gradient tape.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Computes parent gradients from `(grad_out, out_data, parents)`.
/// Returns one entry per parent; `None` where no gradient flows.
pub(crate) type BackwardFn = Box<dyn Fn(&[f32], &[f32], &[Tensor]) -> Vec<Option<Vec<f32>>> + Send + Sync>;

struct GradFn {
    name: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f32>>>,
    grad_fn: Option<GradFn>,
}

/// Dense row-major `f32` array that can take part in reverse-mode
/// differentiation.
///
/// Cloning is cheap (shared storage). Values are immutable once produced;
/// only leaves that are uniquely owned can be edited in place through
/// [`Tensor::data_mut`].
#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = self.0.grad_fn.as_ref().map(|g| g.name).unwrap_or("leaf");
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &op)
            .finish()
    }
}

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Dimension(format!("shape {shape:?} has a zero extent")));
        }
        if numel(shape) != data.len() {
            return Err(Error::Dimension(format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len())));
        }
        Ok(Self::leaf(shape.to_vec(), data, false))
    }

    /// A trainable leaf.
    pub fn param(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        Ok(t.with_requires_grad(true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::leaf(shape.to_vec(), vec![0.0; numel(shape)], false)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Self::leaf(shape.to_vec(), vec![value; numel(shape)], false)
    }

    pub fn scalar(value: f32) -> Self {
        Self::leaf(vec![1], vec![value], false)
    }

    /// 1-D tensor; `values` must be non-empty.
    pub fn from_slice(values: &[f32]) -> Self {
        assert!(!values.is_empty(), "tensors have positive extents");
        Self::leaf(vec![values.len()], values.to_vec(), false)
    }

    fn leaf(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Self {
        Tensor(Arc::new(Inner { id: next_id(), shape, data, requires_grad, grad: Mutex::new(None), grad_fn: None }))
    }

    /// Builds the result of an operation, recording it on the tape when
    /// gradients are enabled and some parent needs them.
    pub(crate) fn from_op(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f32>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Result<Self> {
        debug_assert_eq!(numel(&shape), data.len(), "{name}: shape/data mismatch");
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{name} produced {} at index {pos}", data[pos])));
        }
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if !track {
            return Ok(Self::leaf(shape, data, false));
        }
        Ok(Tensor(Arc::new(Inner {
            id: next_id(),
            shape,
            data,
            requires_grad: true,
            grad: Mutex::new(None),
            grad_fn: Some(GradFn { name, parents, backward }),
        })))
    }

    pub fn with_requires_grad(self, requires_grad: bool) -> Self {
        if self.requires_grad() == requires_grad && self.0.grad_fn.is_none() {
            return self;
        }
        Self::leaf(self.0.shape.clone(), self.0.data.clone(), requires_grad)
    }

    /// Same values, cut from the tape.
    pub fn detach(&self) -> Self {
        if !self.requires_grad() {
            return self.clone();
        }
        Self::leaf(self.0.shape.clone(), self.0.data.clone(), false)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.data.clone()
    }

    pub fn item(&self) -> f32 {
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    fn grad_lock(&self) -> MutexGuard<'_, Option<Vec<f32>>> {
        self.0.grad.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Accumulated gradient, if any backward pass reached this tensor.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.grad_lock().clone()
    }

    pub fn zero_grad(&self) {
        *self.grad_lock() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[f32]) {
        let mut slot = self.grad_lock();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Mutable access to the values of a leaf, copying the storage first if
    /// it is shared (e.g. still referenced by a live graph).
    pub fn data_mut(&mut self) -> &mut [f32] {
        if Arc::get_mut(&mut self.0).is_none() {
            let fresh = Inner {
                id: next_id(),
                shape: self.0.shape.clone(),
                data: self.0.data.clone(),
                requires_grad: self.0.requires_grad,
                grad: Mutex::new(self.grad()),
                grad_fn: None,
            };
            self.0 = Arc::new(fresh);
        }
        let inner = Arc::get_mut(&mut self.0).expect("unique after copy");
        inner.grad_fn = None;
        &mut inner.data
    }

    /// Reverse-mode pass from a scalar. Gradients accumulate into `grad` of
    /// every tensor on the tape that requires them.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", self.shape())));
        }
        if !self.requires_grad() {
            return Err(Error::Contract("loss does not depend on any trainable tensor".into()));
        }

        let order = self.topo_order();
        let mut pending: HashMap<u64, Vec<f32>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);

        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.id()) else { continue };
            if let Some(gf) = &node.0.grad_fn {
                let parent_grads = (gf.backward)(&g, node.data(), &gf.parents);
                debug_assert_eq!(parent_grads.len(), gf.parents.len(), "{}", gf.name);
                for (parent, pg) in gf.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !parent.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), parent.numel(), "{} grad size", gf.name);
                    match pending.get_mut(&parent.id()) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                        None => {
                            pending.insert(parent.id(), pg);
                        }
                    }
                }
            }
            node.accumulate_grad(&g);
        }
        Ok(())
    }

    /// Tape nodes reachable from `self`, parents before children.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !seen.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(gf) = &node.0.grad_fn {
                for p in &gf.parents {
                    if p.requires_grad() && !seen.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::Dimension(format!("cannot reshape {:?} into {shape:?}", self.shape())));
        }
        Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        )
    }
}
