use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::Float;

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

fn next_id() -> usize {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Everything a backward closure needs: the upstream gradient, the forward
/// output and the parent tensors.
pub struct BackwardCtx<'a, T: Float> {
    pub grad: &'a [T],
    pub out: &'a [T],
    pub parents: &'a [Tensor<T>],
}

type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>>>;

struct Node<T: Float> {
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Float> {
    id: usize,
    shape: Vec<usize>,
    data: Rc<Vec<T>>,
    requires_grad: bool,
    node: Option<Node<T>>,
}

/// Contiguous row-major tensor with reverse-mode autodiff.
///
/// Cloning is cheap (reference counted). A tensor records the operation that
/// produced it only when at least one input requires a gradient, so forward
/// passes through frozen weights build no graph.
pub struct Tensor<T: Float = f32>(Rc<Inner<T>>);

impl<T: Float> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Float> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Float> Tensor<T> {
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Self {
        assert_eq!(
            data.len(),
            numel(shape),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Self::leaf(Rc::new(data), shape.to_vec(), false)
    }

    pub fn from_slice(data: &[T], shape: &[usize]) -> Self {
        Self::from_vec(data.to_vec(), shape)
    }

    pub fn scalar(v: T) -> Self {
        Self::from_vec(vec![v], &[])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::from_vec(vec![v; numel(shape)], shape)
    }

    /// Normal samples with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64_lossy(z * std)
            })
            .collect();
        Self::from_vec(data, shape)
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| T::from_f64_lossy(rng.random_range(lo..hi)))
            .collect();
        Self::from_vec(data, shape)
    }

    pub(crate) fn leaf(data: Rc<Vec<T>>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor(Rc::new(Inner {
            id: next_id(),
            shape,
            data,
            requires_grad,
            node: None,
        }))
    }

    /// Builds the result of an operation. The backward closure must return one
    /// entry per parent (`None` where no gradient flows).
    pub fn from_op<F>(data: Vec<T>, shape: Vec<usize>, parents: Vec<Tensor<T>>, backward: F) -> Self
    where
        F: Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> + 'static,
    {
        debug_assert_eq!(data.len(), numel(&shape));
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let node = requires_grad.then(|| Node {
            parents,
            backward: Box::new(backward),
        });
        Tensor(Rc::new(Inner {
            id: next_id(),
            shape,
            data: Rc::new(data),
            requires_grad,
            node,
        }))
    }

    /// Same storage, marked as a trainable leaf.
    pub fn requires_grad_(self) -> Self {
        Self::leaf(Rc::clone(&self.0.data), self.0.shape.clone(), true)
    }

    /// Same storage, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::leaf(Rc::clone(&self.0.data), self.0.shape.clone(), false)
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub(crate) fn data_rc(&self) -> &Rc<Vec<T>> {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Converts element type, dropping the graph.
    pub fn cast<U: Float>(&self) -> Tensor<U> {
        let data = self
            .data()
            .iter()
            .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
            .collect();
        Tensor::from_vec(data, self.shape())
    }

    /// Reverse-mode pass from this tensor, seeded with ones.
    ///
    /// Returns gradients of every leaf that requires one.
    pub fn backward(&self) -> Gradients<T> {
        let seed = vec![T::one(); self.numel()];
        self.backward_with(seed)
    }

    pub fn backward_with(&self, seed: Vec<T>) -> Gradients<T> {
        assert_eq!(seed.len(), self.numel());
        let mut grads: HashMap<usize, Vec<T>> = HashMap::new();
        if !self.requires_grad() {
            return Gradients { map: grads };
        }
        let order = self.topo_order();
        grads.insert(self.id(), seed);
        for t in order.iter().rev() {
            let Some(node) = &t.0.node else { continue };
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &g,
                out: t.data(),
                parents: &node.parents,
            };
            let parent_grads = (node.backward)(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !p.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.len(), p.numel());
                match grads.get_mut(&p.id()) {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(pg) {
                            *a += b;
                        }
                    }
                    None => {
                        grads.insert(p.id(), pg);
                    }
                }
            }
        }
        Gradients { map: grads }
    }

    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // (tensor, children pushed?)
        let mut stack = vec![(self.clone(), false)];
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
                for p in &node.parents {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

/// Leaf gradients produced by [`Tensor::backward`].
pub struct Gradients<T: Float> {
    map: HashMap<usize, Vec<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.map.get(&t.id()).map(Vec::as_slice)
    }

    pub fn get_id(&self, id: usize) -> Option<&[T]> {
        self.map.get(&id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}
