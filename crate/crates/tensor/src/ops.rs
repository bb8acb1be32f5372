//! Elementwise, reduction and shape operations.

use std::rc::Rc;

use crate::tensor::numel;
use crate::{Float, Tensor};

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl<T: Float> Tensor<T> {
    fn assert_same_shape(&self, other: &Self, op: &str) {
        assert_eq!(
            self.shape(),
            other.shape(),
            "{op}: shape mismatch {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
    }

    pub fn add(&self, other: &Self) -> Self {
        self.assert_same_shape(other, "add");
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a + b).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone(), other.clone()], |ctx| {
            vec![Some(ctx.grad.to_vec()), Some(ctx.grad.to_vec())]
        })
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.assert_same_shape(other, "sub");
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a - b).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone(), other.clone()], |ctx| {
            vec![
                Some(ctx.grad.to_vec()),
                Some(ctx.grad.iter().map(|&g| -g).collect()),
            ]
        })
    }

    pub fn mul(&self, other: &Self) -> Self {
        self.assert_same_shape(other, "mul");
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone(), other.clone()], |ctx| {
            let (a, b) = (ctx.parents[0].data(), ctx.parents[1].data());
            let ga = ctx.parents[0]
                .requires_grad()
                .then(|| ctx.grad.iter().zip(b).map(|(&g, &y)| g * y).collect());
            let gb = ctx.parents[1]
                .requires_grad()
                .then(|| ctx.grad.iter().zip(a).map(|(&g, &x)| g * x).collect());
            vec![ga, gb]
        })
    }

    pub fn scale(&self, s: T) -> Self {
        let data = self.data().iter().map(|&a| a * s).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], move |ctx| {
            vec![Some(ctx.grad.iter().map(|&g| g * s).collect())]
        })
    }

    pub fn add_scalar(&self, s: T) -> Self {
        let data = self.data().iter().map(|&a| a + s).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], |ctx| {
            vec![Some(ctx.grad.to_vec())]
        })
    }

    pub fn neg(&self) -> Self {
        self.scale(-T::one())
    }

    pub fn sqr(&self) -> Self {
        let data = self.data().iter().map(|&a| a * a).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], |ctx| {
            let two = T::one() + T::one();
            let x = ctx.parents[0].data();
            vec![Some(ctx.grad.iter().zip(x).map(|(&g, &x)| g * two * x).collect())]
        })
    }

    pub fn exp(&self) -> Self {
        let data = self.data().iter().map(|&a| a.exp()).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], |ctx| {
            vec![Some(ctx.grad.iter().zip(ctx.out).map(|(&g, &y)| g * y).collect())]
        })
    }

    pub fn ln(&self) -> Self {
        let data = self.data().iter().map(|&a| a.ln()).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], |ctx| {
            let x = ctx.parents[0].data();
            vec![Some(ctx.grad.iter().zip(x).map(|(&g, &x)| g / x).collect())]
        })
    }

    pub fn relu(&self) -> Self {
        let data = self.data().iter().map(|&a| a.max(T::zero())).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], |ctx| {
            let x = ctx.parents[0].data();
            vec![Some(
                ctx.grad
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect(),
            )]
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Self {
        let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
        let k = T::from_f64_lossy(0.044715);
        let half = T::from_f64_lossy(0.5);
        let three = T::from_f64_lossy(3.0);
        let data = self
            .data()
            .iter()
            .map(|&x| half * x * (T::one() + tanh_exp(c * (x + k * x * x * x))))
            .collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], move |ctx| {
            let x = ctx.parents[0].data();
            let g = ctx
                .grad
                .iter()
                .zip(x)
                .map(|(&g, &x)| {
                    let u = c * (x + k * x * x * x);
                    let t = tanh_exp(u);
                    let du = c * (T::one() + three * k * x * x);
                    g * (half * (T::one() + t) + half * x * (T::one() - t * t) * du)
                })
                .collect();
            vec![Some(g)]
        })
    }

    /// Reinterprets the shape; storage is shared.
    pub fn reshape(&self, shape: &[usize]) -> Self {
        assert_eq!(
            numel(shape),
            self.numel(),
            "reshape {:?} -> {:?}",
            self.shape(),
            shape
        );
        if !self.requires_grad() {
            return Tensor::leaf(Rc::clone(self.data_rc()), shape.to_vec(), false);
        }
        Tensor::from_op(self.to_vec(), shape.to_vec(), vec![self.clone()], |ctx| {
            vec![Some(ctx.grad.to_vec())]
        })
    }

    /// Axis permutation; `dims[i]` is the input axis that becomes output axis `i`.
    pub fn permute(&self, dims: &[usize]) -> Self {
        let rank = self.rank();
        assert_eq!(dims.len(), rank, "permute rank");
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = dims.iter().map(|&d| in_shape[d]).collect();
        let in_strides = contiguous_strides(&in_shape);
        // stride in the input for each output axis
        let gather: Vec<usize> = dims.iter().map(|&d| in_strides[d]).collect();
        let index = permute_index(&out_shape, &gather);
        let src = self.data();
        let data = index.iter().map(|&i| src[i]).collect();
        let n = self.numel();
        Tensor::from_op(data, out_shape, vec![self.clone()], move |ctx| {
            let mut g = vec![T::zero(); n];
            for (o, &i) in index.iter().enumerate() {
                g[i] = ctx.grad[o];
            }
            vec![Some(g)]
        })
    }

    pub fn transpose(&self, a: usize, b: usize) -> Self {
        let mut dims: Vec<usize> = (0..self.rank()).collect();
        dims.swap(a, b);
        self.permute(&dims)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Self {
        let shape = self.shape().to_vec();
        assert!(start + len <= shape[axis], "narrow out of range");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let src = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let n = self.numel();
        Tensor::from_op(data, out_shape, vec![self.clone()], move |ctx| {
            let mut g = vec![T::zero(); n];
            for o in 0..outer {
                let base = o * full * inner + start * inner;
                g[base..base + len * inner]
                    .copy_from_slice(&ctx.grad[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(g)]
        })
    }

    /// Concatenation along `axis`.
    pub fn cat(parts: &[Tensor<T>], axis: usize) -> Self {
        assert!(!parts.is_empty());
        let base = parts[0].shape().to_vec();
        for p in parts {
            assert_eq!(p.rank(), base.len());
            for (i, (&a, &b)) in p.shape().iter().zip(&base).enumerate() {
                assert!(i == axis || a == b, "cat shape mismatch");
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let sizes: Vec<usize> = parts.iter().map(|p| p.dim(axis)).collect();
        let total: usize = sizes.iter().sum();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &s) in parts.iter().zip(&sizes) {
                data.extend_from_slice(&p.data()[o * s * inner..(o + 1) * s * inner]);
            }
        }
        Tensor::from_op(data, out_shape, parts.to_vec(), move |ctx| {
            let mut grads: Vec<Vec<T>> = sizes.iter().map(|&s| Vec::with_capacity(outer * s * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (g, &s) in grads.iter_mut().zip(&sizes) {
                    g.extend_from_slice(&ctx.grad[off..off + s * inner]);
                    off += s * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        })
    }

    /// Numpy-style broadcast to `shape` (right-aligned; size-1 axes expand).
    pub fn broadcast_to(&self, shape: &[usize]) -> Self {
        if self.shape() == shape {
            return self.clone();
        }
        assert!(self.rank() <= shape.len(), "broadcast rank");
        let pad = shape.len() - self.rank();
        let mut src_shape = vec![1; pad];
        src_shape.extend_from_slice(self.shape());
        for (&s, &t) in src_shape.iter().zip(shape) {
            assert!(s == t || s == 1, "cannot broadcast {:?} to {:?}", self.shape(), shape);
        }
        let src_strides = contiguous_strides(&src_shape);
        let gather: Vec<usize> = src_shape
            .iter()
            .zip(&src_strides)
            .map(|(&s, &st)| if s == 1 { 0 } else { st })
            .collect();
        let index = permute_index(shape, &gather);
        let src = self.data();
        let data = index.iter().map(|&i| src[i]).collect();
        let n = self.numel();
        Tensor::from_op(data, shape.to_vec(), vec![self.clone()], move |ctx| {
            let mut g = vec![T::zero(); n];
            for (o, &i) in index.iter().enumerate() {
                g[i] += ctx.grad[o];
            }
            vec![Some(g)]
        })
    }

    pub fn sum_all(&self) -> Self {
        let s: T = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(vec![s], vec![], vec![self.clone()], move |ctx| {
            vec![Some(vec![ctx.grad[0]; n])]
        })
    }

    pub fn mean_all(&self) -> Self {
        let n = T::from_usize(self.numel().max(1)).unwrap();
        self.sum_all().scale(T::one() / n)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Self {
        let shape = self.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let src = self.data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let row = &src[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        Tensor::from_op(data, out_shape, vec![self.clone()], move |ctx| {
            let mut g = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                for _ in 0..len {
                    g.extend_from_slice(&ctx.grad[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(g)]
        })
    }

    pub fn mean_axis(&self, axis: usize) -> Self {
        let n = T::from_usize(self.dim(axis)).unwrap();
        self.sum_axis(axis).scale(T::one() / n)
    }

    /// Row-wise selection: with the tensor viewed as `[mask.len(), inner]`,
    /// row `r` comes from `on_true` where `mask[r]` and from `self` otherwise.
    pub fn select_rows(&self, on_true: &Self, mask: &[bool]) -> Self {
        self.assert_same_shape(on_true, "select_rows");
        assert!(!mask.is_empty() && self.numel() % mask.len() == 0, "select_rows mask length");
        let inner = self.numel() / mask.len();
        let (a, b) = (self.data(), on_true.data());
        let mut data = Vec::with_capacity(self.numel());
        for (r, &m) in mask.iter().enumerate() {
            let src = if m { b } else { a };
            data.extend_from_slice(&src[r * inner..(r + 1) * inner]);
        }
        let mask = mask.to_vec();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone(), on_true.clone()], move |ctx| {
            let mut ga = ctx.grad.to_vec();
            let mut gb = ctx.grad.to_vec();
            for (r, &m) in mask.iter().enumerate() {
                let zero_in = if m { &mut ga } else { &mut gb };
                zero_in[r * inner..(r + 1) * inner].fill(T::zero());
            }
            vec![Some(ga), Some(gb)]
        })
    }
}

/// For an output of `shape`, the source offset of each element given the source
/// stride of every output axis.
fn permute_index(shape: &[usize], gather: &[usize]) -> Vec<usize> {
    let n = numel(shape);
    let mut index = Vec::with_capacity(n);
    if shape.is_empty() {
        index.push(0);
        return index;
    }
    let rank = shape.len();
    let mut counter = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        index.push(off);
        let mut ax = rank;
        while ax > 0 {
            ax -= 1;
            counter[ax] += 1;
            off += gather[ax];
            if counter[ax] < shape[ax] {
                break;
            }
            off -= gather[ax] * shape[ax];
            counter[ax] = 0;
        }
    }
    index
}

/// `tanh` through one `exp`; several times faster than libm on the hot GELU path
/// and exact to a few ulps. Saturates to ±1 without producing NaN.
#[inline]
fn tanh_exp<T: Float>(u: T) -> T {
    let two = T::one() + T::one();
    T::one() - two / ((two * u).exp() + T::one())
}
