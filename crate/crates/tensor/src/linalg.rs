use crate::float::gemm;
use crate::{Float, Tensor};

impl<T: Float> Tensor<T> {
    /// Batched matrix product over the last two axes. Leading axes must match.
    pub fn matmul(&self, other: &Self) -> Self {
        let (ra, rb) = (self.rank(), other.rank());
        assert!(ra >= 2 && ra == rb, "matmul ranks {:?} {:?}", self.shape(), other.shape());
        assert_eq!(self.shape()[..ra - 2], other.shape()[..rb - 2], "matmul batch dims");
        let (m, k) = (self.dim(ra - 2), self.dim(ra - 1));
        let (k2, n) = (other.dim(rb - 2), other.dim(rb - 1));
        assert_eq!(k, k2, "matmul inner dims {:?} {:?}", self.shape(), other.shape());
        let batch: usize = self.shape()[..ra - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            gemm(
                m,
                n,
                k,
                &self.data()[bi * m * k..],
                false,
                &other.data()[bi * k * n..],
                false,
                T::zero(),
                &mut out[bi * m * n..],
            );
        }
        let mut shape = self.shape()[..ra - 2].to_vec();
        shape.extend([m, n]);
        Tensor::from_op(out, shape, vec![self.clone(), other.clone()], move |ctx| {
            let (a, b) = (&ctx.parents[0], &ctx.parents[1]);
            let ga = a.requires_grad().then(|| {
                let mut g = vec![T::zero(); batch * m * k];
                for bi in 0..batch {
                    // dA = dC · Bᵀ
                    gemm(m, k, n, &ctx.grad[bi * m * n..], false, &b.data()[bi * k * n..], true, T::zero(), &mut g[bi * m * k..]);
                }
                g
            });
            let gb = b.requires_grad().then(|| {
                let mut g = vec![T::zero(); batch * k * n];
                for bi in 0..batch {
                    // dB = Aᵀ · dC
                    gemm(k, n, m, &a.data()[bi * m * k..], true, &ctx.grad[bi * m * n..], false, T::zero(), &mut g[bi * k * n..]);
                }
                g
            });
            vec![ga, gb]
        })
    }

    /// Affine map over the last axis: `x · wᵀ + b` with `w` of shape `[out, in]`.
    pub fn linear(&self, w: &Self, b: Option<&Self>) -> Self {
        let fan_in = *self.shape().last().expect("linear on scalar");
        assert_eq!(w.rank(), 2, "linear weight must be 2-D");
        let (fan_out, w_in) = (w.dim(0), w.dim(1));
        assert_eq!(fan_in, w_in, "linear: input {:?} weight {:?}", self.shape(), w.shape());
        let rows = self.numel() / fan_in;
        let mut out = vec![T::zero(); rows * fan_out];
        if let Some(b) = b {
            assert_eq!(b.shape(), &[fan_out], "linear bias shape");
            for r in 0..rows {
                out[r * fan_out..(r + 1) * fan_out].copy_from_slice(b.data());
            }
        }
        gemm(rows, fan_out, fan_in, self.data(), false, w.data(), true, T::one(), &mut out);
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = fan_out;
        let mut parents = vec![self.clone(), w.clone()];
        if let Some(b) = b {
            parents.push(b.clone());
        }
        Tensor::from_op(out, shape, parents, move |ctx| {
            let (x, w) = (&ctx.parents[0], &ctx.parents[1]);
            let gx = x.requires_grad().then(|| {
                let mut g = vec![T::zero(); rows * fan_in];
                gemm(rows, fan_in, fan_out, ctx.grad, false, w.data(), false, T::zero(), &mut g);
                g
            });
            let gw = w.requires_grad().then(|| {
                let mut g = vec![T::zero(); fan_out * fan_in];
                gemm(fan_out, fan_in, rows, ctx.grad, true, x.data(), false, T::zero(), &mut g);
                g
            });
            let mut grads = vec![gx, gw];
            if ctx.parents.len() == 3 {
                let mut gb = vec![T::zero(); fan_out];
                for r in 0..rows {
                    for (d, &g) in gb.iter_mut().zip(&ctx.grad[r * fan_out..(r + 1) * fan_out]) {
                        *d += g;
                    }
                }
                grads.push(Some(gb));
            }
            grads
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::<f64>::from_vec(vec![1., 2., 3., 4., 5., 6.], &[2, 3]);
        let b = Tensor::<f64>::from_vec(vec![1., 0., 0., 1., 1., 1.], &[3, 2]);
        assert_eq!(a.matmul(&b).data(), &[4., 5., 10., 11.]);
    }

    #[test]
    fn linear_matches_matmul() {
        let x = Tensor::<f64>::from_vec(vec![1., 2., 3., 4.], &[2, 2]);
        let w = Tensor::<f64>::from_vec(vec![1., 1., 0., 2.], &[2, 2]);
        let b = Tensor::<f64>::from_vec(vec![0.5, -1.], &[2]);
        let y = x.linear(&w, Some(&b));
        assert_eq!(y.data(), &[3.5, 3., 7.5, 7.]);
    }
}
