//! Row-wise normalisations over the last axis.

use crate::{Float, Tensor};

impl<T: Float> Tensor<T> {
    fn last_dim(&self) -> usize {
        *self.shape().last().expect("operation needs at least one axis")
    }

    pub fn softmax_last(&self) -> Self {
        let d = self.last_dim();
        let mut out = self.to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], move |ctx| {
            let mut g = vec![T::zero(); ctx.out.len()];
            for ((gr, yr), dst) in ctx.grad.chunks(d).zip(ctx.out.chunks(d)).zip(g.chunks_mut(d)) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((d, &gy), &y) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = y * (gy - dot);
                }
            }
            vec![Some(g)]
        })
    }

    pub fn log_softmax_last(&self) -> Self {
        let d = self.last_dim();
        let mut out = self.to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], move |ctx| {
            let mut g = vec![T::zero(); ctx.out.len()];
            for ((gr, yr), dst) in ctx.grad.chunks(d).zip(ctx.out.chunks(d)).zip(g.chunks_mut(d)) {
                let s: T = gr.iter().copied().sum();
                for ((d, &gy), &y) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = gy - y.exp() * s;
                }
            }
            vec![Some(g)]
        })
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Self, beta: &Self, eps: f64) -> Self {
        let d = self.last_dim();
        assert_eq!(gamma.shape(), &[d], "layer_norm gamma shape");
        assert_eq!(beta.shape(), &[d], "layer_norm beta shape");
        let eps = T::from_f64_lossy(eps);
        let dn = T::from_usize(d).unwrap();
        let rows = self.numel() / d;
        let mut xhat = vec![T::zero(); self.numel()];
        let mut inv_std = vec![T::zero(); rows];
        for (r, (src, dst)) in self.data().chunks(d).zip(xhat.chunks_mut(d)).enumerate() {
            let mean = src.iter().copied().sum::<T>() / dn;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = (v - mean) * is;
            }
        }
        let out = xhat
            .chunks(d)
            .flat_map(|row| {
                row.iter()
                    .zip(gamma.data())
                    .zip(beta.data())
                    .map(|((&x, &g), &b)| x * g + b)
            })
            .collect();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |ctx| {
                let gamma = ctx.parents[1].data();
                let mut gx = vec![T::zero(); rows * d];
                let mut gg = vec![T::zero(); d];
                let mut gb = vec![T::zero(); d];
                for r in 0..rows {
                    let gy = &ctx.grad[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for j in 0..d {
                        let gxh = gy[j] * gamma[j];
                        sum_g += gxh;
                        sum_gx += gxh * xh[j];
                        gg[j] += gy[j] * xh[j];
                        gb[j] += gy[j];
                    }
                    let dst = &mut gx[r * d..(r + 1) * d];
                    for j in 0..d {
                        let gxh = gy[j] * gamma[j];
                        dst[j] = inv_std[r] * (gxh - sum_g / dn - xh[j] * sum_gx / dn);
                    }
                }
                vec![Some(gx), Some(gg), Some(gb)]
            },
        )
    }

    /// Picks `self[r, idx[r]]` from a `[rows, classes]` tensor.
    pub fn pick(&self, idx: &[usize]) -> Self {
        assert_eq!(self.rank(), 2, "pick expects [rows, classes]");
        let (rows, classes) = (self.dim(0), self.dim(1));
        assert_eq!(idx.len(), rows, "pick index length");
        let data = idx
            .iter()
            .enumerate()
            .map(|(r, &c)| {
                assert!(c < classes, "pick index {c} out of range");
                self.data()[r * classes + c]
            })
            .collect();
        let idx = idx.to_vec();
        Tensor::from_op(data, vec![rows], vec![self.clone()], move |ctx| {
            let mut g = vec![T::zero(); rows * classes];
            for (r, &c) in idx.iter().enumerate() {
                g[r * classes + c] = ctx.grad[r];
            }
            vec![Some(g)]
        })
    }

    /// Mean negative log-likelihood of integer labels under softmax(logits).
    pub fn cross_entropy(&self, labels: &[usize]) -> Self {
        self.log_softmax_last().pick(labels).mean_all().neg()
    }
}
