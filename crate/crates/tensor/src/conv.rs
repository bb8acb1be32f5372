//! 2-D convolution (im2col + gemm) and pooling over NCHW tensors.

use crate::float::gemm;
use crate::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dGeometry {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.kh) / self.stride + 1,
            (self.w + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.kh * self.kw
    }
}

/// Unfolds a batch into a `[C·kh·kw, B·oh·ow]` column matrix.
fn im2col<T: Float>(x: &[T], batch: usize, g: &Conv2dGeometry) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let cols = batch * oh * ow;
    let mut out = vec![T::zero(); g.col_rows() * cols];
    for c in 0..g.in_c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for b in 0..batch {
                    let plane = &x[(b * g.in_c + c) * g.h * g.w..][..g.h * g.w];
                    for oi in 0..oh {
                        let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                        let base = (b * oh + oi) * ow;
                        if ii < 0 || ii >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[ii as usize * g.w..][..g.w];
                        for oj in 0..ow {
                            let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                            if jj >= 0 && jj < g.w as isize {
                                dst[base + oj] = src_row[jj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`].
fn col2im<T: Float>(col: &[T], batch: usize, g: &Conv2dGeometry) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let cols = batch * oh * ow;
    let mut x = vec![T::zero(); batch * g.in_c * g.h * g.w];
    for c in 0..g.in_c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for b in 0..batch {
                    let plane = &mut x[(b * g.in_c + c) * g.h * g.w..][..g.h * g.w];
                    for oi in 0..oh {
                        let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                        if ii < 0 || ii >= g.h as isize {
                            continue;
                        }
                        let base = (b * oh + oi) * ow;
                        let dst_row = &mut plane[ii as usize * g.w..][..g.w];
                        for oj in 0..ow {
                            let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                            if jj >= 0 && jj < g.w as isize {
                                dst_row[jj as usize] += src[base + oj];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

impl<T: Float> Tensor<T> {
    /// Cross-correlation of `[B, C, H, W]` input with `[O, C, kh, kw]` weights.
    pub fn conv2d(&self, w: &Self, b: Option<&Self>, stride: usize, pad: usize) -> Self {
        assert_eq!(self.rank(), 4, "conv2d input must be NCHW");
        assert_eq!(w.rank(), 4, "conv2d weight must be OCHW");
        let (batch, in_c, h, wd) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        let (out_c, w_in, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
        assert_eq!(in_c, w_in, "conv2d channels {:?} vs {:?}", self.shape(), w.shape());
        assert!(stride >= 1 && h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d geometry");
        let geo = Conv2dGeometry {
            in_c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
        };
        let (oh, ow) = geo.out_hw();
        let cols = batch * oh * ow;
        let krows = geo.col_rows();
        let col = im2col(self.data(), batch, &geo);
        // [O, B·oh·ow]
        let mut y = vec![T::zero(); out_c * cols];
        gemm(out_c, cols, krows, w.data(), false, &col, false, T::zero(), &mut y);
        let plane = oh * ow;
        let mut out = vec![T::zero(); batch * out_c * plane];
        for o in 0..out_c {
            let bias = b.map_or(T::zero(), |b| b.data()[o]);
            for bi in 0..batch {
                let src = &y[o * cols + bi * plane..][..plane];
                let dst = &mut out[(bi * out_c + o) * plane..][..plane];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bias;
                }
            }
        }
        let mut parents = vec![self.clone(), w.clone()];
        if let Some(b) = b {
            assert_eq!(b.shape(), &[out_c], "conv2d bias shape");
            parents.push(b.clone());
        }
        let keep_col = parents[1].requires_grad();
        let col = if keep_col { col } else { Vec::new() };
        Tensor::from_op(out, vec![batch, out_c, oh, ow], parents, move |ctx| {
            // regroup dY into [O, B·oh·ow]
            let mut gy = vec![T::zero(); out_c * cols];
            for o in 0..out_c {
                for bi in 0..batch {
                    gy[o * cols + bi * plane..][..plane]
                        .copy_from_slice(&ctx.grad[(bi * out_c + o) * plane..][..plane]);
                }
            }
            let (x, w) = (&ctx.parents[0], &ctx.parents[1]);
            let gx = x.requires_grad().then(|| {
                let mut gcol = vec![T::zero(); krows * cols];
                gemm(krows, cols, out_c, w.data(), true, &gy, false, T::zero(), &mut gcol);
                col2im(&gcol, batch, &geo)
            });
            let gw = w.requires_grad().then(|| {
                let mut g = vec![T::zero(); out_c * krows];
                gemm(out_c, krows, cols, &gy, false, &col, true, T::zero(), &mut g);
                g
            });
            let mut grads = vec![gx, gw];
            if ctx.parents.len() == 3 {
                let gb = (0..out_c)
                    .map(|o| gy[o * cols..(o + 1) * cols].iter().copied().sum())
                    .collect();
                grads.push(Some(gb));
            }
            grads
        })
    }

    /// Non-overlapping `k×k` max pooling; H and W must be divisible by `k`.
    pub fn max_pool2d(&self, k: usize) -> Self {
        let (b, c, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        assert!(h % k == 0 && w % k == 0, "max_pool2d: {h}x{w} not divisible by {k}");
        let (oh, ow) = (h / k, w / k);
        let src = self.data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut arg = Vec::with_capacity(b * c * oh * ow);
        for p in 0..b * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = oi * k * w + oj * k;
                    for di in 0..k {
                        for dj in 0..k {
                            let idx = (oi * k + di) * w + oj * k + dj;
                            if plane[idx] > plane[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(plane[best]);
                    arg.push(p * h * w + best);
                }
            }
        }
        let n = self.numel();
        Tensor::from_op(out, vec![b, c, oh, ow], vec![self.clone()], move |ctx| {
            let mut g = vec![T::zero(); n];
            for (&i, &gy) in arg.iter().zip(ctx.grad) {
                g[i] += gy;
            }
            vec![Some(g)]
        })
    }

    /// Non-overlapping `k×k` average pooling.
    pub fn avg_pool2d(&self, k: usize) -> Self {
        let (b, c, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        assert!(h % k == 0 && w % k == 0, "avg_pool2d: {h}x{w} not divisible by {k}");
        let (oh, ow) = (h / k, w / k);
        let scale = T::one() / T::from_usize(k * k).unwrap();
        let src = self.data();
        let mut out = vec![T::zero(); b * c * oh * ow];
        for p in 0..b * c {
            for i in 0..h {
                for j in 0..w {
                    out[(p * oh + i / k) * ow + j / k] += src[(p * h + i) * w + j] * scale;
                }
            }
        }
        Tensor::from_op(out, vec![b, c, oh, ow], vec![self.clone()], move |ctx| {
            let mut g = vec![T::zero(); b * c * h * w];
            for p in 0..b * c {
                for i in 0..h {
                    for j in 0..w {
                        g[(p * h + i) * w + j] = ctx.grad[(p * oh + i / k) * ow + j / k] * scale;
                    }
                }
            }
            vec![Some(g)]
        })
    }

    /// Mean over the spatial axes of an NCHW tensor, giving `[B, C]`.
    pub fn global_avg_pool(&self) -> Self {
        let (b, c, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        self.reshape(&[b, c, h * w]).mean_axis(2)
    }
}
