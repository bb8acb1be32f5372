//! Parameterised layers.

use rand::Rng;

use crate::{Float, Init, Tensor, Var, VarStore};

#[derive(Debug, Clone)]
pub struct Linear<T: Float = f32> {
    pub weight: Var<T>,
    pub bias: Option<Var<T>>,
}

impl<T: Float> Linear<T> {
    /// Weight `[out, in]` drawn from `init`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        vs: &mut VarStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = vs.var(&format!("{name}.weight"), &[fan_out, fan_in], init, rng);
        let bias = bias.then(|| vs.var(&format!("{name}.bias"), &[fan_out], Init::Zeros, rng));
        Linear { weight, bias }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let b = self.bias.as_ref().map(Var::get);
        x.linear(&self.weight.get(), b.as_ref())
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d<T: Float = f32> {
    pub weight: Var<T>,
    pub bias: Option<Var<T>>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Float> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        vs: &mut VarStore<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        let weight = vs.var(
            &format!("{name}.weight"),
            &[out_c, in_c, kernel, kernel],
            Init::he(fan_in),
            rng,
        );
        let bias = Some(vs.var(&format!("{name}.bias"), &[out_c], Init::Zeros, rng));
        Conv2d {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let b = self.bias.as_ref().map(Var::get);
        x.conv2d(&self.weight.get(), b.as_ref(), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm<T: Float = f32> {
    pub gamma: Var<T>,
    pub beta: Var<T>,
    pub eps: f64,
}

impl<T: Float> LayerNorm<T> {
    pub fn new<R: Rng + ?Sized>(vs: &mut VarStore<T>, name: &str, dim: usize, eps: f64, rng: &mut R) -> Self {
        LayerNorm {
            gamma: vs.var(&format!("{name}.gamma"), &[dim], Init::Ones, rng),
            beta: vs.var(&format!("{name}.beta"), &[dim], Init::Zeros, rng),
            eps,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        x.layer_norm(&self.gamma.get(), &self.beta.get(), self.eps)
    }
}
