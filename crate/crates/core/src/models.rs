//! Plain four-stage convolutional classifiers used as toy teachers and students.

use dpk_tensor::nn::{Conv2d, Linear};
use dpk_tensor::{Init, Tensor, VarStore};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DpkError, Result};

/// Architecture of a [`ConvClassifier`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Channel multiplier applied to `base_channels`.
    pub width: f64,
    pub base_channels: [usize; 4],
    pub convs_per_stage: usize,
}

impl ModelSpec {
    pub fn with_width(width: f64) -> Self {
        ModelSpec {
            width,
            ..Default::default()
        }
    }

    pub fn channels(&self) -> [usize; 4] {
        self.base_channels.map(|c| ((c as f64 * self.width).round() as usize).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.width.is_finite()) || self.convs_per_stage == 0 {
            return Err(DpkError::Config(format!("invalid model spec {self:?}")));
        }
        if self.base_channels.contains(&0) {
            return Err(DpkError::Config("base channels must be positive".into()));
        }
        Ok(())
    }
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            width: 1.0,
            base_channels: [16, 32, 64, 128],
            convs_per_stage: 1,
        }
    }
}

/// Stage feature maps and logits from one forward pass.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// Stage outputs at full, 1/2, 1/4 and 1/8 input resolution.
    pub stages: Vec<Tensor>,
    pub logits: Tensor,
}

/// Stages of 3×3 conv + ReLU blocks; stages after the first start with 2×2
/// max pooling. Global average pooling and a linear layer give the logits.
#[derive(Debug)]
pub struct ConvClassifier {
    pub spec: ModelSpec,
    pub classes: usize,
    stages: Vec<Vec<Conv2d>>,
    head: Linear,
    vars: VarStore,
}

pub const NUM_STAGES: usize = 4;

impl ConvClassifier {
    pub fn new<R: Rng + ?Sized>(spec: &ModelSpec, in_channels: usize, classes: usize, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut vs = VarStore::new();
        let channels = spec.channels();
        let mut c_in = in_channels;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for (s, &c) in channels.iter().enumerate() {
            let convs = (0..spec.convs_per_stage)
                .map(|j| {
                    let conv = Conv2d::new(&mut vs, &format!("stage{}.conv{j}", s + 1), c_in, c, 3, 1, 1, rng);
                    c_in = c;
                    conv
                })
                .collect();
            stages.push(convs);
        }
        let head = Linear::new(&mut vs, "head", c_in, classes, Init::Normal { std: 0.01 }, true, rng);
        Ok(ConvClassifier {
            spec: spec.clone(),
            classes,
            stages,
            head,
            vars: vs,
        })
    }

    pub fn vars(&self) -> &VarStore {
        &self.vars
    }

    /// `(C, H, W)` of every stage output for `h × w` inputs.
    pub fn stage_shapes(&self, h: usize, w: usize) -> Vec<(usize, usize, usize)> {
        self.spec
            .channels()
            .iter()
            .enumerate()
            .map(|(s, &c)| (c, h >> s, w >> s))
            .collect()
    }

    pub fn forward(&self, x: &Tensor) -> ModelOutput {
        let mut h = x.clone();
        let mut taps = Vec::with_capacity(NUM_STAGES);
        for (s, convs) in self.stages.iter().enumerate() {
            if s > 0 {
                h = h.max_pool2d(2);
            }
            for conv in convs {
                h = conv.forward(&h).relu();
            }
            taps.push(h.clone());
        }
        let logits = self.head.forward(&h.global_avg_pool());
        ModelOutput { stages: taps, logits }
    }

    pub fn logits(&self, x: &Tensor) -> Tensor {
        self.forward(x).logits
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_and_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = ConvClassifier::new(&ModelSpec::with_width(0.5), 3, 10, &mut rng).unwrap();
        let out = m.forward(&Tensor::zeros(&[2, 3, 32, 32]));
        let shapes: Vec<_> = out.stages.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![2, 8, 32, 32], vec![2, 16, 16, 16], vec![2, 32, 8, 8], vec![2, 64, 4, 4]]);
        assert_eq!(out.logits.shape(), &[2, 10]);
        assert_eq!(m.stage_shapes(32, 32)[3], (64, 4, 4));
    }

    #[test]
    fn same_seed_same_init() {
        let mk = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            ConvClassifier::new(&ModelSpec::default(), 3, 10, &mut rng).unwrap().vars().checksum()
        };
        assert_eq!(mk(), mk());
    }
}
