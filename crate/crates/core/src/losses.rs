//! Distillation objectives: softened-logit KL, region-selected feature MSE,
//! the weighted total, and the foreground/background detection variant.

use dpk_tensor::{Float, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{DpkError, Result};
use crate::masking::MaskPattern;
use crate::transform::FeatureMap;

/// Student and teacher logits at a shared temperature.
#[derive(Debug, Clone)]
pub struct LogitsPair<T: Float = f32> {
    pub student: Tensor<T>,
    pub teacher: Tensor<T>,
    pub tau: f64,
}

impl<T: Float> LogitsPair<T> {
    pub fn new(student: Tensor<T>, teacher: Tensor<T>, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(DpkError::InvalidInput(format!("temperature must be positive, got {tau}")));
        }
        if student.rank() != 2 || student.shape() != teacher.shape() {
            return Err(DpkError::Shape(format!(
                "logits {:?} vs {:?}",
                student.shape(),
                teacher.shape()
            )));
        }
        Ok(LogitsPair { student, teacher, tau })
    }
}

/// Which distribution is the reference inside the KL divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// KL(teacher ‖ student)
    #[default]
    TeacherStudent,
    /// KL(student ‖ teacher)
    StudentTeacher,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdOptions {
    pub tau_squared: bool,
    pub direction: KlDirection,
}

impl Default for KdOptions {
    fn default() -> Self {
        KdOptions {
            tau_squared: true,
            direction: KlDirection::TeacherStudent,
        }
    }
}

/// Batch-mean KL divergence between temperature-softened distributions,
/// optionally scaled by `τ²`.
pub fn logits_kd_loss<T: Float>(pair: &LogitsPair<T>, opts: KdOptions) -> Tensor<T> {
    let inv = T::from_f64_lossy(1.0 / pair.tau);
    let ls = pair.student.scale(inv).log_softmax_last();
    let lt = pair.teacher.scale(inv).log_softmax_last();
    let (lp, lq) = match opts.direction {
        KlDirection::TeacherStudent => (lt, ls),
        KlDirection::StudentTeacher => (ls, lt),
    };
    let b = pair.student.dim(0) as f64;
    let kl = lp.exp().mul(&lp.sub(&lq)).sum_all();
    let factor = if opts.tau_squared { pair.tau * pair.tau } else { 1.0 };
    kl.scale(T::from_f64_lossy(factor / b))
}

/// Elements entering the feature loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    #[default]
    Full,
    NonMasked,
}

/// Per-element 0/1 weights selecting the unmasked patches of each sample.
pub fn unmasked_weights(shape: &[usize], masks: &[MaskPattern]) -> Result<Vec<f64>> {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if masks.len() != b {
        return Err(DpkError::Shape(format!("{} masks for a batch of {b}", masks.len())));
    }
    let mut out = vec![0.0; b * c * h * w];
    for (bi, m) in masks.iter().enumerate() {
        let g = m.grid();
        if g.rows == 0 || g.cols == 0 || h % g.rows != 0 || w % g.cols != 0 {
            return Err(DpkError::Shape(format!("mask grid {}x{} does not tile {h}x{w}", g.rows, g.cols)));
        }
        let (kh, kw) = (h / g.rows, w / g.cols);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    if !m.get(y / kh, x / kw) {
                        out[((bi * c + ci) * h + y) * w + x] = 1.0;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Mean squared error over the whole map or over unmasked patches only.
pub fn feature_loss<T: Float>(
    prediction: &FeatureMap<T>,
    target: &FeatureMap<T>,
    masks: Option<&[MaskPattern]>,
    region: Region,
) -> Result<Tensor<T>> {
    let shape = prediction.values.shape();
    if shape != target.values.shape() {
        return Err(DpkError::Shape(format!(
            "prediction {:?} vs target {:?}",
            shape,
            target.values.shape()
        )));
    }
    let diff = prediction.values.sub(&target.values).sqr();
    match region {
        Region::Full => Ok(diff.mean_all()),
        Region::NonMasked => {
            let masks = masks.ok_or_else(|| DpkError::Config("region non_masked requires masks".into()))?;
            let weights = unmasked_weights(shape, masks)?;
            let count: f64 = weights.iter().sum();
            if count == 0.0 {
                log::warn!("every patch is masked; non-masked feature loss is 0");
                return Ok(diff.sum_all().scale(T::zero()));
            }
            let w = Tensor::from_vec(weights.into_iter().map(T::from_f64_lossy).collect(), shape);
            Ok(diff.mul(&w).sum_all().scale(T::from_f64_lossy(1.0 / count)))
        }
    }
}

/// Weights of the combined objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub stage_weights: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.8,
            beta: 0.2,
            stage_weights: vec![1.0],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !ok(self.alpha) || !ok(self.beta) || !self.stage_weights.iter().all(|&w| ok(w)) {
            return Err(DpkError::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// `cls + α·logits + β·feat`.
pub fn total_loss<T: Float>(cls: &Tensor<T>, logits: &Tensor<T>, feat: &Tensor<T>, w: &LossWeights) -> Tensor<T> {
    cls.add(&logits.scale(T::from_f64_lossy(w.alpha)))
        .add(&feat.scale(T::from_f64_lossy(w.beta)))
}

/// Inputs of the foreground/background-weighted feature loss.
#[derive(Debug, Clone)]
pub struct FgdInputs<T: Float = f32> {
    /// `B × C × H × W`
    pub teacher: Tensor<T>,
    /// `B × C × H × W`
    pub hybrid: Tensor<T>,
    /// Binary foreground mask, `B × 1 × H × W`.
    pub fg_mask: Tensor<T>,
    /// `B × 1 × H × W`
    pub spatial_attn: Tensor<T>,
    /// `B × C × 1 × 1`
    pub channel_attn: Tensor<T>,
    pub w_f: f64,
    pub w_b: f64,
}

/// One-stage detector weights.
pub const FGD_ONE_STAGE: (f64, f64) = (2e-3, 5e-4);
/// Two-stage detector weights.
pub const FGD_TWO_STAGE: (f64, f64) = (5e-5, 2.5e-5);

fn check_fgd<T: Float>(i: &FgdInputs<T>) -> Result<()> {
    let s = i.teacher.shape();
    let bad = |what: &str, got: &[usize]| DpkError::Shape(format!("{what} {got:?} incompatible with features {s:?}"));
    if s.len() != 4 || i.hybrid.shape() != s {
        return Err(bad("hybrid", i.hybrid.shape()));
    }
    let spatial = [s[0], 1, s[2], s[3]];
    if i.fg_mask.shape() != spatial {
        return Err(bad("foreground mask", i.fg_mask.shape()));
    }
    if i.spatial_attn.shape() != spatial {
        return Err(bad("spatial attention", i.spatial_attn.shape()));
    }
    if i.channel_attn.shape() != [s[0], s[1], 1, 1] {
        return Err(bad("channel attention", i.channel_attn.shape()));
    }
    if i.fg_mask.data().iter().any(|&m| m != T::zero() && m != T::one()) {
        return Err(DpkError::InvalidInput("foreground mask must be binary".into()));
    }
    let nonneg = |t: &Tensor<T>| t.data().iter().all(|&x| x.is_finite() && x >= T::zero());
    if !nonneg(&i.spatial_attn) || !nonneg(&i.channel_attn) {
        return Err(DpkError::InvalidInput("attention maps must be finite and non-negative".into()));
    }
    if !(i.w_f >= 0.0 && i.w_b >= 0.0) {
        return Err(DpkError::InvalidInput("w_f and w_b must be non-negative".into()));
    }
    Ok(())
}

/// Foreground and background terms of the attention-weighted squared error.
pub fn fgd_terms<T: Float>(i: &FgdInputs<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    check_fgd(i)?;
    let s = i.teacher.shape();
    let m = i.fg_mask.broadcast_to(s);
    let weighted = i
        .teacher
        .sub(&i.hybrid)
        .sqr()
        .mul(&i.spatial_attn.broadcast_to(s))
        .mul(&i.channel_attn.broadcast_to(s));
    let fg = weighted.mul(&m).sum_all().scale(T::from_f64_lossy(i.w_f));
    let bg = weighted
        .mul(&m.neg().add_scalar(T::one()))
        .sum_all()
        .scale(T::from_f64_lossy(i.w_b));
    Ok((fg, bg))
}

pub fn fgd_masked_loss<T: Float>(i: &FgdInputs<T>) -> Result<Tensor<T>> {
    let (fg, bg) = fgd_terms(i)?;
    Ok(fg.add(&bg))
}
