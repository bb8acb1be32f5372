//! Feature transformation modules: patch embedding, ViT-style encoders, token
//! stitching into hybrid features, the shared decoder, and the ablation variants.
//!
//! Every parameter created here is training-only: the deployed student never
//! references it. [`invocation_count`] counts calls into this module on the
//! current thread so callers can check that inference never touches it.

use std::cell::Cell;

use dpk_tensor::nn::{Conv2d, LayerNorm, Linear};
use dpk_tensor::{Float, Init, Tensor, Var, VarStore};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DpkError, Result};
use crate::masking::{Grid, MaskPattern};

thread_local! {
    static INVOCATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of transform-module calls made on this thread.
pub fn invocation_count() -> u64 {
    INVOCATIONS.with(Cell::get)
}

fn record_invocation() {
    INVOCATIONS.with(|c| c.set(c.get() + 1));
}

/// Batched spatial activations `B × C × H × W` tapped at a network stage.
#[derive(Debug, Clone)]
pub struct FeatureMap<T: Float = f32> {
    pub values: Tensor<T>,
    pub stage: usize,
}

impl<T: Float> FeatureMap<T> {
    pub fn new(values: Tensor<T>, stage: usize) -> Result<Self> {
        if values.rank() != 4 {
            return Err(DpkError::Shape(format!("feature map must be BxCxHxW, got {:?}", values.shape())));
        }
        if values.dim(2) == 0 || values.dim(3) == 0 {
            return Err(DpkError::Shape("feature map has an empty spatial axis".into()));
        }
        Ok(FeatureMap { values, stage })
    }

    /// `(B, C, H, W)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.values.shape();
        (s[0], s[1], s[2], s[3])
    }
}

/// Batched token sequence `B × N × d` laid out on a patch grid.
#[derive(Debug, Clone)]
pub struct TokenSequence<T: Float = f32> {
    pub values: Tensor<T>,
    pub grid: Grid,
}

impl<T: Float> TokenSequence<T> {
    pub fn new(values: Tensor<T>, grid: Grid) -> Result<Self> {
        if values.rank() != 3 || values.dim(1) != grid.len() {
            return Err(DpkError::Shape(format!(
                "token sequence {:?} does not match a {}x{} grid",
                values.shape(),
                grid.rows,
                grid.cols
            )));
        }
        Ok(TokenSequence { values, grid })
    }

    pub fn batch(&self) -> usize {
        self.values.dim(0)
    }

    pub fn len(&self) -> usize {
        self.values.dim(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.dim(2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Separate ViT encoders for student and teacher tokens, shared decoder.
    EncoderDecoder,
    /// Linear patch projections only, then the decoder.
    MlpDecoder,
    /// Convolutions, pooling and a fully connected head instead of attention.
    Conv,
}

/// What replaces masked student tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Filler {
    Teacher,
    Zero,
    Learnable,
}

/// Resolved transform hyper-parameters for one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformParams {
    pub variant: Variant,
    pub patch_size: usize,
    pub dim: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub ln_eps: f64,
}

/// Largest token dimension picked by default.
pub const MAX_DEFAULT_DIM: usize = 256;
/// Token budget used to pick the default patch size.
pub const MAX_DEFAULT_TOKENS: usize = 64;

/// Smallest patch size dividing both sides whose grid has at most
/// [`MAX_DEFAULT_TOKENS`] tokens.
pub fn default_patch_size(h: usize, w: usize) -> usize {
    (1..=h.min(w))
        .find(|&k| h % k == 0 && w % k == 0 && (h / k) * (w / k) <= MAX_DEFAULT_TOKENS)
        .unwrap_or_else(|| gcd(h, w))
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Optional overrides from configuration; unset fields take defaults.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransformOverrides {
    pub variant: Option<Variant>,
    pub patch_size: Option<usize>,
    pub dim: Option<usize>,
    pub encoder_blocks: Option<usize>,
    pub decoder_blocks: Option<usize>,
    pub heads: Option<usize>,
}

impl TransformParams {
    /// Fills defaults for a stage whose teacher map is `C_t × H × W` and
    /// validates the result. Errors here are configuration errors.
    pub fn resolve(o: &TransformOverrides, teacher_channels: usize, h: usize, w: usize, multi_stage: bool) -> Result<Self> {
        let patch_size = o.patch_size.unwrap_or_else(|| default_patch_size(h, w));
        if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
            return Err(DpkError::Config(format!(
                "transform.patch_size = {patch_size} does not divide the {h}x{w} stage map"
            )));
        }
        let params = TransformParams {
            variant: o.variant.unwrap_or(Variant::EncoderDecoder),
            patch_size,
            dim: o.dim.unwrap_or(teacher_channels.min(MAX_DEFAULT_DIM)),
            encoder_blocks: o.encoder_blocks.unwrap_or(6),
            decoder_blocks: o.decoder_blocks.unwrap_or(if multi_stage { 4 } else { 6 }),
            heads: o.heads.unwrap_or(4),
            mlp_ratio: 4,
            ln_eps: 1e-6,
        };
        if params.dim == 0 {
            return Err(DpkError::Config("transform.dim must be positive".into()));
        }
        if params.heads == 0 || params.dim % params.heads != 0 {
            return Err(DpkError::Config(format!(
                "transform.dim = {} is not divisible by transform.heads = {}",
                params.dim, params.heads
            )));
        }
        Ok(params)
    }

    pub fn grid(&self, h: usize, w: usize) -> Grid {
        Grid::new(h / self.patch_size, w / self.patch_size)
    }
}

/// `k × k` stride-`k` convolution: flattens each patch and projects it to `d`.
#[derive(Debug, Clone)]
pub struct PatchEmbed<T: Float = f32> {
    pub proj: Conv2d<T>,
    pub patch_size: usize,
}

impl<T: Float> PatchEmbed<T> {
    pub fn new<R: Rng + ?Sized>(vs: &mut VarStore<T>, name: &str, in_c: usize, patch_size: usize, dim: usize, rng: &mut R) -> Self {
        let fan_in = in_c * patch_size * patch_size;
        let weight = vs.var(
            &format!("{name}.weight"),
            &[dim, in_c, patch_size, patch_size],
            Init::Normal {
                std: (1.0 / fan_in as f64).sqrt(),
            },
            rng,
        );
        let bias = Some(vs.var(&format!("{name}.bias"), &[dim], Init::Zeros, rng));
        PatchEmbed {
            proj: Conv2d {
                weight,
                bias,
                stride: patch_size,
                pad: 0,
            },
            patch_size,
        }
    }

    pub fn dim(&self) -> usize {
        self.proj.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.proj.weight.shape()[1]
    }
}

/// Splits a feature map into `k × k` patches and projects each to a token.
pub fn patchify<T: Float>(f: &FeatureMap<T>, embed: &PatchEmbed<T>) -> Result<TokenSequence<T>> {
    record_invocation();
    let (b, c, h, w) = f.dims();
    let k = embed.patch_size;
    if h % k != 0 || w % k != 0 {
        return Err(DpkError::Config(format!("patch size {k} does not divide {h}x{w}")));
    }
    if c != embed.in_channels() {
        return Err(DpkError::Shape(format!("patch embedding expects {} channels, got {c}", embed.in_channels())));
    }
    let grid = Grid::new(h / k, w / k);
    let d = embed.dim();
    let y = embed.proj.forward(&f.values); // [B, d, gh, gw]
    let tokens = y.reshape(&[b, d, grid.len()]).transpose(1, 2);
    TokenSequence::new(tokens, grid)
}

/// Pre-norm transformer block: `x + MHSA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Debug, Clone)]
pub struct Block<T: Float = f32> {
    ln1: LayerNorm<T>,
    qkv: Linear<T>,
    proj: Linear<T>,
    ln2: LayerNorm<T>,
    fc1: Linear<T>,
    fc2: Linear<T>,
    heads: usize,
}

impl<T: Float> Block<T> {
    pub fn new<R: Rng + ?Sized>(vs: &mut VarStore<T>, name: &str, p: &TransformParams, rng: &mut R) -> Self {
        let d = p.dim;
        let init = Init::Normal { std: 0.02 };
        Block {
            ln1: LayerNorm::new(vs, &format!("{name}.ln1"), d, p.ln_eps, rng),
            qkv: Linear::new(vs, &format!("{name}.qkv"), d, 3 * d, init, true, rng),
            proj: Linear::new(vs, &format!("{name}.proj"), d, d, init, true, rng),
            ln2: LayerNorm::new(vs, &format!("{name}.ln2"), d, p.ln_eps, rng),
            fc1: Linear::new(vs, &format!("{name}.fc1"), d, p.mlp_ratio * d, init, true, rng),
            fc2: Linear::new(vs, &format!("{name}.fc2"), p.mlp_ratio * d, d, init, true, rng),
            heads: p.heads,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let (b, n, d) = (x.dim(0), x.dim(1), x.dim(2));
        let (h, dh) = (self.heads, d / self.heads);
        let qkv = self
            .qkv
            .forward(&self.ln1.forward(x))
            .reshape(&[b, n, 3, h, dh])
            .permute(&[2, 0, 3, 1, 4]); // [3, B, H, N, dh]
        let part = |i: usize| qkv.narrow(0, i, 1).reshape(&[b * h, n, dh]);
        let (q, k, v) = (part(0), part(1), part(2));
        let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let attn = q.matmul(&k.transpose(1, 2)).scale(scale).softmax_last();
        let z = attn
            .matmul(&v)
            .reshape(&[b, h, n, dh])
            .permute(&[0, 2, 1, 3])
            .reshape(&[b, n, d]);
        let x = x.add(&self.proj.forward(&z));
        let m = self.fc2.forward(&self.fc1.forward(&self.ln2.forward(&x)).gelu());
        x.add(&m)
    }
}

fn add_positions<T: Float>(x: &Tensor<T>, pos: &Var<T>) -> Tensor<T> {
    let p = pos.get();
    let (n, d) = (p.dim(0), p.dim(1));
    x.add(&p.reshape(&[1, n, d]).broadcast_to(x.shape()))
}

/// Position table followed by transformer blocks. Without a table and with
/// zero blocks it is the identity.
#[derive(Debug, Clone)]
pub struct Encoder<T: Float = f32> {
    pub pos: Option<Var<T>>,
    pub blocks: Vec<Block<T>>,
}

impl<T: Float> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(vs: &mut VarStore<T>, name: &str, p: &TransformParams, tokens: usize, rng: &mut R) -> Self {
        let pos = Some(vs.var(&format!("{name}.pos"), &[tokens, p.dim], Init::Normal { std: 0.02 }, rng));
        let blocks = (0..p.encoder_blocks)
            .map(|i| Block::new(vs, &format!("{name}.blocks.{i}"), p, rng))
            .collect();
        Encoder { pos, blocks }
    }

    pub fn identity() -> Self {
        Encoder {
            pos: None,
            blocks: Vec::new(),
        }
    }
}

/// Adds the position table, then runs the encoder blocks.
pub fn encode<T: Float>(tokens: &TokenSequence<T>, encoder: &Encoder<T>) -> Result<TokenSequence<T>> {
    record_invocation();
    let mut x = tokens.values.clone();
    if let Some(pos) = &encoder.pos {
        let shape = pos.shape();
        if shape != [tokens.len(), tokens.dim()] {
            return Err(DpkError::Shape(format!(
                "encoder expects {}x{} tokens, got {:?}",
                shape[0],
                shape[1],
                tokens.values.shape()
            )));
        }
        x = add_positions(&x, pos);
    }
    for blk in &encoder.blocks {
        x = blk.forward(&x);
    }
    TokenSequence::new(x, tokens.grid)
}

fn check_same_tokens<T: Float>(a: &TokenSequence<T>, b: &TokenSequence<T>, masks: &[MaskPattern]) -> Result<Vec<bool>> {
    if a.values.shape() != b.values.shape() || a.grid != b.grid {
        return Err(DpkError::Shape(format!(
            "student tokens {:?} vs teacher tokens {:?}",
            a.values.shape(),
            b.values.shape()
        )));
    }
    mask_flags(a, masks)
}

fn mask_flags<T: Float>(tokens: &TokenSequence<T>, masks: &[MaskPattern]) -> Result<Vec<bool>> {
    if masks.len() != tokens.batch() {
        return Err(DpkError::Shape(format!("{} masks for a batch of {}", masks.len(), tokens.batch())));
    }
    let mut flags = Vec::with_capacity(tokens.batch() * tokens.len());
    for m in masks {
        if m.grid() != tokens.grid {
            return Err(DpkError::Shape(format!(
                "mask grid {:?} does not match token grid {:?}",
                m.grid(),
                tokens.grid
            )));
        }
        flags.extend_from_slice(m.flags());
    }
    Ok(flags)
}

/// Hybrid tokens: teacher tokens where the mask is set, student tokens
/// elsewhere. The teacher side is detached.
pub fn stitch<T: Float>(student: &TokenSequence<T>, teacher: &TokenSequence<T>, masks: &[MaskPattern]) -> Result<TokenSequence<T>> {
    record_invocation();
    let flags = check_same_tokens(student, teacher, masks)?;
    let out = student.values.select_rows(&teacher.values.detach(), &flags);
    TokenSequence::new(out, student.grid)
}

/// Replaces masked student tokens with the chosen filler. `Filler::Teacher`
/// is exactly [`stitch`].
pub fn fill_masked<T: Float>(
    student: &TokenSequence<T>,
    masks: &[MaskPattern],
    filler: Filler,
    teacher: Option<&TokenSequence<T>>,
    learnable_token: Option<&Tensor<T>>,
) -> Result<TokenSequence<T>> {
    match filler {
        Filler::Teacher => {
            let teacher = teacher.ok_or_else(|| DpkError::Config("teacher filler requires teacher tokens".into()))?;
            stitch(student, teacher, masks)
        }
        Filler::Zero => {
            record_invocation();
            let flags = mask_flags(student, masks)?;
            let zeros = Tensor::zeros(student.values.shape());
            TokenSequence::new(student.values.select_rows(&zeros, &flags), student.grid)
        }
        Filler::Learnable => {
            record_invocation();
            let token = learnable_token.ok_or_else(|| DpkError::Config("learnable filler requires a mask token".into()))?;
            let d = student.dim();
            if token.numel() != d {
                return Err(DpkError::Shape(format!("mask token has {} entries, tokens have dim {d}", token.numel())));
            }
            let flags = mask_flags(student, masks)?;
            let fill = token.reshape(&[1, 1, d]).broadcast_to(student.values.shape());
            TokenSequence::new(student.values.select_rows(&fill, &flags), student.grid)
        }
    }
}

/// Shared decoder: position table, transformer blocks, final norm (when there
/// are blocks) and a linear head predicting one `C_t × k × k` patch per token.
#[derive(Debug, Clone)]
pub struct Decoder<T: Float = f32> {
    pub pos: Var<T>,
    pub blocks: Vec<Block<T>>,
    pub norm: Option<LayerNorm<T>>,
    pub head: Linear<T>,
    pub patch_size: usize,
    pub out_channels: usize,
}

impl<T: Float> Decoder<T> {
    pub fn new<R: Rng + ?Sized>(
        vs: &mut VarStore<T>,
        name: &str,
        p: &TransformParams,
        tokens: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        let pos = vs.var(&format!("{name}.pos"), &[tokens, p.dim], Init::Normal { std: 0.02 }, rng);
        let blocks = (0..p.decoder_blocks)
            .map(|i| Block::new(vs, &format!("{name}.blocks.{i}"), p, rng))
            .collect::<Vec<_>>();
        let norm = (!blocks.is_empty()).then(|| LayerNorm::new(vs, &format!("{name}.norm"), p.dim, p.ln_eps, rng));
        let out = out_channels * p.patch_size * p.patch_size;
        let head = Linear::new(
            vs,
            &format!("{name}.head"),
            p.dim,
            out,
            Init::Normal {
                std: (1.0 / p.dim as f64).sqrt(),
            },
            true,
            rng,
        );
        Decoder {
            pos,
            blocks,
            norm,
            head,
            patch_size: p.patch_size,
            out_channels,
        }
    }
}

/// `[B, N, C·k·k]` per-patch predictions back to a `[B, C, H, W]` map.
pub fn fold_patches<T: Float>(tokens: &Tensor<T>, grid: Grid, k: usize, channels: usize) -> Tensor<T> {
    let b = tokens.dim(0);
    tokens
        .reshape(&[b, grid.rows, grid.cols, channels, k, k])
        .permute(&[0, 3, 1, 4, 2, 5])
        .reshape(&[b, channels, grid.rows * k, grid.cols * k])
}

/// Decodes hybrid tokens into a feature map of shape `B × C_t × H × W`.
pub fn decode<T: Float>(hybrid: &TokenSequence<T>, decoder: &Decoder<T>, target_shape: (usize, usize, usize)) -> Result<FeatureMap<T>> {
    record_invocation();
    let (c_t, h, w) = target_shape;
    let k = decoder.patch_size;
    if c_t != decoder.out_channels || hybrid.grid.rows * k != h || hybrid.grid.cols * k != w {
        return Err(DpkError::Config(format!(
            "decoder for {} channels, patch {k}, grid {}x{} cannot produce {c_t}x{h}x{w}",
            decoder.out_channels, hybrid.grid.rows, hybrid.grid.cols
        )));
    }
    if decoder.pos.shape() != [hybrid.len(), hybrid.dim()] {
        return Err(DpkError::Shape(format!(
            "decoder position table {:?} vs tokens {:?}",
            decoder.pos.shape(),
            hybrid.values.shape()
        )));
    }
    let mut x = add_positions(&hybrid.values, &decoder.pos);
    for blk in &decoder.blocks {
        x = blk.forward(&x);
    }
    if let Some(norm) = &decoder.norm {
        x = norm.forward(&x);
    }
    let patches = decoder.head.forward(&x);
    FeatureMap::new(fold_patches(&patches, hybrid.grid, k, c_t), 0)
}

/// Convolutional transformation: three 3×3 convolutions over the hybrid token
/// map, 2×2 average pooling (when the grid is even) and a fully connected head.
#[derive(Debug, Clone)]
pub struct ConvTransform<T: Float = f32> {
    convs: Vec<Conv2d<T>>,
    pool: bool,
    fc: Linear<T>,
    out_shape: (usize, usize, usize),
}

impl<T: Float> ConvTransform<T> {
    pub fn new<R: Rng + ?Sized>(
        vs: &mut VarStore<T>,
        name: &str,
        dim: usize,
        grid: Grid,
        out_shape: (usize, usize, usize),
        rng: &mut R,
    ) -> Self {
        let convs = (0..3)
            .map(|i| Conv2d::new(vs, &format!("{name}.conv{i}"), dim, dim, 3, 1, 1, rng))
            .collect();
        let pool = grid.rows % 2 == 0 && grid.cols % 2 == 0;
        let pooled = if pool { grid.len() / 4 } else { grid.len() };
        let (c, h, w) = out_shape;
        let fc = Linear::new(
            vs,
            &format!("{name}.fc"),
            dim * pooled,
            c * h * w,
            Init::Normal {
                std: (1.0 / (dim * pooled) as f64).sqrt(),
            },
            true,
            rng,
        );
        ConvTransform {
            convs,
            pool,
            fc,
            out_shape,
        }
    }

    pub fn forward(&self, hybrid: &TokenSequence<T>) -> Result<FeatureMap<T>> {
        record_invocation();
        let (b, d, g) = (hybrid.batch(), hybrid.dim(), hybrid.grid);
        let mut x = hybrid.values.transpose(1, 2).reshape(&[b, d, g.rows, g.cols]);
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&x);
            if i + 1 < self.convs.len() {
                x = x.relu();
            }
        }
        if self.pool {
            x = x.avg_pool2d(2);
        }
        let n = x.numel() / b;
        let (c, h, w) = self.out_shape;
        let y = self.fc.forward(&x.reshape(&[b, n])).reshape(&[b, c, h, w]);
        FeatureMap::new(y, 0)
    }
}

/// Full per-stage transformation: student map + teacher map + masks in,
/// predicted teacher map out.
#[derive(Debug)]
pub struct StageTransform<T: Float = f32> {
    pub params: TransformParams,
    pub filler: Filler,
    pub grid: Grid,
    student_embed: PatchEmbed<T>,
    teacher_embed: PatchEmbed<T>,
    student_encoder: Encoder<T>,
    teacher_encoder: Encoder<T>,
    decoder: Option<Decoder<T>>,
    conv: Option<ConvTransform<T>>,
    mask_token: Option<Var<T>>,
    target_shape: (usize, usize, usize),
    vars: VarStore<T>,
}

impl<T: Float> StageTransform<T> {
    /// `student_shape` and `teacher_shape` are `(C, H, W)`; spatial sizes must match.
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        params: TransformParams,
        filler: Filler,
        student_shape: (usize, usize, usize),
        teacher_shape: (usize, usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        let (c_s, h, w) = student_shape;
        let (c_t, ht, wt) = teacher_shape;
        if (h, w) != (ht, wt) {
            return Err(DpkError::Config(format!(
                "stage {name}: student map {h}x{w} and teacher map {ht}x{wt} differ spatially"
            )));
        }
        if h % params.patch_size != 0 || w % params.patch_size != 0 {
            return Err(DpkError::Config(format!(
                "stage {name}: patch size {} does not divide {h}x{w}",
                params.patch_size
            )));
        }
        let grid = params.grid(h, w);
        let mut vs = VarStore::new();
        let k = params.patch_size;
        let student_embed = PatchEmbed::new(&mut vs, &format!("{name}.student_embed"), c_s, k, params.dim, rng);
        let teacher_embed = PatchEmbed::new(&mut vs, &format!("{name}.teacher_embed"), c_t, k, params.dim, rng);
        let (student_encoder, teacher_encoder) = match params.variant {
            Variant::EncoderDecoder => (
                Encoder::new(&mut vs, &format!("{name}.student_encoder"), &params, grid.len(), rng),
                Encoder::new(&mut vs, &format!("{name}.teacher_encoder"), &params, grid.len(), rng),
            ),
            Variant::MlpDecoder | Variant::Conv => (Encoder::identity(), Encoder::identity()),
        };
        let (decoder, conv) = match params.variant {
            Variant::Conv => (
                None,
                Some(ConvTransform::new(&mut vs, &format!("{name}.conv"), params.dim, grid, teacher_shape, rng)),
            ),
            _ => (
                Some(Decoder::new(&mut vs, &format!("{name}.decoder"), &params, grid.len(), c_t, rng)),
                None,
            ),
        };
        let mask_token = (filler == Filler::Learnable)
            .then(|| vs.var(&format!("{name}.mask_token"), &[params.dim], Init::Normal { std: 0.02 }, rng));
        Ok(StageTransform {
            params,
            filler,
            grid,
            student_embed,
            teacher_embed,
            student_encoder,
            teacher_encoder,
            decoder,
            conv,
            mask_token,
            target_shape: teacher_shape,
            vars: vs,
        })
    }

    pub fn vars(&self) -> &VarStore<T> {
        &self.vars
    }

    /// Names of every parameter owned here; none of them belong to the deployed student.
    pub fn training_only_parameters(&self) -> Vec<String> {
        self.vars.vars().iter().map(|v| v.name().to_string()).collect()
    }

    /// Hybrid tokens for the given masks (before decoding).
    pub fn hybrid_tokens(&self, student: &FeatureMap<T>, teacher: &FeatureMap<T>, masks: &[MaskPattern]) -> Result<TokenSequence<T>> {
        let s = encode(&patchify(student, &self.student_embed)?, &self.student_encoder)?;
        let t = match self.filler {
            Filler::Teacher => {
                let teacher = FeatureMap::new(teacher.values.detach(), teacher.stage)?;
                Some(encode(&patchify(&teacher, &self.teacher_embed)?, &self.teacher_encoder)?)
            }
            _ => None,
        };
        let token = self.mask_token.as_ref().map(Var::get);
        fill_masked(&s, masks, self.filler, t.as_ref(), token.as_ref())
    }

    pub fn forward(&self, student: &FeatureMap<T>, teacher: &FeatureMap<T>, masks: &[MaskPattern]) -> Result<FeatureMap<T>> {
        record_invocation();
        let hybrid = self.hybrid_tokens(student, teacher, masks)?;
        let out = match (&self.decoder, &self.conv) {
            (Some(dec), _) => decode(&hybrid, dec, self.target_shape)?,
            (None, Some(conv)) => conv.forward(&hybrid)?,
            (None, None) => unreachable!("transform has neither decoder nor conv head"),
        };
        FeatureMap::new(out.values, teacher.stage)
    }
}
