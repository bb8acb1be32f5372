//! Run configuration: TOML files, `key=value` overrides and validation.
//!
//! Every key is checked against the schema before anything runs. Unknown keys
//! are reported with their dotted path and line number.

use std::path::{Path, PathBuf};

use dpk_tensor::Fnv64;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{DpkError, Result};
use crate::losses::{KlDirection, LossWeights, Region};
use crate::masking::MaskStrategy;
use crate::models::ModelSpec;
use crate::seed::derive_seed;
use crate::transform::{Filler, TransformOverrides, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Archive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub train: usize,
    pub test: usize,
    pub size: usize,
    pub noise: f64,
    pub distractors: usize,
    /// Seed of the procedural generator, independent of the run seed so
    /// every run sees the same images.
    pub seed: u64,
    pub train_archive: Option<PathBuf>,
    pub test_archive: Option<PathBuf>,
    pub classes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            train: 5000,
            test: 1000,
            size: 32,
            noise: 0.15,
            distractors: 1,
            seed: 0,
            train_archive: None,
            test_archive: None,
            classes: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub teacher_width: f64,
    pub student_width: f64,
    pub base_channels: [usize; 4],
    pub convs_per_stage: usize,
    pub teacher_checkpoint: PathBuf,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            teacher_width: 1.0,
            student_width: 0.5,
            base_channels: [16, 32, 64, 128],
            convs_per_stage: 1,
            teacher_checkpoint: PathBuf::from("runs/teacher/teacher.dpkc"),
        }
    }
}

impl ModelConfig {
    pub fn teacher_spec(&self) -> ModelSpec {
        self.spec(self.teacher_width)
    }

    pub fn student_spec(&self) -> ModelSpec {
        self.spec(self.student_width)
    }

    fn spec(&self, width: f64) -> ModelSpec {
        ModelSpec {
            width,
            base_channels: self.base_channels,
            convs_per_stage: self.convs_per_stage,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    Constant,
    Cosine,
    Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub decay: LrDecay,
    /// Epochs at which the step schedule multiplies the rate by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 20,
            batch_size: 64,
            decay: LrDecay::Cosine,
            milestones: Vec::new(),
            gamma: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    /// 1-based stage ids; student stage `s` is distilled from teacher stage `s`.
    pub stages: Vec<usize>,
    pub stage_weights: Vec<f64>,
}

impl Default for DistillSection {
    fn default() -> Self {
        DistillSection {
            stages: vec![4],
            stage_weights: vec![1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub strategy: MaskStrategy,
    /// Ratio used by the fixed strategies (random, block).
    pub ratio: f64,
    /// Starting ratio of the exponential and linear schedules.
    pub pi0: f64,
    pub seed: Option<u64>,
    pub decay: f64,
    pub linear_decrement: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            strategy: MaskStrategy::Cka,
            ratio: 0.5,
            pi0: 1.0,
            seed: None,
            decay: 0.95,
            linear_decrement: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformConfig {
    pub variant: Variant,
    pub patch_size: Option<usize>,
    pub dim: Option<usize>,
    pub encoder_blocks: Option<usize>,
    pub decoder_blocks: Option<usize>,
    pub heads: Option<usize>,
    pub filler: Filler,
}

impl Default for TransformConfig {
    fn default() -> Self {
        TransformConfig {
            variant: Variant::EncoderDecoder,
            patch_size: None,
            dim: None,
            encoder_blocks: None,
            decoder_blocks: None,
            heads: None,
            filler: Filler::Teacher,
        }
    }
}

impl TransformConfig {
    pub fn overrides(&self) -> TransformOverrides {
        TransformOverrides {
            variant: Some(self.variant),
            patch_size: self.patch_size,
            dim: self.dim,
            encoder_blocks: self.encoder_blocks,
            decoder_blocks: self.decoder_blocks,
            heads: self.heads,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KdConfig {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub tau_squared: bool,
    pub region: Region,
    pub kl_direction: KlDirection,
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig {
            alpha: 0.8,
            beta: 0.2,
            tau: 4.0,
            tau_squared: true,
            region: Region::Full,
            kl_direction: KlDirection::TeacherStudent,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// Weight on the previous ratio when smoothing; 0 disables smoothing.
    pub ema: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FgdConfig {
    pub w_f: f64,
    pub w_b: f64,
}

impl Default for FgdConfig {
    fn default() -> Self {
        FgdConfig { w_f: 5e-5, w_b: 2.5e-5 }
    }
}

/// Everything a run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub distill: DistillSection,
    pub mask: MaskConfig,
    pub transform: TransformConfig,
    pub kd: KdConfig,
    pub schedule: ScheduleConfig,
    pub fgd: FgdConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/dpk"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            distill: DistillSection::default(),
            mask: MaskConfig::default(),
            transform: TransformConfig::default(),
            kd: KdConfig::default(),
            schedule: ScheduleConfig::default(),
            fgd: FgdConfig::default(),
        }
    }
}

/// Every accepted dotted key.
pub const SCHEMA: &[&str] = &[
    "seed",
    "out_dir",
    "data.source",
    "data.train",
    "data.test",
    "data.size",
    "data.noise",
    "data.distractors",
    "data.seed",
    "data.train_archive",
    "data.test_archive",
    "data.classes",
    "model.teacher_width",
    "model.student_width",
    "model.base_channels",
    "model.convs_per_stage",
    "model.teacher_checkpoint",
    "optim.lr",
    "optim.momentum",
    "optim.weight_decay",
    "optim.epochs",
    "optim.batch_size",
    "optim.decay",
    "optim.milestones",
    "optim.gamma",
    "distill.stages",
    "distill.stage_weights",
    "mask.strategy",
    "mask.ratio",
    "mask.pi0",
    "mask.seed",
    "mask.decay",
    "mask.linear_decrement",
    "transform.variant",
    "transform.patch_size",
    "transform.dim",
    "transform.encoder_blocks",
    "transform.decoder_blocks",
    "transform.heads",
    "transform.filler",
    "kd.alpha",
    "kd.beta",
    "kd.tau",
    "kd.tau_squared",
    "kd.region",
    "kd.kl_direction",
    "schedule.ema",
    "fgd.w_f",
    "fgd.w_b",
];

fn is_section(key: &str) -> bool {
    SCHEMA.iter().any(|k| k.strip_prefix(key).is_some_and(|rest| rest.starts_with('.')))
}

/// Line (1-based) where `dotted` is assigned in `source`, if it can be found.
fn find_line(source: &str, dotted: &str) -> Option<usize> {
    let (section, leaf) = dotted.rsplit_once('.').unwrap_or(("", dotted));
    let mut current = String::new();
    for (i, raw) in source.lines().enumerate() {
        let line = raw.trim();
        if let Some(h) = line.strip_prefix('[').and_then(|l| l.split(']').next()) {
            current = h.trim().to_string();
            continue;
        }
        let Some((k, _)) = line.split_once('=') else { continue };
        let k = k.trim().trim_matches('"');
        let full = if current.is_empty() { k.to_string() } else { format!("{current}.{k}") };
        if full == dotted || (current == section && k == leaf) {
            return Some(i + 1);
        }
    }
    None
}

fn walk(table: &Table, prefix: &str, source: &str, errors: &mut Vec<String>) {
    for (k, v) in table {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        if SCHEMA.contains(&path.as_str()) {
            continue;
        }
        match v {
            Value::Table(t) if is_section(&path) => walk(t, &path, source, errors),
            _ => {
                let at = find_line(source, &path).map(|l| format!("line {l}: ")).unwrap_or_default();
                errors.push(format!("{at}unknown key `{path}`"));
            }
        }
    }
}

/// Unknown keys in `table`, each with its line when known.
pub fn unknown_keys(table: &Table, source: &str) -> Vec<String> {
    let mut errors = Vec::new();
    walk(table, "", source, &mut errors);
    errors
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> Value {
    let doc = format!("v = {value}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(value.to_string())),
        Err(_) => Value::String(value.to_string()),
    }
}

/// Sets `dotted = value` in `table`; the key must be in the schema.
pub fn set_key(table: &mut Table, dotted: &str, value: &str) -> Result<()> {
    if !SCHEMA.contains(&dotted) {
        return Err(DpkError::Validation(vec![format!("unknown key `{dotted}`")]));
    }
    let parts: Vec<&str> = dotted.split('.').collect();
    let mut t = table;
    for p in &parts[..parts.len() - 1] {
        let entry = t.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| DpkError::Validation(vec![format!("`{p}` is not a section")]))?;
    }
    t.insert(parts[parts.len() - 1].to_string(), parse_value(value));
    Ok(())
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| DpkError::Validation(vec![format!("override `{s}` is not of the form key=value")]))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl DistillConfig {
    /// Parses and validates a TOML document with overrides applied.
    pub fn from_toml_str(source: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: Table = source
            .parse()
            .map_err(|e: toml::de::Error| DpkError::Validation(vec![e.to_string().trim().to_string()]))?;
        let mut errors = unknown_keys(&table, source);
        for (k, v) in overrides {
            if let Err(DpkError::Validation(mut e)) = set_key(&mut table, k, v) {
                errors.append(&mut e);
            }
        }
        if !errors.is_empty() {
            return Err(DpkError::Validation(errors));
        }
        Self::from_table(table)
    }

    pub fn from_table(table: Table) -> Result<Self> {
        let cfg: DistillConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| DpkError::Validation(vec![e.to_string().trim().to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let source = std::fs::read_to_string(path)
            .map_err(|e| DpkError::Validation(vec![format!("cannot read config `{}`: {e}", path.display())]))?;
        Self::from_toml_str(&source, overrides)
    }

    /// A copy with one more override applied and revalidated.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        let mut table = self.to_table();
        set_key(&mut table, key, value)?;
        Self::from_table(table)
    }

    pub fn to_table(&self) -> Table {
        Table::try_from(self).expect("config serialises to a table")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// FNV-1a of the canonical serialisation, ignoring where outputs go.
    pub fn hash(&self) -> u64 {
        let canonical = DistillConfig {
            out_dir: PathBuf::new(),
            ..self.clone()
        };
        let mut h = Fnv64::new();
        h.write(canonical.to_toml().as_bytes());
        h.finish()
    }

    pub fn mask_seed(&self) -> u64 {
        self.mask.seed.unwrap_or_else(|| derive_seed(self.seed, "mask"))
    }

    pub fn multi_stage(&self) -> bool {
        self.distill.stages.len() > 1
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.kd.alpha,
            beta: self.kd.beta,
            stage_weights: self.distill.stage_weights.clone(),
        }
    }

    /// Semantic checks; every problem is reported at once.
    pub fn validate(&self) -> Result<()> {
        let mut e = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                e.push(msg);
            }
        };
        let nonneg = |x: f64| x.is_finite() && x >= 0.0;
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        check(self.data.train > 0 && self.data.test > 0, "data.train and data.test must be positive".into());
        check(self.data.classes >= 2, format!("data.classes = {} must be at least 2", self.data.classes));
        check(nonneg(self.data.noise), "data.noise must be non-negative".into());
        if self.data.source == DataSource::Archive {
            check(
                self.data.train_archive.is_some() && self.data.test_archive.is_some(),
                "data.source = \"archive\" needs data.train_archive and data.test_archive".into(),
            );
        } else {
            check(self.data.size >= 24 && self.data.size % 8 == 0, format!("data.size = {} must be a multiple of 8, at least 24", self.data.size));
            check(self.data.classes == 10, "the synthetic set has exactly 10 classes".into());
        }
        check(self.model.teacher_width > 0.0 && self.model.student_width > 0.0, "model widths must be positive".into());
        check(self.model.convs_per_stage > 0, "model.convs_per_stage must be positive".into());
        check(!self.model.base_channels.contains(&0), "model.base_channels must be positive".into());
        check(self.optim.lr > 0.0 && self.optim.lr.is_finite(), format!("optim.lr = {} must be positive", self.optim.lr));
        check(unit(self.optim.momentum), "optim.momentum must lie in [0, 1]".into());
        check(nonneg(self.optim.weight_decay), "optim.weight_decay must be non-negative".into());
        check(self.optim.batch_size >= 4, format!("optim.batch_size = {} is below the minimum of 4", self.optim.batch_size));
        check(self.optim.gamma > 0.0, "optim.gamma must be positive".into());
        check(!self.distill.stages.is_empty(), "distill.stages must not be empty".into());
        check(
            self.distill.stages.iter().all(|s| (1..=4).contains(s)),
            format!("distill.stages = {:?}: stage ids are 1..=4", self.distill.stages),
        );
        let mut sorted = self.distill.stages.clone();
        sorted.sort_unstable();
        sorted.dedup();
        check(sorted.len() == self.distill.stages.len(), "distill.stages has duplicates".into());
        check(
            self.distill.stage_weights.len() == self.distill.stages.len(),
            format!(
                "distill.stage_weights has {} entries for {} stages",
                self.distill.stage_weights.len(),
                self.distill.stages.len()
            ),
        );
        check(self.distill.stage_weights.iter().all(|&w| nonneg(w)), "stage weights must be non-negative".into());
        check(unit(self.mask.ratio), format!("mask.ratio = {} outside [0, 1]", self.mask.ratio));
        check(unit(self.mask.pi0), format!("mask.pi0 = {} outside [0, 1]", self.mask.pi0));
        check(self.mask.decay > 0.0 && self.mask.decay <= 1.0, "mask.decay must lie in (0, 1]".into());
        check(nonneg(self.mask.linear_decrement), "mask.linear_decrement must be non-negative".into());
        check(nonneg(self.kd.alpha) && nonneg(self.kd.beta), "kd.alpha and kd.beta must be non-negative".into());
        check(self.kd.tau > 0.0 && self.kd.tau.is_finite(), format!("kd.tau = {} must be positive", self.kd.tau));
        check((0.0..1.0).contains(&self.schedule.ema), "schedule.ema must lie in [0, 1)".into());
        check(nonneg(self.fgd.w_f) && nonneg(self.fgd.w_b), "fgd weights must be non-negative".into());
        for (name, v) in [
            ("transform.patch_size", self.transform.patch_size),
            ("transform.dim", self.transform.dim),
            ("transform.heads", self.transform.heads),
        ] {
            check(v != Some(0), format!("{name} must be positive"));
        }
        if e.is_empty() {
            Ok(())
        } else {
            Err(DpkError::Validation(e))
        }
    }
}
