//! Training loops: supervised baselines, the distillation step and run, and evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use dpk_tensor::optim::{LrSchedule, Sgd};
use dpk_tensor::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::archive::{ArchiveTensor, FeatureArchive, TensorData};
use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, DistillConfig, LrDecay};
use crate::data::{chunk_indices, epoch_batches, synthetic, Dataset, Splits, SyntheticSpec};
use crate::error::{DpkError, Result};
use crate::losses::{feature_loss, logits_kd_loss, total_loss, KdOptions, LogitsPair};
use crate::masking::{draw_masks, schedule_ratio, MaskStrategy, ScheduleKind, ScheduleState};
use crate::models::{ConvClassifier, ModelSpec};
use crate::seed::{derive_seed, mix, rng_for};
use crate::similarity::{cka_minibatch, ActivationMatrix, CosineProjector, SimilarityTrace, TraceEntry};
use crate::transform::{FeatureMap, StageTransform, TransformParams};

/// Which network a supervised run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
        }
    }

    fn spec(self, cfg: &DistillConfig) -> ModelSpec {
        match self {
            Role::Teacher => cfg.model.teacher_spec(),
            Role::Student => cfg.model.student_spec(),
        }
    }
}

/// Freshly initialised model; the same `(seed, role)` always gives the same weights.
pub fn init_model(cfg: &DistillConfig, role: Role, in_channels: usize) -> Result<ConvClassifier> {
    let mut rng = rng_for(cfg.seed, &format!("model.{}", role.name()));
    ConvClassifier::new(&role.spec(cfg), in_channels, cfg.data.classes, &mut rng)
}

pub fn load_data(cfg: &DistillConfig) -> Result<Splits> {
    match cfg.data.source {
        DataSource::Synthetic => synthetic(&SyntheticSpec {
            train: cfg.data.train,
            test: cfg.data.test,
            size: cfg.data.size,
            noise: cfg.data.noise,
            distractors: cfg.data.distractors,
            seed: cfg.data.seed,
        }),
        DataSource::Archive => {
            let path = |p: &Option<PathBuf>| p.clone().ok_or_else(|| DpkError::Config("archive path missing".into()));
            Ok(Splits {
                train: Dataset::from_archive(&path(&cfg.data.train_archive)?, cfg.data.classes)?,
                test: Dataset::from_archive(&path(&cfg.data.test_archive)?, cfg.data.classes)?,
            })
        }
    }
}

/// Teacher and student with the stages to distil.
#[derive(Debug)]
pub struct ModelPair {
    pub teacher: ConvClassifier,
    pub student: ConvClassifier,
    /// `(student stage, teacher stage)`, 1-based.
    pub stage_map: Vec<(usize, usize)>,
}

impl ModelPair {
    /// Freezes the teacher and checks that mapped stages agree spatially.
    pub fn new(teacher: ConvClassifier, student: ConvClassifier, stage_map: Vec<(usize, usize)>, h: usize, w: usize) -> Result<Self> {
        let ts = teacher.stage_shapes(h, w);
        let ss = student.stage_shapes(h, w);
        for &(s, t) in &stage_map {
            let (Some(a), Some(b)) = (ss.get(s.wrapping_sub(1)), ts.get(t.wrapping_sub(1))) else {
                return Err(DpkError::Config(format!("stage pair ({s}, {t}) out of range")));
            };
            if (a.1, a.2) != (b.1, b.2) {
                return Err(DpkError::Config(format!(
                    "student stage {s} is {}x{} but teacher stage {t} is {}x{}",
                    a.1, a.2, b.1, b.2
                )));
            }
        }
        teacher.vars().freeze();
        Ok(ModelPair {
            teacher,
            student,
            stage_map,
        })
    }

    pub fn teacher_checksum(&self) -> u64 {
        self.teacher.vars().checksum()
    }
}

/// Per-stage distillation state.
#[derive(Debug)]
pub struct StageRuntime {
    pub student_stage: usize,
    pub teacher_stage: usize,
    pub weight: f64,
    pub transform: StageTransform,
    pub schedule: ScheduleState,
}

/// Mutable state of a distillation run.
pub struct RunState {
    pub step: usize,
    pub epoch: usize,
    pub stages: Vec<StageRuntime>,
    pub trace: SimilarityTrace,
    pub seed: u64,
    pub mask_seed: u64,
    optimizer: Sgd<f32>,
    lr: LrSchedule,
    base_lr: f64,
    projector: CosineProjector,
    dump_dir: PathBuf,
}

fn lr_schedule(cfg: &DistillConfig, steps_per_epoch: usize) -> LrSchedule {
    match cfg.optim.decay {
        LrDecay::Constant => LrSchedule::Constant,
        LrDecay::Cosine => LrSchedule::Cosine {
            total_steps: cfg.optim.epochs * steps_per_epoch,
        },
        LrDecay::Step => LrSchedule::Step {
            milestones: cfg.optim.milestones.iter().map(|e| e * steps_per_epoch).collect(),
            gamma: cfg.optim.gamma,
        },
    }
}

/// Initial ratio handed to the schedule for a strategy.
fn schedule_pi0(cfg: &DistillConfig) -> f64 {
    match cfg.mask.strategy {
        MaskStrategy::Random | MaskStrategy::Block => cfg.mask.ratio,
        MaskStrategy::Grid => 0.75,
        _ => cfg.mask.pi0,
    }
}

impl RunState {
    pub fn new(cfg: &DistillConfig, pair: &ModelPair, input_hw: (usize, usize), steps_per_epoch: usize) -> Result<Self> {
        let (h, w) = input_hw;
        let ts = pair.teacher.stage_shapes(h, w);
        let ss = pair.student.stage_shapes(h, w);
        let mut rng = rng_for(cfg.seed, "transform");
        let mut stages = Vec::new();
        for (i, &(s, t)) in pair.stage_map.iter().enumerate() {
            let (c_t, th, tw) = ts[t - 1];
            let params = TransformParams::resolve(&cfg.transform.overrides(), c_t, th, tw, cfg.multi_stage())?;
            let transform = StageTransform::new(&format!("stage{s}"), params, cfg.transform.filler, ss[s - 1], ts[t - 1], &mut rng)?;
            let mut schedule = ScheduleState::new(cfg.mask.strategy.schedule(), schedule_pi0(cfg))?;
            schedule.decay = cfg.mask.decay;
            schedule.linear_decrement = cfg.mask.linear_decrement;
            schedule.ema = (cfg.schedule.ema > 0.0).then_some(cfg.schedule.ema);
            stages.push(StageRuntime {
                student_stage: s,
                teacher_stage: t,
                weight: cfg.distill.stage_weights.get(i).copied().unwrap_or(1.0),
                transform,
                schedule,
            });
        }
        let mut params: Vec<Var> = pair.student.vars().trainable();
        for st in &stages {
            params.extend(st.transform.vars().trainable());
        }
        Ok(RunState {
            step: 0,
            epoch: 0,
            stages,
            trace: SimilarityTrace::new(),
            seed: cfg.seed,
            mask_seed: cfg.mask_seed(),
            optimizer: Sgd::new(params, cfg.optim.lr, cfg.optim.momentum, cfg.optim.weight_decay),
            lr: lr_schedule(cfg, steps_per_epoch),
            base_lr: cfg.optim.lr,
            projector: CosineProjector::new(derive_seed(cfg.seed, "cosine")),
            dump_dir: cfg.out_dir.clone(),
        })
    }

    /// Sets the epoch seen by epoch-indexed schedules.
    pub fn begin_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
        for st in &mut self.stages {
            st.schedule.epoch = epoch;
        }
    }
}

/// Values of one distillation step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub cls: f64,
    pub logits: f64,
    /// Stage-weighted sum of feature losses.
    pub feat: f64,
    pub total: f64,
    /// Per mapped stage: applied ratio, CKA and cosine (NaN when unavailable).
    pub ratios: Vec<f64>,
    pub cka: Vec<f64>,
    pub cosine: Vec<f64>,
}

fn activations(b: usize, t: &Tensor) -> Result<ActivationMatrix> {
    ActivationMatrix::from_f32(b, t.data())
}

fn dump_nonfinite(dir: &Path, step: usize, tensors: &[(&str, &Tensor)]) -> PathBuf {
    let mut a = FeatureArchive::new();
    for (name, t) in tensors {
        if let Ok(at) = ArchiveTensor::new(*name, t.shape().to_vec(), TensorData::F32(t.to_vec())) {
            a.push(at);
        }
    }
    let path = dir.join(format!("nonfinite_step{step}.dpkf"));
    let written = fs::create_dir_all(dir).map_err(DpkError::from).and_then(|_| a.save(&path));
    if let Err(e) = written {
        log::error!("could not write diagnostic dump {}: {e}", path.display());
    }
    path
}

/// Ratio update, masking, stitching, losses and one optimiser step.
pub fn distill_step(images: &Tensor, labels: &[usize], pair: &ModelPair, cfg: &DistillConfig, state: &mut RunState) -> Result<StepMetrics> {
    let b = labels.len();
    let t_out = pair.teacher.forward(images);
    let s_out = pair.student.forward(images);
    let kind = cfg.mask.strategy.schedule();
    let pattern = cfg.mask.strategy.pattern();
    let mut feat_total = Tensor::scalar(0.0);
    let mut per_stage = Vec::with_capacity(state.stages.len());
    for st in &mut state.stages {
        let fs = &s_out.stages[st.student_stage - 1];
        let ft = t_out.stages[st.teacher_stage - 1].detach();
        if !fs.all_finite() || !ft.all_finite() {
            let dump = dump_nonfinite(&state.dump_dir, state.step, &[("student_features", fs), ("teacher_features", &ft)]);
            return Err(DpkError::NonFiniteLoss {
                step: state.step,
                stage: format!("stage{}", st.student_stage),
                dump,
            });
        }
        let x = activations(b, &ft)?;
        let y = activations(b, &fs.detach())?;
        let cka = cka_minibatch(std::slice::from_ref(&x), std::slice::from_ref(&y)).ok();
        let cosine = if kind == ScheduleKind::Cosine || x.p() == y.p() {
            state.projector.cosine_gap(&x, &y).ok()
        } else {
            None
        };
        let similarity = match kind {
            ScheduleKind::Cka => cka,
            ScheduleKind::Cosine => cosine,
            _ => None,
        };
        let ratio = schedule_ratio(&mut st.schedule, similarity);
        let feat = if cfg.kd.beta > 0.0 {
            let seed = mix(state.mask_seed, &[st.student_stage as u64]);
            let masks = draw_masks(pattern, st.transform.grid, ratio, seed, state.step, b);
            let fs_map = FeatureMap::new(fs.clone(), st.student_stage)?;
            let ft_map = FeatureMap::new(ft.clone(), st.teacher_stage)?;
            let pred = st.transform.forward(&fs_map, &ft_map, &masks)?;
            let loss = feature_loss(&pred, &ft_map, Some(&masks), cfg.kd.region)?;
            if !loss.all_finite() {
                let dump = dump_nonfinite(
                    &state.dump_dir,
                    state.step,
                    &[("student_features", fs), ("teacher_features", &ft), ("prediction", &pred.values)],
                );
                return Err(DpkError::NonFiniteLoss {
                    step: state.step,
                    stage: format!("stage{}", st.student_stage),
                    dump,
                });
            }
            feat_total = feat_total.add(&loss.scale(st.weight as f32));
            f64::from(loss.item())
        } else {
            0.0
        };
        per_stage.push((ratio, cka.unwrap_or(f64::NAN), cosine.unwrap_or(f64::NAN), feat));
    }
    let cls = s_out.logits.cross_entropy(labels);
    let pair_logits = LogitsPair::new(s_out.logits.clone(), t_out.logits.detach(), cfg.kd.tau)?;
    let kd = logits_kd_loss(
        &pair_logits,
        KdOptions {
            tau_squared: cfg.kd.tau_squared,
            direction: cfg.kd.kl_direction,
        },
    );
    let total = total_loss(&cls, &kd, &feat_total, &cfg.loss_weights());
    if !total.all_finite() {
        let dump = dump_nonfinite(
            &state.dump_dir,
            state.step,
            &[("student_logits", &s_out.logits), ("teacher_logits", &t_out.logits)],
        );
        return Err(DpkError::NonFiniteLoss {
            step: state.step,
            stage: "logits".into(),
            dump,
        });
    }
    let grads = total.backward();
    state.optimizer.lr = state.lr.rate(state.base_lr, state.step);
    state.optimizer.step(&grads);
    let metrics = StepMetrics {
        cls: f64::from(cls.item()),
        logits: f64::from(kd.item()),
        feat: f64::from(feat_total.item()),
        total: f64::from(total.item()),
        ratios: per_stage.iter().map(|p| p.0).collect(),
        cka: per_stage.iter().map(|p| p.1).collect(),
        cosine: per_stage.iter().map(|p| p.2).collect(),
    };
    for (st, &(ratio, cka, cosine, feat)) in state.stages.iter().zip(&per_stage) {
        state.trace.push(TraceEntry {
            step: state.step,
            epoch: state.epoch,
            stage: st.student_stage,
            cka,
            cosine,
            ratio,
            cls_loss: metrics.cls,
            logits_loss: metrics.logits,
            feat_loss: feat,
        })?;
    }
    state.step += 1;
    Ok(metrics)
}

/// Accuracy and mean losses of one evaluation or training epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Percentages.
    pub top1: f64,
    pub top5: f64,
    pub n_examples: usize,
    /// Mean classification loss on the evaluated set.
    pub cls_loss: f64,
    /// Final-epoch training means; NaN when not applicable.
    pub logits_loss: f64,
    pub feat_loss: f64,
}

/// Rank of the true class: classes scoring higher, or equal with a smaller index, come first.
pub fn true_class_rank(logits: &[f32], label: usize) -> usize {
    let z = logits[label];
    logits
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > z || (v == z && j < label))
        .count()
}

/// Top-1 and top-`min(5, classes)` percentages for a `B × classes` logit matrix.
pub fn topk_accuracy(logits: &[f32], classes: usize, labels: &[usize]) -> (f64, f64) {
    let k = classes.min(5);
    let (mut h1, mut hk) = (0usize, 0usize);
    for (row, &y) in logits.chunks(classes).zip(labels) {
        let r = true_class_rank(row, y);
        h1 += usize::from(r == 0);
        hk += usize::from(r < k);
    }
    let n = labels.len().max(1) as f64;
    (100.0 * h1 as f64 / n, 100.0 * hk as f64 / n)
}

pub const EVAL_BATCH: usize = 250;

/// Top-1/top-5 of a classifier. Runs only the classifier itself.
pub fn evaluate(model: &ConvClassifier, data: &Dataset) -> EvalReport {
    let order: Vec<usize> = (0..data.len()).collect();
    let (mut h1, mut h5, mut loss) = (0.0, 0.0, 0.0);
    for idx in chunk_indices(&order, EVAL_BATCH) {
        let (x, y) = data.batch(&idx);
        let z = model.logits(&x.detach());
        let (a, b) = topk_accuracy(z.data(), data.classes, &y);
        let n = y.len() as f64;
        h1 += a * n;
        h5 += b * n;
        loss += f64::from(z.cross_entropy(&y).item()) * n;
    }
    let n = data.len().max(1) as f64;
    EvalReport {
        top1: h1 / n,
        top5: h5 / n,
        n_examples: data.len(),
        cls_loss: loss / n,
        logits_loss: f64::NAN,
        feat_loss: f64::NAN,
    }
}

/// Result of a supervised run.
#[derive(Debug)]
pub struct BaselineOutput {
    pub model: ConvClassifier,
    pub initial: EvalReport,
    pub report: EvalReport,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Supervised training with the classification loss only.
pub fn train_baseline(cfg: &DistillConfig, role: Role, data: &Splits) -> Result<BaselineOutput> {
    let model = init_model(cfg, role, data.train.channels)?;
    let initial = evaluate(&model, &data.test);
    let steps = epoch_batches(data.train.len(), cfg.optim.batch_size, cfg.seed, 0).len();
    let schedule = lr_schedule(cfg, steps);
    let mut opt = Sgd::new(model.vars().trainable(), cfg.optim.lr, cfg.optim.momentum, cfg.optim.weight_decay);
    let mut step = 0;
    let mut epoch_losses = Vec::with_capacity(cfg.optim.epochs);
    for epoch in 0..cfg.optim.epochs {
        let mut sum = 0.0;
        let batches = epoch_batches(data.train.len(), cfg.optim.batch_size, cfg.seed, epoch);
        for idx in &batches {
            let (x, y) = data.train.batch(idx);
            let loss = model.logits(&x).cross_entropy(&y);
            if !loss.all_finite() {
                return Err(DpkError::NonFiniteLoss {
                    step,
                    stage: "classifier".into(),
                    dump: PathBuf::new(),
                });
            }
            sum += f64::from(loss.item());
            opt.lr = schedule.rate(cfg.optim.lr, step);
            opt.step(&loss.backward());
            step += 1;
        }
        let mean = sum / batches.len() as f64;
        log::info!("{} epoch {epoch}: loss {mean:.4}", role.name());
        epoch_losses.push(mean);
    }
    let mut report = evaluate(&model, &data.test);
    report.logits_loss = f64::NAN;
    report.feat_loss = f64::NAN;
    Ok(BaselineOutput {
        model,
        initial,
        report,
        epoch_losses,
    })
}

/// Result of a distillation run.
#[derive(Debug)]
pub struct DistillOutput {
    pub student: ConvClassifier,
    pub initial: EvalReport,
    pub report: EvalReport,
    pub trace: SimilarityTrace,
    pub teacher_checksum_before: u64,
    pub teacher_checksum_after: u64,
    /// Names of the transform parameters, none of which belong to the student.
    pub training_only: Vec<String>,
    pub steps: usize,
}

/// Distils a fresh student from `teacher` (whose weights are never modified).
pub fn distill(cfg: &DistillConfig, data: &Splits, teacher: ConvClassifier) -> Result<DistillOutput> {
    let student = init_model(cfg, Role::Student, data.train.channels)?;
    let stage_map = cfg.distill.stages.iter().map(|&s| (s, s)).collect();
    let pair = ModelPair::new(teacher, student, stage_map, data.train.height, data.train.width)?;
    let before = pair.teacher_checksum();
    let initial = evaluate(&pair.student, &data.test);
    let steps_per_epoch = epoch_batches(data.train.len(), cfg.optim.batch_size, cfg.seed, 0).len();
    let mut state = RunState::new(cfg, &pair, (data.train.height, data.train.width), steps_per_epoch)?;
    let (mut logits_mean, mut feat_mean) = (f64::NAN, f64::NAN);
    for epoch in 0..cfg.optim.epochs {
        state.begin_epoch(epoch);
        let batches = epoch_batches(data.train.len(), cfg.optim.batch_size, cfg.seed, epoch);
        let (mut cls, mut lg, mut ft, mut ratio) = (0.0, 0.0, 0.0, 0.0);
        for idx in &batches {
            let (x, y) = data.train.batch(idx);
            let m = distill_step(&x, &y, &pair, cfg, &mut state)?;
            cls += m.cls;
            lg += m.logits;
            ft += m.feat;
            ratio += m.ratios.iter().sum::<f64>() / m.ratios.len().max(1) as f64;
        }
        let n = batches.len() as f64;
        logits_mean = lg / n;
        feat_mean = ft / n;
        log::info!(
            "distill epoch {epoch}: cls {:.4} logits {:.4} feat {:.4} ratio {:.3}",
            cls / n,
            logits_mean,
            feat_mean,
            ratio / n
        );
    }
    let mut report = evaluate(&pair.student, &data.test);
    report.logits_loss = logits_mean;
    report.feat_loss = feat_mean;
    let after = pair.teacher_checksum();
    if before != after {
        return Err(DpkError::InvalidInput("teacher parameters changed during distillation".into()));
    }
    let training_only = state.stages.iter().flat_map(|s| s.transform.training_only_parameters()).collect();
    Ok(DistillOutput {
        student: pair.student,
        initial,
        report,
        trace: state.trace,
        teacher_checksum_before: before,
        teacher_checksum_after: after,
        training_only,
        steps: state.step,
    })
}

/// Loads the teacher named by `model.teacher_checkpoint`.
pub fn load_teacher(cfg: &DistillConfig, in_channels: usize) -> Result<ConvClassifier> {
    let path = &cfg.model.teacher_checkpoint;
    if !path.is_file() {
        return Err(DpkError::MissingTeacher(path.clone()));
    }
    let ck = Checkpoint::load(path)?;
    let teacher = init_model(cfg, Role::Teacher, in_channels)?;
    ck.restore(teacher.vars()).map_err(|e| {
        DpkError::Format(format!(
            "{}: {e} (does model.teacher_width match the checkpoint?)",
            path.display()
        ))
    })?;
    Ok(teacher)
}

fn write_report(path: &Path, report: &EvalReport, cfg: &DistillConfig) -> Result<()> {
    #[derive(Serialize)]
    struct ReportFile<'a> {
        seed: u64,
        config_hash: String,
        report: &'a EvalReport,
    }
    let text = toml::to_string(&ReportFile {
        seed: cfg.seed,
        config_hash: format!("{:016x}", cfg.hash()),
        report,
    })
    .map_err(|e| DpkError::Format(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

/// Paths written by [`run_baseline`] and [`run_distillation`].
pub fn checkpoint_path(cfg: &DistillConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(format!("{name}.dpkc"))
}

/// Supervised run persisted to `out_dir`: `<role>.dpkc` and `report.toml`.
pub fn run_baseline(cfg: &DistillConfig, role: Role) -> Result<BaselineOutput> {
    let data = load_data(cfg)?;
    let out = train_baseline(cfg, role, &data)?;
    fs::create_dir_all(&cfg.out_dir)?;
    Checkpoint::from_store(out.model.vars(), cfg.hash(), cfg.seed).save(&checkpoint_path(cfg, role.name()))?;
    write_report(&cfg.out_dir.join("report.toml"), &out.report, cfg)?;
    Ok(out)
}

/// Distillation run persisted to `out_dir`: `student.dpkc`, `trace.csv` and `report.toml`.
pub fn run_distillation(cfg: &DistillConfig) -> Result<DistillOutput> {
    let data = load_data(cfg)?;
    let teacher = load_teacher(cfg, data.train.channels)?;
    let out = distill(cfg, &data, teacher)?;
    persist_distillation(cfg, &out)?;
    Ok(out)
}

/// Writes `student.dpkc`, `trace.csv` and `report.toml` into `out_dir`.
pub fn persist_distillation(cfg: &DistillConfig, out: &DistillOutput) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)?;
    Checkpoint::from_store(out.student.vars(), cfg.hash(), cfg.seed).save(&checkpoint_path(cfg, "student"))?;
    fs::write(cfg.out_dir.join("trace.csv"), out.trace.to_csv())?;
    write_report(&cfg.out_dir.join("report.toml"), &out.report, cfg)
}
