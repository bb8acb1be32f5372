mod support;

use dpk::config::DistillConfig;
use dpk::data::{epoch_batches, Splits};
use dpk::harness::{
    distill, distill_step, evaluate, init_model, load_data, load_teacher, topk_accuracy, train_baseline, ModelPair, Role, RunState,
};
use dpk::losses::{feature_loss, logits_kd_loss, total_loss, KdOptions, LogitsPair};
use dpk::masking::draw_masks;
use dpk::seed::mix;
use dpk::transform::{invocation_count, FeatureMap};
use dpk::DpkError;
use dpk_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::tiny_config;

fn pair_for(cfg: &DistillConfig, data: &Splits) -> ModelPair {
    let teacher = init_model(cfg, Role::Teacher, data.train.channels).unwrap();
    let student = init_model(cfg, Role::Student, data.train.channels).unwrap();
    let map = cfg.distill.stages.iter().map(|&s| (s, s)).collect();
    ModelPair::new(teacher, student, map, data.train.height, data.train.width).unwrap()
}

/// Total loss of `step` on a batch, rebuilt from the recorded ratios.
fn replay_total(x: &Tensor, y: &[usize], pair: &ModelPair, cfg: &DistillConfig, state: &RunState, step: usize, ratios: &[f64]) -> f32 {
    let t = pair.teacher.forward(x);
    let s = pair.student.forward(x);
    let mut feat = Tensor::scalar(0.0);
    for (st, &ratio) in state.stages.iter().zip(ratios) {
        let seed = mix(state.mask_seed, &[st.student_stage as u64]);
        let masks = draw_masks(cfg.mask.strategy.pattern(), st.transform.grid, ratio, seed, step, y.len());
        let fs = FeatureMap::new(s.stages[st.student_stage - 1].clone(), st.student_stage).unwrap();
        let ft = FeatureMap::new(t.stages[st.teacher_stage - 1].detach(), st.teacher_stage).unwrap();
        let pred = st.transform.forward(&fs, &ft, &masks).unwrap();
        let loss = feature_loss(&pred, &ft, Some(&masks), cfg.kd.region).unwrap();
        feat = feat.add(&loss.scale(st.weight as f32));
    }
    let kd = logits_kd_loss(
        &LogitsPair::new(s.logits.clone(), t.logits.detach(), cfg.kd.tau).unwrap(),
        KdOptions {
            tau_squared: cfg.kd.tau_squared,
            direction: cfg.kd.kl_direction,
        },
    );
    total_loss(&s.logits.cross_entropy(y), &kd, &feat, &cfg.loss_weights()).item()
}

#[test]
fn one_step_reduces_the_reevaluated_loss() {
    let dir = tempfile::tempdir().unwrap();
    for strategy in ["cka", "random", "block", "grid"] {
        let cfg = tiny_config(dir.path(), &[("optim.lr", "1e-3"), ("mask.strategy", strategy)]);
        let data = load_data(&cfg).unwrap();
        let pair = pair_for(&cfg, &data);
        let mut state = RunState::new(&cfg, &pair, (32, 32), 3).unwrap();
        let (x, y) = data.train.batch(&(0..32).collect::<Vec<_>>());
        let m = distill_step(&x, &y, &pair, &cfg, &mut state).unwrap();
        let recorded: Vec<f64> = state.trace.entries().iter().map(|e| e.ratio).collect();
        assert_eq!(recorded, m.ratios);
        // the schedule already moved on; replay step 0's masks from the recorded ratio
        let after = replay_total(&x, &y, &pair, &cfg, &state, 0, &recorded);
        assert!(f64::from(after) < m.total, "{strategy}: {} -> {after}", m.total);
    }
}

#[test]
fn recorded_ratio_replays_the_applied_masks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), &[("optim.lr", "1e-30")]);
    let data = load_data(&cfg).unwrap();
    let pair = pair_for(&cfg, &data);
    let mut state = RunState::new(&cfg, &pair, (32, 32), 3).unwrap();
    let (x, y) = data.train.batch(&(0..32).collect::<Vec<_>>());
    let m = distill_step(&x, &y, &pair, &cfg, &mut state).unwrap();
    let replayed = replay_total(&x, &y, &pair, &cfg, &state, 0, &m.ratios);
    assert_eq!(f64::from(replayed), m.total);
}

#[test]
fn zero_kd_weights_reproduce_the_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), &[("kd.alpha", "0"), ("kd.beta", "0"), ("optim.epochs", "2")]);
    let data = load_data(&cfg).unwrap();
    let baseline = train_baseline(&cfg, Role::Student, &data).unwrap();
    let teacher = init_model(&cfg, Role::Teacher, 3).unwrap();
    let out = distill(&cfg, &data, teacher).unwrap();
    assert_eq!(out.student.vars().checksum(), baseline.model.vars().checksum());
    assert_eq!(out.report.top1, baseline.report.top1);
    assert!(out.trace.entries().iter().all(|e| e.feat_loss == 0.0));
}

#[test]
fn zero_epochs_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), &[("optim.epochs", "0")]);
    let data = load_data(&cfg).unwrap();
    let fresh = init_model(&cfg, Role::Student, 3).unwrap();
    let out = distill(&cfg, &data, init_model(&cfg, Role::Teacher, 3).unwrap()).unwrap();
    assert_eq!(out.student.vars().checksum(), fresh.vars().checksum());
    assert_eq!(out.report.top1, out.initial.top1);
    assert_eq!(out.report.top5, out.initial.top5);
    assert!(out.trace.is_empty());
    let base = train_baseline(&cfg, Role::Teacher, &data).unwrap();
    let key = |r: &dpk::harness::EvalReport| (r.top1, r.top5, r.cls_loss, r.n_examples);
    assert_eq!(key(&base.report), key(&base.initial));
}

#[test]
fn zero_beta_leaves_the_transform_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), &[("kd.beta", "0")]);
    let data = load_data(&cfg).unwrap();
    let pair = pair_for(&cfg, &data);
    let mut state = RunState::new(&cfg, &pair, (32, 32), 3).unwrap();
    let before = state.stages[0].transform.vars().checksum();
    let calls = invocation_count();
    for idx in epoch_batches(data.train.len(), 32, cfg.seed, 0) {
        let (x, y) = data.train.batch(&idx);
        let m = distill_step(&x, &y, &pair, &cfg, &mut state).unwrap();
        assert_eq!(m.feat, 0.0);
    }
    assert_eq!(invocation_count(), calls);
    assert_eq!(state.stages[0].transform.vars().checksum(), before);
}

#[test]
fn teacher_is_frozen_and_inference_skips_the_transform() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), &[("optim.epochs", "2")]);
    let data = load_data(&cfg).unwrap();
    let teacher = init_model(&cfg, Role::Teacher, 3).unwrap();
    let reference = teacher.vars().checksum();
    let out = distill(&cfg, &data, teacher).unwrap();
    assert_eq!(out.teacher_checksum_before, reference);
    assert_eq!(out.teacher_checksum_after, reference);
    assert!(!out.training_only.is_empty());
    assert!(out.training_only.iter().all(|n| out.student.vars().get(n).is_none()));
    let calls = invocation_count();
    let again = evaluate(&out.student, &data.test);
    assert_eq!(invocation_count(), calls);
    assert_eq!((again.top1, again.top5, again.cls_loss), (out.report.top1, out.report.top5, out.report.cls_loss));
}

#[test]
fn runs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), &[("distill.stages", "[3, 4]"), ("distill.stage_weights", "[0.5, 1.0]")]);
    let data = load_data(&cfg).unwrap();
    let a = distill(&cfg, &data, init_model(&cfg, Role::Teacher, 3).unwrap()).unwrap();
    let b = distill(&cfg, &data, init_model(&cfg, Role::Teacher, 3).unwrap()).unwrap();
    assert_eq!(a.trace.to_csv(), b.trace.to_csv());
    assert_eq!(a.report.top1, b.report.top1);
    assert_eq!(a.trace.len(), a.steps * 2);
    let c = distill(&tiny_config(dir.path(), &[("seed", "4")]), &data, init_model(&cfg, Role::Teacher, 3).unwrap()).unwrap();
    assert_ne!(a.trace.to_csv(), c.trace.to_csv());
}

#[test]
fn every_strategy_variant_and_filler_runs() {
    let dir = tempfile::tempdir().unwrap();
    let settings: &[&[(&str, &str)]] = &[
        &[("mask.strategy", "random")],
        &[("mask.strategy", "block")],
        &[("mask.strategy", "grid")],
        &[("mask.strategy", "exponential")],
        &[("mask.strategy", "linear"), ("mask.linear_decrement", "0.1")],
        &[("mask.strategy", "cosine")],
        &[("transform.variant", "mlp_decoder")],
        &[("transform.variant", "conv")],
        &[("transform.filler", "zero")],
        &[("transform.filler", "learnable")],
        &[("kd.region", "non_masked")],
        &[("kd.kl_direction", "student_teacher"), ("kd.tau_squared", "false")],
        &[("schedule.ema", "0.9")],
        &[("model.teacher_width", "2.0")],
        &[("distill.stages", "[2, 3, 4]"), ("distill.stage_weights", "[1, 1, 1]")],
        &[("optim.decay", "step"), ("optim.milestones", "[1]")],
    ];
    for s in settings {
        let cfg = tiny_config(dir.path(), s);
        let data = load_data(&cfg).unwrap();
        let out = distill(&cfg, &data, init_model(&cfg, Role::Teacher, 3).unwrap()).unwrap_or_else(|e| panic!("{s:?}: {e}"));
        assert_eq!(out.trace.len(), out.steps * cfg.distill.stages.len(), "{s:?}");
        assert!(out.trace.entries().iter().all(|e| e.feat_loss.is_finite() && e.feat_loss > 0.0), "{s:?}");
    }
}

#[test]
fn baseline_loss_falls_after_one_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), &[("data.train", "5000"), ("data.test", "500"), ("optim.batch_size", "64")]);
    let data = load_data(&cfg).unwrap();
    let out = train_baseline(&cfg, Role::Student, &data).unwrap();
    assert!(out.report.cls_loss < out.initial.cls_loss, "{:?} vs {:?}", out.report, out.initial);
    assert_eq!(out.epoch_losses.len(), 1);
}

#[test]
fn missing_teacher_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path(), &[]);
    cfg.model.teacher_checkpoint = dir.path().join("nowhere/teacher.dpkc");
    let err = load_teacher(&cfg, 3).unwrap_err();
    assert!(matches!(&err, DpkError::MissingTeacher(p) if p == &cfg.model.teacher_checkpoint));
    assert!(err.to_string().contains("nowhere/teacher.dpkc"));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn exploding_run_dumps_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), &[("optim.lr", "1e12"), ("optim.epochs", "3"), ("optim.decay", "constant")]);
    let data = load_data(&cfg).unwrap();
    match distill(&cfg, &data, init_model(&cfg, Role::Teacher, 3).unwrap()) {
        Err(DpkError::NonFiniteLoss { dump, .. }) => {
            let archive = dpk::archive::FeatureArchive::load(&dump).unwrap();
            assert!(!archive.tensors.is_empty());
        }
        other => panic!("expected a non-finite loss, got {other:?}"),
    }
}

#[test]
fn topk_matches_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let classes = 10;
    let logits: Vec<f32> = (0..100 * classes).map(|_| (rng.random_range(0..6) as f32) * 0.5).collect();
    let labels: Vec<usize> = (0..100).map(|_| rng.random_range(0..classes)).collect();
    let (mut h1, mut h5) = (0, 0);
    for (row, &y) in logits.chunks(classes).zip(&labels) {
        let mut order: Vec<usize> = (0..classes).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        h1 += usize::from(order[0] == y);
        h5 += usize::from(order[..5].contains(&y));
    }
    let (t1, t5) = topk_accuracy(&logits, classes, &labels);
    assert_eq!((t1, t5), (h1 as f64, h5 as f64));
    assert!(t5 >= t1);
}
