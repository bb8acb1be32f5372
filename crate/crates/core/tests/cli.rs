mod support;

use std::fs;
use std::path::{Path, PathBuf};

use dpk::archive::{ArchiveTensor, FeatureArchive, TensorData};
use dpk::cli::main_with_args;
use dpk::config::DistillConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::*;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    /// Writes the tiny config and trains a one-epoch teacher next to it.
    fn with_teacher() -> Self {
        let ws = Workspace {
            dir: tempfile::tempdir().unwrap(),
        };
        let teacher = format!("[model]\nteacher_checkpoint = \"{}\"\n", ws.path("teacher/teacher.dpkc").display());
        fs::write(ws.path("tiny.toml"), TINY_TOML.replace("[optim]", &format!("{teacher}\n[optim]"))).unwrap();
        assert_eq!(ws.run(&["train", "--out", ws.str("teacher")]), 0);
        ws
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn str(&self, rel: &str) -> &'static str {
        Box::leak(self.path(rel).to_str().unwrap().to_string().into_boxed_str())
    }

    /// Runs a config-taking subcommand against the tiny config.
    fn run(&self, args: &[&str]) -> i32 {
        let mut full = vec!["dpk", args[0], "--config", self.str("tiny.toml")];
        full.extend_from_slice(&args[1..]);
        main_with_args(full)
    }

    fn read(&self, rel: &str) -> String {
        fs::read_to_string(self.path(rel)).unwrap()
    }
}

fn column(csv: &str, name: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let idx = lines.next().unwrap().split(',').position(|c| c == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().to_string()).collect()
}

#[test]
fn train_and_distill_write_their_artifacts() {
    let ws = Workspace::with_teacher();
    assert!(ws.path("teacher/teacher.dpkc").is_file());
    assert!(ws.read("teacher/report.toml").contains("top1"));

    assert_eq!(ws.run(&["distill", "--out", ws.str("a"), "--override", "distill.stages=[3,4]", "--override", "distill.stage_weights=[1,1]"]), 0);
    let trace = ws.read("a/trace.csv");
    assert_eq!(trace.lines().next().unwrap(), "step,stage,cka,cosine,ratio,cls_loss,logits_loss,feat_loss");
    // 96 images at batch 32 for one epoch, two stages
    assert_eq!(trace.lines().count() - 1, 3 * 2);
    assert!(ws.path("a/student.dpkc").is_file());
    assert!(ws.read("a/report.toml").contains("seed = 3"));

    assert_eq!(ws.run(&["distill", "--out", ws.str("b"), "--seed", "11"]), 0);
    assert!(ws.read("b/report.toml").contains("seed = 11"));
}

#[test]
fn identical_runs_give_identical_bytes() {
    let ws = Workspace::with_teacher();
    assert_eq!(ws.run(&["distill", "--out", ws.str("a")]), 0);
    assert_eq!(ws.run(&["distill", "--out", ws.str("b")]), 0);
    assert_eq!(fs::read(ws.path("a/trace.csv")).unwrap(), fs::read(ws.path("b/trace.csv")).unwrap());
    assert_eq!(fs::read(ws.path("a/student.dpkc")).unwrap(), fs::read(ws.path("b/student.dpkc")).unwrap());
    // rerunning into the same directory overwrites deterministically
    assert_eq!(ws.run(&["distill", "--out", ws.str("a")]), 0);
    assert_eq!(fs::read(ws.path("a/trace.csv")).unwrap(), fs::read(ws.path("b/trace.csv")).unwrap());
}

#[test]
fn zero_beta_zeroes_the_feature_column() {
    let ws = Workspace::with_teacher();
    assert_eq!(ws.run(&["distill", "--out", ws.str("a"), "--override", "kd.beta=0"]), 0);
    let feat = column(&ws.read("a/trace.csv"), "feat_loss");
    assert!(!feat.is_empty());
    assert!(feat.iter().all(|v| v.parse::<f64>().unwrap() == 0.0));
}

#[test]
fn validation_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "seed = 1\n\n[mask]\nstratagy = \"cka\"\nratio = 1.5\n").unwrap();
    let err = DistillConfig::load(&bad, &[]).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("line 4") && msg.contains("mask.stratagy"), "{msg}");
    assert_eq!(err.exit_code(), 2);
    assert_eq!(main_with_args(["dpk", "train", "--config", bad.to_str().unwrap()]), 2);

    let good = dir.path().join("good.toml");
    fs::write(&good, TINY_TOML).unwrap();
    let cfg = good.to_str().unwrap();
    assert_eq!(main_with_args(["dpk", "distill", "--config", cfg, "--override", "kd.betta=0"]), 2);
    assert_eq!(main_with_args(["dpk", "distill", "--config", cfg, "--override", "kd.beta=abc"]), 2);
    assert_eq!(main_with_args(["dpk", "distill", "--config", cfg, "--override", "novalue"]), 2);
    assert_eq!(main_with_args(["dpk", "ablate", "--config", cfg, "--sweep", "mask.stratagy=cka"]), 2);
    assert_eq!(main_with_args(["dpk", "distill"]), 2);
    assert_eq!(main_with_args(["dpk", "frobnicate"]), 2);
}

#[test]
fn missing_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, TINY_TOML).unwrap();
    let missing = dir.path().join("no/teacher.dpkc");
    let code = main_with_args([
        "dpk",
        "distill",
        "--config",
        cfg.to_str().unwrap(),
        "--override",
        &format!("model.teacher_checkpoint={}", missing.display()),
    ]);
    assert_eq!(code, 3);
    assert_eq!(main_with_args(["dpk", "train", "--config", dir.path().join("absent.toml").to_str().unwrap()]), 2);
}

#[test]
fn zero_epoch_training_reports_the_initial_model() {
    let ws = Workspace::with_teacher();
    assert_eq!(ws.run(&["train", "--role", "student", "--out", ws.str("s"), "--override", "optim.epochs=0"]), 0);
    let report: toml::Table = ws.read("s/report.toml").parse().unwrap();
    let cfg = tiny_config(&ws.path("s"), &[]);
    let data = dpk::harness::load_data(&cfg).unwrap();
    let fresh = dpk::harness::init_model(&cfg, dpk::harness::Role::Student, 3).unwrap();
    let expected = dpk::harness::evaluate(&fresh, &data.test);
    assert_eq!(report["report"]["top1"].as_float().unwrap(), expected.top1);
}

#[test]
fn ablation_rows_and_degenerate_sweep() {
    let ws = Workspace::with_teacher();
    assert_eq!(ws.run(&["distill", "--out", ws.str("single")]), 0);
    assert_eq!(ws.run(&["ablate", "--out", ws.str("abl1"), "--sweep", "mask.strategy=cka"]), 0);
    assert_eq!(ws.read("abl1/mask.strategy_cka/seed3/trace.csv"), ws.read("single/trace.csv"));
    assert_eq!(
        fs::read(ws.path("abl1/mask.strategy_cka/seed3/student.dpkc")).unwrap(),
        fs::read(ws.path("single/student.dpkc")).unwrap()
    );

    assert_eq!(ws.run(&["ablate", "--out", ws.str("abl4"), "--sweep", "mask.strategy=random,block,grid,cka", "--no-persist"]), 0);
    let rows = ws.read("abl4/ablation.csv");
    assert_eq!(rows.lines().count() - 1, 4);
    assert_eq!(ws.read("abl4/ablation_summary.csv").lines().count() - 1, 4);

    assert_eq!(
        ws.run(&["ablate", "--out", ws.str("abl2"), "--sweep", "mask.ratio=0.15,0.95", "--seeds", "1,2", "--no-persist"]),
        0
    );
    let summary = ws.read("abl2/ablation_summary.csv");
    assert_eq!(column(&summary, "runs"), vec!["2", "2"]);
}

fn save_features(path: &Path, n: usize, p: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..n * p).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut a = FeatureArchive::new();
    a.push(ArchiveTensor::new("f", vec![n, p], TensorData::F64(v.clone())).unwrap());
    a.save(path).unwrap();
    v
}

fn analyze(a: &Path, b: &Path, batch: &str, out: &Path) -> i32 {
    main_with_args([
        "dpk",
        "analyze-cka",
        "--a",
        a.to_str().unwrap(),
        "--b",
        b.to_str().unwrap(),
        "--batch-size",
        batch,
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn analyze_cka_self_comparison_and_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let (pa, pb) = (dir.path().join("a.dpkf"), dir.path().join("b.dpkf"));
    let va = save_features(&pa, 8, 3, 1);
    let vb = save_features(&pb, 8, 5, 2);
    let before = (fs::read(&pa).unwrap(), fs::read(&pb).unwrap());

    assert_eq!(analyze(&pa, &pa, "4", &dir.path().join("self")), 0);
    let selfs = column(&fs::read_to_string(dir.path().join("self/cka.csv")).unwrap(), "cka");
    assert_eq!(selfs.len(), 2);
    assert!(selfs.iter().all(|v| (v.parse::<f64>().unwrap() - 1.0).abs() < 1e-8));

    assert_eq!(analyze(&pa, &pb, "4", &dir.path().join("ab")), 0);
    let csv = fs::read_to_string(dir.path().join("ab/cka.csv")).unwrap();
    let rows: Vec<(usize, f64)> = column(&csv, "step")
        .iter()
        .zip(column(&csv, "cka"))
        .map(|(s, c)| (s.parse().unwrap(), c.parse().unwrap()))
        .collect();
    let rows_of = |v: &[f64], p: usize, batch: usize| -> Matrix { (0..4).map(|i| v[(batch * 4 + i) * p..(batch * 4 + i + 1) * p].to_vec()).collect() };
    for (batch, cka) in rows {
        let want = cka_loops(&[rows_of(&va, 3, batch)], &[rows_of(&vb, 5, batch)]);
        assert!(relative_error(cka, want) < 1e-10, "batch {batch}: {cka} vs {want}");
    }
    assert_eq!((fs::read(&pa).unwrap(), fs::read(&pb).unwrap()), before);

    let pc = dir.path().join("c.dpkf");
    save_features(&pc, 9, 3, 3);
    assert_eq!(analyze(&pa, &pc, "4", &dir.path().join("bad")), 3);
    assert_eq!(analyze(&pa, &pa, "3", &dir.path().join("bad")), 3);
}
