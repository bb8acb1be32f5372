//! Distils the width-0.5 student from a trained teacher with the CKA-driven
//! mask ratio, then prints per-epoch similarity and ratio. Run
//! `train_teacher` first; extra arguments are `key=value` overrides.
//!
//! cargo run --release --example distill_toy -- optim.epochs=5

use std::path::Path;

use dpk::config::{parse_override, DistillConfig};
use dpk::harness::run_distillation;

fn main() -> dpk::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let overrides = std::env::args().skip(1).map(|a| parse_override(&a)).collect::<dpk::Result<Vec<_>>>()?;
    let cfg = DistillConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/toy.toml"), &overrides)?;
    let out = run_distillation(&cfg)?;
    println!("{:>5} {:>5} {:>8} {:>7}", "epoch", "stage", "CKA", "ratio");
    for e in out.trace.epoch_means() {
        println!("{:>5} {:>5} {:>8.4} {:>7.3}", e.epoch, e.stage, e.mean_cka, e.mean_ratio);
    }
    println!(
        "student top-1 {:.2}% after {} steps; teacher checksum {:016x} unchanged -> {}",
        out.report.top1,
        out.steps,
        out.teacher_checksum_after,
        cfg.out_dir.display()
    );
    Ok(())
}
