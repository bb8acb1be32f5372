//! Trains the width-1.0 teacher on the bundled synthetic dataset.
//! Extra arguments are `key=value` overrides.
//!
//! cargo run --release --example train_teacher -- optim.epochs=5 out_dir=runs/teacher

use std::path::Path;

use dpk::config::{parse_override, DistillConfig};
use dpk::harness::{checkpoint_path, run_baseline, Role};

fn main() -> dpk::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let overrides = std::env::args().skip(1).map(|a| parse_override(&a)).collect::<dpk::Result<Vec<_>>>()?;
    let cfg = DistillConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/teacher.toml"), &overrides)?;
    let out = run_baseline(&cfg, Role::Teacher)?;
    for (epoch, loss) in out.epoch_losses.iter().enumerate() {
        println!("epoch {epoch:>2}: train loss {loss:.4}");
    }
    println!(
        "teacher top-1 {:.2}% top-5 {:.2}% (initial {:.2}%) -> {}",
        out.report.top1,
        out.report.top5,
        out.initial.top1,
        checkpoint_path(&cfg, "teacher").display()
    );
    Ok(())
}
