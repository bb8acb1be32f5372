//! Compares masking strategies and fixed ratios across seeds against one
//! teacher, writing per-run and summary tables. Run `train_teacher` first.
//!
//! cargo run --release --example ablate_strategies -- optim.epochs=3

use std::path::Path;

use dpk::ablation::{self, Sweep};
use dpk::config::{parse_override, DistillConfig};
use dpk::harness::load_data;

fn main() -> dpk::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut overrides = vec![("out_dir".to_string(), "runs/ablation".to_string())];
    for a in std::env::args().skip(1) {
        overrides.push(parse_override(&a)?);
    }
    let base = DistillConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/toy.toml"), &overrides)?;
    let sweeps = [Sweep::parse("mask.strategy=random,block,grid,cka")?, Sweep::parse("mask.strategy=random;mask.ratio=0.25,0.75")?];
    let runs = ablation::plan(&base, &sweeps, &[0, 1])?;
    let rows = ablation::run(&runs, &load_data(&base)?, false)?;
    println!("{:<40} {:>4} {:>8} {:>6}", "setting", "runs", "top-1", "std");
    for s in ablation::write_tables(&base.out_dir, &rows)? {
        println!("{:<40} {:>4} {:>8.2} {:>6.2}", s.setting, s.runs, s.mean_top1, s.std_top1);
    }
    Ok(())
}
