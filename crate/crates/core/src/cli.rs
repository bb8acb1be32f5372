//! The `dpk` command line: `train`, `distill`, `ablate` and `analyze-cka`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::ablation::{self, Sweep};
use crate::analysis::{analyze_cka, cka_csv};
use crate::archive::FeatureArchive;
use crate::config::{parse_override, DistillConfig};
use crate::error::Result;
use crate::harness::{load_data, run_baseline, run_distillation, Role};
use crate::heatmap;

#[derive(Debug, Parser)]
#[command(name = "dpk", version, about = "Dynamic prior-knowledge distillation on toy models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Supervised training of a teacher or a scratch student.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = RoleArg::Teacher)]
        role: RoleArg,
    },
    /// Distil a student from the configured teacher checkpoint.
    Distill {
        #[command(flatten)]
        common: Common,
    },
    /// One distillation run per sweep setting and seed, plus summary tables.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// `key=v1,v2[;key2=...]`; repeat the flag to append independent sweeps.
        #[arg(long = "sweep", required = true)]
        sweeps: Vec<String>,
        /// Comma-separated seeds; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Skip per-run checkpoints and traces.
        #[arg(long)]
        no_persist: bool,
    },
    /// Per-minibatch CKA between two feature archives.
    AnalyzeCka {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Tensor to compare; defaults to the first tensor of each archive.
        #[arg(long)]
        tensor: Option<String>,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "cka_analysis")]
        out: PathBuf,
        /// Heatmap cell size in pixels.
        #[arg(long, default_value_t = 12)]
        cell: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RoleArg {
    Teacher,
    Student,
}

impl From<RoleArg> for Role {
    fn from(r: RoleArg) -> Self {
        match r {
            RoleArg::Teacher => Role::Teacher,
            RoleArg::Student => Role::Student,
        }
    }
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// `key=value`, repeatable; applied after the file.
    #[arg(long = "override")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Common {
    pub fn load(&self) -> Result<DistillConfig> {
        let overrides = self.overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
        let mut cfg = DistillConfig::load(&self.config, &overrides)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        Ok(cfg)
    }
}

pub fn cmd_train(common: &Common, role: Role) -> Result<()> {
    let cfg = common.load()?;
    let out = run_baseline(&cfg, role)?;
    println!(
        "{} top1 {:.2} top5 {:.2} ({} test examples) -> {}",
        role.name(),
        out.report.top1,
        out.report.top5,
        out.report.n_examples,
        cfg.out_dir.display()
    );
    Ok(())
}

pub fn cmd_distill(common: &Common) -> Result<()> {
    let cfg = common.load()?;
    let out = run_distillation(&cfg)?;
    println!(
        "student top1 {:.2} top5 {:.2}, {} steps, {} trace rows -> {}",
        out.report.top1,
        out.report.top5,
        out.steps,
        out.trace.len(),
        cfg.out_dir.display()
    );
    Ok(())
}

pub fn cmd_ablate(common: &Common, sweeps: &[String], seeds: &[u64], persist: bool) -> Result<()> {
    let cfg = common.load()?;
    let sweeps = sweeps.iter().map(|s| Sweep::parse(s)).collect::<Result<Vec<_>>>()?;
    let runs = ablation::plan(&cfg, &sweeps, seeds)?;
    let data = load_data(&cfg)?;
    let rows = ablation::run(&runs, &data, persist)?;
    let summary = ablation::write_tables(&cfg.out_dir, &rows)?;
    for s in &summary {
        println!("{:<40} top1 {:6.2} ± {:.2} over {} run(s)", s.setting, s.mean_top1, s.std_top1, s.runs);
    }
    Ok(())
}

pub fn cmd_analyze_cka(a: &Path, b: &Path, tensor: Option<&str>, batch_size: usize, seed: u64, out: &Path, cell: usize) -> Result<()> {
    let fa = FeatureArchive::load(a)?;
    let fb = FeatureArchive::load(b)?;
    let rows = analyze_cka(&fa, &fb, tensor, batch_size, seed)?;
    let stage = tensor
        .map(str::to_string)
        .or_else(|| fa.tensors.first().map(|t| t.name.clone()))
        .unwrap_or_default();
    fs::create_dir_all(out)?;
    fs::write(out.join("cka.csv"), cka_csv(&rows, &stage))?;
    let values: Vec<f64> = rows.iter().map(|r| r.cka).collect();
    heatmap::save_png(&out.join("cka_heatmap.png"), &values, cell.max(1))?;
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let mean = finite.iter().sum::<f64>() / finite.len().max(1) as f64;
    println!("{} CKA values (mean {mean:.4}) -> {}", values.len(), out.display());
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, role } => cmd_train(&common, role.into()),
        Command::Distill { common } => cmd_distill(&common),
        Command::Ablate {
            common,
            sweeps,
            seeds,
            no_persist,
        } => cmd_ablate(&common, &sweeps, &seeds, !no_persist),
        Command::AnalyzeCka {
            a,
            b,
            tensor,
            batch_size,
            seed,
            out,
            cell,
        } => cmd_analyze_cka(&a, &b, tensor.as_deref(), batch_size, seed, &out, cell),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
