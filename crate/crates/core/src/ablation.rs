//! Configuration sweeps over one or more keys, repeated across seeds.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::{parse_override, DistillConfig};
use crate::data::Splits;
use crate::error::{DpkError, Result};
use crate::harness::{distill, load_teacher, persist_distillation};

/// Axes of one sweep: each key takes every listed value (cartesian product).
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub axes: Vec<(String, Vec<String>)>,
}

impl Sweep {
    /// Parses `key=v1,v2;other=v3`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut axes = Vec::new();
        for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = parse_override(part)?;
            let values: Vec<String> = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
            if values.is_empty() {
                return Err(DpkError::Validation(vec![format!("sweep over `{k}` lists no values")]));
            }
            axes.push((k, values));
        }
        if axes.is_empty() {
            return Err(DpkError::Validation(vec![format!("empty sweep `{spec}`")]));
        }
        Ok(Sweep { axes })
    }

    /// Every combination, in row-major order of the axes.
    pub fn settings(&self) -> Vec<Vec<(String, String)>> {
        let mut out: Vec<Vec<(String, String)>> = vec![Vec::new()];
        for (k, values) in &self.axes {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    values.iter().map(move |v| {
                        let mut p = prefix.clone();
                        p.push((k.clone(), v.clone()));
                        p
                    })
                })
                .collect();
        }
        out
    }
}

/// Label such as `mask.strategy=cka;kd.beta=0`.
pub fn label(setting: &[(String, String)]) -> String {
    setting.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
}

fn dir_name(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

/// One finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub setting: String,
    pub seed: u64,
    pub top1: f64,
    pub top5: f64,
}

/// Mean and sample standard deviation of one setting across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationSummary {
    pub setting: String,
    pub runs: usize,
    pub mean_top1: f64,
    pub std_top1: f64,
    pub mean_top5: f64,
}

/// A planned run with its fully validated configuration.
#[derive(Debug, Clone)]
pub struct PlannedRun {
    pub setting: String,
    pub config: DistillConfig,
}

/// Expands sweeps and seeds into validated configurations; fails before any
/// training if a key or value is invalid. Rows from separate sweeps are concatenated.
pub fn plan(base: &DistillConfig, sweeps: &[Sweep], seeds: &[u64]) -> Result<Vec<PlannedRun>> {
    let seeds = if seeds.is_empty() { vec![base.seed] } else { seeds.to_vec() };
    let mut runs = Vec::new();
    let mut errors = Vec::new();
    for sweep in sweeps {
        for setting in sweep.settings() {
            let name = label(&setting);
            let mut cfg = base.clone();
            for (k, v) in &setting {
                match cfg.with_override(k, v) {
                    Ok(c) => cfg = c,
                    Err(DpkError::Validation(e)) => errors.extend(e.into_iter().map(|m| format!("{name}: {m}"))),
                    Err(e) => return Err(e),
                }
            }
            for &seed in &seeds {
                let mut c = cfg.clone();
                c.seed = seed;
                c.out_dir = base.out_dir.join(dir_name(&name)).join(format!("seed{seed}"));
                runs.push(PlannedRun {
                    setting: name.clone(),
                    config: c,
                });
            }
        }
    }
    if errors.is_empty() {
        Ok(runs)
    } else {
        errors.dedup();
        Err(DpkError::Validation(errors))
    }
}

/// Runs every planned configuration against the teacher checkpoint each names.
pub fn run(runs: &[PlannedRun], data: &Splits, persist: bool) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(runs.len());
    for (i, r) in runs.iter().enumerate() {
        log::info!("ablation run {}/{}: {} seed {}", i + 1, runs.len(), r.setting, r.config.seed);
        let teacher = load_teacher(&r.config, data.train.channels)?;
        let out = distill(&r.config, data, teacher)?;
        if persist {
            persist_distillation(&r.config, &out)?;
        }
        rows.push(AblationRow {
            setting: r.setting.clone(),
            seed: r.config.seed,
            top1: out.report.top1,
            top5: out.report.top5,
        });
    }
    Ok(rows)
}

/// Per-setting aggregates, in first-appearance order.
pub fn summarize(rows: &[AblationRow]) -> Vec<AblationSummary> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.setting.as_str()) {
            order.push(&r.setting);
        }
    }
    order
        .into_iter()
        .map(|s| {
            let top1: Vec<f64> = rows.iter().filter(|r| r.setting == s).map(|r| r.top1).collect();
            let top5: Vec<f64> = rows.iter().filter(|r| r.setting == s).map(|r| r.top5).collect();
            let n = top1.len() as f64;
            let mean = top1.iter().sum::<f64>() / n;
            let var = if top1.len() > 1 {
                top1.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            AblationSummary {
                setting: s.to_string(),
                runs: top1.len(),
                mean_top1: mean,
                std_top1: var.sqrt(),
                mean_top5: top5.iter().sum::<f64>() / n,
            }
        })
        .collect()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn rows_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("setting,seed,top1,top5\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", csv_field(&r.setting), r.seed, r.top1, r.top5);
    }
    s
}

pub fn summary_csv(summary: &[AblationSummary]) -> String {
    let mut s = String::from("setting,runs,mean_top1,std_top1,mean_top5\n");
    for r in summary {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            csv_field(&r.setting),
            r.runs,
            r.mean_top1,
            r.std_top1,
            r.mean_top5
        );
    }
    s
}

/// Writes `ablation.csv` and `ablation_summary.csv` into `dir`.
pub fn write_tables(dir: &Path, rows: &[AblationRow]) -> Result<Vec<AblationSummary>> {
    fs::create_dir_all(dir)?;
    let summary = summarize(rows);
    fs::write(dir.join("ablation.csv"), rows_csv(rows))?;
    fs::write(dir.join("ablation_summary.csv"), summary_csv(&summary))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cartesian_settings() {
        let s = Sweep::parse("mask.strategy=random,block; kd.beta=0,0.2").unwrap();
        let labels: Vec<String> = s.settings().iter().map(|x| label(x)).collect();
        assert_eq!(
            labels,
            vec![
                "mask.strategy=random;kd.beta=0",
                "mask.strategy=random;kd.beta=0.2",
                "mask.strategy=block;kd.beta=0",
                "mask.strategy=block;kd.beta=0.2"
            ]
        );
        assert!(Sweep::parse("mask.ratio=").is_err());
        assert!(Sweep::parse("").is_err());
    }

    #[test]
    fn plan_validates_before_running() {
        let base = DistillConfig::default();
        let ok = plan(&base, &[Sweep::parse("mask.strategy=random,block,grid,cka").unwrap()], &[0, 1]).unwrap();
        assert_eq!(ok.len(), 8);
        assert_ne!(ok[0].config.out_dir, ok[1].config.out_dir);
        let err = plan(&base, &[Sweep::parse("mask.stratagy=cka").unwrap()], &[]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(plan(&base, &[Sweep::parse("mask.ratio=2").unwrap()], &[]).is_err());
    }

    #[test]
    fn summary_statistics() {
        let rows = vec![
            AblationRow { setting: "a".into(), seed: 0, top1: 80.0, top5: 99.0 },
            AblationRow { setting: "b".into(), seed: 0, top1: 70.0, top5: 90.0 },
            AblationRow { setting: "a".into(), seed: 1, top1: 82.0, top5: 98.0 },
        ];
        let s = summarize(&rows);
        assert_eq!(s[0].setting, "a");
        assert_eq!(s[0].mean_top1, 81.0);
        assert!((s[0].std_top1 - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(s[1].runs, 1);
        assert_eq!(csv_field("x;y=1,2"), "\"x;y=1,2\"");
    }
}
