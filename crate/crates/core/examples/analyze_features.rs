//! Offline CKA between two feature archives, as `dpk analyze-cka` does:
//! per-minibatch values sorted ascending, written as CSV and a heatmap.
//!
//! cargo run --release --example analyze_features

use std::path::Path;

use dpk::analysis::{analyze_cka, cka_csv};
use dpk::archive::{ArchiveTensor, FeatureArchive, TensorData};
use dpk::heatmap::save_png;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> dpk::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, p) = (12_800, 16);
    let teacher: Vec<f32> = (0..n * p).map(|_| rng.random::<f32>() - 0.5).collect();
    // student features agree with the teacher more on some examples than others
    let student: Vec<f32> = teacher
        .chunks(p)
        .enumerate()
        .flat_map(|(i, row)| {
            let agreement = (i % 97) as f32 / 96.0;
            row.iter().map(|&t| agreement * t + (1.0 - agreement) * (rng.random::<f32>() - 0.5)).collect::<Vec<_>>()
        })
        .collect();
    let archive = |v: Vec<f32>| -> dpk::Result<FeatureArchive> {
        let mut a = FeatureArchive::new();
        a.push(ArchiveTensor::new("stage4", vec![n, p], TensorData::F32(v))?);
        Ok(a)
    };
    let (s, t) = (archive(student)?, archive(teacher)?);

    let rows = analyze_cka(&s, &t, Some("stage4"), 32, 0)?;
    let values: Vec<f64> = rows.iter().map(|r| r.cka).collect();
    println!("{} batches: min {:.3}, median {:.3}, max {:.3}", values.len(), values[0], values[values.len() / 2], values[values.len() - 1]);

    let out = Path::new("runs/analysis");
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("cka.csv"), cka_csv(&rows, "stage4"))?;
    save_png(&out.join("cka_heatmap.png"), &values, 8)?;
    println!("wrote {}", out.display());
    Ok(())
}
