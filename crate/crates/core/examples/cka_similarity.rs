//! Minibatch CKA between a feature matrix and progressively noisier linear
//! views of it, and the masking ratio each value would drive.
//!
//! cargo run --release --example cka_similarity

use dpk::similarity::{cka_minibatch, dynamic_ratio, partition_batches, ActivationMatrix};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

fn main() -> dpk::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, p, q) = (512, 24, 40);
    let x = randn(n, p, &mut rng);
    let mixing = randn(p, q, &mut rng);
    let batches = partition_batches(n, 32);

    println!("{:>6} {:>8} {:>6}", "noise", "CKA", "ratio");
    for noise in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0] {
        let y = x.dot(&mixing) + randn(n, q, &mut rng) * noise;
        let (a, b) = (ActivationMatrix::new(x.clone())?, ActivationMatrix::new(y)?);
        let xs: Vec<_> = batches.iter().map(|r| a.rows(r.clone())).collect();
        let ys: Vec<_> = batches.iter().map(|r| b.rows(r.clone())).collect();
        let cka = cka_minibatch(&xs, &ys)?;
        println!("{noise:>6.1} {cka:>8.4} {:>6.3}", dynamic_ratio(cka));
    }
    Ok(())
}
