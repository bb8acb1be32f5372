//! Explicit-loop reference implementations shared by the integration tests.
#![allow(dead_code)]

use dpk::similarity::ActivationMatrix;
use rand::Rng;

pub type Matrix = Vec<Vec<f64>>;

pub fn random_matrix<R: Rng>(rng: &mut R, n: usize, p: usize) -> Matrix {
    (0..n).map(|_| (0..p).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
}

pub fn to_activations(m: &Matrix) -> ActivationMatrix {
    let p = m[0].len();
    ActivationMatrix::from_rows(m.len(), p, m.iter().flatten().copied().collect()).unwrap()
}

/// `X Xᵀ` with the diagonal set to zero.
pub fn hollow_gram(x: &Matrix) -> Matrix {
    let n = x.len();
    let mut k = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                k[i][j] = (0..x[0].len()).map(|f| x[i][f] * x[j][f]).sum();
            }
        }
    }
    k
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let n = a.len();
    let m = b[0].len();
    let mut c = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for k in 0..b.len() {
                c[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    c
}

/// Unbiased HSIC on hollow kernels, written term by term.
pub fn hsic1_loops(kt: &Matrix, lt: &Matrix) -> f64 {
    let n = kt.len() as f64;
    let kl = matmul(kt, lt);
    let trace: f64 = (0..kt.len()).map(|i| kl[i][i]).sum();
    let sum_k: f64 = kt.iter().flatten().sum();
    let sum_l: f64 = lt.iter().flatten().sum();
    let sum_kl: f64 = kl.iter().flatten().sum();
    (trace + sum_k * sum_l / ((n - 1.0) * (n - 2.0)) - 2.0 / (n - 2.0) * sum_kl) / (n * (n - 3.0))
}

pub fn cka_loops(xs: &[Matrix], ys: &[Matrix]) -> f64 {
    let k = xs.len() as f64;
    let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (kx, ly) = (hollow_gram(x), hollow_gram(y));
        xy += hsic1_loops(&kx, &ly);
        xx += hsic1_loops(&kx, &kx);
        yy += hsic1_loops(&ly, &ly);
    }
    (xy / k) / ((xx / k).sqrt() * (yy / k).sqrt())
}

/// Random orthogonal `p × p` matrix by Gram–Schmidt.
pub fn random_orthogonal<R: Rng>(rng: &mut R, p: usize) -> Matrix {
    let mut q: Matrix = Vec::with_capacity(p);
    while q.len() < p {
        let mut v: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= d * ui;
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            q.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    q
}

pub fn scale(m: &Matrix, s: f64) -> Matrix {
    m.iter().map(|r| r.iter().map(|v| v * s).collect()).collect()
}

/// Attention-weighted foreground/background squared error, element by element.
/// Shapes: features `[b][c][h][w]` flattened row-major, mask and spatial
/// attention `[b][h][w]`, channel attention `[b][c]`.
#[allow(clippy::too_many_arguments)]
pub fn fgd_loops(
    dims: [usize; 4],
    teacher: &[f64],
    hybrid: &[f64],
    mask: &[f64],
    spatial: &[f64],
    channel: &[f64],
    w_f: f64,
    w_b: f64,
) -> (f64, f64) {
    let [b, c, h, w] = dims;
    let (mut fg, mut bg) = (0.0, 0.0);
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let f = ((bi * c + ci) * h + y) * w + x;
                    let s = (bi * h + y) * w + x;
                    let d = teacher[f] - hybrid[f];
                    let e = spatial[s] * channel[bi * c + ci] * d * d;
                    fg += mask[s] * e;
                    bg += (1.0 - mask[s]) * e;
                }
            }
        }
    }
    (w_f * fg, w_b * bg)
}

/// Batch-mean KL(p_t ‖ p_s) of temperature-softened rows, optionally times `τ²`.
pub fn kd_loops(student: &Matrix, teacher: &Matrix, tau: f64, tau_squared: bool) -> f64 {
    let softmax = |row: &[f64]| {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v / tau));
        let e: Vec<f64> = row.iter().map(|v| (v / tau - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect::<Vec<_>>()
    };
    let mut total = 0.0;
    for (s, t) in student.iter().zip(teacher) {
        let (ps, pt) = (softmax(s), softmax(t));
        total += pt.iter().zip(&ps).map(|(a, b)| a * (a / b).ln()).sum::<f64>();
    }
    let factor = if tau_squared { tau * tau } else { 1.0 };
    factor * total / student.len() as f64
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Small but complete distillation setup: 96 training images, batch 32, one epoch.
pub const TINY_TOML: &str = r#"
seed = 3

[data]
train = 96
test = 50

[optim]
epochs = 1
batch_size = 32

[transform]
dim = 16
encoder_blocks = 1
decoder_blocks = 1
heads = 2

[kd]
tau = 1.0
"#;

pub fn tiny_config(out_dir: &std::path::Path, overrides: &[(&str, &str)]) -> dpk::config::DistillConfig {
    let owned: Vec<(String, String)> = overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    let mut cfg = dpk::config::DistillConfig::from_toml_str(TINY_TOML, &owned).unwrap();
    cfg.out_dir = out_dir.to_path_buf();
    cfg
}
