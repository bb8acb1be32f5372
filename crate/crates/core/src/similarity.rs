//! Representation similarity: linear Gram matrices, the unbiased HSIC
//! estimator, minibatch CKA, cosine similarity, and the mapping from a
//! similarity estimate to a mask ratio.
//!
//! All arithmetic is done in `f64`, whatever precision the network runs in.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::ops::Range;

use ndarray::{Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{DpkError, Result};

/// Smallest batch the HSIC estimator accepts: its denominators include `n - 3`.
pub const MIN_HSIC_BATCH: usize = 4;

/// `n` examples by `p` features. Entries are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix(Array2<f64>);

impl ActivationMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DpkError::InvalidInput("activation matrix has non-finite entries".into()));
        }
        Ok(ActivationMatrix(values))
    }

    /// Row-major `n × p` values.
    pub fn from_rows(n: usize, p: usize, values: Vec<f64>) -> Result<Self> {
        let arr = Array2::from_shape_vec((n, p), values)
            .map_err(|e| DpkError::Shape(format!("activation matrix {n}x{p}: {e}")))?;
        Self::new(arr)
    }

    /// Flattens a batch of `f32` activations; every example becomes one row.
    pub fn from_f32(n: usize, values: &[f32]) -> Result<Self> {
        if n == 0 || values.len() % n != 0 {
            return Err(DpkError::Shape(format!(
                "{} values cannot be split into {n} examples",
                values.len()
            )));
        }
        let p = values.len() / n;
        Self::from_rows(n, p, values.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn p(&self) -> usize {
        self.0.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    /// Rows `range` as a new matrix.
    pub fn rows(&self, range: Range<usize>) -> Self {
        ActivationMatrix(self.0.slice(ndarray::s![range, ..]).to_owned())
    }
}

/// Symmetric `n × n` kernel matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix(Array2<f64>);

impl GramMatrix {
    /// Wraps a precomputed kernel matrix after checking it is square and
    /// symmetric to 1e-9 relative tolerance.
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (r, c) = values.dim();
        if r != c {
            return Err(DpkError::Shape(format!("Gram matrix must be square, got {r}x{c}")));
        }
        let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..r {
            for j in (i + 1)..r {
                if (values[[i, j]] - values[[j, i]]).abs() > 1e-9 * scale.max(f64::MIN_POSITIVE) {
                    return Err(DpkError::InvalidInput(format!("Gram matrix not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(GramMatrix(values))
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }
}

/// Linear kernel `K = X Xᵀ`. The upper triangle is computed and mirrored, so
/// the result is exactly symmetric.
pub fn gram(x: &ActivationMatrix) -> GramMatrix {
    let n = x.n();
    let v = x.values();
    let mut k = Array2::zeros((n, n));
    for i in 0..n {
        let ri = v.row(i);
        for j in i..n {
            let d = dot(ri, v.row(j));
            k[[i, j]] = d;
            k[[j, i]] = d;
        }
    }
    GramMatrix(k)
}

fn dot(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Unbiased HSIC estimator on kernel matrices whose diagonals are ignored.
///
/// ```text
/// HSIC₁(K, L) = 1/(n(n-3)) · [ tr(K̃L̃) + (1ᵀK̃1)(1ᵀL̃1)/((n-1)(n-2)) - 2/(n-2) · 1ᵀK̃L̃1 ]
/// ```
/// with `K̃`, `L̃` the inputs with zeroed diagonals. Can be negative.
pub fn hsic1(k: &GramMatrix, l: &GramMatrix) -> Result<f64> {
    let n = k.n();
    if l.n() != n {
        return Err(DpkError::Shape(format!("HSIC inputs have {n} and {} examples", l.n())));
    }
    if n < MIN_HSIC_BATCH {
        return Err(DpkError::BatchTooSmall { n, min: MIN_HSIC_BATCH });
    }
    let (kv, lv) = (k.values(), l.values());
    let mut trace = 0.0;
    let mut sum_k = 0.0;
    let mut sum_l = 0.0;
    let mut row_k = vec![0.0; n];
    let mut row_l = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let (a, b) = (kv[[i, j]], lv[[i, j]]);
            // both matrices are symmetric, so tr(K̃L̃) = Σ K̃ᵢⱼ L̃ᵢⱼ
            trace += a * b;
            row_k[i] += a;
            row_l[i] += b;
        }
        sum_k += row_k[i];
        sum_l += row_l[i];
    }
    let cross: f64 = row_k.iter().zip(&row_l).map(|(a, b)| a * b).sum();
    let nf = n as f64;
    let value = (trace + sum_k * sum_l / ((nf - 1.0) * (nf - 2.0)) - 2.0 / (nf - 2.0) * cross) / (nf * (nf - 3.0));
    Ok(value)
}

/// Minibatch CKA: mean cross-HSIC over batches normalised by the square roots
/// of the mean self-HSICs. Batch `i` of `xs` is paired with batch `i` of `ys`.
pub fn cka_minibatch(xs: &[ActivationMatrix], ys: &[ActivationMatrix]) -> Result<f64> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(DpkError::Shape(format!(
            "CKA needs equal, non-empty batch lists, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let mut acc = CkaAccumulator::default();
    for (x, y) in xs.iter().zip(ys) {
        acc.add(x, y)?;
    }
    acc.value()
}

/// Running sums for minibatch CKA.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CkaAccumulator {
    xy: f64,
    xx: f64,
    yy: f64,
    batches: usize,
}

impl CkaAccumulator {
    pub fn add(&mut self, x: &ActivationMatrix, y: &ActivationMatrix) -> Result<()> {
        if x.n() != y.n() {
            return Err(DpkError::Shape(format!("paired batches have {} and {} examples", x.n(), y.n())));
        }
        let (k, l) = (gram(x), gram(y));
        self.xy += hsic1(&k, &l)?;
        self.xx += hsic1(&k, &k)?;
        self.yy += hsic1(&l, &l)?;
        self.batches += 1;
        Ok(())
    }

    pub fn batches(&self) -> usize {
        self.batches
    }

    pub fn value(&self) -> Result<f64> {
        if self.batches == 0 {
            return Err(DpkError::DegenerateBatch("no batches accumulated".into()));
        }
        let kf = self.batches as f64;
        let (xy, xx, yy) = (self.xy / kf, self.xx / kf, self.yy / kf);
        if xx <= 0.0 || yy <= 0.0 {
            return Err(DpkError::DegenerateBatch(format!(
                "self-HSIC means must be positive (got {xx:e}, {yy:e})"
            )));
        }
        let denom = (xx * yy).sqrt();
        let denom = if denom.is_finite() && denom > 0.0 { denom } else { xx.sqrt() * yy.sqrt() };
        Ok(xy / denom)
    }
}

/// Mean per-example cosine similarity of two equally shaped matrices.
/// Zero-norm rows count as cosine 0.
pub fn cosine_gap(x: &ActivationMatrix, y: &ActivationMatrix) -> Result<f64> {
    if x.n() != y.n() || x.p() != y.p() {
        return Err(DpkError::Shape(format!(
            "cosine needs equal shapes, got {}x{} and {}x{}; use CosineProjector for differing widths",
            x.n(),
            x.p(),
            y.n(),
            y.p()
        )));
    }
    Ok(mean_row_cosine(x.values(), y.values()))
}

fn mean_row_cosine(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let n = x.nrows();
    if n == 0 {
        return 0.0;
    }
    let total: f64 = x
        .axis_iter(Axis(0))
        .zip(y.axis_iter(Axis(0)))
        .map(|(a, b)| {
            let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
            }
        })
        .sum();
    total / n as f64
}

/// Aligns feature widths for cosine similarity.
///
/// When widths differ, the wider side is multiplied by a fixed random matrix
/// with orthonormal rows (the first `min(p1, p2)` rows of a random orthogonal
/// matrix). Projections are drawn once per width pair from the seed and cached.
#[derive(Debug, Clone)]
pub struct CosineProjector {
    seed: u64,
    cache: HashMap<(usize, usize), Array2<f64>>,
}

impl CosineProjector {
    pub fn new(seed: u64) -> Self {
        CosineProjector {
            seed,
            cache: HashMap::new(),
        }
    }

    /// `short × long` matrix with orthonormal rows.
    pub fn projection(&mut self, long: usize, short: usize) -> &Array2<f64> {
        let seed = crate::seed::mix(self.seed, &[long as u64, short as u64]);
        self.cache
            .entry((long, short))
            .or_insert_with(|| orthonormal_rows(short, long, seed))
    }

    pub fn cosine_gap(&mut self, x: &ActivationMatrix, y: &ActivationMatrix) -> Result<f64> {
        if x.n() != y.n() {
            return Err(DpkError::Shape(format!("cosine needs equal example counts, got {} and {}", x.n(), y.n())));
        }
        let (p1, p2) = (x.p(), y.p());
        if p1 == p2 {
            return cosine_gap(x, y);
        }
        let (long, short) = (p1.max(p2), p1.min(p2));
        let q = self.projection(long, short).clone();
        Ok(if p1 > p2 {
            mean_row_cosine(&x.values().dot(&q.t()), y.values())
        } else {
            mean_row_cosine(x.values(), &y.values().dot(&q.t()))
        })
    }
}

/// Modified Gram-Schmidt on Gaussian rows, which yields rows distributed like
/// the leading rows of a Haar-random orthogonal matrix.
fn orthonormal_rows(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    assert!(rows <= cols);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = Array2::<f64>::zeros((rows, cols));
    let mut r = 0;
    while r < rows {
        let mut v: Vec<f64> = (0..cols).map(|_| StandardNormal.sample(&mut rng)).collect();
        for prev in 0..r {
            let row = q.row(prev);
            let proj: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (vi, &qi) in v.iter_mut().zip(row.iter()) {
                *vi -= proj * qi;
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        for (dst, vi) in q.row_mut(r).iter_mut().zip(&v) {
            *dst = vi / norm;
        }
        r += 1;
    }
    q
}

/// Mask ratio from a similarity estimate: `clamp(1 - similarity, 0, 1)`.
pub fn dynamic_ratio(similarity: f64) -> f64 {
    debug_assert!(similarity.is_finite(), "dynamic_ratio on non-finite similarity");
    (1.0 - similarity).clamp(0.0, 1.0)
}

/// Splits `n` examples into consecutive batches of `batch`; a trailing batch
/// smaller than [`MIN_HSIC_BATCH`] is merged into its predecessor.
pub fn partition_batches(n: usize, batch: usize) -> Vec<Range<usize>> {
    assert!(batch > 0);
    let mut out: Vec<Range<usize>> = (0..n).step_by(batch).map(|s| s..(s + batch).min(n)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() < MIN_HSIC_BATCH) {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().end = tail.end;
    }
    out
}

/// One row of a similarity trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub step: usize,
    pub epoch: usize,
    pub stage: usize,
    /// NaN when the estimate was unavailable (degenerate or too-small batch).
    pub cka: f64,
    /// NaN when not computed.
    pub cosine: f64,
    pub ratio: f64,
    pub cls_loss: f64,
    pub logits_loss: f64,
    pub feat_loss: f64,
}

/// Per-epoch averages of a trace, for one stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub stage: usize,
    pub mean_cka: f64,
    pub mean_ratio: f64,
    pub steps: usize,
}

/// Ordered record of per-step similarity and applied mask ratios.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimilarityTrace {
    entries: Vec<TraceEntry>,
}

impl SimilarityTrace {
    pub const CSV_HEADER: &'static str = "step,stage,cka,cosine,ratio,cls_loss,logits_loss,feat_loss";

    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an entry; `(step, stage)` must strictly increase and the ratio lie in `[0, 1]`.
    pub fn push(&mut self, entry: TraceEntry) -> Result<()> {
        if !(0.0..=1.0).contains(&entry.ratio) {
            return Err(DpkError::InvalidInput(format!("trace ratio {} outside [0, 1]", entry.ratio)));
        }
        if let Some(last) = self.entries.last() {
            if (entry.step, entry.stage) <= (last.step, last.stage) {
                return Err(DpkError::InvalidInput(format!(
                    "trace entry (step {}, stage {}) does not follow (step {}, stage {})",
                    entry.step, entry.stage, last.step, last.stage
                )));
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[TraceEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Epoch means per stage, ordered by (stage, epoch). NaN CKA values are skipped.
    pub fn epoch_means(&self) -> Vec<EpochSummary> {
        let mut groups: std::collections::BTreeMap<(usize, usize), (f64, usize, f64, usize)> = Default::default();
        for e in &self.entries {
            let g = groups.entry((e.stage, e.epoch)).or_insert((0.0, 0, 0.0, 0));
            if e.cka.is_finite() {
                g.0 += e.cka;
                g.1 += 1;
            }
            g.2 += e.ratio;
            g.3 += 1;
        }
        groups
            .into_iter()
            .map(|((stage, epoch), (cka, nc, ratio, n))| EpochSummary {
                epoch,
                stage,
                mean_cka: if nc > 0 { cka / nc as f64 } else { f64::NAN },
                mean_ratio: ratio / n as f64,
                steps: n,
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(64 * (self.entries.len() + 1));
        s.push_str(Self::CSV_HEADER);
        s.push('\n');
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                e.step, e.stage, e.cka, e.cosine, e.ratio, e.cls_loss, e.logits_loss, e.feat_loss
            );
        }
        s
    }
}
