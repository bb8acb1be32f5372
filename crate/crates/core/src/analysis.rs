//! Offline CKA between two feature archives: per-minibatch values, ranked.

use std::fmt::Write as _;

use crate::archive::{ArchiveTensor, FeatureArchive};
use crate::error::{DpkError, Result};
use crate::similarity::{cka_minibatch, dynamic_ratio, partition_batches, ActivationMatrix, CosineProjector, MIN_HSIC_BATCH};

/// One minibatch of the comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchCka {
    pub batch: usize,
    pub cka: f64,
    pub cosine: f64,
}

fn select<'a>(a: &'a FeatureArchive, name: Option<&str>, which: &str) -> Result<&'a ArchiveTensor> {
    match name {
        Some(n) => a
            .get(n)
            .ok_or_else(|| DpkError::InvalidInput(format!("archive {which} has no tensor `{n}`"))),
        None => a
            .tensors
            .first()
            .ok_or_else(|| DpkError::InvalidInput(format!("archive {which} is empty"))),
    }
}

fn as_matrix(t: &ArchiveTensor) -> Result<ActivationMatrix> {
    let n = *t
        .dims
        .first()
        .ok_or_else(|| DpkError::Shape(format!("tensor `{}` has no example axis", t.name)))?;
    let p = t.dims[1..].iter().product::<usize>();
    ActivationMatrix::from_rows(n, p, t.data.to_f64())
}

/// Per-batch CKA of tensor `name` (first tensor when `None`) between the two
/// archives, sorted ascending. Unavailable estimates are NaN and sort last.
pub fn analyze_cka(a: &FeatureArchive, b: &FeatureArchive, name: Option<&str>, batch_size: usize, seed: u64) -> Result<Vec<BatchCka>> {
    if batch_size < MIN_HSIC_BATCH {
        return Err(DpkError::BatchTooSmall {
            n: batch_size,
            min: MIN_HSIC_BATCH,
        });
    }
    let x = as_matrix(select(a, name, "A")?)?;
    let y = as_matrix(select(b, name, "B")?)?;
    if x.n() != y.n() {
        return Err(DpkError::InvalidInput(format!(
            "archives hold different example counts: {} vs {}",
            x.n(),
            y.n()
        )));
    }
    if x.n() < MIN_HSIC_BATCH {
        return Err(DpkError::BatchTooSmall {
            n: x.n(),
            min: MIN_HSIC_BATCH,
        });
    }
    let mut projector = CosineProjector::new(seed);
    let mut out = Vec::new();
    for (i, r) in partition_batches(x.n(), batch_size).into_iter().enumerate() {
        let (xb, yb) = (x.rows(r.clone()), y.rows(r));
        let cka = match cka_minibatch(std::slice::from_ref(&xb), std::slice::from_ref(&yb)) {
            Ok(v) => v,
            Err(e) => {
                log::warn!("batch {i}: {e}");
                f64::NAN
            }
        };
        let cosine = projector.cosine_gap(&xb, &yb).unwrap_or(f64::NAN);
        out.push(BatchCka { batch: i, cka, cosine });
    }
    out.sort_by(|p, q| p.cka.total_cmp(&q.cka).then(p.batch.cmp(&q.batch)));
    Ok(out)
}

/// CSV with the trace columns: `step` is the batch index, `stage` the tensor name.
pub fn cka_csv(rows: &[BatchCka], stage: &str) -> String {
    let mut s = String::from("step,stage,cka,cosine,ratio\n");
    for r in rows {
        let ratio = if r.cka.is_finite() { dynamic_ratio(r.cka) } else { f64::NAN };
        let _ = writeln!(s, "{},{},{},{},{}", r.batch, stage, r.cka, r.cosine, ratio);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archive::TensorData;

    fn archive(n: usize, p: usize, f: impl Fn(usize) -> f64) -> FeatureArchive {
        let mut a = FeatureArchive::new();
        a.push(ArchiveTensor::new("feat", vec![n, p], TensorData::F64((0..n * p).map(f).collect())).unwrap());
        a
    }

    #[test]
    fn counts_and_errors() {
        let a = archive(66, 3, |i| ((i * 7919) % 101) as f64);
        let rows = analyze_cka(&a, &a, None, 32, 0).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| (r.cka - 1.0).abs() < 1e-8));
        let b = archive(64, 3, |i| i as f64);
        assert!(analyze_cka(&a, &b, None, 32, 0).is_err());
        assert!(analyze_cka(&a, &a, Some("nope"), 32, 0).is_err());
        assert!(analyze_cka(&a, &a, None, 3, 0).is_err());
    }
}
