//! Datasets: the bundled procedural image set and a loader for external
//! image/label archives, plus deterministic batch ordering.

use std::path::Path;

use dpk_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::archive::{FeatureArchive, TensorData};
use crate::error::{DpkError, Result};
use crate::seed::{mix, rng_for};
use crate::similarity::MIN_HSIC_BATCH;

/// Images `N × C × H × W` with integer labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Vec<f32>,
    labels: Vec<usize>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<f32>, labels: Vec<usize>, chw: (usize, usize, usize), classes: usize) -> Result<Self> {
        let (channels, height, width) = chw;
        let per = channels * height * width;
        if per == 0 || images.len() != labels.len() * per {
            return Err(DpkError::Shape(format!(
                "{} image values for {} labels of shape {channels}x{height}x{width}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(DpkError::InvalidInput(format!("label {bad} outside {classes} classes")));
        }
        if images.iter().any(|x| !x.is_finite()) {
            return Err(DpkError::InvalidInput("non-finite pixel value".into()));
        }
        Ok(Dataset {
            images,
            labels,
            channels,
            height,
            width,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.channels * self.height * self.width;
        &self.images[i * per..(i + 1) * per]
    }

    /// Stacks the listed examples into a `B × C × H × W` tensor.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.channels * self.height * self.width);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let x = Tensor::from_vec(data, &[indices.len(), self.channels, self.height, self.width]);
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// First `n` examples.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let per = self.channels * self.height * self.width;
        Dataset {
            images: self.images[..n * per].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..*self
        }
    }

    /// Loads an archive holding `images` (`N × C × H × W`) and `labels` (`N`).
    pub fn from_archive(path: &Path, classes: usize) -> Result<Dataset> {
        let a = FeatureArchive::load(path)?;
        let images = a
            .get("images")
            .ok_or_else(|| DpkError::Format(format!("{}: no `images` tensor", path.display())))?;
        let labels = a
            .get("labels")
            .ok_or_else(|| DpkError::Format(format!("{}: no `labels` tensor", path.display())))?;
        if images.dims.len() != 4 || labels.dims != [images.dims[0]] {
            return Err(DpkError::Format(format!(
                "{}: images {:?} and labels {:?} do not line up",
                path.display(),
                images.dims,
                labels.dims
            )));
        }
        let pixels = match &images.data {
            TensorData::F32(v) => v.clone(),
            TensorData::F64(v) => v.iter().map(|&x| x as f32).collect(),
        };
        let labels = labels
            .data
            .to_f64()
            .into_iter()
            .map(|l| {
                if l >= 0.0 && l.fract() == 0.0 {
                    Ok(l as usize)
                } else {
                    Err(DpkError::Format(format!("label {l} is not a class index")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let d = &images.dims;
        Dataset::new(pixels, labels, (d[1], d[2], d[3]), classes)
    }
}

/// Train/test split.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

/// Parameters of the procedural image set.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub train: usize,
    pub test: usize,
    pub size: usize,
    pub noise: f64,
    pub distractors: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            train: 5000,
            test: 1000,
            size: 32,
            noise: 0.25,
            distractors: 2,
            seed: 0,
        }
    }
}

pub const SYNTHETIC_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Disc,
    Square,
    Triangle,
    Cross,
    Ring,
}

const SHAPES: [Shape; 5] = [Shape::Disc, Shape::Square, Shape::Triangle, Shape::Cross, Shape::Ring];

/// Inside test in shape-local coordinates scaled to `[-1, 1]`.
fn inside(shape: Shape, u: f64, v: f64) -> bool {
    match shape {
        Shape::Disc => u * u + v * v <= 1.0,
        Shape::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
        Shape::Triangle => v <= 0.8 && v >= -0.9 + 1.7 * u.abs() / 0.95,
        Shape::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        Shape::Ring => {
            let r = u * u + v * v;
            (0.4..=1.0).contains(&r)
        }
    }
}

/// Class `2·shape + striped`.
pub fn class_of(shape_index: usize, striped: bool) -> usize {
    2 * shape_index + usize::from(striped)
}

fn render<R: Rng + ?Sized>(spec: &SyntheticSpec, label: usize, rng: &mut R) -> Vec<f32> {
    let s = spec.size;
    let shape = SHAPES[label / 2];
    let striped = label % 2 == 1;
    let mut img = vec![0f32; 3 * s * s];
    let bg: [f64; 3] = [rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)];
    for c in 0..3 {
        img[c * s * s..(c + 1) * s * s].fill(bg[c] as f32);
    }
    let paint = |img: &mut Vec<f32>, shape: Shape, cx: f64, cy: f64, r: f64, rot: f64, color: [f64; 3], stripe: Option<(f64, f64)>| {
        let (sn, cs) = rot.sin_cos();
        for y in 0..s {
            for x in 0..s {
                let dx = (x as f64 + 0.5 - cx) / r;
                let dy = (y as f64 + 0.5 - cy) / r;
                let (u, v) = (cs * dx + sn * dy, -sn * dx + cs * dy);
                if !inside(shape, u, v) {
                    continue;
                }
                let on = match stripe {
                    Some((angle, period)) => {
                        let t = (x as f64) * angle.cos() + (y as f64) * angle.sin();
                        (t / period).rem_euclid(2.0) < 1.0
                    }
                    None => true,
                };
                let k = if on { 1.0 } else { -0.4 };
                for c in 0..3 {
                    img[(c * s + y) * s + x] = (color[c] * k) as f32;
                }
            }
        }
    };
    for _ in 0..spec.distractors {
        let r = rng.random_range(1.5..3.0);
        let cx = rng.random_range(0.0..s as f64);
        let cy = rng.random_range(0.0..s as f64);
        let color = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let which = SHAPES[rng.random_range(0..SHAPES.len())];
        paint(&mut img, which, cx, cy, r, 0.0, color, None);
    }
    let scale = s as f64 / 32.0;
    let r = rng.random_range(6.0..11.0) * scale;
    let cx = rng.random_range(r..s as f64 - r);
    let cy = rng.random_range(r..s as f64 - r);
    let rot = rng.random_range(-0.5..0.5);
    let mut color = [0.0; 3];
    for (c, b) in color.iter_mut().zip(bg) {
        // keep the shape distinguishable from the background
        let mut v: f64 = rng.random_range(-1.0..1.0);
        if (v - b).abs() < 0.4 {
            v = if b > 0.0 { b - 0.6 } else { b + 0.6 };
        }
        *c = v;
    }
    let stripe = striped.then(|| (rng.random_range(0.0..std::f64::consts::PI), rng.random_range(1.5..2.5) * scale));
    paint(&mut img, shape, cx, cy, r, rot, color, stripe);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise std");
    for p in &mut img {
        *p += noise.sample(rng) as f32;
    }
    img
}

fn generate(spec: &SyntheticSpec, n: usize, purpose: &str) -> Result<Dataset> {
    let mut rng = rng_for(spec.seed, purpose);
    let mut images = Vec::with_capacity(n * 3 * spec.size * spec.size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % SYNTHETIC_CLASSES;
        images.extend(render(spec, label, &mut rng));
        labels.push(label);
    }
    // interleave classes without correlating label with index
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let per = 3 * spec.size * spec.size;
    let mut shuffled = Vec::with_capacity(images.len());
    for &i in &order {
        shuffled.extend_from_slice(&images[i * per..(i + 1) * per]);
    }
    let labels = order.iter().map(|&i| labels[i]).collect();
    Dataset::new(shuffled, labels, (3, spec.size, spec.size), SYNTHETIC_CLASSES)
}

/// Procedural 10-class set: five shapes, each solid or striped, with random
/// colours, placement, size, small distractor blobs and pixel noise.
pub fn synthetic(spec: &SyntheticSpec) -> Result<Splits> {
    if spec.size < 24 {
        return Err(DpkError::Config(format!("synthetic images must be at least 24 pixels, got {}", spec.size)));
    }
    Ok(Splits {
        train: generate(spec, spec.train, "data.train")?,
        test: generate(spec, spec.test, "data.test")?,
    })
}

/// Splits `0..n` into consecutive batches; a trailing batch smaller than the
/// HSIC minimum is merged into its predecessor.
pub fn chunk_indices(order: &[usize], batch: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < MIN_HSIC_BATCH) {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().extend(tail);
    }
    out
}

/// Shuffled batches for one epoch; depends only on `(seed, epoch)`.
pub fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_for(mix(seed, &[epoch as u64]), "data.order");
    order.shuffle(&mut rng);
    chunk_indices(&order, batch)
}
