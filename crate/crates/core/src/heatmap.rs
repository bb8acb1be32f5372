//! Square heatmap images of ranked similarity values.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{DpkError, Result};

const STOPS: [(f64, [u8; 3]); 5] = [
    (0.00, [68, 1, 84]),
    (0.25, [59, 82, 139]),
    (0.50, [33, 145, 140]),
    (0.75, [94, 201, 98]),
    (1.00, [253, 231, 37]),
];

/// Viridis-like colour for `t ∈ [0, 1]`; NaN maps to black.
pub fn colour(t: f64) -> [u8; 3] {
    if t.is_nan() {
        return [0, 0, 0];
    }
    let t = t.clamp(0.0, 1.0);
    for pair in STOPS.windows(2) {
        let ((a, ca), (b, cb)) = (pair[0], pair[1]);
        if t <= b {
            let f = (t - a) / (b - a);
            return std::array::from_fn(|i| (f64::from(ca[i]) + f * (f64::from(cb[i]) - f64::from(ca[i]))).round() as u8);
        }
    }
    STOPS[STOPS.len() - 1].1
}

/// Side length of the smallest square holding `n` cells.
pub fn side(n: usize) -> usize {
    let mut s = (n as f64).sqrt() as usize;
    while s * s < n {
        s += 1;
    }
    s
}

/// Lays `values` out row-major on a square grid, each cell `cell × cell`
/// pixels, colour-mapped over `[0, 1]`. Unused cells are black.
pub fn render(values: &[f64], cell: usize) -> (usize, Vec<u8>) {
    let s = side(values.len()).max(1);
    let px = s * cell;
    let mut rgb = vec![0u8; px * px * 3];
    for (i, &v) in values.iter().enumerate() {
        let (r, c) = (i / s, i % s);
        let col = colour(v);
        for y in r * cell..(r + 1) * cell {
            for x in c * cell..(c + 1) * cell {
                rgb[(y * px + x) * 3..(y * px + x) * 3 + 3].copy_from_slice(&col);
            }
        }
    }
    (px, rgb)
}

pub fn save_png(path: &Path, values: &[f64], cell: usize) -> Result<()> {
    let (px, rgb) = render(values, cell);
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, px as u32, px as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| DpkError::Format(e.to_string()))?;
    w.write_image_data(&rgb).map_err(|e| DpkError::Format(e.to_string()))?;
    w.finish().map_err(|e| DpkError::Format(e.to_string()))?;
    Ok(())
}
