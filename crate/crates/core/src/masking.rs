//! Token masks and mask-ratio schedules.
//!
//! A mask flag is `true` where the student's token is replaced by prior
//! knowledge (the teacher's token, or a filler). Ratio-driven patterns realise
//! exactly `round(ratio · N)` masked tokens.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DpkError, Result};
use crate::seed;
use crate::similarity::dynamic_ratio;

/// Token grid of `rows × cols` patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

impl Grid {
    pub fn new(rows: usize, cols: usize) -> Self {
        Grid { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Number of masked tokens for a ratio: `round(ratio · n)`.
pub fn target_count(n: usize, ratio: f64) -> usize {
    ((ratio.clamp(0.0, 1.0) * n as f64).round() as usize).min(n)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPattern {
    flags: Vec<bool>,
    grid: Grid,
}

impl MaskPattern {
    pub fn new(flags: Vec<bool>, grid: Grid) -> Result<Self> {
        if flags.len() != grid.len() {
            return Err(DpkError::Shape(format!(
                "{} mask flags for a {}x{} grid",
                flags.len(),
                grid.rows,
                grid.cols
            )));
        }
        Ok(MaskPattern { flags, grid })
    }

    pub fn all(grid: Grid, value: bool) -> Self {
        MaskPattern {
            flags: vec![value; grid.len()],
            grid,
        }
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn realized_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn realized_ratio(&self) -> f64 {
        self.realized_count() as f64 / self.grid.len().max(1) as f64
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.flags[row * self.grid.cols + col]
    }
}

/// Uniformly chosen exact-count mask: shuffle positions and take the first `round(ratio·N)`.
pub fn random_mask<R: Rng + ?Sized>(grid: Grid, ratio: f64, rng: &mut R) -> MaskPattern {
    let n = grid.len();
    let k = target_count(n, ratio);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut flags = vec![false; n];
    for &i in &idx[..k] {
        flags[i] = true;
    }
    MaskPattern { flags, grid }
}

/// Smallest block area sampled by [`block_mask`].
pub const MIN_BLOCK_TOKENS: usize = 4;
/// Block aspect ratios are drawn log-uniformly from `[ASPECT_MIN, 1/ASPECT_MIN]`.
pub const ASPECT_MIN: f64 = 0.3;

/// Axis-aligned block of tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// A block mask together with its sampling history.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMaskDraw {
    pub blocks: Vec<Rect>,
    /// Union of the blocks before trimming to the exact count.
    pub untrimmed: MaskPattern,
    pub mask: MaskPattern,
}

/// Block-wise masking: rectangles of at least [`MIN_BLOCK_TOKENS`] tokens with
/// bounded aspect ratio are unioned until the target count is reached, then
/// random boundary tokens are unmasked to hit it exactly.
pub fn block_mask<R: Rng + ?Sized>(grid: Grid, ratio: f64, rng: &mut R) -> MaskPattern {
    block_mask_detailed(grid, ratio, rng).mask
}

pub fn block_mask_detailed<R: Rng + ?Sized>(grid: Grid, ratio: f64, rng: &mut R) -> BlockMaskDraw {
    let n = grid.len();
    let target = target_count(n, ratio);
    if target == 0 || target == n {
        let m = MaskPattern::all(grid, target == n);
        return BlockMaskDraw {
            blocks: Vec::new(),
            untrimmed: m.clone(),
            mask: m,
        };
    }
    if grid.rows < 2 || grid.cols < 2 {
        log::warn!(
            "{}x{} grid cannot hold a {MIN_BLOCK_TOKENS}-token block; using random masking",
            grid.rows,
            grid.cols
        );
        let m = random_mask(grid, ratio, rng);
        return BlockMaskDraw {
            blocks: Vec::new(),
            untrimmed: m.clone(),
            mask: m,
        };
    }

    let mut flags = vec![false; n];
    let mut count = 0;
    let mut blocks = Vec::new();
    let mut attempts = 0usize;
    while count < target {
        attempts += 1;
        if attempts > 100_000 {
            // pathological grids; top up uniformly
            let mut free: Vec<usize> = (0..n).filter(|&i| !flags[i]).collect();
            free.shuffle(rng);
            for &i in &free[..target - count] {
                flags[i] = true;
            }
            count = target;
            break;
        }
        let remaining = target - count;
        let hi = remaining.max(MIN_BLOCK_TOKENS).min(n);
        let area = rng.random_range(MIN_BLOCK_TOKENS as f64..=hi as f64);
        let aspect = rng.random_range(ASPECT_MIN.ln()..=(1.0 / ASPECT_MIN).ln()).exp();
        let h = (area * aspect).sqrt().round() as usize;
        let w = (area / aspect).sqrt().round() as usize;
        if h == 0 || w == 0 || h > grid.rows || w > grid.cols || h * w < MIN_BLOCK_TOKENS {
            continue;
        }
        let hw = h as f64 / w as f64;
        if !(ASPECT_MIN..=1.0 / ASPECT_MIN).contains(&hw) {
            continue;
        }
        let top = rng.random_range(0..=grid.rows - h);
        let left = rng.random_range(0..=grid.cols - w);
        for r in top..top + h {
            for c in left..left + w {
                let i = r * grid.cols + c;
                if !flags[i] {
                    flags[i] = true;
                    count += 1;
                }
            }
        }
        blocks.push(Rect {
            top,
            left,
            height: h,
            width: w,
        });
    }
    let untrimmed = MaskPattern {
        flags: flags.clone(),
        grid,
    };
    while count > target {
        let boundary: Vec<usize> = (0..n).filter(|&i| flags[i] && on_boundary(&flags, grid, i)).collect();
        let pick = boundary[rng.random_range(0..boundary.len())];
        flags[pick] = false;
        count -= 1;
    }
    BlockMaskDraw {
        blocks,
        untrimmed,
        mask: MaskPattern { flags, grid },
    }
}

/// A masked token touching an unmasked token or the grid edge (4-neighbourhood).
fn on_boundary(flags: &[bool], grid: Grid, i: usize) -> bool {
    let (r, c) = (i / grid.cols, i % grid.cols);
    let neighbour = |rr: isize, cc: isize| -> bool {
        if rr < 0 || cc < 0 || rr >= grid.rows as isize || cc >= grid.cols as isize {
            return false;
        }
        flags[rr as usize * grid.cols + cc as usize]
    };
    let (r, c) = (r as isize, c as isize);
    !(neighbour(r - 1, c) && neighbour(r + 1, c) && neighbour(r, c - 1) && neighbour(r, c + 1))
}

/// Regular mask keeping one token per 2×2 cell (the cell's top-left) and
/// masking the rest. Partial cells on odd edges follow the same rule, so the
/// ratio is exactly 0.75 on even grids.
pub fn grid_mask(grid: Grid) -> MaskPattern {
    let flags = (0..grid.rows)
        .flat_map(|r| (0..grid.cols).map(move |c| !(r % 2 == 0 && c % 2 == 0)))
        .collect();
    MaskPattern { flags, grid }
}

/// Spatial arrangement of masked tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    Random,
    Block,
    Grid,
}

/// How the mask ratio evolves during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Fixed,
    Exponential,
    Linear,
    Cka,
    Cosine,
}

impl ScheduleKind {
    pub fn needs_similarity(self) -> bool {
        matches!(self, ScheduleKind::Cka | ScheduleKind::Cosine)
    }
}

/// Configuration-level masking strategy: one name per ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    Random,
    Block,
    Grid,
    Exponential,
    Linear,
    Cka,
    Cosine,
}

impl MaskStrategy {
    pub fn pattern(self) -> PatternKind {
        match self {
            MaskStrategy::Block => PatternKind::Block,
            MaskStrategy::Grid => PatternKind::Grid,
            _ => PatternKind::Random,
        }
    }

    pub fn schedule(self) -> ScheduleKind {
        match self {
            MaskStrategy::Random | MaskStrategy::Block | MaskStrategy::Grid => ScheduleKind::Fixed,
            MaskStrategy::Exponential => ScheduleKind::Exponential,
            MaskStrategy::Linear => ScheduleKind::Linear,
            MaskStrategy::Cka => ScheduleKind::Cka,
            MaskStrategy::Cosine => ScheduleKind::Cosine,
        }
    }
}

/// Ratio used before any similarity estimate is available.
pub const INITIAL_DYNAMIC_RATIO: f64 = 0.5;

/// Mask-ratio schedule state for one distillation stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleState {
    pub kind: ScheduleKind,
    pub pi0: f64,
    pub epoch: usize,
    pub last_valid_ratio: f64,
    /// Multiplicative factor per epoch for the exponential schedule.
    pub decay: f64,
    /// Subtracted per epoch by the linear schedule.
    pub linear_decrement: f64,
    /// Optional exponential smoothing of the produced ratio (weight on the previous value).
    pub ema: Option<f64>,
}

impl ScheduleState {
    pub fn new(kind: ScheduleKind, pi0: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&pi0) {
            return Err(DpkError::Config(format!("initial mask ratio {pi0} outside [0, 1]")));
        }
        let last_valid_ratio = if kind.needs_similarity() { INITIAL_DYNAMIC_RATIO } else { pi0 };
        Ok(ScheduleState {
            kind,
            pi0,
            epoch: 0,
            last_valid_ratio,
            decay: 0.95,
            linear_decrement: 0.95,
            ema: None,
        })
    }
}

/// Ratio for the current step. Similarity-driven schedules without a
/// similarity value reuse the last valid ratio.
pub fn schedule_ratio(state: &mut ScheduleState, similarity: Option<f64>) -> f64 {
    let raw = match state.kind {
        ScheduleKind::Fixed => state.pi0,
        ScheduleKind::Exponential => (state.pi0 * state.decay.powi(state.epoch as i32)).clamp(0.0, 1.0),
        ScheduleKind::Linear => (state.pi0 - state.epoch as f64 * state.linear_decrement).clamp(0.0, 1.0),
        ScheduleKind::Cka | ScheduleKind::Cosine => match similarity.filter(|s| s.is_finite()) {
            Some(s) => dynamic_ratio(s),
            None => {
                log::debug!("no similarity estimate; keeping ratio {}", state.last_valid_ratio);
                return state.last_valid_ratio;
            }
        },
    };
    let ratio = match state.ema {
        Some(w) if state.kind.needs_similarity() => (w * state.last_valid_ratio + (1.0 - w) * raw).clamp(0.0, 1.0),
        _ => raw,
    };
    state.last_valid_ratio = ratio;
    ratio
}

/// Independent stream for one sample's mask at one step.
pub fn mask_rng(mask_seed: u64, step: usize, sample: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed::mix(mask_seed, &[step as u64, sample as u64]))
}

/// Draws one mask per sample.
pub fn draw_masks(kind: PatternKind, grid: Grid, ratio: f64, mask_seed: u64, step: usize, batch: usize) -> Vec<MaskPattern> {
    (0..batch)
        .map(|b| {
            let mut rng = mask_rng(mask_seed, step, b);
            match kind {
                PatternKind::Random => random_mask(grid, ratio, &mut rng),
                PatternKind::Block => block_mask(grid, ratio, &mut rng),
                PatternKind::Grid => grid_mask(grid),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    #[test]
    fn random_exact_counts() {
        let g = Grid::new(14, 14);
        assert_eq!(random_mask(g, 0.75, &mut rng(0)).realized_count(), 147);
        assert_eq!(random_mask(g, 0.0, &mut rng(0)).realized_count(), 0);
        assert_eq!(random_mask(g, 1.0, &mut rng(0)).realized_count(), 196);
    }

    #[test]
    fn block_edge_ratios() {
        let g = Grid::new(8, 8);
        assert!(block_mask(g, 0.0, &mut rng(1)).flags().iter().all(|&f| !f));
        assert!(block_mask(g, 1.0, &mut rng(1)).flags().iter().all(|&f| f));
    }

    #[test]
    fn block_falls_back_on_thin_grid() {
        let m = block_mask(Grid::new(1, 9), 0.5, &mut rng(2));
        assert_eq!(m.realized_count(), 5);
    }

    #[test]
    fn grid_small_cases() {
        assert_eq!(grid_mask(Grid::new(2, 2)).flags(), &[false, true, true, true]);
        let m = grid_mask(Grid::new(4, 4));
        assert_eq!(m.realized_count(), 12);
        for (r, c) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert!(!m.get(r, c));
        }
        // odd edge: partial cells keep only their top-left
        let odd = grid_mask(Grid::new(3, 3));
        assert_eq!(odd.realized_count(), 5);
    }

    #[test]
    fn schedules() {
        let mut s = ScheduleState::new(ScheduleKind::Exponential, 1.0).unwrap();
        assert_eq!(schedule_ratio(&mut s, None), 1.0);
        s.epoch = 14;
        assert!((schedule_ratio(&mut s, None) - 0.487_674_979_115_529_9).abs() < 1e-12);
        let mut l = ScheduleState::new(ScheduleKind::Linear, 1.0).unwrap();
        l.epoch = 1;
        assert!((schedule_ratio(&mut l, None) - 0.05).abs() < 1e-12);
        l.epoch = 2;
        assert_eq!(schedule_ratio(&mut l, None), 0.0);
        let mut f = ScheduleState::new(ScheduleKind::Fixed, 0.35).unwrap();
        assert_eq!(schedule_ratio(&mut f, Some(0.9)), 0.35);
    }

    #[test]
    fn dynamic_schedule_fallback() {
        let mut s = ScheduleState::new(ScheduleKind::Cka, 1.0).unwrap();
        assert_eq!(schedule_ratio(&mut s, None), INITIAL_DYNAMIC_RATIO);
        assert!((schedule_ratio(&mut s, Some(0.3)) - 0.7).abs() < 1e-15);
        assert!((schedule_ratio(&mut s, None) - 0.7).abs() < 1e-15);
        assert!((schedule_ratio(&mut s, Some(f64::NAN)) - 0.7).abs() < 1e-15);
        assert_eq!(schedule_ratio(&mut s, Some(1.3)), 0.0);
    }

    #[test]
    fn ema_smooths_dynamic_ratio() {
        let mut s = ScheduleState::new(ScheduleKind::Cka, 1.0).unwrap();
        s.ema = Some(0.5);
        // 0.5 * 0.5 + 0.5 * 0.9
        assert!((schedule_ratio(&mut s, Some(0.1)) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn pi0_validated() {
        assert!(ScheduleState::new(ScheduleKind::Fixed, 1.5).is_err());
    }

    #[test]
    fn masks_reproducible_per_sample() {
        let g = Grid::new(4, 4);
        let a = draw_masks(PatternKind::Random, g, 0.5, 11, 3, 4);
        let b = draw_masks(PatternKind::Random, g, 0.5, 11, 3, 4);
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
        assert_ne!(a, draw_masks(PatternKind::Random, g, 0.5, 11, 4, 4));
    }
}
