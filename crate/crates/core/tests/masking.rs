use dpk::masking::{
    block_mask, block_mask_detailed, draw_masks, grid_mask, random_mask, schedule_ratio, Grid, PatternKind, ScheduleKind, ScheduleState,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn expected(n: usize, ratio: f64) -> usize {
    (ratio * n as f64).round() as usize
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn random_and_block_counts_are_exact(rows in 1usize..=16, cols in 1usize..=16, ratio in 0.0f64..=1.0, seed: u64) {
        let grid = Grid::new(rows, cols);
        let n = grid.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prop_assert_eq!(random_mask(grid, ratio, &mut rng).realized_count(), expected(n, ratio));
        prop_assert_eq!(block_mask(grid, ratio, &mut rng).realized_count(), expected(n, ratio));
    }

    #[test]
    fn grid_mask_is_three_quarters_on_even_grids(half_rows in 1usize..=16, half_cols in 1usize..=16) {
        let grid = Grid::new(2 * half_rows, 2 * half_cols);
        let m = grid_mask(grid);
        prop_assert_eq!(m.realized_ratio(), 0.75);
        prop_assert_eq!(m.realized_count(), expected(grid.len(), 0.75));
    }

    #[test]
    fn block_masks_only_trim_their_union(rows in 2usize..=14, cols in 2usize..=14, ratio in 0.05f64..0.95, seed: u64) {
        let draw = block_mask_detailed(Grid::new(rows, cols), ratio, &mut ChaCha8Rng::seed_from_u64(seed));
        for (m, u) in draw.mask.flags().iter().zip(draw.untrimmed.flags()) {
            prop_assert!(!m | u);
        }
    }
}

#[test]
fn random_mask_inclusion_is_uniform() {
    let grid = Grid::new(4, 4);
    let ratio = 0.4;
    let draws = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut hits = vec![0usize; grid.len()];
    for _ in 0..draws {
        for (h, &f) in hits.iter_mut().zip(random_mask(grid, ratio, &mut rng).flags()) {
            *h += usize::from(f);
        }
    }
    let p = expected(grid.len(), ratio) as f64 / grid.len() as f64;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for (i, &h) in hits.iter().enumerate() {
        let dev = (h as f64 - draws as f64 * p).abs();
        assert!(dev <= 3.0 * sigma, "position {i}: {h} hits, expected {} ± {}", draws as f64 * p, 3.0 * sigma);
    }
}

#[test]
fn extreme_ratios() {
    let grid = Grid::new(5, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for mask in [random_mask(grid, 0.0, &mut rng), block_mask(grid, 0.0, &mut rng)] {
        assert_eq!(mask.realized_count(), 0);
    }
    for mask in [random_mask(grid, 1.0, &mut rng), block_mask(grid, 1.0, &mut rng)] {
        assert_eq!(mask.realized_count(), 15);
    }
}

#[test]
fn draws_are_reproducible_per_step_and_sample() {
    let grid = Grid::new(4, 4);
    let a = draw_masks(PatternKind::Random, grid, 0.5, 7, 3, 8);
    let b = draw_masks(PatternKind::Random, grid, 0.5, 7, 3, 8);
    assert_eq!(a, b);
    assert_ne!(a, draw_masks(PatternKind::Random, grid, 0.5, 7, 4, 8));
    assert!(a.windows(2).any(|w| w[0] != w[1]));
}

#[test]
fn schedules() {
    let mut fixed = ScheduleState::new(ScheduleKind::Fixed, 0.35).unwrap();
    assert_eq!(schedule_ratio(&mut fixed, Some(0.9)), 0.35);

    let mut exp = ScheduleState::new(ScheduleKind::Exponential, 1.0).unwrap();
    exp.epoch = 2;
    assert!((schedule_ratio(&mut exp, None) - 0.95f64.powi(2)).abs() < 1e-15);

    let mut lin = ScheduleState::new(ScheduleKind::Linear, 1.0).unwrap();
    lin.linear_decrement = 0.1;
    lin.epoch = 3;
    assert!((schedule_ratio(&mut lin, None) - 0.7).abs() < 1e-12);
    lin.epoch = 30;
    assert_eq!(schedule_ratio(&mut lin, None), 0.0);

    let mut cka = ScheduleState::new(ScheduleKind::Cka, 1.0).unwrap();
    assert_eq!(schedule_ratio(&mut cka, None), 0.5);
    assert!((schedule_ratio(&mut cka, Some(0.8)) - 0.2).abs() < 1e-12);
    assert!((schedule_ratio(&mut cka, Some(f64::NAN)) - 0.2).abs() < 1e-12);
    assert_eq!(schedule_ratio(&mut cka, Some(-0.1)), 1.0);

    assert!(ScheduleState::new(ScheduleKind::Fixed, 1.5).is_err());
}
