//! Random, block and grid masks on an 8x8 token grid, and how each ratio
//! schedule evolves over epochs.
//!
//! cargo run --release --example mask_strategies

use dpk::masking::{block_mask, grid_mask, random_mask, schedule_ratio, Grid, MaskPattern, ScheduleKind, ScheduleState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn show(title: &str, m: &MaskPattern) {
    let g = m.grid();
    println!("{title}: {} of {} masked", m.realized_count(), g.len());
    for r in 0..g.rows {
        let row: String = (0..g.cols).map(|c| if m.get(r, c) { '#' } else { '.' }).collect();
        println!("  {row}");
    }
}

fn main() -> dpk::Result<()> {
    let grid = Grid::new(8, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    show("random, ratio 0.5", &random_mask(grid, 0.5, &mut rng));
    show("block, ratio 0.5", &block_mask(grid, 0.5, &mut rng));
    show("grid", &grid_mask(grid));

    // a student that grows more similar to its teacher each epoch
    let similarity = [0.35, 0.5, 0.62, 0.7, 0.76, 0.8];
    println!("\n{:<12} ratio per epoch", "schedule");
    for kind in [ScheduleKind::Fixed, ScheduleKind::Exponential, ScheduleKind::Linear, ScheduleKind::Cka] {
        let mut state = ScheduleState::new(kind, 0.9)?;
        state.linear_decrement = 0.1;
        let ratios: Vec<String> = similarity
            .iter()
            .enumerate()
            .map(|(epoch, &s)| {
                state.epoch = epoch;
                format!("{:.2}", schedule_ratio(&mut state, Some(s)))
            })
            .collect();
        println!("{:<12} {}", format!("{kind:?}"), ratios.join(" "));
    }
    Ok(())
}
