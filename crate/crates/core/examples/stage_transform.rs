//! The training-only transformation: student tokens are partly replaced by
//! teacher tokens, and the hybrid sequence is decoded into a predicted teacher map.
//!
//! cargo run --release --example stage_transform

use dpk::losses::{feature_loss, Region};
use dpk::masking::random_mask;
use dpk::transform::{default_patch_size, FeatureMap, Filler, StageTransform, TransformParams, Variant};
use dpk_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dpk::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (batch, student, teacher, side) = (4, 32, 64, 8);
    let params = TransformParams {
        variant: Variant::EncoderDecoder,
        patch_size: default_patch_size(side, side),
        dim: 32,
        encoder_blocks: 1,
        decoder_blocks: 1,
        heads: 4,
        mlp_ratio: 4,
        ln_eps: 1e-5,
    };
    let t = StageTransform::<f32>::new("stage4", params, Filler::Teacher, (student, side, side), (teacher, side, side), &mut rng)?;
    println!(
        "grid {}x{} tokens of patch size {}, {} transform parameters (none belong to the student)",
        t.grid.rows,
        t.grid.cols,
        t.params.patch_size,
        t.training_only_parameters().len()
    );

    let fs = FeatureMap::new(Tensor::randn(&[batch, student, side, side], 1.0, &mut rng), 4)?;
    let ft = FeatureMap::new(Tensor::randn(&[batch, teacher, side, side], 1.0, &mut rng), 4)?;
    for ratio in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let masks: Vec<_> = (0..batch).map(|_| random_mask(t.grid, ratio, &mut rng)).collect();
        let pred = t.forward(&fs, &ft, &masks)?;
        let loss = feature_loss(&pred, &ft, Some(&masks), Region::Full)?;
        println!("ratio {ratio:.2}: predicted map {:?}, feature loss {:.4}", pred.values.shape(), loss.item());
    }
    Ok(())
}
