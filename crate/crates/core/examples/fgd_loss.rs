//! Loss terms: temperature-scaled logit KD and the focal-and-global
//! feature loss with a box-shaped foreground mask.
//!
//! cargo run --release --example fgd_loss

use dpk::losses::{fgd_terms, logits_kd_loss, total_loss, FgdInputs, KdOptions, LogitsPair, LossWeights, FGD_ONE_STAGE, FGD_TWO_STAGE};
use dpk_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dpk::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let student = Tensor::<f64>::randn(&[8, 10], 2.0, &mut rng);
    let teacher = Tensor::<f64>::randn(&[8, 10], 2.0, &mut rng);
    for tau in [1.0, 2.0, 4.0] {
        let kd = logits_kd_loss(&LogitsPair::new(student.clone(), teacher.clone(), tau)?, KdOptions::default());
        println!("logit KD at tau {tau}: {:.4}", kd.item());
    }

    let (b, c, h, w) = (2, 16, 12, 12);
    // one object box per image
    let mut fg = vec![0.0; b * h * w];
    for (i, v) in fg.iter_mut().enumerate() {
        let (y, x) = ((i / w) % h, i % w);
        *v = f64::from(u8::from((3..9).contains(&y) && (2..7).contains(&x)));
    }
    for (name, (w_f, w_b)) in [("one-stage", FGD_ONE_STAGE), ("two-stage", FGD_TWO_STAGE)] {
        let inputs = FgdInputs {
            teacher: Tensor::randn(&[b, c, h, w], 1.0, &mut rng),
            hybrid: Tensor::randn(&[b, c, h, w], 1.0, &mut rng),
            fg_mask: Tensor::from_vec(fg.clone(), &[b, 1, h, w]),
            spatial_attn: Tensor::rand_uniform(&[b, 1, h, w], 0.0, 2.0, &mut rng),
            channel_attn: Tensor::rand_uniform(&[b, c, 1, 1], 0.0, 2.0, &mut rng),
            w_f,
            w_b,
        };
        let (fg_term, bg_term) = fgd_terms(&inputs)?;
        println!("FGD {name}: foreground {:.5}, background {:.5}", fg_term.item(), bg_term.item());
    }

    let weights = LossWeights::default();
    let total = total_loss(&Tensor::scalar(2.3), &Tensor::scalar(0.4), &Tensor::scalar(1.1), &weights);
    println!("total = cls + {} * logits + {} * feature = {:.3}", weights.alpha, weights.beta, total.item());
    Ok(())
}
