//! The loss suite: reconstruction, perceptual distance through the fixed
//! encoder, and the Wasserstein critic with its trainable gradient penalty.
//!
//!     cargo run --release --example adversarial_losses

use refattn::encoder::{EncoderStack, TINY_WIDTHS};
use refattn::losses::{
    adv_losses, perceptual_loss, rec_loss, Critic, LossReport, DEFAULT_LAMBDA1, DEFAULT_LAMBDA2,
};
use refattn::num::tape::Tape;
use refattn::pipeline::toydata::{noise_reference, toy_pair};

fn main() -> refattn::Result<()> {
    let pair = toy_pair(17, 64, 4, 8)?;
    let fake = noise_reference(3, 64, 64);
    let encoder = EncoderStack::seeded(0, TINY_WIDTHS);

    let tape = Tape::new();
    let hr = tape.constant(pair.hr.array().clone());
    let sr = tape.constant(fake.array().clone());

    let rec = rec_loss(&sr, &hr)?;
    let per = perceptual_loss(&tape, &sr, &hr, &encoder)?;
    println!("rec loss (mean abs):     {:.5}", rec.item());
    println!("perceptual (deep feats): {:.5}", per.item());

    let critic = Critic::seeded(9, 4);
    let taped = critic.lift(&tape, true);
    let (critic_loss, gen_loss) = adv_losses(&taped, &[&sr], &[&hr], &[0.5])?;
    println!("critic loss (incl. gradient penalty): {:.5}", critic_loss.item());
    println!("generator adversarial term:            {:.5}", gen_loss.item());

    // the penalty differentiates through the critic weights
    tape.backward(&critic_loss)?;
    let grads = tape.leaf_grads_by_buffer();
    println!("critic parameters receiving gradients: {}", grads.len());

    let report = LossReport::new(
        rec.item(),
        per.item(),
        gen_loss.item(),
        DEFAULT_LAMBDA1,
        DEFAULT_LAMBDA2,
    )?;
    println!(
        "weighted total: {:.6} = rec + {:.0e}*per + {:.0e}*adv",
        report.total, report.lambda1, report.lambda2
    );
    Ok(())
}
