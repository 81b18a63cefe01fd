//! Deformable texture transfer at one scale: predict offset/mask fields
//! conditioned on the LR stream, transfer reference values through them,
//! and show the plain-warping reduction.
//!
//!     cargo run --release --example texture_transfer

use refattn::encoder::{bicubic_upsample, EncoderStack, Role, WeightRng, TINY_WIDTHS};
use refattn::matcher::match_features;
use refattn::num::tape::Tape;
use refattn::pipeline::toydata::toy_pair;
use refattn::rda::{ref_attention_with_map, warp_value, RdaHeads, RdaOptions, DEFAULT_RADIUS};

fn main() -> refattn::Result<()> {
    let out_dir = std::path::Path::new("target/examples/texture_transfer");
    std::fs::create_dir_all(out_dir)?;

    let pair = toy_pair(21, 160, 4, 12)?;
    let encoder = EncoderStack::seeded(0, TINY_WIDTHS);
    let lr_up = bicubic_upsample(&pair.lr, 4);
    let q = encoder.encode(&lr_up, Role::Query)?;
    let k = encoder.encode(&pair.reference, Role::Key)?;
    let v = encoder.encode(&pair.reference, Role::Value)?;
    let map = match_features(&q[2], &k[2], 2, 3)?;

    let tape = Tape::new();
    let vv = tape.constant(v[2].clone());
    // condition the heads on the query features themselves for this demo
    let f = tape.constant(q[2].clone());

    let mut rng = WeightRng::new(5);
    let heads = RdaHeads::seeded(&mut rng, TINY_WIDTHS[2], DEFAULT_RADIUS);
    let out = ref_attention_with_map(&tape, &map, &vv, &f, &heads, false, &RdaOptions::default())?;

    let offsets = out.fields.offsets.value();
    let max_offset = offsets.data().iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let masks = out.fields.masks.value();
    let mean_mask = masks.data().iter().sum::<f64>() / masks.numel() as f64;
    println!("max |offset| = {max_offset:.3} px (bound {DEFAULT_RADIUS})");
    println!("mean mask    = {mean_mask:.3} (fresh heads sit at 0.5)");

    // fully opened masks + identity kernel + zero offsets + a single
    // candidate = plain top-1 warping
    let map_top1 = match_features(&q[2], &k[2], 1, 3)?;
    let identity = RdaHeads::warping_identity(TINY_WIDTHS[2], DEFAULT_RADIUS);
    let opts = RdaOptions {
        mask_override: Some(1.0),
    };
    let reduced = ref_attention_with_map(&tape, &map_top1, &vv, &f, &identity, false, &opts)?;
    let warped = warp_value(&vv, &map_top1)?;
    let max_diff = reduced
        .attended
        .value()
        .data()
        .iter()
        .zip(warped.value().data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max)
        .max(0.0);
    println!("identity-config transfer vs top-1 warp: max diff {max_diff:.2e}");

    out.attended.value().save_ndar(&out_dir.join("attended.ndar"))?;
    offsets.save_ndar(&out_dir.join("offsets.ndar"))?;
    masks.save_ndar(&out_dir.join("masks.ndar"))?;
    println!("artifacts in {}", out_dir.display());
    Ok(())
}
