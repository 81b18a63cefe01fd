//! Feature pyramids and the tensor dump format: encode an image at three
//! scales, save the encoder weights with their manifest, reload them, and
//! verify the reload reproduces the same features.
//!
//!     cargo run --release --example encode_pyramid

use refattn::encoder::{bicubic_upsample, EncoderStack, Role, TINY_WIDTHS};
use refattn::num::NdArray;
use refattn::pipeline::toydata::toy_pair;

fn main() -> refattn::Result<()> {
    let out_dir = std::path::Path::new("target/examples/encode_pyramid");
    std::fs::create_dir_all(out_dir)?;

    let pair = toy_pair(13, 128, 4, 8)?;
    let lr_up = bicubic_upsample(&pair.lr, 4);
    let stack = EncoderStack::seeded(42, TINY_WIDTHS);

    let q = stack.encode(&lr_up, Role::Query)?;
    let k = stack.encode(&lr_up, Role::Key)?;
    for l in 0..3 {
        println!("scale {}: {:?} (stride {})", l + 1, q[l].shape(), 1 << l);
        assert_eq!(q[l].data(), k[l].data(), "query/key share weights");
        q[l].save_ndar(&out_dir.join(format!("q.s{}.ndar", l + 1)))?;
    }

    // weight round trip through the dump format + manifest
    let weights_dir = out_dir.join("encoder");
    stack.save(&weights_dir)?;
    let reloaded = EncoderStack::load(&weights_dir)?;
    let q2 = reloaded.encode(&lr_up, Role::Query)?;
    let max_diff = q[2]
        .data()
        .iter()
        .zip(q2[2].data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("reloaded-weights feature deviation: {max_diff:.2e} (f32 dump precision)");

    let restored = NdArray::load_ndar(&out_dir.join("q.s3.ndar"))?;
    println!("reloaded q.s3.ndar with shape {:?}", restored.shape());
    println!("artifacts in {}", out_dir.display());
    Ok(())
}
