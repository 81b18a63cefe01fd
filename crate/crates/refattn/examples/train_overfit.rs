//! A short overfitting run on one procedural pair: reconstruction-only
//! training with everything seeded, so re-running gives byte-identical logs.
//!
//!     cargo run --release --example train_overfit

use refattn::pipeline::toydata::toy_pair;
use refattn::pipeline::train::train_toy;
use refattn::pipeline::RunConfig;

fn main() -> refattn::Result<()> {
    let out_dir = std::path::Path::new("target/examples/train_overfit");
    let config = RunConfig {
        steps: 40,
        lr_patch: 20,
        hr_patch: 80,
        geometric_augment: false,
        brightness_jitter: 0.0,
        contrast_jitter: 0.0,
        hue_jitter: 0.0,
        ..RunConfig::toy()
    };
    let pair = toy_pair(config.seed, config.hr_patch, config.scale_factor, 8)?;
    let outcome = train_toy(&[pair], &config, out_dir)?;

    let first = outcome.reports.first().unwrap();
    let last = outcome.reports.last().unwrap();
    println!(
        "rec loss over {} steps: {:.5} -> {:.5} ({:.1}% of start)",
        config.steps,
        first.rec,
        last.rec,
        100.0 * last.rec / first.rec
    );
    println!("loss log:  {}", outcome.log_path.display());
    println!("checkpoint: {}", outcome.checkpoint_dir.display());
    Ok(())
}
