//! Acceptance suite: one test per criterion, one pass/fail line each
//! (run with `cargo test --test acceptance -- --nocapture` to see them).
//!
//! Criteria 7-9 share a single 200-step training run; criterion 10 drives
//! the installed binary twice and compares bytes.

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use refattn::aggregate::{unet_forward, ForwardOptions, UNetConfig, UNetWeights};
use refattn::encoder::{bicubic_upsample, EncoderStack, FeaturePyramid, WeightRng};
use refattn::matcher::{brute_force_match, match_features};
use refattn::num::tape::Tape;
use refattn::num::NdArray;
use refattn::pipeline::augment::{apply_photometric, sample_photometric, JITTER_LARGE};
use refattn::pipeline::infer::run_sr;
use refattn::pipeline::selftest::run_gradcheck;
use refattn::pipeline::toydata::{noise_reference, toy_pair};
use refattn::pipeline::train::train_toy;
use refattn::pipeline::{Checkpoint, RunConfig};
use refattn::rda::{predict_fields, ref_attention_with_map, warp_value, RdaHeads, RdaOptions};

fn randu(rng: &mut WeightRng, shape: &[usize], lo: f64, hi: f64) -> NdArray {
    let n: usize = shape.iter().product();
    NdArray::from_vec(shape, (0..n).map(|_| lo + (hi - lo) * rng.uniform()).collect()).unwrap()
}

fn mean_abs_diff(a: &NdArray, b: &NdArray) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.numel() as f64
}

/// Criterion 1: analytic gradients of every differentiable op and of the
/// composed RDA/RFA blocks match central finite differences, rel err < 1e-5,
/// within two minutes.
#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for module in ["numerics", "encoder", "rda", "rfa", "losses"] {
        for line in run_gradcheck(module, 7).expect("gradcheck") {
            assert!(
                line.report.max_rel_err < 1e-5,
                "criterion 1 FAIL: {} at {:.3e}",
                line.name,
                line.report.max_rel_err
            );
            worst = worst.max(line.report.max_rel_err);
        }
    }
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs() < 120,
        "criterion 1 FAIL: suite took {elapsed:?}"
    );
    println!("criterion 1 ok: gradient suite, worst rel err {worst:.3e} in {elapsed:.2?}");
}

/// Criterion 2: the blocked matcher equals the brute-force oracle exactly on
/// 50+ randomized cases up to 16x16, K in 1..=3, within a minute.
#[test]
fn criterion_2_matching_oracle() {
    let start = Instant::now();
    let mut rng = WeightRng::new(11);
    for case in 0..50u64 {
        let c = 2 + (case % 2) as usize;
        let qh = 4 + (rng.uniform() * 13.0) as usize; // 4..=16
        let qw = 4 + (rng.uniform() * 13.0) as usize;
        let kh = 4 + (rng.uniform() * 13.0) as usize;
        let kw = 4 + (rng.uniform() * 13.0) as usize;
        let k = 1 + (case % 3) as usize;
        let q = randu(&mut rng, &[c, qh, qw], -1.0, 1.0);
        let key = randu(&mut rng, &[c, kh, kw], -1.0, 1.0);
        let fast = match_features(&q, &key, k, 3).unwrap();
        let slow = brute_force_match(&q, &key, k, 3).unwrap();
        assert_eq!(fast.positions, slow.positions, "criterion 2 FAIL: case {case}");
        assert_eq!(
            fast.similarities, slow.similarities,
            "criterion 2 FAIL: case {case} similarities"
        );
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 60, "criterion 2 FAIL: took {elapsed:?}");
    println!("criterion 2 ok: 50 matcher/oracle cases identical in {elapsed:.2?}");
}

/// Criterion 3: positive per-patch rescaling of Q or K leaves positions and
/// similarities bit-unchanged, 20 randomized cases. Power-of-two factors
/// keep the rescaling exact in floating point.
#[test]
fn criterion_3_cosine_invariance() {
    let mut rng = WeightRng::new(23);
    for case in 0..20u64 {
        let q = randu(&mut rng, &[2, 6, 6], -1.0, 1.0);
        let key = randu(&mut rng, &[2, 6, 6], -1.0, 1.0);
        if case % 2 == 0 {
            // patch size 1: per-patch means per-position
            let base = match_features(&q, &key, 2, 1).unwrap();
            let scales: Vec<f64> = (0..36)
                .map(|_| [0.25, 0.5, 2.0, 4.0, 8.0][(rng.uniform() * 5.0) as usize % 5])
                .collect();
            let scaled_data: Vec<f64> = key
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v * scales[i % 36])
                .collect();
            let scaled = NdArray::from_vec(&[2, 6, 6], scaled_data).unwrap();
            let m = match_features(&q, &scaled, 2, 1).unwrap();
            assert_eq!(m.positions, base.positions, "criterion 3 FAIL: case {case}");
            assert_eq!(m.similarities, base.similarities, "criterion 3 FAIL: case {case}");
        } else {
            // overlapping 3x3 patches: a uniform positive rescaling
            let base = match_features(&q, &key, 2, 3).unwrap();
            let factor = [0.5, 2.0, 4.0, 0.25][(case as usize / 2) % 4];
            let scaled_q = q.map(|v| v * factor);
            let m = match_features(&scaled_q, &key, 2, 3).unwrap();
            assert_eq!(m.positions, base.positions, "criterion 3 FAIL: case {case}");
            assert_eq!(m.similarities, base.similarities, "criterion 3 FAIL: case {case}");
        }
    }
    println!("criterion 3 ok: 20 rescaling cases bit-identical");
}

/// Criterion 4: with zero offsets, unit masks, K=1 and an identity
/// center-tap kernel, the attention equals top-1 feature warping to 1e-12.
#[test]
fn criterion_4_rda_reduction() {
    let mut rng = WeightRng::new(31);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let q = randu(&mut rng, &[3, 6, 6], -1.0, 1.0);
        let key = randu(&mut rng, &[3, 6, 6], -1.0, 1.0);
        let map = match_features(&q, &key, 1, 3).unwrap();
        let heads = RdaHeads::warping_identity(3, 10.0);
        let tape = Tape::new();
        let v = tape.constant(randu(&mut rng, &[3, 6, 6], -1.0, 1.0));
        let f = tape.constant(randu(&mut rng, &[3, 6, 6], -1.0, 1.0));
        let opts = RdaOptions {
            mask_override: Some(1.0),
        };
        let out = ref_attention_with_map(&tape, &map, &v, &f, &heads, false, &opts).unwrap();
        let warped = warp_value(&v, &map).unwrap();
        let diff = out
            .attended
            .value()
            .data()
            .iter()
            .zip(warped.value().data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(diff <= 1e-12, "criterion 4 FAIL: max diff {diff}");
        worst = worst.max(diff);
    }
    println!("criterion 4 ok: reduction to feature warping, max diff {worst:.2e}");
}

/// Criterion 5: with every learnable tensor zeroed the output equals the
/// bicubic upsample bit-exactly.
#[test]
fn criterion_5_residual_identity() {
    let stack = EncoderStack::seeded(3, refattn::encoder::TINY_WIDTHS);
    let pair = toy_pair(5, 64, 4, 8).unwrap();
    let lr_up = bicubic_upsample(&pair.lr, 4);
    let pyramid = FeaturePyramid::build(&stack, &lr_up, &pair.reference).unwrap();
    let weights = UNetWeights::zeroed(UNetConfig::tiny());
    let tape = Tape::new();
    let out = unet_forward(&tape, &pyramid, &lr_up, &weights, false, &ForwardOptions::default())
        .unwrap();
    let sr = out.sr.value();
    let identical = sr
        .data()
        .iter()
        .zip(lr_up.array().data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    assert!(identical, "criterion 5 FAIL: zeroed network output differs from bicubic");
    println!("criterion 5 ok: zeroed network is bit-exact bicubic upsampling");
}

/// Criterion 6: cooperative weights sum to 1 within 1e-12, |offsets| <= 10,
/// masks in [0,1], over 100 random forward passes.
#[test]
fn criterion_6_field_invariants() {
    let mut rng = WeightRng::new(41);
    let mut heads_rng = WeightRng::new(43);
    for pass in 0..100 {
        // fresh random heads with active (non-zero) output layers
        let heads = RdaHeads {
            offset_out: refattn::encoder::Conv::seeded(&mut heads_rng, 2 * refattn::rda::TAPS, 2, 3, 1),
            mask_out: refattn::encoder::Conv::seeded(&mut heads_rng, refattn::rda::TAPS, 2, 3, 1),
            ..RdaHeads::seeded(&mut heads_rng, 2, 10.0)
        };
        let q = randu(&mut rng, &[2, 4, 4], -1.0, 1.0);
        let key = randu(&mut rng, &[2, 4, 4], -1.0, 1.0);
        let k = 1 + pass % 3;
        let map = match_features(&q, &key, k, 3).unwrap();
        let tape = Tape::new();
        let f = tape.constant(randu(&mut rng, &[2, 4, 4], -2.0, 2.0));
        let v = tape.constant(randu(&mut rng, &[2, 4, 4], -2.0, 2.0));
        let fields =
            predict_fields(&tape, &f, &v, &map, &heads, false, &RdaOptions::default()).unwrap();
        let offsets = fields.offsets.value();
        assert!(
            offsets.data().iter().all(|o| o.abs() <= 10.0),
            "criterion 6 FAIL: offset bound violated on pass {pass}"
        );
        let masks = fields.masks.value();
        assert!(
            masks.data().iter().all(|m| (0.0..=1.0).contains(m)),
            "criterion 6 FAIL: mask range violated on pass {pass}"
        );
        let coop = fields.coop_weights.value();
        for i in 0..16 {
            let sum: f64 = (0..k).map(|r| coop.data()[r * 16 + i]).sum();
            assert!(
                (sum - 1.0).abs() <= 1e-12,
                "criterion 6 FAIL: cooperative sum {sum} on pass {pass}"
            );
        }
    }
    println!("criterion 6 ok: simplex/bound invariants over 100 forward passes");
}

// ---------------------------------------------------------------------------
// shared trained fixture for criteria 7-9

struct Trained {
    checkpoint: Checkpoint,
    initial_rec: f64,
    final_rec: f64,
    train_seconds: f64,
}

fn smoke_config() -> RunConfig {
    RunConfig {
        seed: 0,
        steps: 200,
        geometric_augment: false,
        brightness_jitter: 0.0,
        contrast_jitter: 0.0,
        hue_jitter: 0.0,
        ..RunConfig::toy()
    }
}

fn trained() -> &'static Trained {
    static FIXTURE: OnceLock<Trained> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let config = smoke_config();
        let pair = toy_pair(config.seed, config.hr_patch, config.scale_factor, 8).unwrap();
        let dir = std::env::temp_dir().join(format!("refattn-acceptance-{}", std::process::id()));
        let start = Instant::now();
        let outcome = train_toy(&[pair], &config, &dir).expect("toy training");
        let train_seconds = start.elapsed().as_secs_f64();
        let checkpoint = Checkpoint::load(&outcome.checkpoint_dir).expect("checkpoint loads");
        let initial_rec = outcome.reports.first().unwrap().rec;
        let final_rec = outcome.reports.last().unwrap().rec;
        std::fs::remove_dir_all(&dir).ok();
        Trained {
            checkpoint,
            initial_rec,
            final_rec,
            train_seconds,
        }
    })
}

/// Criterion 7: 200 reconstruction-only steps on one 40x40 -> 160x160 pair
/// at tiny widths at least halve the reconstruction loss, all finite,
/// within ten minutes.
#[test]
fn criterion_7_overfit_smoke() {
    let t = trained();
    assert!(
        t.final_rec.is_finite() && t.initial_rec.is_finite(),
        "criterion 7 FAIL: non-finite losses"
    );
    assert!(
        t.final_rec <= 0.5 * t.initial_rec,
        "criterion 7 FAIL: rec {} -> {} did not halve",
        t.initial_rec,
        t.final_rec
    );
    assert!(
        t.train_seconds < 600.0,
        "criterion 7 FAIL: training took {:.0}s",
        t.train_seconds
    );
    println!(
        "criterion 7 ok: rec {:.5} -> {:.5} ({:.1}% of start) in {:.0}s",
        t.initial_rec,
        t.final_rec,
        100.0 * t.final_rec / t.initial_rec,
        t.train_seconds
    );
}

/// Criterion 8: with the trained checkpoint, a ground-truth-derived
/// reference beats a random-noise reference on at least 4 of 5 test pairs.
#[test]
fn criterion_8_relevance_ordering() {
    let t = trained();
    let mut wins = 0;
    for i in 0..5u64 {
        let pair = toy_pair(1000 + i, 160, 4, 8).unwrap();
        let with_gt = run_sr(&pair.lr, &pair.hr, &t.checkpoint, None).unwrap();
        let noise = noise_reference(2000 + i, 160, 160);
        let with_noise = run_sr(&pair.lr, &noise, &t.checkpoint, None).unwrap();
        let rec_gt = mean_abs_diff(&with_gt.raw, pair.hr.array());
        let rec_noise = mean_abs_diff(&with_noise.raw, pair.hr.array());
        if rec_gt < rec_noise {
            wins += 1;
        }
    }
    assert!(wins >= 4, "criterion 8 FAIL: gt reference won only {wins}/5");
    println!("criterion 8 ok: ground-truth reference wins {wins}/5 pairs");
}

/// Criterion 9: large photometric jitter of the reference raises the
/// reconstruction loss by less than 50% on the same pairs.
#[test]
fn criterion_9_bounded_degradation() {
    let t = trained();
    let mut rng = WeightRng::new(77);
    let mut worst = f64::NEG_INFINITY;
    for i in 0..5u64 {
        let pair = toy_pair(1000 + i, 160, 4, 8).unwrap();
        let clean = run_sr(&pair.lr, &pair.reference, &t.checkpoint, None).unwrap();
        let (b, c, h) = sample_photometric(&mut rng, &JITTER_LARGE);
        let jittered = apply_photometric(&pair.reference, b, c, h);
        let jit = run_sr(&pair.lr, &jittered, &t.checkpoint, None).unwrap();
        let rec_clean = mean_abs_diff(&clean.raw, pair.hr.array());
        let rec_jit = mean_abs_diff(&jit.raw, pair.hr.array());
        let increase = (rec_jit - rec_clean) / rec_clean;
        worst = worst.max(increase);
        assert!(
            increase < 0.5,
            "criterion 9 FAIL: pair {i} degraded by {:.0}%",
            100.0 * increase
        );
    }
    println!(
        "criterion 9 ok: worst jitter degradation {:.1}% (< 50%)",
        100.0 * worst
    );
}

/// Criterion 10: `selftest` and `train-toy` with identical seeds produce
/// bit-identical logs and checkpoints.
#[test]
fn criterion_10_determinism() {
    let bin = env!("CARGO_BIN_EXE_refattn");

    let selftest = |i: u32| {
        let out = std::process::Command::new(bin)
            .arg("selftest")
            .output()
            .expect("selftest runs");
        assert!(out.status.success(), "selftest run {i} failed");
        out.stdout
    };
    assert_eq!(selftest(1), selftest(2), "criterion 10 FAIL: selftest logs differ");

    let train = |dir: &PathBuf| {
        let out = std::process::Command::new(bin)
            .args(["train-toy", "--steps", "12", "--seed", "5", "--out"])
            .arg(dir)
            .output()
            .expect("train-toy runs");
        assert!(
            out.status.success(),
            "train-toy failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    let base = std::env::temp_dir().join(format!("refattn-det-{}", std::process::id()));
    let (dir_a, dir_b) = (base.join("a"), base.join("b"));
    train(&dir_a);
    train(&dir_b);

    let log_a = std::fs::read(dir_a.join("loss_log.jsonl")).unwrap();
    let log_b = std::fs::read(dir_b.join("loss_log.jsonl")).unwrap();
    assert_eq!(log_a, log_b, "criterion 10 FAIL: loss logs differ");

    let mut files: Vec<String> = std::fs::read_dir(dir_a.join("checkpoint"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    files.sort();
    assert!(!files.is_empty());
    for f in &files {
        let a = std::fs::read(dir_a.join("checkpoint").join(f)).unwrap();
        let b = std::fs::read(dir_b.join("checkpoint").join(f)).unwrap();
        assert_eq!(a, b, "criterion 10 FAIL: checkpoint file {f} differs");
    }
    std::fs::remove_dir_all(&base).ok();
    println!(
        "criterion 10 ok: identical logs and {} identical checkpoint files",
        files.len()
    );
}
