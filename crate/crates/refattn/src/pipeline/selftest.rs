//! In-process oracle and invariant suite behind `refattn selftest` and
//! `refattn gradcheck`. Output is deterministic (fixed seeds, no timings),
//! so two runs produce byte-identical logs.

use std::io::Write;

use crate::aggregate::{unet_forward, ForwardOptions, RfaStack, UNetConfig, UNetWeights};
use crate::encoder::{bicubic_upsample, EncoderStack, FeaturePyramid, ImagePlane, Role, WeightRng};
use crate::error::{Error, Result};
use crate::losses::{gradient_penalty, perceptual_loss, rec_loss, Critic};
use crate::matcher::{brute_force_match, match_features};
use crate::num::gradcheck::{check_gradients, CheckConfig, CheckReport};
use crate::num::tape::{Tape, Var};
use crate::num::{kernels, ops, NdArray};
use crate::rda::{ref_attention_with_map, RdaHeads, RdaOptions};

fn randu(rng: &mut WeightRng, shape: &[usize], lo: f64, hi: f64) -> NdArray {
    let n: usize = shape.iter().product();
    NdArray::new_unchecked(shape, (0..n).map(|_| lo + (hi - lo) * rng.uniform()).collect())
}

// ---------------------------------------------------------------------------
// selftest

type Check = (&'static str, fn() -> std::result::Result<(), String>);

fn conv_against_quadruple_loop() -> std::result::Result<(), String> {
    let mut rng = WeightRng::new(100);
    for &(cin, h, w, cout, stride, pad) in
        &[(2usize, 5usize, 5usize, 3usize, 1usize, 1usize), (3, 6, 8, 2, 2, 1)]
    {
        let x = randu(&mut rng, &[cin, h, w], -1.0, 1.0);
        let wgt = randu(&mut rng, &[cout, cin, 3, 3], -1.0, 1.0);
        let tape = Tape::new();
        let got = ops::conv2d(&tape.constant(x.clone()), &tape.constant(wgt.clone()), None, stride, pad)
            .map_err(|e| e.to_string())?
            .value();
        let ho = kernels::conv_out_dim(h, 3, stride, pad).unwrap();
        let wo = kernels::conv_out_dim(w, 3, stride, pad).unwrap();
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut want = 0.0;
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    want += x.data()[(ci * h + iy as usize) * w + ix as usize]
                                        * wgt.data()[((co * cin + ci) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                    }
                    let gotv = got.data()[(co * ho + oy) * wo + ox];
                    if (gotv - want).abs() > 1e-12 {
                        return Err(format!("conv deviates from oracle: {gotv} vs {want}"));
                    }
                }
            }
        }
    }
    Ok(())
}

fn matcher_against_brute_force() -> std::result::Result<(), String> {
    let mut rng = WeightRng::new(200);
    for case in 0..8 {
        let q = randu(&mut rng, &[2, 6, 6], -1.0, 1.0);
        let key = randu(&mut rng, &[2, 6, 6], -1.0, 1.0);
        let k = 1 + case % 3;
        let fast = match_features(&q, &key, k, 3).map_err(|e| e.to_string())?;
        let slow = brute_force_match(&q, &key, k, 3).map_err(|e| e.to_string())?;
        if fast.positions != slow.positions || fast.similarities != slow.similarities {
            return Err(format!("case {case}: blocked match deviates from brute force"));
        }
    }
    Ok(())
}

fn cosine_invariance_bitwise() -> std::result::Result<(), String> {
    let mut rng = WeightRng::new(300);
    for case in 0..5 {
        let q = randu(&mut rng, &[2, 5, 5], -1.0, 1.0);
        let key = randu(&mut rng, &[2, 5, 5], -1.0, 1.0);
        let base = match_features(&q, &key, 2, 3).map_err(|e| e.to_string())?;
        let scaled = key.map(|v| v * 4.0); // power of two: exact in binary
        let m = match_features(&q, &scaled, 2, 3).map_err(|e| e.to_string())?;
        if m.positions != base.positions || m.similarities != base.similarities {
            return Err(format!("case {case}: positive rescaling changed the match"));
        }
    }
    Ok(())
}

fn rda_reduces_to_warping() -> std::result::Result<(), String> {
    let mut rng = WeightRng::new(400);
    let f = randu(&mut rng, &[2, 5, 5], -1.0, 1.0);
    let map = match_features(&f, &f, 1, 3).map_err(|e| e.to_string())?;
    let heads = RdaHeads::warping_identity(2, crate::rda::DEFAULT_RADIUS);
    let tape = Tape::new();
    let lr = tape.constant(randu(&mut rng, &[2, 5, 5], -1.0, 1.0));
    let v = tape.constant(randu(&mut rng, &[2, 5, 5], -1.0, 1.0));
    let opts = RdaOptions {
        mask_override: Some(1.0),
    };
    let out = ref_attention_with_map(&tape, &map, &v, &lr, &heads, false, &opts)
        .map_err(|e| e.to_string())?;
    let warped = crate::rda::warp_value(&v, &map).map_err(|e| e.to_string())?;
    for (a, b) in out.attended.value().data().iter().zip(warped.value().data()) {
        if (a - b).abs() > 1e-12 {
            return Err(format!("transfer {a} deviates from warp {b}"));
        }
    }
    Ok(())
}

fn residual_identity_bitwise() -> std::result::Result<(), String> {
    let stack = EncoderStack::seeded(3, crate::encoder::TINY_WIDTHS);
    let lr = ImagePlane::from_fn(8, 8, |c, y, x| ((c * 7 + y * 3 + x) % 11) as f64 / 11.0);
    let reference = ImagePlane::from_fn(32, 32, |c, y, x| ((c + y + x) % 9) as f64 / 9.0);
    let lr_up = bicubic_upsample(&lr, 4);
    let pyramid = FeaturePyramid::build(&stack, &lr_up, &reference).map_err(|e| e.to_string())?;
    let weights = UNetWeights::zeroed(UNetConfig::tiny());
    let tape = Tape::new();
    let out = unet_forward(&tape, &pyramid, &lr_up, &weights, false, &ForwardOptions::default())
        .map_err(|e| e.to_string())?;
    if out.sr.value().data() != lr_up.array().data() {
        return Err("zeroed network does not reproduce the bicubic skip".to_string());
    }
    Ok(())
}

fn field_invariants_hold() -> std::result::Result<(), String> {
    let mut rng = WeightRng::new(500);
    let mut heads_rng = WeightRng::new(501);
    let heads = RdaHeads {
        offset_out: crate::encoder::Conv::seeded(&mut heads_rng, 2 * crate::rda::TAPS, 2, 3, 1),
        mask_out: crate::encoder::Conv::seeded(&mut heads_rng, crate::rda::TAPS, 2, 3, 1),
        ..RdaHeads::seeded(&mut heads_rng, 2, crate::rda::DEFAULT_RADIUS)
    };
    for case in 0..10 {
        let q = randu(&mut rng, &[2, 4, 4], -1.0, 1.0);
        let key = randu(&mut rng, &[2, 4, 4], -1.0, 1.0);
        let map = match_features(&q, &key, 2, 3).map_err(|e| e.to_string())?;
        let tape = Tape::new();
        let f = tape.constant(randu(&mut rng, &[2, 4, 4], -1.0, 1.0));
        let v = tape.constant(randu(&mut rng, &[2, 4, 4], -1.0, 1.0));
        let fields =
            crate::rda::predict_fields(&tape, &f, &v, &map, &heads, false, &RdaOptions::default())
                .map_err(|e| e.to_string())?;
        let offsets = fields.offsets.value();
        if offsets.data().iter().any(|o| o.abs() > crate::rda::DEFAULT_RADIUS) {
            return Err(format!("case {case}: offset escaped the radius bound"));
        }
        let masks = fields.masks.value();
        if masks.data().iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(format!("case {case}: mask escaped [0,1]"));
        }
        let coop = fields.coop_weights.value();
        for i in 0..16 {
            let s: f64 = (0..2).map(|r| coop.data()[r * 16 + i]).sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(format!("case {case}: cooperative weights sum to {s}"));
            }
        }
    }
    Ok(())
}

fn softmax_and_unfold_contracts() -> std::result::Result<(), String> {
    let mut rng = WeightRng::new(600);
    let x = randu(&mut rng, &[5, 7], -3.0, 3.0);
    let tape = Tape::new();
    let s = ops::softmax(&tape.constant(x), 1).value();
    for r in 0..5 {
        let sum: f64 = s.data()[r * 7..(r + 1) * 7].iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(format!("softmax row sums to {sum}"));
        }
    }
    let f = randu(&mut rng, &[2, 4, 4], -1.0, 1.0);
    let u = ops::unfold(&tape.constant(f.clone()), 3, 1).value();
    for ci in 0..2 {
        let row = ci * 9 + 4;
        let got = &u.data()[row * 16..(row + 1) * 16];
        if got != &f.data()[ci * 16..(ci + 1) * 16] {
            return Err("unfold center tap does not recover the input".to_string());
        }
    }
    Ok(())
}

fn png_and_ndar_round_trips() -> std::result::Result<(), String> {
    let dir = std::env::temp_dir().join(format!("refattn-selftest-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let img = ImagePlane::from_fn(6, 5, |c, y, x| ((c * 83 + y * 17 + x * 29) % 256) as f64 / 255.0);
    let path = dir.join("t.png");
    super::image_io::save_png(&img, &path).map_err(|e| e.to_string())?;
    let back = super::image_io::load_png(&path).map_err(|e| e.to_string())?;
    let png_ok = back.array().data() == img.array().data();

    let a = NdArray::from_vec(&[2, 2], vec![0.5, -1.25, 3.0, 0.0]).map_err(|e| e.to_string())?;
    let npath = dir.join("t.ndar");
    a.save_ndar(&npath).map_err(|e| e.to_string())?;
    let b = NdArray::load_ndar(&npath).map_err(|e| e.to_string())?;
    std::fs::remove_dir_all(&dir).ok();
    if !png_ok {
        return Err("png round trip changed pixel values".to_string());
    }
    if a.data() != b.data() {
        return Err("tensor dump round trip changed values".to_string());
    }
    Ok(())
}

fn gradients_spot_check() -> std::result::Result<(), String> {
    let mut rng = WeightRng::new(700);
    let src = randu(&mut rng, &[2, 4, 4], -1.0, 1.0);
    let coords = randu(&mut rng, &[2, 3, 3], 0.2, 2.8);
    let report = check_gradients(
        &[src, coords],
        |_, vars| {
            let s = ops::bilinear_sample(&vars[0], &vars[1]);
            ops::sum_all(&ops::mul(&s, &s))
        },
        &CheckConfig::default(),
    );
    if report.max_rel_err >= 1e-6 {
        return Err(format!("bilinear gradient error {}", report.max_rel_err));
    }
    let x = randu(&mut rng, &[9], -2.0, 2.0);
    let report = check_gradients(
        &[x],
        |_, vars| ops::sum_all(&ops::mul(&ops::tanh(&vars[0]), &ops::sigmoid(&vars[0]))),
        &CheckConfig::default(),
    );
    if report.max_rel_err >= 1e-6 {
        return Err(format!("activation gradient error {}", report.max_rel_err));
    }
    Ok(())
}

fn deterministic_generation() -> std::result::Result<(), String> {
    let a = super::toydata::toy_pair(11, 32, 4, 4).map_err(|e| e.to_string())?;
    let b = super::toydata::toy_pair(11, 32, 4, 4).map_err(|e| e.to_string())?;
    if a.hr.array().data() != b.hr.array().data() {
        return Err("toy pair generation is not deterministic".to_string());
    }
    let q = a.hr.array().reshape(&[3, 32, 32]).map_err(|e| e.to_string())?;
    let m1 = match_features(&q, &q, 2, 3).map_err(|e| e.to_string())?;
    let m2 = match_features(&q, &q, 2, 3).map_err(|e| e.to_string())?;
    if m1.positions != m2.positions || m1.similarities != m2.similarities {
        return Err("matching is not deterministic".to_string());
    }
    Ok(())
}

const CHECKS: &[Check] = &[
    ("conv_vs_quadruple_loop_oracle", conv_against_quadruple_loop),
    ("matcher_vs_brute_force", matcher_against_brute_force),
    ("cosine_invariance_bitwise", cosine_invariance_bitwise),
    ("rda_reduction_to_warping", rda_reduces_to_warping),
    ("residual_identity_bitwise", residual_identity_bitwise),
    ("field_invariants", field_invariants_hold),
    ("softmax_and_unfold_contracts", softmax_and_unfold_contracts),
    ("png_and_ndar_round_trips", png_and_ndar_round_trips),
    ("gradient_spot_checks", gradients_spot_check),
    ("deterministic_generation", deterministic_generation),
];

/// Runs every check, printing one line per check and a final tally.
/// Returns (passed, total).
pub fn run_selftest(out: &mut dyn Write) -> Result<(usize, usize)> {
    let mut passed = 0;
    for (name, check) in CHECKS {
        match check() {
            Ok(()) => {
                writeln!(out, "ok   {name}")?;
                passed += 1;
            }
            Err(msg) => {
                writeln!(out, "FAIL {name}: {msg}")?;
            }
        }
    }
    writeln!(out, "selftest: {passed}/{} checks passed", CHECKS.len())?;
    Ok((passed, CHECKS.len()))
}

// ---------------------------------------------------------------------------
// gradcheck

pub struct GradcheckLine {
    pub name: String,
    pub report: CheckReport,
    pub tolerance: f64,
}

impl GradcheckLine {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err < self.tolerance
    }
}

fn line(name: &str, tolerance: f64, report: CheckReport) -> GradcheckLine {
    GradcheckLine {
        name: name.to_string(),
        report,
        tolerance,
    }
}

fn numerics_checks(seed: u64) -> Vec<GradcheckLine> {
    let mut rng = WeightRng::new(seed);
    let mut out = Vec::new();
    let cfg = CheckConfig::default();

    let x = randu(&mut rng, &[11], -2.0, 2.0);
    for (name, f) in [
        ("tanh", ops::tanh as fn(&Var) -> Var),
        ("sigmoid", ops::sigmoid),
        ("gelu", ops::gelu),
        ("abs", ops::abs),
    ] {
        let r = check_gradients(
            std::slice::from_ref(&x),
            move |_, vars| ops::sum_all(&ops::mul(&f(&vars[0]), &f(&vars[0]))),
            &cfg,
        );
        out.push(line(name, 1e-6, r));
    }

    let a = randu(&mut rng, &[3, 4], -1.0, 1.0);
    let b = randu(&mut rng, &[4, 2], -1.0, 1.0);
    out.push(line(
        "matmul",
        1e-6,
        check_gradients(
            &[a, b],
            |_, vars| {
                let y = ops::matmul(&vars[0], &vars[1]).unwrap();
                ops::sum_all(&ops::mul(&y, &y))
            },
            &cfg,
        ),
    ));

    let x = randu(&mut rng, &[2, 5, 5], -1.0, 1.0);
    let w = randu(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let bias = randu(&mut rng, &[3], -0.5, 0.5);
    out.push(line(
        "conv2d",
        1e-5,
        check_gradients(
            &[x, w, bias],
            |_, vars| {
                ops::sum_all(&ops::abs(
                    &ops::conv2d(&vars[0], &vars[1], Some(&vars[2]), 1, 1).unwrap(),
                ))
            },
            &cfg,
        ),
    ));

    let src = randu(&mut rng, &[2, 4, 4], -1.0, 1.0);
    let coords = randu(&mut rng, &[2, 3, 3], 0.2, 2.8);
    out.push(line(
        "bilinear_sample",
        1e-6,
        check_gradients(
            &[src, coords],
            |_, vars| {
                let s = ops::bilinear_sample(&vars[0], &vars[1]);
                ops::sum_all(&ops::mul(&s, &s))
            },
            &cfg,
        ),
    ));

    let x = randu(&mut rng, &[4, 6], -1.5, 1.5);
    out.push(line(
        "softmax",
        1e-6,
        check_gradients(
            std::slice::from_ref(&x),
            |tape, vars| {
                let s = ops::softmax(&vars[0], 1);
                let w = tape.constant(NdArray::full(&[4, 6], 0.37));
                ops::sum_all(&ops::mul(&s, &ops::add(&w, &s)))
            },
            &cfg,
        ),
    ));
    out.push(line(
        "l2_normalize",
        1e-6,
        check_gradients(
            &[x],
            |tape, vars| {
                let y = ops::l2_normalize(&vars[0], 1);
                let w = tape.constant(NdArray::full(&[4, 6], 0.61));
                ops::sum_all(&ops::mul(&y, &w))
            },
            &cfg,
        ),
    ));

    let x = randu(&mut rng, &[2, 4, 4], -1.0, 1.0);
    out.push(line(
        "unfold",
        1e-6,
        check_gradients(
            &[x],
            |_, vars| {
                let u = ops::unfold(&vars[0], 3, 1);
                ops::sum_all(&ops::mul(&u, &u))
            },
            &cfg,
        ),
    ));

    let x = randu(&mut rng, &[5, 4], -1.0, 1.0);
    let g = randu(&mut rng, &[4], 0.5, 1.5);
    let bta = randu(&mut rng, &[4], -0.5, 0.5);
    out.push(line(
        "layer_norm",
        1e-5,
        check_gradients(
            &[x, g, bta],
            |_, vars| {
                let y = ops::layer_norm_rows(&vars[0], &vars[1], &vars[2]);
                ops::sum_all(&ops::mul(&y, &y))
            },
            &cfg,
        ),
    ));
    out
}

fn encoder_checks(seed: u64) -> Vec<GradcheckLine> {
    let mut rng = WeightRng::new(seed);
    let stack = EncoderStack::seeded(seed, crate::encoder::TINY_WIDTHS);
    let img = randu(&mut rng, &[3, 8, 8], 0.05, 0.95);
    let r = check_gradients(
        &[img],
        |tape, vars| {
            let feats = stack.encode_vars(tape, &vars[0], Role::Value, false).unwrap();
            ops::sum_all(&ops::mul(&feats[2], &feats[2]))
        },
        &CheckConfig {
            step: 1e-5,
            max_elems_per_input: Some(64),
        },
    );
    vec![line("encoder_input_gradient", 1e-5, r)]
}

fn rda_checks(seed: u64) -> Vec<GradcheckLine> {
    let mut rng = WeightRng::new(seed);
    let q = randu(&mut rng, &[2, 4, 4], -1.0, 1.0);
    let key = randu(&mut rng, &[2, 4, 4], -1.0, 1.0);
    let map = match_features(&q, &key, 2, 3).expect("toy match");
    let mut heads_rng = WeightRng::new(seed ^ 0x5eed);
    let heads = RdaHeads {
        offset_out: crate::encoder::Conv::seeded(&mut heads_rng, 2 * crate::rda::TAPS, 2, 3, 1),
        mask_out: crate::encoder::Conv::seeded(&mut heads_rng, crate::rda::TAPS, 2, 3, 1),
        ..RdaHeads::seeded(&mut heads_rng, 2, crate::rda::DEFAULT_RADIUS)
    };
    let f = randu(&mut rng, &[2, 4, 4], -1.0, 1.0);
    let v = randu(&mut rng, &[2, 4, 4], -1.0, 1.0);
    let r = check_gradients(
        &[f, v],
        |tape, vars| {
            let out = ref_attention_with_map(
                tape,
                &map,
                &vars[1],
                &vars[0],
                &heads,
                false,
                &RdaOptions::default(),
            )
            .unwrap();
            ops::sum_all(&ops::mul(&out.attended, &out.attended))
        },
        &CheckConfig::default(),
    );
    vec![line("rda_composed", 1e-5, r)]
}

fn rfa_checks(seed: u64) -> Vec<GradcheckLine> {
    let mut rng = WeightRng::new(seed);
    let stack = RfaStack::seeded(&mut rng, 2, 2, 1, 2).expect("stack");
    let f = randu(&mut rng, &[2, 4, 4], -1.0, 1.0);
    let a = randu(&mut rng, &[2, 4, 4], -1.0, 1.0);
    let r = check_gradients(
        &[f, a],
        |tape, vars| {
            let out = crate::aggregate::rfa(tape, &vars[0], &vars[1], &stack, false).unwrap();
            ops::sum_all(&ops::mul(&out, &out))
        },
        &CheckConfig::default(),
    );
    vec![line("rfa_composed", 1e-5, r)]
}

fn losses_checks(seed: u64) -> Vec<GradcheckLine> {
    let mut rng = WeightRng::new(seed);
    let mut out = Vec::new();
    let a = randu(&mut rng, &[3, 8, 8], 0.1, 0.9);
    let b = randu(&mut rng, &[3, 8, 8], 0.1, 0.9);
    out.push(line(
        "rec_loss",
        1e-6,
        check_gradients(
            &[a.clone(), b.clone()],
            |_, vars| rec_loss(&vars[0], &vars[1]).unwrap(),
            &CheckConfig::default(),
        ),
    ));
    let encoder = EncoderStack::seeded(seed, crate::encoder::TINY_WIDTHS);
    out.push(line(
        "perceptual_loss",
        1e-5,
        check_gradients(
            std::slice::from_ref(&a),
            |tape, vars| {
                let hr = tape.constant(b.clone());
                perceptual_loss(tape, &vars[0], &hr, &encoder).unwrap()
            },
            &CheckConfig {
                step: 1e-5,
                max_elems_per_input: Some(48),
            },
        ),
    ));
    // the penalty must differentiate through the critic weights (this is
    // the second-order path the symbolic input-gradient chain provides)
    let critic = Critic::seeded(seed, 1);
    let critic_params: Vec<NdArray> = critic.param_entries().into_iter().map(|(_, v)| v).collect();
    out.push(line(
        "gradient_penalty_weights",
        1e-4,
        check_gradients(
            &critic_params,
            |tape, vars| {
                let taped = crate::losses::TapedCritic::from_vars(
                    vec![
                        (vars[0].clone(), vars[1].clone(), 2),
                        (vars[2].clone(), vars[3].clone(), 2),
                        (vars[4].clone(), vars[5].clone(), 2),
                    ],
                    (vars[6].clone(), vars[7].clone(), 1),
                );
                let xv = tape.constant(a.clone());
                gradient_penalty(&taped, &[xv], 10.0).unwrap()
            },
            &CheckConfig {
                step: 1e-6,
                max_elems_per_input: Some(10),
            },
        ),
    ));
    out
}

fn unet_checks(seed: u64) -> Vec<GradcheckLine> {
    // end-to-end: reconstruction loss versus sampled parameter tensors,
    // with analytic gradients collected off the training tape itself
    let stack = EncoderStack::seeded(seed, crate::encoder::TINY_WIDTHS);
    let pair = super::toydata::toy_pair(seed, 32, 4, 4).expect("toy pair");
    let lr_up = bicubic_upsample(&pair.lr, 4);
    let pyramid = FeaturePyramid::build(&stack, &lr_up, &pair.reference).expect("pyramid");
    let weights = UNetWeights::seeded(seed.wrapping_add(1), UNetConfig::tiny()).expect("weights");
    let hr = pair.hr.array().clone();

    let eval = |w: &UNetWeights| -> f64 {
        let tape = Tape::new();
        let out = unet_forward(&tape, &pyramid, &lr_up, w, false, &ForwardOptions::default())
            .expect("forward");
        let hr_c = tape.constant(hr.clone());
        rec_loss(&out.sr, &hr_c).expect("loss").item()
    };

    let tape = Tape::new();
    let out = unet_forward(&tape, &pyramid, &lr_up, &weights, true, &ForwardOptions::default())
        .expect("forward");
    let hr_c = tape.constant(hr.clone());
    let loss = rec_loss(&out.sr, &hr_c).expect("loss");
    tape.backward(&loss).expect("backward");
    let grads = tape.leaf_grads_by_buffer();

    // probe a conv kernel, an attention projection and the offset trunk
    let probes = [
        "unet.down1.rfa.fuse.w",
        "unet.up1.rda.off1.w",
        "unet.down2.rfa.stl0.qkv.w",
        "unet.out.w",
    ];
    let h = 1e-5;
    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0;
    for probe in probes {
        let entries = weights.param_entries();
        let (_, value) = entries
            .iter()
            .find(|(n, _)| n == probe)
            .expect("probe parameter exists");
        let analytic = grads
            .get(&value.buffer_id())
            .cloned()
            .unwrap_or_else(|| NdArray::zeros(value.shape()));
        let n = value.numel();
        let stride = n.div_ceil(4);
        for e in (0..n).step_by(stride) {
            let perturb = |delta: f64| -> f64 {
                let mut w = weights.clone();
                for (name, slot) in w.param_slots() {
                    if name == probe {
                        let mut data = slot.data().to_vec();
                        data[e] += delta;
                        *slot = NdArray::new_unchecked(slot.shape(), data);
                    }
                }
                eval(&w)
            };
            let numeric = (perturb(h) - perturb(-h)) / (2.0 * h);
            let an = analytic.data()[e];
            let rel = (an - numeric).abs() / an.abs().max(1.0);
            max_rel_err = max_rel_err.max(rel);
            checked += 1;
        }
    }
    vec![line(
        "unet_end_to_end_sampled",
        1e-4,
        CheckReport {
            max_rel_err,
            checked,
        },
    )]
}

/// Runs the requested gradient-check group ("all" for everything).
pub fn run_gradcheck(module: &str, seed: u64) -> Result<Vec<GradcheckLine>> {
    let lines = match module {
        "numerics" => numerics_checks(seed),
        "encoder" => encoder_checks(seed),
        "rda" => rda_checks(seed),
        "rfa" => rfa_checks(seed),
        "losses" => losses_checks(seed),
        "unet" => unet_checks(seed),
        "all" => {
            let mut all = numerics_checks(seed);
            all.extend(encoder_checks(seed));
            all.extend(rda_checks(seed));
            all.extend(rfa_checks(seed));
            all.extend(losses_checks(seed));
            all.extend(unet_checks(seed));
            all
        }
        other => {
            return Err(Error::Argument(format!(
                "unknown gradcheck module '{other}' (expected numerics|encoder|rda|rfa|losses|unet|all)"
            )))
        }
    };
    Ok(lines)
}
