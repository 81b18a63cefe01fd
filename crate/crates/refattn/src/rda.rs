//! Reference-based deformable attention.
//!
//! For every query position the matcher supplies K candidate reference
//! positions. Texture is not swapped verbatim: a pair of small conv heads,
//! conditioned on the LR feature stream and the warped reference values,
//! predicts per-tap continuous offsets (tanh-bounded by `r`) and `[0,1]`
//! masks. The transfer then samples the reference values bilinearly around
//! each candidate with a 3x3 kernel, gates taps by their masks, and blends
//! the K candidates with softmax cooperative weights. Offsets and masks
//! start at zero logits, so an untrained head reduces to masked feature
//! warping.

use crate::error::{Error, Result};
use crate::matcher::CorrespondenceMap;
use crate::num::ops;
use crate::num::tape::{Tape, Var};
use crate::num::NdArray;

use crate::encoder::{Conv, WeightRng};

/// Kernel taps of the 3x3 transfer window, row-major over (dy,dx).
pub const TAPS: usize = 9;
/// Default offset magnitude bound, in pixels.
pub const DEFAULT_RADIUS: f64 = 10.0;

fn tap_offset(j: usize) -> (f64, f64) {
    ((j / 3) as f64 - 1.0, (j % 3) as f64 - 1.0)
}

/// Learnable parameters of one RDA instance (one scale, one U-Net path).
#[derive(Clone, Debug)]
pub struct RdaHeads {
    /// conv(2c -> c) + relu feeding both heads' trunks.
    pub offset_trunk: Conv,
    pub offset_out: Conv,
    pub mask_trunk: Conv,
    pub mask_out: Conv,
    /// Transfer kernel `[c_out, c_in, 3, 3]`.
    pub kernel: NdArray,
    /// Offset bound in pixels.
    pub radius: f64,
}

impl RdaHeads {
    /// Seeded init: trunks are He-initialized, the final layers start at
    /// zero so offsets begin at 0 and masks at 0.5 (plain warping).
    pub fn seeded(rng: &mut WeightRng, channels: usize, radius: f64) -> Self {
        RdaHeads {
            offset_trunk: Conv::seeded(rng, channels, 2 * channels, 3, 1),
            offset_out: Conv::zeros(2 * TAPS, channels, 3, 1),
            mask_trunk: Conv::seeded(rng, channels, 2 * channels, 3, 1),
            mask_out: Conv::zeros(TAPS, channels, 3, 1),
            kernel: rng.xavier_conv(channels, channels, 3, 3, 1.0),
            radius,
        }
    }

    /// Fully zeroed heads with an identity center-tap kernel: the transfer
    /// collapses to mask-gated top-1 warping.
    pub fn warping_identity(channels: usize, radius: f64) -> Self {
        let mut kernel = vec![0.0; channels * channels * TAPS];
        for c in 0..channels {
            kernel[(c * channels + c) * TAPS + 4] = 1.0; // center tap, unit diagonal
        }
        RdaHeads {
            offset_trunk: Conv::zeros(channels, 2 * channels, 3, 1),
            offset_out: Conv::zeros(2 * TAPS, channels, 3, 1),
            mask_trunk: Conv::zeros(channels, 2 * channels, 3, 1),
            mask_out: Conv::zeros(TAPS, channels, 3, 1),
            kernel: NdArray::new_unchecked(&[channels, channels, 3, 3], kernel),
            radius,
        }
    }

    pub fn param_entries(&self, prefix: &str) -> Vec<(String, NdArray)> {
        vec![
            (format!("{prefix}.off1.w"), self.offset_trunk.weight.clone()),
            (format!("{prefix}.off1.b"), self.offset_trunk.bias.clone()),
            (format!("{prefix}.off2.w"), self.offset_out.weight.clone()),
            (format!("{prefix}.off2.b"), self.offset_out.bias.clone()),
            (format!("{prefix}.msk1.w"), self.mask_trunk.weight.clone()),
            (format!("{prefix}.msk1.b"), self.mask_trunk.bias.clone()),
            (format!("{prefix}.msk2.w"), self.mask_out.weight.clone()),
            (format!("{prefix}.msk2.b"), self.mask_out.bias.clone()),
            (format!("{prefix}.kernel"), self.kernel.clone()),
        ]
    }

    pub fn param_slots(&mut self, prefix: &str) -> Vec<(String, &mut NdArray)> {
        vec![
            (format!("{prefix}.off1.w"), &mut self.offset_trunk.weight),
            (format!("{prefix}.off1.b"), &mut self.offset_trunk.bias),
            (format!("{prefix}.off2.w"), &mut self.offset_out.weight),
            (format!("{prefix}.off2.b"), &mut self.offset_out.bias),
            (format!("{prefix}.msk1.w"), &mut self.mask_trunk.weight),
            (format!("{prefix}.msk1.b"), &mut self.mask_trunk.bias),
            (format!("{prefix}.msk2.w"), &mut self.mask_out.weight),
            (format!("{prefix}.msk2.b"), &mut self.mask_out.bias),
            (format!("{prefix}.kernel"), &mut self.kernel),
        ]
    }
}

/// Per-position transfer fields produced by [`predict_fields`].
pub struct DeformFields {
    /// `[2*TAPS, h, w]` learned (dy,dx) per tap, bounded by `radius`.
    pub offsets: Var,
    /// `[TAPS, h, w]` gates in `[0,1]`.
    pub masks: Var,
    /// `[k, h, w]` softmax weights over the K matches; sums to 1 per position.
    pub coop_weights: Var,
    /// `[c_out, c_in, 3, 3]` transfer kernel.
    pub kernel: Var,
}

/// Forward options; `mask_override` pins every mask to a constant, which
/// gives the plain-warping and no-transfer reference points.
#[derive(Clone, Copy, Default)]
pub struct RdaOptions {
    pub mask_override: Option<f64>,
}

/// Softmax over each query's K stored similarities, shaped `[k, h, w]`.
pub fn cooperative_weights(tape: &Tape, map: &CorrespondenceMap) -> Var {
    let n = map.queries();
    let sims = tape.constant(NdArray::new_unchecked(
        &[n, map.k],
        map.similarities.clone(),
    ));
    let soft = ops::softmax(&sims, 1);
    let t = ops::transpose2d(&soft);
    ops::reshape(&t, &[map.k, map.query_h, map.query_w])
}

fn check_map_against_value(v: &Var, map: &CorrespondenceMap) -> Result<()> {
    let shape = v.shape();
    if shape.len() != 3 || shape[1] != map.key_h || shape[2] != map.key_w {
        return Err(Error::shape(
            "warp_value",
            format!(
                "value {:?} vs map key grid {}x{}",
                shape, map.key_h, map.key_w
            ),
        ));
    }
    Ok(())
}

/// Integer gather of each query's top-1 matched value column:
/// `out[:, i] = v[:, positions[i][0]]`.
pub fn warp_value(v: &Var, map: &CorrespondenceMap) -> Result<Var> {
    check_map_against_value(v, map)?;
    let c = v.shape()[0];
    let flat = ops::reshape(v, &[c, map.key_h * map.key_w]);
    let rows = ops::transpose2d(&flat);
    let idx: Vec<usize> = (0..map.queries()).map(|i| map.position(i, 0)).collect();
    let picked = ops::gather_rows(&rows, &idx);
    let back = ops::transpose2d(&picked);
    Ok(ops::reshape(&back, &[c, map.query_h, map.query_w]))
}

/// Predicts offset and mask fields from `[lr_features; warped values]` and
/// fills in the cooperative weights.
pub fn predict_fields(
    tape: &Tape,
    lr_features: &Var,
    v: &Var,
    map: &CorrespondenceMap,
    heads: &RdaHeads,
    trainable: bool,
    options: &RdaOptions,
) -> Result<DeformFields> {
    let warped = warp_value(v, map)?;
    let fs = lr_features.shape();
    let ws = warped.shape();
    if fs[1] != ws[1] || fs[2] != ws[2] {
        return Err(Error::shape(
            "predict_fields",
            format!("lr features {:?} vs warped values {:?}", fs, ws),
        ));
    }
    let (h, w) = (fs[1], fs[2]);
    let cat = ops::concat_axis0(&[lr_features, &warped]);

    let otrunk = ops::relu(&heads.offset_trunk.apply(tape, &cat, trainable)?);
    let raw_offsets = heads.offset_out.apply(tape, &otrunk, trainable)?;
    let offsets = ops::mul_scalar(&ops::tanh(&raw_offsets), heads.radius);

    let masks = match options.mask_override {
        Some(value) => tape.constant(NdArray::full(&[TAPS, h, w], value.clamp(0.0, 1.0))),
        None => {
            let mtrunk = ops::relu(&heads.mask_trunk.apply(tape, &cat, trainable)?);
            ops::sigmoid(&heads.mask_out.apply(tape, &mtrunk, trainable)?)
        }
    };

    Ok(DeformFields {
        offsets,
        masks,
        coop_weights: cooperative_weights(tape, map),
        kernel: tape.leaf(heads.kernel.clone(), trainable),
    })
}

/// The modified deformable transfer: for query position `p`, candidate `k`
/// and tap `j`, sample the values bilinearly at
/// `match_k(p) + tap_j + offset_j(p)`, gate with `mask_j(p)`, contract with
/// the kernel slice `w_j`, and blend candidates with the cooperative weights.
pub fn deform_transfer(v: &Var, map: &CorrespondenceMap, fields: &DeformFields) -> Result<Var> {
    check_map_against_value(v, map)?;
    let tape = v.tape().clone();
    let cin = v.shape()[0];
    let (h, w) = (map.query_h, map.query_w);
    let n = h * w;
    let kshape = fields.kernel.shape();
    if kshape.len() != 4 || kshape[1] != cin || kshape[2] != 3 || kshape[3] != 3 {
        return Err(Error::shape(
            "deform_transfer",
            format!("kernel {:?} vs value channels {}", kshape, cin),
        ));
    }
    let cout = kshape[0];
    // kernel as [cout*cin, 9] so each tap is one differentiable column
    let kernel_cols = ops::reshape(&fields.kernel, &[cout * cin, TAPS]);

    let mut total: Option<Var> = None;
    for rank in 0..map.k {
        let mut candidate: Option<Var> = None;
        for j in 0..TAPS {
            let (dy, dx) = tap_offset(j);
            // constant base: matched position plus the integer tap
            let mut base = vec![0.0; 2 * n];
            for i in 0..n {
                let p = map.position(i, rank);
                base[i] = (p / map.key_w) as f64 + dy;
                base[n + i] = (p % map.key_w) as f64 + dx;
            }
            let base = tape.constant(NdArray::new_unchecked(&[2, h, w], base));
            let off_j = ops::slice_axis0(&fields.offsets, 2 * j, 2);
            let coords = ops::add(&base, &off_j);
            let sampled = ops::bilinear_sample(v, &coords);
            let mask_j = ops::reshape(&ops::slice_axis0(&fields.masks, j, 1), &[h, w]);
            let gated = ops::scale_by_map(&sampled, &mask_j);
            let w_j = ops::reshape(&ops::slice_cols(&kernel_cols, j, 1), &[cout, cin]);
            let mixed = ops::matmul(&w_j, &ops::reshape(&gated, &[cin, n]))?;
            candidate = Some(match candidate {
                Some(acc) => ops::add(&acc, &mixed),
                None => mixed,
            });
        }
        let candidate = ops::reshape(&candidate.expect("at least one tap"), &[cout, h, w]);
        let coop_k = ops::reshape(&ops::slice_axis0(&fields.coop_weights, rank, 1), &[h, w]);
        let weighted = ops::scale_by_map(&candidate, &coop_k);
        total = Some(match total {
            Some(acc) => ops::add(&acc, &weighted),
            None => weighted,
        });
    }
    Ok(total.expect("k >= 1"))
}

/// Output bundle of one attention application.
pub struct RdaOutput {
    pub attended: Var,
    pub fields: DeformFields,
}

/// Full composition on a precomputed correspondence map (the usual path:
/// matching runs once at the coarsest scale and the map is rescaled).
#[allow(clippy::too_many_arguments)]
pub fn ref_attention_with_map(
    tape: &Tape,
    map: &CorrespondenceMap,
    v: &Var,
    lr_features: &Var,
    heads: &RdaHeads,
    trainable: bool,
    options: &RdaOptions,
) -> Result<RdaOutput> {
    let fields = predict_fields(tape, lr_features, v, map, heads, trainable, options)?;
    let attended = deform_transfer(v, map, &fields)?;
    Ok(RdaOutput { attended, fields })
}

/// Convenience composition that also runs the matcher on the query/key
/// feature values (the search is not differentiated).
#[allow(clippy::too_many_arguments)]
pub fn ref_attention(
    tape: &Tape,
    q: &NdArray,
    key: &NdArray,
    v: &Var,
    lr_features: &Var,
    heads: &RdaHeads,
    k: usize,
    patch: usize,
    trainable: bool,
    options: &RdaOptions,
) -> Result<(RdaOutput, CorrespondenceMap)> {
    let map = crate::matcher::match_features(q, key, k, patch)?;
    let out = ref_attention_with_map(tape, &map, v, lr_features, heads, trainable, options)?;
    Ok((out, map))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::match_features;
    use crate::num::gradcheck::{check_gradients, CheckConfig};
    use rand_xoshiro::rand_core::{RngCore, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn randu(seed: u64, shape: &[usize], lo: f64, hi: f64) -> NdArray {
        let mut r = Xoshiro256PlusPlus::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| lo + (hi - lo) * ((r.next_u64() >> 11) as f64 / (1u64 << 53) as f64))
            .collect();
        NdArray::from_vec(shape, data).unwrap()
    }

    fn toy_map(seed: u64, c: usize, hw: usize, k: usize) -> (NdArray, NdArray, CorrespondenceMap) {
        let q = randu(seed, &[c, hw, hw], -1.0, 1.0);
        let key = randu(seed + 1, &[c, hw, hw], -1.0, 1.0);
        let map = match_features(&q, &key, k, 3).unwrap();
        (q, key, map)
    }

    #[test]
    fn cooperative_weights_singleton_and_symmetry() {
        let (_, _, map) = toy_map(1, 2, 4, 1);
        let tape = Tape::new();
        let w = cooperative_weights(&tape, &map).value();
        assert!(w.data().iter().all(|&v| v == 1.0), "K=1 must give exactly 1");

        // equal similarities -> 0.5/0.5
        let map2 = CorrespondenceMap {
            k: 2,
            patch: 3,
            query_h: 1,
            query_w: 2,
            key_h: 1,
            key_w: 2,
            positions: vec![0, 1, 1, 0],
            similarities: vec![0.3, 0.3, 0.9, 0.9],
        };
        let w = cooperative_weights(&tape, &map2).value();
        assert!(w.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn cooperative_weights_match_scalar_softmax() {
        let map = CorrespondenceMap {
            k: 3,
            patch: 3,
            query_h: 1,
            query_w: 1,
            key_h: 2,
            key_w: 2,
            positions: vec![0, 1, 2],
            similarities: vec![1.0, 0.5, 0.0],
        };
        let tape = Tape::new();
        let w = cooperative_weights(&tape, &map).value();
        let exps: Vec<f64> = [1.0f64, 0.5, 0.0].iter().map(|v| v.exp()).collect();
        let z: f64 = exps.iter().sum();
        for (got, e) in w.data().iter().zip(&exps) {
            assert!((got - e / z).abs() < 1e-12);
        }
        let sum: f64 = w.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn warp_value_identity_constant_and_gather() {
        let f = randu(2, &[3, 4, 4], -1.0, 1.0);
        let selfmap = match_features(&f, &f, 1, 3).unwrap();
        let tape = Tape::new();
        let v = tape.constant(f.clone());
        let warped = warp_value(&v, &selfmap).unwrap().value();
        assert_eq!(warped.data(), f.data(), "self-match warp must be the identity");

        let (_q, key, map) = toy_map(3, 2, 5, 1);
        let tape = Tape::new();
        let kv = tape.constant(key.clone());
        let warped = warp_value(&kv, &map).unwrap().value();
        let n = 25;
        for i in 0..n {
            let p = map.position(i, 0);
            for c in 0..2 {
                assert_eq!(warped.data()[c * n + i], key.data()[c * n + p]);
            }
        }

        let const_v = NdArray::full(&[2, 5, 5], 0.7);
        let tape = Tape::new();
        let cv = tape.constant(const_v);
        let warped = warp_value(&cv, &map).unwrap().value();
        assert!(warped.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn zeroed_heads_give_zero_offsets_and_half_masks() {
        let (_q, _key, map) = toy_map(4, 3, 4, 1);
        let heads = RdaHeads::warping_identity(3, DEFAULT_RADIUS);
        let tape = Tape::new();
        let f = tape.constant(randu(5, &[3, 4, 4], -1.0, 1.0));
        let v = tape.constant(randu(6, &[3, 4, 4], -1.0, 1.0));
        let fields =
            predict_fields(&tape, &f, &v, &map, &heads, false, &RdaOptions::default()).unwrap();
        assert!(fields.offsets.value().data().iter().all(|&o| o == 0.0));
        assert!(fields.masks.value().data().iter().all(|&m| m == 0.5));
    }

    #[test]
    fn offsets_respect_radius_bound() {
        let (_, _, map) = toy_map(7, 3, 4, 2);
        let mut rng = WeightRng::new(99);
        let mut heads = RdaHeads::seeded(&mut rng, 3, DEFAULT_RADIUS);
        // blow up the head output so tanh saturates
        heads.offset_out = Conv {
            weight: rng.he_conv(2 * TAPS, 3, 3, 3).map(|v| v * 100.0),
            bias: NdArray::zeros(&[2 * TAPS]),
            stride: 1,
        };
        let tape = Tape::new();
        let f = tape.constant(randu(8, &[3, 4, 4], -1.0, 1.0));
        let v = tape.constant(randu(9, &[3, 4, 4], -1.0, 1.0));
        let fields =
            predict_fields(&tape, &f, &v, &map, &heads, false, &RdaOptions::default()).unwrap();
        let max = fields
            .offsets
            .value()
            .data()
            .iter()
            .fold(0.0f64, |m, &v| m.max(v.abs()));
        assert!(max <= DEFAULT_RADIUS, "offset {max} exceeds the bound");
        assert!(max > 9.0, "saturation case should approach the bound");
        let masks = fields.masks.value();
        assert!(masks.data().iter().all(|&m| (0.0..=1.0).contains(&m)));
        let coop = fields.coop_weights.value();
        for i in 0..16 {
            let s: f64 = (0..2).map(|r| coop.data()[r * 16 + i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn transfer_reduces_to_warping_under_identity_config() {
        let f = randu(10, &[2, 5, 5], -1.0, 1.0);
        let map = match_features(&f, &f, 1, 3).unwrap();
        let heads = RdaHeads::warping_identity(2, DEFAULT_RADIUS);
        let tape = Tape::new();
        let lr = tape.constant(randu(11, &[2, 5, 5], -1.0, 1.0));
        let v = tape.constant(randu(12, &[2, 5, 5], -1.0, 1.0));
        let opts = RdaOptions {
            mask_override: Some(1.0),
        };
        let out = ref_attention_with_map(&tape, &map, &v, &lr, &heads, false, &opts).unwrap();
        let warped = warp_value(&v, &map).unwrap();
        for (a, b) in out.attended.value().data().iter().zip(warped.value().data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_masks_suppress_transfer_entirely_and_scale_linearly() {
        let (_q, _key, map) = toy_map(13, 2, 4, 2);
        let tape = Tape::new();
        let v = tape.constant(randu(14, &[2, 4, 4], -1.0, 1.0));
        let offsets = tape.constant(randu(15, &[2 * TAPS, 4, 4], -2.0, 2.0));
        let kernel = tape.constant(randu(16, &[2, 2, 3, 3], -1.0, 1.0));
        let coop = cooperative_weights(&tape, &map);
        let masks_half = tape.constant(NdArray::full(&[TAPS, 4, 4], 0.5));
        let masks_zero = tape.constant(NdArray::zeros(&[TAPS, 4, 4]));
        let masks_one = tape.constant(NdArray::full(&[TAPS, 4, 4], 1.0));

        let run = |masks: &Var| {
            let fields = DeformFields {
                offsets: offsets.clone(),
                masks: masks.clone(),
                coop_weights: coop.clone(),
                kernel: kernel.clone(),
            };
            deform_transfer(&v, &map, &fields).unwrap().value()
        };
        let at_zero = run(&masks_zero);
        assert!(at_zero.data().iter().all(|&v| v == 0.0));
        let at_half = run(&masks_half);
        let at_one = run(&masks_one);
        for (h, o) in at_half.data().iter().zip(at_one.data()) {
            assert!((2.0 * h - o).abs() < 1e-12, "not linear in masks");
        }
    }

    #[test]
    fn transfer_matches_literal_summation_oracle() {
        let c = 2;
        let hw = 4;
        let (_q, _key, map) = toy_map(17, c, hw, 2);
        let v = randu(18, &[c, hw, hw], -1.0, 1.0);
        let offsets = randu(19, &[2 * TAPS, hw, hw], -1.5, 1.5);
        let masks = randu(20, &[TAPS, hw, hw], 0.0, 1.0);
        let kernel = randu(21, &[c, c, 3, 3], -1.0, 1.0);

        let tape = Tape::new();
        let fields = DeformFields {
            offsets: tape.constant(offsets.clone()),
            masks: tape.constant(masks.clone()),
            coop_weights: cooperative_weights(&tape, &map),
            kernel: tape.constant(kernel.clone()),
        };
        let coop = fields.coop_weights.value();
        let got = deform_transfer(&tape.constant(v.clone()), &map, &fields)
            .unwrap()
            .value();

        // literal per-position, per-candidate, per-tap summation
        let n = hw * hw;
        let sample = |ch: usize, y: f64, x: f64| -> f64 {
            let (y0, x0) = (y.floor(), x.floor());
            let (fy, fx) = (y - y0, x - x0);
            let mut acc = 0.0;
            for (dy, dx, wgt) in [
                (0, 0, (1.0 - fy) * (1.0 - fx)),
                (0, 1, (1.0 - fy) * fx),
                (1, 0, fy * (1.0 - fx)),
                (1, 1, fy * fx),
            ] {
                let yy = y0 as isize + dy;
                let xx = x0 as isize + dx;
                if yy >= 0 && (yy as usize) < hw && xx >= 0 && (xx as usize) < hw {
                    acc += wgt * v.data()[(ch * hw + yy as usize) * hw + xx as usize];
                }
            }
            acc
        };
        for i in 0..n {
            for co in 0..c {
                let mut want = 0.0;
                for rank in 0..map.k {
                    let s = coop.data()[rank * n + i];
                    let p = map.position(i, rank);
                    let (py, px) = ((p / hw) as f64, (p % hw) as f64);
                    for j in 0..TAPS {
                        let (dy, dx) = tap_offset(j);
                        let oy = offsets.data()[(2 * j) * n + i];
                        let ox = offsets.data()[(2 * j + 1) * n + i];
                        let m = masks.data()[j * n + i];
                        for ci in 0..c {
                            let val = sample(ci, py + dy + oy, px + dx + ox);
                            want += s * kernel.data()[((co * c + ci) * 3 + j / 3) * 3 + j % 3]
                                * val
                                * m;
                        }
                    }
                }
                let gotv = got.data()[co * n + i];
                assert!(
                    (gotv - want).abs() < 1e-12,
                    "position {i} channel {co}: {gotv} vs {want}"
                );
            }
        }
    }

    #[test]
    fn field_gradients_match_finite_differences() {
        let (_q, _key, map) = toy_map(22, 2, 4, 1);
        let mut rng = WeightRng::new(23);
        let heads = RdaHeads::seeded(&mut rng, 2, DEFAULT_RADIUS);
        // random final layers so offsets are non-zero (away from sampling kinks)
        let heads = RdaHeads {
            offset_out: Conv::seeded(&mut rng, 2 * TAPS, 2, 3, 1),
            mask_out: Conv::seeded(&mut rng, TAPS, 2, 3, 1),
            ..heads
        };
        let f0 = randu(24, &[2, 4, 4], -1.0, 1.0);
        let v0 = randu(25, &[2, 4, 4], -1.0, 1.0);
        let report = check_gradients(
            &[f0, v0],
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
        assert!(
            report.max_rel_err < 1e-5,
            "rda end-to-end rel err {}",
            report.max_rel_err
        );
    }

    #[test]
    fn independent_ref_scores_below_self_match() {
        let stack = crate::encoder::EncoderStack::seeded(3, crate::encoder::TINY_WIDTHS);
        let img = crate::encoder::ImagePlane::from_fn(16, 16, |c, y, x| {
            ((c + 1) as f64 * (y as f64 / 16.0) * (x as f64 / 16.0)).fract()
        });
        let noise = crate::encoder::ImagePlane::from_fn(16, 16, |c, y, x| {
            let mut r = Xoshiro256PlusPlus::seed_from_u64((c * 997 + y * 31 + x) as u64);
            (r.next_u64() >> 11) as f64 / (1u64 << 53) as f64
        });
        let q = stack.encode(&img, crate::encoder::Role::Query).unwrap();
        let k_self = stack.encode(&img, crate::encoder::Role::Key).unwrap();
        let k_noise = stack.encode(&noise, crate::encoder::Role::Key).unwrap();
        let m_self = match_features(&q[2], &k_self[2], 1, 3).unwrap();
        let m_noise = match_features(&q[2], &k_noise[2], 1, 3).unwrap();
        let mean = |m: &CorrespondenceMap| {
            m.similarities.iter().sum::<f64>() / m.similarities.len() as f64
        };
        assert!((mean(&m_self) - 1.0).abs() < 1e-12);
        assert!(mean(&m_noise) < 1.0 - 1e-6, "independent ref should score below 1");
    }
}
