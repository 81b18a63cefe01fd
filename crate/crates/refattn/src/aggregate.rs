//! Residual feature aggregation and the three-scale U-Net.
//!
//! Each scale fuses the LR feature stream with the attended reference
//! texture through a conv, refines it with windowed self-attention blocks
//! (pre-layernorm, residual, optional shifted windows, no positional term),
//! adds the incoming features back, and convolves once more. The U-Net runs
//! the downscaling path at strides 1/2/4, turns around at the coarsest
//! scale, and walks back up with nearest-neighbor upsampling and skip
//! connections; attention and aggregation run at every scale on both paths
//! with their own weights. With every learnable tensor zeroed the whole
//! network is the identity on the skip path: the output equals the bicubic
//! upsample, which is the training starting point.

use crate::encoder::{Conv, FeaturePyramid, ImagePlane, WeightRng};
use crate::error::{Error, Result};
use crate::matcher::{match_features, CorrespondenceMap};
use crate::num::ops;
use crate::num::tape::{Tape, Var};
use crate::num::NdArray;
use crate::rda::{ref_attention_with_map, DeformFields, RdaHeads, RdaOptions};

// ---------------------------------------------------------------------------
// windowed self-attention block

/// Init damping for the outputs of residual branches and stage tails; keeps
/// a freshly seeded network's output near the bicubic skip path instead of
/// letting variance compound across stages.
pub const RESIDUAL_GAIN: f64 = 0.25;

/// One windowed multi-head self-attention + MLP block.
#[derive(Clone, Debug)]
pub struct StlBlock {
    pub window: usize,
    pub heads: usize,
    pub shifted: bool,
    pub norm1_gamma: NdArray,
    pub norm1_beta: NdArray,
    pub qkv_w: NdArray,
    pub qkv_b: NdArray,
    pub proj_w: NdArray,
    pub proj_b: NdArray,
    pub norm2_gamma: NdArray,
    pub norm2_beta: NdArray,
    pub mlp1_w: NdArray,
    pub mlp1_b: NdArray,
    pub mlp2_w: NdArray,
    pub mlp2_b: NdArray,
}

impl StlBlock {
    pub fn seeded(
        rng: &mut WeightRng,
        channels: usize,
        window: usize,
        heads: usize,
        shifted: bool,
    ) -> Result<Self> {
        if !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "head count {heads} must divide channel width {channels}"
            )));
        }
        let mlp_dim = 2 * channels;
        // residual-branch outputs (proj, mlp2) start damped so a fresh
        // block stays close to the identity
        Ok(StlBlock {
            window,
            heads,
            shifted,
            norm1_gamma: NdArray::full(&[channels], 1.0),
            norm1_beta: NdArray::zeros(&[channels]),
            qkv_w: rng.xavier_dense(channels, 3 * channels, 1.0),
            qkv_b: NdArray::zeros(&[3 * channels]),
            proj_w: rng.xavier_dense(channels, channels, RESIDUAL_GAIN),
            proj_b: NdArray::zeros(&[channels]),
            norm2_gamma: NdArray::full(&[channels], 1.0),
            norm2_beta: NdArray::zeros(&[channels]),
            mlp1_w: rng.he_dense(channels, mlp_dim),
            mlp1_b: NdArray::zeros(&[mlp_dim]),
            mlp2_w: rng.xavier_dense(mlp_dim, channels, RESIDUAL_GAIN),
            mlp2_b: NdArray::zeros(&[channels]),
        })
    }

    pub fn zeroed(channels: usize, window: usize, heads: usize, shifted: bool) -> Self {
        let mlp_dim = 2 * channels;
        StlBlock {
            window,
            heads,
            shifted,
            norm1_gamma: NdArray::zeros(&[channels]),
            norm1_beta: NdArray::zeros(&[channels]),
            qkv_w: NdArray::zeros(&[channels, 3 * channels]),
            qkv_b: NdArray::zeros(&[3 * channels]),
            proj_w: NdArray::zeros(&[channels, channels]),
            proj_b: NdArray::zeros(&[channels]),
            norm2_gamma: NdArray::zeros(&[channels]),
            norm2_beta: NdArray::zeros(&[channels]),
            mlp1_w: NdArray::zeros(&[channels, mlp_dim]),
            mlp1_b: NdArray::zeros(&[mlp_dim]),
            mlp2_w: NdArray::zeros(&[mlp_dim, channels]),
            mlp2_b: NdArray::zeros(&[channels]),
        }
    }

    pub fn param_entries(&self, prefix: &str) -> Vec<(String, NdArray)> {
        vec![
            (format!("{prefix}.ln1.g"), self.norm1_gamma.clone()),
            (format!("{prefix}.ln1.b"), self.norm1_beta.clone()),
            (format!("{prefix}.qkv.w"), self.qkv_w.clone()),
            (format!("{prefix}.qkv.b"), self.qkv_b.clone()),
            (format!("{prefix}.proj.w"), self.proj_w.clone()),
            (format!("{prefix}.proj.b"), self.proj_b.clone()),
            (format!("{prefix}.ln2.g"), self.norm2_gamma.clone()),
            (format!("{prefix}.ln2.b"), self.norm2_beta.clone()),
            (format!("{prefix}.mlp1.w"), self.mlp1_w.clone()),
            (format!("{prefix}.mlp1.b"), self.mlp1_b.clone()),
            (format!("{prefix}.mlp2.w"), self.mlp2_w.clone()),
            (format!("{prefix}.mlp2.b"), self.mlp2_b.clone()),
        ]
    }

    pub fn param_slots(&mut self, prefix: &str) -> Vec<(String, &mut NdArray)> {
        vec![
            (format!("{prefix}.ln1.g"), &mut self.norm1_gamma),
            (format!("{prefix}.ln1.b"), &mut self.norm1_beta),
            (format!("{prefix}.qkv.w"), &mut self.qkv_w),
            (format!("{prefix}.qkv.b"), &mut self.qkv_b),
            (format!("{prefix}.proj.w"), &mut self.proj_w),
            (format!("{prefix}.proj.b"), &mut self.proj_b),
            (format!("{prefix}.ln2.g"), &mut self.norm2_gamma),
            (format!("{prefix}.ln2.b"), &mut self.norm2_beta),
            (format!("{prefix}.mlp1.w"), &mut self.mlp1_w),
            (format!("{prefix}.mlp1.b"), &mut self.mlp1_b),
            (format!("{prefix}.mlp2.w"), &mut self.mlp2_w),
            (format!("{prefix}.mlp2.b"), &mut self.mlp2_b),
        ]
    }
}

/// Window-grouped token order and its inverse for a padded `hp x wp` grid,
/// with an optional cyclic shift folded into the permutation.
fn window_permutation(hp: usize, wp: usize, window: usize, shift: usize) -> (Vec<usize>, Vec<usize>) {
    let n = hp * wp;
    let mut grouped = Vec::with_capacity(n);
    for wy in 0..hp / window {
        for wx in 0..wp / window {
            for ny in 0..window {
                for nx in 0..window {
                    let y = (wy * window + ny + shift) % hp;
                    let x = (wx * window + nx + shift) % wp;
                    grouped.push(y * wp + x);
                }
            }
        }
    }
    let mut inverse = vec![0usize; n];
    for (slot, &token) in grouped.iter().enumerate() {
        inverse[token] = slot;
    }
    (grouped, inverse)
}

/// Applies one STL block to `[c,h,w]`. The input is zero-padded to a window
/// multiple and cropped afterwards.
pub fn stl(tape: &Tape, x: &Var, block: &StlBlock, trainable: bool) -> Result<Var> {
    let shape = x.shape();
    let [c, h, w] = [shape[0], shape[1], shape[2]];
    if c % block.heads != 0 {
        return Err(Error::Config(format!(
            "head count {} must divide channel width {c}",
            block.heads
        )));
    }
    let win = block.window;
    let hp = h.div_ceil(win) * win;
    let wp = w.div_ceil(win) * win;
    let padded = if hp != h || wp != w {
        ops::pad_hw(x, hp - h, wp - w)
    } else {
        x.clone()
    };
    let n_tokens = hp * wp;
    let tokens = ops::transpose2d(&ops::reshape(&padded, &[c, n_tokens]));

    let p = |a: &NdArray| tape.leaf(a.clone(), trainable);
    let (ln1g, ln1b) = (p(&block.norm1_gamma), p(&block.norm1_beta));
    let (qkv_w, qkv_b) = (p(&block.qkv_w), p(&block.qkv_b));
    let (proj_w, proj_b) = (p(&block.proj_w), p(&block.proj_b));
    let (ln2g, ln2b) = (p(&block.norm2_gamma), p(&block.norm2_beta));
    let (mlp1_w, mlp1_b) = (p(&block.mlp1_w), p(&block.mlp1_b));
    let (mlp2_w, mlp2_b) = (p(&block.mlp2_w), p(&block.mlp2_b));

    let shift = if block.shifted { win / 2 } else { 0 };
    let (perm, inv_perm) = window_permutation(hp, wp, win, shift);

    let normed = ops::layer_norm_rows(&tokens, &ln1g, &ln1b);
    let grouped = ops::gather_rows(&normed, &perm);
    let win_tokens = win * win;
    let dh = c / block.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let qkv = ops::add_row_bias(&ops::matmul(&grouped, &qkv_w)?, &qkv_b);
    let mut head_outs = Vec::with_capacity(block.heads);
    for hh in 0..block.heads {
        let q = ops::slice_cols(&qkv, hh * dh, dh);
        let k = ops::slice_cols(&qkv, c + hh * dh, dh);
        let v = ops::slice_cols(&qkv, 2 * c + hh * dh, dh);
        head_outs.push(ops::block_attention(&q, &k, &v, win_tokens, scale));
    }
    let head_refs: Vec<&Var> = head_outs.iter().collect();
    let merged = if head_refs.len() == 1 {
        head_outs[0].clone()
    } else {
        ops::concat_cols(&head_refs)
    };
    let attn_grouped = ops::add_row_bias(&ops::matmul(&merged, &proj_w)?, &proj_b);
    let attn_tokens = ops::gather_rows(&attn_grouped, &inv_perm);
    let after_attn = ops::add(&tokens, &attn_tokens);

    let normed2 = ops::layer_norm_rows(&after_attn, &ln2g, &ln2b);
    let hid = ops::gelu(&ops::add_row_bias(&ops::matmul(&normed2, &mlp1_w)?, &mlp1_b));
    let mlp = ops::add_row_bias(&ops::matmul(&hid, &mlp2_w)?, &mlp2_b);
    let after_mlp = ops::add(&after_attn, &mlp);

    let spatial = ops::reshape(&ops::transpose2d(&after_mlp), &[c, hp, wp]);
    Ok(if hp != h || wp != w {
        ops::crop_hw(&spatial, h, w)
    } else {
        spatial
    })
}

// ---------------------------------------------------------------------------
// residual feature aggregation

/// Fusion conv + STL chain + residual + trailing conv for one scale/path.
#[derive(Clone, Debug)]
pub struct RfaStack {
    pub fuse: Conv,
    pub blocks: Vec<StlBlock>,
    pub tail: Conv,
}

impl RfaStack {
    pub fn seeded(
        rng: &mut WeightRng,
        channels: usize,
        window: usize,
        heads: usize,
        n_blocks: usize,
    ) -> Result<Self> {
        let blocks = (0..n_blocks)
            .map(|i| StlBlock::seeded(rng, channels, window, heads, i % 2 == 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(RfaStack {
            fuse: Conv::seeded_linear(rng, channels, 2 * channels, 3, 1, 1.0),
            blocks,
            tail: Conv::seeded_linear(rng, channels, channels, 3, 1, RESIDUAL_GAIN),
        })
    }

    pub fn zeroed(channels: usize, window: usize, heads: usize, n_blocks: usize) -> Self {
        RfaStack {
            fuse: Conv::zeros(channels, 2 * channels, 3, 1),
            blocks: (0..n_blocks)
                .map(|i| StlBlock::zeroed(channels, window, heads, i % 2 == 1))
                .collect(),
            tail: Conv::zeros(channels, channels, 3, 1),
        }
    }

    pub fn param_entries(&self, prefix: &str) -> Vec<(String, NdArray)> {
        let mut out = vec![
            (format!("{prefix}.fuse.w"), self.fuse.weight.clone()),
            (format!("{prefix}.fuse.b"), self.fuse.bias.clone()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.param_entries(&format!("{prefix}.stl{i}")));
        }
        out.push((format!("{prefix}.tail.w"), self.tail.weight.clone()));
        out.push((format!("{prefix}.tail.b"), self.tail.bias.clone()));
        out
    }

    pub fn param_slots(&mut self, prefix: &str) -> Vec<(String, &mut NdArray)> {
        let mut out = vec![
            (format!("{prefix}.fuse.w"), &mut self.fuse.weight),
            (format!("{prefix}.fuse.b"), &mut self.fuse.bias),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.param_slots(&format!("{prefix}.stl{i}")));
        }
        out.push((format!("{prefix}.tail.w"), &mut self.tail.weight));
        out.push((format!("{prefix}.tail.b"), &mut self.tail.bias));
        out
    }
}

/// Concatenates the LR stream with the attended texture and fuses with one
/// 3x3 conv back to the scale width.
pub fn fuse(tape: &Tape, f: &Var, a: &Var, conv: &Conv, trainable: bool) -> Result<Var> {
    let (fs, as_) = (f.shape(), a.shape());
    if fs[1] != as_[1] || fs[2] != as_[2] {
        return Err(Error::shape(
            "fuse",
            format!("lr features {:?} vs attention {:?}", fs, as_),
        ));
    }
    let cat = ops::concat_axis0(&[f, a]);
    conv.apply(tape, &cat, trainable)
}

/// One aggregation step: fuse, refine with the STL chain, add the incoming
/// features back, and convolve.
pub fn rfa(
    tape: &Tape,
    f: &Var,
    a: &Var,
    stack: &RfaStack,
    trainable: bool,
) -> Result<Var> {
    let mut x = fuse(tape, f, a, &stack.fuse, trainable)?;
    for block in &stack.blocks {
        x = stl(tape, &x, block, trainable)?;
    }
    let with_skip = ops::add(&x, f);
    stack.tail.apply(tape, &with_skip, trainable)
}

// ---------------------------------------------------------------------------
// the U-Net

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct UNetConfig {
    pub widths: [usize; 3],
    pub window: usize,
    pub heads: usize,
    pub stl_blocks: usize,
    pub k: usize,
    pub patch: usize,
    pub radius: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            widths: crate::encoder::DEFAULT_WIDTHS,
            window: 4,
            heads: 2,
            stl_blocks: 2,
            k: 1,
            patch: 3,
            radius: crate::rda::DEFAULT_RADIUS,
        }
    }
}

impl UNetConfig {
    pub fn tiny() -> Self {
        UNetConfig {
            widths: crate::encoder::TINY_WIDTHS,
            window: 2,
            heads: 1,
            stl_blocks: 1,
            k: 1,
            patch: 3,
            radius: crate::rda::DEFAULT_RADIUS,
        }
    }
}

/// All trainable tensors of the SR generator.
#[derive(Clone, Debug)]
pub struct UNetWeights {
    pub config: UNetConfig,
    pub head: Conv,
    pub down_rda: [RdaHeads; 3],
    pub down_rfa: [RfaStack; 3],
    /// scale transitions 1->2 and 2->3 (stride-2 convs)
    pub down_trans: [Conv; 2],
    pub up_rda: [RdaHeads; 3],
    pub up_rfa: [RfaStack; 3],
    /// post-upsample convs 3->2 and 2->1
    pub up_trans: [Conv; 2],
    /// merges [upsampled; skip] at scales 2 and 1
    pub skip_merge: [Conv; 2],
    pub final_proj: Conv,
}

impl UNetWeights {
    pub fn seeded(seed: u64, config: UNetConfig) -> Result<Self> {
        let mut rng = WeightRng::new(seed);
        let [c1, c2, c3] = config.widths;
        let rda = |rng: &mut WeightRng, c: usize| RdaHeads::seeded(rng, c, config.radius);
        let rfa_stack = |rng: &mut WeightRng, c: usize| {
            RfaStack::seeded(rng, c, config.window, config.heads, config.stl_blocks)
        };
        Ok(UNetWeights {
            config,
            head: Conv::seeded_linear(&mut rng, c1, 3, 3, 1, 1.0),
            down_rda: [rda(&mut rng, c1), rda(&mut rng, c2), rda(&mut rng, c3)],
            down_rfa: [
                rfa_stack(&mut rng, c1)?,
                rfa_stack(&mut rng, c2)?,
                rfa_stack(&mut rng, c3)?,
            ],
            down_trans: [
                Conv::seeded_linear(&mut rng, c2, c1, 3, 2, 1.0),
                Conv::seeded_linear(&mut rng, c3, c2, 3, 2, 1.0),
            ],
            up_rda: [rda(&mut rng, c1), rda(&mut rng, c2), rda(&mut rng, c3)],
            up_rfa: [
                rfa_stack(&mut rng, c1)?,
                rfa_stack(&mut rng, c2)?,
                rfa_stack(&mut rng, c3)?,
            ],
            up_trans: [
                Conv::seeded_linear(&mut rng, c2, c3, 3, 1, 1.0),
                Conv::seeded_linear(&mut rng, c1, c2, 3, 1, 1.0),
            ],
            skip_merge: [
                Conv::seeded_linear(&mut rng, c2, 2 * c2, 3, 1, 1.0),
                Conv::seeded_linear(&mut rng, c1, 2 * c1, 3, 1, 1.0),
            ],
            final_proj: Conv::seeded_linear(&mut rng, 3, c1, 3, 1, RESIDUAL_GAIN),
        })
    }

    /// Every learnable tensor zero: the network is the identity on the
    /// bicubic skip path.
    pub fn zeroed(config: UNetConfig) -> Self {
        let [c1, c2, c3] = config.widths;
        let rda = |c: usize| {
            let mut h = RdaHeads::warping_identity(c, config.radius);
            h.kernel = NdArray::zeros(&[c, c, 3, 3]);
            h
        };
        let rfa_stack =
            |c: usize| RfaStack::zeroed(c, config.window, config.heads, config.stl_blocks);
        UNetWeights {
            config,
            head: Conv::zeros(c1, 3, 3, 1),
            down_rda: [rda(c1), rda(c2), rda(c3)],
            down_rfa: [rfa_stack(c1), rfa_stack(c2), rfa_stack(c3)],
            down_trans: [Conv::zeros(c2, c1, 3, 2), Conv::zeros(c3, c2, 3, 2)],
            up_rda: [rda(c1), rda(c2), rda(c3)],
            up_rfa: [rfa_stack(c1), rfa_stack(c2), rfa_stack(c3)],
            up_trans: [Conv::zeros(c2, c3, 3, 1), Conv::zeros(c1, c2, 3, 1)],
            skip_merge: [Conv::zeros(c2, 2 * c2, 3, 1), Conv::zeros(c1, 2 * c1, 3, 1)],
            final_proj: Conv::zeros(3, c1, 3, 1),
        }
    }

    pub fn param_entries(&self) -> Vec<(String, NdArray)> {
        let mut out = vec![
            ("unet.head.w".to_string(), self.head.weight.clone()),
            ("unet.head.b".to_string(), self.head.bias.clone()),
        ];
        for l in 0..3 {
            out.extend(self.down_rda[l].param_entries(&format!("unet.down{}.rda", l + 1)));
            out.extend(self.down_rfa[l].param_entries(&format!("unet.down{}.rfa", l + 1)));
            out.extend(self.up_rda[l].param_entries(&format!("unet.up{}.rda", l + 1)));
            out.extend(self.up_rfa[l].param_entries(&format!("unet.up{}.rfa", l + 1)));
        }
        for (i, c) in self.down_trans.iter().enumerate() {
            out.push((format!("unet.dtrans{}.w", i + 1), c.weight.clone()));
            out.push((format!("unet.dtrans{}.b", i + 1), c.bias.clone()));
        }
        for (i, c) in self.up_trans.iter().enumerate() {
            out.push((format!("unet.utrans{}.w", i + 1), c.weight.clone()));
            out.push((format!("unet.utrans{}.b", i + 1), c.bias.clone()));
        }
        for (i, c) in self.skip_merge.iter().enumerate() {
            out.push((format!("unet.merge{}.w", i + 1), c.weight.clone()));
            out.push((format!("unet.merge{}.b", i + 1), c.bias.clone()));
        }
        out.push(("unet.out.w".to_string(), self.final_proj.weight.clone()));
        out.push(("unet.out.b".to_string(), self.final_proj.bias.clone()));
        out
    }

    pub fn param_slots(&mut self) -> Vec<(String, &mut NdArray)> {
        let mut out: Vec<(String, &mut NdArray)> = vec![
            ("unet.head.w".to_string(), &mut self.head.weight),
            ("unet.head.b".to_string(), &mut self.head.bias),
        ];
        for (l, (rda, rfa)) in self
            .down_rda
            .iter_mut()
            .zip(self.down_rfa.iter_mut())
            .enumerate()
        {
            out.extend(rda.param_slots(&format!("unet.down{}.rda", l + 1)));
            out.extend(rfa.param_slots(&format!("unet.down{}.rfa", l + 1)));
        }
        for (l, (rda, rfa)) in self
            .up_rda
            .iter_mut()
            .zip(self.up_rfa.iter_mut())
            .enumerate()
        {
            out.extend(rda.param_slots(&format!("unet.up{}.rda", l + 1)));
            out.extend(rfa.param_slots(&format!("unet.up{}.rfa", l + 1)));
        }
        for (i, c) in self.down_trans.iter_mut().enumerate() {
            out.push((format!("unet.dtrans{}.w", i + 1), &mut c.weight));
            out.push((format!("unet.dtrans{}.b", i + 1), &mut c.bias));
        }
        for (i, c) in self.up_trans.iter_mut().enumerate() {
            out.push((format!("unet.utrans{}.w", i + 1), &mut c.weight));
            out.push((format!("unet.utrans{}.b", i + 1), &mut c.bias));
        }
        for (i, c) in self.skip_merge.iter_mut().enumerate() {
            out.push((format!("unet.merge{}.w", i + 1), &mut c.weight));
            out.push((format!("unet.merge{}.b", i + 1), &mut c.bias));
        }
        out.push(("unet.out.w".to_string(), &mut self.final_proj.weight));
        out.push(("unet.out.b".to_string(), &mut self.final_proj.bias));
        out
    }
}

/// Forward-pass switches. `match_per_scale` recomputes correspondences at
/// every scale instead of rescaling the coarse map; `mask_override` pins all
/// transfer masks (0 disables texture transfer entirely).
#[derive(Clone, Copy, Default)]
pub struct ForwardOptions {
    pub match_per_scale: bool,
    pub mask_override: Option<f64>,
}

/// Everything a forward pass produces, kept on the tape.
pub struct UNetOutput {
    /// Residual RGB image predicted by the network.
    pub residual_rgb: Var,
    /// `residual_rgb + bicubic(LR)`, unclamped; clamp at export time.
    pub sr: Var,
    /// Correspondence maps per scale (index 0 = finest).
    pub maps: [CorrespondenceMap; 3],
    /// Deformation fields per scale on the two paths.
    pub down_fields: Vec<DeformFields>,
    pub up_fields: Vec<DeformFields>,
    /// Attended (transferred) texture features per scale, downscaling path.
    pub down_attended: Vec<Var>,
}

/// Correspondence maps for all three scales: one search at the coarsest
/// scale rescaled up (the default), or an independent search per scale.
pub fn compute_maps(
    pyramid: &FeaturePyramid,
    cfg: &UNetConfig,
    per_scale: bool,
) -> Result<[CorrespondenceMap; 3]> {
    let map3 = match_features(&pyramid.q[2], &pyramid.k[2], cfg.k, cfg.patch)?;
    let (map1, map2) = if per_scale {
        (
            match_features(&pyramid.q[0], &pyramid.k[0], cfg.k, cfg.patch)?,
            match_features(&pyramid.q[1], &pyramid.k[1], cfg.k, cfg.patch)?,
        )
    } else {
        let map2 = map3.upscale();
        (map2.upscale(), map2)
    };
    Ok([map1, map2, map3])
}

/// Runs the full generator. The pyramid's query/key/value features are
/// treated as fixed (the encoders are not trained); gradients flow through
/// the value stream, the heads and every aggregation weight.
pub fn unet_forward(
    tape: &Tape,
    pyramid: &FeaturePyramid,
    lr_up: &ImagePlane,
    weights: &UNetWeights,
    trainable: bool,
    opts: &ForwardOptions,
) -> Result<UNetOutput> {
    let maps = compute_maps(pyramid, &weights.config, opts.match_per_scale)?;
    unet_forward_with_maps(tape, pyramid, lr_up, weights, trainable, opts, maps)
}

/// Same as [`unet_forward`] with the correspondence maps supplied by the
/// caller (they depend only on the fixed encoders, so training loops with
/// static inputs compute them once).
pub fn unet_forward_with_maps(
    tape: &Tape,
    pyramid: &FeaturePyramid,
    lr_up: &ImagePlane,
    weights: &UNetWeights,
    trainable: bool,
    opts: &ForwardOptions,
    maps: [CorrespondenceMap; 3],
) -> Result<UNetOutput> {
    let rda_opts = RdaOptions {
        mask_override: opts.mask_override,
    };

    let values: Vec<Var> = pyramid.v.iter().map(|v| tape.constant(v.clone())).collect();
    let lr_var = tape.constant(lr_up.array().clone());

    // downscaling path
    let f1 = weights.head.apply(tape, &lr_var, trainable)?;
    let mut down_fields = Vec::with_capacity(3);
    let mut down_attended = Vec::with_capacity(3);
    let mut skips = Vec::with_capacity(3);
    let mut f = f1;
    for l in 0..3 {
        let out = ref_attention_with_map(
            tape,
            &maps[l],
            &values[l],
            &f,
            &weights.down_rda[l],
            trainable,
            &rda_opts,
        )?;
        let g = rfa(tape, &f, &out.attended, &weights.down_rfa[l], trainable)?;
        down_fields.push(out.fields);
        down_attended.push(out.attended);
        skips.push(g.clone());
        if l < 2 {
            f = weights.down_trans[l].apply(tape, &g, trainable)?;
        }
    }

    // upscaling path, coarsest first
    let mut up_fields: Vec<Option<DeformFields>> = vec![None, None, None];
    let mut x = skips[2].clone();
    for l in (0..3).rev() {
        if l < 2 {
            let upsampled = ops::nearest_upsample2x(&x);
            let transported = weights.up_trans[1 - l].apply(tape, &upsampled, trainable)?;
            let cat = ops::concat_axis0(&[&transported, &skips[l]]);
            x = weights.skip_merge[1 - l].apply(tape, &cat, trainable)?;
        }
        let out = ref_attention_with_map(
            tape,
            &maps[l],
            &values[l],
            &x,
            &weights.up_rda[l],
            trainable,
            &rda_opts,
        )?;
        x = rfa(tape, &x, &out.attended, &weights.up_rfa[l], trainable)?;
        up_fields[l] = Some(out.fields);
    }

    let residual_rgb = weights.final_proj.apply(tape, &x, trainable)?;
    let sr = synthesize(&residual_rgb, &lr_var)?;
    Ok(UNetOutput {
        residual_rgb,
        sr,
        maps,
        down_fields,
        up_fields: up_fields.into_iter().map(|f| f.unwrap()).collect(),
        down_attended,
    })
}

/// `sr = residual + upsampled_lr`. The result is intentionally unclamped so
/// losses see the raw values; clamp when exporting pixels.
pub fn synthesize(residual_rgb: &Var, lr_up: &Var) -> Result<Var> {
    if residual_rgb.shape() != lr_up.shape() {
        return Err(Error::shape(
            "synthesize",
            format!("residual {:?} vs upsampled lr {:?}", residual_rgb.shape(), lr_up.shape()),
        ));
    }
    Ok(ops::add(residual_rgb, lr_up))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{bicubic_upsample, EncoderStack, TINY_WIDTHS};
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

    #[test]
    fn zeroed_stl_is_identity() {
        let block = StlBlock::zeroed(4, 2, 1, false);
        let x = randu(1, &[4, 5, 6], -1.0, 1.0);
        let tape = Tape::new();
        let out = stl(&tape, &tape.constant(x.clone()), &block, false).unwrap();
        assert_eq!(out.value().data(), x.data());
        // shifted variant too
        let block = StlBlock::zeroed(4, 2, 1, true);
        let out = stl(&tape, &tape.constant(x.clone()), &block, false).unwrap();
        assert_eq!(out.value().data(), x.data());
    }

    #[test]
    fn single_pixel_window_matches_scalar_oracle() {
        // window 1, 1 head: each token attends only to itself, so the whole
        // block is per-token matrix arithmetic we can replay by hand.
        let mut rng = WeightRng::new(2);
        let block = StlBlock::seeded(&mut rng, 3, 1, 1, false).unwrap();
        let x = randu(3, &[3, 2, 2], -1.0, 1.0);
        let tape = Tape::new();
        let got = stl(&tape, &tape.constant(x.clone()), &block, false).unwrap().value();

        let matvec = |m: &NdArray, v: &[f64], rows: usize, cols: usize| -> Vec<f64> {
            (0..cols)
                .map(|j| (0..rows).map(|i| v[i] * m.data()[i * cols + j]).sum())
                .collect()
        };
        let ln = |v: &[f64], g: &NdArray, b: &NdArray| -> Vec<f64> {
            let c = v.len() as f64;
            let mean = v.iter().sum::<f64>() / c;
            let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c;
            let inv = 1.0 / (var + 1e-6).sqrt();
            v.iter()
                .enumerate()
                .map(|(j, x)| (x - mean) * inv * g.data()[j] + b.data()[j])
                .collect()
        };
        let gelu_s = |x: f64| {
            let a = 0.797_884_560_802_865_4;
            0.5 * x * (1.0 + (a * (x + 0.044715 * x * x * x)).tanh())
        };
        for t in 0..4 {
            let token: Vec<f64> = (0..3).map(|c| x.data()[c * 4 + t]).collect();
            let n1 = ln(&token, &block.norm1_gamma, &block.norm1_beta);
            let qkv = matvec(&block.qkv_w, &n1, 3, 9);
            // attention over one element is 1 -> output is v
            let v = &qkv[6..9];
            let proj = matvec(&block.proj_w, v, 3, 3);
            let x1: Vec<f64> = token.iter().zip(&proj).map(|(a, b)| a + b).collect();
            let n2 = ln(&x1, &block.norm2_gamma, &block.norm2_beta);
            let h: Vec<f64> = matvec(&block.mlp1_w, &n2, 3, 6).iter().map(|&v| gelu_s(v)).collect();
            let m = matvec(&block.mlp2_w, &h, 6, 3);
            for c in 0..3 {
                let want = x1[c] + m[c];
                let gotv = got.data()[c * 4 + t];
                assert!((gotv - want).abs() < 1e-12, "token {t} ch {c}: {gotv} vs {want}");
            }
        }
    }

    #[test]
    fn window_contents_permute_equivariantly() {
        let mut rng = WeightRng::new(4);
        let block = StlBlock::seeded(&mut rng, 4, 2, 2, false).unwrap();
        let x = randu(5, &[4, 4, 4], -1.0, 1.0);
        let tape = Tape::new();
        let base = stl(&tape, &tape.constant(x.clone()), &block, false).unwrap().value();

        // swap the two top rows of the first 2x2 window: positions (0,0)<->(1,0), (0,1)<->(1,1)
        let mut permuted = x.data().to_vec();
        for c in 0..4 {
            for xx in 0..2 {
                permuted.swap(c * 16 + xx, c * 16 + 4 + xx);
            }
        }
        let xp = NdArray::from_vec(&[4, 4, 4], permuted).unwrap();
        let out_p = stl(&tape, &tape.constant(xp), &block, false).unwrap().value();
        for c in 0..4 {
            for xx in 0..2 {
                let a = base.value_at(c, 0, xx);
                let b = out_p.value_at(c, 1, xx);
                assert!((a - b).abs() < 1e-12);
                let a2 = base.value_at(c, 1, xx);
                let b2 = out_p.value_at(c, 0, xx);
                assert!((a2 - b2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fuse_passthrough_linearity_and_oracle() {
        let c = 3;
        // identity-on-F fusion: center tap of the first half is the unit matrix
        let mut w = vec![0.0; c * 2 * c * 9];
        for o in 0..c {
            w[(o * 2 * c + o) * 9 + 4] = 1.0;
        }
        let ident = Conv {
            weight: NdArray::new_unchecked(&[c, 2 * c, 3, 3], w),
            bias: NdArray::zeros(&[c]),
            stride: 1,
        };
        let f = randu(6, &[3, 4, 4], -1.0, 1.0);
        let tape = Tape::new();
        let fv = tape.constant(f.clone());
        let zero = tape.constant(NdArray::zeros(&[3, 4, 4]));
        let out = fuse(&tape, &fv, &zero, &ident, false).unwrap();
        assert_eq!(out.value().data(), f.data());

        // linearity with zero bias
        let mut rng = WeightRng::new(7);
        let conv = Conv::seeded(&mut rng, 3, 6, 3, 1);
        let a = randu(8, &[3, 4, 4], -1.0, 1.0);
        let one = fuse(&tape, &fv, &tape.constant(a.clone()), &conv, false).unwrap().value();
        let fa2 = tape.constant(f.map(|v| 2.0 * v));
        let aa2 = tape.constant(a.map(|v| 2.0 * v));
        let two = fuse(&tape, &fa2, &aa2, &conv, false).unwrap().value();
        for (x2, x1) in two.data().iter().zip(one.data()) {
            assert!((x2 - 2.0 * x1).abs() < 1e-12);
        }

        // literal direct-convolution oracle on the concatenated input
        let mut cat = f.data().to_vec();
        cat.extend_from_slice(a.data());
        for oy in 0..4 {
            for ox in 0..4 {
                for co in 0..3 {
                    let mut want = 0.0;
                    for ci in 0..6 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = oy as isize + ky as isize - 1;
                                let ix = ox as isize + kx as isize - 1;
                                if (0..4).contains(&iy) && (0..4).contains(&ix) {
                                    want += cat[(ci * 4 + iy as usize) * 4 + ix as usize]
                                        * conv.weight.data()[((co * 6 + ci) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                    }
                    let got = one.data()[(co * 4 + oy) * 4 + ox];
                    assert!((got - want).abs() < 1e-12);
                }
            }
        }
    }

    impl NdArray {
        fn value_at(&self, c: usize, y: usize, x: usize) -> f64 {
            let (h, w) = (self.shape()[1], self.shape()[2]);
            self.data()[(c * h + y) * w + x]
        }
    }

    #[test]
    fn rfa_preserves_shape_and_reduces_to_identity() {
        // zeroed STL chain and identity-ish config: out = tail(conv-fused + F)
        let stack = RfaStack::zeroed(3, 2, 1, 1);
        let f = randu(9, &[3, 4, 4], -1.0, 1.0);
        let a = randu(10, &[3, 4, 4], -1.0, 1.0);
        let tape = Tape::new();
        let out = rfa(
            &tape,
            &tape.constant(f.clone()),
            &tape.constant(a),
            &stack,
            false,
        )
        .unwrap();
        assert_eq!(out.shape(), vec![3, 4, 4]);
        // everything zeroed -> output zero
        assert!(out.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rfa_reduction_with_passthrough_fuse_and_identity_tail() {
        // fuse = identity-on-F, zeroed STL (residual passthrough), identity
        // tail: the output is fuse(F,A) + F, here exactly 2F for A = 0
        let c = 3;
        let mut fuse_w = vec![0.0; c * 2 * c * 9];
        let mut tail_w = vec![0.0; c * c * 9];
        for o in 0..c {
            fuse_w[(o * 2 * c + o) * 9 + 4] = 1.0;
            tail_w[(o * c + o) * 9 + 4] = 1.0;
        }
        let stack = RfaStack {
            fuse: Conv {
                weight: NdArray::new_unchecked(&[c, 2 * c, 3, 3], fuse_w),
                bias: NdArray::zeros(&[c]),
                stride: 1,
            },
            blocks: vec![StlBlock::zeroed(c, 2, 1, false)],
            tail: Conv {
                weight: NdArray::new_unchecked(&[c, c, 3, 3], tail_w),
                bias: NdArray::zeros(&[c]),
                stride: 1,
            },
        };
        let f = randu(20, &[3, 4, 4], -1.0, 1.0);
        let tape = Tape::new();
        let fv = tape.constant(f.clone());
        let zero = tape.constant(NdArray::zeros(&[3, 4, 4]));
        let out = rfa(&tape, &fv, &zero, &stack, false).unwrap().value();
        for (o, x) in out.data().iter().zip(f.data()) {
            assert!((o - 2.0 * x).abs() < 1e-12);
        }
    }

    #[test]
    fn rfa_gradients_match_finite_differences() {
        let mut rng = WeightRng::new(11);
        let stack = RfaStack::seeded(&mut rng, 2, 2, 1, 1).unwrap();
        let f = randu(12, &[2, 4, 4], -1.0, 1.0);
        let a = randu(13, &[2, 4, 4], -1.0, 1.0);
        let report = check_gradients(
            &[f, a],
            |tape, vars| {
                let out = rfa(tape, &vars[0], &vars[1], &stack, false).unwrap();
                ops::sum_all(&ops::mul(&out, &out))
            },
            &CheckConfig::default(),
        );
        assert!(report.max_rel_err < 1e-5, "rfa rel err {}", report.max_rel_err);
    }

    fn toy_setup(seed: u64) -> (EncoderStack, ImagePlane, ImagePlane, FeaturePyramid) {
        let stack = EncoderStack::seeded(17, TINY_WIDTHS);
        let lr = ImagePlane::from_fn(8, 8, |c, y, x| {
            (((c + 2) * (y + 1) * (x + 3) + seed as usize) % 13) as f64 / 13.0
        });
        let reference = ImagePlane::from_fn(32, 32, |c, y, x| {
            (((c + 1) * (y + 2) * (x + 1) + seed as usize) % 17) as f64 / 17.0
        });
        let lr_up = bicubic_upsample(&lr, 4);
        let pyr = FeaturePyramid::build(&stack, &lr_up, &reference).unwrap();
        (stack, lr_up, reference, pyr)
    }

    #[test]
    fn zeroed_network_is_bitwise_bicubic_identity() {
        let (_, lr_up, _, pyr) = toy_setup(1);
        let weights = UNetWeights::zeroed(UNetConfig::tiny());
        let tape = Tape::new();
        let out = unet_forward(&tape, &pyr, &lr_up, &weights, false, &ForwardOptions::default())
            .unwrap();
        let sr = out.sr.value();
        assert_eq!(sr.data(), lr_up.array().data(), "skip path must be exact");
    }

    #[test]
    fn masked_off_transfer_still_finite_and_sensitive_to_scale() {
        let (_, lr_up, _, pyr) = toy_setup(2);
        let weights = UNetWeights::seeded(23, UNetConfig::tiny()).unwrap();
        let tape = Tape::new();
        let gated = unet_forward(
            &tape,
            &pyr,
            &lr_up,
            &weights,
            false,
            &ForwardOptions {
                mask_override: Some(0.0),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(gated.sr.value().data().iter().all(|v| v.is_finite()));
        assert_eq!(gated.sr.shape(), vec![3, 32, 32]);

        let plain = unet_forward(&tape, &pyr, &lr_up, &weights, false, &ForwardOptions::default())
            .unwrap();
        // doubled features must change the output
        let mut pyr2 = pyr.clone();
        for v in pyr2.v.iter_mut() {
            *v = v.map(|x| 2.0 * x);
        }
        let doubled =
            unet_forward(&tape, &pyr2, &lr_up, &weights, false, &ForwardOptions::default())
                .unwrap();
        assert_ne!(plain.sr.value().data(), doubled.sr.value().data());
    }

    #[test]
    fn forward_backward_produces_finite_gradients() {
        let (_, lr_up, _, pyr) = toy_setup(3);
        let weights = UNetWeights::seeded(29, UNetConfig::tiny()).unwrap();
        let tape = Tape::new();
        let out = unet_forward(&tape, &pyr, &lr_up, &weights, true, &ForwardOptions::default())
            .unwrap();
        let loss = ops::mean_all(&ops::abs(&out.sr));
        tape.backward(&loss).unwrap();
        assert!(loss.item().is_finite());
        // spot-check: masks stay in range, offsets bounded, coop sums to one
        for fields in out.down_fields.iter().chain(&out.up_fields) {
            assert!(fields.masks.value().data().iter().all(|m| (0.0..=1.0).contains(m)));
            assert!(fields
                .offsets
                .value()
                .data()
                .iter()
                .all(|o| o.abs() <= crate::rda::DEFAULT_RADIUS));
        }
    }

    #[test]
    fn synthesize_identity_additivity_and_shape_check() {
        let tape = Tape::new();
        let lr_up = tape.constant(randu(14, &[3, 8, 8], 0.0, 1.0));
        let zero = tape.constant(NdArray::zeros(&[3, 8, 8]));
        let sr = synthesize(&zero, &lr_up).unwrap();
        assert_eq!(sr.value().data(), lr_up.value().data());

        let shift = tape.constant(NdArray::full(&[3, 8, 8], 0.25));
        let sr2 = synthesize(&shift, &lr_up).unwrap();
        for (a, b) in sr2.value().data().iter().zip(lr_up.value().data()) {
            assert!((a - (b + 0.25)).abs() < 1e-15);
        }

        let bad = tape.constant(NdArray::zeros(&[3, 4, 4]));
        assert!(synthesize(&bad, &lr_up).is_err());

        // export clamp
        let over = NdArray::full(&[3, 2, 2], 1.3);
        let img = ImagePlane::from_unclamped(&over).unwrap();
        assert!(img.array().data().iter().all(|&v| v == 1.0));
    }
}
