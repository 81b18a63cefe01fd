//! Multi-scale texture feature encoders and bicubic resampling.
//!
//! The low-resolution input is bicubic-upsampled to reference resolution
//! first, then three fixed convolutional encoders produce query/key/value
//! feature pyramids at strides 1, 2 and 4. Query and key encoders share one
//! weight set so both images are measured with the same ruler; the value
//! encoder is separate. Weights come from a seeded init rather than
//! pretrained networks, with a load hook for external weights.

use std::path::Path;

use rand_xoshiro::rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::ops;
use crate::num::tape::{Tape, Var};
use crate::num::NdArray;

pub const SCALES: usize = 3;

/// An RGB image as `[3,h,w]` floats in `[0,1]`.
#[derive(Clone, Debug)]
pub struct ImagePlane(NdArray);

impl ImagePlane {
    pub fn new(array: NdArray) -> Result<Self> {
        if array.shape().len() != 3 || array.shape()[0] != 3 {
            return Err(Error::shape(
                "ImagePlane",
                format!("expected [3,h,w], got {:?}", array.shape()),
            ));
        }
        if array.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Argument(
                "image values must lie in [0,1]".to_string(),
            ));
        }
        Ok(ImagePlane(array))
    }

    /// Clamps out-of-range values instead of rejecting them (export path).
    pub fn from_unclamped(array: &NdArray) -> Result<Self> {
        ImagePlane::new(array.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(c, y, x).clamp(0.0, 1.0));
                }
            }
        }
        ImagePlane(NdArray::new_unchecked(&[3, h, w], data))
    }

    pub fn constant(h: usize, w: usize, value: f64) -> Self {
        ImagePlane(NdArray::full(&[3, h, w], value.clamp(0.0, 1.0)))
    }

    pub fn array(&self) -> &NdArray {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }
}

// ---------------------------------------------------------------------------
// bicubic resampling

/// Catmull-Rom cubic kernel (a = -0.5).
fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

/// One resampling axis: for each output index, the contributing source
/// indices (clamped to the edge) and normalized weights. The kernel widens
/// by the scale factor when shrinking, so downsampling stays antialiased.
fn resample_taps(n_in: usize, n_out: usize) -> Vec<(Vec<usize>, Vec<f64>)> {
    let scale = n_in as f64 / n_out as f64;
    let filter_scale = scale.max(1.0);
    let support = 2.0 * filter_scale;
    (0..n_out)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale - 0.5;
            let lo = (center - support).ceil() as isize;
            let hi = (center + support).floor() as isize;
            let mut idx = Vec::new();
            let mut wgt = Vec::new();
            let mut sum = 0.0;
            for i in lo..=hi {
                let w = cubic((i as f64 - center) / filter_scale);
                if w == 0.0 {
                    continue;
                }
                idx.push(i.clamp(0, n_in as isize - 1) as usize);
                wgt.push(w);
                sum += w;
            }
            for w in &mut wgt {
                *w /= sum;
            }
            (idx, wgt)
        })
        .collect()
}

/// Separable bicubic resize of `[c,h,w]` to `[c,oh,ow]`, edge-clamped.
pub fn bicubic_resize(array: &NdArray, oh: usize, ow: usize) -> NdArray {
    let (c, h, w) = (array.shape()[0], array.shape()[1], array.shape()[2]);
    let row_taps = resample_taps(w, ow);
    let col_taps = resample_taps(h, oh);
    // rows first
    let mut tmp = vec![0.0; c * h * ow];
    for ch in 0..c {
        for y in 0..h {
            let src = &array.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
            for (x, (idx, wgt)) in row_taps.iter().enumerate() {
                tmp[(ch * h + y) * ow + x] =
                    idx.iter().zip(wgt).map(|(&i, &g)| g * src[i]).sum();
            }
        }
    }
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for (y, (idx, wgt)) in col_taps.iter().enumerate() {
            for x in 0..ow {
                out[(ch * oh + y) * ow + x] = idx
                    .iter()
                    .zip(wgt)
                    .map(|(&i, &g)| g * tmp[(ch * h + i) * ow + x])
                    .sum();
            }
        }
    }
    NdArray::new_unchecked(&[c, oh, ow], out)
}

/// Bicubic pre-upsampling of the LR image; factor 1 is the exact identity.
/// Output values are clamped back to `[0,1]`.
pub fn bicubic_upsample(image: &ImagePlane, factor: usize) -> ImagePlane {
    assert!(factor >= 1, "upsample factor must be >= 1");
    let raw = bicubic_resize(
        image.array(),
        image.height() * factor,
        image.width() * factor,
    );
    ImagePlane(raw.map(|v| v.clamp(0.0, 1.0)))
}

// ---------------------------------------------------------------------------
// seeded weight init

/// Deterministic weight sampler: xoshiro256++ stream with Box-Muller
/// normals. Same seed, same bits, on every platform.
pub struct WeightRng {
    rng: Xoshiro256PlusPlus,
    spare: Option<f64>,
}

impl WeightRng {
    pub fn new(seed: u64) -> Self {
        WeightRng {
            rng: Xoshiro256PlusPlus::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = loop {
            let u = self.uniform();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// He fan-in init: N(0, sqrt(2/fan_in)) over `shape`, fan_in from the
    /// trailing dims of a conv weight `[cout,cin,kh,kw]`.
    pub fn he_conv(&mut self, cout: usize, cin: usize, kh: usize, kw: usize) -> NdArray {
        let std = (2.0 / (cin * kh * kw) as f64).sqrt();
        let data = (0..cout * cin * kh * kw)
            .map(|_| self.normal() * std)
            .collect();
        NdArray::new_unchecked(&[cout, cin, kh, kw], data)
    }

    /// He fan-in init for a dense `[rows, cols]` matrix (fan_in = rows).
    pub fn he_dense(&mut self, rows: usize, cols: usize) -> NdArray {
        let std = (2.0 / rows as f64).sqrt();
        let data = (0..rows * cols).map(|_| self.normal() * std).collect();
        NdArray::new_unchecked(&[rows, cols], data)
    }

    /// Variance-preserving init for layers without a following relu,
    /// optionally damped by `gain` (residual-branch outputs use gain < 1 so
    /// the network starts near the skip path).
    pub fn xavier_conv(&mut self, cout: usize, cin: usize, kh: usize, kw: usize, gain: f64) -> NdArray {
        let std = gain * (1.0 / (cin * kh * kw) as f64).sqrt();
        let data = (0..cout * cin * kh * kw)
            .map(|_| self.normal() * std)
            .collect();
        NdArray::new_unchecked(&[cout, cin, kh, kw], data)
    }

    pub fn xavier_dense(&mut self, rows: usize, cols: usize, gain: f64) -> NdArray {
        let std = gain * (1.0 / rows as f64).sqrt();
        let data = (0..rows * cols).map(|_| self.normal() * std).collect();
        NdArray::new_unchecked(&[rows, cols], data)
    }
}

// ---------------------------------------------------------------------------
// encoder stack

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Query,
    Key,
    Value,
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: NdArray,
    pub bias: NdArray,
    pub stride: usize,
}

impl Conv {
    pub fn seeded(rng: &mut WeightRng, cout: usize, cin: usize, ksize: usize, stride: usize) -> Self {
        Conv {
            weight: rng.he_conv(cout, cin, ksize, ksize),
            bias: NdArray::zeros(&[cout]),
            stride,
        }
    }

    /// Variance-preserving init for convs not followed by a relu.
    pub fn seeded_linear(
        rng: &mut WeightRng,
        cout: usize,
        cin: usize,
        ksize: usize,
        stride: usize,
        gain: f64,
    ) -> Self {
        Conv {
            weight: rng.xavier_conv(cout, cin, ksize, ksize, gain),
            bias: NdArray::zeros(&[cout]),
            stride,
        }
    }

    pub fn zeros(cout: usize, cin: usize, ksize: usize, stride: usize) -> Self {
        Conv {
            weight: NdArray::zeros(&[cout, cin, ksize, ksize]),
            bias: NdArray::zeros(&[cout]),
            stride,
        }
    }

    pub fn apply(&self, tape: &Tape, x: &Var, trainable: bool) -> Result<Var> {
        let w = tape.leaf(self.weight.clone(), trainable);
        let b = tape.leaf(self.bias.clone(), trainable);
        let pad = self.weight.shape()[2] / 2;
        ops::conv2d(x, &w, Some(&b), self.stride, pad)
    }
}

#[derive(Clone, Debug)]
pub struct EncBlock {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl EncBlock {
    fn seeded(rng: &mut WeightRng, cin: usize, cout: usize, first_stride: usize) -> Self {
        EncBlock {
            conv1: Conv::seeded(rng, cout, cin, 3, first_stride),
            conv2: Conv::seeded(rng, cout, cout, 3, 1),
        }
    }

    fn forward(&self, tape: &Tape, x: &Var, trainable: bool) -> Result<Var> {
        let h = ops::relu(&self.conv1.apply(tape, x, trainable)?);
        Ok(ops::relu(&self.conv2.apply(tape, &h, trainable)?))
    }
}

/// The three-scale stack. One block set is shared by queries and keys; a
/// second serves values. Scale `l` runs at spatial stride `2^(l-1)`.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub widths: [usize; 3],
    pub seed: u64,
    pub qk: [EncBlock; 3],
    pub v: [EncBlock; 3],
}

/// Default channel widths, mirroring the usual texture-encoder progression.
pub const DEFAULT_WIDTHS: [usize; 3] = [64, 128, 256];
/// Small widths for tests and toy training.
pub const TINY_WIDTHS: [usize; 3] = [4, 8, 16];

impl EncoderStack {
    /// Builds a bit-reproducible stack from a 64-bit seed.
    pub fn seeded(seed: u64, widths: [usize; 3]) -> Self {
        let mut rng = WeightRng::new(seed);
        let [c1, c2, c3] = widths;
        let qk = [
            EncBlock::seeded(&mut rng, 3, c1, 1),
            EncBlock::seeded(&mut rng, c1, c2, 2),
            EncBlock::seeded(&mut rng, c2, c3, 2),
        ];
        let v = [
            EncBlock::seeded(&mut rng, 3, c1, 1),
            EncBlock::seeded(&mut rng, c1, c2, 2),
            EncBlock::seeded(&mut rng, c2, c3, 2),
        ];
        EncoderStack {
            widths,
            seed,
            qk,
            v,
        }
    }

    fn blocks(&self, role: Role) -> &[EncBlock; 3] {
        match role {
            Role::Query | Role::Key => &self.qk,
            Role::Value => &self.v,
        }
    }

    /// Encodes an already-lifted image, keeping everything on the tape so
    /// gradients can flow through the features into the image.
    pub fn encode_vars(
        &self,
        tape: &Tape,
        image: &Var,
        role: Role,
        trainable: bool,
    ) -> Result<[Var; 3]> {
        let shape = image.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::shape(
                "encode",
                format!("expected [3,h,w], got {:?}", shape),
            ));
        }
        if !shape[1].is_multiple_of(4) || !shape[2].is_multiple_of(4) {
            return Err(Error::shape(
                "encode",
                format!("image dims must be divisible by 4, got {}x{}", shape[1], shape[2]),
            ));
        }
        let blocks = self.blocks(role);
        let s1 = blocks[0].forward(tape, image, trainable)?;
        let s2 = blocks[1].forward(tape, &s1, trainable)?;
        let s3 = blocks[2].forward(tape, &s2, trainable)?;
        Ok([s1, s2, s3])
    }

    /// Fixed-weight convenience: encodes on a throwaway tape and returns
    /// plain arrays.
    pub fn encode(&self, image: &ImagePlane, role: Role) -> Result<[NdArray; 3]> {
        let tape = Tape::new();
        let img = tape.constant(image.array().clone());
        let [a, b, c] = self.encode_vars(&tape, &img, role, false)?;
        Ok([a.value(), b.value(), c.value()])
    }

    /// Named parameters, in a stable order.
    pub fn param_entries(&self) -> Vec<(String, NdArray)> {
        let mut out = Vec::new();
        for (tag, blocks) in [("qk", &self.qk), ("v", &self.v)] {
            for (l, block) in blocks.iter().enumerate() {
                for (ci, conv) in [(1, &block.conv1), (2, &block.conv2)] {
                    out.push((format!("enc.{tag}.s{}.c{ci}.w", l + 1), conv.weight.clone()));
                    out.push((format!("enc.{tag}.s{}.c{ci}.b", l + 1), conv.bias.clone()));
                }
            }
        }
        out
    }

    fn param_slots(&mut self) -> Vec<(String, &mut NdArray)> {
        let mut out: Vec<(String, &mut NdArray)> = Vec::new();
        for (tag, blocks) in [("qk", &mut self.qk), ("v", &mut self.v)] {
            for (l, block) in blocks.iter_mut().enumerate() {
                for (ci, conv) in [(1, &mut block.conv1), (2, &mut block.conv2)] {
                    out.push((format!("enc.{tag}.s{}.c{ci}.w", l + 1), &mut conv.weight));
                    out.push((format!("enc.{tag}.s{}.c{ci}.b", l + 1), &mut conv.bias));
                }
            }
        }
        out
    }

    /// Saves one tensor dump per parameter plus a JSON manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = EncoderManifest {
            seed: self.seed,
            widths: self.widths.to_vec(),
            params: Vec::new(),
        };
        for (name, value) in self.param_entries() {
            let file = format!("{name}.ndar");
            value.save_ndar(&dir.join(&file))?;
            manifest.params.push(ParamEntry {
                name,
                shape: value.shape().to_vec(),
                file,
            });
        }
        let json = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }

    /// External-weights hook: loads a stack saved by [`EncoderStack::save`]
    /// (or produced elsewhere in the same layout).
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: EncoderManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.widths.len() != 3 {
            return Err(Error::Config(format!(
                "encoder manifest must list 3 widths, got {:?}",
                manifest.widths
            )));
        }
        let widths = [manifest.widths[0], manifest.widths[1], manifest.widths[2]];
        let mut stack = EncoderStack::seeded(manifest.seed, widths);
        for entry in &manifest.params {
            let value = NdArray::load_ndar(&dir.join(&entry.file))?;
            if value.shape() != entry.shape.as_slice() {
                return Err(Error::shape(
                    "EncoderStack::load",
                    format!("{}: manifest {:?} vs file {:?}", entry.name, entry.shape, value.shape()),
                ));
            }
            let mut found = false;
            for (name, slot) in stack.param_slots() {
                if name == entry.name {
                    if slot.shape() != value.shape() {
                        return Err(Error::shape(
                            "EncoderStack::load",
                            format!("{}: expected {:?}, got {:?}", name, slot.shape(), value.shape()),
                        ));
                    }
                    *slot = value.clone();
                    found = true;
                    break;
                }
            }
            if !found {
                return Err(Error::Config(format!("unknown parameter {}", entry.name)));
            }
        }
        Ok(stack)
    }
}

#[derive(Serialize, Deserialize)]
struct EncoderManifest {
    seed: u64,
    widths: Vec<usize>,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

/// Query/key/value features for one LR/Ref pair at all three scales.
/// `q[l]` follows the upsampled LR grid, `k[l]`/`v[l]` the reference grid.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub q: [NdArray; 3],
    pub k: [NdArray; 3],
    pub v: [NdArray; 3],
}

impl FeaturePyramid {
    /// Encodes both images with fixed weights.
    pub fn build(stack: &EncoderStack, lr_up: &ImagePlane, reference: &ImagePlane) -> Result<Self> {
        Ok(FeaturePyramid {
            q: stack.encode(lr_up, Role::Query)?,
            k: stack.encode(reference, Role::Key)?,
            v: stack.encode(reference, Role::Value)?,
        })
    }
}
