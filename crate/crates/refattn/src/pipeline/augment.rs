//! Bicubic degradation and training-time augmentation.
//!
//! Geometric transforms (flips, quarter rotations) hit the LR/HR pair
//! identically so they stay aligned; photometric jitter (brightness,
//! contrast, hue) hits the reference independently, which is what trains
//! the matcher-facing pathway to tolerate distribution gaps.

use crate::encoder::{bicubic_resize, ImagePlane, WeightRng};
use crate::error::{Error, Result};
use crate::num::NdArray;

use super::{RunConfig, SamplePair};

/// Bicubic 1/4 downsampling with the same kernel family as the upsampler.
pub fn degrade(hr: &ImagePlane) -> Result<ImagePlane> {
    if !hr.height().is_multiple_of(4) || !hr.width().is_multiple_of(4) {
        return Err(Error::shape(
            "degrade",
            format!("dims {}x{} not divisible by 4", hr.height(), hr.width()),
        ));
    }
    let raw = bicubic_resize(hr.array(), hr.height() / 4, hr.width() / 4);
    ImagePlane::from_unclamped(&raw)
}

fn rot90(img: &ImagePlane) -> ImagePlane {
    let (h, w) = (img.height(), img.width());
    let src = img.array().data();
    let mut out = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                // clockwise: (y,x) -> (x, h-1-y)
                out[(c * w + x) * h + (h - 1 - y)] = src[(c * h + y) * w + x];
            }
        }
    }
    ImagePlane::new(NdArray::new_unchecked(&[3, w, h], out)).expect("rotation preserves range")
}

fn flip_h(img: &ImagePlane) -> ImagePlane {
    let (h, w) = (img.height(), img.width());
    let src = img.array().data();
    let mut out = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                out[(c * h + y) * w + (w - 1 - x)] = src[(c * h + y) * w + x];
            }
        }
    }
    ImagePlane::new(NdArray::new_unchecked(&[3, h, w], out)).expect("flip preserves range")
}

fn flip_v(img: &ImagePlane) -> ImagePlane {
    let (h, w) = (img.height(), img.width());
    let src = img.array().data();
    let mut out = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                out[(c * h + (h - 1 - y)) * w + x] = src[(c * h + y) * w + x];
            }
        }
    }
    ImagePlane::new(NdArray::new_unchecked(&[3, h, w], out)).expect("flip preserves range")
}

/// The same geometric transform on both aligned images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeomDraw {
    pub flip_h: bool,
    pub flip_v: bool,
    pub quarter_turns: usize,
}

impl GeomDraw {
    pub const IDENTITY: GeomDraw = GeomDraw {
        flip_h: false,
        flip_v: false,
        quarter_turns: 0,
    };

    pub fn sample(rng: &mut WeightRng) -> Self {
        GeomDraw {
            flip_h: rng.uniform() < 0.5,
            flip_v: rng.uniform() < 0.5,
            quarter_turns: (rng.uniform() * 4.0) as usize % 4,
        }
    }

    pub fn apply(&self, img: &ImagePlane) -> ImagePlane {
        let mut out = img.clone();
        if self.flip_h {
            out = flip_h(&out);
        }
        if self.flip_v {
            out = flip_v(&out);
        }
        for _ in 0..self.quarter_turns {
            out = rot90(&out);
        }
        out
    }
}

/// Photometric jitter parameters (factor ranges around 1, hue as a fraction
/// of the color circle).
#[derive(Clone, Copy, Debug)]
pub struct Jitter {
    pub brightness: f64,
    pub contrast: f64,
    pub hue: f64,
}

/// Jitter presets used by the robustness evaluation.
pub const JITTER_SMALL: Jitter = Jitter {
    brightness: 0.10,
    contrast: 0.10,
    hue: 0.05,
};
pub const JITTER_MEDIUM: Jitter = Jitter {
    brightness: 0.25,
    contrast: 0.25,
    hue: 0.10,
};
pub const JITTER_LARGE: Jitter = Jitter {
    brightness: 0.40,
    contrast: 0.40,
    hue: 0.20,
};

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

/// Applies a concrete photometric draw: brightness scale, contrast scale
/// around 0.5, hue rotation. Values re-clamp to `[0,1]`.
pub fn apply_photometric(img: &ImagePlane, brightness: f64, contrast: f64, hue_shift: f64) -> ImagePlane {
    let (h, w) = (img.height(), img.width());
    let src = img.array().data();
    let n = h * w;
    let mut out = vec![0.0; 3 * n];
    for i in 0..n {
        let mut rgb = [src[i], src[n + i], src[2 * n + i]];
        for v in rgb.iter_mut() {
            *v = ((*v * brightness) - 0.5) * contrast + 0.5;
            *v = v.clamp(0.0, 1.0);
        }
        let (hh, ss, vv) = rgb_to_hsv(rgb[0], rgb[1], rgb[2]);
        let (r, g, b) = hsv_to_rgb(hh + hue_shift, ss, vv);
        out[i] = r.clamp(0.0, 1.0);
        out[n + i] = g.clamp(0.0, 1.0);
        out[2 * n + i] = b.clamp(0.0, 1.0);
    }
    ImagePlane::new(NdArray::new_unchecked(&[3, h, w], out)).expect("clamped to range")
}

/// Samples a photometric draw uniformly inside the jitter ranges.
pub fn sample_photometric(rng: &mut WeightRng, jitter: &Jitter) -> (f64, f64, f64) {
    let draw = |range: f64, rng: &mut WeightRng| 1.0 + range * (2.0 * rng.uniform() - 1.0);
    (
        draw(jitter.brightness, rng),
        draw(jitter.contrast, rng),
        jitter.hue * (2.0 * rng.uniform() - 1.0),
    )
}

/// One augmentation draw over a sample pair following the run config.
pub fn augment(pair: &SamplePair, config: &RunConfig, rng: &mut WeightRng) -> SamplePair {
    let geom = if config.geometric_augment {
        GeomDraw::sample(rng)
    } else {
        GeomDraw::IDENTITY
    };
    let jitter = Jitter {
        brightness: config.brightness_jitter,
        contrast: config.contrast_jitter,
        hue: config.hue_jitter,
    };
    let (b, c, h) = sample_photometric(rng, &jitter);
    let reference = if b == 1.0 && c == 1.0 && h == 0.0 {
        pair.reference.clone()
    } else {
        apply_photometric(&pair.reference, b, c, h)
    };
    SamplePair {
        lr: geom.apply(&pair.lr),
        hr: geom.apply(&pair.hr),
        reference,
    }
}
