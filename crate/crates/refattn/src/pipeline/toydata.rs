//! Procedural texture pairs: no binary fixtures, everything generated from
//! a seed. A large canvas of multi-octave value noise plus a few geometric
//! primitives yields an HR crop, its bicubic LR, and a reference crop taken
//! a small shift away so the matcher has real (but not trivial) structure
//! to find.

use crate::encoder::{ImagePlane, WeightRng};
use crate::error::Result;
use crate::num::NdArray;

use super::augment::degrade;
use super::SamplePair;

/// Smoothstep-interpolated value noise on a coarse lattice.
fn value_noise(rng: &mut WeightRng, h: usize, w: usize, cell: usize) -> Vec<f64> {
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.uniform()).collect();
    let fade = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let gy = y / cell;
        let ty = fade((y % cell) as f64 / cell as f64);
        for x in 0..w {
            let gx = x / cell;
            let tx = fade((x % cell) as f64 / cell as f64);
            let v00 = lattice[gy * gw + gx];
            let v01 = lattice[gy * gw + gx + 1];
            let v10 = lattice[(gy + 1) * gw + gx];
            let v11 = lattice[(gy + 1) * gw + gx + 1];
            out[y * w + x] =
                (1.0 - ty) * ((1.0 - tx) * v00 + tx * v01) + ty * ((1.0 - tx) * v10 + tx * v11);
        }
    }
    out
}

/// A seeded texture canvas `[3,h,w]` with noise octaves, stripes and a few
/// solid primitives.
pub fn texture_canvas(seed: u64, h: usize, w: usize) -> ImagePlane {
    let mut rng = WeightRng::new(seed);
    let mut planes = vec![0.0; 3 * h * w];

    // shared luminance structure with per-channel tinting
    let coarse = value_noise(&mut rng, h, w, 16.max(h / 8));
    let mid = value_noise(&mut rng, h, w, 8.max(h / 16));
    let fine = value_noise(&mut rng, h, w, 4);
    let tint: Vec<f64> = (0..3).map(|_| 0.6 + 0.4 * rng.uniform()).collect();
    let stripe_period = 6.0 + 10.0 * rng.uniform();
    let stripe_angle = rng.uniform() * std::f64::consts::PI;
    let (sa, ca) = stripe_angle.sin_cos();
    for y in 0..h {
        for x in 0..w {
            let base = 0.5 * coarse[y * w + x] + 0.3 * mid[y * w + x] + 0.2 * fine[y * w + x];
            let phase = (y as f64 * sa + x as f64 * ca) / stripe_period;
            let stripes = 0.15 * (phase * std::f64::consts::TAU).sin();
            for c in 0..3 {
                planes[(c * h + y) * w + x] = (tint[c] * base + stripes + 0.15).clamp(0.0, 1.0);
            }
        }
    }

    // a few solid rectangles and disks for hard edges
    let n_prims = 3 + (rng.uniform() * 3.0) as usize;
    for _ in 0..n_prims {
        let cy = rng.uniform() * h as f64;
        let cx = rng.uniform() * w as f64;
        let size = (0.05 + 0.15 * rng.uniform()) * h.min(w) as f64;
        let color: Vec<f64> = (0..3).map(|_| rng.uniform()).collect();
        let disk = rng.uniform() < 0.5;
        let y0 = (cy - size).max(0.0) as usize;
        let y1 = ((cy + size) as usize).min(h);
        let x0 = (cx - size).max(0.0) as usize;
        let x1 = ((cx + size) as usize).min(w);
        for y in y0..y1 {
            for x in x0..x1 {
                let inside = if disk {
                    let dy = y as f64 - cy;
                    let dx = x as f64 - cx;
                    dy * dy + dx * dx <= size * size
                } else {
                    true
                };
                if inside {
                    for c in 0..3 {
                        let slot = &mut planes[(c * h + y) * w + x];
                        *slot = (0.35 * *slot + 0.65 * color[c]).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }

    ImagePlane::new(NdArray::new_unchecked(&[3, h, w], planes)).expect("clamped")
}

fn crop(img: &ImagePlane, y0: usize, x0: usize, h: usize, w: usize) -> ImagePlane {
    let (ih, iw) = (img.height(), img.width());
    assert!(y0 + h <= ih && x0 + w <= iw);
    let src = img.array().data();
    let mut out = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                out[(c * h + y) * w + x] = src[(c * ih + y0 + y) * iw + x0 + x];
            }
        }
    }
    ImagePlane::new(NdArray::new_unchecked(&[3, h, w], out)).expect("crop preserves range")
}

/// One procedural LR/HR/Ref triplet. The reference is a crop of the same
/// canvas shifted by `ref_shift` pixels, so its texture is relevant but not
/// perfectly aligned.
pub fn toy_pair(seed: u64, hr_size: usize, scale: usize, ref_shift: usize) -> Result<SamplePair> {
    let canvas = texture_canvas(seed, hr_size + ref_shift, hr_size + ref_shift);
    let hr = crop(&canvas, 0, 0, hr_size, hr_size);
    let reference = crop(&canvas, ref_shift, ref_shift, hr_size, hr_size);
    let lr = degrade(&hr)?;
    let pair = SamplePair { lr, hr, reference };
    pair.validate(scale)?;
    Ok(pair)
}

/// A reference image with no usable texture: pure per-pixel noise.
pub fn noise_reference(seed: u64, h: usize, w: usize) -> ImagePlane {
    let mut rng = WeightRng::new(seed);
    ImagePlane::new(NdArray::new_unchecked(
        &[3, h, w],
        (0..3 * h * w).map(|_| rng.uniform()).collect(),
    ))
    .expect("uniform draws lie in range")
}
