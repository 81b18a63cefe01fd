//! PNG in/out and heatmap export.
//!
//! Images cross the boundary as 8-bit RGB PNG and live as `[0,1]` floats
//! inside. Heatmaps go out min-max scaled to grayscale with the scaling
//! recorded in a JSON sidecar, so the raw range is recoverable.

use std::path::Path;

use crate::encoder::ImagePlane;
use crate::error::Result;
use crate::num::NdArray;

pub fn load_png(path: &Path) -> Result<ImagePlane> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, pixel) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = pixel[c] as f64 / 255.0;
        }
    }
    ImagePlane::new(NdArray::new_unchecked(&[3, h, w], data))
}

pub fn save_png(img: &ImagePlane, path: &Path) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    let data = img.array().data();
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| (data[(c * h + y) * w + x] * 255.0).round() as u8);
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    buf.save(path)?;
    Ok(())
}

/// Writes a `[h,w]` map as a min-max scaled grayscale PNG plus a JSON
/// sidecar `<path>.json` recording `{min, max}`.
pub fn save_heatmap(map: &NdArray, path: &Path) -> Result<()> {
    assert_eq!(map.shape().len(), 2, "heatmap expects [h,w]");
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let min = map.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = map.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if max > min { max - min } else { 1.0 };
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (map.data()[y * w + x] - min) / span;
            buf.put_pixel(x as u32, y as u32, image::Luma([(v * 255.0).round() as u8]));
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    buf.save(path)?;
    let sidecar = serde_json::json!({ "min": min, "max": max });
    let mut sidecar_path = path.as_os_str().to_os_string();
    sidecar_path.push(".json");
    std::fs::write(sidecar_path, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}
