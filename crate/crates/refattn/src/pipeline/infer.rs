//! Inference: one full pass from an LR/Ref pair to the SR image, with
//! optional tensor dumps of the attention internals.

use std::path::Path;

use crate::aggregate::{unet_forward, ForwardOptions};
use crate::encoder::{bicubic_upsample, EncoderStack, FeaturePyramid, ImagePlane};
use crate::error::{Error, Result};
use crate::num::tape::Tape;
use crate::num::NdArray;

use super::Checkpoint;

pub struct SrResult {
    /// Clamped output image, 4x the LR size.
    pub image: ImagePlane,
    /// Unclamped raw values (what the losses see).
    pub raw: NdArray,
    /// Top-1 similarity maps per scale (finest first).
    pub similarity_maps: [NdArray; 3],
}

/// Runs the generator from a checkpoint. With `dump_dir` set, writes the
/// attended features, offset and mask fields, and similarity maps per scale
/// as tensor dumps.
pub fn run_sr(
    lr: &ImagePlane,
    reference: &ImagePlane,
    checkpoint: &Checkpoint,
    dump_dir: Option<&Path>,
) -> Result<SrResult> {
    if !reference.height().is_multiple_of(4) || !reference.width().is_multiple_of(4) {
        return Err(Error::shape(
            "run_sr",
            format!(
                "reference dims {}x{} must be divisible by 4",
                reference.height(),
                reference.width()
            ),
        ));
    }
    let config = &checkpoint.config;
    let encoder = EncoderStack::seeded(config.seed, config.widths);
    let lr_up = bicubic_upsample(lr, config.scale_factor);
    let pyramid = FeaturePyramid::build(&encoder, &lr_up, reference)?;
    let tape = Tape::new();
    let out = unet_forward(
        &tape,
        &pyramid,
        &lr_up,
        &checkpoint.weights,
        false,
        &ForwardOptions::default(),
    )?;
    let raw = out.sr.value();
    let image = ImagePlane::from_unclamped(&raw)?;
    let similarity_maps = [
        out.maps[0].similarity_map(),
        out.maps[1].similarity_map(),
        out.maps[2].similarity_map(),
    ];

    if let Some(dir) = dump_dir {
        std::fs::create_dir_all(dir)?;
        raw.save_ndar(&dir.join("sr_raw.ndar"))?;
        for (l, sim) in similarity_maps.iter().enumerate() {
            let tag = l + 1;
            sim.save_ndar(&dir.join(format!("similarity.s{tag}.ndar")))?;
            out.down_attended[l]
                .value()
                .save_ndar(&dir.join(format!("attended.s{tag}.ndar")))?;
            out.down_fields[l]
                .offsets
                .value()
                .save_ndar(&dir.join(format!("offsets.s{tag}.ndar")))?;
            out.down_fields[l]
                .masks
                .value()
                .save_ndar(&dir.join(format!("masks.s{tag}.ndar")))?;
        }
    }

    Ok(SrResult {
        image,
        raw,
        similarity_maps,
    })
}
