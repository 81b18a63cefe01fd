//! Run configuration, data plumbing, the toy training loop and inference.

pub mod augment;
pub mod image_io;
pub mod infer;
pub mod selftest;
pub mod toydata;
pub mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregate::{UNetConfig, UNetWeights};
use crate::encoder::ImagePlane;
use crate::error::{Error, Result};
use crate::losses::Critic;
use crate::num::NdArray;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Reconstruction loss only.
    Rec,
    /// Reconstruction + perceptual + adversarial.
    All,
}

/// Everything a run needs, JSON-serializable. Unknown keys are rejected.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub scale_factor: usize,
    pub lr_patch: usize,
    pub hr_patch: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub k: usize,
    pub radius: f64,
    pub patch: usize,
    pub widths: [usize; 3],
    pub window: usize,
    pub heads: usize,
    pub stl_blocks: usize,
    pub critic_base: usize,
    /// Photometric jitter ranges applied to the reference image.
    pub brightness_jitter: f64,
    pub contrast_jitter: f64,
    pub hue_jitter: f64,
    /// Random flips and quarter rotations of the LR/HR pair.
    pub geometric_augment: bool,
    pub mode: TrainMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            scale_factor: 4,
            lr_patch: 40,
            hr_patch: 160,
            batch_size: 9,
            steps: 200,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            lambda1: crate::losses::DEFAULT_LAMBDA1,
            lambda2: crate::losses::DEFAULT_LAMBDA2,
            k: 1,
            radius: crate::rda::DEFAULT_RADIUS,
            patch: 3,
            widths: crate::encoder::DEFAULT_WIDTHS,
            window: 4,
            heads: 2,
            stl_blocks: 2,
            critic_base: 8,
            brightness_jitter: 0.1,
            contrast_jitter: 0.1,
            hue_jitter: 0.05,
            geometric_augment: true,
            mode: TrainMode::Rec,
        }
    }
}

impl RunConfig {
    /// Desk-scale setup: tiny widths, small attention blocks, single-sample
    /// batches.
    pub fn toy() -> Self {
        RunConfig {
            widths: crate::encoder::TINY_WIDTHS,
            window: 2,
            heads: 1,
            stl_blocks: 1,
            batch_size: 1,
            critic_base: 4,
            learning_rate: 1e-3,
            ..RunConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hr_patch != self.lr_patch * self.scale_factor {
            return Err(Error::Config(format!(
                "hr_patch {} must equal lr_patch {} x scale_factor {}",
                self.hr_patch, self.lr_patch, self.scale_factor
            )));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if v <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config(
                "loss weights lambda1/lambda2 must be non-negative".to_string(),
            ));
        }
        if self.batch_size == 0 || self.k == 0 || self.patch.is_multiple_of(2) {
            return Err(Error::Config(
                "batch_size and k must be >= 1 and patch odd".to_string(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: RunConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn unet_config(&self) -> UNetConfig {
        UNetConfig {
            widths: self.widths,
            window: self.window,
            heads: self.heads,
            stl_blocks: self.stl_blocks,
            k: self.k,
            patch: self.patch,
            radius: self.radius,
        }
    }

    /// Effective loss weights for the chosen mode.
    pub fn lambdas(&self) -> (f64, f64) {
        match self.mode {
            TrainMode::Rec => (0.0, 0.0),
            TrainMode::All => (self.lambda1, self.lambda2),
        }
    }
}

/// One training/evaluation triplet.
#[derive(Clone, Debug)]
pub struct SamplePair {
    pub lr: ImagePlane,
    pub hr: ImagePlane,
    pub reference: ImagePlane,
}

impl SamplePair {
    pub fn validate(&self, scale_factor: usize) -> Result<()> {
        if self.hr.height() != self.lr.height() * scale_factor
            || self.hr.width() != self.lr.width() * scale_factor
        {
            return Err(Error::shape(
                "SamplePair",
                format!(
                    "hr {}x{} is not {scale_factor}x the lr {}x{}",
                    self.hr.height(),
                    self.hr.width(),
                    self.lr.height(),
                    self.lr.width()
                ),
            ));
        }
        if !self.reference.height().is_multiple_of(4) || !self.reference.width().is_multiple_of(4) {
            return Err(Error::shape(
                "SamplePair",
                "reference dims must be divisible by 4".to_string(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// checkpoints

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    config: RunConfig,
    seed: u64,
    steps: u64,
    params: Vec<CheckpointParam>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointParam {
    name: String,
    shape: Vec<usize>,
    file: String,
}

/// Generator (and optionally critic) weights plus the config that built them.
#[derive(Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub steps: u64,
    pub weights: UNetWeights,
    pub critic: Option<Critic>,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut params = self.weights.param_entries();
        if let Some(critic) = &self.critic {
            params.extend(critic.param_entries());
        }
        let mut manifest = CheckpointManifest {
            config: self.config.clone(),
            seed: self.config.seed,
            steps: self.steps,
            params: Vec::new(),
        };
        for (name, value) in params {
            let file = format!("{name}.ndar");
            value.save_ndar(&dir.join(&file))?;
            manifest.params.push(CheckpointParam {
                name,
                shape: value.shape().to_vec(),
                file,
            });
        }
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        if !manifest_path.exists() {
            return Err(Error::Argument(format!(
                "no checkpoint manifest at {}",
                manifest_path.display()
            )));
        }
        let manifest: CheckpointManifest =
            serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
        let config = manifest.config.clone();
        config.validate()?;
        let mut weights = UNetWeights::zeroed(config.unet_config());
        let has_critic = manifest.params.iter().any(|p| p.name.starts_with("critic."));
        let mut critic = has_critic.then(|| Critic::zeroed(config.critic_base));

        fn assign(slots: Vec<(String, &mut NdArray)>, name: &str, value: NdArray) -> Result<()> {
            for (n, slot) in slots {
                if n == name {
                    if slot.shape() != value.shape() {
                        return Err(Error::shape(
                            "Checkpoint::load",
                            format!("{name}: expected {:?}, got {:?}", slot.shape(), value.shape()),
                        ));
                    }
                    *slot = value;
                    return Ok(());
                }
            }
            Err(Error::Config(format!("unknown parameter {name}")))
        }

        for entry in &manifest.params {
            let value = NdArray::load_ndar(&dir.join(&entry.file))?;
            if entry.name.starts_with("critic.") {
                let critic = critic
                    .as_mut()
                    .expect("critic params imply a critic was saved");
                assign(critic.param_slots(), &entry.name, value)?;
            } else {
                assign(weights.param_slots(), &entry.name, value)?;
            }
        }
        Ok(Checkpoint {
            config,
            steps: manifest.steps,
            weights,
            critic,
        })
    }
}
