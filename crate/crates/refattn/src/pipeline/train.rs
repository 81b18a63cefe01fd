//! Adam and the toy training loop.
//!
//! One step: augment a batch, run the generator forward on a fresh tape,
//! take reconstruction (plus perceptual and adversarial terms in `all`
//! mode), update the critic on detached outputs, then score the generator
//! against the updated critic and step it. Everything is seeded, so the
//! loss log and the checkpoint are bit-reproducible.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::aggregate::{ForwardOptions, UNetWeights};
use crate::encoder::{bicubic_upsample, EncoderStack, FeaturePyramid, WeightRng};
use crate::error::{Error, Result};
use crate::losses::{adv_losses, perceptual_loss, rec_loss, total_loss_var, Critic};
use crate::num::ops;
use crate::num::tape::{Tape, Var};
use crate::num::NdArray;

use super::augment::augment;
use super::{Checkpoint, RunConfig, SamplePair, TrainMode};

/// Adam state keyed by parameter name, so it survives buffer replacement.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            moments: HashMap::new(),
        }
    }

    /// Applies one update to every parameter that received a gradient.
    pub fn step(
        &mut self,
        params: Vec<(String, &mut NdArray)>,
        grads: &HashMap<usize, NdArray>,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, slot) in params {
            let Some(grad) = grads.get(&slot.buffer_id()) else {
                continue;
            };
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (vec![0.0; slot.numel()], vec![0.0; slot.numel()]));
            let mut next = slot.data().to_vec();
            for ((w, g), (m, v)) in next
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            *slot = NdArray::new_unchecked(slot.shape(), next);
        }
    }
}

/// One line of the JSON loss log.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct StepReport {
    pub step: usize,
    pub rec: f64,
    pub per: f64,
    pub adv: f64,
    pub total: f64,
}

pub struct TrainOutcome {
    pub reports: Vec<StepReport>,
    pub checkpoint_dir: PathBuf,
    pub log_path: PathBuf,
}

fn mean_of(terms: &[Var]) -> Var {
    let mut acc = terms[0].clone();
    for t in &terms[1..] {
        acc = ops::add(&acc, t);
    }
    ops::mul_scalar(&acc, 1.0 / terms.len() as f64)
}

/// Trains on the given pairs and writes `loss_log.jsonl` plus a final
/// checkpoint under `out_dir`. Aborts with a diagnostic tensor dump if any
/// loss goes non-finite.
pub fn train_toy(pairs: &[SamplePair], config: &RunConfig, out_dir: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::Argument("need at least one training pair".to_string()));
    }
    for pair in pairs {
        pair.validate(config.scale_factor)?;
    }
    std::fs::create_dir_all(out_dir)?;

    let encoder = EncoderStack::seeded(config.seed, config.widths);
    let mut weights = UNetWeights::seeded(config.seed.wrapping_add(1), config.unet_config())?;
    let mut critic = match config.mode {
        TrainMode::All => Some(Critic::seeded(config.seed.wrapping_add(2), config.critic_base)),
        TrainMode::Rec => None,
    };
    let mut adam_gen = Adam::new(config.learning_rate, config.adam_beta1, config.adam_beta2);
    let mut adam_critic = Adam::new(config.learning_rate, config.adam_beta1, config.adam_beta2);
    let mut rng = WeightRng::new(config.seed.wrapping_add(3));
    let (lambda1, lambda2) = config.lambdas();

    // with augmentation fully off the features and matches never change
    let static_inputs = !config.geometric_augment
        && config.brightness_jitter == 0.0
        && config.contrast_jitter == 0.0
        && config.hue_jitter == 0.0;
    type CachedPair = (
        crate::encoder::ImagePlane,
        FeaturePyramid,
        [crate::matcher::CorrespondenceMap; 3],
    );
    let mut pyramid_cache: HashMap<usize, CachedPair> = HashMap::new();

    let log_path = out_dir.join("loss_log.jsonl");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    let mut reports = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let tape = Tape::new();
        let mut sample_recs = Vec::with_capacity(config.batch_size);
        let mut sample_pers = Vec::new();
        let mut srs: Vec<Var> = Vec::with_capacity(config.batch_size);
        let mut hr_consts: Vec<Var> = Vec::with_capacity(config.batch_size);

        for b in 0..config.batch_size {
            let pair_index = (step * config.batch_size + b) % pairs.len();
            let base = &pairs[pair_index];
            let (lr_up, pyramid, maps, hr) = if static_inputs {
                if let std::collections::hash_map::Entry::Vacant(e) = pyramid_cache.entry(pair_index) {
                    let lr_up = bicubic_upsample(&base.lr, config.scale_factor);
                    let pyr = FeaturePyramid::build(&encoder, &lr_up, &base.reference)?;
                    let maps = crate::aggregate::compute_maps(&pyr, &config.unet_config(), false)?;
                    e.insert((lr_up, pyr, maps));
                }
                let (lr_up, pyr, maps) = &pyramid_cache[&pair_index];
                (lr_up.clone(), pyr.clone(), maps.clone(), base.hr.clone())
            } else {
                let sample = augment(base, config, &mut rng);
                let lr_up = bicubic_upsample(&sample.lr, config.scale_factor);
                let pyr = FeaturePyramid::build(&encoder, &lr_up, &sample.reference)?;
                let maps = crate::aggregate::compute_maps(&pyr, &config.unet_config(), false)?;
                (lr_up, pyr, maps, sample.hr)
            };
            let out = crate::aggregate::unet_forward_with_maps(
                &tape,
                &pyramid,
                &lr_up,
                &weights,
                true,
                &ForwardOptions::default(),
                maps,
            )?;
            let hr_const = tape.constant(hr.array().clone());
            sample_recs.push(rec_loss(&out.sr, &hr_const)?);
            if lambda1 > 0.0 {
                sample_pers.push(perceptual_loss(&tape, &out.sr, &hr_const, &encoder)?);
            }
            srs.push(out.sr);
            hr_consts.push(hr_const);
        }

        let rec = mean_of(&sample_recs);
        let per = if lambda1 > 0.0 {
            mean_of(&sample_pers)
        } else {
            tape.scalar(0.0)
        };

        // critic update first (on detached generator outputs), then the
        // generator is scored against the refreshed critic
        if let Some(critic_model) = critic.as_mut() {
            let ctape = Tape::new();
            let sr_consts: Vec<Var> = srs.iter().map(|s| ctape.constant(s.value())).collect();
            let hr_vals: Vec<Var> = hr_consts.iter().map(|h| ctape.constant(h.value())).collect();
            let taped = critic_model.lift(&ctape, true);
            let sr_refs: Vec<&Var> = sr_consts.iter().collect();
            let hr_refs: Vec<&Var> = hr_vals.iter().collect();
            let mix: Vec<f64> = (0..sr_refs.len()).map(|_| rng.uniform()).collect();
            let (critic_loss, _) = adv_losses(&taped, &sr_refs, &hr_refs, &mix)?;
            if !critic_loss.item().is_finite() {
                dump_diagnostics(out_dir, step, &weights, critic.as_ref(), &srs)?;
                return Err(Error::NonFinite {
                    context: format!("critic loss at step {step}"),
                });
            }
            ctape.backward(&critic_loss)?;
            let grads = ctape.leaf_grads_by_buffer();
            adam_critic.step(critic_model.param_slots(), &grads);
        }

        let adv = if let Some(critic_model) = critic.as_ref() {
            let taped = critic_model.lift(&tape, false);
            let mut scores = Vec::with_capacity(srs.len());
            for sr in &srs {
                scores.push(taped.score(sr)?);
            }
            ops::neg(&mean_of(&scores))
        } else {
            tape.scalar(0.0)
        };

        let total = total_loss_var(&rec, &per, &adv, lambda1, lambda2)?;
        let report = StepReport {
            step,
            rec: rec.item(),
            per: per.item(),
            adv: adv.item(),
            total: total.item(),
        };
        if !report.total.is_finite() {
            dump_diagnostics(out_dir, step, &weights, critic.as_ref(), &srs)?;
            return Err(Error::NonFinite {
                context: format!("training loss at step {step}"),
            });
        }
        tape.backward(&total)?;
        let grads = tape.leaf_grads_by_buffer();
        adam_gen.step(weights.param_slots(), &grads);

        serde_json::to_writer(&mut log, &report)?;
        log.write_all(b"\n")?;
        log.flush()?;
        reports.push(report);
    }
    drop(log);

    let checkpoint_dir = out_dir.join("checkpoint");
    let checkpoint = Checkpoint {
        config: config.clone(),
        steps: config.steps as u64,
        weights,
        critic,
    };
    checkpoint.save(&checkpoint_dir)?;
    Ok(TrainOutcome {
        reports,
        checkpoint_dir,
        log_path,
    })
}

fn dump_diagnostics(
    out_dir: &Path,
    step: usize,
    weights: &UNetWeights,
    critic: Option<&Critic>,
    srs: &[Var],
) -> Result<()> {
    let dir = out_dir.join(format!("diagnostics-step-{step}"));
    std::fs::create_dir_all(&dir)?;
    for (name, value) in weights.param_entries() {
        value.save_ndar(&dir.join(format!("{name}.ndar")))?;
    }
    if let Some(critic) = critic {
        for (name, value) in critic.param_entries() {
            value.save_ndar(&dir.join(format!("{name}.ndar")))?;
        }
    }
    for (i, sr) in srs.iter().enumerate() {
        sr.value().save_ndar(&dir.join(format!("sr-{i}.ndar")))?;
    }
    Ok(())
}
