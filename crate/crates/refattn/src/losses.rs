//! Reconstruction, perceptual and adversarial losses, plus a minimal critic.
//!
//! The adversarial part is a Wasserstein setup with gradient penalty. The
//! critic is a stack of stride-2 convs with relu, so its input gradient is
//! expressible on the tape with `conv2d_input_grad` and constant relu masks
//! (relu is piecewise linear, so treating the masks as constants IS its
//! exact second derivative almost everywhere); the penalty therefore trains
//! through the same reverse pass as everything else.

use crate::encoder::{Conv, EncoderStack, Role, WeightRng};
use crate::error::{Error, Result};
use crate::num::ops;
use crate::num::tape::{Tape, Var};
use crate::num::NdArray;

/// Weighted sum of the three loss terms.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct LossReport {
    pub rec: f64,
    pub per: f64,
    pub adv: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

pub const DEFAULT_LAMBDA1: f64 = 1e-4;
pub const DEFAULT_LAMBDA2: f64 = 1e-6;
pub const GRADIENT_PENALTY_COEFF: f64 = 10.0;

impl LossReport {
    pub fn new(rec: f64, per: f64, adv: f64, lambda1: f64, lambda2: f64) -> Result<Self> {
        if lambda1 < 0.0 || lambda2 < 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got lambda1={lambda1} lambda2={lambda2}"
            )));
        }
        Ok(LossReport {
            rec,
            per,
            adv,
            total: rec + lambda1 * per + lambda2 * adv,
            lambda1,
            lambda2,
        })
    }
}

/// Mean absolute error over all elements.
pub fn rec_loss(sr: &Var, hr: &Var) -> Result<Var> {
    if sr.shape() != hr.shape() {
        return Err(Error::shape(
            "rec_loss",
            format!("{:?} vs {:?}", sr.shape(), hr.shape()),
        ));
    }
    Ok(ops::mean_all(&ops::abs(&ops::sub(sr, hr))))
}

/// Sum of per-channel Frobenius distances between deep features of the two
/// images, divided by the feature volume. Features come from the deepest
/// scale of the fixed value encoder.
pub fn perceptual_loss(tape: &Tape, sr: &Var, hr: &Var, encoder: &EncoderStack) -> Result<Var> {
    let feats_sr = encoder.encode_vars(tape, sr, Role::Value, false)?;
    let feats_hr = encoder.encode_vars(tape, hr, Role::Value, false)?;
    let diff = ops::sub(&feats_hr[2], &feats_sr[2]);
    let volume: usize = diff.shape().iter().product();
    let norms = ops::channel_l2_norms(&diff);
    Ok(ops::mul_scalar(&ops::sum_all(&norms), 1.0 / volume as f64))
}

/// Weighted total; lambda1=lambda2=0 is the reconstruction-only mode.
pub fn total_loss_var(rec: &Var, per: &Var, adv: &Var, lambda1: f64, lambda2: f64) -> Result<Var> {
    if lambda1 < 0.0 || lambda2 < 0.0 {
        return Err(Error::Config(format!(
            "loss weights must be non-negative, got lambda1={lambda1} lambda2={lambda2}"
        )));
    }
    Ok(ops::add(
        rec,
        &ops::add(
            &ops::mul_scalar(per, lambda1),
            &ops::mul_scalar(adv, lambda2),
        ),
    ))
}

// ---------------------------------------------------------------------------
// critic

/// Small strided conv stack ending in one scalar per image.
#[derive(Clone, Debug)]
pub struct Critic {
    pub convs: [Conv; 3],
    pub out: Conv,
}

impl Critic {
    pub fn seeded(seed: u64, base: usize) -> Self {
        let mut rng = WeightRng::new(seed);
        Critic {
            convs: [
                Conv::seeded(&mut rng, base, 3, 3, 2),
                Conv::seeded(&mut rng, 2 * base, base, 3, 2),
                Conv::seeded(&mut rng, 4 * base, 2 * base, 3, 2),
            ],
            out: Conv::seeded(&mut rng, 1, 4 * base, 3, 1),
        }
    }

    pub fn zeroed(base: usize) -> Self {
        Critic {
            convs: [
                Conv::zeros(base, 3, 3, 2),
                Conv::zeros(2 * base, base, 3, 2),
                Conv::zeros(4 * base, 2 * base, 3, 2),
            ],
            out: Conv::zeros(1, 4 * base, 3, 1),
        }
    }

    pub fn param_entries(&self) -> Vec<(String, NdArray)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("critic.c{}.w", i + 1), c.weight.clone()));
            out.push((format!("critic.c{}.b", i + 1), c.bias.clone()));
        }
        out.push(("critic.out.w".to_string(), self.out.weight.clone()));
        out.push(("critic.out.b".to_string(), self.out.bias.clone()));
        out
    }

    pub fn param_slots(&mut self) -> Vec<(String, &mut NdArray)> {
        let mut out: Vec<(String, &mut NdArray)> = Vec::new();
        for (i, c) in self.convs.iter_mut().enumerate() {
            out.push((format!("critic.c{}.w", i + 1), &mut c.weight));
            out.push((format!("critic.c{}.b", i + 1), &mut c.bias));
        }
        out.push(("critic.out.w".to_string(), &mut self.out.weight));
        out.push(("critic.out.b".to_string(), &mut self.out.bias));
        out
    }

    /// Lifts the parameters onto a tape once so forward passes and the
    /// symbolic input-gradient chain share the same leaves.
    pub fn lift(&self, tape: &Tape, trainable: bool) -> TapedCritic {
        let lift_conv = |c: &Conv| {
            (
                tape.leaf(c.weight.clone(), trainable),
                tape.leaf(c.bias.clone(), trainable),
                c.stride,
            )
        };
        TapedCritic {
            convs: self.convs.iter().map(lift_conv).collect(),
            out: lift_conv(&self.out),
        }
    }
}

pub struct TapedCritic {
    convs: Vec<(Var, Var, usize)>,
    out: (Var, Var, usize),
}

impl TapedCritic {
    /// Assembles a critic from already-lifted (weight, bias, stride)
    /// triples; used where the caller wants direct handles on the leaves.
    pub fn from_vars(convs: Vec<(Var, Var, usize)>, out: (Var, Var, usize)) -> Self {
        TapedCritic { convs, out }
    }

    /// Scalar score of one image.
    pub fn score(&self, x: &Var) -> Result<Var> {
        let (score, _) = self.forward(x)?;
        Ok(score)
    }

    /// Forward pass, also returning the pre-activation maps per layer.
    fn forward(&self, x: &Var) -> Result<(Var, Vec<Var>)> {
        let mut h = x.clone();
        let mut pre_acts = Vec::with_capacity(self.convs.len());
        for (w, b, stride) in &self.convs {
            let z = ops::conv2d(&h, w, Some(b), *stride, 1)?;
            pre_acts.push(z.clone());
            h = ops::relu(&z);
        }
        let (w, b, stride) = &self.out;
        let z = ops::conv2d(&h, w, Some(b), *stride, 1)?;
        Ok((ops::mean_all(&z), pre_acts))
    }

    /// Score plus the input gradient `d score / d x`, built symbolically so
    /// it remains differentiable with respect to the critic weights.
    pub fn score_and_input_grad(&self, x: &Var) -> Result<(Var, Var)> {
        let tape = x.tape().clone();
        let (score, pre_acts) = self.forward(x)?;

        // spatial dims entering each conv
        let mut dims = Vec::with_capacity(self.convs.len() + 1);
        let xs = x.shape();
        dims.push((xs[1], xs[2]));
        for z in &pre_acts {
            let s = z.shape();
            dims.push((s[1], s[2]));
        }

        // seed: the mean over the final map differentiates to a constant
        let (w_out, _, s_out) = &self.out;
        let (h_in, w_in) = dims[dims.len() - 1];
        let kernel = w_out.shape()[2];
        let fh = crate::num::kernels::conv_out_dim(h_in, kernel, *s_out, 1).expect("final map");
        let fw = crate::num::kernels::conv_out_dim(w_in, kernel, *s_out, 1).expect("final map");
        let seed = tape.constant(NdArray::full(&[1, fh, fw], 1.0 / (fh * fw) as f64));
        let mut g = ops::conv2d_input_grad(&seed, w_out, *s_out, 1, h_in, w_in);
        for layer in (0..self.convs.len()).rev() {
            // relu gate: the mask is this pass's activation pattern, constant
            let mask = tape.constant(pre_acts[layer].value().map(|z| if z > 0.0 { 1.0 } else { 0.0 }));
            g = ops::mul(&g, &mask);
            let (w, _, stride) = &self.convs[layer];
            let (h, wd) = dims[layer];
            g = ops::conv2d_input_grad(&g, w, *stride, 1, h, wd);
        }
        Ok((score, g))
    }
}

/// `(||grad_x D(x)|| - 1)^2`, averaged over the interpolates and scaled.
pub fn gradient_penalty(critic: &TapedCritic, interpolates: &[Var], coeff: f64) -> Result<Var> {
    assert!(!interpolates.is_empty());
    let mut acc: Option<Var> = None;
    for x in interpolates {
        let (_, grad) = critic.score_and_input_grad(x)?;
        let sq = ops::sum_all(&ops::mul(&grad, &grad));
        let norm = ops::sqrt(&ops::add_scalar(&sq, 1e-12));
        let gap = ops::add_scalar(&norm, -1.0);
        let pen = ops::mul(&gap, &gap);
        acc = Some(match acc {
            Some(a) => ops::add(&a, &pen),
            None => pen,
        });
    }
    Ok(ops::mul_scalar(
        &acc.expect("non-empty batch"),
        coeff / interpolates.len() as f64,
    ))
}

fn mean_scores(critic: &TapedCritic, batch: &[&Var]) -> Result<Var> {
    assert!(!batch.is_empty(), "adversarial losses need a non-empty batch");
    let mut acc: Option<Var> = None;
    for x in batch {
        let s = critic.score(x)?;
        acc = Some(match acc {
            Some(a) => ops::add(&a, &s),
            None => s,
        });
    }
    Ok(ops::mul_scalar(&acc.unwrap(), 1.0 / batch.len() as f64))
}

/// Both adversarial objectives on one tape:
/// `critic_loss = mean D(SR) - mean D(HR) + gp`, `gen_loss = -mean D(SR)`.
/// `mix` supplies one interpolation factor in `[0,1]` per SR/HR pair for the
/// penalty's interpolates.
pub fn adv_losses(
    critic: &TapedCritic,
    sr_batch: &[&Var],
    hr_batch: &[&Var],
    mix: &[f64],
) -> Result<(Var, Var)> {
    if sr_batch.len() != hr_batch.len() || sr_batch.len() != mix.len() {
        return Err(Error::Argument(format!(
            "batch sizes differ: sr={}, hr={}, mix={}",
            sr_batch.len(),
            hr_batch.len(),
            mix.len()
        )));
    }
    let mean_sr = mean_scores(critic, sr_batch)?;
    let mean_hr = mean_scores(critic, hr_batch)?;
    let wasserstein = ops::sub(&mean_sr, &mean_hr);

    let interpolates: Vec<Var> = sr_batch
        .iter()
        .zip(hr_batch)
        .zip(mix)
        .map(|((sr, hr), &eps)| {
            ops::add(
                &ops::mul_scalar(hr, eps),
                &ops::mul_scalar(sr, 1.0 - eps),
            )
        })
        .collect();
    let gp = gradient_penalty(critic, &interpolates, GRADIENT_PENALTY_COEFF)?;
    let critic_loss = ops::add(&wasserstein, &gp);
    let gen_loss = ops::neg(&mean_sr);
    Ok((critic_loss, gen_loss))
}
