//! Denoising losses for the composite stream, the coarse-denoise matching
//! losses for the fusion stream, and their weighted sum.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nets::{Image, ModelState, TapeDenoiser};
use crate::prompts::{class_scene_text, instance_scene_text, Prompt, PromptTemplate};
use crate::rng::gaussian_vec;
use crate::sampler::coarse_denoise;
use crate::scalar::{c, dot, Scalar};
use crate::schedule::{
    forward_marginal, sample_uniform_timestep, sample_window_timestep, Latent,
};

const COSINE_GUARD: f64 = 1e-12;

/// Weights of the class-scene prior loss and the two fusion losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cs: f64,
    pub lambda_fi: f64,
    pub lambda_fs: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cs: 1.0,
            lambda_fi: 0.01,
            lambda_fs: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("weights.lambda_cs", self.lambda_cs),
            ("weights.lambda_fi", self.lambda_fi),
            ("weights.lambda_fs", self.lambda_fs),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn fusion_active(&self) -> bool {
        self.lambda_fi > 0.0 || self.lambda_fs > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ci: f64,
    pub l_cs: f64,
    pub l_fi: f64,
    pub l_fs: f64,
    pub total: f64,
}

/// L_C^I + λ_C^S·L_C^S + λ_F^I·L_F^I + λ_F^S·L_F^S
pub fn total_loss(l_ci: f64, l_cs: f64, l_fi: f64, l_fs: f64, w: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [("l_ci", l_ci), ("l_cs", l_cs), ("l_fi", l_fi), ("l_fs", l_fs)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v}")));
        }
    }
    w.validate()?;
    Ok(LossBreakdown {
        l_ci,
        l_cs,
        l_fi,
        l_fs,
        total: l_ci + w.lambda_cs * l_cs + w.lambda_fi * l_fi + w.lambda_fs * l_fs,
    })
}

/// Mean over elements of squared differences.
pub fn denoising_mse<T: Scalar>(eps_true: &Latent<T>, eps_pred: &Latent<T>) -> Result<T> {
    eps_true.check_same_shape(eps_pred)?;
    let n: T = c(eps_true.len() as f64);
    let s = eps_true
        .data
        .iter()
        .zip(&eps_pred.data)
        .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
    Ok(s / n)
}

/// dot(a, b) / (‖a‖·‖b‖ + 1e-12)
pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> T {
    assert_eq!(a.len(), b.len(), "cosine_similarity needs equal dimensions");
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    dot(a, b) / (na * nb + c(COSINE_GUARD))
}

pub fn cosine_var<T: Scalar>(tape: &mut Tape<'_, T>, a: Var, b: Var) -> Result<Var> {
    let ab = tape.dot(a, b)?;
    let aa = tape.dot(a, a)?;
    let bb = tape.dot(b, b)?;
    let na = tape.sqrt(aa);
    let nb = tape.sqrt(bb);
    let prod = tape.mul(na, nb)?;
    let denom = tape.add_const(prod, c(COSINE_GUARD));
    tape.div(ab, denom)
}

/// Image-text training pair with its latent and token ids precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPair<T> {
    pub z0: Latent<T>,
    pub ids: Vec<usize>,
    pub prompt: Prompt,
}

impl<T: Scalar> EncodedPair<T> {
    pub fn new(state: &ModelState<T>, image: &Image<T>, prompt: Prompt) -> Result<Self> {
        Ok(Self {
            z0: state.encode_image(image)?,
            ids: state.vocab().tokenize(&prompt)?,
            prompt,
        })
    }
}

/// Noise level and noise vector for one Monte-Carlo denoising sample.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw<T> {
    pub t: usize,
    pub eps: Latent<T>,
}

/// Uniform t in [1, T] and unit-Gaussian noise.
pub fn draw_uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, state: &ModelState<T>) -> NoiseDraw<T> {
    let t = sample_uniform_timestep(rng, state.schedule());
    let eps = Latent::from_vec(gaussian_vec(rng, state.arch().latent_dim()));
    NoiseDraw { t, eps }
}

/// t from the fusion window and unit-Gaussian noise.
pub fn draw_window<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    state: &ModelState<T>,
    window: (f64, f64),
) -> Result<NoiseDraw<T>> {
    let t = sample_window_timestep(rng, state.schedule(), window.0, window.1)?;
    let eps = Latent::from_vec(gaussian_vec(rng, state.arch().latent_dim()));
    Ok(NoiseDraw { t, eps })
}

/// ‖ε − ε_θ(z_t, t, Γ(T))‖² (element mean) recorded on a tape.
pub fn denoising_loss_var<T: Scalar>(
    state: &ModelState<T>,
    tape: &mut Tape<'_, T>,
    pair: &EncodedPair<T>,
    draw: &NoiseDraw<T>,
) -> Result<Var> {
    denoising_batch_var(state, tape, &[(pair, draw)])
}

/// Denoising loss averaged over a batch of pairs, one noise draw each.
pub fn denoising_batch_var<T: Scalar>(
    state: &ModelState<T>,
    tape: &mut Tape<'_, T>,
    batch: &[(&EncodedPair<T>, &NoiseDraw<T>)],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let dim = batch[0].0.z0.len();
    let mut z = Vec::with_capacity(batch.len() * dim);
    let mut target = Vec::with_capacity(batch.len() * dim);
    for (pair, draw) in batch {
        z.extend(forward_marginal(state.schedule(), &pair.z0, draw.t, &draw.eps)?.data);
        target.extend_from_slice(&draw.eps.data);
    }
    let ids = batch.iter().map(|(p, _)| p.ids.clone()).collect();
    let ts: Vec<usize> = batch.iter().map(|(_, d)| d.t).collect();
    let cond = state.encode_text_var(tape, ids)?;
    let zv = tape.leaf(batch.len(), dim, z);
    let pred = state.denoise_var(tape, zv, &ts, cond)?;
    let target = tape.leaf(batch.len(), dim, target);
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

fn denoising_loss_value<T: Scalar>(state: &ModelState<T>, pair: &EncodedPair<T>, draw: &NoiseDraw<T>) -> Result<T> {
    let z_t = forward_marginal(state.schedule(), &pair.z0, draw.t, &draw.eps)?;
    let cond = state.encode_text(&pair.ids)?;
    let pred = state.denoise_eps(&z_t, draw.t, &cond)?;
    denoising_mse(&draw.eps, &pred)
}

/// Instance finetune loss on the instance pair (x^I, T^I).
pub fn instance_finetune_loss<T: Scalar, R: Rng + ?Sized>(
    state: &ModelState<T>,
    instance: &EncodedPair<T>,
    rng: &mut R,
) -> Result<T> {
    let draw = draw_uniform(rng, state);
    denoising_loss_value(state, instance, &draw)
}

/// Class-specific prior-preservation loss on a class prior pair (x^C, T^C).
pub fn class_prior_loss<T: Scalar, R: Rng + ?Sized>(
    state: &ModelState<T>,
    prior: &EncodedPair<T>,
    rng: &mut R,
) -> Result<T> {
    let draw = draw_uniform(rng, state);
    denoising_loss_value(state, prior, &draw)
}

/// Class-scene prior loss on a class-scene pair (x^CS_k, T^CS_k).
pub fn class_scene_prior_loss<T: Scalar, R: Rng + ?Sized>(
    state: &ModelState<T>,
    prior: &EncodedPair<T>,
    rng: &mut R,
) -> Result<T> {
    let draw = draw_uniform(rng, state);
    denoising_loss_value(state, prior, &draw)
}

/// Fixed inputs of the fusion stream for one instance.
#[derive(Debug, Clone)]
pub struct FusionTarget<T> {
    /// DINO-toy embedding of the instance image.
    pub instance_dino: Vec<T>,
    pub template: PromptTemplate,
}

impl<T: Scalar> FusionTarget<T> {
    pub fn new(state: &ModelState<T>, instance_image: &Image<T>, template: PromptTemplate) -> Result<Self> {
        Ok(Self {
            instance_dino: state.dino_embed(instance_image)?,
            template,
        })
    }
}

/// Tape handles of one fusion-stream evaluation.
#[derive(Debug, Clone, Copy)]
pub struct FusionVars {
    pub l_fi: Var,
    pub l_fs: Var,
    pub decoded: Var,
    pub denoiser_calls: usize,
}

/// Noises the class-scene latent to `draw.t`, coarse-denoises it under the
/// instance-scene prompt, decodes, and scores the result against the instance
/// image (DINO-toy) and the class-scene text (CLIP-toy).
pub fn fusion_losses_var<'p, T: Scalar>(
    state: &'p ModelState<T>,
    tape: &mut Tape<'p, T>,
    prior_cs: &EncodedPair<T>,
    target: &FusionTarget<T>,
    draw: &NoiseDraw<T>,
    tau: usize,
) -> Result<FusionVars> {
    let scene = scene_of(&target.template, &prior_cs.prompt)?;
    let tpl = target.template.with_scene(Some(&scene));
    let is_ids = state.vocab().tokenize(&instance_scene_text(&tpl)?)?;
    let class = tpl.class_noun.clone().ok_or(Error::MissingField("class_noun"))?;
    let clip_target = state.clip_text_embed(&class, &scene)?;

    let z_t = forward_marginal(state.schedule(), &prior_cs.z0, draw.t, &draw.eps)?;
    let cond = state.encode_text_var(tape, vec![is_ids])?;
    let zv = tape.row(z_t.data);
    let (coarse, calls) = {
        let mut den = TapeDenoiser {
            state,
            tape: &mut *tape,
            calls: 0,
        };
        let out = coarse_denoise(state.schedule(), &mut den, &zv, draw.t, &cond, tau)?;
        (out, den.calls)
    };
    let decoded = state.autoencoder().decode_var(tape, coarse)?;

    let d = state.embedders().dino_var(tape, decoded)?;
    let d_ref = tape.row(target.instance_dino.clone());
    let cos_i = cosine_var(tape, d, d_ref)?;
    let l_fi = tape.neg(cos_i);

    let ce = state.embedders().clip_var(tape, decoded)?;
    let c_ref = tape.row(clip_target);
    let cos_s = cosine_var(tape, ce, c_ref)?;
    let l_fs = tape.neg(cos_s);
    Ok(FusionVars {
        l_fi,
        l_fs,
        decoded,
        denoiser_calls: calls,
    })
}

/// Recover the scene phrase of a class-scene prompt given its class template.
fn scene_of(tpl: &PromptTemplate, prompt: &Prompt) -> Result<String> {
    let class = tpl.class_noun.as_deref().ok_or(Error::MissingField("class_noun"))?;
    let w = prompt.words();
    if w.len() < 3 || w[0] != "a" || w[1] != class {
        return Err(Error::Invalid(format!(
            "`{prompt}` is not a class-scene prompt for class `{class}`"
        )));
    }
    let scene = w[2..].join(" ");
    // round-trip through the template so a malformed prompt cannot slip by
    let expect = class_scene_text(&tpl.with_scene(Some(&scene)))?;
    if &expect != prompt {
        return Err(Error::Invalid(format!("`{prompt}` is not a class-scene prompt")));
    }
    Ok(scene)
}

/// Value-level fusion losses `(l_fi, l_fs)` with t drawn from the window.
pub fn fusion_losses<T: Scalar, R: Rng + ?Sized>(
    state: &ModelState<T>,
    prior_cs: &EncodedPair<T>,
    target: &FusionTarget<T>,
    tau: usize,
    rng: &mut R,
) -> Result<(T, T)> {
    let draw = draw_window(rng, state, (0.2, 0.8))?;
    let mut tape = Tape::new(state.trainable());
    let v = fusion_losses_var(state, &mut tape, prior_cs, target, &draw, tau)?;
    Ok((tape.scalar(v.l_fi), tape.scalar(v.l_fs)))
}
