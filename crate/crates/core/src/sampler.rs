//! Predicted-z₀, deterministic DDIM stepping, the recursive coarse denoiser,
//! the ancestral step, and full text-to-image generation.
//!
//! Every routine is written against the [`Denoiser`] trait so the same code
//! runs on plain latents (inference, oracle tests) and on tape variables
//! (differentiable fusion stream).

use crate::error::{Error, Result};
use crate::nets::{Image, ModelState, PlainDenoiser};
use crate::prompts::Prompt;
use crate::rng::{gaussian_vec, stream};
use crate::schedule::{Latent, NoiseSchedule};
use crate::scalar::Scalar;

/// A noise-prediction model together with the latent algebra it lives in.
pub trait Denoiser<T: Scalar> {
    type Latent: Clone;
    type Cond: ?Sized;

    /// ε̂ = ε_θ(z_t, t, cond)
    fn eps(&mut self, z_t: &Self::Latent, t: usize, cond: &Self::Cond) -> Result<Self::Latent>;

    /// `a * x + b * y`
    fn lincomb(&mut self, x: &Self::Latent, a: T, y: &Self::Latent, b: T) -> Result<Self::Latent>;
}

/// h_θ together with the ε̂ it was computed from.
fn predict_x0_with_eps<T: Scalar, D: Denoiser<T>>(
    schedule: &NoiseSchedule<T>,
    den: &mut D,
    z_t: &D::Latent,
    t: usize,
    cond: &D::Cond,
) -> Result<(D::Latent, D::Latent)> {
    schedule.check_t(t)?;
    let eps = den.eps(z_t, t, cond)?;
    let ab = schedule.alpha_bar(t);
    let inv = T::one() / ab.sqrt();
    let k = -(T::one() - ab).sqrt() * inv;
    let h = den.lincomb(z_t, inv, &eps, k)?;
    Ok((h, eps))
}

/// (z_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t
pub fn predict_x0<T: Scalar, D: Denoiser<T>>(
    schedule: &NoiseSchedule<T>,
    den: &mut D,
    z_t: &D::Latent,
    t: usize,
    cond: &D::Cond,
) -> Result<D::Latent> {
    predict_x0_with_eps(schedule, den, z_t, t, cond).map(|(h, _)| h)
}

/// DDIM update without the `t_next < t` guard; a stall step (`t_next == t`)
/// reproduces `z_t` up to rounding.
fn ddim_step_unchecked<T: Scalar, D: Denoiser<T>>(
    schedule: &NoiseSchedule<T>,
    den: &mut D,
    z_t: &D::Latent,
    t: usize,
    t_next: usize,
    cond: &D::Cond,
) -> Result<D::Latent> {
    let (h, eps) = predict_x0_with_eps(schedule, den, z_t, t, cond)?;
    if t_next == 0 {
        return Ok(h);
    }
    let ab = schedule.alpha_bar(t_next);
    den.lincomb(&h, ab.sqrt(), &eps, (T::one() - ab).sqrt())
}

/// √ᾱ_{t'}·h + √(1−ᾱ_{t'})·ε̂, returning h itself when `t_next == 0`.
pub fn ddim_step<T: Scalar, D: Denoiser<T>>(
    schedule: &NoiseSchedule<T>,
    den: &mut D,
    z_t: &D::Latent,
    t: usize,
    t_next: usize,
    cond: &D::Cond,
) -> Result<D::Latent> {
    if t_next >= t {
        return Err(Error::Invalid(format!(
            "ddim_step needs t_next < t, got t={t} t_next={t_next}"
        )));
    }
    ddim_step_unchecked(schedule, den, z_t, t, t_next, cond)
}

/// Intermediate timestep r(τ, t) = ⌈(τ−1)·t/τ⌉.
pub fn coarse_target(tau: usize, t: usize) -> usize {
    ((tau - 1) * t).div_ceil(tau)
}

/// Timesteps at which the coarse denoiser evaluates ε_θ, in order. The
/// sequence always has length `tau` and is strictly decreasing when `t >= tau`.
pub fn coarse_ladder(t: usize, tau: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(tau);
    let mut cur = t;
    for k in (1..=tau).rev() {
        out.push(cur);
        if k > 1 {
            cur = coarse_target(k, cur);
        }
    }
    out
}

/// Coarse τ-step denoising f_θ, as a loop over the recursion's unrolled
/// calls. Uses exactly `tau` denoiser evaluations.
pub fn coarse_denoise<T: Scalar, D: Denoiser<T>>(
    schedule: &NoiseSchedule<T>,
    den: &mut D,
    z_t: &D::Latent,
    t: usize,
    cond: &D::Cond,
    tau: usize,
) -> Result<D::Latent> {
    if tau == 0 {
        return Err(Error::Invalid("coarse_denoise needs tau >= 1".into()));
    }
    schedule.check_t(t)?;
    let mut z = z_t.clone();
    let mut cur = t;
    for k in (2..=tau).rev() {
        let next = coarse_target(k, cur);
        z = ddim_step_unchecked(schedule, den, &z, cur, next, cond)?;
        cur = next;
    }
    predict_x0(schedule, den, &z, cur, cond)
}

/// Direct transcription of the recursive definition of f_θ. Kept as the
/// reference that [`coarse_denoise`] is checked against.
pub fn coarse_denoise_recursive<T: Scalar, D: Denoiser<T>>(
    schedule: &NoiseSchedule<T>,
    den: &mut D,
    z_t: &D::Latent,
    t: usize,
    cond: &D::Cond,
    tau: usize,
) -> Result<D::Latent> {
    if tau == 0 {
        return Err(Error::Invalid("coarse_denoise needs tau >= 1".into()));
    }
    schedule.check_t(t)?;
    if tau == 1 {
        return predict_x0(schedule, den, z_t, t, cond);
    }
    let r = coarse_target(tau, t);
    let z_next = ddim_step_unchecked(schedule, den, z_t, t, r, cond)?;
    coarse_denoise_recursive(schedule, den, &z_next, r, cond, tau - 1)
}

/// Stochastic DDPM step with σ_t = √β_t:
/// (1/√(1−β_t))·(z_t − β_t/√(1−ᾱ_t)·ε̂) + σ_t·noise
pub fn ancestral_step<T: Scalar, D: Denoiser<T>>(
    schedule: &NoiseSchedule<T>,
    den: &mut D,
    z_t: &D::Latent,
    t: usize,
    cond: &D::Cond,
    noise: &D::Latent,
) -> Result<D::Latent> {
    schedule.check_t(t)?;
    let eps = den.eps(z_t, t, cond)?;
    let beta = schedule.beta(t);
    let ab = schedule.alpha_bar(t);
    let inv = T::one() / (T::one() - beta).sqrt();
    let k = -inv * beta / (T::one() - ab).sqrt();
    let mean = den.lincomb(z_t, inv, &eps, k)?;
    den.lincomb(&mean, T::one(), noise, beta.sqrt())
}

/// Uniformly spaced descending timestep ladder `T = t_0 > t_1 > ... > t_n = 0`.
pub fn ddim_ladder(steps: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::config("n_ddim_steps", "must be at least 1"));
    }
    if n > steps {
        return Err(Error::config(
            "n_ddim_steps",
            format!("{n} exceeds schedule length {steps}"),
        ));
    }
    Ok((0..=n)
        .map(|i| (steps * (n - i) + n / 2) / n)
        .collect())
}

/// Deterministic DDIM sampling of `z_T` down to `z_0` along [`ddim_ladder`].
pub fn ddim_sample<T: Scalar, D: Denoiser<T>>(
    schedule: &NoiseSchedule<T>,
    den: &mut D,
    z_start: &D::Latent,
    cond: &D::Cond,
    n_steps: usize,
) -> Result<D::Latent> {
    let ladder = ddim_ladder(schedule.steps(), n_steps)?;
    let mut z = z_start.clone();
    for w in ladder.windows(2) {
        z = ddim_step(schedule, den, &z, w[0], w[1], cond)?;
    }
    Ok(z)
}

/// Draws z_T from unit Gaussian noise seeded by `seed`, runs the DDIM
/// ladder under `prompt` and decodes. Deterministic given the seed.
pub fn generate<T: Scalar>(
    state: &ModelState<T>,
    prompt: &Prompt,
    n_steps: usize,
    seed: u64,
) -> Result<Image<T>> {
    let ids = state.vocab().tokenize(prompt)?;
    let cond = state.encode_text(&ids)?;
    let mut rng = stream(seed);
    let z_t = Latent::from_vec(gaussian_vec(&mut rng, state.arch().latent_dim()));
    let mut den = PlainDenoiser::new(state);
    let z0 = ddim_sample(state.schedule(), &mut den, &z_t, &cond, n_steps)?;
    state.decode_latent(&z0)
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;
    use crate::schedule::Latent;

    /// Returns the noise consistent with a known clean latent, so every
    /// prediction of z₀ is exact.
    pub struct ExactNoiseOracle<'a, T> {
        pub schedule: &'a NoiseSchedule<T>,
        pub z0: Latent<T>,
        pub calls: Vec<usize>,
    }

    impl<T: Scalar> Denoiser<T> for ExactNoiseOracle<'_, T> {
        type Latent = Latent<T>;
        type Cond = ();

        fn eps(&mut self, z_t: &Latent<T>, t: usize, _: &()) -> Result<Latent<T>> {
            self.calls.push(t);
            let ab = self.schedule.alpha_bar(t);
            let s = (T::one() - ab).sqrt();
            Ok(z_t.lincomb(T::one() / s, &self.z0, -ab.sqrt() / s))
        }

        fn lincomb(&mut self, x: &Latent<T>, a: T, y: &Latent<T>, b: T) -> Result<Latent<T>> {
            Ok(x.lincomb(a, y, b))
        }
    }

    /// Denoiser that ignores its input and returns a fixed ε̂.
    pub struct ConstantEps<T>(pub Latent<T>);

    impl<T: Scalar> Denoiser<T> for ConstantEps<T> {
        type Latent = Latent<T>;
        type Cond = ();

        fn eps(&mut self, _: &Latent<T>, _: usize, _: &()) -> Result<Latent<T>> {
            Ok(self.0.clone())
        }

        fn lincomb(&mut self, x: &Latent<T>, a: T, y: &Latent<T>, b: T) -> Result<Latent<T>> {
            Ok(x.lincomb(a, y, b))
        }
    }
}
