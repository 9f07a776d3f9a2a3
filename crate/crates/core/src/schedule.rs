//! Variance schedule, closed-form forward process and fusion timestep window.
//!
//! Timesteps are 1-based: `t = 1..=T` index `betas[t - 1]`. The cumulative
//! product at `t = 0` is defined as exactly one, so `t = 0` denotes the clean
//! latent.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Constant,
    Linear,
}

/// Serialized form of a schedule. Cumulative products are always recomputed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.05,
        }
    }
}

impl ScheduleSpec {
    pub fn build<T: Scalar>(&self) -> Result<NoiseSchedule<T>> {
        build_schedule(self.kind, self.steps, self.beta_start, self.beta_end)
    }
}

/// Flat real-valued tensor with a declared shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent<T> {
    pub data: Vec<T>,
    pub shape: Vec<usize>,
}

impl<T: Scalar> Latent<T> {
    pub fn new(data: Vec<T>, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                expected: shape,
                got: vec![data.len()],
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("latent element {i}")));
        }
        Ok(Self { data, shape })
    }

    /// One-dimensional latent from a vector.
    pub fn from_vec(data: Vec<T>) -> Self {
        let n = data.len();
        Self {
            data,
            shape: vec![n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            data: vec![T::zero(); shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// `a * self + b * other`, elementwise.
    pub fn lincomb(&self, a: T, other: &Self, b: T) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&x, &y)| a * x + b * y)
                .collect(),
            shape: self.shape.clone(),
        }
    }

    pub fn scale(&self, a: T) -> Self {
        Self {
            data: self.data.iter().map(|&x| a * x).collect(),
            shape: self.shape.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<T> {
    spec: ScheduleSpec,
    betas: Vec<T>,
    alpha_bars: Vec<T>,
}

pub fn build_schedule<T: Scalar>(
    kind: ScheduleKind,
    steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule<T>> {
    if steps == 0 {
        return Err(Error::config("schedule.T", "must be at least 1"));
    }
    let inside = |b: f64| b > 0.0 && b < 1.0;
    if !inside(beta_start) || !inside(beta_end) {
        return Err(Error::config(
            "schedule.beta_start/beta_end",
            format!("betas must lie in (0, 1), got {beta_start} and {beta_end}"),
        ));
    }
    if beta_start > beta_end {
        return Err(Error::config(
            "schedule.beta_start",
            format!("beta_start {beta_start} exceeds beta_end {beta_end}"),
        ));
    }
    let betas_f: Vec<f64> = match kind {
        ScheduleKind::Constant => vec![beta_start; steps],
        ScheduleKind::Linear if steps == 1 => vec![beta_start],
        ScheduleKind::Linear => (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect(),
    };
    let betas: Vec<T> = betas_f.iter().map(|&b| c(b)).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = T::one();
    for &b in &betas {
        acc *= T::one() - b;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule {
        spec: ScheduleSpec {
            kind,
            steps,
            beta_start,
            beta_end,
        },
        betas,
        alpha_bars,
    })
}

impl<T: Scalar> NoiseSchedule<T> {
    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[T] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[T] {
        &self.alpha_bars
    }

    /// β_t for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> T {
        self.betas[t - 1]
    }

    /// Cumulative product ᾱ_t for `0 <= t <= T`, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> T {
        if t == 0 {
            T::one()
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Timestep {
                t,
                lo: 1,
                hi: self.steps(),
            });
        }
        Ok(())
    }
}

/// √ᾱ_t · z0 + √(1−ᾱ_t) · eps
pub fn forward_marginal<T: Scalar>(
    schedule: &NoiseSchedule<T>,
    z0: &Latent<T>,
    t: usize,
    eps: &Latent<T>,
) -> Result<Latent<T>> {
    schedule.check_t(t)?;
    z0.check_same_shape(eps)?;
    let ab = schedule.alpha_bar(t);
    Ok(z0.lincomb(ab.sqrt(), eps, (T::one() - ab).sqrt()))
}

/// One Markov step: √(1−β_t) · z_prev + √β_t · eps
pub fn forward_step<T: Scalar>(
    schedule: &NoiseSchedule<T>,
    z_prev: &Latent<T>,
    t: usize,
    eps: &Latent<T>,
) -> Result<Latent<T>> {
    schedule.check_t(t)?;
    z_prev.check_same_shape(eps)?;
    let b = schedule.beta(t);
    Ok(z_prev.lincomb((T::one() - b).sqrt(), eps, b.sqrt()))
}

/// ⌈frac · T⌉, tolerant of representation error in `frac · T`.
fn ceil_fraction(frac: f64, steps: usize) -> usize {
    let v = frac * steps as f64;
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r as usize
    } else {
        v.ceil() as usize
    }
}

/// Closed window `[⌈lo·T⌉, ⌈hi·T⌉]`, clamped to at least 1.
pub fn fusion_window(steps: usize, lo: f64, hi: f64) -> (usize, usize) {
    let a = ceil_fraction(lo, steps).max(1);
    let b = ceil_fraction(hi, steps).clamp(a, steps);
    (a, b)
}

/// Uniform draw from the fusion-stream timestep window with the default
/// fractions (0.2, 0.8).
pub fn sample_fusion_timestep<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    schedule: &NoiseSchedule<T>,
) -> Result<usize> {
    sample_window_timestep(rng, schedule, 0.2, 0.8)
}

pub fn sample_window_timestep<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    schedule: &NoiseSchedule<T>,
    lo: f64,
    hi: f64,
) -> Result<usize> {
    if schedule.steps() < 2 {
        return Err(Error::Invalid(
            "fusion timestep sampling needs T >= 2".into(),
        ));
    }
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
        return Err(Error::config(
            "window",
            format!("need 0 <= low < high <= 1, got ({lo}, {hi})"),
        ));
    }
    let (a, b) = fusion_window(schedule.steps(), lo, hi);
    Ok(rng.random_range(a..=b))
}

/// Uniform draw from `[1, T]` used by the composite stream.
pub fn sample_uniform_timestep<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    schedule: &NoiseSchedule<T>,
) -> usize {
    rng.random_range(1..=schedule.steps())
}
