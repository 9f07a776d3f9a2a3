//! Pretraining, the DreamBooth and instance-only baselines, and two-stream
//! finetuning, all driven by one Adam loop.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamSet, Tape};
use crate::error::{Error, Result};
use crate::losses::{
    denoising_batch_var, draw_uniform, draw_window, fusion_losses_var, total_loss, EncodedPair, FusionTarget,
    LossBreakdown, LossWeights, NoiseDraw,
};
use crate::nets::{Image, ModelState};
use crate::prompts::{instance_text, PromptTemplate};
use crate::rng::{derive_indexed, stream};
use crate::scalar::{c, f, Scalar};
use crate::world::{Pair, PriorSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    fn validate(&self, prefix: &str) -> Result<()> {
        let ok = |b: f64| (0.0..1.0).contains(&b);
        if !ok(self.beta1) {
            return Err(Error::config(format!("{prefix}.adam.beta1"), "must lie in [0, 1)"));
        }
        if !ok(self.beta2) {
            return Err(Error::config(format!("{prefix}.adam.beta2"), "must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config(format!("{prefix}.adam.epsilon"), "must be > 0"));
        }
        Ok(())
    }
}

/// Adam state over every tensor of a parameter set.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    cfg: AdamConfig,
    lr: f64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamSet<T>, lr: f64, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            lr,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &[Vec<T>]) {
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1: T = c(1.0 - b1.powi(self.step));
        let bc2: T = c(1.0 - b2.powi(self.step));
        let (b1, b2): (T, T) = (c(b1), c(b2));
        let (one, lr, eps): (T, T, T) = (T::one(), c(self.lr), c(self.cfg.epsilon));
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = params.get_mut(id);
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Corpus renders per (class, scene) cell.
    pub n_per_cell: usize,
    pub adam: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            learning_rate: 1e-3,
            batch_size: 16,
            n_per_cell: 16,
            adam: AdamConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("pretrain.steps", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("pretrain.batch_size", "must be >= 1"));
        }
        if self.n_per_cell == 0 {
            return Err(Error::config("pretrain.n_per_cell", "must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("pretrain.learning_rate", "must be finite and > 0"));
        }
        self.adam.validate("pretrain")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub tau: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub n_prior: usize,
    pub n_instance: usize,
    pub window_low: f64,
    pub window_high: f64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            tau: 3,
            learning_rate: 1e-5,
            steps: 1200,
            batch_size: 1,
            n_prior: 200,
            n_instance: 1,
            window_low: 0.2,
            window_high: 0.8,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Small-world preset: fewer steps and priors, and a step size the toy
    /// model actually moves with.
    pub fn desk() -> Self {
        Self {
            learning_rate: 1e-3,
            steps: 600,
            n_prior: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.tau == 0 {
            return Err(Error::config("finetune.tau", "must be >= 1"));
        }
        if self.steps == 0 {
            return Err(Error::config("finetune.steps", "must be >= 1"));
        }
        if self.batch_size != 1 {
            return Err(Error::config("finetune.batch_size", "only batch size 1 is supported"));
        }
        if self.n_prior == 0 {
            return Err(Error::config("finetune.n_prior", "must be >= 1"));
        }
        if self.n_instance == 0 {
            return Err(Error::config("finetune.n_instance", "must be >= 1"));
        }
        if !(0.0 <= self.window_low && self.window_low < self.window_high && self.window_high <= 1.0) {
            return Err(Error::config(
                "finetune.window_low",
                "need 0 <= window_low < window_high <= 1",
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("finetune.learning_rate", "must be finite and > 0"));
        }
        self.adam.validate("finetune")
    }
}

/// One JSON-lines record of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub l_ci: f64,
    pub l_cs: f64,
    pub l_fi: f64,
    pub l_fs: f64,
    pub total: f64,
    pub t_composite: usize,
    pub t_fusion: Option<usize>,
    pub tau: usize,
    pub denoiser_calls: usize,
}

/// Per-parameter gradient buffers in `ParamSet` order.
fn gradient_buffers<T: Scalar>(params: &ParamSet<T>, g: &Gradients<T>) -> Vec<Vec<T>> {
    let mut acc = params.zeros_like();
    g.accumulate_into(&mut acc, T::one());
    acc
}

fn grad_norm<T: Scalar>(g: &[Vec<T>]) -> f64 {
    g.iter().flatten().map(|&v| f(v) * f(v)).sum::<f64>().sqrt()
}

fn param_norm<T: Scalar>(p: &ParamSet<T>) -> f64 {
    p.ids().flat_map(|id| p.get(id)).map(|&v| f(v) * f(v)).sum::<f64>().sqrt()
}

fn encode_all<T: Scalar>(state: &ModelState<T>, pairs: &[Pair<T>]) -> Result<Vec<EncodedPair<T>>> {
    pairs
        .iter()
        .map(|p| EncodedPair::new(state, &p.image, p.prompt.clone()))
        .collect()
}

/// Trains the text encoder and denoiser from scratch on corpus pairs.
pub fn pretrain<T: Scalar>(
    mut state: ModelState<T>,
    corpus: &[Pair<T>],
    cfg: &PretrainConfig,
    seed: u64,
    log: &mut dyn FnMut(&LogRow) -> Result<()>,
) -> Result<ModelState<T>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Invalid("pretraining corpus is empty".into()));
    }
    let data = encode_all(&state, corpus)?;
    let mut opt = Adam::new(state.trainable(), cfg.learning_rate, cfg.adam);
    for step in 1..=cfg.steps {
        let mut rng = stream(derive_indexed(seed, "pretrain/step", step as u64));
        let picks: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..data.len())).collect();
        let draws: Vec<NoiseDraw<T>> = picks.iter().map(|_| draw_uniform(&mut rng, &state)).collect();
        let (loss, grads) = {
            let mut tape = Tape::new(state.trainable());
            let batch: Vec<_> = picks.iter().zip(&draws).map(|(&i, d)| (&data[i], d)).collect();
            let l = denoising_batch_var(&state, &mut tape, &batch)?;
            let g = tape.backward(l);
            (f(tape.scalar(l)), gradient_buffers(state.trainable(), &g))
        };
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("pretrain loss {loss}, grad norm {}", grad_norm(&grads)),
            });
        }
        log(&LogRow {
            step,
            l_ci: loss,
            l_cs: 0.0,
            l_fi: 0.0,
            l_fs: 0.0,
            total: loss,
            t_composite: draws[0].t,
            t_fusion: None,
            tau: 0,
            denoiser_calls: cfg.batch_size,
        })?;
        opt.update(state.trainable_mut(), &grads);
    }
    Ok(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneMode {
    /// Composite and fusion streams.
    Comfusion,
    /// Instance loss plus scene-free class prior preservation.
    Dreambooth,
    /// Instance loss alone.
    InstanceOnly,
}

impl std::str::FromStr for FinetuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "comfusion" => Ok(Self::Comfusion),
            "dreambooth" => Ok(Self::Dreambooth),
            "instance-only" => Ok(Self::InstanceOnly),
            other => Err(Error::config("mode", format!("unknown finetune mode `{other}`"))),
        }
    }
}

/// Reference images of one subject with its prompt template.
#[derive(Debug, Clone)]
pub struct InstanceSet<T> {
    pub template: PromptTemplate,
    pub images: Vec<Image<T>>,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome<T> {
    pub state: ModelState<T>,
    pub log: Vec<LogRow>,
}

/// Shared loop for all three finetuning modes.
pub fn finetune<T: Scalar>(
    base: &ModelState<T>,
    instances: &InstanceSet<T>,
    priors: Option<&PriorSet<T>>,
    cfg: &TrainConfig,
    mode: FinetuneMode,
    seed: u64,
) -> Result<FinetuneOutcome<T>> {
    cfg.validate()?;
    if instances.images.is_empty() {
        return Err(Error::Invalid("instance set is empty".into()));
    }
    let mut state = base.clone();
    let t_i = instance_text(&instances.template)?;
    let inst: Vec<EncodedPair<T>> = instances
        .images
        .iter()
        .map(|x| EncodedPair::new(&state, x, t_i.clone()))
        .collect::<Result<_>>()?;
    let targets: Vec<FusionTarget<T>> = instances
        .images
        .iter()
        .map(|x| FusionTarget::new(&state, x, instances.template.clone()))
        .collect::<Result<_>>()?;
    let prior: Vec<EncodedPair<T>> = match (mode, priors) {
        (FinetuneMode::InstanceOnly, _) => Vec::new(),
        (_, Some(p)) if !p.pairs.is_empty() => encode_all(&state, &p.pairs)?,
        _ => return Err(Error::Invalid("this mode needs a non-empty prior set".into())),
    };
    if mode == FinetuneMode::Dreambooth && prior.iter().any(|p| p.prompt.words().len() != 2) {
        return Err(Error::Invalid("DreamBooth priors must carry scene-free class texts".into()));
    }
    if mode == FinetuneMode::Comfusion && prior.iter().any(|p| p.prompt.words().len() < 3) {
        return Err(Error::Invalid("two-stream priors must carry class-scene texts".into()));
    }
    let w = cfg.weights;
    let fusion_on = mode == FinetuneMode::Comfusion && w.fusion_active();
    let prior_weight = if mode == FinetuneMode::InstanceOnly { 0.0 } else { w.lambda_cs };

    let mut opt = Adam::new(state.trainable(), cfg.learning_rate, cfg.adam);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let idx = step as u64;
        let mut r_inst = stream(derive_indexed(seed, "composite/instance", idx));
        let mut r_prior = stream(derive_indexed(seed, "composite/prior", idx));
        let mut r_fuse = stream(derive_indexed(seed, "fusion", idx));

        let i_pick = r_inst.random_range(0..inst.len());
        let d_inst = draw_uniform(&mut r_inst, &state);
        let prior_draw = if prior.is_empty() {
            None
        } else {
            let k = r_prior.random_range(0..prior.len());
            Some((k, draw_uniform(&mut r_prior, &state)))
        };
        let fusion_draw = if fusion_on {
            let k = r_fuse.random_range(0..prior.len());
            let j = r_fuse.random_range(0..targets.len());
            Some((k, j, draw_window(&mut r_fuse, &state, (cfg.window_low, cfg.window_high))?))
        } else {
            None
        };

        let (row, grads) = {
            let mut tape = Tape::new(state.trainable());
            let l_ci = denoising_batch_var(&state, &mut tape, &[(&inst[i_pick], &d_inst)])?;
            let mut total = l_ci;
            let mut calls = 1;
            let mut l_cs_v = 0.0;
            if let Some((k, d)) = &prior_draw {
                let l_cs = denoising_batch_var(&state, &mut tape, &[(&prior[*k], d)])?;
                l_cs_v = f(tape.scalar(l_cs));
                total = tape.lincomb(total, T::one(), l_cs, c(prior_weight))?;
                calls += 1;
            }
            let (mut l_fi_v, mut l_fs_v) = (0.0, 0.0);
            if let Some((k, j, d)) = &fusion_draw {
                let fv = fusion_losses_var(&state, &mut tape, &prior[*k], &targets[*j], d, cfg.tau)?;
                l_fi_v = f(tape.scalar(fv.l_fi));
                l_fs_v = f(tape.scalar(fv.l_fs));
                total = tape.lincomb(total, T::one(), fv.l_fi, c(w.lambda_fi))?;
                total = tape.lincomb(total, T::one(), fv.l_fs, c(w.lambda_fs))?;
                calls += fv.denoiser_calls;
            }
            let l_ci_v = f(tape.scalar(l_ci));
            let weights = LossWeights {
                lambda_cs: prior_weight,
                lambda_fi: if fusion_on { w.lambda_fi } else { 0.0 },
                lambda_fs: if fusion_on { w.lambda_fs } else { 0.0 },
            };
            let br: LossBreakdown = total_loss(l_ci_v, l_cs_v, l_fi_v, l_fs_v, &weights).map_err(|e| {
                Error::Divergence {
                    step,
                    detail: format!(
                        "{e}; t_composite {}, t_fusion {:?}, tau {}, param norm {:.4e}",
                        d_inst.t,
                        fusion_draw.as_ref().map(|x| x.2.t),
                        cfg.tau,
                        param_norm(state.trainable())
                    ),
                }
            })?;
            let g = tape.backward(total);
            let grads = gradient_buffers(state.trainable(), &g);
            let gn = grad_norm(&grads);
            if !gn.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!(
                        "non-finite gradient; t_composite {}, t_fusion {:?}, tau {}",
                        d_inst.t,
                        fusion_draw.as_ref().map(|x| x.2.t),
                        cfg.tau
                    ),
                });
            }
            let row = LogRow {
                step,
                l_ci: br.l_ci,
                l_cs: br.l_cs,
                l_fi: br.l_fi,
                l_fs: br.l_fs,
                total: br.total,
                t_composite: d_inst.t,
                t_fusion: fusion_draw.as_ref().map(|x| x.2.t),
                tau: if fusion_on { cfg.tau } else { 0 },
                denoiser_calls: calls,
            };
            (row, grads)
        };
        log.push(row);
        opt.update(state.trainable_mut(), &grads);
    }
    Ok(FinetuneOutcome { state, log })
}

pub fn finetune_comfusion<T: Scalar>(
    base: &ModelState<T>,
    instances: &InstanceSet<T>,
    priors: &PriorSet<T>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<FinetuneOutcome<T>> {
    finetune(base, instances, Some(priors), cfg, FinetuneMode::Comfusion, seed)
}

pub fn finetune_dreambooth<T: Scalar>(
    base: &ModelState<T>,
    instances: &InstanceSet<T>,
    class_priors: &PriorSet<T>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<FinetuneOutcome<T>> {
    finetune(base, instances, Some(class_priors), cfg, FinetuneMode::Dreambooth, seed)
}

pub fn finetune_instance_only<T: Scalar>(
    base: &ModelState<T>,
    instances: &InstanceSet<T>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<FinetuneOutcome<T>> {
    finetune(base, instances, None, cfg, FinetuneMode::InstanceOnly, seed)
}
