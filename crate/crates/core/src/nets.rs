//! Parametric functions: the trainable text encoder and noise-prediction MLP,
//! the frozen autoencoder, and the frozen instance/scene embedders.
//!
//! Every forward function has a tape form (`*_var`) used for training and a
//! plain form that builds a throwaway tape; both share one implementation.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamSet, SparseMatrix, Tape, Var};
use crate::error::{Error, Result};
use crate::prompts::Vocabulary;
use crate::rng::{gaussian_vec, stream_for};
use crate::sampler::Denoiser;
use crate::scalar::{c, Scalar};
use crate::schedule::{Latent, NoiseSchedule, ScheduleSpec};

pub const DINO_DIM: usize = 56;
pub const CLIP_DIM: usize = 52;

/// Pixel tensor in height × width × channel order, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape {
                expected: vec![height, width, channels],
                got: vec![data.len()],
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, v: T) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![v; height * width * channels],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, ch: usize) -> usize {
        (y * self.width + x) * self.channels + ch
    }

    pub fn clamped(mut self) -> Self {
        for v in &mut self.data {
            *v = v.max(T::zero()).min(T::one());
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum LatentMode {
    /// Latent is the flattened image.
    Identity,
    /// Fixed seeded map with orthonormal rows; the decoder is its transpose.
    Linear { dim: usize, seed: u64 },
}

/// Architecture hyperparameters. Serialized into every checkpoint manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub latent: LatentMode,
    pub token_dim: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    /// Data scale used by the per-timestep skip around the MLP.
    pub sigma_data: f64,
    pub init_seed: u64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            image_height: 16,
            image_width: 16,
            channels: 3,
            latent: LatentMode::Identity,
            token_dim: 32,
            cond_dim: 32,
            time_dim: 16,
            hidden: 256,
            hidden_layers: 2,
            sigma_data: 0.25,
            init_seed: 0,
        }
    }
}

impl ArchConfig {
    pub fn pixels(&self) -> usize {
        self.image_height * self.image_width * self.channels
    }

    pub fn latent_dim(&self) -> usize {
        match self.latent {
            LatentMode::Identity => self.pixels(),
            LatentMode::Linear { dim, .. } => dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_height % 8 != 0 || self.image_width % 8 != 0 || self.image_height == 0 {
            return Err(Error::config(
                "arch.image_height/image_width",
                "must be positive multiples of 8",
            ));
        }
        if self.channels != 3 {
            return Err(Error::config("arch.channels", "embedders need RGB images"));
        }
        if self.time_dim % 2 != 0 || self.time_dim == 0 {
            return Err(Error::config("arch.time_dim", "must be a positive even number"));
        }
        if self.hidden_layers == 0 || self.hidden == 0 || self.cond_dim == 0 || self.token_dim == 0 {
            return Err(Error::config("arch", "layer sizes must be positive"));
        }
        if !(self.sigma_data > 0.0 && self.sigma_data.is_finite()) {
            return Err(Error::config("arch.sigma_data", "must be finite and > 0"));
        }
        if let LatentMode::Linear { dim, .. } = self.latent {
            if dim == 0 || dim > self.pixels() {
                return Err(Error::config(
                    "arch.latent.dim",
                    format!("must lie in [1, {}]", self.pixels()),
                ));
            }
        }
        Ok(())
    }
}

/// Sinusoidal embedding of an integer timestep with geometric frequencies.
pub fn time_embedding<T: Scalar>(t: usize, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(1000f64.ln()) * i as f64 / half as f64).exp();
        out.push(c((t as f64 * freq).sin()));
    }
    for i in 0..half {
        let freq = (-(1000f64.ln()) * i as f64 / half as f64).exp();
        out.push(c((t as f64 * freq).cos()));
    }
    out
}

/// Parameter handles for the trainable networks.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableLayout {
    pub token_table: ParamId,
    pub text_proj_w: ParamId,
    pub text_proj_b: ParamId,
    /// Hidden layers followed by the output layer, each `(weight, bias)`.
    pub denoiser: Vec<(ParamId, ParamId)>,
    pub skip_gain: ParamId,
}

impl TrainableLayout {
    fn resolve(params: &ParamSet<impl Scalar>, layers: usize) -> Result<Self> {
        let get = |n: &str| {
            params
                .find(n)
                .ok_or_else(|| Error::Invalid(format!("missing parameter `{n}`")))
        };
        let mut denoiser = Vec::new();
        for l in 0..layers {
            denoiser.push((get(&format!("denoiser.l{l}.w"))?, get(&format!("denoiser.l{l}.b"))?));
        }
        denoiser.push((get("denoiser.out.w")?, get("denoiser.out.b")?));
        Ok(Self {
            token_table: get("text.token_table")?,
            text_proj_w: get("text.proj.w")?,
            text_proj_b: get("text.proj.b")?,
            denoiser,
            skip_gain: get("denoiser.skip")?,
        })
    }
}

fn init_trainable<T: Scalar>(arch: &ArchConfig, vocab_len: usize) -> ParamSet<T> {
    let mut p = ParamSet::new();
    let mut rng = stream_for(arch.init_seed, "init");
    let mut normal = |rows: usize, cols: usize, std: f64| -> Vec<T> {
        gaussian_vec::<T, _>(&mut rng, rows * cols)
            .into_iter()
            .map(|v| v * c(std))
            .collect()
    };
    let td = arch.token_dim;
    let cd = arch.cond_dim;
    let table = normal(vocab_len, td, 1.0);
    p.push("text.token_table", vocab_len, td, table);
    let w = normal(cd, td, 1.0 / (td as f64).sqrt());
    p.push("text.proj.w", cd, td, w);
    p.push("text.proj.b", 1, cd, vec![T::zero(); cd]);
    let mut fan_in = arch.latent_dim() + arch.time_dim + cd;
    for l in 0..arch.hidden_layers {
        let w = normal(arch.hidden, fan_in, 1.0 / (fan_in as f64).sqrt());
        p.push(format!("denoiser.l{l}.w"), arch.hidden, fan_in, w);
        p.push(format!("denoiser.l{l}.b"), 1, arch.hidden, vec![T::zero(); arch.hidden]);
        fan_in = arch.hidden;
    }
    let ld = arch.latent_dim();
    let w = normal(ld, fan_in, 1.0 / (fan_in as f64).sqrt());
    p.push("denoiser.out.w", ld, fan_in, w);
    p.push("denoiser.out.b", 1, ld, vec![T::zero(); ld]);
    p.push("denoiser.skip", 1, ld, vec![T::one(); ld]);
    p
}

/// Orthonormal rows via modified Gram-Schmidt on a seeded Gaussian matrix.
fn orthonormal_rows<T: Scalar>(rows: usize, cols: usize, seed: u64) -> Vec<T> {
    let mut rng = stream_for(seed, "autoencoder");
    let mut m: Vec<f64> = gaussian_vec(&mut rng, rows * cols);
    for r in 0..rows {
        for q in 0..r {
            let d: f64 = (0..cols).map(|j| m[r * cols + j] * m[q * cols + j]).sum();
            for j in 0..cols {
                m[r * cols + j] -= d * m[q * cols + j];
            }
        }
        let n: f64 = (0..cols).map(|j| m[r * cols + j].powi(2)).sum::<f64>().sqrt();
        for j in 0..cols {
            m[r * cols + j] /= n;
        }
    }
    m.into_iter().map(c).collect()
}

/// Frozen encoder/decoder pair.
#[derive(Debug, Clone)]
pub struct Autoencoder<T> {
    height: usize,
    width: usize,
    channels: usize,
    maps: Option<(Arc<SparseMatrix<T>>, Arc<SparseMatrix<T>>)>,
}

impl<T: Scalar> Autoencoder<T> {
    pub fn identity(arch: &ArchConfig) -> Self {
        Self {
            height: arch.image_height,
            width: arch.image_width,
            channels: arch.channels,
            maps: None,
        }
    }

    /// Linear autoencoder from its `dim × pixels` encoder matrix.
    pub fn linear(arch: &ArchConfig, encoder: &[T]) -> Result<Self> {
        let px = arch.pixels();
        let dim = arch.latent_dim();
        if encoder.len() != dim * px {
            return Err(Error::Shape {
                expected: vec![dim, px],
                got: vec![encoder.len()],
            });
        }
        let mut transposed = vec![T::zero(); px * dim];
        for r in 0..dim {
            for j in 0..px {
                transposed[j * dim + r] = encoder[r * px + j];
            }
        }
        Ok(Self {
            height: arch.image_height,
            width: arch.image_width,
            channels: arch.channels,
            maps: Some((
                Arc::new(SparseMatrix::from_dense(dim, px, encoder)),
                Arc::new(SparseMatrix::from_dense(px, dim, &transposed)),
            )),
        })
    }

    pub fn latent_dim(&self) -> usize {
        match &self.maps {
            None => self.height * self.width * self.channels,
            Some((enc, _)) => enc.rows(),
        }
    }

    pub fn encode(&self, x: &Image<T>) -> Result<Latent<T>> {
        if x.shape() != [self.height, self.width, self.channels] {
            return Err(Error::Shape {
                expected: vec![self.height, self.width, self.channels],
                got: x.shape().to_vec(),
            });
        }
        match &self.maps {
            None => Ok(Latent::from_vec(x.data.clone())),
            Some((enc, _)) => {
                let mut z = vec![T::zero(); enc.rows()];
                enc.apply(&x.data, &mut z);
                Ok(Latent::from_vec(z))
            }
        }
    }

    pub fn decode(&self, z: &Latent<T>) -> Result<Image<T>> {
        if z.len() != self.latent_dim() {
            return Err(Error::Shape {
                expected: vec![self.latent_dim()],
                got: z.shape.clone(),
            });
        }
        let data = match &self.maps {
            None => z.data.clone(),
            Some((_, dec)) => {
                let mut x = vec![T::zero(); dec.rows()];
                dec.apply(&z.data, &mut x);
                x
            }
        };
        Ok(Image::new(self.height, self.width, self.channels, data)?.clamped())
    }

    /// Differentiable decode (with clamping) of a `1 × latent` tape row.
    pub fn decode_var(&self, tape: &mut Tape<'_, T>, z: Var) -> Result<Var> {
        let x = match &self.maps {
            None => z,
            Some((_, dec)) => tape.const_linear(z, dec.clone())?,
        };
        Ok(tape.clamp01(x))
    }
}

/// Frozen handcrafted feature maps standing in for the instance (DINO-like)
/// and scene (CLIP-like) image embedders.
#[derive(Debug, Clone)]
pub struct Embedders<T> {
    height: usize,
    width: usize,
    dino_blocks: Arc<SparseMatrix<T>>,
    dino_hue: Arc<SparseMatrix<T>>,
    dino_hue_pool: Arc<SparseMatrix<T>>,
    clip_blocks: Arc<SparseMatrix<T>>,
    clip_diag: Arc<SparseMatrix<T>>,
}

const HUE_BINS: usize = 8;
const HUE_SHARPNESS: f64 = 10.0;
const HUE_WEIGHT: f64 = 2.0;
const DIAG_WEIGHT: f64 = 4.0;

impl<T: Scalar> Embedders<T> {
    pub fn new(height: usize, width: usize) -> Self {
        let ch = 3;
        let px = height * width * ch;
        let idx = |y: usize, x: usize, k: usize| (y * width + x) * ch + k;

        // 4x4 grid of block means per channel over a region
        let blocks = |y0: usize, x0: usize, h: usize, w: usize| -> Vec<Vec<(usize, T)>> {
            let (bh, bw) = (h / 4, w / 4);
            let inv: T = c(1.0 / (bh * bw) as f64);
            let mut rows = Vec::new();
            for by in 0..4 {
                for bx in 0..4 {
                    for k in 0..ch {
                        let mut row = Vec::new();
                        for y in 0..bh {
                            for x in 0..bw {
                                row.push((idx(y0 + by * bh + y, x0 + bx * bw + x, k), inv));
                            }
                        }
                        rows.push(row);
                    }
                }
            }
            rows
        };

        let (cy, cx, chh, cww) = (height / 4, width / 4, height / 2, width / 2);
        let dino_blocks = SparseMatrix::from_rows(px, blocks(cy, cx, chh, cww));

        // per-pixel chroma projected onto each hue direction
        let s3: f64 = 3f64.sqrt() / 2.0;
        let mut hue_rows = Vec::new();
        for y in cy..cy + chh {
            for x in cx..cx + cww {
                for b in 0..HUE_BINS {
                    let th = 2.0 * std::f64::consts::PI * b as f64 / HUE_BINS as f64;
                    let (ct, st) = (th.cos(), th.sin());
                    // a = R - (G+B)/2, b = (sqrt3/2)(G - B)
                    let wr = ct;
                    let wg = -0.5 * ct + s3 * st;
                    let wb = -0.5 * ct - s3 * st;
                    hue_rows.push(vec![
                        (idx(y, x, 0), c(wr)),
                        (idx(y, x, 1), c(wg)),
                        (idx(y, x, 2), c(wb)),
                    ]);
                }
            }
        }
        let n_crop = chh * cww;
        let dino_hue = SparseMatrix::from_rows(px, hue_rows);
        let pool_w: T = c(HUE_WEIGHT / n_crop as f64);
        let pool_rows = (0..HUE_BINS)
            .map(|b| (0..n_crop).map(|p| (p * HUE_BINS + b, pool_w)).collect())
            .collect();
        let dino_hue_pool = SparseMatrix::from_rows(n_crop * HUE_BINS, pool_rows);

        let mut clip_rows = Vec::new();
        let ginv: T = c(1.0 / (height * width) as f64);
        for k in 0..ch {
            clip_rows.push(
                (0..height)
                    .flat_map(|y| (0..width).map(move |x| (y, x)))
                    .map(|(y, x)| (idx(y, x, k), ginv))
                    .collect(),
            );
        }
        clip_rows.extend(blocks(0, 0, height, width));
        let clip_blocks = SparseMatrix::from_rows(px, clip_rows);

        let mut diag_rows = Vec::new();
        for y in 0..height - 1 {
            for x in 0..width - 1 {
                for k in 0..ch {
                    diag_rows.push(vec![(idx(y, x, k), T::one()), (idx(y + 1, x + 1, k), -T::one())]);
                }
            }
        }
        let clip_diag = SparseMatrix::from_rows(px, diag_rows);

        Self {
            height,
            width,
            dino_blocks: Arc::new(dino_blocks),
            dino_hue: Arc::new(dino_hue),
            dino_hue_pool: Arc::new(dino_hue_pool),
            clip_blocks: Arc::new(clip_blocks),
            clip_diag: Arc::new(clip_diag),
        }
    }

    fn check(&self, x: &Image<T>) -> Result<()> {
        if x.shape() != [self.height, self.width, 3] {
            return Err(Error::Shape {
                expected: vec![self.height, self.width, 3],
                got: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Center-crop block means plus a soft hue histogram (56 values).
    pub fn dino_var(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let half: T = c(0.5);
        let blocks = tape.const_linear(x, self.dino_blocks.clone())?;
        let blocks = tape.add_const(blocks, -half);
        let proj = tape.const_linear(x, self.dino_hue.clone())?;
        let soft = tape.softplus(proj, c(HUE_SHARPNESS));
        let hist = tape.const_linear(soft, self.dino_hue_pool.clone())?;
        let base: T = c(HUE_WEIGHT * 2f64.ln() / HUE_SHARPNESS);
        let hist = tape.add_const(hist, -base);
        tape.concat_cols(&[blocks, hist])
    }

    /// Global means, block means and diagonal-gradient energy (52 values).
    pub fn clip_var(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let half: T = c(0.5);
        let means = tape.const_linear(x, self.clip_blocks.clone())?;
        let means = tape.add_const(means, -half);
        let d = tape.const_linear(x, self.clip_diag.clone())?;
        let d2 = tape.square(d);
        let e = tape.mean(d2);
        let e = tape.scale(e, c(DIAG_WEIGHT));
        tape.concat_cols(&[means, e])
    }

    pub fn dino_embed(&self, x: &Image<T>) -> Result<Vec<T>> {
        self.check(x)?;
        let empty = ParamSet::new();
        let mut tape = Tape::new(&empty);
        let v = tape.row(x.data.clone());
        let out = self.dino_var(&mut tape, v)?;
        Ok(tape.value(out).to_vec())
    }

    pub fn clip_image_embed(&self, x: &Image<T>) -> Result<Vec<T>> {
        self.check(x)?;
        let empty = ParamSet::new();
        let mut tape = Tape::new(&empty);
        let v = tape.row(x.data.clone());
        let out = self.clip_var(&mut tape, v)?;
        Ok(tape.value(out).to_vec())
    }
}

/// Frozen text-side scene embeddings: one row per (class, scene) key, each
/// the mean image embedding of that cell's calibration renders.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTable<T> {
    pub keys: Vec<(String, String)>,
    pub rows: Vec<Vec<T>>,
}

impl<T: Scalar> CalibrationTable<T> {
    pub fn lookup(&self, class: &str, scene: &str) -> Result<&[T]> {
        self.keys
            .iter()
            .position(|(c, s)| c == class && s == scene)
            .map(|i| self.rows[i].as_slice())
            .ok_or_else(|| Error::UnknownKey {
                class: class.to_owned(),
                scene: scene.to_owned(),
            })
    }

    pub fn flat(&self) -> Vec<T> {
        self.rows.iter().flatten().copied().collect()
    }
}

/// All model parameters: trainable text encoder and denoiser, frozen
/// autoencoder and embedder tables.
#[derive(Debug, Clone)]
pub struct ModelState<T> {
    arch: ArchConfig,
    schedule_spec: ScheduleSpec,
    schedule: NoiseSchedule<T>,
    vocab: Vocabulary,
    trainable: ParamSet<T>,
    frozen: ParamSet<T>,
    calibration_keys: Vec<(String, String)>,
    layout: TrainableLayout,
    autoencoder: Autoencoder<T>,
    embedders: Embedders<T>,
    clip_text_id: ParamId,
}

impl<T: Scalar> ModelState<T> {
    /// Fresh model with seeded initial weights.
    pub fn new(
        arch: ArchConfig,
        schedule_spec: ScheduleSpec,
        vocab: Vocabulary,
        calibration: &CalibrationTable<T>,
    ) -> Result<Self> {
        arch.validate()?;
        let trainable = init_trainable(&arch, vocab.len());
        let mut frozen = ParamSet::new();
        if let LatentMode::Linear { dim, seed } = arch.latent {
            let enc = orthonormal_rows(dim, arch.pixels(), seed);
            frozen.push("autoencoder.encoder", dim, arch.pixels(), enc);
        }
        frozen.push(
            "embedder.clip_text",
            calibration.rows.len(),
            CLIP_DIM,
            calibration.flat(),
        );
        Self::from_parts(arch, schedule_spec, vocab, trainable, frozen, calibration.keys.clone())
    }

    pub fn from_parts(
        arch: ArchConfig,
        schedule_spec: ScheduleSpec,
        vocab: Vocabulary,
        trainable: ParamSet<T>,
        frozen: ParamSet<T>,
        calibration_keys: Vec<(String, String)>,
    ) -> Result<Self> {
        arch.validate()?;
        let schedule = schedule_spec.build()?;
        let layout = TrainableLayout::resolve(&trainable, arch.hidden_layers)?;
        let (vr, vc) = trainable.shape(layout.token_table);
        if vr != vocab.len() || vc != arch.token_dim {
            return Err(Error::Shape {
                expected: vec![vocab.len(), arch.token_dim],
                got: vec![vr, vc],
            });
        }
        let autoencoder = match arch.latent {
            LatentMode::Identity => Autoencoder::identity(&arch),
            LatentMode::Linear { .. } => {
                let id = frozen
                    .find("autoencoder.encoder")
                    .ok_or_else(|| Error::Invalid("missing frozen autoencoder.encoder".into()))?;
                Autoencoder::linear(&arch, frozen.get(id))?
            }
        };
        let clip_text_id = frozen
            .find("embedder.clip_text")
            .ok_or_else(|| Error::Invalid("missing frozen embedder.clip_text".into()))?;
        if frozen.shape(clip_text_id) != (calibration_keys.len(), CLIP_DIM) {
            return Err(Error::Invalid("calibration table does not match its keys".into()));
        }
        let embedders = Embedders::new(arch.image_height, arch.image_width);
        Ok(Self {
            arch,
            schedule_spec,
            schedule,
            vocab,
            trainable,
            frozen,
            calibration_keys,
            layout,
            autoencoder,
            embedders,
            clip_text_id,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn schedule(&self) -> &NoiseSchedule<T> {
        &self.schedule
    }

    pub fn schedule_spec(&self) -> ScheduleSpec {
        self.schedule_spec
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn trainable(&self) -> &ParamSet<T> {
        &self.trainable
    }

    pub fn trainable_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.trainable
    }

    pub fn frozen(&self) -> &ParamSet<T> {
        &self.frozen
    }

    pub fn calibration_keys(&self) -> &[(String, String)] {
        &self.calibration_keys
    }

    pub fn layout(&self) -> &TrainableLayout {
        &self.layout
    }

    pub fn autoencoder(&self) -> &Autoencoder<T> {
        &self.autoencoder
    }

    pub fn embedders(&self) -> &Embedders<T> {
        &self.embedders
    }

    /// Frozen mean clip embedding of a (class, scene) cell.
    pub fn clip_text_embed(&self, class: &str, scene: &str) -> Result<Vec<T>> {
        let i = self
            .calibration_keys
            .iter()
            .position(|(c, s)| c == class && s == scene)
            .ok_or_else(|| Error::UnknownKey {
                class: class.to_owned(),
                scene: scene.to_owned(),
            })?;
        Ok(self.frozen.get(self.clip_text_id)[i * CLIP_DIM..(i + 1) * CLIP_DIM].to_vec())
    }

    /// Γ on a tape: token lookup, mean pooling, one affine projection.
    pub fn encode_text_var(&self, tape: &mut Tape<'_, T>, ids: Vec<Vec<usize>>) -> Result<Var> {
        let table = tape.param(self.layout.token_table);
        let pooled = tape.embed_mean(table, ids)?;
        let w = tape.param(self.layout.text_proj_w);
        let b = tape.param(self.layout.text_proj_b);
        tape.linear(pooled, w, Some(b))
    }

    /// Input and skip scales at step t. With z_t = √ᾱ·x + √(1-ᾱ)·ε and
    /// per-element data variance σ², var(z_t) = ᾱσ² + 1 − ᾱ; the skip factor
    /// is the least-squares ε estimate from z_t alone.
    pub fn precondition(&self, t: usize) -> (T, T) {
        let ab = crate::scalar::f(self.schedule.alpha_bar(t));
        let s2 = self.arch.sigma_data * self.arch.sigma_data;
        let var = ab * s2 + 1.0 - ab;
        (c(1.0 / var.sqrt()), c((1.0 - ab).sqrt() / var))
    }

    /// ε_θ on a tape for a batch: `z` is `rows × latent`, `cond` is `rows × cond_dim`.
    /// The MLP sees the variance-normalized latent and is added to a gated
    /// per-timestep skip of the input.
    pub fn denoise_var(&self, tape: &mut Tape<'_, T>, z: Var, ts: &[usize], cond: Var) -> Result<Var> {
        let (rows, width) = tape.shape(z);
        if width != self.arch.latent_dim() {
            return Err(Error::Shape {
                expected: vec![self.arch.latent_dim()],
                got: vec![width],
            });
        }
        if ts.len() != rows || tape.shape(cond) != (rows, self.arch.cond_dim) {
            return Err(Error::Invalid("denoise: batch rows disagree".into()));
        }
        for &t in ts {
            self.schedule.check_t(t)?;
        }
        let temb: Vec<T> = ts
            .iter()
            .flat_map(|&t| time_embedding::<T>(t, self.arch.time_dim))
            .collect();
        let temb = tape.leaf(rows, self.arch.time_dim, temb);
        let (c_in, c_skip): (Vec<T>, Vec<T>) = ts.iter().map(|&t| self.precondition(t)).unzip();
        let zin = tape.scale_rows(z, c_in)?;
        let mut h = tape.concat_cols(&[zin, temb, cond])?;
        let n = self.layout.denoiser.len();
        for (i, &(w, b)) in self.layout.denoiser.iter().enumerate() {
            let wv = tape.param(w);
            let bv = tape.param(b);
            h = tape.linear(h, wv, Some(bv))?;
            if i + 1 < n {
                h = tape.gelu(h);
            }
        }
        let gain = tape.param(self.layout.skip_gain);
        let skip = tape.mul_row(z, gain)?;
        let skip = tape.scale_rows(skip, c_skip)?;
        tape.add(h, skip)
    }

    pub fn encode_text(&self, ids: &[usize]) -> Result<Vec<T>> {
        let mut tape = Tape::new(&self.trainable);
        let v = self.encode_text_var(&mut tape, vec![ids.to_vec()])?;
        Ok(tape.value(v).to_vec())
    }

    pub fn denoise_eps(&self, z_t: &Latent<T>, t: usize, cond: &[T]) -> Result<Latent<T>> {
        if cond.len() != self.arch.cond_dim {
            return Err(Error::Shape {
                expected: vec![self.arch.cond_dim],
                got: vec![cond.len()],
            });
        }
        let mut tape = Tape::new(&self.trainable);
        let z = tape.row(z_t.data.clone());
        let cv = tape.row(cond.to_vec());
        let out = self.denoise_var(&mut tape, z, &[t], cv)?;
        Ok(Latent {
            data: tape.value(out).to_vec(),
            shape: z_t.shape.clone(),
        })
    }

    pub fn encode_image(&self, x: &Image<T>) -> Result<Latent<T>> {
        self.autoencoder.encode(x)
    }

    pub fn decode_latent(&self, z: &Latent<T>) -> Result<Image<T>> {
        self.autoencoder.decode(z)
    }

    pub fn dino_embed(&self, x: &Image<T>) -> Result<Vec<T>> {
        self.embedders.dino_embed(x)
    }

    pub fn clip_image_embed(&self, x: &Image<T>) -> Result<Vec<T>> {
        self.embedders.clip_image_embed(x)
    }
}

/// ε_θ over plain latents, counting evaluations.
pub struct PlainDenoiser<'a, T> {
    pub state: &'a ModelState<T>,
    pub calls: usize,
}

impl<'a, T: Scalar> PlainDenoiser<'a, T> {
    pub fn new(state: &'a ModelState<T>) -> Self {
        Self { state, calls: 0 }
    }
}

impl<T: Scalar> Denoiser<T> for PlainDenoiser<'_, T> {
    type Latent = Latent<T>;
    type Cond = [T];

    fn eps(&mut self, z_t: &Latent<T>, t: usize, cond: &[T]) -> Result<Latent<T>> {
        self.calls += 1;
        self.state.denoise_eps(z_t, t, cond)
    }

    fn lincomb(&mut self, x: &Latent<T>, a: T, y: &Latent<T>, b: T) -> Result<Latent<T>> {
        x.check_same_shape(y)?;
        Ok(x.lincomb(a, y, b))
    }
}

/// ε_θ recorded on a tape so gradients flow through every call.
pub struct TapeDenoiser<'t, 'p, T> {
    pub state: &'p ModelState<T>,
    pub tape: &'t mut Tape<'p, T>,
    pub calls: usize,
}

impl<T: Scalar> Denoiser<T> for TapeDenoiser<'_, '_, T> {
    type Latent = Var;
    type Cond = Var;

    fn eps(&mut self, z_t: &Var, t: usize, cond: &Var) -> Result<Var> {
        self.calls += 1;
        self.state.denoise_var(self.tape, *z_t, &[t], *cond)
    }

    fn lincomb(&mut self, x: &Var, a: T, y: &Var, b: T) -> Result<Var> {
        self.tape.lincomb(*x, a, *y, b)
    }
}
