//! Toy image universe: shape classes rendered over procedural scene
//! backgrounds, plus corpus, calibration and prior-set generation.

use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::cosine_similarity;
use crate::nets::{CalibrationTable, Embedders, Image, ModelState};
use crate::prompts::{class_scene_text, class_text, Prompt, PromptTemplate, Vocabulary, DEFAULT_IDENTIFIER, SCENE_PHRASES};
use crate::rng::{derive_indexed, derive_seed, stream};
use crate::sampler::generate;
use crate::scalar::{c, Scalar};

/// Neutral backdrop used for instance reference images. Not a prompt scene.
pub const PLAIN_BACKDROP: &str = "plain";

pub const DEFAULT_CLASSES: [&str; 4] = ["circle", "square", "triangle", "cross"];

pub const DEFAULT_SCENES: [&str; 8] = [
    "in the rain",
    "in the snow",
    "on the grass",
    "in the river",
    "in the sky",
    "on the floor",
    "in the room",
    "on the table",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub classes: Vec<String>,
    pub scenes: Vec<String>,
    pub image_height: usize,
    pub image_width: usize,
    /// Calibration renders per (class, scene) cell.
    pub calibration_count: usize,
    pub identifier: String,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            classes: DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect(),
            scenes: DEFAULT_SCENES.iter().map(|s| s.to_string()).collect(),
            image_height: 16,
            image_width: 16,
            calibration_count: 64,
            identifier: DEFAULT_IDENTIFIER.to_owned(),
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::config("world.classes", "must not be empty"));
        }
        if self.scenes.is_empty() {
            return Err(Error::config("world.scenes", "must not be empty"));
        }
        for c in &self.classes {
            if !DEFAULT_CLASSES.contains(&c.as_str()) {
                return Err(Error::config("world.classes", format!("no renderer for class `{c}`")));
            }
        }
        for (i, s) in self.scenes.iter().enumerate() {
            if !SCENE_PHRASES.contains(&s.as_str()) {
                return Err(Error::config("world.scenes", format!("no renderer for scene `{s}`")));
            }
            if self.scenes[..i].contains(s) {
                return Err(Error::config("world.scenes", format!("duplicate scene `{s}`")));
            }
        }
        if self.image_height < 8 || self.image_width < 8 || self.image_height % 4 != 0 || self.image_width % 4 != 0 {
            return Err(Error::config("world.image_height", "image sides must be multiples of 4, at least 8"));
        }
        if self.calibration_count == 0 {
            return Err(Error::config("world.calibration_count", "must be >= 1"));
        }
        PromptTemplate::new(&self.identifier, &self.classes[0], None).validate(&self.classes, &self.scenes)
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let scenes: Vec<&str> = self.scenes.iter().map(String::as_str).collect();
        Vocabulary::build(&self.identifier, &self.classes, &scenes)
    }

    pub fn template(&self, class: &str) -> PromptTemplate {
        PromptTemplate::new(&self.identifier, class, None)
    }

    fn check_class(&self, class: &str) -> Result<()> {
        if self.classes.iter().any(|c| c == class) {
            Ok(())
        } else {
            Err(Error::Invalid(format!("unknown class `{class}`")))
        }
    }

    fn check_scene(&self, scene: &str) -> Result<()> {
        if scene == PLAIN_BACKDROP || self.scenes.iter().any(|s| s == scene) {
            Ok(())
        } else {
            Err(Error::Invalid(format!("unknown scene `{scene}`")))
        }
    }
}

/// Identity of one subject: its class, hue, stripe phase and size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub class: String,
    pub hue: f64,
    pub texture_phase: f64,
    pub size: f64,
}

impl InstanceSpec {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, class: &str) -> Self {
        Self {
            class: class.to_owned(),
            hue: rng.random::<f64>(),
            texture_phase: rng.random::<f64>(),
            size: rng.random_range(0.6..1.0),
        }
    }

    pub fn validate(&self, world: &WorldSpec) -> Result<()> {
        world.check_class(&self.class)?;
        if !(0.0..1.0).contains(&self.hue) {
            return Err(Error::config("instance.hue", "must lie in [0, 1)"));
        }
        if !(self.size >= 0.0 && self.size <= 1.0) || !self.texture_phase.is_finite() {
            return Err(Error::config("instance.size", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// The benchmark subjects: one per class, hues spread around the wheel.
pub fn benchmark_instances(world: &WorldSpec, seed: u64) -> Vec<InstanceSpec> {
    let n = world.classes.len();
    world
        .classes
        .iter()
        .enumerate()
        .map(|(i, class)| {
            let mut rng = stream(derive_indexed(seed, "instance", i as u64));
            InstanceSpec {
                class: class.clone(),
                hue: ((i as f64 + rng.random_range(0.1..0.4)) / n as f64).fract(),
                texture_phase: rng.random::<f64>(),
                size: rng.random_range(0.8..1.0),
            }
        })
        .collect()
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let k = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        v - v * s * k.min(4.0 - k).clamp(0.0, 1.0)
    };
    [k(5.0), k(3.0), k(1.0)]
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn shade(a: [f64; 3], d: f64) -> [f64; 3] {
    [a[0] + d, a[1] + d, a[2] + d]
}

/// Paints the background of `scene` into an h×w×3 buffer.
fn paint_scene<R: Rng + ?Sized>(scene: &str, h: usize, w: usize, rng: &mut R) -> Result<Vec<[f64; 3]>> {
    let phase: f64 = rng.random();
    let mut px = vec![[0.0; 3]; h * w];
    let at = |y: usize, x: usize| ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
    let mut fill = |f: &mut dyn FnMut(f64, f64) -> [f64; 3]| {
        for y in 0..h {
            for x in 0..w {
                let (u, v) = at(y, x);
                px[y * w + x] = f(u, v);
            }
        }
    };
    match scene {
        PLAIN_BACKDROP => fill(&mut |_, _| [0.5, 0.5, 0.5]),
        "in the rain" => fill(&mut |u, v| {
            let d = ((u + v) * 3.0 + phase).rem_euclid(1.0);
            let streak = (-((d - 0.5) / 0.12).powi(2)).exp();
            lerp([0.22, 0.26, 0.36], [0.8, 0.85, 0.95], streak)
        }),
        "in the snow" => {
            fill(&mut |_, v| lerp([0.64, 0.68, 0.8], [0.74, 0.78, 0.88], v));
            for _ in 0..(h * w / 12) {
                let (y, x) = (rng.random_range(0..h), rng.random_range(0..w));
                px[y * w + x] = [1.0, 1.0, 1.0];
            }
        }
        "on the grass" => {
            let noise: Vec<f64> = (0..h * w).map(|_| rng.random_range(-0.05..0.05)).collect();
            let mut i = 0;
            fill(&mut |_, _| {
                i += 1;
                shade([0.3, 0.88, 0.22], noise[i - 1])
            });
        }
        "in the river" => fill(&mut |u, v| {
            let wave = (TAU * (3.0 * v + 0.3 * (TAU * u).sin() + phase)).sin();
            shade([0.12, 0.3, 0.62], 0.1 * wave)
        }),
        "in the sky" => fill(&mut |_, v| lerp([0.3, 0.55, 0.95], [0.78, 0.88, 1.0], v)),
        "on the floor" => fill(&mut |_, v| {
            let plank = ((v * 4.0 + phase * 0.25).rem_euclid(1.0) < 0.15) as u8 as f64;
            shade([0.55, 0.38, 0.22], -0.15 * plank)
        }),
        "in the room" => fill(&mut |_, v| if v < 0.66 { [0.86, 0.8, 0.64] } else { [0.42, 0.28, 0.18] }),
        "on the table" => fill(&mut |_, v| if v < 0.5 { [0.62, 0.62, 0.66] } else { [0.75, 0.5, 0.25] }),
        "in the basket" => fill(&mut |u, v| {
            let weave = ((u * 6.0).floor() + (v * 6.0).floor()) as i64 % 2;
            shade([0.68, 0.52, 0.3], if weave == 0 { 0.08 } else { -0.08 })
        }),
        "in the TV" => fill(&mut |u, v| {
            if (0.12..0.88).contains(&u) && (0.12..0.88).contains(&v) {
                [0.35, 0.6, 0.85]
            } else {
                [0.08, 0.08, 0.08]
            }
        }),
        "on the sofa" => fill(&mut |_, v| if v < 0.6 { [0.7, 0.18, 0.2] } else { [0.5, 0.1, 0.12] }),
        "on the bed" => fill(&mut |_, v| if v < 0.45 { [0.95, 0.95, 0.95] } else { [0.68, 0.6, 0.85] }),
        "on the stage" => fill(&mut |u, v| {
            let spot = (-((u - 0.5).powi(2) + (v - 0.2).powi(2)) / 0.05).exp();
            lerp([0.1, 0.06, 0.12], [0.95, 0.85, 0.45], spot)
        }),
        "on the top of mountain" => fill(&mut |u, v| {
            if v > 0.35 + (u - 0.5).abs() * 0.8 {
                [0.45, 0.43, 0.42]
            } else {
                [0.55, 0.75, 0.95]
            }
        }),
        "on the playground" => fill(&mut |_, v| if v < 0.5 { [0.5, 0.75, 0.95] } else { [0.88, 0.76, 0.45] }),
        other => return Err(Error::Invalid(format!("unknown scene `{other}`"))),
    }
    Ok(px)
}

fn inside(class: &str, u: f64, v: f64) -> bool {
    match class {
        "circle" => u * u + v * v <= 1.0,
        "square" => u.abs() <= 0.85 && v.abs() <= 0.85,
        "triangle" => (-1.0..=0.8).contains(&v) && u.abs() <= 0.5 * (v + 1.0),
        "cross" => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        _ => false,
    }
}

/// Deterministic composition of a scene background and one subject.
pub fn render<T: Scalar>(world: &WorldSpec, inst: &InstanceSpec, scene: &str, pose_seed: u64) -> Result<Image<T>> {
    world.check_class(&inst.class)?;
    world.check_scene(scene)?;
    let (h, w) = (world.image_height, world.image_width);
    let mut rng = stream(pose_seed);
    let cx = 0.5 + rng.random_range(-0.06..0.06);
    let cy = 0.5 + rng.random_range(-0.06..0.06);
    let angle: f64 = rng.random_range(-0.3..0.3);
    let mut px = paint_scene(scene, h, w, &mut rng)?;

    let r = 0.32 * inst.size;
    if r > 0.0 {
        let base = hsv(inst.hue, 0.8, 0.85);
        let (ca, sa) = (angle.cos(), angle.sin());
        const SS: usize = 4;
        for y in 0..h {
            for x in 0..w {
                let mut cover = 0.0;
                let mut tex = 0.0;
                for sy in 0..SS {
                    for sx in 0..SS {
                        let px_u = (x as f64 + (sx as f64 + 0.5) / SS as f64) / w as f64 - cx;
                        let px_v = (y as f64 + (sy as f64 + 0.5) / SS as f64) / h as f64 - cy;
                        let u = (ca * px_u + sa * px_v) / r;
                        let v = (-sa * px_u + ca * px_v) / r;
                        if inside(&inst.class, u, v) {
                            cover += 1.0;
                            tex += (TAU * (1.5 * u + inst.texture_phase)).sin();
                        }
                    }
                }
                if cover > 0.0 {
                    let k = 1.0 + 0.2 * tex / cover;
                    let col = [base[0] * k, base[1] * k, base[2] * k];
                    let a = cover / (SS * SS) as f64;
                    px[y * w + x] = lerp(px[y * w + x], col, a);
                }
            }
        }
    }
    let data = px.iter().flat_map(|p| p.iter().map(|&v| c::<T>(v.clamp(0.0, 1.0)))).collect();
    Image::new(h, w, 3, data)
}

/// Image with its prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair<T> {
    pub image: Image<T>,
    pub prompt: Prompt,
    pub seed: u64,
}

/// `n_per_cell` random renders for every (class, scene) cell.
pub fn build_pretrain_corpus<T: Scalar>(world: &WorldSpec, n_per_cell: usize, seed: u64) -> Result<Vec<Pair<T>>> {
    if n_per_cell == 0 {
        return Err(Error::config("n_per_cell", "must be >= 1"));
    }
    let mut out = Vec::with_capacity(world.classes.len() * world.scenes.len() * n_per_cell);
    for class in &world.classes {
        for scene in &world.scenes {
            let label = format!("corpus/{class}/{scene}");
            let prompt = class_scene_text(&world.template(class).with_scene(Some(scene)))?;
            for i in 0..n_per_cell {
                let item = derive_indexed(seed, &label, i as u64);
                let mut rng = stream(item);
                let inst = InstanceSpec::random(&mut rng, class);
                let image = render(world, &inst, scene, rng.random())?;
                out.push(Pair {
                    image,
                    prompt: prompt.clone(),
                    seed: item,
                });
            }
        }
    }
    Ok(out)
}

/// Mean scene embedding of `calibration_count` renders per cell.
pub fn build_calibration<T: Scalar>(world: &WorldSpec, seed: u64) -> Result<CalibrationTable<T>> {
    let emb = Embedders::<T>::new(world.image_height, world.image_width);
    let mut keys = Vec::new();
    let mut rows = Vec::new();
    for class in &world.classes {
        for scene in &world.scenes {
            let label = format!("calibration/{class}/{scene}");
            let mut acc = vec![0.0f64; crate::nets::CLIP_DIM];
            for i in 0..world.calibration_count {
                let mut rng = stream(derive_indexed(seed, &label, i as u64));
                let inst = InstanceSpec::random(&mut rng, class);
                let img = render::<T>(world, &inst, scene, rng.random())?;
                for (a, v) in acc.iter_mut().zip(emb.clip_image_embed(&img)?) {
                    *a += crate::scalar::f(v);
                }
            }
            let k = world.calibration_count as f64;
            keys.push((class.clone(), scene.clone()));
            rows.push(acc.into_iter().map(|a| c(a / k)).collect());
        }
    }
    Ok(CalibrationTable { keys, rows })
}

/// Measurements behind the world-build gates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    /// Mean instance-embedding cosine between renders of one subject in different scenes.
    pub dino_same_instance: f64,
    /// Mean instance-embedding cosine between different subjects in one scene.
    pub dino_same_scene: f64,
    /// Fraction of (class, scene, other scene) triples where held-out renders
    /// score higher against their own scene text than against the other.
    pub clip_alignment: f64,
    /// Worst margin (own minus other) over those triples.
    pub clip_min_margin: f64,
}

impl GateReport {
    pub fn passed(&self) -> bool {
        self.dino_same_instance > self.dino_same_scene && self.clip_alignment == 1.0
    }
}

/// Checks the embedder separation properties on fresh renders.
pub fn measure_gates<T: Scalar>(world: &WorldSpec, calibration: &CalibrationTable<T>, seed: u64) -> Result<GateReport> {
    let emb = Embedders::<T>::new(world.image_height, world.image_width);
    let to_f = |v: Vec<T>| v.into_iter().map(crate::scalar::f).collect::<Vec<f64>>();

    // subjects × scenes grid of instance embeddings
    let n_inst = 12;
    let mut grid: Vec<Vec<Vec<f64>>> = Vec::new();
    for i in 0..n_inst {
        let mut rng = stream(derive_indexed(seed, "gate/instance", i as u64));
        let class = &world.classes[i % world.classes.len()];
        let inst = InstanceSpec::random(&mut rng, class);
        let row = world
            .scenes
            .iter()
            .map(|s| Ok(to_f(emb.dino_embed(&render::<T>(world, &inst, s, rng.random())?)?)))
            .collect::<Result<Vec<_>>>()?;
        grid.push(row);
    }
    let (mut same_i, mut n_i, mut same_s, mut n_s) = (0.0, 0usize, 0.0, 0usize);
    for a in 0..n_inst {
        for s in 0..world.scenes.len() {
            for s2 in s + 1..world.scenes.len() {
                same_i += cosine_similarity(&grid[a][s], &grid[a][s2]);
                n_i += 1;
            }
            for b in a + 1..n_inst {
                same_s += cosine_similarity(&grid[a][s], &grid[b][s]);
                n_s += 1;
            }
        }
    }
    let dino_same_instance = if n_i > 0 { same_i / n_i as f64 } else { 1.0 };
    let dino_same_scene = if n_s > 0 { same_s / n_s as f64 } else { 0.0 };

    let held_out = 8;
    let (mut ok, mut total, mut min_margin) = (0usize, 0usize, f64::INFINITY);
    for class in &world.classes {
        let texts: Vec<Vec<f64>> = world
            .scenes
            .iter()
            .map(|s| Ok(calibration.lookup(class, s)?.iter().map(|&v| crate::scalar::f(v)).collect()))
            .collect::<Result<_>>()?;
        for (si, scene) in world.scenes.iter().enumerate() {
            let mut mean = vec![0.0; world.scenes.len()];
            for i in 0..held_out {
                let mut rng = stream(derive_indexed(seed, &format!("gate/clip/{class}/{scene}"), i as u64));
                let inst = InstanceSpec::random(&mut rng, class);
                let e = to_f(emb.clip_image_embed(&render::<T>(world, &inst, scene, rng.random())?)?);
                for (m, t) in mean.iter_mut().zip(&texts) {
                    *m += cosine_similarity(&e, t) / held_out as f64;
                }
            }
            for (sj, &m) in mean.iter().enumerate() {
                if sj != si {
                    total += 1;
                    let margin = mean[si] - m;
                    ok += (margin > 0.0) as usize;
                    min_margin = min_margin.min(margin);
                }
            }
        }
    }
    Ok(GateReport {
        dino_same_instance,
        dino_same_scene,
        clip_alignment: if total > 0 { ok as f64 / total as f64 } else { 1.0 },
        clip_min_margin: if total > 0 { min_margin } else { 0.0 },
    })
}

/// A validated world: spec, vocabulary and frozen text-side calibration.
#[derive(Debug, Clone)]
pub struct World<T> {
    pub spec: WorldSpec,
    pub vocab: Vocabulary,
    pub calibration: CalibrationTable<T>,
    pub gates: GateReport,
}

/// Builds the calibration table and refuses to return a world whose
/// embedders do not separate instances and scenes.
pub fn build_world<T: Scalar>(spec: WorldSpec, seed: u64) -> Result<World<T>> {
    spec.validate()?;
    let calibration = build_calibration(&spec, derive_seed(seed, "calibration"))?;
    let gates = measure_gates(&spec, &calibration, derive_seed(seed, "gates"))?;
    if !gates.passed() {
        return Err(Error::WorldGate(format!(
            "instance separation {:.4} vs {:.4}, scene alignment {:.3} (worst margin {:.4})",
            gates.dino_same_instance, gates.dino_same_scene, gates.clip_alignment, gates.clip_min_margin
        )));
    }
    Ok(World {
        vocab: spec.vocabulary()?,
        spec,
        calibration,
        gates,
    })
}

/// Prior pairs sampled from a frozen checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSet<T> {
    pub pairs: Vec<Pair<T>>,
    pub seed: u64,
    pub source: String,
}

/// `n` class-scene priors for `class`, cycling through `scenes`.
pub fn generate_priors<T: Scalar>(
    state: &ModelState<T>,
    world: &WorldSpec,
    class: &str,
    scenes: &[String],
    n: usize,
    sample_steps: usize,
    seed: u64,
    source: &str,
) -> Result<PriorSet<T>> {
    if n == 0 {
        return Err(Error::config("n_prior", "must be >= 1"));
    }
    if scenes.is_empty() {
        return Err(Error::config("scenes", "must not be empty"));
    }
    world.check_class(class)?;
    let mut prompts = Vec::with_capacity(scenes.len());
    for s in scenes {
        if !world.scenes.contains(s) {
            return Err(Error::Invalid(format!("unknown scene `{s}`")));
        }
        prompts.push(class_scene_text(&world.template(class).with_scene(Some(s)))?);
    }
    sample_prompts(state, &prompts, n, sample_steps, seed, source)
}

/// `n` scene-free class priors "a [class]" for the DreamBooth baseline.
pub fn generate_class_priors<T: Scalar>(
    state: &ModelState<T>,
    world: &WorldSpec,
    class: &str,
    n: usize,
    sample_steps: usize,
    seed: u64,
    source: &str,
) -> Result<PriorSet<T>> {
    if n == 0 {
        return Err(Error::config("n_prior", "must be >= 1"));
    }
    world.check_class(class)?;
    let prompt = class_text(&world.template(class))?;
    sample_prompts(state, &[prompt], n, sample_steps, seed, source)
}

fn sample_prompts<T: Scalar>(
    state: &ModelState<T>,
    prompts: &[Prompt],
    n: usize,
    sample_steps: usize,
    seed: u64,
    source: &str,
) -> Result<PriorSet<T>> {
    let pairs = (0..n)
        .map(|i| {
            let prompt = prompts[i % prompts.len()].clone();
            let item = derive_indexed(seed, "prior", i as u64);
            let image = generate(state, &prompt, sample_steps, item)?;
            Ok(Pair { image, prompt, seed: item })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PriorSet {
        pairs,
        seed,
        source: source.to_owned(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(class: &str, size: f64) -> InstanceSpec {
        InstanceSpec {
            class: class.into(),
            hue: 0.3,
            texture_phase: 0.1,
            size,
        }
    }

    #[test]
    fn render_is_deterministic() {
        let w = WorldSpec::default();
        let a = render::<f64>(&w, &inst("triangle", 0.9), "in the rain", 5).unwrap();
        let b = render::<f64>(&w, &inst("triangle", 0.9), "in the rain", 5).unwrap();
        assert_eq!(a, b);
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(render::<f64>(&w, &inst("triangle", 0.9), "in the TV", 5).is_err());
        assert!(render::<f64>(&w, &inst("dog", 0.9), "in the rain", 5).is_err());
    }

    #[test]
    fn zero_size_is_pure_background() {
        let w = WorldSpec::default();
        for scene in DEFAULT_SCENES {
            let a = render::<f64>(&w, &inst("circle", 0.0), scene, 9).unwrap();
            let b = render::<f64>(&w, &inst("cross", 0.0), scene, 9).unwrap();
            assert_eq!(a, b, "{scene}");
        }
    }

    #[test]
    fn grass_is_greener_than_snow() {
        let w = WorldSpec::default();
        let green = |scene: &str| {
            (0..32u64)
                .map(|s| {
                    let mut rng = stream(s);
                    let img = render::<f64>(&w, &InstanceSpec::random(&mut rng, "square"), scene, rng.random()).unwrap();
                    img.data.chunks(3).map(|p| p[1]).sum::<f64>() / 256.0
                })
                .sum::<f64>()
                / 32.0
        };
        assert!(green("on the grass") > green("in the snow"));
    }

    #[test]
    fn corpus_counts_and_determinism() {
        let w = WorldSpec::default();
        let a = build_pretrain_corpus::<f64>(&w, 2, 3).unwrap();
        assert_eq!(a.len(), 4 * 8 * 2);
        assert_eq!(a, build_pretrain_corpus::<f64>(&w, 2, 3).unwrap());
        for class in &w.classes {
            for scene in &w.scenes {
                let p = class_scene_text(&w.template(class).with_scene(Some(scene))).unwrap();
                assert!(a.iter().any(|x| x.prompt == p));
            }
        }
        assert!(build_pretrain_corpus::<f64>(&w, 0, 3).is_err());
    }

    #[test]
    fn default_world_passes_gates() {
        let world = build_world::<f64>(WorldSpec::default(), 0).unwrap();
        let g = &world.gates;
        assert!(g.dino_same_instance > g.dino_same_scene, "{g:?}");
        assert_eq!(g.clip_alignment, 1.0, "{g:?}");
        assert_eq!(world.calibration.keys.len(), 32);
    }

    #[test]
    fn calibration_row_is_mean_of_renders() {
        let w = WorldSpec {
            classes: vec!["circle".into()],
            scenes: vec!["in the sky".into()],
            calibration_count: 3,
            ..WorldSpec::default()
        };
        let table = build_calibration::<f64>(&w, 4).unwrap();
        let emb = Embedders::<f64>::new(16, 16);
        let mut mean = vec![0.0; crate::nets::CLIP_DIM];
        for i in 0..3 {
            let mut rng = stream(derive_indexed(4, "calibration/circle/in the sky", i));
            let inst = InstanceSpec::random(&mut rng, "circle");
            let e = emb.clip_image_embed(&render(&w, &inst, "in the sky", rng.random()).unwrap()).unwrap();
            for (m, v) in mean.iter_mut().zip(e) {
                *m += v / 3.0;
            }
        }
        for (a, b) in table.rows[0].iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn spec_validation() {
        let mut w = WorldSpec::default();
        assert!(w.validate().is_ok());
        w.identifier = "rain".into();
        assert!(w.validate().is_err());
        let w = WorldSpec {
            scenes: vec![],
            ..WorldSpec::default()
        };
        assert!(w.validate().is_err());
    }
}
