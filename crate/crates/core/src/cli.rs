//! Command-line front end. Each subcommand is a pipeline stage that reads
//! earlier stages' outputs from the run directory and writes its own under
//! a stage subdirectory, together with the effective config.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{instance_references, run_ablation_suite, run_benchmark, MetricsReport, Subject};
use crate::io::{
    checkpoint_id, load_checkpoint, load_priors, load_world, save_checkpoint, save_pairs, save_priors,
    save_tensor, save_world, write_atomic, write_json, write_ppm,
};
use crate::nets::ModelState;
use crate::prompts::Prompt;
use crate::rng::{derive_indexed, derive_seed};
use crate::sampler::generate;
use crate::trainer::{finetune, pretrain, FinetuneMode, InstanceSet, LogRow};
use crate::world::{
    benchmark_instances, build_pretrain_corpus, build_world, generate_class_priors, generate_priors, InstanceSpec,
};
use crate::Real;

#[derive(Debug, Parser)]
#[command(name = "comfusion", version, about = "Two-stream diffusion personalization on a toy image world")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// JSON run config; the desk preset when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed; every stage derives its own seed from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run directory shared by all stages.
    #[arg(long, default_value = "run")]
    pub run_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// World construction.
    World {
        #[command(subcommand)]
        action: WorldAction,
    },
    /// Build the corpus and pretrain the base model.
    Pretrain(Common),
    /// Sample class-scene and class-only prior sets from the base model.
    Priors(Common),
    /// Personalize the base model to each benchmark subject.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "comfusion")]
        mode: String,
    },
    /// Generate images from a checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Benchmark finetuned checkpoints.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "comfusion")]
        mode: String,
        /// Also write every generated image as a tensor file and a PPM.
        #[arg(long)]
        emit_images: Option<PathBuf>,
    },
    /// Run the eight-row ablation from the pretrained base.
    Ablate(Common),
}

#[derive(Debug, Subcommand)]
pub enum WorldAction {
    /// Calibrate the scene embeddings and check the separation gates.
    Build(Common),
}

/// Reads a config file; any problem with it is a config error naming the
/// file and, where known, the field path.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        None => RunConfig::desk(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::config(p.display().to_string(), e.to_string()))?;
            let de = &mut serde_json::Deserializer::from_str(&text);
            serde_path_to_error::deserialize(de).map_err(|e| {
                let field = e.path().to_string();
                Error::config(format!("{}: {field}", p.display()), e.into_inner().to_string())
            })?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Stage paths inside a run directory.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }
    pub fn world(&self) -> PathBuf {
        self.root.join("world")
    }
    pub fn pretrain(&self) -> PathBuf {
        self.root.join("pretrain")
    }
    pub fn base(&self) -> PathBuf {
        self.pretrain().join("checkpoint")
    }
    pub fn priors(&self, class: &str) -> PathBuf {
        self.root.join("priors").join("class-scene").join(class)
    }
    pub fn class_priors(&self, class: &str) -> PathBuf {
        self.root.join("priors").join("class").join(class)
    }
    pub fn finetune(&self, mode: FinetuneMode, class: &str) -> PathBuf {
        self.root.join("finetune").join(mode_name(mode)).join(class)
    }
    pub fn eval(&self, mode: FinetuneMode) -> PathBuf {
        self.root.join("eval").join(mode_name(mode))
    }
    pub fn ablation(&self) -> PathBuf {
        self.root.join("ablation")
    }
}

pub fn mode_name(mode: FinetuneMode) -> &'static str {
    match mode {
        FinetuneMode::Comfusion => "comfusion",
        FinetuneMode::Dreambooth => "dreambooth",
        FinetuneMode::InstanceOnly => "instance-only",
    }
}

fn echo_config(dir: &Path, cfg: &RunConfig, seed: u64) -> Result<()> {
    write_json(&dir.join("config.json"), cfg)?;
    write_atomic(&dir.join("seed.txt"), format!("{seed}\n").as_bytes())
}

fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r).expect("log row serializes"));
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}

fn subjects(cfg: &RunConfig, seed: u64) -> Vec<InstanceSpec> {
    benchmark_instances(&cfg.world, derive_seed(seed, "instances"))
}

pub fn stage_world(cfg: &RunConfig, seed: u64, run: &Layout) -> Result<()> {
    let world = build_world::<Real>(cfg.world.clone(), derive_seed(seed, "world"))?;
    save_world(&run.world(), &world)?;
    echo_config(&run.world(), cfg, seed)
}

pub fn stage_pretrain(cfg: &RunConfig, seed: u64, run: &Layout) -> Result<()> {
    let world = load_world::<Real>(&run.world())?;
    let corpus = build_pretrain_corpus::<Real>(&world.spec, cfg.pretrain.n_per_cell, derive_seed(seed, "corpus"))?;
    save_pairs(&run.pretrain().join("corpus"), &corpus)?;
    let state = ModelState::new(cfg.arch.clone(), cfg.schedule, world.vocab.clone(), &world.calibration)?;
    let mut log = Vec::new();
    let train_seed = derive_seed(seed, "pretrain");
    let state = pretrain(state, &corpus, &cfg.pretrain, train_seed, &mut |r: &LogRow| {
        log.push(*r);
        Ok(())
    })?;
    write_log(&run.pretrain().join("log.jsonl"), &log)?;
    let seeds = BTreeMap::from([
        ("corpus".to_string(), derive_seed(seed, "corpus")),
        ("init".to_string(), cfg.arch.init_seed),
        ("master".to_string(), seed),
        ("train".to_string(), train_seed),
    ]);
    save_checkpoint(&run.base(), &state, seeds, &cfg.hash())?;
    echo_config(&run.pretrain(), cfg, seed)
}

pub fn stage_priors(cfg: &RunConfig, seed: u64, run: &Layout) -> Result<()> {
    let (base, _) = load_checkpoint::<Real>(&run.base())?;
    let source = checkpoint_id(&run.base())?;
    let steps = cfg.eval.sample_steps;
    for inst in subjects(cfg, seed) {
        let class = &inst.class;
        let ps = generate_priors(
            &base,
            &cfg.world,
            class,
            &cfg.world.scenes,
            cfg.finetune.n_prior,
            steps,
            derive_seed(seed, &format!("priors/{class}")),
            &source,
        )?;
        save_priors(&run.priors(class), &ps)?;
        let cp = generate_class_priors(
            &base,
            &cfg.world,
            class,
            cfg.finetune.n_prior,
            steps,
            derive_seed(seed, &format!("class-priors/{class}")),
            &source,
        )?;
        save_priors(&run.class_priors(class), &cp)?;
    }
    echo_config(&run.root.join("priors"), cfg, seed)
}

pub fn stage_finetune(cfg: &RunConfig, seed: u64, run: &Layout, mode: FinetuneMode) -> Result<()> {
    let (base, _) = load_checkpoint::<Real>(&run.base())?;
    for inst in subjects(cfg, seed) {
        let class = &inst.class;
        let refs = instance_references(&cfg.world, &inst, cfg.finetune.n_instance, derive_seed(seed, "references"))?;
        let priors = match mode {
            FinetuneMode::Comfusion => Some(load_priors::<Real>(&run.priors(class))?),
            FinetuneMode::Dreambooth => Some(load_priors::<Real>(&run.class_priors(class))?),
            FinetuneMode::InstanceOnly => None,
        };
        let set = InstanceSet {
            template: cfg.world.template(class),
            images: refs,
        };
        let ft_seed = derive_seed(seed, &format!("finetune/{class}"));
        let out = finetune(&base, &set, priors.as_ref(), &cfg.finetune, mode, ft_seed)?;
        let dir = run.finetune(mode, class);
        write_log(&dir.join("log.jsonl"), &out.log)?;
        let seeds = BTreeMap::from([("master".to_string(), seed), ("train".to_string(), ft_seed)]);
        save_checkpoint(&dir.join("checkpoint"), &out.state, seeds, &cfg.hash())?;
        write_json(&dir.join("instance.json"), &inst)?;
    }
    echo_config(&run.root.join("finetune").join(mode_name(mode)), cfg, seed)
}

pub fn stage_eval(
    cfg: &RunConfig,
    seed: u64,
    run: &Layout,
    mode: FinetuneMode,
    emit: Option<&Path>,
) -> Result<MetricsReport> {
    let insts = subjects(cfg, seed);
    let mut states = Vec::new();
    for inst in &insts {
        states.push(load_checkpoint::<Real>(&run.finetune(mode, &inst.class).join("checkpoint"))?.0);
    }
    let mut subs = Vec::new();
    for (st, inst) in states.iter().zip(&insts) {
        subs.push(Subject {
            state: st,
            template: cfg.world.template(&inst.class),
            references: instance_references(&cfg.world, inst, cfg.finetune.n_instance, derive_seed(seed, "references"))?,
        });
    }
    let bench_seed = derive_seed(seed, "bench");
    let report = run_benchmark(
        &subs,
        &cfg.world.scenes,
        cfg.eval.images_per_cell,
        cfg.eval.sample_steps,
        bench_seed,
        &cfg.hash(),
    )?;
    let dir = run.eval(mode);
    write_json(&dir.join("metrics.json"), &report)?;
    echo_config(&dir, cfg, seed)?;
    if let Some(out) = emit {
        // same seeds as the benchmark, so these are the scored images
        for sub in &subs {
            let class = sub.template.class_noun.clone().unwrap_or_default();
            for scene in &cfg.world.scenes {
                let prompt = crate::prompts::instance_scene_text(&sub.template.with_scene(Some(scene)))?;
                for i in 0..cfg.eval.images_per_cell {
                    let s = derive_indexed(bench_seed, &format!("bench/{class}/{scene}"), i as u64);
                    let img = generate(sub.state, &prompt, cfg.eval.sample_steps, s)?;
                    let stem = format!("{class}_{}_{i}", scene.replace(' ', "-"));
                    save_tensor(&out.join(format!("{stem}.tensor")), &img.shape(), &img.data)?;
                    write_ppm(&out.join(format!("{stem}.ppm")), &img)?;
                }
            }
        }
    }
    Ok(report)
}

pub fn stage_ablate(cfg: &RunConfig, seed: u64, run: &Layout, progress: &mut dyn FnMut(&str)) -> Result<()> {
    let (base, _) = load_checkpoint::<Real>(&run.base())?;
    let source = checkpoint_id(&run.base())?;
    let mut cfg = cfg.clone();
    // the master seed offsets every ablation seed so distinct runs differ
    cfg.eval.ablation_seeds = cfg.eval.ablation_seeds.iter().map(|s| derive_indexed(seed, "ablation", *s)).collect();
    let table = run_ablation_suite(&base, &cfg, &source, progress)?;
    let dir = run.ablation();
    write_json(&dir.join("table.json"), &table)?;
    write_atomic(&dir.join("table.txt"), table.to_text().as_bytes())?;
    echo_config(&dir, &cfg, seed)
}

fn sample(cfg: &RunConfig, seed: u64, checkpoint: &Path, prompt: &str, n: usize, out: &Path) -> Result<()> {
    if n == 0 {
        return Err(Error::config("n", "must be >= 1"));
    }
    let (state, _) = load_checkpoint::<Real>(checkpoint)?;
    let prompt = Prompt::parse(prompt);
    let sample_seed = derive_seed(seed, "sampling");
    for i in 0..n {
        let img = generate(&state, &prompt, cfg.eval.sample_steps, derive_indexed(sample_seed, "sample", i as u64))?;
        save_tensor(&out.join(format!("{i:03}.tensor")), &img.shape(), &img.data)?;
        write_ppm(&out.join(format!("{i:03}.ppm")), &img)?;
    }
    echo_config(out, cfg, seed)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::World {
            action: WorldAction::Build(c),
        } => {
            let cfg = load_config(c.config.as_deref())?;
            stage_world(&cfg, c.seed, &Layout::new(&c.run_dir))
        }
        Command::Pretrain(c) => {
            let cfg = load_config(c.config.as_deref())?;
            stage_pretrain(&cfg, c.seed, &Layout::new(&c.run_dir))
        }
        Command::Priors(c) => {
            let cfg = load_config(c.config.as_deref())?;
            stage_priors(&cfg, c.seed, &Layout::new(&c.run_dir))
        }
        Command::Finetune { common: c, mode } => {
            let mode: FinetuneMode = mode.parse()?;
            let cfg = load_config(c.config.as_deref())?;
            stage_finetune(&cfg, c.seed, &Layout::new(&c.run_dir), mode)
        }
        Command::Sample {
            common: c,
            checkpoint,
            prompt,
            n,
            out,
        } => {
            let cfg = load_config(c.config.as_deref())?;
            sample(&cfg, c.seed, &checkpoint, &prompt, n, &out)
        }
        Command::Eval {
            common: c,
            mode,
            emit_images,
        } => {
            let mode: FinetuneMode = mode.parse()?;
            let cfg = load_config(c.config.as_deref())?;
            let r = stage_eval(&cfg, c.seed, &Layout::new(&c.run_dir), mode, emit_images.as_deref())?;
            println!("DINO {:.4}  CLIP-I {:.4}  CLIP-T {:.4}", r.dino, r.clip_i, r.clip_t);
            Ok(())
        }
        Command::Ablate(c) => {
            let cfg = load_config(c.config.as_deref())?;
            let run = Layout::new(&c.run_dir);
            stage_ablate(&cfg, c.seed, &run, &mut |s| eprintln!("{s}"))?;
            print!("{}", fs::read_to_string(run.ablation().join("table.txt")).map_err(|e| Error::io(run.ablation(), e))?);
            Ok(())
        }
    }
}

/// Parses `argv` and runs the subcommand. Returns the process exit code:
/// 0 on success, 1 for usage or config errors, 2 for runtime errors.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                1
            } else {
                2
            }
        }
    }
}
