//! Class-sequential training of the distilled student with latent replay,
//! checkpointing, and per-class evaluation.
//!
//! Every random draw comes from a stream keyed by the run seed, a label and
//! a counter (class/epoch for shuffling, micro-batch index for noise, class
//! index for buffer sampling), so a checkpoint only needs the counters to
//! resume bit-exactly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio::{self, ByteReader, ByteWriter, ContainerKind};
use crate::config::ExperimentConfig;
use crate::dataset;
use crate::diffusion::{make_scheduler, ConditioningTable, LatentBatch, LatentCodec, Scheduler};
use crate::distill::{distill_step, DistillHead, LossBreakdown, LossRecord, Objective, StepInputs};
use crate::error::{Error, Result};
use crate::metrics::{compute_report, MetricReport};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::pipeline::Pipeline;
use crate::replay::{compose_training_set, ReplayBuffer, ReplayPolicy, ReplaySample};
use crate::rng;
use crate::tensor::Tensor;
use crate::unet::{materialize, student_spec_with, transfer_weights, PruneOptions, UNet, UNetSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    Full,
    /// Activations rounded to `f32` after every op; parameters and
    /// optimizer state stay `f64`.
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Full,
    NoKd,
    NoReplay,
    Neither,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [TrainMode::Full, TrainMode::NoKd, TrainMode::NoReplay, TrainMode::Neither];

    pub fn objective(self) -> Objective {
        match self {
            TrainMode::Full | TrainMode::NoReplay => Objective::Distill,
            TrainMode::NoKd | TrainMode::Neither => Objective::MseOnly,
        }
    }

    pub fn uses_replay(self) -> bool {
        matches!(self, TrainMode::Full | TrainMode::NoKd)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Full => "full",
            TrainMode::NoKd => "no_kd",
            TrainMode::NoReplay => "no_replay",
            TrainMode::Neither => "neither",
        }
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Usage(format!("unknown mode `{s}`; expected one of full, no_kd, no_replay, neither")))
    }
}

fn default_lr() -> f64 {
    5e-5
}

fn default_one() -> usize {
    1
}

fn default_weight_decay() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub class_order: Vec<String>,
    /// Required: there is no principled default.
    pub epochs_per_class: usize,
    #[serde(default = "default_one")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_one")]
    pub grad_accum: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub distill: crate::distill::DistillConfig,
    pub buffer_capacity: usize,
    #[serde(default)]
    pub replay_policy: ReplayPolicy,
    #[serde(default)]
    pub precision: Precision,
    /// Accepted for config compatibility; activations are always kept.
    #[serde(default)]
    pub gradient_checkpointing: bool,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.class_order.is_empty() {
            return Err(Error::Config("class_order must name at least one class".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.class_order {
            if !seen.insert(c) {
                return Err(Error::Config(format!("class `{c}` appears twice in class_order")));
            }
        }
        for (name, v) in [
            ("epochs_per_class", self.epochs_per_class),
            ("batch_size", self.batch_size),
            ("grad_accum", self.grad_accum),
            ("buffer_capacity", self.buffer_capacity),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        self.distill.validate()
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// One class of training data, loaded and encoded.
#[derive(Debug, Clone)]
pub struct ClassData {
    pub name: String,
    pub cond_id: usize,
    /// `[N, 3, H, W]` in `[0, 1]`.
    pub images: Tensor,
    pub samples: Vec<ReplaySample>,
}

/// Everything a run needs besides the models.
pub struct TrainEnv {
    pub cfg: ExperimentConfig,
    pub run_dir: PathBuf,
    pub scheduler: Scheduler,
    pub codec: Box<dyn LatentCodec>,
    pub table: ConditioningTable,
    /// Training classes, then any teacher-only classes.
    pub classes: Vec<ClassData>,
    pub latent_shape: [usize; 3],
}

/// Class-prompt vocabulary: the training order, then teacher-only classes.
pub fn vocabulary(cfg: &ExperimentConfig) -> Vec<String> {
    let mut v = cfg.train.class_order.clone();
    for c in cfg.teacher.classes.iter().flatten() {
        if !v.contains(c) {
            v.push(c.clone());
        }
    }
    v
}

impl TrainEnv {
    /// Validates the config and loads every class folder up front, so a
    /// missing class fails before any training.
    pub fn new(cfg: ExperimentConfig, run_dir: &Path) -> Result<Self> {
        cfg.validate()?;
        let scheduler = make_scheduler(&cfg.scheduler)?;
        let codec = cfg.codec.build()?;
        let vocab = vocabulary(&cfg);
        let spec = cfg.model.original_spec();
        let table = ConditioningTable::with_template(
            &vocab,
            spec.context_dim,
            cfg.model.conditioning_seed,
            &cfg.model.prompt_template,
        )?;
        let mut classes = Vec::new();
        let mut latent_shape = None;
        let mut image_shape: Option<Vec<usize>> = None;
        for (id, name) in vocab.iter().enumerate() {
            let images = dataset::load_class(&cfg.paths.data_root, name)?;
            match &image_shape {
                Some(s) if s[..] != images.shape()[1..] => {
                    return Err(Error::Dataset(format!(
                        "class `{name}` has images of shape {:?}, expected {s:?}",
                        &images.shape()[1..]
                    )))
                }
                _ => image_shape = Some(images.shape()[1..].to_vec()),
            }
            let z = codec.encode(&images)?;
            latent_shape = Some([z.dim(1), z.dim(2), z.dim(3)]);
            let per = z.len() / z.dim(0);
            let mut samples = Vec::with_capacity(z.dim(0));
            for i in 0..z.dim(0) {
                let lat = Tensor::new(vec![z.dim(1), z.dim(2), z.dim(3)], z.data()[i * per..(i + 1) * per].to_vec())?;
                samples.push(ReplaySample::new(lat, id, id)?);
            }
            classes.push(ClassData {
                name: name.clone(),
                cond_id: id,
                images,
                samples,
            });
        }
        Ok(TrainEnv {
            cfg,
            run_dir: run_dir.to_path_buf(),
            scheduler,
            codec,
            table,
            classes,
            latent_shape: latent_shape.expect("vocabulary is non-empty"),
        })
    }

    pub fn class(&self, name: &str) -> Result<&ClassData> {
        self.classes
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::Dataset(format!("class `{name}` was not loaded")))
    }

    fn pipeline<'a>(&'a self, model: &'a UNet) -> Pipeline<'a> {
        Pipeline {
            model,
            scheduler: &self.scheduler,
            table: &self.table,
            codec: self.codec.as_ref(),
            latent_shape: self.latent_shape,
        }
    }

    /// Noised batch for samples `idx`; noise and timesteps come from the
    /// stream for micro-batch `micro`.
    fn make_batch(&self, data: &[ReplaySample], idx: &[usize], micro: u64, label: &str, seed: u64) -> Result<(LatentBatch, Tensor, Tensor)> {
        let mut r = rng::stream(seed, label, micro);
        let lat: Vec<Tensor> = idx.iter().map(|&i| data[i].latent.clone()).collect();
        let x0 = Tensor::stack(&lat)?;
        let cond: Vec<usize> = idx.iter().map(|&i| data[i].cond_id).collect();
        let t: Vec<usize> = (0..idx.len()).map(|_| r.random_range(0..self.scheduler.num_timesteps())).collect();
        let eps = Tensor::randn(x0.shape(), 1.0, &mut r);
        let ctx = self.table.context(&cond)?;
        Ok((LatentBatch::new(x0, cond, t)?, eps, ctx))
    }
}

/// Denoising MSE of `model` on fixed latents, averaged over `draws` noise
/// and timestep draws.
pub fn denoising_mse(env: &TrainEnv, model: &UNet, samples: &[ReplaySample], seed: u64, draws: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for d in 0..draws {
        for (c, chunk) in (0..samples.len()).collect::<Vec<_>>().chunks(32).enumerate() {
            let (batch, eps, ctx) = env.make_batch(samples, chunk, (d * 1_000_000 + c) as u64, "eval:mse", seed)?;
            let x_t = env.scheduler.add_noise_tensor(&batch.data, &eps, &batch.timestep)?;
            let pred = model.predict(&x_t, &batch.timestep, &ctx)?;
            total += pred.zip_map(&eps, |a, b| (a - b).powi(2))?.sum();
            count += eps.len();
        }
    }
    Ok(total / count as f64)
}

/// Trains `spec` from scratch on `samples` with the denoising objective.
pub fn pretrain_teacher(env: &TrainEnv, spec: &UNetSpec, samples: &[ReplaySample]) -> Result<UNet> {
    let tc = &env.cfg.teacher;
    let mut model = materialize(spec, tc.seed)?;
    let head = DistillHead::new(1, &model, &model, tc.seed)?;
    let mut opt = AdamW::new(AdamWConfig {
        lr: tc.learning_rate,
        ..AdamWConfig::default()
    });
    for step in 0..tc.pretrain_steps {
        let mut r = rng::stream(tc.seed, "teacher:batch", step as u64);
        let idx: Vec<usize> = (0..tc.batch_size).map(|_| r.random_range(0..samples.len())).collect();
        let (batch, eps, ctx) = env.make_batch(samples, &idx, step as u64, "teacher:noise", tc.seed)?;
        let inputs = StepInputs {
            batch: &batch,
            eps: &eps,
            scheduler: &env.scheduler,
            context: &ctx,
        };
        let out = distill_step(None, &model, &head, &inputs, &env.cfg.train.distill, Objective::MseOnly, false)?;
        opt.step(model.params_mut(), &out.grads);
        if (step + 1) % 50 == 0 {
            info!("teacher step {}: mse {:.5}", step + 1, out.losses.l_mse);
        }
    }
    model.set_trainable(false);
    Ok(model)
}

/// Prunes the teacher layout and copies every surviving tensor.
pub fn build_student(teacher: &UNet, prune: PruneOptions, seed: u64) -> Result<UNet> {
    let spec = student_spec_with(teacher.spec(), prune)?;
    let mut student = materialize(&spec, seed)?;
    transfer_weights(teacher, &mut student)?;
    Ok(student)
}

const MODEL_TAG: &str = "model";
const STATE_TAG: &str = "train-state";

pub fn save_model(path: &Path, model: &UNet) -> Result<()> {
    let mut w = ByteWriter::new(ContainerKind::Checkpoint);
    w.str(MODEL_TAG);
    w.str(&model.spec().to_toml()?);
    w.blob(&model.params().to_bytes());
    w.write_file(path)
}

pub fn load_model(path: &Path) -> Result<UNet> {
    let bytes = binio::read_file(path)?;
    let mut r = ByteReader::open(&bytes, ContainerKind::Checkpoint)?;
    let tag = r.str("tag")?;
    if tag != MODEL_TAG {
        return Err(r.error(format!("{} holds `{tag}`, expected a model", path.display())));
    }
    let spec = UNetSpec::from_toml(&r.str("spec")?)?;
    let params = ParamStore::from_bytes(r.blob("parameters")?)?;
    r.finish()?;
    UNet::from_parts(spec, params)
}

/// Resumable training state written at every class boundary.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// The exact config snapshot of the run and its SHA-256.
    pub config_toml: String,
    pub config_sha256: String,
    pub mode: TrainMode,
    pub classes_done: usize,
    /// Optimizer steps and micro-batches consumed so far.
    pub step: u64,
    pub micro_step: u64,
    pub teacher_fingerprint: String,
    pub latent_shape: [usize; 3],
    pub student: UNet,
    pub projection: ParamStore,
    pub optimizer: AdamW,
    pub projection_optimizer: AdamW,
    pub buffer: ReplayBuffer,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ByteWriter::new(ContainerKind::Checkpoint);
        w.str(STATE_TAG);
        w.str(&self.config_toml);
        w.str(&self.config_sha256);
        w.str(self.mode.as_str());
        w.u64(self.classes_done as u64);
        w.u64(self.step);
        w.u64(self.micro_step);
        w.str(&self.teacher_fingerprint);
        for d in self.latent_shape {
            w.u64(d as u64);
        }
        w.str(&self.student.spec().to_toml()?);
        w.blob(&self.student.params().to_bytes());
        w.blob(&self.projection.to_bytes());
        self.optimizer.write_state(&mut w);
        self.projection_optimizer.write_state(&mut w);
        w.blob(&self.buffer.to_bytes().into_bytes());
        w.write_file(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = binio::read_file(path)?;
        let mut r = ByteReader::open(&bytes, ContainerKind::Checkpoint)?;
        let tag = r.str("tag")?;
        if tag != STATE_TAG {
            return Err(r.error(format!("{} holds `{tag}`, expected a training checkpoint", path.display())));
        }
        let config_toml = r.str("config")?;
        let config_sha256 = r.str("config hash")?;
        if sha256_hex(config_toml.as_bytes()) != config_sha256 {
            return Err(r.error("embedded config does not match its hash"));
        }
        let mode = r.str("mode")?.parse()?;
        let classes_done = r.u64("classes done")? as usize;
        let step = r.u64("step")?;
        let micro_step = r.u64("micro step")?;
        let teacher_fingerprint = r.str("teacher fingerprint")?;
        let mut latent_shape = [0; 3];
        for d in &mut latent_shape {
            *d = r.u64("latent shape")? as usize;
        }
        let spec = UNetSpec::from_toml(&r.str("student spec")?)?;
        let student = UNet::from_parts(spec, ParamStore::from_bytes(r.blob("student")?)?)?;
        let projection = ParamStore::from_bytes(r.blob("projection")?)?;
        let cfg = ExperimentConfig::from_toml_str(&config_toml)?;
        let optimizer = AdamW::read_state(cfg.train.adamw(), &mut r)?;
        let projection_optimizer = AdamW::read_state(cfg.train.adamw(), &mut r)?;
        let buffer = ReplayBuffer::from_bytes(r.blob("buffer")?)?;
        r.finish()?;
        Ok(Checkpoint {
            config_toml,
            config_sha256,
            mode,
            classes_done,
            step,
            micro_step,
            teacher_fingerprint,
            latent_shape,
            student,
            projection,
            optimizer,
            projection_optimizer,
            buffer,
        })
    }

    pub fn config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::from_toml_str(&self.config_toml)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Standalone sampler rebuilt from a checkpoint: no dataset access needed.
pub struct Generator {
    pub student: UNet,
    pub scheduler: Scheduler,
    pub codec: Box<dyn LatentCodec>,
    pub table: ConditioningTable,
    pub latent_shape: [usize; 3],
}

impl Generator {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = ckpt.config()?;
        let table = ConditioningTable::with_template(
            &vocabulary(&cfg),
            ckpt.student.spec().context_dim,
            cfg.model.conditioning_seed,
            &cfg.model.prompt_template,
        )?;
        Ok(Generator {
            student: ckpt.student.clone(),
            scheduler: make_scheduler(&cfg.scheduler)?,
            codec: cfg.codec.build()?,
            table,
            latent_shape: ckpt.latent_shape,
        })
    }

    /// Deterministic `[1, 3, H, W]` image for a class name or prompt.
    pub fn generate(&self, prompt: &str, steps: usize, seed: u64) -> Result<Tensor> {
        generate(&self.student, &self.scheduler, &self.table, self.codec.as_ref(), self.latent_shape, prompt, steps, seed)
    }
}

/// One image from `student` via the sampler and the latent decoder.
#[allow(clippy::too_many_arguments)]
pub fn generate(
    student: &UNet,
    scheduler: &Scheduler,
    table: &ConditioningTable,
    codec: &dyn LatentCodec,
    latent_shape: [usize; 3],
    prompt: &str,
    steps: usize,
    seed: u64,
) -> Result<Tensor> {
    Pipeline {
        model: student,
        scheduler,
        table,
        codec,
        latent_shape,
    }
    .generate(prompt, steps, seed)
}

/// Options that do not change what a run computes.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub resume: Option<PathBuf>,
    /// Stop after this many classes, as if interrupted.
    pub stop_after_class: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub mode: TrainMode,
    pub optimizer_steps: u64,
    pub classes_done: usize,
    /// Aggregate report after each class trained in this invocation.
    pub reports: Vec<(usize, MetricReport)>,
    pub buffer: ReplayBuffer,
    pub student: UNet,
}

pub fn checkpoint_path(run_dir: &Path, k: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("class_{k}.ckpt"))
}

pub const LOSS_LOG: &str = "losses.jsonl";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const CONFIG_HASH_FILE: &str = "config.toml.sha256";

/// Optimizer steps a class contributes given its training-set size.
pub fn steps_for(train_len: usize, cfg: &TrainConfig) -> u64 {
    let micro = train_len.div_ceil(cfg.batch_size);
    (cfg.epochs_per_class * micro.div_ceil(cfg.grad_accum)) as u64
}

/// Writes the config snapshot and its hash, or verifies them on resume.
fn prepare_run_dir(env: &TrainEnv, resuming: bool) -> Result<String> {
    let dir = &env.run_dir;
    for sub in ["checkpoints", "metrics", "samples"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let text = env.cfg.to_toml()?;
    let hash = sha256_hex(text.as_bytes());
    let snap = dir.join(CONFIG_SNAPSHOT);
    if resuming && snap.exists() {
        let existing = fs::read_to_string(&snap).map_err(|e| Error::io(&snap, e))?;
        if sha256_hex(existing.as_bytes()) != hash {
            return Err(Error::Config(format!(
                "{} differs from the config being resumed",
                snap.display()
            )));
        }
    } else {
        let log = dir.join(LOSS_LOG);
        if !resuming && log.metadata().map(|m| m.len() > 0).unwrap_or(false) {
            return Err(Error::Usage(format!(
                "{} already holds a run; resume it or choose another run directory",
                dir.display()
            )));
        }
        fs::write(&snap, &text).map_err(|e| Error::io(&snap, e))?;
        let hp = dir.join(CONFIG_HASH_FILE);
        fs::write(&hp, format!("{hash}  {CONFIG_SNAPSHOT}\n")).map_err(|e| Error::io(&hp, e))?;
    }
    Ok(hash)
}

/// Checks a run directory's snapshot against its recorded hash.
pub fn verify_snapshot(run_dir: &Path) -> Result<String> {
    let snap = run_dir.join(CONFIG_SNAPSHOT);
    let text = fs::read(&snap).map_err(|e| Error::io(&snap, e))?;
    let hp = run_dir.join(CONFIG_HASH_FILE);
    let recorded = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
    let recorded = recorded.split_whitespace().next().unwrap_or_default();
    let actual = sha256_hex(&text);
    if recorded != actual {
        return Err(Error::Validation(format!(
            "config snapshot hash {actual} does not match recorded {recorded}"
        )));
    }
    Ok(actual)
}

/// Keeps only records with `step <= keep_through`.
fn truncate_log(path: &Path, keep_through: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let rec: LossRecord = serde_json::from_str(line)?;
        if rec.step <= keep_through {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, kept).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct LossLog {
    file: fs::File,
    path: PathBuf,
}

impl LossLog {
    fn open(path: &Path) -> Result<Self> {
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(LossLog {
            file,
            path: path.to_path_buf(),
        })
    }

    fn write(&mut self, rec: &LossRecord) -> Result<()> {
        let line = serde_json::to_string(rec)? + "\n";
        self.file.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Default)]
struct LossSums {
    soft: f64,
    hard: f64,
    feature: f64,
    mse: f64,
    total: f64,
    distill: bool,
    n: usize,
}

impl LossSums {
    fn add(&mut self, l: &LossBreakdown) {
        self.soft += l.l_soft.unwrap_or(0.0);
        self.hard += l.l_hard.unwrap_or(0.0);
        self.feature += l.l_feature.unwrap_or(0.0);
        self.distill = l.l_soft.is_some();
        self.mse += l.l_mse;
        self.total += l.total;
        self.n += 1;
    }

    fn mean(&self) -> LossBreakdown {
        let n = self.n as f64;
        let opt = |v: f64| self.distill.then_some(v / n);
        LossBreakdown {
            l_soft: opt(self.soft),
            l_hard: opt(self.hard),
            l_feature: opt(self.feature),
            l_mse: self.mse / n,
            total: self.total / n,
        }
    }
}

fn accumulate(acc: &mut IndexMap<String, Tensor>, grads: IndexMap<String, Tensor>) -> Result<()> {
    for (k, g) in grads {
        match acc.get_mut(&k) {
            Some(a) => {
                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += y;
                }
            }
            None => {
                acc.insert(k, g);
            }
        }
    }
    Ok(())
}

struct State {
    student: UNet,
    head: DistillHead,
    optimizer: AdamW,
    projection_optimizer: AdamW,
    buffer: ReplayBuffer,
    classes_done: usize,
    step: u64,
    micro: u64,
}

/// Full method: distillation plus latent replay.
pub fn train_continual(env: &TrainEnv, teacher: &UNet, student: UNet, opts: &RunOptions) -> Result<RunOutcome> {
    run(env, Some(teacher), student, TrainMode::Full, opts)
}

/// The same loop with distillation and/or replay disabled. `teacher` is
/// required only when distillation stays on.
pub fn train_baseline(env: &TrainEnv, teacher: Option<&UNet>, student: UNet, mode: TrainMode, opts: &RunOptions) -> Result<RunOutcome> {
    run(env, teacher, student, mode, opts)
}

fn run(env: &TrainEnv, teacher: Option<&UNet>, student: UNet, mode: TrainMode, opts: &RunOptions) -> Result<RunOutcome> {
    let tc = &env.cfg.train;
    if mode.objective() == Objective::Distill && teacher.is_none() {
        return Err(Error::Usage(format!("mode {} needs a teacher model", mode.as_str())));
    }
    if tc.gradient_checkpointing {
        warn!("gradient_checkpointing has no effect: activations are always kept for the backward pass");
    }
    let teacher_fp = teacher.map(|t| t.params().fingerprint()).unwrap_or_default();
    let resume = match &opts.resume {
        Some(p) => Some(Checkpoint::load(p)?),
        None => None,
    };
    let config_hash = prepare_run_dir(env, resume.is_some())?;
    let capacity = if mode.uses_replay() { tc.buffer_capacity } else { 0 };
    let head_ref = teacher.unwrap_or(&student);
    let head = DistillHead::new(env.table.vocab().len(), head_ref, &student, tc.seed)?;

    let mut st = State {
        student,
        head,
        optimizer: AdamW::new(tc.adamw()),
        projection_optimizer: AdamW::new(tc.adamw()),
        buffer: ReplayBuffer::new(capacity, tc.replay_policy),
        classes_done: 0,
        step: 0,
        micro: 0,
    };
    if let Some(ck) = resume {
        if ck.config_sha256 != config_hash {
            return Err(Error::Config("checkpoint was written by a different config".into()));
        }
        if ck.mode != mode {
            return Err(Error::Config(format!(
                "checkpoint was written in mode {}, not {}",
                ck.mode.as_str(),
                mode.as_str()
            )));
        }
        if ck.teacher_fingerprint != teacher_fp {
            return Err(Error::Validation("teacher weights differ from the checkpointed run".into()));
        }
        if ck.student.spec() != st.student.spec() {
            return Err(Error::Config("checkpointed student layout differs from the configured one".into()));
        }
        *st.head.projection_mut() = ck.projection;
        st.student = ck.student;
        st.optimizer = ck.optimizer;
        st.projection_optimizer = ck.projection_optimizer;
        st.buffer = ck.buffer;
        st.classes_done = ck.classes_done;
        st.step = ck.step;
        st.micro = ck.micro_step;
        truncate_log(&env.run_dir.join(LOSS_LOG), st.step)?;
        info!("resuming after class {} at step {}", st.classes_done, st.step);
    }
    st.student.set_trainable(true);

    let mut log = LossLog::open(&env.run_dir.join(LOSS_LOG))?;
    let objective = mode.objective();
    let mut reports = Vec::new();
    let n_classes = tc.class_order.len();
    let stop = opts.stop_after_class.unwrap_or(n_classes).min(n_classes);
    while st.classes_done < stop {
        let ci = st.classes_done;
        let class = env.class(&tc.class_order[ci])?;
        let train_set = compose_training_set(&class.samples, &st.buffer, rng::derive_seed(tc.seed, "train:compose", ci as u64));
        info!(
            "class {} ({}): {} current + {} replayed samples",
            ci + 1,
            class.name,
            class.samples.len(),
            train_set.len() - class.samples.len()
        );
        for epoch in 0..tc.epochs_per_class {
            let mut order: Vec<usize> = (0..train_set.len()).collect();
            order.shuffle(&mut rng::stream(tc.seed, "train:shuffle", ((ci as u64) << 32) | epoch as u64));
            let micro_batches: Vec<&[usize]> = order.chunks(tc.batch_size).collect();
            for group in micro_batches.chunks(tc.grad_accum) {
                let mut grads = IndexMap::new();
                let mut sums = LossSums::default();
                for idx in group {
                    let (batch, eps, ctx) = env.make_batch(&train_set, idx, st.micro, "train:noise", tc.seed)?;
                    st.micro += 1;
                    let inputs = StepInputs {
                        batch: &batch,
                        eps: &eps,
                        scheduler: &env.scheduler,
                        context: &ctx,
                    };
                    let out = distill_step(
                        teacher,
                        &st.student,
                        &st.head,
                        &inputs,
                        &tc.distill,
                        objective,
                        tc.precision == Precision::Mixed,
                    )?;
                    sums.add(&out.losses);
                    accumulate(&mut grads, out.grads)?;
                }
                let inv = 1.0 / group.len() as f64;
                for g in grads.values_mut() {
                    *g = g.scale(inv);
                }
                st.optimizer.step(st.student.params_mut(), &grads);
                st.projection_optimizer.step(st.head.projection_mut(), &grads);
                st.step += 1;
                let losses = sums.mean();
                if !losses.total.is_finite() {
                    return Err(Error::Numerical(format!("non-finite loss at step {}", st.step)));
                }
                log.write(&LossRecord {
                    step: st.step,
                    class: class.name.clone(),
                    losses,
                })?;
            }
        }
        st.buffer
            .ingest_class(&class.samples, rng::derive_seed(tc.seed, "train:buffer", ci as u64))?;
        st.buffer.save(&env.run_dir.join("buffer.bin"))?;
        st.classes_done += 1;
        let k = st.classes_done;
        if env.cfg.eval.enabled {
            let report = evaluate_seen(env, &st.student, k)?;
            reports.push((k, report));
        }
        let ck = Checkpoint {
            config_toml: env.cfg.to_toml()?,
            config_sha256: config_hash.clone(),
            mode,
            classes_done: k,
            step: st.step,
            micro_step: st.micro,
            teacher_fingerprint: teacher_fp.clone(),
            latent_shape: env.latent_shape,
            student: st.student.clone(),
            projection: st.head.projection().clone(),
            optimizer: st.optimizer.clone(),
            projection_optimizer: st.projection_optimizer.clone(),
            buffer: st.buffer.clone(),
        };
        ck.save(&checkpoint_path(&env.run_dir, k))?;
        info!("class {k} done at step {}", st.step);
    }
    if let Some(t) = teacher {
        if t.params().fingerprint() != teacher_fp {
            return Err(Error::Validation("teacher weights changed during training".into()));
        }
    }
    Ok(RunOutcome {
        run_dir: env.run_dir.clone(),
        mode,
        optimizer_steps: st.step,
        classes_done: st.classes_done,
        reports,
        buffer: st.buffer,
        student: st.student,
    })
}

/// `count` generated images of one class, `[count, 3, H, W]`.
pub fn sample_class(env: &TrainEnv, model: &UNet, class: &ClassData, count: usize, steps: usize, seed: u64) -> Result<Tensor> {
    let p = env.pipeline(model);
    let mut parts = Vec::new();
    let mut done = 0;
    let mut chunk = 0u64;
    while done < count {
        let n = (count - done).min(32);
        let s = rng::derive_seed(seed, &format!("eval:class:{}", class.name), chunk);
        let z = p.sample_latents(&vec![class.cond_id; n], steps, s)?;
        parts.push(env.codec.decode(&z)?.map(|v| v.clamp(0.0, 1.0)));
        done += n;
        chunk += 1;
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Tensor::concat_rows(&refs)
}

/// Reports after class `k`: one per seen class under `metrics/class_<k>/`
/// and an aggregate over all seen classes in `metrics/class_<k>.json`.
fn evaluate_seen(env: &TrainEnv, model: &UNet, k: usize) -> Result<MetricReport> {
    let ec = &env.cfg.eval;
    let dir = env.run_dir.join("metrics").join(format!("class_{k}"));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let sdir = env.run_dir.join("samples").join(format!("class_{k}"));
    fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
    let (mut reals, mut gens, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for name in &env.cfg.train.class_order[..k] {
        let class = env.class(name)?;
        let gen = sample_class(env, model, class, ec.samples_per_class, ec.sampling_steps, ec.seed)?;
        let lab = vec![Some(name.clone()); gen.dim(0)];
        let report = compute_report(&class.images, &gen, &lab, &env.cfg.metrics)?;
        let path = dir.join(format!("{name}.json"));
        fs::write(&path, report.to_json()?).map_err(|e| Error::io(&path, e))?;
        for i in 0..ec.saved_samples.min(gen.dim(0)) {
            let img = gen.select_rows(&[i]).reshape(&gen.shape()[1..])?;
            dataset::save_png(&sdir.join(format!("{name}_{i}.png")), &img)?;
        }
        reals.push(class.images.clone());
        gens.push(gen);
        labels.extend(lab);
    }
    let r: Vec<&Tensor> = reals.iter().collect();
    let g: Vec<&Tensor> = gens.iter().collect();
    let report = compute_report(&Tensor::concat_rows(&r)?, &Tensor::concat_rows(&g)?, &labels, &env.cfg.metrics)?;
    let path = env.run_dir.join("metrics").join(format!("class_{k}.json"));
    fs::write(&path, report.to_json()?).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

/// Loads or pretrains the teacher for `env`, caching it as `teacher.ckpt`
/// in the run directory.
pub fn obtain_teacher(env: &TrainEnv) -> Result<UNet> {
    let spec = env.cfg.model.original_spec();
    let mut teacher = if let Some(p) = &env.cfg.teacher.checkpoint {
        load_model(p)?
    } else {
        let cached = env.run_dir.join("teacher.ckpt");
        if cached.exists() {
            load_model(&cached)?
        } else {
            let names = env.cfg.teacher.classes.clone().unwrap_or_else(|| env.cfg.train.class_order.clone());
            let mut samples = Vec::new();
            for n in &names {
                samples.extend(env.class(n)?.samples.iter().cloned());
            }
            info!("pretraining teacher on {} samples", samples.len());
            let t = pretrain_teacher(env, &spec, &samples)?;
            fs::create_dir_all(&env.run_dir).map_err(|e| Error::io(&env.run_dir, e))?;
            save_model(&cached, &t)?;
            t
        }
    };
    if teacher.spec() != &spec {
        return Err(Error::Config("teacher checkpoint layout differs from the configured model".into()));
    }
    teacher.set_trainable(false);
    Ok(teacher)
}

/// End-to-end run: data, teacher, student, training loop.
pub fn run_experiment(cfg: ExperimentConfig, mode: TrainMode, run_dir: &Path, opts: &RunOptions) -> Result<RunOutcome> {
    let env = TrainEnv::new(cfg, run_dir)?;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let teacher = obtain_teacher(&env)?;
    let student = build_student(&teacher, env.cfg.model.prune(), env.cfg.model.init_seed)?;
    match mode {
        TrainMode::Full => train_continual(&env, &teacher, student, opts),
        m if m.objective() == Objective::Distill => train_baseline(&env, Some(&teacher), student, m, opts),
        m => train_baseline(&env, None, student, m, opts),
    }
}

/// Reads every record of a loss log.
pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
