//! Experiment configuration: one TOML file with a schema version, unknown
//! keys rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{CodecConfig, SchedulerConfig, DEFAULT_PROMPT_TEMPLATE};
use crate::error::{Error, Result};
use crate::metrics::MetricsConfig;
use crate::trainer::TrainConfig;
use crate::unet::{original_spec, DropPosition, PruneOptions, Scale, UNetSpec};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub train: TrainConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub teacher: TeacherConfig,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default)]
    pub codec: CodecConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    pub paths: PathsConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub scale: Scale,
    pub down_drop: DropPosition,
    pub up_drop: DropPosition,
    /// Seed for student tensors that the teacher cannot supply.
    pub init_seed: u64,
    pub conditioning_seed: u64,
    pub prompt_template: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let p = PruneOptions::default();
        ModelConfig {
            scale: Scale::Toy,
            down_drop: p.down_drop,
            up_drop: p.up_drop,
            init_seed: 0,
            conditioning_seed: 0,
            prompt_template: DEFAULT_PROMPT_TEMPLATE.to_string(),
        }
    }
}

impl ModelConfig {
    pub fn original_spec(&self) -> UNetSpec {
        original_spec(self.scale)
    }

    pub fn prune(&self) -> PruneOptions {
        PruneOptions {
            down_drop: self.down_drop,
            up_drop: self.up_drop,
        }
    }
}

/// Where the teacher comes from: a saved model, or denoising pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub checkpoint: Option<PathBuf>,
    pub pretrain_steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Pretraining classes; defaults to the training class order.
    pub classes: Option<Vec<String>>,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            checkpoint: None,
            pretrain_steps: 200,
            learning_rate: 1e-3,
            batch_size: 8,
            seed: 0,
            classes: None,
        }
    }
}

/// Evaluation at every class boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub enabled: bool,
    pub samples_per_class: usize,
    pub sampling_steps: usize,
    pub seed: u64,
    /// Generated images written to `samples/` per class.
    pub saved_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            enabled: true,
            samples_per_class: 32,
            sampling_steps: 20,
            seed: 0,
            saved_samples: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub data_root: PathBuf,
    #[serde(default = "default_output_root")]
    pub output_root: PathBuf,
    #[serde(default = "default_run_name")]
    pub run_name: String,
}

fn default_output_root() -> PathBuf {
    PathBuf::from("runs")
}

fn default_run_name() -> String {
    "run".to_string()
}

impl ExperimentConfig {
    /// Parses and validates; the schema version is checked before any
    /// other field so old files fail with a clear message.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: toml::Table = toml::from_str(text)?;
        match raw.get("schema_version") {
            None => return Err(Error::Config("missing schema_version".into())),
            Some(toml::Value::Integer(v)) if *v == SCHEMA_VERSION as i64 => {}
            Some(v) => {
                return Err(Error::Config(format!(
                    "unsupported schema_version {v}; this build reads version {SCHEMA_VERSION}"
                )))
            }
        }
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.paths.data_root);
        resolve(&mut cfg.paths.output_root);
        if let Some(c) = cfg.teacher.checkpoint.as_mut() {
            resolve(c);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!("unsupported schema_version {}", self.schema_version)));
        }
        self.train.validate()?;
        self.scheduler.validate()?;
        if self.codec.factor == 0 {
            return Err(Error::Config("codec factor must be positive".into()));
        }
        let t = &self.teacher;
        if t.checkpoint.is_none() && (t.pretrain_steps == 0 || t.batch_size == 0) {
            return Err(Error::Config("teacher pretraining needs positive steps and batch size".into()));
        }
        if !(t.learning_rate.is_finite() && t.learning_rate > 0.0) {
            return Err(Error::Config("teacher learning_rate must be positive".into()));
        }
        if matches!(&t.classes, Some(c) if c.is_empty()) {
            return Err(Error::Config("teacher classes must not be empty".into()));
        }
        if self.eval.enabled && (self.eval.samples_per_class < 2 || self.eval.sampling_steps == 0) {
            return Err(Error::Config("evaluation needs at least 2 samples per class and 1 sampling step".into()));
        }
        if self.paths.run_name.is_empty() || self.paths.run_name.contains(['/', '\\']) {
            return Err(Error::Config(format!("invalid run_name `{}`", self.paths.run_name)));
        }
        crate::unet::student_spec_with(&self.model.original_spec(), self.model.prune())?;
        Ok(())
    }

    /// `output_root / run_name`, with `output_root` replaced by `override_root`
    /// when given.
    pub fn run_dir(&self, override_root: Option<&Path>) -> PathBuf {
        override_root.unwrap_or(&self.paths.output_root).join(&self.paths.run_name)
    }
}
