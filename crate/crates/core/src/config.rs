//! Run configuration: one JSON document describing a full pipeline run,
//! with dotted-key overrides and a content digest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::StudentConfig;
use crate::grpo::GrpoConfig;
use crate::pipeline::{GenerateConfig, LabelConfig, PretrainConfig};
use crate::prompt::TemplateKind;
use crate::rng::derive_seed;
use crate::selection::Normalization;
use crate::student::{GenerationConfig, ModelShape};
use crate::task::ToyTaskConfig;

/// How the training set is drawn from generated data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Generate exactly `n` samples and train on all of them.
    #[default]
    None,
    /// Generate `pool_size` samples and keep a uniform subset of `n`.
    Random,
    /// Generate `pool_size` samples and keep the `n` best by mean
    /// normalized acquisition score.
    Filtered,
}

/// Dataset construction settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSettings {
    /// Training-set size.
    pub n: usize,
    /// Generated pool size for the selection baselines.
    pub pool_size: usize,
    pub selection: SelectionMode,
    pub normalization: Normalization,
    pub generate: GenerateConfig,
    pub label: LabelConfig,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        PipelineSettings {
            n: 200,
            pool_size: 400,
            selection: SelectionMode::None,
            normalization: Normalization::MinMax,
            generate: GenerateConfig {
                generation: GenerationConfig {
                    max_new_symbols: 100,
                    ..GenerationConfig::default()
                },
                ..GenerateConfig::default()
            },
            label: LabelConfig::default(),
        }
    }
}

/// Filesystem locations.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Output root; `ACQSYNTH_OUT` takes precedence.
    pub out_dir: Option<PathBuf>,
    /// Checkpoint used as the base model instead of warm-start pretraining.
    pub base_checkpoint: Option<PathBuf>,
}

/// Everything one run needs. The `seed` fields of nested sections are
/// ignored: every stage seed is derived from an entry of `seeds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Method label used in reports and summary tables.
    pub name: String,
    /// One run per seed. Required.
    pub seeds: Vec<u64>,
    #[serde(default = "desk_task")]
    pub task: ToyTaskConfig,
    #[serde(default)]
    pub template: TemplateKind,
    #[serde(default = "desk_shape")]
    pub model: ModelShape,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default = "desk_generator")]
    pub generator: GrpoConfig,
    #[serde(default)]
    pub pipeline: PipelineSettings,
    #[serde(default)]
    pub eval: StudentConfig,
    #[serde(default)]
    pub paths: Paths,
}

/// Single-digit operands and one operator: the scale at which the toy
/// model learns the task format in seconds.
pub fn desk_task() -> ToyTaskConfig {
    ToyTaskConfig {
        min_operand: 0,
        max_operand: 9,
        min_operators: 1,
        max_operators: 1,
        train_size: 150,
        test_size: 100,
        ..ToyTaskConfig::default()
    }
}

pub fn desk_shape() -> ModelShape {
    ModelShape {
        window: 32,
        embed: 16,
        hidden: 64,
    }
}

pub fn desk_generator() -> GrpoConfig {
    GrpoConfig {
        generation: GenerationConfig {
            max_new_symbols: 100,
            ..GenerationConfig::default()
        },
        ..GrpoConfig::default()
    }
}

/// Per-stage seeds derived from one run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSeeds {
    pub init: u64,
    pub pretrain: u64,
    pub generator: u64,
    pub generate: u64,
    pub label: u64,
    pub select: u64,
    pub student: u64,
}

impl StageSeeds {
    pub fn new(run_seed: u64) -> Self {
        let s = |k: u64| derive_seed(run_seed, &[k]);
        StageSeeds {
            init: s(0),
            pretrain: s(1),
            generator: s(2),
            generate: s(3),
            label: s(4),
            select: s(5),
            student: s(6),
        }
    }
}

impl RunConfig {
    /// A config with desk-scale defaults.
    pub fn new(name: impl Into<String>, seeds: Vec<u64>) -> Self {
        RunConfig {
            name: name.into(),
            seeds,
            task: desk_task(),
            template: TemplateKind::default(),
            model: desk_shape(),
            pretrain: PretrainConfig::default(),
            generator: desk_generator(),
            pipeline: PipelineSettings::default(),
            eval: StudentConfig::default(),
            paths: Paths::default(),
        }
    }

    /// Parses a JSON document, applies `--key value` overrides, and
    /// validates the result.
    pub fn from_json(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let doc: Value = serde_json::from_str(text).map_err(|e| Error::config("<root>", e.to_string()))?;
        Self::from_document(doc, overrides)
    }

    /// [`RunConfig::from_json`] on an already parsed document.
    pub fn from_document(mut doc: Value, overrides: &[(String, String)]) -> Result<Self> {
        apply_overrides(&mut doc, overrides)?;
        let cfg = from_value(doc)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[(String, String)]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        Self::from_json(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if self.name.trim().is_empty() {
            return Err(Error::config("name", "must not be empty"));
        }
        if self.model.window == 0 || self.model.embed == 0 || self.model.hidden == 0 {
            return Err(Error::config("model", "window, embed and hidden must be positive"));
        }
        self.generator.validate()?;
        let p = &self.pipeline;
        if p.n == 0 {
            return Err(Error::config("pipeline.n", "must be positive"));
        }
        if p.selection != SelectionMode::None && p.pool_size < p.n {
            return Err(Error::config("pipeline.pool_size", "must be at least pipeline.n"));
        }
        if p.generate.attempt_factor == 0 {
            return Err(Error::config("pipeline.generate.attempt_factor", "must be positive"));
        }
        if p.label.n == 0 {
            return Err(Error::config("pipeline.label.n", "must be positive"));
        }
        if !(self.eval.learning_rate >= 0.0) {
            return Err(Error::config("eval.learning_rate", "must be nonnegative"));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::config("eval.batch_size", "must be positive"));
        }
        if let Some(ckpt) = &self.paths.base_checkpoint {
            if !ckpt.is_file() {
                return Err(Error::config("paths.base_checkpoint", format!("{} does not exist", ckpt.display())));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, excluding the output
    /// directory.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.paths.out_dir = None;
        digest_json(&c)
    }

    /// Output root: `ACQSYNTH_OUT`, then `paths.out_dir`, then `runs`.
    pub fn out_root(&self) -> PathBuf {
        std::env::var_os("ACQSYNTH_OUT")
            .map(PathBuf::from)
            .or_else(|| self.paths.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    /// Per-run artifact directory named by the config digest.
    pub fn run_dir(&self) -> PathBuf {
        self.out_root().join(&self.digest()[..16])
    }
}

/// Hex SHA-256 of a value's JSON serialization.
pub fn digest_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config values serialize");
    let out = Sha256::digest(&bytes);
    out.iter().map(|b| format!("{b:02x}")).collect()
}

fn from_value(doc: Value) -> Result<RunConfig> {
    serde_path_to_error::deserialize(doc).map_err(|e| {
        let path = e.path().to_string();
        let key = if path == "." { "<root>".to_string() } else { path };
        let msg = e.inner().to_string();
        let key = missing_field(&msg).map(|f| if key == "<root>" { f.to_string() } else { format!("{key}.{f}") }).unwrap_or(key);
        Error::config(key, msg)
    })
}

fn missing_field(msg: &str) -> Option<&str> {
    msg.strip_prefix("missing field `")?.split('`').next()
}

/// Sets dotted keys in `doc`. Keys must name fields of [`RunConfig`];
/// values are parsed as JSON, falling back to a plain string.
pub fn apply_overrides(doc: &mut Value, overrides: &[(String, String)]) -> Result<()> {
    if overrides.is_empty() {
        return Ok(());
    }
    let template = serde_json::to_value(RunConfig::new("x", vec![0])).expect("config serializes");
    for (key, raw) in overrides {
        let parts: Vec<&str> = key.split('.').collect();
        let mut shape = &template;
        for p in &parts {
            shape = shape
                .get(p)
                .ok_or_else(|| Error::config(key.clone(), "no such config key"))?;
        }
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
        let mut slot = &mut *doc;
        for p in &parts {
            if !slot.is_object() {
                return Err(Error::config(key.clone(), "parent is not an object"));
            }
            slot = slot
                .as_object_mut()
                .expect("checked above")
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Default::default()));
        }
        *slot = value;
    }
    Ok(())
}
