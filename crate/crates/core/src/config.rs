//! Run configuration: a TOML document with `stream`, `model`, `optimizer`,
//! `ella` and `output` sections plus a top-level `seed`.
//!
//! Unknown keys are rejected everywhere. Dotted-key overrides
//! (`ella.epsilon=1e-6`) are applied to the parsed document before it is
//! validated.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{OptimizerKind, OptimizerSettings};
use crate::parallel::Execution;
use crate::regularizer::DEFAULT_EPSILON;
use crate::stream::{Geometry, StreamOrder, TaskKind, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ella,
    Seqlora,
    OrthoBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSection {
    pub name: String,
    #[serde(default)]
    pub geometry: Geometry,
    pub tasks: Vec<TaskSpec>,
    /// Tasks never trained on; used for the general-ability metric.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unseen: Vec<TaskSpec>,
}

impl StreamSection {
    pub fn order(&self) -> StreamOrder {
        StreamOrder {
            name: self.name.clone(),
            geometry: self.geometry.clone(),
            tasks: self.tasks.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Hidden layer widths between input and class logits.
    pub hidden: Vec<usize>,
    pub activation: crate::model::Activation,
    /// Adapted layer indices; empty means every layer.
    #[serde(default)]
    pub adapted_layers: Vec<usize>,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
    #[serde(default = "adam_epsilon")]
    pub adam_epsilon: f64,
    pub steps_per_task: usize,
    /// Minibatch size; 0 trains full-batch.
    #[serde(default)]
    pub batch_size: usize,
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_epsilon() -> f64 {
    1e-8
}

impl OptimizerSection {
    pub fn settings(&self) -> OptimizerSettings {
        OptimizerSettings {
            kind: self.kind,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_epsilon: self.adam_epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EllaSection {
    pub method: Method,
    /// One λ per task; the first task has nothing to protect.
    pub lambda_schedule: Vec<f64>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Coefficient of the orthogonality penalty for `ortho-baseline`.
    #[serde(default)]
    pub ortho_coefficient: f64,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "bin_width")]
    pub histogram_bin_width: f64,
    #[serde(default = "diagnostic_batches")]
    pub diagnostic_batches: usize,
    #[serde(default)]
    pub execution: Execution,
}

fn bin_width() -> f64 {
    0.1
}
fn diagnostic_batches() -> usize {
    32
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            histogram_bin_width: bin_width(),
            diagnostic_batches: diagnostic_batches(),
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub stream: StreamSection,
    pub model: ModelSection,
    pub optimizer: OptimizerSection,
    pub ella: EllaSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl Default for RunConfig {
    /// The two-task interference stream with a tuned λ.
    fn default() -> Self {
        let order = crate::stream::interference_stream();
        Self {
            seed: 1,
            stream: StreamSection {
                name: order.name,
                geometry: order.geometry,
                tasks: order.tasks,
                unseen: vec![TaskSpec {
                    name: "rot-45".into(),
                    kind: TaskKind::RotatedGaussians {
                        angle: std::f64::consts::FRAC_PI_4,
                        means: None,
                    },
                    seed: 3,
                }],
            },
            model: ModelSection {
                hidden: vec![32],
                activation: crate::model::Activation::Tanh,
                adapted_layers: Vec::new(),
                rank: 4,
            },
            optimizer: OptimizerSection {
                kind: OptimizerKind::Adam,
                learning_rate: 0.01,
                momentum: 0.0,
                beta1: beta1(),
                beta2: beta2(),
                adam_epsilon: adam_epsilon(),
                steps_per_task: 200,
                batch_size: 0,
            },
            ella: EllaSection {
                method: Method::Ella,
                lambda_schedule: vec![0.0, 1.0],
                epsilon: DEFAULT_EPSILON,
                ortho_coefficient: 1.0,
            },
            output: OutputSection::default(),
        }
    }
}

impl RunConfig {
    pub fn num_tasks(&self) -> usize {
        self.stream.tasks.len()
    }

    /// Layer widths from input to logits.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.stream.geometry.input_dim];
        dims.extend(&self.model.hidden);
        dims.push(self.stream.geometry.num_classes);
        dims
    }

    pub fn adapted_layers(&self) -> Vec<usize> {
        if self.model.adapted_layers.is_empty() {
            (0..self.model.hidden.len() + 1).collect()
        } else {
            self.model.adapted_layers.clone()
        }
    }

    /// λ actually used for each task; `seqlora` trains with λ = 0 throughout.
    pub fn effective_lambdas(&self) -> Vec<f64> {
        match self.ella.method {
            Method::Ella => self.ella.lambda_schedule.clone(),
            Method::Seqlora | Method::OrthoBaseline => vec![0.0; self.ella.lambda_schedule.len()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: String| Err(Error::Config(format!("{key}: {why}")));
        self.stream
            .order()
            .validate()
            .map_err(|e| Error::Config(format!("stream: {e}")))?;
        let t = self.num_tasks();
        if self.ella.lambda_schedule.len() != t {
            return bad(
                "ella.lambda_schedule",
                format!(
                    "has {} entries but the stream has {t} tasks",
                    self.ella.lambda_schedule.len()
                ),
            );
        }
        if let Some(l) = self
            .ella
            .lambda_schedule
            .iter()
            .find(|l| !(**l >= 0.0 && l.is_finite()))
        {
            return bad(
                "ella.lambda_schedule",
                format!("entries must be finite and >= 0, found {l}"),
            );
        }
        if !(self.ella.epsilon > 0.0 && self.ella.epsilon.is_finite()) {
            return bad(
                "ella.epsilon",
                format!("must be > 0, got {}", self.ella.epsilon),
            );
        }
        if !(self.ella.ortho_coefficient >= 0.0) {
            return bad("ella.ortho_coefficient", "must be >= 0".into());
        }
        if self.model.rank == 0 {
            return bad("model.rank", "must be >= 1".into());
        }
        let dims = self.layer_dims();
        if self.model.hidden.contains(&0) {
            return bad("model.hidden", "widths must be >= 1".into());
        }
        let layers = dims.len() - 1;
        for &l in &self.adapted_layers() {
            if l >= layers {
                return bad(
                    "model.adapted_layers",
                    format!("layer {l} does not exist ({layers} layers)"),
                );
            }
            let max_rank = dims[l].min(dims[l + 1]);
            if self.model.rank > max_rank {
                return bad(
                    "model.rank",
                    format!(
                        "{} exceeds min dimension {max_rank} of layer {l}",
                        self.model.rank
                    ),
                );
            }
        }
        self.optimizer
            .settings()
            .validate()
            .map_err(|e| Error::Config(format!("optimizer: {e}")))?;
        if self.optimizer.steps_per_task == 0 {
            return bad("optimizer.steps_per_task", "must be >= 1".into());
        }
        if !(self.output.histogram_bin_width > 0.0) {
            return bad("output.histogram_bin_width", "must be > 0".into());
        }
        if self.output.diagnostic_batches == 0 {
            return bad("output.diagnostic_batches", "must be >= 1".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Parses a config document, applies overrides, and validates.
pub fn parse_config(text: &str, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut doc: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    for (key, value) in overrides {
        apply_override(&mut doc, key, value)?;
    }
    let config: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(doc)).map_err(
        |e: serde_path_to_error::Error<toml::de::Error>| {
            let path = e.path().to_string();
            let message = e.into_inner().message().to_string();
            if path == "." {
                Error::Config(message)
            } else {
                Error::Config(format!("at `{path}`: {message}"))
            }
        },
    )?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path, overrides: &[(String, String)]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Config(format!("config not found: {}", path.display()))
        } else {
            Error::io(path, e)
        }
    })?;
    parse_config(&text, overrides)
}

/// Parses `key=value` where the value is any TOML value; bare words that
/// are not valid TOML are taken as strings.
pub fn parse_override(spec: &str) -> Result<(String, String)> {
    let (key, value) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    Ok((key.trim().to_string(), value.trim().to_string()))
}

fn apply_override(doc: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let value = parse_value(raw);
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key {key:?}")));
    }
    let mut table = doc;
    for (i, part) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{} is not a section", parts[..=i].join("."))))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Default config with explanatory comments, loadable by [`load_config`].
pub fn default_config_text() -> String {
    let body = RunConfig::default().to_toml();
    format!(
        "# Continual-learning run configuration.\n\
         #\n\
         # seed              run seed; mixes into data sampling, frozen-model init and adapters\n\
         # [stream]          ordered tasks (kinds: rotated-gaussians, permuted-features,\n\
         #                   label-remap, csv) and optional unseen tasks for general ability\n\
         # [model]           frozen MLP widths, hidden activation, adapter rank and layers\n\
         #                   (empty adapted_layers = all layers)\n\
         # [optimizer]       sgd or adam; batch_size = 0 trains full-batch\n\
         # [ella]            method = ella | seqlora | ortho-baseline; one lambda per task\n\
         # [output]          histogram bin width, held-out diagnostic batches per task,\n\
         #                   execution = parallel | sequential for sweeps and baselines\n\
         #\n\
         # Unknown keys are rejected. Override any value with --set section.key=value.\n\n{body}"
    )
}
