//! Pipeline configuration: one TOML file, every field defaulted.
//!
//! Resolution order is defaults → config file → environment overrides. An
//! override names its target as `KGINJECT_<SECTION>__<KEY>` (case
//! insensitive, double underscore between path segments), e.g.
//! `KGINJECT_TRAIN__PEAK_LR=2e-4` or `KGINJECT_SEED=9`. Values are parsed
//! as TOML literals and fall back to plain strings, so `true`, `1e-4`,
//! `[1,2,5]`, and `walks.txt` all work unquoted. Unknown keys — in the file
//! or the environment — are rejected, not ignored.
//!
//! The struct here is pure data: accessors assemble the per-module configs
//! (walk parameters, optimizer settings, masking, batching), with the seed
//! passed in by the caller so all stage seeds visibly flow from one root.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::PredicateId;
use crate::model::{AdapterConfig, EncoderConfig};
use crate::probe::DEFAULT_K_GRID;
use crate::textpipe::{BatchConfig, BatchMode, MaskingConfig};
use crate::trainer::{TrainConfig, TrainMode};
use crate::verbalize::TemplateTable;
use crate::walker::{StartNodes, WalkParams};

/// Prefix for environment-variable overrides.
pub const ENV_PREFIX: &str = "KGINJECT_";

/// Graph-stage settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphSection {
    /// Predicates to keep when filtering; empty keeps every edge.
    pub predicates: Vec<String>,
}

impl Default for GraphSection {
    fn default() -> Self {
        GraphSection {
            predicates: Vec::new(),
        }
    }
}

impl GraphSection {
    /// The keep-list as parsed predicate ids; `None` when no filter is set.
    pub fn predicate_filter(&self) -> Result<Option<Vec<PredicateId>>> {
        if self.predicates.is_empty() {
            return Ok(None);
        }
        self.predicates
            .iter()
            .map(|p| PredicateId::new(p))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }
}

/// Random-walk settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WalkSection {
    /// Steps attempted per walk.
    pub length: usize,
    pub walks_per_node: usize,
}

impl Default for WalkSection {
    fn default() -> Self {
        WalkSection {
            length: 8,
            walks_per_node: 4,
        }
    }
}

impl WalkSection {
    pub fn to_params(&self, seed: u64) -> WalkParams {
        WalkParams {
            length: self.length,
            walks_per_node: self.walks_per_node,
            seed,
            start_nodes: StartNodes::All,
        }
    }
}

/// Sentence-rendering settings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct VerbalizeSection {
    /// Path to a pattern table; unset uses the bundled training table.
    pub template_file: Option<String>,
}

impl VerbalizeSection {
    pub fn load_table(&self) -> Result<TemplateTable> {
        match &self.template_file {
            None => Ok(TemplateTable::bundled_train()),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::data(format!("cannot read template file {path}: {e}")))?;
                TemplateTable::from_toml_str(&text)
            }
        }
    }
}

/// Vocabulary-build settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabSection {
    /// Minimum corpus frequency for a token to receive an id.
    pub min_frequency: u64,
}

impl Default for VocabSection {
    fn default() -> Self {
        VocabSection { min_frequency: 1 }
    }
}

/// Optimization, batching, and masking settings, shared by both training
/// stages; the stage picks its mode and derived seed at run time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global-norm gradient ceiling; omit to disable clipping.
    pub grad_clip: Option<f64>,
    pub log_interval: u64,
    pub batch_size: usize,
    pub batch_mode: BatchMode,
    /// Length budget per example, special tokens included.
    pub max_len: usize,
    pub mlm_probability: f64,
    pub mask_fraction: f64,
    pub random_fraction: f64,
    pub keep_fraction: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let opt = TrainConfig::default();
        let batch = BatchConfig::default();
        let mask = MaskingConfig::default();
        TrainSection {
            peak_lr: opt.peak_lr,
            warmup_steps: opt.warmup_steps,
            total_steps: opt.total_steps,
            weight_decay: opt.weight_decay,
            beta1: opt.beta1,
            beta2: opt.beta2,
            epsilon: opt.epsilon,
            grad_clip: opt.grad_clip,
            log_interval: opt.log_interval,
            batch_size: batch.batch_size,
            batch_mode: batch.mode,
            max_len: batch.max_len,
            mlm_probability: mask.mlm_probability,
            mask_fraction: mask.mask_fraction,
            random_fraction: mask.random_fraction,
            keep_fraction: mask.keep_fraction,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, mode: TrainMode, seed: u64) -> TrainConfig {
        TrainConfig {
            mode,
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            grad_clip: self.grad_clip,
            log_interval: self.log_interval,
            seed,
        }
    }

    pub fn to_batch_config(&self) -> BatchConfig {
        BatchConfig {
            batch_size: self.batch_size,
            mode: self.batch_mode,
            max_len: self.max_len,
        }
    }

    pub fn to_masking_config(&self, seed: u64) -> MaskingConfig {
        MaskingConfig {
            mlm_probability: self.mlm_probability,
            mask_fraction: self.mask_fraction,
            random_fraction: self.random_fraction,
            keep_fraction: self.keep_fraction,
            seed,
        }
    }
}

/// Cloze-evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    /// k grid for precision curves, strictly ascending.
    pub ks: Vec<usize>,
    /// Cap on synthesized probe size; unset keeps every item.
    pub max_items: Option<usize>,
    /// Paraphrase table path; unset uses the bundled probe table.
    pub template_file: Option<String>,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection {
            ks: DEFAULT_K_GRID.to_vec(),
            max_items: None,
            template_file: None,
        }
    }
}

impl ProbeSection {
    pub fn load_table(&self) -> Result<TemplateTable> {
        match &self.template_file {
            None => Ok(TemplateTable::bundled_probe()),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::data(format!("cannot read template file {path}: {e}")))?;
                TemplateTable::from_toml_str(&text)
            }
        }
    }
}

/// The whole pipeline configuration. Defaults fill every field, so an empty
/// file — or no file — is valid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Root seed; every stage derives its own stream from this.
    pub seed: u64,
    /// Worker thread budget; never affects outputs.
    pub workers: usize,
    pub graph: GraphSection,
    pub walk: WalkSection,
    pub verbalize: VerbalizeSection,
    pub vocab: VocabSection,
    pub model: EncoderConfig,
    pub adapter: AdapterConfig,
    pub train: TrainSection,
    pub probe: ProbeSection,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.graph.predicate_filter()?;
        self.to_params_check()?;
        self.model.validate()?;
        self.adapter.validate(&self.model)?;
        self.train
            .to_train_config(TrainMode::TrainAdapter, self.seed)
            .validate()?;
        self.train.to_batch_config().validate()?;
        self.train.to_masking_config(self.seed).validate()?;
        if self.vocab.min_frequency == 0 {
            return Err(Error::config("vocab min_frequency must be at least 1"));
        }
        if self.probe.ks.is_empty() {
            return Err(Error::config("probe ks must not be empty"));
        }
        if self.probe.ks[0] == 0 || self.probe.ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "probe ks must be strictly ascending and ≥ 1, got {:?}",
                self.probe.ks
            )));
        }
        Ok(())
    }

    fn to_params_check(&self) -> Result<()> {
        self.walk.to_params(self.seed).validate()
    }

    /// Parses and validates a TOML document.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Renders this configuration as TOML; `dump-config` prints the default.
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Full resolution: defaults, then the optional file, then overrides
    /// from `env_pairs` (normally `std::env::vars()`), then validation.
    pub fn resolve(path: Option<&Path>, env_pairs: &[(String, String)]) -> Result<Self> {
        let base = match path {
            None => PipelineConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    Error::config(format!("cannot read config {}: {e}", p.display()))
                })?;
                toml::from_str(&text)
                    .map_err(|e| Error::config(format!("config {}: {e}", p.display())))?
            }
        };
        let cfg = apply_env_overrides(base, env_pairs)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// `resolve` against the live process environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let env: Vec<(String, String)> = std::env::vars().collect();
        Self::resolve(path, &env)
    }
}

/// Interprets an override value as a TOML literal, falling back to a string
/// so bare paths and words need no quoting.
fn parse_env_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_env_overrides(
    cfg: PipelineConfig,
    env_pairs: &[(String, String)],
) -> Result<PipelineConfig> {
    let mut relevant: Vec<(&str, &str)> = env_pairs
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|rest| (rest, v.as_str())))
        .collect();
    if relevant.is_empty() {
        return Ok(cfg);
    }
    relevant.sort_unstable();

    let mut value = toml::Value::try_from(&cfg)
        .map_err(|e| Error::config(format!("config serialization: {e}")))?;
    for (key, raw) in relevant {
        let path: Vec<String> = key.split("__").map(str::to_lowercase).collect();
        if path.iter().any(String::is_empty) {
            return Err(Error::config(format!(
                "malformed override name {ENV_PREFIX}{key}"
            )));
        }
        let mut cursor = &mut value;
        for segment in &path[..path.len() - 1] {
            let table = cursor.as_table_mut().ok_or_else(|| {
                Error::config(format!("{ENV_PREFIX}{key} descends into a non-table value"))
            })?;
            cursor = table
                .entry(segment.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        let table = cursor.as_table_mut().ok_or_else(|| {
            Error::config(format!("{ENV_PREFIX}{key} descends into a non-table value"))
        })?;
        table.insert(path.last().unwrap().clone(), parse_env_value(raw));
    }
    value
        .try_into()
        .map_err(|e| Error::config(format!("environment overrides: {e}")))
}
