//! Run configuration: one TOML file with `[data]`, `[model]`, `[train]` and
//! `[eval]` sections. Every key has a default, unknown keys are rejected, and
//! any key can be overridden from the environment as
//! `ATTNAGE_<SECTION>__<KEY>` (nested tables add further `__` segments).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conditioning::{AgeGroupScheme, NUM_GROUPS};
use crate::data::{ingest_directory, synth_dataset, DatasetRecord, IngestReport, SplitSpec};
use crate::error::{Error, Result};
use crate::eval::{OracleConfig, DEFAULT_THRESHOLD};
use crate::models::ModelConfig;
use crate::trainer::TrainConfig;

/// Prefix of environment variables that override config keys.
pub const ENV_PREFIX: &str = "ATTNAGE_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Procedurally generated faces with a known aging region.
    Synth,
    /// Image directory plus metadata CSV.
    Directory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Image directory, required when `source = "directory"`.
    pub root: Option<PathBuf>,
    /// Metadata CSV relative to `root` (`file,age,subject_id`).
    pub metadata: String,
    pub synth_count: usize,
    pub synth_seed: u64,
    /// Inclusive lower bound of each of the five age groups.
    pub age_lower_bounds: [u32; NUM_GROUPS],
    pub split: SplitSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synth,
            root: None,
            metadata: "metadata.csv".into(),
            synth_count: 2000,
            synth_seed: 0,
            age_lower_bounds: AgeGroupScheme::default().lower_bounds(),
            split: SplitSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Verification threshold on the 0-100 confidence scale.
    pub threshold: f64,
    /// Evaluation oracle (age estimator and identity embedder) hyperparameters.
    pub oracle: OracleConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: DEFAULT_THRESHOLD,
            oracle: OracleConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// One documented config key.
pub struct KeyDoc {
    pub key: &'static str,
    pub help: &'static str,
}

const fn doc(key: &'static str, help: &'static str) -> KeyDoc {
    KeyDoc { key, help }
}

/// Documentation of every key, in file order.
pub const KEY_DOCS: &[KeyDoc] = &[
    doc("data.source", "\"synth\" or \"directory\""),
    doc("data.root", "image directory (required for source = \"directory\")"),
    doc("data.metadata", "metadata CSV inside data.root with columns file,age,subject_id"),
    doc("data.synth_count", "number of synthetic faces"),
    doc("data.synth_seed", "seed of the synthetic generator"),
    doc("data.age_lower_bounds", "inclusive lower age of each of the 5 groups"),
    doc("data.split.train_fraction", "fraction of records in the training split"),
    doc("data.split.seed", "seed of the train/test shuffle"),
    doc("data.split.by_subject", "keep all images of a subject on one side of the split"),
    doc("model.gen_base_channels", "generator channels after the stem"),
    doc("model.gen_stem_kernel", "generator stem kernel size (odd)"),
    doc("model.gen_downsamples", "stride-2 encoder stages (mirrored by the decoder)"),
    doc("model.gen_residual_blocks", "residual blocks in the bottleneck"),
    doc("model.gen_head_kernel", "kernel size of the attention and color heads (odd)"),
    doc("model.gen_instance_norm", "instance normalization in the generator"),
    doc("model.attention_bias_init", "initial attention-head bias; positive starts near identity"),
    doc("model.disc_base_channels", "discriminator channels of the first stage"),
    doc("model.disc_downsamples", "stride-2 discriminator stages"),
    doc("model.disc_leaky_slope", "negative slope of the discriminator leaky ReLU"),
    doc("train.weights.lambda_adv", "weight of the adversarial term"),
    doc("train.weights.lambda_att", "weight of the attention term"),
    doc("train.weights.lambda_cls", "weight of the age classification terms"),
    doc("train.weights.lambda_gp", "weight of the gradient penalty"),
    doc("train.weights.lambda_tv", "weight of total variation inside the attention term"),
    doc("train.learning_rate", "Adam step size (generator, and discriminator by default)"),
    doc("train.disc_learning_rate", "separate discriminator step size (unset: learning_rate)"),
    doc("train.adam_beta1", "Adam first-moment decay"),
    doc("train.adam_beta2", "Adam second-moment decay"),
    doc("train.batch_size", "images per step (>= 2)"),
    doc("train.epochs", "passes over the training split"),
    doc("train.max_steps", "step budget; overrides epochs when set (unset)"),
    doc("train.critic_steps_per_gen_step", "discriminator updates per generator update"),
    doc("train.seed", "seed of initialization, batching, targets and interpolation"),
    doc("train.resolution", "[height, width] of network inputs"),
    doc("train.checkpoint_interval", "steps between checkpoints"),
    doc("train.exclude_source_target", "never draw the source group as target"),
    doc("eval.threshold", "verification threshold on the 0-100 confidence scale"),
    doc("eval.oracle.channels", "oracle classifier base channels"),
    doc("eval.oracle.embedding", "oracle identity embedding width"),
    doc("eval.oracle.steps", "oracle training steps"),
    doc("eval.oracle.batch_size", "oracle batch size"),
    doc("eval.oracle.learning_rate", "oracle Adam step size"),
    doc("eval.oracle.seed", "oracle initialization and batching seed"),
];

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<(String, String)>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

impl RunConfig {
    /// `(dotted key, default value)` for every key that has a concrete default;
    /// optional keys whose default is unset are absent.
    pub fn default_values() -> Vec<(String, String)> {
        let value = toml::Value::try_from(RunConfig::default()).expect("default config serializes");
        let mut out = Vec::new();
        flatten("", &value, &mut out);
        out
    }

    /// Human-readable listing of every key with its default and meaning.
    pub fn reference() -> String {
        let defaults = RunConfig::default_values();
        let mut s = String::from("Configuration keys (TOML sections data, model, train, eval):\n");
        for d in KEY_DOCS {
            let default = defaults
                .iter()
                .find(|(k, _)| k == d.key)
                .map(|(_, v)| v.as_str())
                .unwrap_or("unset");
            s.push_str(&format!("  {} = {}\n      {}\n", d.key, default, d.help));
        }
        s.push_str(&format!(
            "Any key can be overridden by an environment variable {ENV_PREFIX}<SECTION>__<KEY>, \
             e.g. {ENV_PREFIX}TRAIN__MAX_STEPS=200 or {ENV_PREFIX}TRAIN__WEIGHTS__LAMBDA_TV=0.\n"
        ));
        s
    }

    /// Parses TOML text, then applies overrides `(name, value)` whose names
    /// start with [`ENV_PREFIX`]; other names are ignored.
    pub fn from_toml_with_overrides<I>(text: &str, overrides: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut applied = Vec::new();
        for (name, raw) in overrides {
            let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let path: Vec<String> = rest.split("__").map(|s| s.to_ascii_lowercase()).collect();
            if path.iter().any(|s| s.is_empty()) {
                return Err(Error::Config(format!("malformed override variable {name}")));
            }
            set_path(&mut table, &path, parse_scalar(&raw), &name)?;
            applied.push(path.join("."));
        }
        let text = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| {
            let mut msg = e.to_string();
            if !applied.is_empty() {
                msg.push_str(&format!(" (environment overrides: {})", applied.join(", ")));
            }
            Error::Config(msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and applies overrides from the process environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with_overrides(&text, std::env::vars())
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let key = |k: &str, e: Error| Error::Config(format!("{k}: {e}"));
        self.scheme().map_err(|e| key("data.age_lower_bounds", e))?;
        if self.data.source == DataSource::Directory && self.data.root.is_none() {
            return Err(Error::Config("data.root is required when data.source = \"directory\"".into()));
        }
        if self.data.source == DataSource::Synth && self.data.synth_count < 10 {
            return Err(Error::Config(format!(
                "data.synth_count must be at least 10, got {}",
                self.data.synth_count
            )));
        }
        let f = self.data.split.train_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!("data.split.train_fraction must be in (0, 1), got {f}")));
        }
        self.model
            .validate(self.train.resolution())
            .map_err(|e| key("model", e))?;
        self.train.validate().map_err(|e| key("train", e))?;
        if !self.eval.threshold.is_finite() {
            return Err(Error::Config("eval.threshold must be finite".into()));
        }
        Ok(())
    }

    pub fn scheme(&self) -> Result<AgeGroupScheme> {
        AgeGroupScheme::new(self.data.age_lower_bounds)
    }

    /// The canonical TOML form of this config, with every default spelled out.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// All records of the configured dataset, plus per-file ingestion errors
    /// for directory sources.
    pub fn load_records(&self) -> Result<IngestReport> {
        let resolution = self.train.resolution();
        match self.data.source {
            DataSource::Synth => Ok(IngestReport {
                records: synth_dataset(self.data.synth_count, resolution, self.data.synth_seed)?,
                errors: Vec::new(),
            }),
            DataSource::Directory => {
                let root = self.data.root.as_ref().expect("validated");
                ingest_directory(root, &root.join(&self.data.metadata), resolution, &self.scheme()?)
            }
        }
    }

    /// Train and test splits of the configured dataset.
    pub fn load_splits(&self) -> Result<(Vec<DatasetRecord>, Vec<DatasetRecord>)> {
        let report = self.load_records()?;
        for e in &report.errors {
            log::warn!("skipping {}: {}", e.file, e.reason);
        }
        crate::data::split(&report.records, &self.data.split)
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value, name: &str) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut current = table;
    for p in parents {
        let entry = current
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        current = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{name}: `{p}` is not a table")))?;
    }
    current.insert(last.clone(), value);
    Ok(())
}
