//! Experiment configuration files.
//!
//! A configuration is a TOML document with one section per component:
//!
//! ```toml
//! preset = "mnist_bags"          # optional; inferred from the dataset
//! output_dir = "runs/digits"
//!
//! [dataset]
//! folds = 5
//! [dataset.source]
//! kind = "mnist_bags"
//! [dataset.source.spec]
//! num_bags = 200
//! mean_bag_size = 10
//!
//! [vat]
//! delta = 0.3
//!
//! [training]
//! seeds = [1, 2, 3]
//! [training.teacher]
//! epochs = 30
//! ```
//!
//! Values are resolved in increasing order of precedence:
//!
//! 1. built-in defaults,
//! 2. the preset (`mnist_bags`, `colon` or `breast`),
//! 3. the configuration file,
//! 4. environment variables,
//! 5. command-line flags (applied by the caller).
//!
//! An environment variable `INSTLABEL__<SECTION>__<FIELD>` overrides one
//! scalar field; nested tables add further `__` separated segments, e.g.
//! `INSTLABEL__TRAINING__TEACHER__EPOCHS=10` or `INSTLABEL__VAT__DELTA=0.2`.
//! The prefix is upper case; the segments after it are case-insensitive.
//! The value is read as a TOML scalar and falls back to a plain string.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::data::{DatasetSource, SplitFractions, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::eval::{SuiteConfig, SweepConfig};
use crate::model::{FeatureExtractorSpec, ModelSpec, DEFAULT_ATTENTION_HIDDEN};
use crate::train::TrainConfig;
use crate::types::{DistillConfig, InstanceShape, VatConfig};

pub const ENV_PREFIX: &str = "INSTLABEL__";
pub const RESOLVED_FILE: &str = "resolved_config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    MnistBags,
    Colon,
    Breast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// How to build the bags. Needed by `prepare`.
    pub source: Option<DatasetSource>,
    /// An existing manifest. Defaults to the one `prepare` writes under the
    /// output directory.
    pub manifest: Option<PathBuf>,
    pub folds: usize,
    pub fold_seed: u64,
    pub split: SplitFractions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Explicit extractor layout. When absent it is chosen from the instance
    /// shape of the data.
    pub extractor: Option<FeatureExtractorSpec>,
    pub feature_dim: usize,
    pub attention_hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub teacher: TrainConfig,
    pub student: TrainConfig,
    /// Root seeds; each gives an independent run.
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub vat: VatConfig,
    pub distill: DistillConfig,
    pub training: TrainingSection,
    pub sweep: SweepConfig,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Fully populated defaults for a preset, without a dataset.
    pub fn preset(preset: Preset) -> Self {
        let (vat, train, student) = match preset {
            Preset::MnistBags => (VatConfig::mnist_bags(), TrainConfig::mnist_bags(), TrainConfig::histopathology()),
            Preset::Colon => (VatConfig::colon(), TrainConfig::histopathology(), TrainConfig::histopathology()),
            Preset::Breast => (VatConfig::breast(), TrainConfig::histopathology(), TrainConfig::histopathology()),
        };
        Self {
            preset,
            dataset: DatasetSection {
                source: None,
                manifest: None,
                folds: 5,
                fold_seed: 0,
                split: SplitFractions::default(),
            },
            model: ModelSection {
                extractor: None,
                feature_dim: 64,
                attention_hidden: DEFAULT_ATTENTION_HIDDEN,
            },
            vat,
            distill: DistillConfig::default(),
            training: TrainingSection {
                teacher: train,
                student,
                seeds: vec![1, 2, 3],
            },
            sweep: SweepConfig::default(),
            output_dir: PathBuf::from("runs"),
        }
    }

    /// Parses a configuration, applying `env` overrides (name, value pairs;
    /// names without the prefix are ignored).
    pub fn parse(text: &str, origin: &Path, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            let line = e.span().map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            Error::config(format!("{} line {line}: {}", origin.display(), e.message()))
        })?;
        let mut user = serde_json::to_value(&table).map_err(|e| Error::config(e.to_string()))?;
        for (name, value) in env {
            apply_env(&mut user, &name, &value)?;
        }
        let preset = match user.get("preset") {
            Some(p) => serde_json::from_value(p.clone()).map_err(|e| Error::config(format!("preset: {e}")))?,
            None => infer_preset(&user),
        };
        let mut merged = serde_json::to_value(Self::preset(preset)).expect("defaults serialize");
        merge(&mut merged, user);
        let cfg: Self = serde_json::from_value(merged).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and applies overrides from the process environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path, std::env::vars())
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.source.is_none() && self.dataset.manifest.is_none() {
            return Err(Error::config("dataset needs either a source or a manifest"));
        }
        if self.dataset.folds < 2 {
            return Err(Error::config("dataset.folds must be >= 2"));
        }
        self.dataset.split.validate()?;
        if let Some(ex) = &self.model.extractor {
            ex.validate()?;
        }
        if self.model.feature_dim == 0 || self.model.attention_hidden == 0 {
            return Err(Error::config("model widths must be positive"));
        }
        self.vat.validate()?;
        self.distill.validate()?;
        self.training.teacher.validate()?;
        self.training.student.validate()?;
        if self.training.seeds.is_empty() {
            return Err(Error::config("training.seeds must not be empty"));
        }
        self.sweep.validate()
    }

    /// Hex SHA-256 of everything that influences results. The output
    /// directory and the seed list are excluded; seeds are recorded next to
    /// the hash wherever it appears.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("object");
        obj.remove("output_dir");
        if let Some(t) = obj.get_mut("training").and_then(Value::as_object_mut) {
            t.remove("seeds");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    /// The canonical resolved configuration.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot render configuration: {e}")))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dataset
            .manifest
            .clone()
            .unwrap_or_else(|| self.output_dir.join("data").join(MANIFEST_FILE))
    }

    /// Model architecture for instances of `shape`.
    pub fn model_spec(&self, shape: InstanceShape) -> Result<ModelSpec> {
        let extractor = match &self.model.extractor {
            Some(ex) => ex.clone(),
            None => {
                let colon = FeatureExtractorSpec::colon();
                let breast = FeatureExtractorSpec::breast();
                if shape == colon.input {
                    colon
                } else if shape == breast.input {
                    breast
                } else {
                    FeatureExtractorSpec::lenet5(shape, self.model.feature_dim)
                }
            }
        };
        if extractor.input != shape {
            return Err(Error::shape(format!("{:?}", extractor.input), format!("{shape:?}")));
        }
        Ok(ModelSpec {
            extractor,
            attention_hidden: self.model.attention_hidden,
        })
    }

    pub fn suite(&self, shape: InstanceShape) -> Result<SuiteConfig> {
        Ok(SuiteConfig {
            model: self.model_spec(shape)?,
            vat: self.vat.clone(),
            distill: self.distill.clone(),
            teacher: self.training.teacher.clone(),
            student: self.training.student.clone(),
        })
    }
}

fn infer_preset(user: &Value) -> Preset {
    let source = user.pointer("/dataset/source");
    match source.and_then(|s| s.get("kind")).and_then(Value::as_str) {
        Some("histopathology") => {
            let size = source.and_then(|s| s.pointer("/patch/patch_size")).and_then(Value::as_u64);
            if size == Some(32) {
                Preset::Breast
            } else {
                Preset::Colon
            }
        }
        _ => Preset::MnistBags,
    }
}

/// Overlays `top` onto `base`; tables merge key by key, anything else
/// replaces. A tagged enum whose tag changes is replaced whole.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            let retagged = matches!((b.get("kind"), t.get("kind")), (Some(x), Some(y)) if x != y);
            if retagged {
                *b = t;
                return;
            }
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if !slot.is_null() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

fn apply_env(user: &mut Value, name: &str, raw: &str) -> Result<()> {
    let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
        return Ok(());
    };
    let path: Vec<String> = rest.split("__").map(str::to_ascii_lowercase).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::config(format!("malformed override variable '{name}'")));
    }
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    if value.is_table() || value.is_array() {
        return Err(Error::config(format!("{name}: only scalar fields can be overridden from the environment")));
    }
    let value = serde_json::to_value(value).map_err(|e| Error::config(e.to_string()))?;
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut node = user;
    for seg in parents {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("{name}: '{seg}' is not a section")))?;
        node = obj.entry(seg.clone()).or_insert_with(|| Value::Object(Map::new()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| Error::config(format!("{name}: parent of '{last}' is not a section")))?;
    if matches!(obj.get(last), Some(Value::Object(_) | Value::Array(_))) {
        return Err(Error::config(format!("{name}: '{last}' is not a scalar field")));
    }
    obj.insert(last.clone(), value);
    Ok(())
}
