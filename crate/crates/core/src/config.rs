//! Experiment configuration.
//!
//! The file format is flat `key = value` lines with dotted section keys
//! (a subset of TOML), e.g. `train.learning_rate = 0.1`. Every key listed in
//! the shipped `configs/default.toml` is required; unknown keys are rejected.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{MiaConfig, MiaFeature};
use crate::nn::OptimizerConfig;
use crate::rng::{indexed_seed, sub_seed, Stream};
use crate::unlearn::{Method, ShrinkConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSpec {
    Blobs {
        num_classes: usize,
        per_class: usize,
        feature_dim: usize,
        spread: f64,
    },
    Csv {
        path: PathBuf,
        num_classes: usize,
        feature_dim: usize,
        header: bool,
    },
}

impl DataSpec {
    pub fn num_classes(&self) -> usize {
        match self {
            DataSpec::Blobs { num_classes, .. } | DataSpec::Csv { num_classes, .. } => *num_classes,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            DataSpec::Blobs { feature_dim, .. } | DataSpec::Csv { feature_dim, .. } => *feature_dim,
        }
    }
}

/// Optimizer settings without a seed; seeds are derived from the global seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdSection {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl SgdSection {
    pub fn with_seed(&self, seed: u64) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub forget_class: usize,
    pub output_dir: PathBuf,
    pub data: DataSpec,
    /// Hidden layer widths; input and output widths come from the data.
    pub hidden: Vec<usize>,
    pub train: SgdSection,
    /// Boundary Shrink finetuning.
    pub boundary: SgdSection,
    /// Boundary Expanding finetuning.
    pub expand: SgdSection,
    pub epsilon: f64,
    pub refresh_labels_each_epoch: bool,
    pub finetune: SgdSection,
    pub random_labels: SgdSection,
    pub negative_gradient: SgdSection,
    pub mia: MiaConfig,
    pub raster_resolution: usize,
    /// Fraction by which the training bounding box is grown for rasters.
    pub raster_margin: f64,
    pub methods: Vec<Method>,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<file>", e.to_string()))?;
        let mut r = Reader {
            root: &table,
            used: BTreeSet::new(),
        };
        let source = r.string("data.source")?;
        let data = match source.as_str() {
            "blobs" => DataSpec::Blobs {
                num_classes: r.usize("data.num_classes")?,
                per_class: r.usize("data.per_class")?,
                feature_dim: r.usize("data.feature_dim")?,
                spread: r.f64("data.spread")?,
            },
            "csv" => DataSpec::Csv {
                path: PathBuf::from(r.string("data.path")?),
                num_classes: r.usize("data.num_classes")?,
                feature_dim: r.usize("data.feature_dim")?,
                header: r.bool("data.header")?,
            },
            other => {
                return Err(Error::config(
                    "data.source",
                    format!("expected `blobs` or `csv`, got `{other}`"),
                ))
            }
        };
        let mia_feature = r.string("mia.feature")?;
        if mia_feature != "entropy" {
            return Err(Error::config("mia.feature", format!("only `entropy` is supported, got `{mia_feature}`")));
        }
        let methods = r
            .strings("methods")?
            .iter()
            .map(|m| m.parse::<Method>().map_err(|e| Error::config("methods", e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let cfg = ExperimentConfig {
            seed: r.u64("seed")?,
            forget_class: r.usize("forget_class")?,
            output_dir: PathBuf::from(r.string("output.dir")?),
            data,
            hidden: r.usizes("model.hidden")?,
            train: r.sgd("train")?,
            boundary: r.sgd("boundary")?,
            expand: r.sgd("expand")?,
            epsilon: r.f64("boundary.epsilon")?,
            refresh_labels_each_epoch: r.bool("boundary.refresh_labels_each_epoch")?,
            finetune: r.sgd("finetune")?,
            random_labels: r.sgd("random_labels")?,
            negative_gradient: r.sgd("negative_gradient")?,
            mia: MiaConfig {
                feature: MiaFeature::Entropy,
            },
            raster_resolution: r.usize("raster.resolution")?,
            raster_margin: r.f64("raster.margin")?,
            methods,
        };
        r.reject_unknown()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.data.num_classes();
        if k < 2 {
            return Err(Error::config("data.num_classes", "need at least 2 classes"));
        }
        if self.forget_class >= k {
            return Err(Error::config(
                "forget_class",
                format!("{} out of range for {k} classes", self.forget_class),
            ));
        }
        if self.data.feature_dim() == 0 {
            return Err(Error::config("data.feature_dim", "must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("model.hidden", "widths must be positive"));
        }
        for (key, section) in [
            ("train", &self.train),
            ("boundary", &self.boundary),
            ("expand", &self.expand),
            ("finetune", &self.finetune),
            ("random_labels", &self.random_labels),
            ("negative_gradient", &self.negative_gradient),
        ] {
            section
                .with_seed(0)
                .validate()
                .map_err(|e| Error::config(key, e.to_string()))?;
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("boundary.epsilon", "must be positive"));
        }
        if self.raster_resolution == 0 {
            return Err(Error::config("raster.resolution", "must be positive"));
        }
        if !(self.raster_margin >= 0.0 && self.raster_margin.is_finite()) {
            return Err(Error::config("raster.margin", "must be non-negative"));
        }
        Ok(())
    }

    /// Full layer widths, input to output.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.data.feature_dim())
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(self.data.num_classes()))
            .collect()
    }

    /// Hex SHA-256 of the canonical JSON encoding, ignoring `output_dir`.
    pub fn digest(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn data_seed(&self) -> u64 {
        sub_seed(self.seed, Stream::Data)
    }

    pub fn init_seed(&self) -> u64 {
        sub_seed(self.seed, Stream::Init)
    }

    pub fn retrain_init_seed(&self) -> u64 {
        sub_seed(self.seed, Stream::RetrainInit)
    }

    pub fn relabel_seed(&self) -> u64 {
        sub_seed(self.seed, Stream::Relabel)
    }

    pub fn train_optimizer(&self) -> OptimizerConfig {
        self.train.with_seed(indexed_seed(self.seed, Stream::Shuffle, 0))
    }

    /// Optimizer settings for `method`, with its own shuffle seed.
    pub fn method_optimizer(&self, method: Method) -> OptimizerConfig {
        let (section, index) = match method {
            Method::Retrain => (&self.train, 1),
            Method::Finetune => (&self.finetune, 2),
            Method::NegativeGradient => (&self.negative_gradient, 3),
            Method::RandomLabels => (&self.random_labels, 4),
            Method::BoundaryShrink => (&self.boundary, 5),
            Method::BoundaryExpand => (&self.expand, 6),
        };
        section.with_seed(indexed_seed(self.seed, Stream::Shuffle, index))
    }

    pub fn shrink_config(&self) -> ShrinkConfig {
        ShrinkConfig {
            epsilon: self.epsilon,
            finetune: self.method_optimizer(Method::BoundaryShrink),
            refresh_labels_each_epoch: self.refresh_labels_each_epoch,
        }
    }
}

struct Reader<'a> {
    root: &'a toml::Table,
    used: BTreeSet<String>,
}

impl Reader<'_> {
    fn get(&mut self, key: &str) -> Result<&toml::Value> {
        let mut parts = key.split('.');
        let first = parts.next().expect("non-empty key");
        let mut value = self
            .root
            .get(first)
            .ok_or_else(|| Error::config(key, "missing key"))?;
        for part in parts {
            value = value
                .as_table()
                .and_then(|t| t.get(part))
                .ok_or_else(|| Error::config(key, "missing key"))?;
        }
        self.used.insert(key.to_string());
        Ok(value)
    }

    fn wrong(key: &str, want: &str, got: &toml::Value) -> Error {
        Error::config(key, format!("expected {want}, found {}", got.type_str()))
    }

    fn f64(&mut self, key: &str) -> Result<f64> {
        match self.get(key)? {
            toml::Value::Float(f) => Ok(*f),
            toml::Value::Integer(i) => Ok(*i as f64),
            v => Err(Self::wrong(key, "a number", v)),
        }
    }

    fn u64(&mut self, key: &str) -> Result<u64> {
        match self.get(key)? {
            toml::Value::Integer(i) if *i >= 0 => Ok(*i as u64),
            v => Err(Self::wrong(key, "a non-negative integer", v)),
        }
    }

    fn usize(&mut self, key: &str) -> Result<usize> {
        let v = self.u64(key)?;
        usize::try_from(v).map_err(|_| Error::config(key, "value too large"))
    }

    fn bool(&mut self, key: &str) -> Result<bool> {
        match self.get(key)? {
            toml::Value::Boolean(b) => Ok(*b),
            v => Err(Self::wrong(key, "a boolean", v)),
        }
    }

    fn string(&mut self, key: &str) -> Result<String> {
        match self.get(key)? {
            toml::Value::String(s) => Ok(s.clone()),
            v => Err(Self::wrong(key, "a string", v)),
        }
    }

    fn array(&mut self, key: &str) -> Result<Vec<toml::Value>> {
        match self.get(key)? {
            toml::Value::Array(a) => Ok(a.clone()),
            v => Err(Self::wrong(key, "an array", v)),
        }
    }

    fn usizes(&mut self, key: &str) -> Result<Vec<usize>> {
        self.array(key)?
            .iter()
            .map(|v| match v {
                toml::Value::Integer(i) if *i >= 0 => Ok(*i as usize),
                v => Err(Self::wrong(key, "an array of non-negative integers", v)),
            })
            .collect()
    }

    fn strings(&mut self, key: &str) -> Result<Vec<String>> {
        self.array(key)?
            .iter()
            .map(|v| match v {
                toml::Value::String(s) => Ok(s.clone()),
                v => Err(Self::wrong(key, "an array of strings", v)),
            })
            .collect()
    }

    fn sgd(&mut self, section: &str) -> Result<SgdSection> {
        Ok(SgdSection {
            learning_rate: self.f64(&format!("{section}.learning_rate"))?,
            momentum: self.f64(&format!("{section}.momentum"))?,
            batch_size: self.usize(&format!("{section}.batch_size"))?,
            epochs: self.usize(&format!("{section}.epochs"))?,
        })
    }

    fn reject_unknown(&self) -> Result<()> {
        let mut all = Vec::new();
        collect_keys(self.root, "", &mut all);
        match all.into_iter().find(|k| !self.used.contains(k)) {
            Some(k) => Err(Error::config(k, "unknown key")),
            None => Ok(()),
        }
    }
}

fn collect_keys(table: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in table {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => collect_keys(t, &path, out),
            _ => out.push(path),
        }
    }
}

/// The canonical desk-scale experiment, identical to `configs/default.toml`.
pub const DEFAULT_CONFIG: &str = include_str!("../../../configs/default.toml");

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_parses() {
        let cfg = ExperimentConfig::parse(DEFAULT_CONFIG).unwrap();
        assert_eq!(cfg.widths(), vec![2, 64, 64, 10]);
        assert_eq!(cfg.methods.len(), 6);
        assert_eq!(cfg.digest(), ExperimentConfig::parse(DEFAULT_CONFIG).unwrap().digest());
    }

    #[test]
    fn digest_ignores_output_dir_only() {
        let a = ExperimentConfig::parse(DEFAULT_CONFIG).unwrap();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.digest(), b.digest());
        b.seed += 1;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn missing_key_names_its_path() {
        let text = DEFAULT_CONFIG.replace("train.momentum", "# train.momentum");
        let err = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("train.momentum"), "{err}");
    }

    #[test]
    fn unknown_key_and_method_are_rejected() {
        let err = ExperimentConfig::parse(&format!("{DEFAULT_CONFIG}\ntrain.weight_decay = 0.1\n"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("train.weight_decay"), "{err}");
        let text = DEFAULT_CONFIG.replace("\"retrain\"", "\"fisher\"");
        let err = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("valid methods"), "{err}");
    }

    #[test]
    fn method_seeds_differ() {
        let cfg = ExperimentConfig::parse(DEFAULT_CONFIG).unwrap();
        let seeds: BTreeSet<u64> = Method::ALL.iter().map(|m| cfg.method_optimizer(*m).seed).collect();
        assert_eq!(seeds.len(), 6);
    }
}
