//! Flat `key = value` experiment configuration.
//!
//! ```text
//! # MNIST, StandardCNN with QIM
//! dataset = mnist
//! data.train_images = data/mnist/train-images-idx3-ubyte
//! data.train_labels = data/mnist/train-labels-idx1-ubyte
//! data.test_images = data/mnist/t10k-images-idx3-ubyte
//! data.test_labels = data/mnist/t10k-labels-idx1-ubyte
//! backbone = standardcnn
//! qim.enabled = true
//! qim.filters = 32
//! qim.size = 10
//! epochs = 3
//! seed = 7
//! out = runs/mnist-qim
//! ```
//!
//! Relative paths resolve against the directory of the config file. Blank
//! lines and text after `#` are ignored.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::data::{load_cifar10, load_idx, Dataset};
use crate::error::DataError;
use crate::models::{Backbone, InputShape, ModelSpec, QimSpec};
use crate::qim::{QimConfig, QimMode};
use crate::train::{OptimizerKind, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: expected `key = value`, found `{text}`")]
    Syntax { line: usize, text: String },

    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },

    #[error("line {line}: key `{key}` given twice")]
    DuplicateKey { line: usize, key: String },

    #[error("missing required key `{0}`")]
    MissingKey(String),

    #[error("invalid value `{value}` for `{key}`: {reason}")]
    InvalidValue { key: String, value: String, reason: String },
}

pub const KEYS: &[&str] = &[
    "dataset",
    "data.train_images",
    "data.train_labels",
    "data.test_images",
    "data.test_labels",
    "data.train_files",
    "data.test_files",
    "data.train_limit",
    "data.test_limit",
    "backbone",
    "qim.enabled",
    "qim.mode",
    "qim.filters",
    "qim.size",
    "qim.normalize",
    "qim.insert_after",
    "optimizer",
    "lr",
    "momentum",
    "batch_size",
    "epochs",
    "seed",
    "out",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    FashionMnist,
    Cifar10,
}

impl DatasetKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::FashionMnist => "fashion-mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }

    pub fn input_shape(&self) -> InputShape {
        match self {
            DatasetKind::Mnist | DatasetKind::FashionMnist => InputShape::new(28, 28, 1),
            DatasetKind::Cifar10 => InputShape::new(32, 32, 3),
        }
    }

    pub fn classes(&self) -> usize {
        10
    }
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(DatasetKind::Mnist),
            "fashion-mnist" | "fashion_mnist" | "fashionmnist" => Ok(DatasetKind::FashionMnist),
            "cifar10" | "cifar-10" => Ok(DatasetKind::Cifar10),
            other => Err(format!("unknown dataset `{other}` (mnist, fashion-mnist, cifar10)")),
        }
    }
}

/// Where one split's files live.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SplitFiles {
    Idx { images: PathBuf, labels: PathBuf },
    Cifar(Vec<PathBuf>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub train_files: SplitFiles,
    pub test_files: SplitFiles,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub backbone: Backbone,
    pub qim: Option<QimSpec>,
    pub train: TrainConfig,
    pub out: Option<PathBuf>,
}

struct Entries {
    map: BTreeMap<String, String>,
    base: PathBuf,
}

impl Entries {
    fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    fn required(&self, key: &str) -> Result<&str, ConfigError> {
        self.get(key).ok_or_else(|| ConfigError::MissingKey(key.to_string()))
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key).map(|v| v.parse::<T>().map_err(|e| invalid(key, v, e.to_string()))).transpose()
    }

    fn parse_required<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.parse(key)?.ok_or_else(|| ConfigError::MissingKey(key.to_string()))
    }

    fn flag(&self, key: &str) -> Result<Option<bool>, ConfigError> {
        self.get(key)
            .map(|v| match v.to_ascii_lowercase().as_str() {
                "true" | "yes" | "on" | "1" => Ok(true),
                "false" | "no" | "off" | "0" => Ok(false),
                _ => Err(invalid(key, v, "expected true or false")),
            })
            .transpose()
    }

    fn path(&self, key: &str) -> Result<PathBuf, ConfigError> {
        Ok(self.base.join(self.required(key)?))
    }
}

fn invalid(key: &str, value: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue { key: key.into(), value: value.into(), reason: reason.into() }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    /// Parses config text; relative paths are joined onto `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.trim().into() })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1, text: raw.trim().into() });
            }
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey { line: i + 1, key: key.into() });
            }
            if map.insert(key.to_string(), value.to_string()).is_some() {
                return Err(ConfigError::DuplicateKey { line: i + 1, key: key.into() });
            }
        }
        let e = Entries { map, base: base.to_path_buf() };

        let dataset: DatasetKind = e.parse_required("dataset")?;
        let (train_files, test_files) = match dataset {
            DatasetKind::Cifar10 => {
                let list = |key: &str| -> Result<SplitFiles, ConfigError> {
                    let v = e.required(key)?;
                    let files: Vec<PathBuf> =
                        v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|f| e.base.join(f)).collect();
                    if files.is_empty() {
                        return Err(invalid(key, v, "no files listed"));
                    }
                    Ok(SplitFiles::Cifar(files))
                };
                (list("data.train_files")?, list("data.test_files")?)
            }
            _ => (
                SplitFiles::Idx { images: e.path("data.train_images")?, labels: e.path("data.train_labels")? },
                SplitFiles::Idx { images: e.path("data.test_images")?, labels: e.path("data.test_labels")? },
            ),
        };

        let backbone: Backbone = {
            let v = e.required("backbone")?;
            v.parse().map_err(|err: crate::Error| invalid("backbone", v, err.to_string()))?
        };

        let qim = if e.flag("qim.enabled")?.unwrap_or(false) {
            let filters: usize = e.parse_required("qim.filters")?;
            let size: usize = e.parse_required("qim.size")?;
            if filters == 0 {
                return Err(invalid("qim.filters", "0", "must be positive"));
            }
            if size == 0 {
                return Err(invalid("qim.size", "0", "must be positive"));
            }
            let mode = match e.get("qim.mode") {
                Some(v) => v.parse::<QimMode>().map_err(|err| invalid("qim.mode", v, err.to_string()))?,
                None => QimMode::default(),
            };
            let normalize = e.flag("qim.normalize")?.unwrap_or(true);
            let config = QimConfig::new(filters, size).with_mode(mode).with_normalize(normalize);
            Some(QimSpec { config, insert_after: e.parse("qim.insert_after")? })
        } else {
            None
        };

        let defaults = TrainConfig::default();
        let optimizer = match e.get("optimizer") {
            Some(v) => v.parse::<OptimizerKind>().map_err(|err| invalid("optimizer", v, err.to_string()))?,
            None => defaults.optimizer,
        };
        let train = TrainConfig {
            optimizer,
            lr: e.parse("lr")?.unwrap_or(defaults.lr),
            batch_size: e.parse("batch_size")?.unwrap_or(defaults.batch_size),
            epochs: e.parse_required("epochs")?,
            seed: e.parse_required("seed")?,
            momentum: e.parse("momentum")?.unwrap_or(defaults.momentum),
        };
        train.validate().map_err(|err| invalid("training", "", err.to_string()))?;

        Ok(Self {
            dataset,
            train_files,
            test_files,
            train_limit: e.parse("data.train_limit")?,
            test_limit: e.parse("data.test_limit")?,
            backbone,
            qim,
            train,
            out: e.get("out").map(|o| e.base.join(o)),
        })
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            backbone: self.backbone,
            input: self.dataset.input_shape(),
            classes: self.dataset.classes(),
            qim: self.qim,
        }
    }

    fn load_split(&self, files: &SplitFiles, limit: Option<usize>) -> Result<Dataset, DataError> {
        let data = match files {
            SplitFiles::Idx { images, labels } => load_idx(images, labels)?,
            SplitFiles::Cifar(paths) => load_cifar10(paths)?,
        };
        let shape = self.dataset.input_shape();
        if data.image_shape() != (shape.h, shape.w, shape.c) {
            return Err(DataError::Shape {
                path: PathBuf::from(self.dataset.as_str()),
                detail: format!("{:?}, expected {}×{}×{}", data.image_shape(), shape.h, shape.w, shape.c),
            });
        }
        let data = limit.map_or(data.clone(), |n| data.take(n));
        if data.is_empty() {
            return Err(DataError::Empty);
        }
        Ok(data)
    }

    pub fn load_train(&self) -> Result<Dataset, DataError> {
        self.load_split(&self.train_files, self.train_limit)
    }

    pub fn load_test(&self) -> Result<Dataset, DataError> {
        self.load_split(&self.test_files, self.test_limit)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "dataset = mnist\n\
        data.train_images = a\ndata.train_labels = b\n\
        data.test_images = c\ndata.test_labels = d\n\
        backbone = standardcnn\nepochs = 1\nseed = 3\n";

    #[test]
    fn parses_minimal_config_with_defaults() {
        let cfg = ExperimentConfig::parse(BASE, Path::new("/cfg")).unwrap();
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.train.lr, 0.0005);
        assert_eq!(cfg.train.optimizer, OptimizerKind::Adam);
        assert!(cfg.qim.is_none());
        assert_eq!(cfg.train_files, SplitFiles::Idx { images: "/cfg/a".into(), labels: "/cfg/b".into() });
    }

    #[test]
    fn qim_keys() {
        let text = format!("{BASE}qim.enabled = true # on\nqim.filters = 32\nqim.size = 10\nqim.mode = paired\n");
        let cfg = ExperimentConfig::parse(&text, Path::new("")).unwrap();
        let q = cfg.qim.unwrap();
        assert_eq!((q.config.filters, q.config.size, q.config.mode), (32, 10, QimMode::Paired));
        assert!(q.config.normalize);
    }

    #[test]
    fn rejects_unknown_and_missing_keys() {
        let err = ExperimentConfig::parse(&format!("{BASE}colour = red\n"), Path::new("")).unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { line: 9, ref key } if key == "colour"));
        let err = ExperimentConfig::parse(&BASE.replace("seed = 3\n", ""), Path::new("")).unwrap_err();
        assert!(matches!(err, ConfigError::MissingKey(ref k) if k == "seed"));
        let err = ExperimentConfig::parse(&format!("{BASE}qim.enabled = yes\n"), Path::new("")).unwrap_err();
        assert!(matches!(err, ConfigError::MissingKey(ref k) if k == "qim.filters"));
        let err = ExperimentConfig::parse(&format!("{BASE}seed = 4\n"), Path::new("")).unwrap_err();
        assert!(matches!(err, ConfigError::DuplicateKey { .. }));
    }

    #[test]
    fn rejects_bad_values() {
        let err = ExperimentConfig::parse(&BASE.replace("standardcnn", "foo"), Path::new("")).unwrap_err();
        assert!(matches!(err, ConfigError::InvalidValue { ref key, .. } if key == "backbone"));
        let err = ExperimentConfig::parse(&format!("{BASE}batch_size = 0\n"), Path::new("")).unwrap_err();
        assert!(matches!(err, ConfigError::InvalidValue { .. }));
        assert!(matches!(
            ExperimentConfig::parse("just words\n", Path::new("")),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
    }

    #[test]
    fn cifar_file_lists() {
        let text = "dataset = cifar10\ndata.train_files = x.bin, y.bin\ndata.test_files = t.bin\n\
                    backbone = standardcnn\nepochs = 1\nseed = 0\n";
        let cfg = ExperimentConfig::parse(text, Path::new("d")).unwrap();
        assert_eq!(cfg.train_files, SplitFiles::Cifar(vec!["d/x.bin".into(), "d/y.bin".into()]));
        assert_eq!(cfg.model_spec().input, InputShape::new(32, 32, 3));
    }
}
