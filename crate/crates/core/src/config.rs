//! Run configuration: a flat, typed key-value file with dotted sections.
//!
//! ```toml
//! preset = "desk-blobs"
//! train.lambda = 0.6
//! data.translation = [2.0, 2.0]
//! ```
//!
//! Parsing is strict. Unknown keys, wrong types and out-of-range values are
//! errors naming the key; unknown keys come with the closest known key as a
//! suggestion. A `preset` is applied before every other key regardless of
//! where it appears.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::data::BlobsSpec;
use crate::diagnostics::GrlSchedule;
use crate::error::{Error, Result};
use crate::model::ArchSpec;
use crate::train::{Method, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    #[default]
    Blobs,
    Moons,
    /// IDX image/label files.
    Idx,
    /// Sparse bag-of-words text files.
    Sparse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenFormat {
    #[default]
    Idx,
    Sparse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_widths: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub domain_hidden: Vec<usize>,
    pub batch_norm: bool,
    pub residual_stride: usize,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_widths: vec![32, 32],
            classifier_hidden: vec![],
            domain_hidden: vec![32],
            batch_norm: true,
            residual_stride: 1,
            precision: Precision::F64,
        }
    }
}

impl ModelConfig {
    pub fn arch(&self, input_dim: usize, classes: usize) -> ArchSpec {
        ArchSpec {
            input_dim,
            feature_widths: self.feature_widths.clone(),
            classifier_hidden: self.classifier_hidden.clone(),
            domain_hidden: self.domain_hidden.clone(),
            classes,
            batch_norm: self.batch_norm,
            residual_stride: self.residual_stride,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub kind: DataKind,
    pub blobs: BlobsSpec,
    /// Points per moons domain.
    pub moons_n: usize,
    pub moons_noise: f64,
    /// Target rotation in degrees.
    pub rotation_deg: f64,
    pub translation: Vec<f64>,
    pub scale: f64,
    /// Gaussian noise added to target features.
    pub noise_std: f64,
    pub source_images: Option<PathBuf>,
    pub source_labels: Option<PathBuf>,
    pub target_images: Option<PathBuf>,
    pub target_labels: Option<PathBuf>,
    pub source_path: Option<PathBuf>,
    pub target_path: Option<PathBuf>,
    /// Vocabulary size of sparse files.
    pub sparse_dim: usize,
    /// Keep target labels for reporting; they never reach the optimizer.
    pub target_labeled: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DataKind::Blobs,
            blobs: BlobsSpec::default(),
            moons_n: 600,
            moons_noise: 0.1,
            rotation_deg: 0.0,
            translation: vec![2.0, 2.0],
            scale: 1.0,
            noise_std: 0.0,
            source_images: None,
            source_labels: None,
            target_images: None,
            target_labels: None,
            source_path: None,
            target_path: None,
            sparse_dim: 0,
            target_labeled: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub seeds: Vec<u64>,
    pub noise_stds: Vec<f64>,
    pub lambdas: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            seeds: vec![1, 2, 3, 4, 5],
            noise_stds: vec![0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
            lambdas: vec![0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub sweep: SweepConfig,
    pub gendata_format: GenFormat,
}

pub const PRESETS: [&str; 4] = ["sentiment", "digits", "desk-moons", "desk-blobs"];

/// Every accepted key, in the order they are written out.
pub const KEYS: &[&str] = &[
    "preset",
    "train.epochs",
    "train.batch_size",
    "train.learning_rate",
    "train.momentum",
    "train.lambda",
    "train.beta",
    "train.schedule",
    "train.seed",
    "train.eval_every",
    "train.method",
    "model.feature_widths",
    "model.classifier_hidden",
    "model.domain_hidden",
    "model.batch_norm",
    "model.residual_stride",
    "model.precision",
    "data.kind",
    "data.classes",
    "data.n_per_class",
    "data.dim",
    "data.radius",
    "data.cluster_std",
    "data.moons_n",
    "data.moons_noise",
    "data.rotation_deg",
    "data.translation",
    "data.scale",
    "data.noise_std",
    "data.source_images",
    "data.source_labels",
    "data.target_images",
    "data.target_labels",
    "data.source_path",
    "data.target_path",
    "data.sparse_dim",
    "data.target_labeled",
    "sweep.seeds",
    "sweep.noise_stds",
    "sweep.lambdas",
    "gendata.format",
];

fn type_err(key: &str, want: &str, got: &Value) -> Error {
    Error::Config {
        key: key.to_string(),
        msg: format!("expected {want}, got {} `{got}`", got.type_str()),
    }
}

fn range_err(key: &str, msg: impl fmt::Display) -> Error {
    Error::Config {
        key: key.to_string(),
        msg: msg.to_string(),
    }
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(type_err(key, "a number", v)),
    }
}

fn as_u64(key: &str, v: &Value) -> Result<u64> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        Value::Integer(i) => Err(range_err(key, format!("must be non-negative, got {i}"))),
        _ => Err(type_err(key, "an integer", v)),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    as_u64(key, v).map(|u| u as usize)
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| type_err(key, "a boolean", v))
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| type_err(key, "a string", v))
}

fn as_list<T>(key: &str, v: &Value, item: impl Fn(&str, &Value) -> Result<T>) -> Result<Vec<T>> {
    v.as_array()
        .ok_or_else(|| type_err(key, "an array", v))?
        .iter()
        .map(|x| item(key, x))
        .collect()
}

fn as_enum<T: for<'de> Deserialize<'de>>(key: &str, v: &Value, choices: &str) -> Result<T> {
    let s = as_str(key, v)?;
    T::deserialize(Value::String(s.to_string()))
        .map_err(|_| range_err(key, format!("unknown value `{s}`; expected one of {choices}")))
}

fn path_value(p: &Option<PathBuf>) -> Option<Value> {
    p.as_ref().map(|p| Value::String(p.display().to_string()))
}

fn enum_value<T: Serialize>(t: &T) -> Value {
    Value::try_from(t).expect("enums serialize to strings")
}

fn floats(xs: &[f64]) -> Value {
    Value::Array(xs.iter().map(|&x| Value::Float(x)).collect())
}

fn ints<T: Copy + Into<u64>>(xs: &[T]) -> Value {
    Value::Array(xs.iter().map(|&x| Value::Integer(x.into() as i64)).collect())
}

fn usizes(xs: &[usize]) -> Value {
    Value::Array(xs.iter().map(|&x| Value::Integer(x as i64)).collect())
}

/// Closest known key by normalized Damerau-Levenshtein similarity, trying
/// the bare name within each section as well.
pub fn suggest_key(key: &str) -> Option<&'static str> {
    let leaf = key.rsplit('.').next().unwrap_or(key);
    let score = |k: &str| {
        let k_leaf = k.rsplit('.').next().unwrap_or(k);
        strsim::normalized_damerau_levenshtein(key, k).max(strsim::normalized_damerau_levenshtein(leaf, k_leaf))
    };
    KEYS.iter()
        .map(|&k| (k, score(k)))
        .filter(|&(_, s)| s >= 0.6)
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| k)
}

fn unknown_key(key: &str) -> Error {
    Error::UnknownKey {
        key: key.to_string(),
        suggestion: suggest_key(key).map(str::to_string),
    }
}

/// Flattens nested tables into dotted keys, in document order.
fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

/// Parses `--set key=value`; the value is read as a TOML literal and falls
/// back to a bare string.
pub fn parse_override(arg: &str) -> Result<(String, Value)> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("override `{arg}` is not of the form key=value")))?;
    let key = key.trim().to_string();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key, value))
}

impl RunConfig {
    /// Built-in hyperparameter families.
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = RunConfig {
            preset: Some(name.to_string()),
            ..RunConfig::default()
        };
        let t = &mut c.train;
        match name {
            "sentiment" => {
                (t.lambda, t.beta, t.learning_rate, t.momentum, t.batch_size) = (0.5, 0.1, 0.001, 0.9, 128);
                c.data.kind = DataKind::Sparse;
                c.model.feature_widths = vec![64, 64];
                c.model.domain_hidden = vec![64];
            }
            "digits" => {
                (t.lambda, t.beta, t.learning_rate, t.momentum, t.batch_size) = (1.0, 0.2, 0.01, 0.9, 128);
                c.data.kind = DataKind::Idx;
                c.model.feature_widths = vec![128, 64];
                c.model.domain_hidden = vec![64];
            }
            "desk-moons" => {
                (t.lambda, t.beta, t.learning_rate, t.momentum, t.batch_size) = (0.3, 1.0, 0.01, 0.9, 64);
                t.epochs = 30;
                c.data.kind = DataKind::Moons;
                c.data.moons_n = 600;
                c.data.moons_noise = 0.1;
                c.data.rotation_deg = 60.0;
                c.data.translation = vec![];
            }
            "desk-blobs" => {
                (t.lambda, t.beta, t.learning_rate, t.momentum, t.batch_size) = (1.0, 10.0, 0.01, 0.9, 64);
                t.epochs = 200;
                c.data.kind = DataKind::Blobs;
                c.data.blobs = BlobsSpec::default();
                c.data.translation = vec![2.0, 2.0];
            }
            other => {
                return Err(range_err(
                    "preset",
                    format!("unknown preset `{other}`; expected one of {}", PRESETS.join(", ")),
                ))
            }
        }
        Ok(c)
    }

    /// Parses config text. Relative data paths resolve against `base`.
    pub fn from_toml_str(text: &str, base: Option<&Path>) -> Result<Self> {
        Self::from_entries(Self::entries_from_str(text)?, base)
    }

    pub fn entries_from_str(text: &str) -> Result<Vec<(String, Value)>> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse {
            path: PathBuf::from("<config>"),
            line: e.span().map(|s| text[..s.start].lines().count().max(1)).unwrap_or(0),
            msg: e.message().to_string(),
        })?;
        let mut entries = Vec::new();
        flatten("", &table, &mut entries);
        Ok(entries)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries = Self::entries_from_str(&text).map_err(|e| match e {
            Error::Parse { line, msg, .. } => Error::Parse {
                path: path.to_path_buf(),
                line,
                msg,
            },
            other => other,
        })?;
        Self::from_entries(entries, path.parent())
    }

    /// Applies entries on top of the defaults, the preset first.
    pub fn from_entries(entries: Vec<(String, Value)>, base: Option<&Path>) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply(entries, base)?;
        Ok(c)
    }

    /// Applies entries on top of `self`. A preset among them resets every
    /// field to that preset before the other entries are applied.
    pub fn apply(&mut self, entries: Vec<(String, Value)>, base: Option<&Path>) -> Result<()> {
        let (presets, rest): (Vec<_>, Vec<_>) = entries.into_iter().partition(|(k, _)| k == "preset");
        if let Some((key, v)) = presets.last() {
            *self = Self::preset(as_str(key, v)?)?;
        }
        for (k, v) in &rest {
            self.set(k, v, base)?;
        }
        self.validate()
    }

    fn set(&mut self, key: &str, v: &Value, base: Option<&Path>) -> Result<()> {
        let path = |v: &Value| -> Result<Option<PathBuf>> {
            let p = PathBuf::from(as_str(key, v)?);
            Ok(Some(match base {
                Some(b) if p.is_relative() && !b.as_os_str().is_empty() => b.join(p),
                _ => p,
            }))
        };
        let t = &mut self.train;
        let m = &mut self.model;
        let d = &mut self.data;
        match key {
            "train.epochs" => t.epochs = as_usize(key, v)?,
            "train.batch_size" => t.batch_size = as_usize(key, v)?,
            "train.learning_rate" => t.learning_rate = as_f64(key, v)?,
            "train.momentum" => t.momentum = as_f64(key, v)?,
            "train.lambda" => t.lambda = as_f64(key, v)?,
            "train.beta" => t.beta = as_f64(key, v)?,
            "train.schedule" => t.schedule = as_enum::<GrlSchedule>(key, v, "dann, constant")?,
            "train.seed" => t.seed = as_u64(key, v)?,
            "train.eval_every" => t.eval_every = as_usize(key, v)?,
            "train.method" => {
                let s = as_str(key, v)?;
                t.method = Method::parse(s).ok_or_else(|| {
                    range_err(key, format!("unknown method `{s}`; expected artn, dann or source_only"))
                })?;
            }
            "model.feature_widths" => m.feature_widths = as_list(key, v, as_usize)?,
            "model.classifier_hidden" => m.classifier_hidden = as_list(key, v, as_usize)?,
            "model.domain_hidden" => m.domain_hidden = as_list(key, v, as_usize)?,
            "model.batch_norm" => m.batch_norm = as_bool(key, v)?,
            "model.residual_stride" => m.residual_stride = as_usize(key, v)?,
            "model.precision" => m.precision = as_enum(key, v, "f64, f32")?,
            "data.kind" => d.kind = as_enum(key, v, "blobs, moons, idx, sparse")?,
            "data.classes" => d.blobs.classes = as_usize(key, v)?,
            "data.n_per_class" => d.blobs.n_per_class = as_usize(key, v)?,
            "data.dim" => d.blobs.dim = as_usize(key, v)?,
            "data.radius" => d.blobs.radius = as_f64(key, v)?,
            "data.cluster_std" => d.blobs.cluster_std = as_f64(key, v)?,
            "data.moons_n" => d.moons_n = as_usize(key, v)?,
            "data.moons_noise" => d.moons_noise = as_f64(key, v)?,
            "data.rotation_deg" => d.rotation_deg = as_f64(key, v)?,
            "data.translation" => d.translation = as_list(key, v, as_f64)?,
            "data.scale" => d.scale = as_f64(key, v)?,
            "data.noise_std" => d.noise_std = as_f64(key, v)?,
            "data.source_images" => d.source_images = path(v)?,
            "data.source_labels" => d.source_labels = path(v)?,
            "data.target_images" => d.target_images = path(v)?,
            "data.target_labels" => d.target_labels = path(v)?,
            "data.source_path" => d.source_path = path(v)?,
            "data.target_path" => d.target_path = path(v)?,
            "data.sparse_dim" => d.sparse_dim = as_usize(key, v)?,
            "data.target_labeled" => d.target_labeled = as_bool(key, v)?,
            "sweep.seeds" => self.sweep.seeds = as_list(key, v, as_u64)?,
            "sweep.noise_stds" => self.sweep.noise_stds = as_list(key, v, as_f64)?,
            "sweep.lambdas" => self.sweep.lambdas = as_list(key, v, as_f64)?,
            "gendata.format" => self.gendata_format = as_enum(key, v, "idx, sparse")?,
            "preset" => *self = Self::preset(as_str(key, v)?)?,
            _ => return Err(unknown_key(key)),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let m = &self.model;
        let d = &self.data;
        if m.feature_widths.is_empty() || m.feature_widths.contains(&0) {
            return Err(range_err(
                "model.feature_widths",
                "needs at least one layer, all widths positive",
            ));
        }
        for (key, w) in [
            ("model.classifier_hidden", &m.classifier_hidden),
            ("model.domain_hidden", &m.domain_hidden),
        ] {
            if w.contains(&0) {
                return Err(range_err(key, "widths must be positive"));
            }
        }
        if m.residual_stride == 0 {
            return Err(range_err("model.residual_stride", "must be at least 1"));
        }
        let finite_nonneg = [
            ("data.radius", d.blobs.radius),
            ("data.cluster_std", d.blobs.cluster_std),
            ("data.moons_noise", d.moons_noise),
            ("data.noise_std", d.noise_std),
        ];
        for (key, v) in finite_nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(range_err(key, format!("must be finite and non-negative, got {v}")));
            }
        }
        if !(d.scale.is_finite() && d.scale > 0.0) {
            return Err(range_err("data.scale", format!("must be positive, got {}", d.scale)));
        }
        if !d.rotation_deg.is_finite() || d.translation.iter().any(|t| !t.is_finite()) {
            return Err(range_err("data.translation", "shift parameters must be finite"));
        }
        match d.kind {
            DataKind::Blobs => {
                if d.blobs.classes < 2 {
                    return Err(range_err("data.classes", "need at least 2 classes"));
                }
                if d.blobs.n_per_class == 0 {
                    return Err(range_err("data.n_per_class", "must be at least 1"));
                }
                if d.blobs.dim == 0 {
                    return Err(range_err("data.dim", "must be at least 1"));
                }
                if d.translation.len() > d.blobs.dim {
                    return Err(range_err(
                        "data.translation",
                        format!("more entries than data.dim = {}", d.blobs.dim),
                    ));
                }
            }
            DataKind::Moons => {
                if d.moons_n < 2 || !d.moons_n.is_multiple_of(2) {
                    return Err(range_err(
                        "data.moons_n",
                        format!("must be even and at least 2, got {}", d.moons_n),
                    ));
                }
            }
            DataKind::Idx => {
                for (key, p) in [
                    ("data.source_images", &d.source_images),
                    ("data.source_labels", &d.source_labels),
                    ("data.target_images", &d.target_images),
                ] {
                    if p.is_none() {
                        return Err(range_err(key, "required when data.kind = \"idx\""));
                    }
                }
            }
            DataKind::Sparse => {
                for (key, p) in [
                    ("data.source_path", &d.source_path),
                    ("data.target_path", &d.target_path),
                ] {
                    if p.is_none() {
                        return Err(range_err(key, "required when data.kind = \"sparse\""));
                    }
                }
                if d.sparse_dim == 0 {
                    return Err(range_err("data.sparse_dim", "required when data.kind = \"sparse\""));
                }
            }
        }
        for &s in &self.sweep.noise_stds {
            if !(s.is_finite() && s >= 0.0) {
                return Err(range_err("sweep.noise_stds", format!("must be non-negative, got {s}")));
            }
        }
        for &l in &self.sweep.lambdas {
            if !(l.is_finite() && l >= 0.0) {
                return Err(range_err("sweep.lambdas", format!("must be non-negative, got {l}")));
            }
        }
        if self.sweep.seeds.is_empty() {
            return Err(range_err("sweep.seeds", "needs at least one seed"));
        }
        Ok(())
    }

    /// Every key with its resolved value; unset paths are omitted.
    pub fn entries(&self) -> Vec<(&'static str, Value)> {
        let t = &self.train;
        let m = &self.model;
        let d = &self.data;
        let s = &self.sweep;
        let int = |x: usize| Value::Integer(x as i64);
        let mut out: Vec<(&'static str, Option<Value>)> = vec![
            ("train.epochs", Some(int(t.epochs))),
            ("train.batch_size", Some(int(t.batch_size))),
            ("train.learning_rate", Some(Value::Float(t.learning_rate))),
            ("train.momentum", Some(Value::Float(t.momentum))),
            ("train.lambda", Some(Value::Float(t.lambda))),
            ("train.beta", Some(Value::Float(t.beta))),
            ("train.schedule", Some(enum_value(&t.schedule))),
            ("train.seed", Some(Value::Integer(t.seed as i64))),
            ("train.eval_every", Some(int(t.eval_every))),
            ("train.method", Some(Value::String(t.method.as_str().into()))),
            ("model.feature_widths", Some(usizes(&m.feature_widths))),
            ("model.classifier_hidden", Some(usizes(&m.classifier_hidden))),
            ("model.domain_hidden", Some(usizes(&m.domain_hidden))),
            ("model.batch_norm", Some(Value::Boolean(m.batch_norm))),
            ("model.residual_stride", Some(int(m.residual_stride))),
            ("model.precision", Some(enum_value(&m.precision))),
            ("data.kind", Some(enum_value(&d.kind))),
            ("data.classes", Some(int(d.blobs.classes))),
            ("data.n_per_class", Some(int(d.blobs.n_per_class))),
            ("data.dim", Some(int(d.blobs.dim))),
            ("data.radius", Some(Value::Float(d.blobs.radius))),
            ("data.cluster_std", Some(Value::Float(d.blobs.cluster_std))),
            ("data.moons_n", Some(int(d.moons_n))),
            ("data.moons_noise", Some(Value::Float(d.moons_noise))),
            ("data.rotation_deg", Some(Value::Float(d.rotation_deg))),
            ("data.translation", Some(floats(&d.translation))),
            ("data.scale", Some(Value::Float(d.scale))),
            ("data.noise_std", Some(Value::Float(d.noise_std))),
            ("data.source_images", path_value(&d.source_images)),
            ("data.source_labels", path_value(&d.source_labels)),
            ("data.target_images", path_value(&d.target_images)),
            ("data.target_labels", path_value(&d.target_labels)),
            ("data.source_path", path_value(&d.source_path)),
            ("data.target_path", path_value(&d.target_path)),
            ("data.sparse_dim", Some(int(d.sparse_dim))),
            ("data.target_labeled", Some(Value::Boolean(d.target_labeled))),
            ("sweep.seeds", Some(ints(&s.seeds))),
            ("sweep.noise_stds", Some(floats(&s.noise_stds))),
            ("sweep.lambdas", Some(floats(&s.lambdas))),
            ("gendata.format", Some(enum_value(&self.gendata_format))),
        ];
        out.retain(|(_, v)| v.is_some());
        out.into_iter().map(|(k, v)| (k, v.unwrap())).collect()
    }

    /// Fully resolved config text. Parsing it back yields `self` minus the
    /// preset name, which has already been expanded.
    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, value) in self.entries() {
            let (sec, leaf) = key.split_once('.').expect("all resolved keys are sectioned");
            if sec != section {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{sec}]\n"));
                section = sec;
            }
            out.push_str(&format!("{leaf} = {value}\n"));
        }
        out
    }
}
