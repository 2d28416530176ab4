//! Commands behind the `artn` binary: config resolution, dataset loading,
//! and the train / gradcheck / sweep / gendata drivers with their on-disk
//! artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DataKind, GenFormat, Precision, RunConfig};
use crate::data::{
    add_gaussian_noise, make_blobs_pair, make_two_moons_pair, read_idx, read_idx_images, read_sparse_bow,
    write_idx_images, write_idx_labels, write_sparse_bow, DomainDataset, ShiftSpec,
};
use crate::error::{Error, Result};
use crate::gradcheck::{self, OpCheck};
use crate::model::ArtnModel;
use crate::nn::encode_checkpoint;
use crate::rng::derive_seed;
use crate::scalar::Scalar;
use crate::train::{
    evaluate, metrics_csv, run_lambda_sweep, run_noise_sweep, run_regularizer_ablation, train, EvalPath, Experiment,
    Method, MetricsRecord,
};

pub const SEED_ENV: &str = "ARTN_SEED";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

/// Where a run's settings come from, lowest precedence first: config file
/// (or manifest), `ARTN_SEED`, `--set` overrides, `--seed`.
#[derive(Debug, Clone, Default)]
pub struct Invocation {
    pub config: Option<PathBuf>,
    pub sets: Vec<String>,
    pub seed: Option<u64>,
    pub env_seed: Option<String>,
}

impl Invocation {
    pub fn with_process_env(mut self) -> Self {
        self.env_seed = std::env::var(SEED_ENV).ok();
        self
    }
}

pub fn resolve_config(inv: &Invocation) -> Result<RunConfig> {
    let mut entries = Vec::new();
    let mut base = None;
    if let Some(path) = &inv.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
                path: path.clone(),
                msg: e.to_string(),
            })?;
            entries = RunConfig::entries_from_str(&manifest.config_toml)?;
        } else {
            entries = RunConfig::entries_from_str(&text).map_err(|e| match e {
                Error::Parse { line, msg, .. } => Error::Parse {
                    path: path.clone(),
                    line,
                    msg,
                },
                other => other,
            })?;
            base = Some(std::path::absolute(path).map_err(|e| Error::io(path, e))?);
        }
    }
    if let Some(raw) = &inv.env_seed {
        let seed: u64 = raw.trim().parse().map_err(|_| Error::Config {
            key: SEED_ENV.into(),
            msg: format!("expected a non-negative integer, got `{raw}`"),
        })?;
        entries.push(("train.seed".into(), toml::Value::Integer(seed as i64)));
    }
    for s in &inv.sets {
        entries.push(crate::config::parse_override(s)?);
    }
    if let Some(seed) = inv.seed {
        entries.push(("train.seed".into(), toml::Value::Integer(seed as i64)));
    }
    RunConfig::from_entries(entries, base.as_deref().and_then(Path::parent))
}

fn shift_of(cfg: &RunConfig) -> ShiftSpec {
    ShiftSpec {
        rotation: cfg.data.rotation_deg.to_radians(),
        translation: cfg.data.translation.clone(),
        scale: cfg.data.scale,
        noise_std: 0.0,
        seed: 0,
    }
}

/// Synthetic pair for `seed`, or the configured files (which ignore it).
pub fn load_pair(cfg: &RunConfig, seed: u64) -> Result<(DomainDataset, DomainDataset)> {
    let d = &cfg.data;
    let (source, mut target) = match d.kind {
        DataKind::Blobs => make_blobs_pair(&d.blobs, &shift_of(cfg), seed)?,
        DataKind::Moons => make_two_moons_pair(d.moons_n, d.moons_noise, d.rotation_deg.to_radians(), seed)?,
        DataKind::Idx => {
            let need = |p: &Option<PathBuf>| p.clone().expect("validated");
            let source = read_idx(&need(&d.source_images), &need(&d.source_labels))?;
            let mut target = match &d.target_labels {
                Some(labels) => read_idx(&need(&d.target_images), labels)?,
                None => {
                    let path = need(&d.target_images);
                    let (x, _, _) = read_idx_images(&path)?;
                    DomainDataset::new(x, None, source.classes, 1, stem(&path))?
                }
            };
            target.domain_label = 1;
            target.classes = target.classes.max(source.classes);
            (source, target)
        }
        DataKind::Sparse => {
            let source = read_sparse_bow(d.source_path.as_ref().expect("validated"), d.sparse_dim)?;
            let mut target = read_sparse_bow(d.target_path.as_ref().expect("validated"), d.sparse_dim)?;
            target.domain_label = 1;
            (source, target)
        }
    };
    if !d.target_labeled {
        target.class_labels = None;
    }
    Ok((source, target))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Datasets of a training run: the configured pair with target noise added.
pub fn training_data(cfg: &RunConfig) -> Result<(DomainDataset, DomainDataset)> {
    let (source, mut target) = load_pair(cfg, cfg.train.seed)?;
    if cfg.data.noise_std > 0.0 {
        let seed = derive_seed(cfg.train.seed, &[0x6e, cfg.data.noise_std.to_bits()]);
        target = add_gaussian_noise(&target, cfg.data.noise_std, seed)?;
    }
    Ok((source, target))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFingerprint {
    pub role: String,
    pub name: String,
    pub rows: usize,
    pub dim: usize,
    pub sha256: String,
}

impl DatasetFingerprint {
    fn of(role: &str, ds: &DomainDataset) -> Self {
        DatasetFingerprint {
            role: role.into(),
            name: ds.name.clone(),
            rows: ds.len(),
            dim: ds.dim(),
            sha256: ds.fingerprint(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to repeat a command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    /// Fully resolved config; `artn <command> --config manifest.json`
    /// re-runs it.
    pub config_toml: String,
    pub config: RunConfig,
    pub datasets: Vec<DatasetFingerprint>,
    pub artifacts: BTreeMap<String, Artifact>,
    pub duration_secs: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

struct ArtifactWriter<'a> {
    dir: &'a Path,
    artifacts: BTreeMap<String, Artifact>,
}

impl<'a> ArtifactWriter<'a> {
    fn new(dir: &'a Path) -> Result<Self> {
        ensure_dir(dir)?;
        Ok(ArtifactWriter {
            dir,
            artifacts: BTreeMap::new(),
        })
    }

    fn put(&mut self, role: &str, file: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(file);
        write_atomic(&path, bytes)?;
        self.record(role, file, bytes);
        Ok(path)
    }

    fn record(&mut self, role: &str, file: &str, bytes: &[u8]) {
        self.artifacts.insert(
            role.into(),
            Artifact {
                path: file.into(),
                sha256: sha256_hex(bytes),
            },
        );
    }

    fn finish(
        self,
        command: &str,
        cfg: &RunConfig,
        datasets: Vec<DatasetFingerprint>,
        started: Instant,
    ) -> Result<RunManifest> {
        let manifest = RunManifest {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config_toml: cfg.to_toml(),
            config: cfg.clone(),
            datasets,
            artifacts: self.artifacts,
            duration_secs: started.elapsed().as_secs_f64(),
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_atomic(&self.dir.join(MANIFEST_FILE), json.as_bytes())?;
        Ok(manifest)
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub records: Vec<MetricsRecord>,
    pub source_acc: f64,
    pub target_acc: Option<f64>,
    pub manifest: RunManifest,
}

/// Checkpoint bytes, per-step records, source and target accuracy.
type Trained = (Vec<u8>, Vec<MetricsRecord>, f64, Option<f64>);

fn train_as<S: Scalar>(cfg: &RunConfig, source: &DomainDataset, target: &DomainDataset) -> Result<Trained> {
    let arch = cfg.model.arch(source.dim(), source.classes.max(target.classes));
    let model = ArtnModel::<S>::new(&arch, cfg.train.seed)?;
    let (model, records) = train(model, &cfg.train, source, target)?;
    let with_t = cfg.train.method == Method::Artn;
    let source_acc = evaluate(&model, source, EvalPath::Source, with_t)?;
    let target_acc = match target.class_labels {
        Some(_) => Some(evaluate(&model, target, EvalPath::Target, with_t)?),
        None => None,
    };
    let ckpt = encode_checkpoint(&model.named_state());
    Ok((ckpt, records, source_acc, target_acc))
}

/// Trains once and writes metrics, checkpoint, resolved config and manifest
/// into `out`.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    let started = Instant::now();
    let (source, target) = training_data(cfg)?;
    log::info!(
        "training {} on {} source / {} target rows",
        cfg.train.method,
        source.len(),
        target.len()
    );
    let (ckpt, records, source_acc, target_acc) = match cfg.model.precision {
        Precision::F64 => train_as::<f64>(cfg, &source, &target)?,
        Precision::F32 => train_as::<f32>(cfg, &source, &target)?,
    };
    let mut w = ArtifactWriter::new(out)?;
    w.put("metrics", METRICS_FILE, metrics_csv(&records).as_bytes())?;
    w.put("checkpoint", CHECKPOINT_FILE, &ckpt)?;
    w.put("config", CONFIG_FILE, cfg.to_toml().as_bytes())?;
    let datasets = vec![
        DatasetFingerprint::of("source", &source),
        DatasetFingerprint::of("target", &target),
    ];
    let manifest = w.finish("train", cfg, datasets, started)?;
    Ok(TrainSummary {
        records,
        source_acc,
        target_acc,
        manifest,
    })
}

/// Report text and success flag of the gradient suite.
pub fn cmd_gradcheck(scope: &str, checks: &[OpCheck]) -> Result<(bool, String)> {
    let report = gradcheck::run(scope, checks)?;
    let mut text = report.to_string();
    let ok = report.all_passed();
    if !ok {
        text.push_str(&format!("failing ops: {}\n", report.failing().join(", ")));
    }
    Ok((ok, text))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    Noise,
    Lambda,
    Ablation,
}

impl SweepKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "noise" => Some(SweepKind::Noise),
            "lambda" => Some(SweepKind::Lambda),
            "ablation" => Some(SweepKind::Ablation),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SweepKind::Noise => "noise",
            SweepKind::Lambda => "lambda",
            SweepKind::Ablation => "ablation",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepSummary {
    pub table: String,
    pub long_table: String,
    pub cells_ok: usize,
    pub cells_total: usize,
    pub manifest: RunManifest,
}

/// Runs a sweep over `cfg.sweep.seeds` and writes `<kind>.csv` plus
/// `<kind>_long.csv`.
pub fn cmd_sweep(kind: SweepKind, cfg: &RunConfig, out: &Path) -> Result<SweepSummary> {
    let started = Instant::now();
    let owned = cfg.clone();
    let factory = move |seed: u64| load_pair(&owned, seed);
    let (s0, t0) = load_pair(cfg, cfg.sweep.seeds[0])?;
    let exp = Experiment {
        arch: cfg.model.arch(s0.dim(), s0.classes),
        train: cfg.train.clone(),
        seeds: cfg.sweep.seeds.clone(),
        data: &factory,
    };
    let (table, long_table, cells_ok, cells_total) = match kind {
        SweepKind::Noise => {
            let s = run_noise_sweep(&exp, &cfg.sweep.noise_stds)?;
            (s.to_csv(), s.to_long_csv(), s.cells_ok, s.cells_total)
        }
        SweepKind::Lambda => {
            let s = run_lambda_sweep(&exp, &cfg.sweep.lambdas)?;
            (s.to_csv(), s.to_long_csv(), s.cells_ok, s.cells_total)
        }
        SweepKind::Ablation => {
            let r = run_regularizer_ablation(&exp)?;
            (r.to_csv(), r.to_long_csv(), r.cells_ok(), 2 * r.pairs.len())
        }
    };
    let mut w = ArtifactWriter::new(out)?;
    let name = kind.as_str();
    w.put("table", &format!("{name}.csv"), table.as_bytes())?;
    w.put("long_table", &format!("{name}_long.csv"), long_table.as_bytes())?;
    w.put("config", CONFIG_FILE, cfg.to_toml().as_bytes())?;
    let datasets = vec![
        DatasetFingerprint::of("source", &s0),
        DatasetFingerprint::of("target", &t0),
    ];
    let manifest = w.finish(&format!("sweep {name}"), cfg, datasets, started)?;
    Ok(SweepSummary {
        table,
        long_table,
        cells_ok,
        cells_total,
        manifest,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantization {
    /// Feature value mapped to pixel 0.
    pub min: f64,
    /// Feature value mapped to pixel 255.
    pub max: f64,
}

/// Sidecar describing generated files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataDescription {
    pub format: GenFormat,
    pub generator: DataKind,
    pub seed: u64,
    pub classes: usize,
    pub dim: usize,
    pub source_rows: usize,
    pub target_rows: usize,
    pub quantization: Option<Quantization>,
    pub files: BTreeMap<String, Artifact>,
}

pub const DESCRIPTION_FILE: &str = "dataset.json";
pub const DATA_CONFIG_FILE: &str = "data.toml";

#[derive(Debug, Clone)]
pub struct GendataSummary {
    /// Exactly what a reader of the written files gets back.
    pub source: DomainDataset,
    pub target: DomainDataset,
    pub description: DataDescription,
}

fn quantize(v: f64, q: &Quantization) -> u8 {
    if q.max > q.min {
        ((v - q.min) / (q.max - q.min) * 255.0).round().clamp(0.0, 255.0) as u8
    } else {
        0
    }
}

/// Writes the configured synthetic pair as IDX files (features quantized to
/// bytes through one shared min/max) or sparse text, with a sidecar
/// description and a `data.toml` that points a run at the files.
pub fn cmd_gendata(cfg: &RunConfig, out: &Path) -> Result<GendataSummary> {
    if matches!(cfg.data.kind, DataKind::Idx | DataKind::Sparse) {
        return Err(Error::Config {
            key: "data.kind".into(),
            msg: "gendata needs a generator (blobs or moons)".into(),
        });
    }
    let started = Instant::now();
    let mut cfg = cfg.clone();
    cfg.data.target_labeled = true;
    let cfg = &cfg;
    let (source, target) = training_data(cfg)?;
    let mut w = ArtifactWriter::new(out)?;
    let (source_back, target_back, quantization, data_toml) = match cfg.gendata_format {
        GenFormat::Idx => {
            let all = source.features.data().iter().chain(target.features.data());
            let q = Quantization {
                min: all.clone().copied().fold(f64::INFINITY, f64::min),
                max: all.copied().fold(f64::NEG_INFINITY, f64::max),
            };
            let dim = source.dim();
            let mut files = Vec::new();
            for (role, ds) in [("source", &source), ("target", &target)] {
                let pixels: Vec<u8> = ds.features.data().iter().map(|&v| quantize(v, &q)).collect();
                let images = format!("{role}-images.idx");
                let labels = format!("{role}-labels.idx");
                write_idx_images(&out.join(&images), 1, dim, &pixels)?;
                write_idx_labels(&out.join(&labels), ds.labels()?)?;
                for f in [&images, &labels] {
                    let bytes = fs::read(out.join(f)).map_err(|e| Error::io(out.join(f), e))?;
                    w.record(&f.replace(".idx", ""), f, &bytes);
                }
                files.push((images, labels));
            }
            let source_back = read_idx(&out.join(&files[0].0), &out.join(&files[0].1))?;
            let mut target_back = read_idx(&out.join(&files[1].0), &out.join(&files[1].1))?;
            target_back.domain_label = 1;
            let toml = format!(
                "data.kind = \"idx\"\ndata.source_images = \"{}\"\ndata.source_labels = \"{}\"\ndata.target_images = \"{}\"\ndata.target_labels = \"{}\"\n",
                files[0].0, files[0].1, files[1].0, files[1].1
            );
            (source_back, target_back, Some(q), toml)
        }
        GenFormat::Sparse => {
            for (role, ds) in [("source", &source), ("target", &target)] {
                let file = format!("{role}.txt");
                write_sparse_bow(&out.join(&file), ds)?;
                let bytes = fs::read(out.join(&file)).map_err(|e| Error::io(out.join(&file), e))?;
                w.record(role, &file, &bytes);
            }
            let source_back = read_sparse_bow(&out.join("source.txt"), source.dim())?;
            let mut target_back = read_sparse_bow(&out.join("target.txt"), source.dim())?;
            target_back.domain_label = 1;
            let toml = format!(
                "data.kind = \"sparse\"\ndata.source_path = \"source.txt\"\ndata.target_path = \"target.txt\"\ndata.sparse_dim = {}\n",
                source.dim()
            );
            (source_back, target_back, None, toml)
        }
    };
    w.put("data_config", DATA_CONFIG_FILE, data_toml.as_bytes())?;
    let description = DataDescription {
        format: cfg.gendata_format,
        generator: cfg.data.kind,
        seed: cfg.train.seed,
        classes: source.classes,
        dim: source.dim(),
        source_rows: source.len(),
        target_rows: target.len(),
        quantization,
        files: w.artifacts.clone(),
    };
    let json = serde_json::to_string_pretty(&description).expect("description serializes");
    w.put("description", DESCRIPTION_FILE, json.as_bytes())?;
    let datasets = vec![
        DatasetFingerprint::of("source", &source),
        DatasetFingerprint::of("target", &target),
    ];
    w.finish("gendata", cfg, datasets, started)?;
    Ok(GendataSummary {
        source: source_back,
        target: target_back,
        description,
    })
}
