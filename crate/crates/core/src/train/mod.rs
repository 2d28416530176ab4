//! Training loop, evaluation and gradient-norm telemetry.

mod sweep;

pub use sweep::{
    run_cell, run_lambda_sweep, run_noise_sweep, run_regularizer_ablation, AblationPair, AblationReport, CellOutcome,
    CellSpec, DataFactory, Experiment, LambdaRow, LambdaSweep, NoiseRow, NoiseSweep,
};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{paired_batches, Batch, DomainDataset};
use crate::diagnostics::{argmax_rows, GrlSchedule};
use crate::error::{Error, Result};
use crate::model::{artn_loss, dann_loss, ArtnHyper, ArtnModel};
use crate::nn::{sgd_step, Mode, SgdState};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Artn,
    Dann,
    SourceOnly,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::SourceOnly, Method::Dann, Method::Artn];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Artn => "artn",
            Method::Dann => "dann",
            Method::SourceOnly => "source_only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub lambda: f64,
    pub beta: f64,
    pub schedule: GrlSchedule,
    pub seed: u64,
    /// Accuracies are computed every this many steps and at the last step;
    /// 0 means the last step only.
    pub eval_every: usize,
    pub method: Method,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            lambda: 1.0,
            beta: 0.2,
            schedule: GrlSchedule::Dann,
            seed: 0,
            eval_every: 0,
            method: Method::Artn,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Config { key: key.into(), msg });
        if self.epochs == 0 {
            return bad("train.epochs", "must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("train.batch_size", "must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(
                "train.learning_rate",
                format!("must be finite and positive, got {}", self.learning_rate),
            );
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return bad("train.momentum", format!("must lie in [0, 1), got {}", self.momentum));
        }
        for (key, v) in [("train.lambda", self.lambda), ("train.beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(key, format!("must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }

    /// Adaptation weights actually used by `method`.
    pub fn effective_hyper(&self) -> ArtnHyper {
        match self.method {
            Method::Artn => ArtnHyper {
                lambda: self.lambda,
                beta: self.beta,
                schedule: self.schedule,
            },
            Method::Dann => ArtnHyper {
                lambda: self.lambda,
                beta: 0.0,
                schedule: self.schedule,
            },
            Method::SourceOnly => ArtnHyper {
                lambda: 0.0,
                beta: 0.0,
                schedule: self.schedule,
            },
        }
    }
}

/// One logged optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// 1-based count of completed optimizer steps.
    pub step: usize,
    pub l_c: f64,
    pub l_s: f64,
    pub l_t: f64,
    pub r: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub gamma: f64,
    pub source_acc: Option<f64>,
    pub target_acc: Option<f64>,
    pub pad: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,step,loss_c,loss_s,loss_t,reg,total,grad_norm,gamma,source_acc,target_acc";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Metrics CSV text; unset accuracies are empty fields.
pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.step,
            r.l_c,
            r.l_s,
            r.l_t,
            r.r,
            r.total,
            r.grad_norm,
            r.gamma,
            opt(r.source_acc),
            opt(r.target_acc)
        )
        .unwrap();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradNormSummary {
    pub max: f64,
    pub min: f64,
    pub max_minus_min: f64,
    /// Population standard deviation.
    pub std: f64,
}

pub fn grad_norm_summary(records: &[MetricsRecord]) -> Result<GradNormSummary> {
    summarize(&records.iter().map(|r| r.grad_norm).collect::<Vec<_>>())
}

pub fn summarize(values: &[f64]) -> Result<GradNormSummary> {
    if values.is_empty() {
        return Err(Error::Empty("no gradient norms to summarize".into()));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(GradNormSummary {
        max,
        min,
        max_minus_min: max - min,
        std: var.sqrt(),
    })
}

/// `sqrt(Σ g²)` over every entry of every gradient tensor.
pub fn global_grad_norm<S: Scalar>(grads: &[&[Tensor<S>]]) -> f64 {
    grads
        .iter()
        .flat_map(|set| set.iter())
        .flat_map(|t| t.data().iter())
        .map(|&g| {
            let g = g.to_f64_lossy();
            g * g
        })
        .sum::<f64>()
        .sqrt()
}

/// Which classifier path to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalPath {
    /// `C(G(x))`
    Target,
    /// `C(T(G(x)))` for the full model, `C(G(x))` for the baselines.
    Source,
}

/// Classification accuracy along `path`. `uses_transform` selects whether
/// the source path runs through T.
pub fn evaluate<S: Scalar>(
    model: &ArtnModel<S>,
    ds: &DomainDataset,
    path: EvalPath,
    uses_transform: bool,
) -> Result<f64> {
    let labels = ds.labels()?;
    let x: Tensor<S> = ds.features.cast();
    let logits = match path {
        EvalPath::Source if uses_transform => model.predict_source(&x)?,
        _ => model.predict_target(&x)?,
    };
    Ok(accuracy(&logits.cast(), labels))
}

pub fn accuracy(logits: &Tensor<f64>, labels: &[usize]) -> f64 {
    let pred = argmax_rows(logits);
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

fn uses_batch_norm<S: Scalar>(model: &ArtnModel<S>) -> bool {
    [&model.g, &model.t, &model.c, &model.d]
        .iter()
        .any(|n| n.spec.layers.iter().any(|l| l.batch_norm))
}

/// Minibatch index pairs of one epoch. Pairs smaller than two samples are
/// dropped when batch norm is present (batch statistics need two rows).
fn epoch_pairs(
    n_s: usize,
    n_t: usize,
    cfg: &TrainConfig,
    epoch: usize,
    bn: bool,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let mut pairs = paired_batches(n_s, n_t, cfg.batch_size, cfg.seed, epoch as u64)?;
    if bn {
        pairs.retain(|(s, t)| s.len() >= 2 && t.len() >= 2);
    }
    Ok(pairs)
}

/// Runs the two-domain training procedure for a fixed epoch budget.
///
/// Each step draws a labeled source batch and a target batch, builds the
/// combined objective on one tape, back-propagates once and applies one SGD
/// update per parameter set. Target labels, if present, are only used for
/// reported accuracy.
pub fn train<S: Scalar>(
    mut model: ArtnModel<S>,
    cfg: &TrainConfig,
    source: &DomainDataset,
    target: &DomainDataset,
) -> Result<(ArtnModel<S>, Vec<MetricsRecord>)> {
    cfg.validate()?;
    source.labels()?;
    if source.dim() != model.input_dim() || target.dim() != model.input_dim() {
        return Err(Error::Shape {
            op: "train",
            lhs: vec![model.input_dim()],
            rhs: vec![source.dim(), target.dim()],
        });
    }
    let hyper = cfg.effective_hyper();
    let bn = uses_batch_norm(&model);
    let steps_per_epoch = epoch_pairs(source.len(), target.len(), cfg, 0, bn)?.len();
    if steps_per_epoch == 0 {
        return Err(Error::BatchSize {
            op: "train",
            batch: cfg.batch_size.min(source.len()).min(target.len()),
            min: 2,
        });
    }
    let total_steps = steps_per_epoch * cfg.epochs;
    let lr = S::of(cfg.learning_rate);
    let mom = S::of(cfg.momentum);
    let mut opt_g = SgdState::new(&model.g.params, lr, mom)?;
    let mut opt_t = SgdState::new(&model.t.params, lr, mom)?;
    let mut opt_c = SgdState::new(&model.c.params, lr, mom)?;
    let mut opt_d = SgdState::new(&model.d.params, lr, mom)?;
    let with_t = cfg.method == Method::Artn;

    let mut records = Vec::with_capacity(total_steps);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        for (is, it) in epoch_pairs(source.len(), target.len(), cfg, epoch, bn)? {
            let progress = step as f64 / total_steps as f64;
            let bs = Batch::<S>::from_indices(source, &is);
            let bt = Batch::<S>::from_indices(target, &it);
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let out = if with_t {
                artn_loss(&model, &bound, &hyper, &bs, &bt, progress, Mode::Train, &mut tape)?
            } else {
                dann_loss(&model, &bound, &hyper, &bs, &bt, progress, Mode::Train, &mut tape)?
            };
            let p = &out.parts;
            if ![p.l_c, p.l_s, p.l_t, p.r, out.total].iter().all(|v| v.is_finite()) {
                return Err(Error::Divergence {
                    step: step + 1,
                    what: "loss".into(),
                });
            }
            let grads = tape.backward(out.objective)?;
            let gg = bound.g.grads_or_zero(&grads);
            let gt = bound.t.grads_or_zero(&grads);
            let gc = bound.c.grads_or_zero(&grads);
            let gd = bound.d.grads_or_zero(&grads);
            let grad_norm = global_grad_norm(&[&gg, &gt, &gc, &gd]);
            if !grad_norm.is_finite() {
                return Err(Error::Divergence {
                    step: step + 1,
                    what: "gradient".into(),
                });
            }
            let some = |v: Vec<Tensor<S>>| v.into_iter().map(Some).collect::<Vec<_>>();
            sgd_step(&mut model.g.params, &some(gg), &mut opt_g)?;
            sgd_step(&mut model.t.params, &some(gt), &mut opt_t)?;
            sgd_step(&mut model.c.params, &some(gc), &mut opt_c)?;
            sgd_step(&mut model.d.params, &some(gd), &mut opt_d)?;
            model.apply_moments(&out.moments);
            step += 1;

            let eval_now = step == total_steps || (cfg.eval_every > 0 && step.is_multiple_of(cfg.eval_every));
            let (source_acc, target_acc) = if eval_now {
                let s = evaluate(&model, source, EvalPath::Source, with_t)?;
                let t = match target.class_labels {
                    Some(_) => Some(evaluate(&model, target, EvalPath::Target, with_t)?),
                    None => None,
                };
                (Some(s), t)
            } else {
                (None, None)
            };
            records.push(MetricsRecord {
                epoch,
                step,
                l_c: p.l_c,
                l_s: p.l_s,
                l_t: p.l_t,
                r: p.r,
                total: out.total,
                grad_norm,
                gamma: out.gamma,
                source_acc,
                target_acc,
                pad: None,
            });
        }
        log::debug!("epoch {epoch} done at step {step}");
    }
    Ok((model, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_arithmetic() {
        let s = summarize(&[2.0, 2.0, 2.0]).unwrap();
        assert_eq!((s.max, s.min, s.std), (2.0, 2.0, 0.0));
        let s = summarize(&[1.0, 3.0]).unwrap();
        assert_eq!((s.max, s.min, s.max_minus_min, s.std), (3.0, 1.0, 2.0, 1.0));
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn accuracy_of_constant_predictor() {
        let logits = Tensor::new(vec![10, 2], [1.0, 0.0].repeat(10)).unwrap();
        let labels: Vec<usize> = (0..10).map(|i| usize::from(i >= 7)).collect();
        assert!((accuracy(&logits, &labels) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.as_str()), Some(m));
        }
        assert_eq!(Method::parse("artm"), None);
    }

    #[test]
    fn config_validation_names_key() {
        let cfg = TrainConfig {
            momentum: 1.0,
            ..TrainConfig::default()
        };
        let e = cfg.validate().unwrap_err().to_string();
        assert!(e.contains("train.momentum"), "{e}");
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn csv_header_and_empty_fields() {
        let r = MetricsRecord {
            epoch: 0,
            step: 1,
            l_c: 0.5,
            l_s: 0.25,
            l_t: 0.125,
            r: -1.0,
            total: 0.1,
            grad_norm: 2.0,
            gamma: 0.0,
            source_acc: None,
            target_acc: Some(1.0),
            pad: None,
        };
        let csv = metrics_csv(&[r]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), METRICS_HEADER);
        assert_eq!(lines.next().unwrap(), "0,1,0.5,0.25,0.125,-1,0.1,2,0,,1");
    }
}
