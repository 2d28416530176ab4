//! Multi-run experiment drivers. Cells are independent runs executed in
//! parallel; results come back in cell order.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{add_gaussian_noise, DomainDataset};
use crate::error::{Error, Result};
use crate::model::{ArchSpec, ArtnModel};
use crate::rng::derive_seed;

use super::{evaluate, grad_norm_summary, train, EvalPath, GradNormSummary, Method, TrainConfig};

/// Builds the (source, target) pair for a seed.
pub type DataFactory = dyn Fn(u64) -> Result<(DomainDataset, DomainDataset)> + Sync;

pub struct Experiment<'a> {
    /// `input_dim` and `classes` are taken from the data.
    pub arch: ArchSpec,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub data: &'a DataFactory,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CellSpec {
    pub method: Method,
    pub seed: u64,
    pub lambda: f64,
    pub beta: f64,
    /// Gaussian noise added to target features.
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellOutcome {
    pub spec: CellSpec,
    pub target_acc: f64,
    pub source_acc: f64,
    pub grad: GradNormSummary,
    pub steps: usize,
}

/// Trains and scores one configuration.
pub fn run_cell(exp: &Experiment<'_>, spec: &CellSpec) -> Result<CellOutcome> {
    let (source, mut target) = (exp.data)(spec.seed)?;
    if spec.noise_std > 0.0 {
        let noise_seed = derive_seed(spec.seed, &[0x6e, spec.noise_std.to_bits()]);
        target = add_gaussian_noise(&target, spec.noise_std, noise_seed)?;
    }
    let arch = ArchSpec {
        input_dim: source.dim(),
        classes: source.classes,
        ..exp.arch.clone()
    };
    let cfg = TrainConfig {
        method: spec.method,
        seed: spec.seed,
        lambda: spec.lambda,
        beta: spec.beta,
        eval_every: 0,
        ..exp.train.clone()
    };
    let model = ArtnModel::<f64>::new(&arch, spec.seed)?;
    let (model, records) = train(model, &cfg, &source, &target)?;
    let with_t = spec.method == Method::Artn;
    Ok(CellOutcome {
        spec: *spec,
        target_acc: evaluate(&model, &target, EvalPath::Target, with_t)?,
        source_acc: evaluate(&model, &source, EvalPath::Source, with_t)?,
        grad: grad_norm_summary(&records)?,
        steps: records.len(),
    })
}

fn run_cells(exp: &Experiment<'_>, specs: &[CellSpec]) -> Vec<std::result::Result<CellOutcome, String>> {
    specs
        .par_iter()
        .map(|s| run_cell(exp, s).map_err(|e| e.to_string()))
        .collect()
}

fn cell(exp: &Experiment<'_>, method: Method, seed: u64) -> CellSpec {
    CellSpec {
        method,
        seed,
        lambda: exp.train.lambda,
        beta: exp.train.beta,
        noise_std: 0.0,
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn status(outcomes: &[&std::result::Result<CellOutcome, String>]) -> String {
    let failed: Vec<&String> = outcomes.iter().filter_map(|o| o.as_ref().err()).collect();
    match failed.first() {
        None => "ok".into(),
        Some(e) => format!("failed {}/{}: {}", failed.len(), outcomes.len(), e.replace(',', ";")),
    }
}

fn count_ok(outcomes: &[std::result::Result<CellOutcome, String>]) -> usize {
    outcomes.iter().filter(|o| o.is_ok()).count()
}

fn ok_acc(o: &std::result::Result<CellOutcome, String>) -> Option<f64> {
    o.as_ref().ok().map(|c| c.target_acc)
}

fn check_seeds(exp: &Experiment<'_>) -> Result<()> {
    if exp.seeds.is_empty() {
        Err(Error::Empty("experiment needs at least one seed".into()))
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseRow {
    pub std: f64,
    pub source_only_acc: f64,
    pub dann_acc: f64,
    pub artn_acc: f64,
    /// Mean over seeds of `100 · (artn − source_only) / source_only`.
    pub improvement_pct: f64,
    pub dann_improvement_pct: f64,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseSweep {
    pub rows: Vec<NoiseRow>,
    pub cells_ok: usize,
    pub cells_total: usize,
}

fn paired_improvement(base: &[Option<f64>], method: &[Option<f64>]) -> f64 {
    let v: Vec<f64> = base
        .iter()
        .zip(method)
        .filter_map(|(b, m)| match (b, m) {
            (Some(b), Some(m)) if *b > 0.0 => Some(100.0 * (m - b) / b),
            _ => None,
        })
        .collect();
    mean(&v)
}

/// Every method at every noise level, target features corrupted.
pub fn run_noise_sweep(exp: &Experiment<'_>, stds: &[f64]) -> Result<NoiseSweep> {
    check_seeds(exp)?;
    if let Some(s) = stds.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(Error::invalid(format!("noise std must be non-negative, got {s}")));
    }
    let mut specs = Vec::new();
    for &std in stds {
        for m in Method::ALL {
            for &seed in &exp.seeds {
                specs.push(CellSpec {
                    noise_std: std,
                    ..cell(exp, m, seed)
                });
            }
        }
    }
    let outcomes = run_cells(exp, &specs);
    let k = exp.seeds.len();
    let rows = stds
        .iter()
        .enumerate()
        .map(|(i, &std)| {
            let block = &outcomes[i * 3 * k..(i + 1) * 3 * k];
            let accs = |j: usize| block[j * k..(j + 1) * k].iter().map(ok_acc).collect::<Vec<_>>();
            let (so, dann, artn) = (accs(0), accs(1), accs(2));
            let m = |v: &[Option<f64>]| mean(&v.iter().flatten().copied().collect::<Vec<_>>());
            NoiseRow {
                std,
                source_only_acc: m(&so),
                dann_acc: m(&dann),
                artn_acc: m(&artn),
                improvement_pct: paired_improvement(&so, &artn),
                dann_improvement_pct: paired_improvement(&so, &dann),
                status: status(&block.iter().collect::<Vec<_>>()),
            }
        })
        .collect();
    Ok(NoiseSweep {
        rows,
        cells_ok: count_ok(&outcomes),
        cells_total: outcomes.len(),
    })
}

impl NoiseSweep {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("std,source_only_acc,dann_acc,artn_acc,improvement_pct,dann_improvement_pct,status\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.std, r.source_only_acc, r.dann_acc, r.artn_acc, r.improvement_pct, r.dann_improvement_pct, r.status
            )
            .unwrap();
        }
        out
    }

    /// One row per (σ, method).
    pub fn to_long_csv(&self) -> String {
        let mut out = String::from("std,method,target_acc,improvement_pct\n");
        for r in &self.rows {
            writeln!(out, "{},source_only,{},0", r.std, r.source_only_acc).unwrap();
            writeln!(out, "{},dann,{},{}", r.std, r.dann_acc, r.dann_improvement_pct).unwrap();
            writeln!(out, "{},artn,{},{}", r.std, r.artn_acc, r.improvement_pct).unwrap();
        }
        out
    }

    /// Least-squares slope of improvement% against σ.
    pub fn improvement_slope(&self) -> f64 {
        let xs: Vec<f64> = self.rows.iter().map(|r| r.std).collect();
        let ys: Vec<f64> = self.rows.iter().map(|r| r.improvement_pct).collect();
        let (mx, my) = (mean(&xs), mean(&ys));
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        sxy / sxx
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LambdaRow {
    pub lambda: f64,
    pub target_acc: f64,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LambdaSweep {
    pub rows: Vec<LambdaRow>,
    /// Seed-mean target accuracy without adaptation.
    pub source_only_acc: f64,
    pub cells_ok: usize,
    pub cells_total: usize,
}

/// The full model at each `λ`, plus the source-only baseline on the same
/// seeds.
pub fn run_lambda_sweep(exp: &Experiment<'_>, lambdas: &[f64]) -> Result<LambdaSweep> {
    check_seeds(exp)?;
    if let Some(l) = lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(Error::invalid(format!("lambda must be non-negative, got {l}")));
    }
    let mut specs: Vec<CellSpec> = exp.seeds.iter().map(|&s| cell(exp, Method::SourceOnly, s)).collect();
    for &lambda in lambdas {
        for &seed in &exp.seeds {
            specs.push(CellSpec {
                lambda,
                ..cell(exp, Method::Artn, seed)
            });
        }
    }
    let outcomes = run_cells(exp, &specs);
    let k = exp.seeds.len();
    let seed_mean =
        |block: &[std::result::Result<CellOutcome, String>]| mean(&block.iter().filter_map(ok_acc).collect::<Vec<_>>());
    let rows = lambdas
        .iter()
        .enumerate()
        .map(|(i, &lambda)| {
            let block = &outcomes[(i + 1) * k..(i + 2) * k];
            LambdaRow {
                lambda,
                target_acc: seed_mean(block),
                status: status(&block.iter().collect::<Vec<_>>()),
            }
        })
        .collect();
    Ok(LambdaSweep {
        rows,
        source_only_acc: seed_mean(&outcomes[..k]),
        cells_ok: count_ok(&outcomes),
        cells_total: outcomes.len(),
    })
}

impl LambdaSweep {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda,target_acc,source_only_acc,status\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{}",
                r.lambda, r.target_acc, self.source_only_acc, r.status
            )
            .unwrap();
        }
        out
    }

    pub fn to_long_csv(&self) -> String {
        let mut out = String::from("lambda,series,target_acc\n");
        for r in &self.rows {
            writeln!(out, "{},artn,{}", r.lambda, r.target_acc).unwrap();
            writeln!(out, "{},source_only,{}", r.lambda, self.source_only_acc).unwrap();
        }
        out
    }

    /// Max minus min of the per-λ accuracies.
    pub fn span(&self) -> f64 {
        let v = self.rows.iter().map(|r| r.target_acc);
        v.clone().fold(f64::NEG_INFINITY, f64::max) - v.fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationPair {
    pub seed: u64,
    pub with_reg: std::result::Result<CellOutcome, String>,
    pub without_reg: std::result::Result<CellOutcome, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub beta: f64,
    pub pairs: Vec<AblationPair>,
    pub mean_acc_with: f64,
    pub mean_acc_without: f64,
    pub mean_std_with: f64,
    pub mean_std_without: f64,
    /// Seeds where the regularized run had the larger gradient-norm std.
    pub std_violations: Vec<u64>,
}

/// Paired runs per seed that differ only in `β`.
pub fn run_regularizer_ablation(exp: &Experiment<'_>) -> Result<AblationReport> {
    check_seeds(exp)?;
    if exp.train.beta <= 0.0 {
        return Err(Error::invalid("ablation needs a positive base beta"));
    }
    let specs: Vec<CellSpec> = exp
        .seeds
        .iter()
        .flat_map(|&seed| {
            let with = cell(exp, Method::Artn, seed);
            [with, CellSpec { beta: 0.0, ..with }]
        })
        .collect();
    let outcomes = run_cells(exp, &specs);
    let pairs: Vec<AblationPair> = exp
        .seeds
        .iter()
        .zip(outcomes.chunks(2))
        .map(|(&seed, o)| AblationPair {
            seed,
            with_reg: o[0].clone(),
            without_reg: o[1].clone(),
        })
        .collect();
    let both: Vec<(&CellOutcome, &CellOutcome)> = pairs
        .iter()
        .filter_map(|p| Some((p.with_reg.as_ref().ok()?, p.without_reg.as_ref().ok()?)))
        .collect();
    let col = |f: &dyn Fn(&(&CellOutcome, &CellOutcome)) -> f64| mean(&both.iter().map(f).collect::<Vec<_>>());
    Ok(AblationReport {
        beta: exp.train.beta,
        mean_acc_with: col(&|p| p.0.target_acc),
        mean_acc_without: col(&|p| p.1.target_acc),
        mean_std_with: col(&|p| p.0.grad.std),
        mean_std_without: col(&|p| p.1.grad.std),
        std_violations: both
            .iter()
            .filter(|(w, wo)| w.grad.std > wo.grad.std)
            .map(|(w, _)| w.spec.seed)
            .collect(),
        pairs,
    })
}

impl AblationReport {
    pub fn cells_ok(&self) -> usize {
        self.pairs
            .iter()
            .map(|p| p.with_reg.is_ok() as usize + p.without_reg.is_ok() as usize)
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "seed,beta,target_acc,source_acc,grad_max,grad_min,grad_max_minus_min,grad_std,steps,status\n",
        );
        for p in &self.pairs {
            for (beta, o) in [(self.beta, &p.with_reg), (0.0, &p.without_reg)] {
                match o {
                    Ok(c) => writeln!(
                        out,
                        "{},{},{},{},{},{},{},{},{},ok",
                        p.seed,
                        beta,
                        c.target_acc,
                        c.source_acc,
                        c.grad.max,
                        c.grad.min,
                        c.grad.max_minus_min,
                        c.grad.std,
                        c.steps
                    ),
                    Err(e) => writeln!(out, "{},{},,,,,,,,failed: {}", p.seed, beta, e.replace(',', ";")),
                }
                .unwrap();
            }
        }
        out
    }

    pub fn to_long_csv(&self) -> String {
        let mut out = String::from("seed,beta,metric,value\n");
        for p in &self.pairs {
            for (beta, o) in [(self.beta, &p.with_reg), (0.0, &p.without_reg)] {
                if let Ok(c) = o {
                    for (name, v) in [
                        ("target_acc", c.target_acc),
                        ("source_acc", c.source_acc),
                        ("grad_max", c.grad.max),
                        ("grad_min", c.grad.min),
                        ("grad_std", c.grad.std),
                    ] {
                        writeln!(out, "{},{},{},{}", p.seed, beta, name, v).unwrap();
                    }
                }
            }
        }
        out
    }
}
