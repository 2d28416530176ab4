//! Finite-difference verification of every differentiable tape op.
//!
//! Each check draws random inputs, reduces the op output to a scalar through
//! a fixed random projection, and compares the tape gradient against central
//! differences. Gradient reversal is deliberately non-conservative, so it
//! has a contract check of its own instead.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::Batch;
use crate::diagnostics::GrlSchedule;
use crate::error::{Error, Result};
use crate::model::{artn_loss, ArchSpec, ArtnHyper, ArtnModel};
use crate::nn::Mode;
use crate::rng::rng_for;
use crate::tape::{BnMode, RunningMoments, Tape, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;
pub const GRL_TOLERANCE: f64 = 1e-6;
pub const TRIALS: usize = 20;
/// Denominator floor of the relative error, so entries whose gradient is
/// essentially zero are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;

/// Loss value and analytic gradients, each tagged with the index of the
/// input it differentiates.
pub type Evaluate = Box<dyn Fn(&[Tensor<f64>]) -> Result<(f64, Vec<(usize, Tensor<f64>)>)> + Sync>;
/// Scalar whose numerical derivative is compared with analytic gradient `k`.
pub type Probe = Box<dyn Fn(&[Tensor<f64>], usize) -> Result<f64> + Sync>;
pub type Sampler = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>> + Sync>;

pub struct OpCheck {
    pub name: &'static str,
    pub tolerance: f64,
    pub trials: usize,
    pub sample: Sampler,
    pub evaluate: Evaluate,
    /// Function differentiated numerically; defaults to the loss of
    /// `evaluate`.
    pub probe: Option<Probe>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpResult {
    pub name: String,
    pub worst_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradcheckReport {
    pub results: Vec<OpResult>,
}

impl GradcheckReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.results
            .iter()
            .filter(|r| !r.passed)
            .map(|r| r.name.as_str())
            .collect()
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            writeln!(
                f,
                "{:<24} worst rel. error {:.3e} (tol {:.0e}) {}",
                r.name,
                r.worst_rel_error,
                r.tolerance,
                if r.passed { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `Σ w ⊙ x` as a recorded op.
pub fn project(tape: &mut Tape<f64>, x: Var, w: &Tensor<f64>) -> Var {
    let xv = tape.value(x);
    assert_eq!(xv.shape(), w.shape(), "projection weights must match the output");
    let value: f64 = xv.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
    let w2 = w.clone();
    tape.custom(
        &[x],
        Tensor::scalar(value),
        Box::new(move |g, _| vec![w2.map(|v| v * g.item())]),
    )
}

/// Check built from a tape function of the inputs; the last sampled tensor is
/// the projection weight and is not differentiated.
fn tape_check(
    name: &'static str,
    sample: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>> + Sync + 'static,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Sync + 'static,
) -> OpCheck {
    let evaluate: Evaluate = Box::new(move |inputs| {
        let (w, xs) = inputs.split_last().expect("inputs end with projection weights");
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let loss = if tape.value(out).numel() == 1 {
            out
        } else {
            project(&mut tape, out, w)
        };
        let grads = tape.backward(loss)?;
        let gs = vars.iter().enumerate().map(|(i, &v)| (i, grads.wrt(v))).collect();
        Ok((tape.value(loss).item(), gs))
    });
    OpCheck {
        name,
        tolerance: OP_TOLERANCE,
        trials: TRIALS,
        sample: Box::new(sample),
        evaluate,
        probe: None,
    }
}

/// Shape-compatible weights for an output of `shape`.
fn with_weights(rng: &mut ChaCha8Rng, mut xs: Vec<Tensor<f64>>, out_shape: &[usize]) -> Vec<Tensor<f64>> {
    xs.push(normal(rng, out_shape));
    xs
}

/// Standard normal entries with magnitude at least `gap`, keeping relu
/// inputs away from the kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.sample(StandardNormal);
            if v.abs() > gap {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn labels_for(logits: &Tensor<f64>) -> Vec<usize> {
    let (n, k) = logits.dims2().unwrap();
    (0..n).map(|i| (i * 7 + 1) % k).collect()
}

/// The op suite in a fixed order.
pub fn registry() -> Vec<OpCheck> {
    vec![
        tape_check(
            "matmul",
            |r| {
                let xs = vec![normal(r, &[3, 3]), normal(r, &[3, 3])];
                with_weights(r, xs, &[3, 3])
            },
            |t, v| t.matmul(v[0], v[1]),
        ),
        tape_check(
            "affine",
            |r| {
                let xs = vec![normal(r, &[2, 3]), normal(r, &[3, 2]), normal(r, &[2])];
                with_weights(r, xs, &[2, 2])
            },
            |t, v| t.affine(v[0], v[1], v[2]),
        ),
        tape_check(
            "add",
            |r| {
                let xs = vec![normal(r, &[2, 3]), normal(r, &[2, 3])];
                with_weights(r, xs, &[2, 3])
            },
            |t, v| t.add(v[0], v[1]),
        ),
        tape_check(
            "sum",
            |r| {
                let xs = vec![normal(r, &[3, 2])];
                with_weights(r, xs, &[])
            },
            |t, v| Ok(t.sum(v[0])),
        ),
        tape_check(
            "scale",
            |r| {
                let xs = vec![normal(r, &[2, 2])];
                with_weights(r, xs, &[2, 2])
            },
            |t, v| Ok(t.scale(v[0], -1.7)),
        ),
        tape_check(
            "relu",
            |r| {
                let xs = vec![away_from_zero(r, &[3, 4], 1e-2)];
                with_weights(r, xs, &[3, 4])
            },
            |t, v| Ok(t.relu(v[0])),
        ),
        tape_check(
            "batch_norm_train",
            |r| {
                let xs = vec![normal(r, &[4, 3]), normal(r, &[3]), normal(r, &[3])];
                with_weights(r, xs, &[4, 3])
            },
            |t, v| Ok(t.batch_norm(v[0], v[1], v[2], BnMode::Train)?.0),
        ),
        tape_check(
            "batch_norm_eval",
            |r| {
                let xs = vec![normal(r, &[4, 3]), normal(r, &[3]), normal(r, &[3])];
                with_weights(r, xs, &[4, 3])
            },
            |t, v| {
                let running = RunningMoments {
                    mean: vec![0.3, -0.2, 0.1],
                    var: vec![1.5, 0.7, 2.0],
                };
                Ok(t.batch_norm(v[0], v[1], v[2], BnMode::Eval(&running))?.0)
            },
        ),
        tape_check(
            "softmax_cross_entropy",
            |r| {
                let xs = vec![normal(r, &[5, 3])];
                with_weights(r, xs, &[])
            },
            |t, v| {
                let labels = labels_for(t.value(v[0]));
                t.softmax_cross_entropy(v[0], &labels)
            },
        ),
        tape_check(
            "cosine_similarity_mean",
            |r| {
                let xs = vec![normal(r, &[4, 3]), normal(r, &[4, 3])];
                with_weights(r, xs, &[])
            },
            |t, v| t.cosine_similarity_mean(v[0], v[1]),
        ),
        tape_check(
            "concat_rows",
            |r| {
                let xs = vec![normal(r, &[2, 3]), normal(r, &[1, 3])];
                with_weights(r, xs, &[3, 3])
            },
            |t, v| t.concat_rows(&[v[0], v[1]]),
        ),
        tape_check(
            "slice_rows",
            |r| {
                let xs = vec![normal(r, &[4, 2])];
                with_weights(r, xs, &[2, 2])
            },
            |t, v| t.slice_rows(v[0], 1, 2),
        ),
        grl_check(),
        artn_composite_check(),
    ]
}

/// Gradient reversal against the reversed numerical derivative of the
/// identity, for coefficients 0, 0.5 and 1.
fn grl_check() -> OpCheck {
    const COEFFS: [f64; 3] = [0.0, 0.5, 1.0];
    let evaluate: Evaluate = Box::new(|inputs| {
        let (x, w) = (&inputs[0], &inputs[1]);
        let mut grads = Vec::new();
        let mut value = 0.0;
        for c in COEFFS {
            let mut tape = Tape::new();
            let xv = tape.param(x.clone());
            let y = tape.grl(xv, c);
            if !tape.value(y).bitwise_eq(x) {
                return Err(Error::invalid("gradient reversal changed its input"));
            }
            let loss = project(&mut tape, y, w);
            value = tape.value(loss).item();
            grads.push((0, tape.backward(loss)?.wrt(xv)));
        }
        Ok((value, grads))
    });
    let probe: Probe = Box::new(|inputs, k| {
        // −c·Σ w⊙x for the k-th coefficient
        let c = COEFFS[k];
        let (x, w) = (&inputs[0], &inputs[1]);
        Ok(-c * x.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>())
    });
    OpCheck {
        name: "grl",
        tolerance: GRL_TOLERANCE,
        trials: TRIALS,
        sample: Box::new(|r| vec![normal(r, &[3, 2]), normal(r, &[3, 2])]),
        evaluate,
        probe: Some(probe),
    }
}

fn composite_arch() -> ArchSpec {
    ArchSpec {
        input_dim: 2,
        feature_widths: vec![3, 3],
        classifier_hidden: vec![],
        domain_hidden: vec![3],
        classes: 2,
        batch_norm: true,
        residual_stride: 1,
    }
}

const COMPOSITE_HYPER: ArtnHyper = ArtnHyper {
    lambda: 0.7,
    beta: 0.3,
    schedule: GrlSchedule::Constant,
};

fn composite_model(params: &[Tensor<f64>], seed: u64) -> Result<ArtnModel<f64>> {
    let mut model = ArtnModel::new(&composite_arch(), seed)?;
    let mut it = params.iter();
    for net in [&mut model.g, &mut model.t, &mut model.c, &mut model.d] {
        for p in net.params.tensors_mut() {
            *p = it.next().expect("parameter count").clone();
        }
    }
    Ok(model)
}

fn composite_batches(xs: &Tensor<f64>, xt: &Tensor<f64>) -> (Batch<f64>, Batch<f64>) {
    (
        Batch {
            x: xs.clone(),
            class_labels: Some(vec![0, 1, 1, 0, 1]),
            domain_label: 0,
        },
        Batch {
            x: xt.clone(),
            class_labels: None,
            domain_label: 1,
        },
    )
}

/// Sizes of the trailing non-parameter inputs (source rows, target rows).
const COMPOSITE_DATA: usize = 2;

fn composite_parts(inputs: &[Tensor<f64>]) -> Result<(ArtnModel<f64>, Batch<f64>, Batch<f64>)> {
    let n = inputs.len() - COMPOSITE_DATA;
    let model = composite_model(&inputs[..n], 0)?;
    let (bs, bt) = composite_batches(&inputs[n], &inputs[n + 1]);
    Ok((model, bs, bt))
}

/// The full objective on a toy model. Parameters of C and D are checked
/// against the optimized tape objective; parameters of G and T against the
/// reported objective `L_c − λ(L_s + L_t) + β·r`, whose sign the gradient
/// reversal realizes.
fn artn_composite_check() -> OpCheck {
    let evaluate: Evaluate = Box::new(|inputs| {
        let (model, bs, bt) = composite_parts(inputs)?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let out = artn_loss(&model, &bound, &COMPOSITE_HYPER, &bs, &bt, 0.5, Mode::Train, &mut tape)?;
        let grads = tape.backward(out.objective)?;
        let gs = [&bound.g, &bound.t, &bound.c, &bound.d]
            .iter()
            .flat_map(|b| b.grads_or_zero(&grads))
            .enumerate()
            .collect();
        Ok((tape.value(out.objective).item(), gs))
    });
    let probe: Probe = Box::new(|inputs, k| {
        let (model, bs, bt) = composite_parts(inputs)?;
        let reported_len = model.g.params.len() + model.t.params.len() + model.c.params.len();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let out = artn_loss(&model, &bound, &COMPOSITE_HYPER, &bs, &bt, 0.5, Mode::Train, &mut tape)?;
        Ok(if k < reported_len {
            out.total
        } else {
            tape.value(out.objective).item()
        })
    });
    OpCheck {
        name: "artn_composite",
        tolerance: COMPOSITE_TOLERANCE,
        trials: TRIALS,
        sample: Box::new(|r| {
            let seed = r.random::<u64>();
            let model = ArtnModel::<f64>::new(&composite_arch(), seed).unwrap();
            let mut xs = Vec::new();
            for net in [&model.g, &model.t, &model.c, &model.d] {
                for p in net.params.tensors() {
                    let noise = normal(r, p.shape());
                    let data = p.data().iter().zip(noise.data()).map(|(a, e)| a + 0.1 * e).collect();
                    xs.push(Tensor::new(p.shape().to_vec(), data).unwrap());
                }
            }
            xs.push(normal(r, &[5, 2]));
            xs.push(normal(r, &[4, 2]));
            xs
        }),
        evaluate,
        probe: Some(probe),
    }
}

/// Worst relative error of one check over its trials.
pub fn check_op(op: &OpCheck, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for trial in 0..op.trials {
        let mut rng = rng_for(seed, &[trial as u64]);
        let inputs = (op.sample)(&mut rng);
        let (_, analytic) = (op.evaluate)(&inputs)?;
        for (k, (target, grad)) in analytic.iter().enumerate() {
            let target = *target;
            if grad.shape() != inputs[target].shape() {
                return Err(Error::invalid(format!("{}: gradient {k} has the wrong shape", op.name)));
            }
            for j in 0..inputs[target].numel() {
                let f = |delta: f64| -> Result<f64> {
                    let mut pert = inputs.clone();
                    pert[target].data_mut()[j] += delta;
                    match &op.probe {
                        Some(p) => p(&pert, k),
                        None => Ok((op.evaluate)(&pert)?.0),
                    }
                };
                let numeric = (f(FD_STEP)? - f(-FD_STEP)?) / (2.0 * FD_STEP);
                worst = worst.max(rel_error(grad.data()[j], numeric));
            }
        }
    }
    Ok(worst)
}

/// Runs the named check, or all of them for `"all"`.
pub fn run(scope: &str, checks: &[OpCheck]) -> Result<GradcheckReport> {
    let selected: Vec<&OpCheck> = if scope == "all" {
        checks.iter().collect()
    } else {
        checks.iter().filter(|c| c.name == scope).collect()
    };
    if selected.is_empty() {
        let names: Vec<&str> = checks.iter().map(|c| c.name).collect();
        return Err(Error::invalid(format!(
            "unknown op `{scope}`; expected `all` or one of {}",
            names.join(", ")
        )));
    }
    let mut report = GradcheckReport::default();
    for (i, op) in selected.into_iter().enumerate() {
        let worst = check_op(op, 0x6772_6164 + i as u64)?;
        report.results.push(OpResult {
            name: op.name.to_string(),
            worst_rel_error: worst,
            tolerance: op.tolerance,
            passed: worst <= op.tolerance,
        });
    }
    Ok(report)
}

/// An op whose backward rule is wrong by a factor of two; the suite must
/// flag it.
pub fn corrupted_fixture() -> OpCheck {
    tape_check(
        "square_corrupted",
        |r| {
            let xs = vec![normal(r, &[2, 2])];
            with_weights(r, xs, &[2, 2])
        },
        |t, v| {
            let x = t.value(v[0]).clone();
            let value = x.map(|a| a * a);
            Ok(t.custom(
                &[v[0]],
                value,
                Box::new(|g, xs| {
                    let d = xs[0].data().iter().zip(g.data()).map(|(a, gv)| 4.0 * a * gv).collect();
                    vec![Tensor::new(xs[0].shape().to_vec(), d).unwrap()]
                }),
            ))
        },
    )
}
