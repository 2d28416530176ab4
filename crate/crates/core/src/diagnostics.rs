//! Analytic quantities used as diagnostics and test oracles. None of these
//! feed gradients into the model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sgd_step, Activation, Mlp, Mode, NetworkSpec, ParamTag, SgdState};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// How the gradient-reversal weight ramps over training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GrlSchedule {
    /// γ = 1 throughout.
    Constant,
    /// γ = 2/(1 + e^(−10p)) − 1.
    #[default]
    Dann,
}

impl GrlSchedule {
    pub fn gamma(self, progress: f64) -> f64 {
        match self {
            GrlSchedule::Constant => 1.0,
            GrlSchedule::Dann => gamma_schedule(progress),
        }
    }
}

/// `2/(1 + e^(−10p)) − 1`, with `p` clamped into `[0, 1]`.
pub fn gamma_schedule(progress: f64) -> f64 {
    let p = if (0.0..=1.0).contains(&progress) {
        progress
    } else {
        log::warn!("training progress {progress} outside [0, 1]; clamping");
        if progress.is_nan() {
            0.0
        } else {
            progress.clamp(0.0, 1.0)
        }
    };
    2.0 / (1.0 + (-10.0 * p).exp()) - 1.0
}

/// Pointwise optimal discriminator `P_s / (P_s + P_t)`.
pub fn optimal_discriminator(ps: &[f64], pt: &[f64]) -> Result<Vec<f64>> {
    if ps.len() != pt.len() {
        return Err(Error::Shape {
            op: "optimal_discriminator",
            lhs: vec![ps.len()],
            rhs: vec![pt.len()],
        });
    }
    ps.iter()
        .zip(pt)
        .enumerate()
        .map(|(i, (&s, &t))| {
            if !(s >= 0.0 && t >= 0.0) || !s.is_finite() || !t.is_finite() {
                return Err(Error::invalid(format!(
                    "densities must be finite and non-negative (index {i})"
                )));
            }
            if s + t == 0.0 {
                return Err(Error::invalid(format!("both densities vanish at index {i}")));
            }
            Ok(s / (s + t))
        })
        .collect()
}

const HIST_TOL: f64 = 1e-9;

fn check_histogram(name: &str, p: &[f64]) -> Result<()> {
    if let Some(i) = p.iter().position(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::invalid(format!("{name}[{i}] = {} is not a valid mass", p[i])));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > HIST_TOL {
        return Err(Error::invalid(format!("{name} sums to {total}, not 1")));
    }
    Ok(())
}

/// Jensen–Shannon divergence in nats, `0·ln 0 = 0`.
pub fn jsd_discrete(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape {
            op: "jsd_discrete",
            lhs: vec![p.len()],
            rhs: vec![q.len()],
        });
    }
    check_histogram("p", p)?;
    check_histogram("q", q)?;
    let kl_to_mid = |a: f64, m: f64| if a > 0.0 { a * (a / m).ln() } else { 0.0 };
    let js = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            0.5 * kl_to_mid(a, m) + 0.5 * kl_to_mid(b, m)
        })
        .sum::<f64>();
    // rounding can leave tiny excursions outside [0, ln 2]
    Ok(js.clamp(0.0, std::f64::consts::LN_2))
}

/// `2(1 − 2ε)` clamped below at 0.
pub fn proxy_a_distance(domain_error: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&domain_error) {
        return Err(Error::invalid(format!(
            "domain classifier error must lie in [0, 1], got {domain_error}"
        )));
    }
    Ok((2.0 * (1.0 - 2.0 * domain_error)).max(0.0))
}

/// Settings for [`fit_classifier`].
#[derive(Debug, Clone)]
pub struct ClassifierFit {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for ClassifierFit {
    fn default() -> Self {
        ClassifierFit {
            hidden: vec![16],
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 0,
        }
    }
}

/// Trains a plain MLP classifier by minibatch SGD on `x` with `labels`.
pub fn fit_classifier(x: &Tensor<f64>, labels: &[usize], classes: usize, fit: &ClassifierFit) -> Result<Mlp<f64>> {
    let (n, d) = x
        .dims2()
        .ok_or_else(|| Error::invalid("classifier input must be a matrix"))?;
    if n != labels.len() || n == 0 {
        return Err(Error::invalid("feature/label count mismatch"));
    }
    let mut widths = fit.hidden.clone();
    widths.push(classes);
    let spec = NetworkSpec::mlp(d, &widths, false, Activation::Relu, Activation::None);
    let mut net = Mlp::<f64>::new(spec, ParamTag::DomainClassifier, fit.seed)?;
    let mut opt = SgdState::new(&net.params, fit.learning_rate, fit.momentum)?;
    let mut rng = ChaCha8Rng::seed_from_u64(fit.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..fit.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(fit.batch_size.max(1)) {
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape);
            let xb = tape.constant(x.gather_rows(chunk));
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let out = net.forward(&mut tape, &bound, xb, Mode::Train)?;
            let loss = tape.softmax_cross_entropy(out.output, &yb)?;
            let grads = tape.backward(loss)?;
            sgd_step(&mut net.params, &bound.grads(&grads), &mut opt)?;
        }
    }
    Ok(net)
}

/// Row-wise softmax probability of `class`.
pub fn class_probability(logits: &Tensor<f64>, class: usize) -> Vec<f64> {
    let (n, _) = logits.dims2().expect("logits must be a matrix");
    (0..n)
        .map(|i| {
            let row = logits.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&l| (l - m).exp()).sum();
            (row[class] - m).exp() / z
        })
        .collect()
}

pub fn argmax_rows(logits: &Tensor<f64>) -> Vec<usize> {
    let (n, _) = logits.dims2().expect("logits must be a matrix");
    (0..n)
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PadEstimate {
    /// Held-out domain classification error.
    pub error: f64,
    pub pad: f64,
}

/// Proxy A-distance from a domain classifier trained on half of each sample
/// set and scored on the other half.
pub fn estimate_pad(source: &Tensor<f64>, target: &Tensor<f64>, fit: &ClassifierFit) -> Result<PadEstimate> {
    let (ns, ds) = source
        .dims2()
        .ok_or_else(|| Error::invalid("source must be a matrix"))?;
    let (nt, dt) = target
        .dims2()
        .ok_or_else(|| Error::invalid("target must be a matrix"))?;
    if ds != dt {
        return Err(Error::Shape {
            op: "estimate_pad",
            lhs: vec![ns, ds],
            rhs: vec![nt, dt],
        });
    }
    if ns < 2 || nt < 2 {
        return Err(Error::Empty("need at least two samples per domain".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(fit.seed);
    let mut split = |n: usize| {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let test = idx.split_off(n / 2);
        (idx, test)
    };
    let (s_train, s_test) = split(ns);
    let (t_train, t_test) = split(nt);
    let stack = |s: &[usize], t: &[usize]| -> (Tensor<f64>, Vec<usize>) {
        let mut data = source.gather_rows(s).into_data();
        data.extend(target.gather_rows(t).into_data());
        let labels = std::iter::repeat_n(0, s.len())
            .chain(std::iter::repeat_n(1, t.len()))
            .collect();
        (Tensor::from_parts(vec![s.len() + t.len(), ds], data), labels)
    };
    let (x_train, y_train) = stack(&s_train, &t_train);
    let (x_test, y_test) = stack(&s_test, &t_test);
    let net = fit_classifier(&x_train, &y_train, 2, fit)?;
    let pred = argmax_rows(&net.infer(&x_test)?);
    let wrong = pred.iter().zip(&y_test).filter(|(p, y)| p != y).count();
    let error = wrong as f64 / y_test.len() as f64;
    Ok(PadEstimate {
        error,
        pad: proxy_a_distance(error)?,
    })
}
