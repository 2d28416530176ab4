//! The composite adaptation model: feature extractor G, residual transform
//! network T, label classifier C and domain classifier D.
//!
//! Source samples flow `x → G → T → {C, D}`; target samples flow
//! `x → G → D`. At every tapped layer `i < N` the transform network adds the
//! extractor's activation of the same depth:
//!
//! ```text
//! h_0 = G_1(x)
//! h_i = T_i(h_{i-1}) + G_i(x)    if i is tapped
//! h_i = T_i(h_{i-1})             otherwise (always for i = N)
//! ```
//!
//! During training both domains go through G as one stacked batch so that
//! batch statistics are shared and match what evaluation sees.
//!
//! The adversarial sign is realized by gradient reversal with coefficient
//! `λ·γ(p)` in front of D, so the tape objective is `L_c + L_s + L_t + β·r`
//! while the reported objective is `L_c − λ(L_s + L_t) + β·r`.

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::diagnostics::GrlSchedule;
use crate::error::{Error, Result};
use crate::nn::{Activation, BoundMlp, Mlp, Mode, NetworkSpec, ParamTag};
use crate::scalar::Scalar;
use crate::tape::{BatchMoments, Tape, Var};
use crate::tensor::Tensor;

/// Domain label of source samples.
pub const SOURCE_DOMAIN: usize = 0;
/// Domain label of target samples.
pub const TARGET_DOMAIN: usize = 1;

/// Widths and options for building an [`ArtnModel`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_dim: usize,
    /// Layer widths of G (and T).
    pub feature_widths: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub domain_hidden: Vec<usize>,
    pub classes: usize,
    pub batch_norm: bool,
    pub residual_stride: usize,
}

impl ArchSpec {
    pub fn extractor_spec(&self) -> NetworkSpec {
        NetworkSpec::mlp(
            self.input_dim,
            &self.feature_widths,
            self.batch_norm,
            Activation::Relu,
            Activation::Relu,
        )
    }

    /// Same layers as G, fed with G's first-layer activation.
    pub fn transform_spec(&self) -> NetworkSpec {
        NetworkSpec::mlp(
            self.feature_widths[0],
            &self.feature_widths,
            self.batch_norm,
            Activation::Relu,
            Activation::Relu,
        )
    }

    fn head(&self, hidden: &[usize], out: usize, batch_norm: bool) -> NetworkSpec {
        let feat = *self.feature_widths.last().unwrap();
        let mut widths = hidden.to_vec();
        widths.push(out);
        NetworkSpec::mlp(feat, &widths, batch_norm, Activation::Relu, Activation::None)
    }

    pub fn classifier_spec(&self) -> NetworkSpec {
        self.head(&self.classifier_hidden, self.classes, self.batch_norm)
    }

    /// Never batch-normalized: D scores every row on its own, so the target
    /// loss cannot reach θ_t through shared batch statistics.
    pub fn domain_spec(&self) -> NetworkSpec {
        self.head(&self.domain_hidden, 2, false)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_widths.is_empty() {
            return Err(Error::invalid("feature extractor needs at least one layer"));
        }
        if self.classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if self.residual_stride == 0 {
            return Err(Error::invalid("residual stride must be positive"));
        }
        Ok(())
    }
}

/// Trade-off weights of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArtnHyper {
    pub lambda: f64,
    pub beta: f64,
    pub schedule: GrlSchedule,
}

impl ArtnHyper {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct ArtnModel<S> {
    pub g: Mlp<S>,
    pub t: Mlp<S>,
    pub c: Mlp<S>,
    pub d: Mlp<S>,
    pub residual_stride: usize,
}

impl<S: Scalar> Clone for ArtnModel<S> {
    fn clone(&self) -> Self {
        ArtnModel {
            g: self.g.clone(),
            t: self.t.clone(),
            c: self.c.clone(),
            d: self.d.clone(),
            residual_stride: self.residual_stride,
        }
    }
}

/// Tape handles of all four parameter sets.
#[derive(Debug, Clone)]
pub struct BoundArtn {
    pub g: BoundMlp,
    pub t: BoundMlp,
    pub c: BoundMlp,
    pub d: BoundMlp,
}

/// Batch moments gathered during one train-mode step, per network, in the
/// order the passes ran.
#[derive(Debug, Default)]
pub struct ModelMoments<S> {
    pub g: Vec<Vec<Option<BatchMoments<S>>>>,
    pub t: Vec<Vec<Option<BatchMoments<S>>>>,
    pub c: Vec<Vec<Option<BatchMoments<S>>>>,
    pub d: Vec<Vec<Option<BatchMoments<S>>>>,
}

/// Source-pass results.
pub struct SourceForward<S> {
    /// `G(x^s)`
    pub f_s: Var,
    /// `T(G(x^s))`
    pub t_out: Var,
    pub g_layers: Vec<Var>,
    pub t_layers: Vec<Var>,
    pub g_moments: Vec<Option<BatchMoments<S>>>,
    pub t_moments: Vec<Option<BatchMoments<S>>>,
}

/// Vars of one loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutputs {
    pub f_s: Var,
    /// Equal to `f_s` for the baseline without T.
    pub t_out: Var,
    pub f_t: Var,
    pub class_logits: Var,
    pub domain_logits_source: Var,
    pub domain_logits_target: Var,
}

/// Scalar values of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossParts {
    pub l_c: f64,
    pub l_s: f64,
    pub l_t: f64,
    /// Negative mean cosine similarity between `f_s` and `t_out`.
    pub r: f64,
}

impl LossParts {
    /// `L_c − λ(L_s + L_t) + β·r`
    pub fn total(&self, lambda: f64, beta: f64) -> f64 {
        self.l_c - lambda * (self.l_s + self.l_t) + beta * self.r
    }
}

pub struct LossOutput<S> {
    /// Scalar the backward sweep starts from.
    pub objective: Var,
    pub parts: LossParts,
    pub total: f64,
    pub gamma: f64,
    /// GRL coefficient `λ·γ`.
    pub coeff: f64,
    pub outputs: ForwardOutputs,
    pub moments: ModelMoments<S>,
}

impl<S: Scalar> ArtnModel<S> {
    pub fn new(arch: &ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        // one seed stream per network
        let s = seed.wrapping_mul(4);
        Self::from_parts(
            Mlp::new(arch.extractor_spec(), ParamTag::FeatureExtractor, s)?,
            Mlp::new(arch.transform_spec(), ParamTag::Transform, s.wrapping_add(1))?,
            Mlp::new(arch.classifier_spec(), ParamTag::LabelClassifier, s.wrapping_add(2))?,
            Mlp::new(arch.domain_spec(), ParamTag::DomainClassifier, s.wrapping_add(3))?,
            arch.residual_stride,
        )
    }

    /// Checks the width contracts between the four networks.
    pub fn from_parts(g: Mlp<S>, t: Mlp<S>, c: Mlp<S>, d: Mlp<S>, residual_stride: usize) -> Result<Self> {
        if residual_stride == 0 {
            return Err(Error::invalid("residual stride must be positive"));
        }
        let gw: Vec<usize> = g.spec.layers.iter().map(|l| l.width).collect();
        let tw: Vec<usize> = t.spec.layers.iter().map(|l| l.width).collect();
        if gw != tw {
            return Err(Error::Shape {
                op: "artn_model",
                lhs: gw,
                rhs: tw,
            });
        }
        if t.spec.input_dim != gw[0] {
            return Err(Error::Shape {
                op: "artn_model",
                lhs: vec![gw[0]],
                rhs: vec![t.spec.input_dim],
            });
        }
        let feat = g.spec.output_dim();
        for head in [&c, &d] {
            if head.spec.input_dim != feat {
                return Err(Error::Shape {
                    op: "artn_model",
                    lhs: vec![feat],
                    rhs: vec![head.spec.input_dim],
                });
            }
        }
        if d.spec.output_dim() != 2 {
            return Err(Error::invalid("domain classifier must have two outputs"));
        }
        Ok(ArtnModel {
            g,
            t,
            c,
            d,
            residual_stride,
        })
    }

    pub fn depth(&self) -> usize {
        self.g.num_layers()
    }

    pub fn classes(&self) -> usize {
        self.c.spec.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.g.spec.input_dim
    }

    /// Whether 1-based layer `i` receives the extractor's residual.
    pub fn is_tapped(&self, i: usize) -> bool {
        i >= 1 && i < self.depth() && i.is_multiple_of(self.residual_stride)
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> BoundArtn {
        BoundArtn {
            g: self.g.bind(tape),
            t: self.t.bind(tape),
            c: self.c.bind(tape),
            d: self.d.bind(tape),
        }
    }

    pub fn bind_frozen(&self, tape: &mut Tape<S>) -> BoundArtn {
        BoundArtn {
            g: self.g.bind_frozen(tape),
            t: self.t.bind_frozen(tape),
            c: self.c.bind_frozen(tape),
            d: self.d.bind_frozen(tape),
        }
    }

    pub fn forward_source(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundArtn,
        x_s: Var,
        mode: Mode,
    ) -> Result<SourceForward<S>> {
        let g_out = self.g.forward(tape, &bound.g, x_s, mode)?;
        let (t_out, t_layers, t_moments) = self.transform(tape, bound, &g_out.per_layer, mode)?;
        Ok(SourceForward {
            f_s: g_out.output,
            t_out,
            g_layers: g_out.per_layer,
            t_layers,
            g_moments: g_out.moments,
            t_moments,
        })
    }

    /// Runs T over the extractor's per-layer activations of the source
    /// rows, adding the residual at every tapped layer.
    #[allow(clippy::type_complexity)]
    pub fn transform(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundArtn,
        g_layers: &[Var],
        mode: Mode,
    ) -> Result<(Var, Vec<Var>, Vec<Option<BatchMoments<S>>>)> {
        if g_layers.len() != self.depth() {
            return Err(Error::invalid(format!(
                "transform expects {} extractor activations, got {}",
                self.depth(),
                g_layers.len()
            )));
        }
        let mut h = g_layers[0];
        let mut t_layers = Vec::with_capacity(self.depth());
        let mut t_moments = Vec::with_capacity(self.depth());
        for layer in 0..self.depth() {
            let (mut y, m) = self.t.forward_layer(tape, &bound.t, layer, h, mode)?;
            if self.is_tapped(layer + 1) {
                y = tape.add(y, g_layers[layer])?;
            }
            t_layers.push(y);
            t_moments.push(m);
            h = y;
        }
        Ok((h, t_layers, t_moments))
    }

    /// One extractor pass over the stacked source and target rows, so both
    /// domains share batch statistics; returns per-layer source activations,
    /// `G(x^s)`, `G(x^t)` and the extractor's moments.
    #[allow(clippy::type_complexity)]
    pub fn forward_joint(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundArtn,
        x_s: Var,
        x_t: Var,
        mode: Mode,
    ) -> Result<(Vec<Var>, Var, Var, Vec<Option<BatchMoments<S>>>)> {
        let ns = tape.value(x_s).shape()[0];
        let nt = tape.value(x_t).shape()[0];
        let x = tape.concat_rows(&[x_s, x_t])?;
        let out = self.g.forward(tape, &bound.g, x, mode)?;
        let src_layers = out
            .per_layer
            .iter()
            .map(|&v| tape.slice_rows(v, 0, ns))
            .collect::<Result<Vec<_>>>()?;
        let f_s = *src_layers.last().unwrap();
        let f_t = tape.slice_rows(out.output, ns, nt)?;
        Ok((src_layers, f_s, f_t, out.moments))
    }

    /// `G(x^t)`; touches θ_g only.
    pub fn forward_target(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundArtn,
        x_t: Var,
        mode: Mode,
    ) -> Result<(Var, Vec<Option<BatchMoments<S>>>)> {
        let out = self.g.forward(tape, &bound.g, x_t, mode)?;
        Ok((out.output, out.moments))
    }

    pub fn apply_moments(&mut self, moments: &ModelMoments<S>) {
        for m in &moments.g {
            self.g.apply_moments(m);
        }
        for m in &moments.t {
            self.t.apply_moments(m);
        }
        for m in &moments.c {
            self.c.apply_moments(m);
        }
        for m in &moments.d {
            self.d.apply_moments(m);
        }
    }

    /// Class logits for target-domain inputs: `C(G(x))`.
    pub fn predict_target(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let b = BoundArtn {
            g: self.g.bind_frozen(&mut tape),
            t: BoundMlp { vars: vec![] },
            c: self.c.bind_frozen(&mut tape),
            d: BoundMlp { vars: vec![] },
        };
        let xv = tape.constant(x.clone());
        let (f, _) = self.forward_target(&mut tape, &b, xv, Mode::Eval)?;
        let logits = self.c.forward(&mut tape, &b.c, f, Mode::Eval)?;
        Ok(tape.value(logits.output).clone())
    }

    /// Class logits for source-domain inputs: `C(T(G(x)))`.
    pub fn predict_source(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let b = BoundArtn {
            g: self.g.bind_frozen(&mut tape),
            t: self.t.bind_frozen(&mut tape),
            c: self.c.bind_frozen(&mut tape),
            d: BoundMlp { vars: vec![] },
        };
        let xv = tape.constant(x.clone());
        let src = self.forward_source(&mut tape, &b, xv, Mode::Eval)?;
        let logits = self.c.forward(&mut tape, &b.c, src.t_out, Mode::Eval)?;
        Ok(tape.value(logits.output).clone())
    }

    /// Named tensors of all four networks.
    pub fn named_state(&self) -> Vec<(String, Tensor<S>)> {
        [&self.g, &self.t, &self.c, &self.d]
            .into_iter()
            .flat_map(|n| n.params.named_state())
            .collect()
    }

    pub fn load_named_state(&mut self, state: &[(String, Tensor<S>)]) -> Result<()> {
        self.g.params.load_named_state(state)?;
        self.t.params.load_named_state(state)?;
        self.c.params.load_named_state(state)?;
        self.d.params.load_named_state(state)
    }
}

fn check_batches<S: Scalar>(batch_s: &Batch<S>, batch_t: &Batch<S>) -> Result<Vec<usize>> {
    if batch_s.is_empty() || batch_t.is_empty() {
        return Err(Error::Empty("empty batch".into()));
    }
    batch_s
        .class_labels
        .clone()
        .ok_or_else(|| Error::invalid("source batch carries no class labels"))
}

fn value<S: Scalar>(tape: &Tape<S>, v: Var) -> f64 {
    tape.value(v).item().to_f64_lossy()
}

fn weighted_sum<S: Scalar>(tape: &mut Tape<S>, terms: &[(Var, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(v, w) in terms {
        let term = if w == 1.0 { v } else { tape.scale(v, S::of(w)) };
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    acc.ok_or_else(|| Error::invalid("empty objective"))
}

type DomainLogits<S> = (Var, Var, Vec<Option<BatchMoments<S>>>);

/// Domain cross-entropies of both domains from one reversed, stacked pass
/// through D.
#[allow(clippy::too_many_arguments)]
fn domain_terms<S: Scalar>(
    model: &ArtnModel<S>,
    bound: &BoundArtn,
    tape: &mut Tape<S>,
    source_feat: Var,
    target_feat: Var,
    coeff: f64,
    ns: usize,
    nt: usize,
    mode: Mode,
) -> Result<(DomainLogits<S>, Var, Var)> {
    let stacked = tape.concat_rows(&[source_feat, target_feat])?;
    let rev = tape.grl(stacked, S::of(coeff));
    let dom = model.d.forward(tape, &bound.d, rev, mode)?;
    let ds = tape.slice_rows(dom.output, 0, ns)?;
    let dt = tape.slice_rows(dom.output, ns, nt)?;
    let l_s = tape.softmax_cross_entropy(ds, &vec![SOURCE_DOMAIN; ns])?;
    let l_t = tape.softmax_cross_entropy(dt, &vec![TARGET_DOMAIN; nt])?;
    Ok(((ds, dt, dom.moments), l_s, l_t))
}

/// Full objective with the transform network and cosine regularizer.
#[allow(clippy::too_many_arguments)]
pub fn artn_loss<S: Scalar>(
    model: &ArtnModel<S>,
    bound: &BoundArtn,
    hyper: &ArtnHyper,
    batch_s: &Batch<S>,
    batch_t: &Batch<S>,
    progress: f64,
    mode: Mode,
    tape: &mut Tape<S>,
) -> Result<LossOutput<S>> {
    hyper.validate()?;
    let y_s = check_batches(batch_s, batch_t)?;
    let gamma = hyper.schedule.gamma(progress);
    let coeff = hyper.lambda * gamma;

    let (ns, nt) = (batch_s.len(), batch_t.len());
    let xs = tape.constant(batch_s.x.clone());
    let xt = tape.constant(batch_t.x.clone());
    let (g_src, f_s, f_t, g_moments) = model.forward_joint(tape, bound, xs, xt, mode)?;
    let (t_out, _, t_moments) = model.transform(tape, bound, &g_src, mode)?;
    let cls = model.c.forward(tape, &bound.c, t_out, mode)?;
    let l_c = tape.softmax_cross_entropy(cls.output, &y_s)?;

    let (dom, l_s, l_t) = domain_terms(model, bound, tape, t_out, f_t, coeff, ns, nt, mode)?;

    let cos = tape.cosine_similarity_mean(f_s, t_out)?;
    let r = tape.scale(cos, -S::one());

    let mut terms = vec![(l_c, 1.0), (l_s, 1.0), (l_t, 1.0)];
    if hyper.beta != 0.0 {
        terms.push((r, hyper.beta));
    }
    let objective = weighted_sum(tape, &terms)?;

    let parts = LossParts {
        l_c: value(tape, l_c),
        l_s: value(tape, l_s),
        l_t: value(tape, l_t),
        r: value(tape, r),
    };
    Ok(LossOutput {
        objective,
        total: parts.total(hyper.lambda, hyper.beta),
        parts,
        gamma,
        coeff,
        outputs: ForwardOutputs {
            f_s,
            t_out,
            f_t,
            class_logits: cls.output,
            domain_logits_source: dom.0,
            domain_logits_target: dom.1,
        },
        moments: ModelMoments {
            g: vec![g_moments],
            t: vec![t_moments],
            c: vec![cls.moments],
            d: vec![dom.2],
        },
    })
}

/// Symmetric baseline: C and D both read `G(x)`; T and the regularizer are
/// unused. With `λ = 0` this is source-only training.
#[allow(clippy::too_many_arguments)]
pub fn dann_loss<S: Scalar>(
    model: &ArtnModel<S>,
    bound: &BoundArtn,
    hyper: &ArtnHyper,
    batch_s: &Batch<S>,
    batch_t: &Batch<S>,
    progress: f64,
    mode: Mode,
    tape: &mut Tape<S>,
) -> Result<LossOutput<S>> {
    hyper.validate()?;
    let y_s = check_batches(batch_s, batch_t)?;
    let gamma = hyper.schedule.gamma(progress);
    let coeff = hyper.lambda * gamma;

    let (ns, nt) = (batch_s.len(), batch_t.len());
    let xs = tape.constant(batch_s.x.clone());
    let xt = tape.constant(batch_t.x.clone());
    // Without adaptation no target statistics may reach G: the target rows
    // get their own pass and its moments are discarded.
    let (f_s, f_t, g_moments) = if hyper.lambda == 0.0 {
        let (f_s, m) = model.forward_target(tape, bound, xs, mode)?;
        let (f_t, _) = model.forward_target(tape, bound, xt, mode)?;
        (f_s, f_t, m)
    } else {
        let (_, f_s, f_t, m) = model.forward_joint(tape, bound, xs, xt, mode)?;
        (f_s, f_t, m)
    };
    let cls = model.c.forward(tape, &bound.c, f_s, mode)?;
    let l_c = tape.softmax_cross_entropy(cls.output, &y_s)?;

    let (dom, l_s, l_t) = domain_terms(model, bound, tape, f_s, f_t, coeff, ns, nt, mode)?;

    let objective = weighted_sum(tape, &[(l_c, 1.0), (l_s, 1.0), (l_t, 1.0)])?;
    let parts = LossParts {
        l_c: value(tape, l_c),
        l_s: value(tape, l_s),
        l_t: value(tape, l_t),
        r: 0.0,
    };
    Ok(LossOutput {
        objective,
        total: parts.total(hyper.lambda, 0.0),
        parts,
        gamma,
        coeff,
        outputs: ForwardOutputs {
            f_s,
            t_out: f_s,
            f_t,
            class_logits: cls.output,
            domain_logits_source: dom.0,
            domain_logits_target: dom.1,
        },
        moments: ModelMoments {
            g: vec![g_moments],
            t: vec![],
            c: vec![cls.moments],
            d: vec![dom.2],
        },
    })
}
