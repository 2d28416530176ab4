use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{BatchMoments, BnMode, Gradients, Tape, Var};
use crate::tensor::Tensor;

use super::params::{init_parameters, Activation, NetworkSpec, ParamTag, ParameterSet};
use super::BN_MOMENTUM;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A network: its architecture and parameters.
#[derive(Debug)]
pub struct Mlp<S> {
    pub spec: NetworkSpec,
    pub params: ParameterSet<S>,
    forward_calls: AtomicUsize,
}

impl<S: Scalar> Clone for Mlp<S> {
    fn clone(&self) -> Self {
        Mlp {
            spec: self.spec.clone(),
            params: self.params.clone(),
            forward_calls: AtomicUsize::new(self.forward_calls()),
        }
    }
}

/// Tape handles for each tensor of a [`ParameterSet`], in the same order.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    pub vars: Vec<Var>,
}

impl BoundMlp {
    /// Gradient per parameter; `None` where nothing flowed.
    pub fn grads<S: Scalar>(&self, grads: &Gradients<S>) -> Vec<Option<Tensor<S>>> {
        self.vars.iter().map(|&v| grads.get(v)).collect()
    }

    /// Gradient per parameter, zero-filled where nothing flowed.
    pub fn grads_or_zero<S: Scalar>(&self, grads: &Gradients<S>) -> Vec<Tensor<S>> {
        self.vars.iter().map(|&v| grads.wrt(v)).collect()
    }
}

pub struct MlpOutput<S> {
    pub output: Var,
    /// Post-activation output of every layer.
    pub per_layer: Vec<Var>,
    /// Batch moments of each batch-norm layer in train mode.
    pub moments: Vec<Option<BatchMoments<S>>>,
}

impl<S: Scalar> Mlp<S> {
    pub fn new(spec: NetworkSpec, tag: ParamTag, seed: u64) -> Result<Self> {
        let params = init_parameters(&spec, tag, seed)?;
        Ok(Self::from_parts(spec, params))
    }

    pub fn from_parts(spec: NetworkSpec, params: ParameterSet<S>) -> Self {
        Mlp {
            spec,
            params,
            forward_calls: AtomicUsize::new(0),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.spec.layers.len()
    }

    /// Number of forward passes (whole or per-layer) run through this network.
    pub fn forward_calls(&self) -> usize {
        self.forward_calls.load(Ordering::Relaxed)
    }

    /// Registers every parameter as a gradient-receiving leaf.
    pub fn bind(&self, tape: &mut Tape<S>) -> BoundMlp {
        BoundMlp {
            vars: self.params.tensors().iter().map(|t| tape.param(t.clone())).collect(),
        }
    }

    /// Registers parameters as constants (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape<S>) -> BoundMlp {
        BoundMlp {
            vars: self.params.tensors().iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }

    /// One layer: affine, optional batch norm, activation.
    pub fn forward_layer(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundMlp,
        layer: usize,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BatchMoments<S>>)> {
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        let spec = &self.spec.layers[layer];
        let want = self.spec.in_width(layer);
        let got = tape.value(x).dims2().map(|(_, c)| c);
        if got != Some(want) {
            return Err(Error::Shape {
                op: "forward_layer",
                lhs: tape.value(x).shape().to_vec(),
                rhs: vec![want, spec.width],
            });
        }
        let (slot, has_bn) = self.params.layer_slot(layer);
        let v = &bound.vars;
        let mut h = tape.affine(x, v[slot], v[slot + 1])?;
        let mut moments = None;
        if has_bn {
            let bn_mode = match mode {
                Mode::Train => BnMode::Train,
                Mode::Eval => BnMode::Eval(
                    self.params
                        .moments(layer)
                        .expect("batch-norm layer without running moments"),
                ),
            };
            let (y, m) = tape.batch_norm(h, v[slot + 2], v[slot + 3], bn_mode)?;
            h = y;
            moments = m;
        }
        if spec.activation == Activation::Relu {
            h = tape.relu(h);
        }
        Ok((h, moments))
    }

    pub fn forward(&self, tape: &mut Tape<S>, bound: &BoundMlp, x: Var, mode: Mode) -> Result<MlpOutput<S>> {
        let mut per_layer = Vec::with_capacity(self.num_layers());
        let mut moments = Vec::with_capacity(self.num_layers());
        let mut h = x;
        for layer in 0..self.num_layers() {
            let (y, m) = self.forward_layer(tape, bound, layer, h, mode)?;
            per_layer.push(y);
            moments.push(m);
            h = y;
        }
        Ok(MlpOutput {
            output: h,
            per_layer,
            moments,
        })
    }

    /// Folds train-mode batch statistics into the running moments.
    pub fn apply_moments(&mut self, moments: &[Option<BatchMoments<S>>]) {
        for (layer, m) in moments.iter().enumerate() {
            if let (Some(m), Some(r)) = (m, self.params.moments_mut(layer)) {
                r.update(m, S::of(BN_MOMENTUM));
            }
        }
    }

    /// Eval-mode inference without gradient tracking.
    pub fn infer(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &bound, xv, Mode::Eval)?;
        Ok(tape.value(out.output).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::LayerSpec;

    #[test]
    fn identity_linear_layer_passes_input() {
        let spec = NetworkSpec {
            input_dim: 3,
            layers: vec![LayerSpec {
                width: 3,
                batch_norm: false,
                activation: Activation::None,
            }],
        };
        let mut net = Mlp::<f64>::new(spec, ParamTag::FeatureExtractor, 0).unwrap();
        let eye: Vec<f64> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        net.params.tensors_mut()[0] = Tensor::new(vec![3, 3], eye).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 0.5], vec![3.0, 4.0, 5.0]]).unwrap();
        assert_eq!(net.infer(&x).unwrap(), x);
    }

    #[test]
    fn per_layer_has_one_entry_per_layer() {
        let spec = NetworkSpec::mlp(2, &[5, 4, 3], true, Activation::Relu, Activation::None);
        let net = Mlp::<f64>::new(spec, ParamTag::FeatureExtractor, 1).unwrap();
        let mut tape = Tape::new();
        let b = net.bind(&mut tape);
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, -1.0]]).unwrap());
        let out = net.forward(&mut tape, &b, x, Mode::Train).unwrap();
        assert_eq!(out.per_layer.len(), 3);
        assert_eq!(out.output, *out.per_layer.last().unwrap());
        assert!(out.moments[0].is_some() && out.moments[2].is_none());
    }

    #[test]
    fn eval_forward_is_pure() {
        let spec = NetworkSpec::mlp(2, &[6, 2], true, Activation::Relu, Activation::None);
        let net = Mlp::<f64>::new(spec, ParamTag::LabelClassifier, 2).unwrap();
        let x = Tensor::from_rows(&[vec![0.3, 2.0], vec![1.0, -1.0], vec![0.0, 0.1]]).unwrap();
        let a = net.infer(&x).unwrap();
        let b = net.infer(&x).unwrap();
        assert!(a.bitwise_eq(&b));
        assert_eq!(net.params.moments(0).unwrap().mean, vec![0.0; 6]);
    }

    #[test]
    fn train_moments_update_running_state() {
        let spec = NetworkSpec::mlp(2, &[4], true, Activation::Relu, Activation::Relu);
        let mut net = Mlp::<f64>::new(spec, ParamTag::LabelClassifier, 2).unwrap();
        let mut tape = Tape::new();
        let b = net.bind(&mut tape);
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 5.0]]).unwrap());
        let out = net.forward(&mut tape, &b, x, Mode::Train).unwrap();
        net.apply_moments(&out.moments);
        let r = net.params.moments(0).unwrap();
        assert!(r.mean.iter().any(|&m| m != 0.0));
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let spec = NetworkSpec::mlp(3, &[4], false, Activation::Relu, Activation::Relu);
        let net = Mlp::<f64>::new(spec, ParamTag::LabelClassifier, 2).unwrap();
        assert!(matches!(net.infer(&Tensor::zeros(&[2, 2])), Err(Error::Shape { .. })));
    }
}
