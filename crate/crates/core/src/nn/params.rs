use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::RunningMoments;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub batch_norm: bool,
    pub activation: Activation,
}

/// Fully connected architecture: each layer is affine → (batch norm) → activation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Hidden layers use `hidden_act` and batch norm per `batch_norm`; the
    /// last layer uses `output_act` and never batch norm unless
    /// `output_act` is ReLU.
    pub fn mlp(
        input_dim: usize,
        widths: &[usize],
        batch_norm: bool,
        hidden_act: Activation,
        output_act: Activation,
    ) -> Self {
        let last = widths.len().saturating_sub(1);
        let layers = widths
            .iter()
            .enumerate()
            .map(|(i, &width)| {
                let act = if i == last { output_act } else { hidden_act };
                LayerSpec {
                    width,
                    batch_norm: batch_norm && act == Activation::Relu,
                    activation: act,
                }
            })
            .collect();
        NetworkSpec { input_dim, layers }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        if self.input_dim == 0 || self.layers.iter().any(|l| l.width == 0) {
            return Err(Error::invalid("network widths must be positive"));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, |l| l.width)
    }

    pub fn in_width(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            self.layers[layer - 1].width
        }
    }
}

/// Which of the four networks a parameter set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamTag {
    FeatureExtractor,
    Transform,
    LabelClassifier,
    DomainClassifier,
}

impl ParamTag {
    pub fn prefix(self) -> &'static str {
        match self {
            ParamTag::FeatureExtractor => "g",
            ParamTag::Transform => "t",
            ParamTag::LabelClassifier => "c",
            ParamTag::DomainClassifier => "d",
        }
    }
}

impl fmt::Display for ParamTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParamTag::FeatureExtractor => "theta_g",
            ParamTag::Transform => "theta_t",
            ParamTag::LabelClassifier => "theta_c",
            ParamTag::DomainClassifier => "theta_d",
        };
        f.write_str(s)
    }
}

/// Learnable tensors of one network plus its running batch-norm moments.
///
/// Per layer the tensors are stored in the order weight, bias and, when the
/// layer has batch norm, scale then shift.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<S> {
    pub tag: ParamTag,
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    /// `(first tensor index, has batch norm)` per layer.
    layout: Vec<(usize, bool)>,
    moments: Vec<Option<RunningMoments<S>>>,
}

impl<S: Scalar> ParameterSet<S> {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.tensors[i])
    }

    pub(crate) fn layer_slot(&self, layer: usize) -> (usize, bool) {
        self.layout[layer]
    }

    pub fn moments(&self, layer: usize) -> Option<&RunningMoments<S>> {
        self.moments[layer].as_ref()
    }

    pub fn moments_mut(&mut self, layer: usize) -> Option<&mut RunningMoments<S>> {
        self.moments[layer].as_mut()
    }

    pub fn num_layers(&self) -> usize {
        self.layout.len()
    }

    /// Named tensors including running moments, for checkpoints.
    pub fn named_state(&self) -> Vec<(String, Tensor<S>)> {
        let p = self.tag.prefix();
        let mut out: Vec<(String, Tensor<S>)> = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| (format!("{p}.{n}"), t.clone()))
            .collect();
        for (i, m) in self.moments.iter().enumerate() {
            if let Some(m) = m {
                out.push((
                    format!("{p}.layer{i}.running_mean"),
                    Tensor::from_parts(vec![m.mean.len()], m.mean.clone()),
                ));
                out.push((
                    format!("{p}.layer{i}.running_var"),
                    Tensor::from_parts(vec![m.var.len()], m.var.clone()),
                ));
            }
        }
        out
    }

    /// Restores values written by [`named_state`](Self::named_state).
    pub fn load_named_state(&mut self, state: &[(String, Tensor<S>)]) -> Result<()> {
        let p = self.tag.prefix();
        let find = |key: String| -> Result<&Tensor<S>> {
            state
                .iter()
                .find(|(n, _)| *n == key)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks tensor `{key}`")))
        };
        for i in 0..self.tensors.len() {
            let t = find(format!("{p}.{}", self.names[i]))?;
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::Shape {
                    op: "load_checkpoint",
                    lhs: self.tensors[i].shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            self.tensors[i] = t.clone().with_requires_grad(true);
        }
        for i in 0..self.moments.len() {
            if self.moments[i].is_some() {
                let mean = find(format!("{p}.layer{i}.running_mean"))?.data().to_vec();
                let var = find(format!("{p}.layer{i}.running_var"))?.data().to_vec();
                self.moments[i] = Some(RunningMoments { mean, var });
            }
        }
        Ok(())
    }
}

/// Weights uniform in `±√(6/fan_in)`, zero biases, unit batch-norm scale,
/// zero shift. Deterministic in `seed`.
pub fn init_parameters<S: Scalar>(spec: &NetworkSpec, tag: ParamTag, seed: u64) -> Result<ParameterSet<S>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    let mut layout = Vec::new();
    let mut moments = Vec::new();
    for (i, layer) in spec.layers.iter().enumerate() {
        let fan_in = spec.in_width(i);
        let bound = (6.0 / fan_in as f64).sqrt();
        let w: Vec<S> = (0..fan_in * layer.width)
            .map(|_| S::of(rng.random_range(-bound..bound)))
            .collect();
        layout.push((tensors.len(), layer.batch_norm));
        names.push(format!("layer{i}.weight"));
        tensors.push(Tensor::from_parts(vec![fan_in, layer.width], w).with_requires_grad(true));
        names.push(format!("layer{i}.bias"));
        tensors.push(Tensor::zeros(&[layer.width]).with_requires_grad(true));
        if layer.batch_norm {
            names.push(format!("layer{i}.bn_scale"));
            tensors.push(Tensor::filled(&[layer.width], S::one()).with_requires_grad(true));
            names.push(format!("layer{i}.bn_shift"));
            tensors.push(Tensor::zeros(&[layer.width]).with_requires_grad(true));
            moments.push(Some(RunningMoments::new(layer.width)));
        } else {
            moments.push(None);
        }
    }
    Ok(ParameterSet {
        tag,
        names,
        tensors,
        layout,
        moments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> NetworkSpec {
        NetworkSpec::mlp(4, &[8, 3], true, Activation::Relu, Activation::None)
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_parameters::<f64>(&spec(), ParamTag::FeatureExtractor, 11).unwrap();
        let b = init_parameters::<f64>(&spec(), ParamTag::FeatureExtractor, 11).unwrap();
        for (x, y) in a.tensors().iter().zip(b.tensors()) {
            assert!(x.bitwise_eq(y));
        }
        let c = init_parameters::<f64>(&spec(), ParamTag::FeatureExtractor, 12).unwrap();
        assert!(!a.tensors()[0].bitwise_eq(&c.tensors()[0]));
    }

    #[test]
    fn biases_zero_and_bn_identity() {
        let p = init_parameters::<f64>(&spec(), ParamTag::Transform, 3).unwrap();
        for (n, t) in p.names().iter().zip(p.tensors()) {
            assert!(t.requires_grad(), "{n}");
            if n.ends_with("bias") || n.ends_with("bn_shift") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{n}");
            }
            if n.ends_with("bn_scale") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{n}");
            }
        }
        assert_eq!(
            p.names(),
            &[
                "layer0.weight",
                "layer0.bias",
                "layer0.bn_scale",
                "layer0.bn_shift",
                "layer1.weight",
                "layer1.bias"
            ]
        );
    }

    #[test]
    fn weights_within_fan_in_bound() {
        let p = init_parameters::<f64>(&spec(), ParamTag::Transform, 5).unwrap();
        let bound = (6.0f64 / 4.0).sqrt();
        assert!(p.tensors()[0].data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn weight_mean_matches_uniform_law() {
        // 10⁴ draws from U(−b, b): σ = b/√3, so |mean| < 3σ/100.
        let spec = NetworkSpec::mlp(100, &[100], false, Activation::None, Activation::None);
        let p = init_parameters::<f64>(&spec, ParamTag::LabelClassifier, 9).unwrap();
        let w = p.tensors()[0].data();
        assert_eq!(w.len(), 10_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let sigma = (6.0f64 / 100.0).sqrt() / 3f64.sqrt();
        assert!(mean.abs() < 3.0 * sigma / 100.0, "mean {mean}");
    }

    #[test]
    fn empty_spec_rejected() {
        let spec = NetworkSpec {
            input_dim: 3,
            layers: vec![],
        };
        assert!(init_parameters::<f64>(&spec, ParamTag::Transform, 0).is_err());
    }
}
