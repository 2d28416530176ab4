use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::params::ParameterSet;

/// SGD with classical momentum: `v ← m·v − α·g; θ ← θ + v`.
#[derive(Debug, Clone)]
pub struct SgdState<S> {
    pub learning_rate: S,
    pub momentum: S,
    velocities: Vec<Tensor<S>>,
}

impl<S: Scalar> SgdState<S> {
    pub fn new(params: &ParameterSet<S>, learning_rate: S, momentum: S) -> Result<Self> {
        if !(learning_rate > S::zero() && learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(momentum >= S::zero() && momentum < S::one()) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(SgdState {
            learning_rate,
            momentum,
            velocities: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        })
    }

    pub fn velocities(&self) -> &[Tensor<S>] {
        &self.velocities
    }
}

/// Applies one update. `grads` is aligned with `params.tensors()`.
pub fn sgd_step<S: Scalar>(
    params: &mut ParameterSet<S>,
    grads: &[Option<Tensor<S>>],
    state: &mut SgdState<S>,
) -> Result<()> {
    for (i, name) in params.names().iter().enumerate() {
        match grads.get(i) {
            Some(Some(g)) if g.shape() == params.tensors()[i].shape() => {}
            Some(Some(g)) => {
                return Err(Error::Shape {
                    op: "sgd_step",
                    lhs: params.tensors()[i].shape().to_vec(),
                    rhs: g.shape().to_vec(),
                })
            }
            _ => return Err(Error::MissingGradient(format!("{}.{name}", params.tag.prefix()))),
        }
    }
    let (lr, m) = (state.learning_rate, state.momentum);
    for ((p, g), v) in params
        .tensors_mut()
        .iter_mut()
        .zip(grads)
        .zip(state.velocities.iter_mut())
    {
        let g = g.as_ref().expect("checked above");
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = m * *vv - lr * gv;
            *pv += *vv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{init_parameters, Activation, NetworkSpec, ParamTag};

    fn scalar_params(theta: f64) -> ParameterSet<f64> {
        let spec = NetworkSpec::mlp(1, &[1], false, Activation::None, Activation::None);
        let mut p = init_parameters(&spec, ParamTag::LabelClassifier, 0).unwrap();
        p.tensors_mut()[0].data_mut()[0] = theta;
        p
    }

    fn ones(p: &ParameterSet<f64>, v: f64) -> Vec<Option<Tensor<f64>>> {
        p.tensors().iter().map(|t| Some(Tensor::filled(t.shape(), v))).collect()
    }

    #[test]
    fn plain_sgd_step() {
        let mut p = scalar_params(0.0);
        let mut s = SgdState::new(&p, 0.1, 0.0).unwrap();
        let g = ones(&p, 1.0);
        sgd_step(&mut p, &g, &mut s).unwrap();
        assert_eq!(p.tensors()[0].data()[0], -0.1);
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut p = scalar_params(0.7);
        let before = p.clone();
        let mut s = SgdState::new(&p, 0.5, 0.9).unwrap();
        let g = ones(&p, 0.0);
        sgd_step(&mut p, &g, &mut s).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn momentum_unrolls() {
        // v1 = −1, θ1 = −1; v2 = 0.9·(−1) − 1 = −1.9, θ2 = −2.9
        let mut p = scalar_params(0.0);
        let mut s = SgdState::new(&p, 1.0, 0.9).unwrap();
        let g = ones(&p, 1.0);
        sgd_step(&mut p, &g, &mut s).unwrap();
        sgd_step(&mut p, &g, &mut s).unwrap();
        assert!((p.tensors()[0].data()[0] + 2.9).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut p = scalar_params(0.0);
        let mut s = SgdState::new(&p, 0.1, 0.0).unwrap();
        let mut g = ones(&p, 1.0);
        g[1] = None;
        let err = sgd_step(&mut p, &g, &mut s).unwrap_err();
        assert!(err.to_string().contains("c.layer0.bias"), "{err}");
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let p = scalar_params(0.0);
        assert!(SgdState::new(&p, 0.0, 0.5).is_err());
        assert!(SgdState::new(&p, 0.1, 1.0).is_err());
    }
}
