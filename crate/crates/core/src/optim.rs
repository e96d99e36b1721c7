//! SGD and Adam over named parameter tensors.

use crate::error::{Error, Result};
use crate::tape::GradMap;
use crate::tensor::{Matrix, Scalar};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer state. Moment buffers exist only for Adam, created lazily with
/// the shape of the parameter they track.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub step_count: u64,
    m: BTreeMap<String, Matrix<T>>,
    v: BTreeMap<String, Matrix<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        OptimizerState {
            kind,
            learning_rate,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn has_moments(&self) -> bool {
        !self.m.is_empty() || !self.v.is_empty()
    }

    /// One optimizer step over named parameters. Every parameter must have a
    /// gradient entry of matching shape.
    pub fn step<'p>(
        &mut self,
        params: impl IntoIterator<Item = (String, &'p mut Matrix<T>)>,
        grads: &GradMap<T>,
    ) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count;
        let lr = T::from_f64(self.learning_rate);
        let beta1 = T::from_f64(ADAM_BETA1);
        let beta2 = T::from_f64(ADAM_BETA2);
        let eps = T::from_f64(ADAM_EPS);
        let bias1 = T::from_f64(1.0 - ADAM_BETA1.powi(t as i32));
        let bias2 = T::from_f64(1.0 - ADAM_BETA2.powi(t as i32));

        for (name, param) in params {
            let grad = grads
                .get(&name)
                .ok_or_else(|| Error::Config(format!("missing gradient for {name}")))?;
            if grad.shape() != param.shape() {
                return Err(Error::Config(format!(
                    "gradient shape {:?} does not match parameter {name} {:?}",
                    grad.shape(),
                    param.shape()
                )));
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, &g) in param.as_mut_slice().iter_mut().zip(grad.as_slice()) {
                        *p = *p - lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self
                        .m
                        .entry(name.clone())
                        .or_insert_with(|| Matrix::zeros(param.rows(), param.cols()));
                    let v = self
                        .v
                        .entry(name)
                        .or_insert_with(|| Matrix::zeros(param.rows(), param.cols()));
                    let one = T::one();
                    for (((p, &g), mv), vv) in param
                        .as_mut_slice()
                        .iter_mut()
                        .zip(grad.as_slice())
                        .zip(m.as_mut_slice())
                        .zip(v.as_mut_slice())
                    {
                        *mv = beta1 * *mv + (one - beta1) * g;
                        *vv = beta2 * *vv + (one - beta2) * g * g;
                        let m_hat = *mv / bias1;
                        let v_hat = *vv / bias2;
                        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(v: f64) -> (String, Matrix<f64>) {
        ("w".to_string(), Matrix::from_rows(&[vec![v]]))
    }

    fn grad_of(v: f64) -> GradMap<f64> {
        let mut g = GradMap::new();
        g.0.insert("w".to_string(), Matrix::from_rows(&[vec![v]]));
        g
    }

    #[test]
    fn sgd_single_step() {
        let (name, mut w) = single_param(1.0);
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, 0.1);
        opt.step([(name, &mut w)], &grad_of(2.0)).unwrap();
        assert!((w.at(0, 0) - 0.8).abs() < 1e-15);
        assert_eq!(opt.step_count, 1);
        assert!(!opt.has_moments());
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        // Scalar oracle: after one step m_hat = g, v_hat = g^2, so the update
        // is lr * g / (|g| + eps) which is approximately lr * sign(g).
        for &g in &[0.5f64, -3.0, 10.0] {
            let (name, mut w) = single_param(0.0);
            let mut opt = OptimizerState::new(OptimizerKind::Adam, 0.01);
            opt.step([(name, &mut w)], &grad_of(g)).unwrap();
            let expected = -0.01 * g / (g.abs() + ADAM_EPS);
            assert!((w.at(0, 0) - expected).abs() < 1e-12);
            assert!((w.at(0, 0).abs() - 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let (name, mut w) = single_param(1.5);
            let mut opt = OptimizerState::new(kind, 0.1);
            opt.step([(name.clone(), &mut w)], &grad_of(0.0)).unwrap();
            opt.step([(name, &mut w)], &grad_of(0.0)).unwrap();
            assert_eq!(w.at(0, 0), 1.5);
        }
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let (name, mut w) = single_param(1.0);
        let mut g = GradMap::new();
        g.0.insert("w".to_string(), Matrix::<f64>::zeros(2, 2));
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, 0.1);
        let err = opt.step([(name, &mut w)], &g).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn missing_gradient_is_config_error() {
        let (name, mut w) = single_param(1.0);
        let mut opt = OptimizerState::new(OptimizerKind::Adam, 0.1);
        let err = opt.step([(name, &mut w)], &GradMap::new()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn adam_bias_correction_over_steps() {
        // Two steps with constant gradient: closed form from the update rule.
        let (name, mut w) = single_param(0.0);
        let mut opt = OptimizerState::new(OptimizerKind::Adam, 0.1);
        let g = 2.0;
        opt.step([(name.clone(), &mut w)], &grad_of(g)).unwrap();
        let w1 = w.at(0, 0);
        opt.step([(name, &mut w)], &grad_of(g)).unwrap();
        let w2 = w.at(0, 0);

        let m1 = (1.0 - ADAM_BETA1) * g;
        let v1 = (1.0 - ADAM_BETA2) * g * g;
        let u1 = 0.1 * (m1 / (1.0 - ADAM_BETA1)) / ((v1 / (1.0 - ADAM_BETA2)).sqrt() + ADAM_EPS);
        assert!((w1 + u1).abs() < 1e-12);

        let m2 = ADAM_BETA1 * m1 + (1.0 - ADAM_BETA1) * g;
        let v2 = ADAM_BETA2 * v1 + (1.0 - ADAM_BETA2) * g * g;
        let u2 = 0.1 * (m2 / (1.0 - ADAM_BETA1.powi(2)))
            / ((v2 / (1.0 - ADAM_BETA2.powi(2))).sqrt() + ADAM_EPS);
        assert!((w2 - (w1 - u2)).abs() < 1e-12);
    }
}
