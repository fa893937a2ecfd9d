//! First-order optimizers over a model's flat parameter vector.

use serde::{Deserialize, Serialize};

use super::model::StudentModel;
use super::vocab::Symbol;
use crate::error::{Error, Result};

/// Update rule for supervised and policy-gradient training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain gradient descent.
    #[default]
    Sgd,
    /// Adam with bias correction.
    Adam,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Stateful optimizer over a model's flat parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate >= 0.0) || !learning_rate.is_finite() {
            return Err(Error::contract("learning rate must be finite and nonnegative"));
        }
        Ok(Optimizer {
            kind,
            learning_rate,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Applies one update on the mean loss of `batch`.
    pub fn update(&mut self, model: &StudentModel, batch: &[(Vec<Symbol>, Vec<Symbol>)]) -> Result<StudentModel> {
        match self.kind {
            OptimizerKind::Sgd => model.sft_update(batch, self.learning_rate),
            OptimizerKind::Adam => {
                if batch.is_empty() || self.learning_rate == 0.0 {
                    return Ok(model.clone());
                }
                let g = model.batch_gradient(batch)?;
                self.apply(model, &g, -1.0)
            }
        }
    }

    /// Moves `model` by `scale` times the learning rate along the update
    /// direction for `grad`: plain `grad` for SGD, the bias-corrected moment
    /// ratio for Adam. A positive scale ascends.
    pub fn apply(&mut self, model: &StudentModel, grad: &[f64], scale: f64) -> Result<StudentModel> {
        if self.learning_rate == 0.0 {
            return Ok(model.clone());
        }
        match self.kind {
            OptimizerKind::Sgd => model.step(grad, scale * self.learning_rate),
            OptimizerKind::Adam => {
                let dir = self.adam_direction(grad);
                model.step(&dir, scale * self.learning_rate)
            }
        }
    }

    fn adam_direction(&mut self, g: &[f64]) -> Vec<f64> {
        if self.m.len() != g.len() {
            self.m = vec![0.0; g.len()];
            self.v = vec![0.0; g.len()];
            self.t = 0;
        }
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        self.m
            .iter_mut()
            .zip(self.v.iter_mut())
            .zip(g)
            .map(|((m, v), &gi)| {
                *m = BETA1 * *m + (1.0 - BETA1) * gi;
                *v = BETA2 * *v + (1.0 - BETA2) * gi * gi;
                (*m / c1) / ((*v / c2).sqrt() + EPS)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_has_unit_magnitude() {
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1).unwrap();
        let d = opt.adam_direction(&[2.0, -0.5, 0.0]);
        assert!((d[0] - 1.0).abs() < 1e-6);
        assert!((d[1] + 1.0).abs() < 1e-6);
        assert_eq!(d[2], 0.0);
    }

    #[test]
    fn rejects_bad_learning_rate() {
        assert!(Optimizer::new(OptimizerKind::Sgd, -1.0).is_err());
        assert!(Optimizer::new(OptimizerKind::Adam, f64::NAN).is_err());
    }
}
