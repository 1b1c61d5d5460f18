use serde::{Deserialize, Serialize};

use super::{MlpModel, NeuralError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments and step counter. Exported and restored verbatim when a policy
/// is used to initialize training on another airframe.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub hyper: AdamHyper,
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl AdamState {
    pub fn new(num_params: usize, hyper: AdamHyper) -> Self {
        Self { hyper, step: 0, first_moment: vec![0.0; num_params], second_moment: vec![0.0; num_params] }
    }

    pub fn len(&self) -> usize {
        self.first_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_moment.is_empty()
    }

    /// One bias-corrected update of `params` (possibly split over several slices,
    /// taken in order) from `grads`.
    pub fn step_segments(&mut self, segments: &mut [&mut [f64]], grads: &[f64]) -> Result<(), NeuralError> {
        let total: usize = segments.iter().map(|s| s.len()).sum();
        if total != self.len() {
            return Err(NeuralError::ShapeMismatch { expected: self.len(), got: total });
        }
        if grads.len() != self.len() {
            return Err(NeuralError::ShapeMismatch { expected: self.len(), got: grads.len() });
        }
        self.step += 1;
        let AdamHyper { lr, beta1, beta2, eps } = self.hyper;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let mut k = 0;
        for seg in segments.iter_mut() {
            for p in seg.iter_mut() {
                let g = grads[k];
                let m = beta1 * self.first_moment[k] + (1.0 - beta1) * g;
                let v = beta2 * self.second_moment[k] + (1.0 - beta2) * g * g;
                self.first_moment[k] = m;
                self.second_moment[k] = v;
                *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
                k += 1;
            }
        }
        Ok(())
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), NeuralError> {
        self.step_segments(&mut [params], grads)
    }
}

/// Applies one Adam update to every parameter of `model`.
pub fn adam_step(model: &mut MlpModel, state: &mut AdamState, grads: &[f64]) -> Result<(), NeuralError> {
    state.step(model.params_mut(), grads)
}
