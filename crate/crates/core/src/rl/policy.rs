use std::path::Path;

use ndarray::{Array2, ArrayView2};

use super::{PpoConfig, RlError};
use crate::neural::{Activation, AdamHyper, AdamState, ByteReader, ByteWriter, MlpModel, NeuralError, Squash};
use crate::sim::OBS_DIM;

pub const ACTION_DIM: usize = 6;

const MAGIC: &[u8; 4] = b"RLPP";
const VERSION: u16 = 1;
const HALF_LN_TAU: f64 = 0.918_938_533_204_672_7;

/// Actor, critic and both optimizer states: the unit that is stored in the library
/// and transferred to a new airframe.
///
/// The actor's Adam state covers the network parameters followed by the six
/// log-std entries.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyPair {
    pub actor: MlpModel,
    pub log_std: Vec<f64>,
    pub critic: MlpModel,
    pub actor_opt: AdamState,
    pub critic_opt: AdamState,
}

impl PolicyPair {
    pub fn new(config: &PpoConfig, seed: u64) -> Self {
        let actor = MlpModel::new(
            &[OBS_DIM, 32, 24, ACTION_DIM],
            &[Activation::Tanh, Activation::Tanh, Activation::Linear],
            Squash::Tanh,
            seed,
        )
        .expect("fixed architecture");
        let critic = MlpModel::new(
            &[OBS_DIM, 32, 24, 1],
            &[Activation::Tanh, Activation::Tanh, Activation::Linear],
            Squash::None,
            seed.wrapping_add(0x9e37_79b9_7f4a_7c15),
        )
        .expect("fixed architecture");
        let actor_opt = AdamState::new(actor.num_params() + ACTION_DIM, AdamHyper::with_lr(config.actor_lr));
        let critic_opt = AdamState::new(critic.num_params(), AdamHyper::with_lr(config.critic_lr));
        Self { actor, log_std: vec![config.initial_log_std; ACTION_DIM], critic, actor_opt, critic_opt }
    }

    /// Deterministic action `tanh(μ(o))` for each observation row.
    pub fn mean_action(&self, obs: ArrayView2<f64>) -> Result<Array2<f64>, NeuralError> {
        self.actor.forward(obs)
    }

    pub fn values(&self, obs: ArrayView2<f64>) -> Result<Vec<f64>, NeuralError> {
        Ok(self.critic.forward(obs)?.into_raw_vec_and_offset().0)
    }

    /// Checks the layout invariants that a deserialized or transferred policy must satisfy.
    pub fn validate(&self) -> Result<(), NeuralError> {
        let arch = |m: &str| Err(NeuralError::Architecture(m.to_string()));
        if self.actor.input_dim() != OBS_DIM || self.actor.output_dim() != ACTION_DIM || self.actor.squash() != Squash::Tanh
        {
            return arch("actor must map 15 observations to 6 squashed actions");
        }
        if self.critic.input_dim() != OBS_DIM || self.critic.output_dim() != 1 {
            return arch("critic must map 15 observations to one value");
        }
        if self.log_std.len() != ACTION_DIM {
            return Err(NeuralError::ShapeMismatch { expected: ACTION_DIM, got: self.log_std.len() });
        }
        if self.actor_opt.len() != self.actor.num_params() + ACTION_DIM {
            return Err(NeuralError::ShapeMismatch {
                expected: self.actor.num_params() + ACTION_DIM,
                got: self.actor_opt.len(),
            });
        }
        if self.critic_opt.len() != self.critic.num_params() {
            return Err(NeuralError::ShapeMismatch { expected: self.critic.num_params(), got: self.critic_opt.len() });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u16(VERSION);
        w.model(&self.actor, Some(&self.actor_opt));
        w.f64s(&self.log_std);
        w.model(&self.critic, Some(&self.critic_opt));
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NeuralError> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(NeuralError::CorruptPayload("bad policy magic".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(NeuralError::VersionMismatch { found: version, expected: VERSION });
        }
        let (actor, actor_opt) = r.model()?;
        let log_std = r.f64s()?;
        let (critic, critic_opt) = r.model()?;
        r.expect_end()?;
        let missing = || NeuralError::CorruptPayload("policy lacks optimizer state".into());
        let pair = Self { actor, log_std, critic, actor_opt: actor_opt.ok_or_else(missing)?, critic_opt: critic_opt.ok_or_else(missing)? };
        pair.validate().map_err(|e| NeuralError::CorruptPayload(e.to_string()))?;
        Ok(pair)
    }

    pub fn save(&self, path: &Path) -> Result<(), RlError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RlError> {
        Ok(Self::from_bytes(&std::fs::read(path)?)?)
    }
}

/// Log-density of `x` under a diagonal Gaussian with mean `mu` and log-std `log_std`.
pub fn gaussian_log_prob(x: &[f64], mu: &[f64], log_std: &[f64]) -> f64 {
    x.iter()
        .zip(mu)
        .zip(log_std)
        .map(|((x, m), ls)| {
            let z = (x - m) * (-ls).exp();
            -0.5 * z * z - ls - HALF_LN_TAU
        })
        .sum()
}

/// `Σ ln(1 − tanh²(x))`, evaluated as `2(ln 2 − x − softplus(−2x))` to stay finite for large |x|.
pub fn squash_log_det(x: &[f64]) -> f64 {
    x.iter()
        .map(|&x| {
            let t = -2.0 * x;
            let softplus = if t > 0.0 { t + (-t).exp().ln_1p() } else { t.exp().ln_1p() };
            2.0 * (std::f64::consts::LN_2 - x - softplus)
        })
        .sum()
}

/// Log-density of the squashed action `tanh(x)`.
pub fn squashed_log_prob(x: &[f64], mu: &[f64], log_std: &[f64]) -> f64 {
    gaussian_log_prob(x, mu, log_std) - squash_log_det(x)
}
