use std::path::Path;

use nalgebra::Vector6;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AllocError, AllocMode, AllocationExpert, QpOptions};
use crate::airframe::{AirframeConfig, WrenchBox};
use crate::neural::{ByteReader, ByteWriter, NeuralError};

const MAGIC: &[u8; 4] = b"RLDS";
const VERSION: u16 = 1;
const LABEL_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub config_hash: String,
    pub mode: AllocMode,
    pub seed: u64,
    pub count: usize,
    /// QP solves that stopped at the iteration cap.
    pub unconverged: usize,
}

/// Normalized wrench commands paired with expert thrusts.
///
/// Inputs are principal-frame box coordinates in `[-1, 1]⁶`; labels are thrusts
/// mapped to `[0, 1]` by the thrust range. Constrained labels always lie in that
/// range, pseudo-inverse labels may not.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationDataset {
    pub inputs: Array2<f64>,
    pub labels: Array2<f64>,
    pub meta: DatasetMeta,
}

impl AllocationDataset {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn motor_count(&self) -> usize {
        self.labels.ncols()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u16(VERSION);
        w.u8(self.meta.mode.code());
        w.u32(self.motor_count() as u32);
        w.u64(self.len() as u64);
        w.u64(self.meta.seed);
        w.u64(self.meta.unconverged as u64);
        w.u32(self.meta.config_hash.len() as u32);
        w.bytes(self.meta.config_hash.as_bytes());
        for (x, y) in self.inputs.rows().into_iter().zip(self.labels.rows()) {
            x.iter().chain(y.iter()).for_each(|v| w.f64(*v));
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AllocError> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(NeuralError::CorruptPayload("bad dataset magic".into()).into());
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(NeuralError::VersionMismatch { found: version, expected: VERSION }.into());
        }
        let mode = AllocMode::from_code(r.u8()?).ok_or_else(|| NeuralError::CorruptPayload("mode".into()))?;
        let n_m = r.u32()? as usize;
        let count = r.u64()? as usize;
        let seed = r.u64()?;
        let unconverged = r.u64()? as usize;
        let hash_len = r.u32()? as usize;
        let config_hash = String::from_utf8(r.take(hash_len)?.to_vec())
            .map_err(|_| NeuralError::CorruptPayload("config hash is not utf-8".into()))?;
        if count.saturating_mul((6 + n_m) * 8) > bytes.len() {
            return Err(NeuralError::CorruptPayload("sample table overruns payload".into()).into());
        }
        let mut inputs = Array2::zeros((count, 6));
        let mut labels = Array2::zeros((count, n_m));
        for i in 0..count {
            for k in 0..6 {
                inputs[(i, k)] = r.f64()?;
            }
            for k in 0..n_m {
                labels[(i, k)] = r.f64()?;
            }
        }
        r.expect_end()?;
        Ok(Self { inputs, labels, meta: DatasetMeta { config_hash, mode, seed, count, unconverged } })
    }

    pub fn save(&self, path: &Path) -> Result<(), AllocError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, AllocError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Draws `a ~ U([-1,1]⁶)`, maps it through the wrench box and labels it with the expert.
pub fn generate_dataset(
    config: &AirframeConfig,
    wrench_box: &WrenchBox,
    n: usize,
    mode: AllocMode,
    seed: u64,
    qp: QpOptions,
) -> Result<AllocationDataset, AllocError> {
    if n == 0 {
        return Err(AllocError::EmptyDataset);
    }
    let expert = AllocationExpert::new(config, mode, qp)?;
    let (lo, hi) = config.thrust_bounds();
    let range = hi - lo;
    let n_m = config.motor_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Array2::zeros((n, 6));
    let mut labels = Array2::zeros((n, n_m));
    let mut unconverged = 0;
    for i in 0..n {
        let a = Vector6::from_fn(|_, _| rng.random_range(-1.0..=1.0));
        let (u, converged) = expert.label(&wrench_box.command_to_wrench(&a));
        unconverged += usize::from(!converged);
        for k in 0..6 {
            inputs[(i, k)] = a[k];
        }
        for k in 0..n_m {
            let y = (u[k] - lo) / range;
            if mode == AllocMode::Constrained && !(-LABEL_SLACK..=1.0 + LABEL_SLACK).contains(&y) {
                return Err(AllocError::InvalidDataset(format!("label {y} outside the thrust range")));
            }
            labels[(i, k)] = y;
        }
    }
    Ok(AllocationDataset {
        inputs,
        labels,
        meta: DatasetMeta { config_hash: config.config_hash(), mode, seed, count: n, unconverged },
    })
}
