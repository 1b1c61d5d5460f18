use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AllocError, AllocMode, AllocationDataset, AllocationExpert, QpOptions};
use crate::airframe::{AirframeConfig, WrenchBox};
use crate::neural::{Activation, AdamHyper, AdamState, ByteReader, ByteWriter, MlpModel, NeuralError, Squash};

const MAGIC: &[u8; 4] = b"RLAN";
const VERSION: u16 = 1;

/// A trained allocation network together with the thrust range it denormalizes to.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationNet {
    pub mode: AllocMode,
    pub model: MlpModel,
    pub u_min: f64,
    pub u_max: f64,
    pub config_hash: String,
}

impl AllocationNet {
    /// Untrained network with the architecture used for `mode`.
    pub fn untrained(config: &AirframeConfig, mode: AllocMode, seed: u64) -> Self {
        let n_m = config.motor_count();
        let model = match mode {
            AllocMode::Unconstrained => {
                MlpModel::new(&[6, 32, n_m], &[Activation::Linear, Activation::Linear], Squash::None, seed)
            }
            AllocMode::Constrained => MlpModel::new(
                &[6, 100, 100, 100, n_m],
                &[Activation::LeakyRelu, Activation::LeakyRelu, Activation::LeakyRelu, Activation::Linear],
                Squash::None,
                seed,
            ),
        }
        .expect("fixed architectures are valid");
        let (u_min, u_max) = config.thrust_bounds();
        Self { mode, model, u_min, u_max, config_hash: config.config_hash() }
    }

    pub fn motor_count(&self) -> usize {
        self.model.output_dim()
    }

    /// Raw network output: thrusts normalized to the thrust range, unclamped.
    pub fn normalized(&self, commands: ArrayView2<f64>) -> Result<Array2<f64>, NeuralError> {
        self.model.forward(commands)
    }

    /// Physical thrusts for a batch of normalized wrench commands, clamped to the bounds.
    pub fn thrusts(&self, commands: ArrayView2<f64>) -> Result<Array2<f64>, NeuralError> {
        let range = self.u_max - self.u_min;
        let (lo, hi) = (self.u_min, self.u_max);
        Ok(self.normalized(commands)?.mapv(|y| (lo + y * range).clamp(lo, hi)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u16(VERSION);
        w.u8(self.mode.code());
        w.f64(self.u_min);
        w.f64(self.u_max);
        w.u32(self.config_hash.len() as u32);
        w.bytes(self.config_hash.as_bytes());
        w.model(&self.model, None);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NeuralError> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(NeuralError::CorruptPayload("bad allocation-net magic".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(NeuralError::VersionMismatch { found: version, expected: VERSION });
        }
        let mode = AllocMode::from_code(r.u8()?).ok_or_else(|| NeuralError::CorruptPayload("mode".into()))?;
        let u_min = r.f64()?;
        let u_max = r.f64()?;
        let len = r.u32()? as usize;
        let config_hash = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| NeuralError::CorruptPayload("config hash is not utf-8".into()))?;
        let (model, _) = r.model()?;
        r.expect_end()?;
        Ok(Self { mode, model, u_min, u_max, config_hash })
    }

    pub fn save(&self, path: &Path) -> Result<(), AllocError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, AllocError> {
        Ok(Self::from_bytes(&std::fs::read(path)?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AllocTrainOptions {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before the learning rate is halved.
    pub patience: usize,
    /// Training stops once the learning rate decays below this.
    pub min_lr: f64,
    pub validation_fraction: f64,
}

impl Default for AllocTrainOptions {
    fn default() -> Self {
        Self { lr: 1e-3, batch_size: 512, max_epochs: 2000, patience: 10, min_lr: 1e-6, validation_fraction: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    pub stop_reason: String,
}

fn mse(pred: &Array2<f64>, target: ArrayView2<f64>) -> f64 {
    let n = pred.len().max(1) as f64;
    pred.iter().zip(target.iter()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n
}

fn gather(src: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    src.select(Axis(0), idx)
}

/// Fits the network for `dataset.meta.mode` to the dataset by minibatch Adam on
/// mean-squared error. The learning rate halves whenever validation loss stalls
/// for `patience` epochs; the model with the lowest validation loss is returned.
pub fn train_allocation_net(
    config: &AirframeConfig,
    dataset: &AllocationDataset,
    options: &AllocTrainOptions,
    seed: u64,
) -> Result<(AllocationNet, TrainingLog), AllocError> {
    if dataset.is_empty() {
        return Err(AllocError::EmptyDataset);
    }
    if dataset.motor_count() != config.motor_count() || dataset.inputs.ncols() != 6 {
        return Err(AllocError::InvalidDataset("dataset shape does not match the airframe".into()));
    }
    if options.batch_size == 0 || !(0.0..1.0).contains(&options.validation_fraction) || options.lr <= 0.0 {
        return Err(AllocError::InvalidOption("training options"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = AllocationNet::untrained(config, dataset.meta.mode, rng.random());

    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = ((n as f64) * options.validation_fraction).round() as usize;
    let (val_idx, train_idx) = if n_val == 0 || n_val == n { (&order[..], &order[..]) } else { order.split_at(n_val) };
    let val_x = gather(&dataset.inputs, val_idx);
    let val_y = gather(&dataset.labels, val_idx);
    let mut train_idx = train_idx.to_vec();

    let mut adam = AdamState::new(net.model.num_params(), AdamHyper::with_lr(options.lr));
    let mut best = (net.model.clone(), f64::INFINITY, 0usize);
    let mut stale = 0;
    let mut epochs = Vec::new();
    let mut stop_reason = "max_epochs".to_string();

    for epoch in 0..options.max_epochs {
        train_idx.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in train_idx.chunks(options.batch_size) {
            let x = gather(&dataset.inputs, chunk);
            let y = gather(&dataset.labels, chunk);
            let cache = net.model.forward_cached(x.view())?;
            let scale = 2.0 / cache.output.len() as f64;
            let grad_out = (&cache.output - &y) * scale;
            loss_sum += mse(&cache.output, y.view()) * chunk.len() as f64;
            let grads = net.model.backward(&cache, grad_out.view())?;
            adam.step(net.model.params_mut(), &grads)?;
        }
        let train_loss = loss_sum / train_idx.len() as f64;
        let validation_loss = mse(&net.model.forward(val_x.view())?, val_y.view());
        if !train_loss.is_finite() || !validation_loss.is_finite() {
            return Err(AllocError::Diverged(epoch));
        }
        epochs.push(EpochRecord { epoch, train_loss, validation_loss, lr: adam.hyper.lr });
        if validation_loss < best.1 {
            best = (net.model.clone(), validation_loss, epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= options.patience {
                adam.hyper.lr *= 0.5;
                stale = 0;
                if adam.hyper.lr < options.min_lr {
                    stop_reason = "plateau".into();
                    break;
                }
            }
        }
        if validation_loss == 0.0 {
            stop_reason = "exact_fit".into();
            break;
        }
    }
    net.model = best.0;
    let log = TrainingLog { epochs, best_epoch: best.2, best_validation_loss: best.1, stop_reason };
    Ok((net, log))
}

/// Accuracy summary, normalized to the thrust range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationErrorReport {
    pub config_hash: String,
    pub mode: AllocMode,
    pub n: usize,
    pub max_abs: f64,
    pub mean_abs: f64,
    pub seed: u64,
}

/// Compares the network against its expert on `n` fresh commands drawn from `seed`.
/// Samples are processed in fixed chunks and reduced in order, so the result does
/// not depend on batch partitioning.
pub fn evaluate_allocation_error(
    net: &AllocationNet,
    config: &AirframeConfig,
    wrench_box: &WrenchBox,
    n: usize,
    seed: u64,
    qp: QpOptions,
) -> Result<AllocationErrorReport, AllocError> {
    if n == 0 {
        return Err(AllocError::EmptyDataset);
    }
    let data = super::generate_dataset(config, wrench_box, n, net.mode, seed, qp)?;
    let mut max_abs: f64 = 0.0;
    let mut sum = 0.0;
    const CHUNK: usize = 4096;
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let pred = net.normalized(data.inputs.slice(s![start..end, ..]))?;
        for (p, t) in pred.iter().zip(data.labels.slice(s![start..end, ..]).iter()) {
            let e = (p - t).abs();
            max_abs = max_abs.max(e);
            sum += e;
        }
    }
    Ok(AllocationErrorReport {
        config_hash: config.config_hash(),
        mode: net.mode,
        n,
        max_abs,
        mean_abs: sum / data.labels.len() as f64,
        seed,
    })
}

/// Normalized expert output for a batch of commands; the reference the networks imitate.
pub fn expert_normalized(
    config: &AirframeConfig,
    wrench_box: &WrenchBox,
    mode: AllocMode,
    commands: ArrayView2<f64>,
    qp: QpOptions,
) -> Result<Array2<f64>, AllocError> {
    let expert = AllocationExpert::new(config, mode, qp)?;
    let (lo, hi) = config.thrust_bounds();
    let mut out = Array2::zeros((commands.nrows(), config.motor_count()));
    for (i, row) in commands.rows().into_iter().enumerate() {
        let a = nalgebra::Vector6::from_iterator(row.iter().copied());
        let (u, _) = expert.label(&wrench_box.command_to_wrench(&a));
        for (k, uk) in u.iter().enumerate() {
            out[(i, k)] = (uk - lo) / (hi - lo);
        }
    }
    Ok(out)
}
