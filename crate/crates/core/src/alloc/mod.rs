//! Control allocation: the slack-QP expert, dataset generation over the PCA wrench
//! box, and the supervised allocation networks distilled from it.

mod dataset;
mod net;
mod qp;

pub use dataset::{generate_dataset, AllocationDataset, DatasetMeta};
pub use net::{
    evaluate_allocation_error, expert_normalized, train_allocation_net, AllocTrainOptions, AllocationErrorReport, AllocationNet,
    EpochRecord, TrainingLog,
};
pub use qp::{solve_allocation_qp, AllocationSolution, BoxQp, QpOptions};

use nalgebra::{DMatrix, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::airframe::{build_allocation_matrix, AirframeConfig, AllocationMatrix};
use crate::neural::NeuralError;

#[derive(Debug, Error)]
pub enum AllocError {
    #[error("QP did not converge (residual {:.3e} after {} iterations)", .0.kkt_residual, .0.iterations)]
    MaxIterations(Box<AllocationSolution>),
    #[error("invalid thrust bounds [{u_min}, {u_max}]")]
    InvalidBounds { u_min: f64, u_max: f64 },
    #[error("invalid option: {0}")]
    InvalidOption(&'static str),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("training diverged at epoch {0}")]
    Diverged(usize),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Which expert labels the data and which network imitates it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocMode {
    /// Minimum-norm pseudo-inverse allocation, imitated by a linear network.
    Unconstrained,
    /// Thrust-bounded slack QP, imitated by a leaky-ReLU network.
    Constrained,
}

impl AllocMode {
    pub fn code(self) -> u8 {
        match self {
            AllocMode::Unconstrained => 0,
            AllocMode::Constrained => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(AllocMode::Unconstrained),
            1 => Some(AllocMode::Constrained),
            _ => None,
        }
    }
}

/// Moore–Penrose pseudo-inverse via SVD; singular values below `1e-10·σ_max` are dropped.
pub fn pseudo_inverse(f: &AllocationMatrix) -> DMatrix<f64> {
    let m = DMatrix::from_iterator(6, f.motor_count(), f.matrix().iter().copied());
    let svd = m.svd(true, true);
    let sigma_max = svd.singular_values.max();
    let cutoff = 1e-10 * sigma_max;
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let mut pinv = DMatrix::zeros(f.motor_count(), 6);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff {
            pinv += v_t.row(k).transpose() * u.column(k).transpose() / s;
        }
    }
    pinv
}

/// Minimum-norm thrusts `F⁺ w_d`, ignoring bounds.
pub fn solve_unconstrained(f: &AllocationMatrix, w_d: &Vector6<f64>) -> Vec<f64> {
    let pinv = pseudo_inverse(f);
    (pinv * w_d).iter().copied().collect()
}

/// Labels wrenches with thrusts, either by pseudo-inverse or by the slack QP.
#[derive(Debug, Clone)]
pub enum AllocationExpert {
    PseudoInverse(DMatrix<f64>),
    Qp(BoxQp),
}

impl AllocationExpert {
    pub fn new(config: &AirframeConfig, mode: AllocMode, options: QpOptions) -> Result<Self, AllocError> {
        let f = build_allocation_matrix(config);
        Ok(match mode {
            AllocMode::Unconstrained => AllocationExpert::PseudoInverse(pseudo_inverse(&f)),
            AllocMode::Constrained => {
                let (lo, hi) = config.thrust_bounds();
                AllocationExpert::Qp(BoxQp::new(&f, lo, hi, options)?)
            }
        })
    }

    /// Thrusts for `w`, and whether the solver converged (always true for the pseudo-inverse).
    pub fn label(&self, w: &Vector6<f64>) -> (Vec<f64>, bool) {
        match self {
            AllocationExpert::PseudoInverse(pinv) => ((pinv * w).iter().copied().collect(), true),
            AllocationExpert::Qp(qp) => match qp.solve(w) {
                Ok(s) => (s.thrusts, true),
                Err(AllocError::MaxIterations(best)) => (best.thrusts, false),
                Err(e) => unreachable!("prepared QP cannot fail with {e}"),
            },
        }
    }
}
