use nalgebra::{Matrix6, SymmetricEigen, Vector6};
use serde::{Deserialize, Serialize};

use super::{admissible_wrench_corners, AirframeConfig, AirframeError};

/// Relative floor applied to box half-extents along directions the airframe cannot reach.
pub const BOX_EXTENT_FLOOR: f64 = 1e-6;

/// Minimum enclosing box of the admissible wrench set, aligned with the principal
/// components of its corner points.
///
/// Normalized commands `a ∈ [-1, 1]⁶` map to wrenches by scaling with the
/// half-extents in the principal frame and rotating back into the wrench frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WrenchBox {
    /// Columns are the principal axes, in descending variance order.
    pub basis: Matrix6<f64>,
    /// Box center in wrench coordinates.
    pub center: Vector6<f64>,
    /// Half-extents along the principal axes.
    pub half_extents: Vector6<f64>,
    /// Axes whose extent was lifted to the floor.
    pub floored: [bool; 6],
}

impl WrenchBox {
    /// `w = center + basis (a ⊙ half_extents)`, with `a` clamped to the unit box.
    pub fn command_to_wrench(&self, a: &Vector6<f64>) -> Vector6<f64> {
        let scaled = a.map(|x| x.clamp(-1.0, 1.0)).component_mul(&self.half_extents);
        self.center + self.basis * scaled
    }

    /// Inverse of [`command_to_wrench`](Self::command_to_wrench) (not clamped).
    pub fn wrench_to_command(&self, w: &Vector6<f64>) -> Vector6<f64> {
        (self.basis.transpose() * (w - self.center)).component_div(&self.half_extents)
    }

    /// Principal-frame coordinates of `w` relative to the center.
    pub fn principal_offset(&self, w: &Vector6<f64>) -> Vector6<f64> {
        self.basis.transpose() * (w - self.center)
    }

    /// True if `w` lies inside the box, with `slack` added to each half-extent.
    pub fn contains(&self, w: &Vector6<f64>, slack: f64) -> bool {
        let d = self.principal_offset(w);
        (0..6).all(|k| d[k].abs() <= self.half_extents[k] + slack)
    }
}

/// PCA bounding box over the images of the thrust-box corners.
pub fn compute_wrench_box(config: &AirframeConfig) -> Result<WrenchBox, AirframeError> {
    let corners = admissible_wrench_corners(config);
    let n = corners.len() as f64;
    let mean = corners.iter().fold(Vector6::zeros(), |acc, c| acc + c) / n;
    let cov = corners.iter().fold(Matrix6::zeros(), |acc, c| {
        let d = c - mean;
        acc + d * d.transpose()
    }) / n;

    let basis = principal_axes(cov);

    let mut lo = Vector6::repeat(f64::INFINITY);
    let mut hi = Vector6::repeat(f64::NEG_INFINITY);
    for c in &corners {
        let p = basis.transpose() * c;
        lo = lo.inf(&p);
        hi = hi.sup(&p);
    }
    let center_p = (lo + hi) / 2.0;
    let mut half_extents = (hi - lo) / 2.0;
    let largest = half_extents.max();
    if !(largest > 0.0) {
        return Err(AirframeError::DegenerateSet);
    }
    let floor = BOX_EXTENT_FLOOR * largest;
    let mut floored = [false; 6];
    for k in 0..6 {
        if half_extents[k] < floor {
            half_extents[k] = floor;
            floored[k] = true;
        }
    }
    Ok(WrenchBox { basis, center: basis * center_p, half_extents, floored })
}

/// Eigenvectors of a symmetric 6×6 matrix as columns, ordered by descending
/// eigenvalue (ties broken lexicographically), each flipped so that its
/// largest-magnitude entry is positive.
fn principal_axes(cov: Matrix6<f64>) -> Matrix6<f64> {
    let eig = SymmetricEigen::new(cov);
    let mut axes: Vec<(f64, Vector6<f64>)> = (0..6)
        .map(|k| {
            let mut v: Vector6<f64> = eig.eigenvectors.column(k).into_owned();
            let pivot = v.iamax();
            if v[pivot] < 0.0 {
                v = -v;
            }
            (eig.eigenvalues[k], v)
        })
        .collect();
    axes.sort_by(|(la, va), (lb, vb)| {
        lb.partial_cmp(la)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| va.as_slice().partial_cmp(vb.as_slice()).unwrap_or(std::cmp::Ordering::Equal))
    });
    let mut basis = Matrix6::zeros();
    for (k, (_, v)) in axes.iter().enumerate() {
        basis.set_column(k, v);
    }
    basis
}
