//! Library-based initialization: similarity measures between airframes, the policy
//! library, donor selection and warm-started training.

mod hungarian;
mod library;

pub use hungarian::hungarian;
pub use library::{EntryMeta, Library, LibraryEntry};

use std::io::Write;

use nalgebra::Vector6;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::airframe::{build_allocation_matrix, point_mass_inertia, AirframeConfig, AirframeError};
use crate::alloc::AllocError;
use crate::neural::NeuralError;
use crate::rl::{evaluate_policy, train, Environment, InteractionMeter, PolicyPair, PpoConfig, RlError, TrainingCurve};

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("configurations are not comparable: {0} vs {1} motors")]
    IncomparableConfigs(usize, usize),
    #[error("library is empty")]
    EmptyLibrary,
    #[error("no library entry is comparable under {0:?}")]
    NoComparableEntry(MeasureId),
    #[error("invalid selection parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Airframe(#[from] AirframeError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("corrupt library: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureId {
    /// Distance between augmented configuration vectors.
    Mc,
    /// Wasserstein-type distance between admissible acceleration samples.
    Mwd,
    /// Reward of the donor policy deployed on the new airframe.
    Mr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    LowerBetter,
    HigherBetter,
}

impl MeasureId {
    pub const ALL: [MeasureId; 3] = [MeasureId::Mc, MeasureId::Mwd, MeasureId::Mr];

    pub fn direction(self) -> Direction {
        match self {
            MeasureId::Mc | MeasureId::Mwd => Direction::LowerBetter,
            MeasureId::Mr => Direction::HigherBetter,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MeasureId::Mc => "m_c",
            MeasureId::Mwd => "m_wd",
            MeasureId::Mr => "m_r",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "m_c" | "mc" => Some(MeasureId::Mc),
            "m_wd" | "mwd" => Some(MeasureId::Mwd),
            "m_r" | "mr" => Some(MeasureId::Mr),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub measure: MeasureId,
    pub value: f64,
    pub direction: Direction,
    /// Environment interactions spent computing the score.
    pub cost: u64,
}

impl SimilarityScore {
    fn new(measure: MeasureId, value: f64, cost: u64) -> Self {
        Self { measure, value, direction: measure.direction(), cost }
    }

    /// True if `self` is strictly preferable to `other` under the measure's direction.
    pub fn beats(&self, other: &SimilarityScore) -> bool {
        match self.direction {
            Direction::LowerBetter => self.value < other.value,
            Direction::HigherBetter => self.value > other.value,
        }
    }
}

/// `[t_1, …, t_n, vec(R_1), …, vec(R_n), vec(J)]`, matrices flattened column-major.
pub fn augmented_vector(config: &AirframeConfig) -> Vec<f64> {
    let mut v = Vec::with_capacity(12 * config.motor_count() + 9);
    for r in config.rotors() {
        v.extend(r.position().iter());
    }
    for r in config.rotors() {
        v.extend(r.orientation().iter());
    }
    v.extend(point_mass_inertia(config).iter());
    v
}

pub fn measure_mc(a: &AirframeConfig, b: &AirframeConfig) -> Result<SimilarityScore, TransferError> {
    if a.motor_count() != b.motor_count() {
        return Err(TransferError::IncomparableConfigs(a.motor_count(), b.motor_count()));
    }
    let d = augmented_vector(a).iter().zip(augmented_vector(b)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    Ok(SimilarityScore::new(MeasureId::Mc, d, 0))
}

/// Body-frame accelerations `[F_f u / m; J⁻¹ F_τ u]` for thrusts drawn uniformly from the thrust box.
pub fn sample_admissible_accelerations(config: &AirframeConfig, n: usize, seed: u64) -> Vec<Vector6<f64>> {
    let f = build_allocation_matrix(config);
    let j_inv = point_mass_inertia(config).try_inverse().expect("airframe inertia is positive definite");
    let m = config.mass();
    let (lo, hi) = config.thrust_bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = vec![0.0; config.motor_count()];
    (0..n)
        .map(|_| {
            for x in u.iter_mut() {
                *x = lo + (hi - lo) * rng.random::<f64>();
            }
            let w = f.apply(&u);
            let lin = w.fixed_rows::<3>(0) / m;
            let ang = j_inv * w.fixed_rows::<3>(3);
            Vector6::new(lin.x, lin.y, lin.z, ang.x, ang.y, ang.z)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WassersteinForm {
    /// `(mean matched distance)^½`.
    #[default]
    AsPrinted,
    /// `(mean matched squared distance)^½`, the usual 2-Wasserstein distance.
    Standard,
}

/// Optimal-matching distance between two equally sized point sets.
pub fn wasserstein_distance(x: &[Vector6<f64>], y: &[Vector6<f64>], form: WassersteinForm) -> f64 {
    assert_eq!(x.len(), y.len(), "point sets must have equal size");
    let n = x.len();
    if n == 0 {
        return 0.0;
    }
    let mut cost = Vec::with_capacity(n * n);
    for a in x {
        for b in y {
            let d = (a - b).norm();
            cost.push(match form {
                WassersteinForm::AsPrinted => d,
                WassersteinForm::Standard => d * d,
            });
        }
    }
    let (_, total) = hungarian(&cost, n);
    (total / n as f64).max(0.0).sqrt()
}

/// Both sets are drawn with the same seed so that the measure is symmetric and zero on identical airframes.
pub fn measure_mwd(
    a: &AirframeConfig,
    b: &AirframeConfig,
    n: usize,
    seed: u64,
    form: WassersteinForm,
) -> SimilarityScore {
    let x = sample_admissible_accelerations(a, n, seed);
    let y = sample_admissible_accelerations(b, n, seed);
    SimilarityScore::new(MeasureId::Mwd, wasserstein_distance(&x, &y, form), 0)
}

/// Deploys the donor policy on `env` (the new airframe with its own box and allocation net).
pub fn measure_mr(
    env: &Environment,
    donor: &PolicyPair,
    n_envs: usize,
    steps: usize,
    seed: u64,
    meter: &mut InteractionMeter,
) -> Result<SimilarityScore, TransferError> {
    if n_envs * steps == 0 {
        return Err(TransferError::InvalidParams("m_r needs n_envs·steps ≥ 1".into()));
    }
    let value = evaluate_policy(donor, env, n_envs, steps, seed, meter)?;
    Ok(SimilarityScore::new(MeasureId::Mr, value, (n_envs * steps) as u64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionParams {
    pub measure: MeasureId,
    pub mr_envs: usize,
    pub mr_steps: usize,
    pub mwd_samples: usize,
    pub mwd_form: WassersteinForm,
    /// Seeds the m_r initial-state batch and the m_wd sample sets; shared by all entries.
    pub seed: u64,
}

impl SelectionParams {
    pub fn new(measure: MeasureId, seed: u64) -> Self {
        Self { measure, mr_envs: 64, mr_steps: 300, mwd_samples: 256, mwd_form: WassersteinForm::AsPrinted, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredEntry {
    pub entry_hash: String,
    pub score: SimilarityScore,
}

/// Scores every comparable entry in library (hash) order, charging m_r cost to `meter`.
/// Entries with a different motor count are skipped under m_c.
pub fn score_library(
    env: &Environment,
    library: &Library,
    params: &SelectionParams,
    meter: &mut InteractionMeter,
) -> Result<Vec<ScoredEntry>, TransferError> {
    let mut table = Vec::with_capacity(library.len());
    for entry in library.entries() {
        let score = match params.measure {
            MeasureId::Mc => match measure_mc(&env.config, &entry.airframe) {
                Ok(s) => s,
                Err(TransferError::IncomparableConfigs(..)) => continue,
                Err(e) => return Err(e),
            },
            MeasureId::Mwd => {
                measure_mwd(&env.config, &entry.airframe, params.mwd_samples, params.seed, params.mwd_form)
            }
            MeasureId::Mr => measure_mr(env, &entry.policy, params.mr_envs, params.mr_steps, params.seed, meter)?,
        };
        table.push(ScoredEntry { entry_hash: entry.hash().to_string(), score });
    }
    Ok(table)
}

/// Best-scoring row; ties go to the lexicographically smallest hash.
pub fn best_of(table: &[ScoredEntry]) -> Option<&ScoredEntry> {
    table.iter().reduce(|best, row| {
        let better = row.score.beats(&best.score)
            || (row.score.value == best.score.value && row.entry_hash < best.entry_hash);
        if better {
            row
        } else {
            best
        }
    })
}

#[derive(Debug, Clone)]
pub struct Selection<'a> {
    pub donor: &'a LibraryEntry,
    pub table: Vec<ScoredEntry>,
    pub cost: u64,
}

pub fn select_donor<'a>(
    env: &Environment,
    library: &'a Library,
    params: &SelectionParams,
    meter: &mut InteractionMeter,
) -> Result<Selection<'a>, TransferError> {
    if library.is_empty() {
        return Err(TransferError::EmptyLibrary);
    }
    let before = meter.count();
    let table = score_library(env, library, params, meter)?;
    let best = best_of(&table).ok_or(TransferError::NoComparableEntry(params.measure))?;
    let donor = library.get(&best.entry_hash).expect("scored entries come from the library");
    Ok(Selection { donor, cost: meter.count() - before, table })
}

pub fn write_score_table<W: Write>(table: &[ScoredEntry], out: W) -> Result<(), TransferError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["entry_hash", "measure", "value", "cost"])?;
    for row in table {
        w.write_record([
            row.entry_hash.clone(),
            row.score.measure.name().to_string(),
            row.score.value.to_string(),
            row.score.cost.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpStartProvenance {
    pub donor_hash: String,
    pub measure: MeasureId,
    pub selection_cost: u64,
    pub table: Vec<ScoredEntry>,
    /// Meter reading after training: selection cost plus training interactions.
    pub total_interactions: u64,
}

/// Selects a donor, copies its actor, critic, log-std and both optimizer states, and
/// trains on `env`. The returned curve's interaction counts include the selection cost.
pub fn jump_start(
    env: &Environment,
    library: &Library,
    params: &SelectionParams,
    ppo: &PpoConfig,
    seed: u64,
) -> Result<(PolicyPair, TrainingCurve, JumpStartProvenance), TransferError> {
    let mut meter = InteractionMeter::new();
    let selection = select_donor(env, library, params, &mut meter)?;
    let (policy, curve) = train(env, ppo, Some(selection.donor.policy.clone()), seed, &mut meter)?;
    let provenance = JumpStartProvenance {
        donor_hash: selection.donor.hash().to_string(),
        measure: params.measure,
        selection_cost: selection.cost,
        table: selection.table,
        total_interactions: meter.count(),
    };
    Ok((policy, curve, provenance))
}
