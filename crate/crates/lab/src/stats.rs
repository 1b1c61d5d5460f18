//! Rank correlation with a permutation test, and small descriptive helpers.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::LabError;

pub const MIN_POINTS: usize = 5;
pub const DEFAULT_PERMUTATIONS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpearmanResult {
    pub rho: f64,
    /// Two-sided permutation p-value.
    pub p_value: f64,
    pub n: usize,
    /// One of the inputs was constant; `rho` is reported as 0 and `p_value` as 1.
    pub degenerate: bool,
}

/// 1-based ranks, ties receive the average of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's ρ (Pearson correlation of average ranks) with a seeded permutation test.
pub fn spearman(x: &[f64], y: &[f64], permutations: usize, seed: u64) -> Result<SpearmanResult, LabError> {
    if x.len() != y.len() {
        return Err(LabError::Validation(format!("paired samples differ in length: {} vs {}", x.len(), y.len())));
    }
    let n = x.len();
    if n < MIN_POINTS {
        return Err(LabError::InsufficientData(n));
    }
    let rx = average_ranks(x);
    let mut ry = average_ranks(y);
    let Some(rho) = pearson(&rx, &ry) else {
        return Ok(SpearmanResult { rho: 0.0, p_value: 1.0, n, degenerate: true });
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let threshold = rho.abs() - 1e-12;
    let mut extreme = 0usize;
    for _ in 0..permutations {
        ry.shuffle(&mut rng);
        if pearson(&rx, &ry).unwrap_or(0.0).abs() >= threshold {
            extreme += 1;
        }
    }
    let p_value = (extreme + 1) as f64 / (permutations + 1) as f64;
    Ok(SpearmanResult { rho, p_value, n, degenerate: false })
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 0 { 0.5 * (v[m - 1] + v[m]) } else { v[m] })
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation; zero for fewer than two values.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}
