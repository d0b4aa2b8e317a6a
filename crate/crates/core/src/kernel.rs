//! Truncated Gaussian kernel weights over the nearest analogs.

use std::cmp::Ordering;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    /// Chosen candidates, nearest first.
    pub support: Vec<usize>,
    pub weights: Vec<f64>,
    /// Largest squared distance inside the support.
    pub h_max: f64,
    pub theta1: f64,
    /// Set when the pool held fewer than `m` candidates.
    pub truncated: bool,
}

impl WeightVector {
    /// Weight on a candidate, 0 outside the support.
    pub fn weight_of(&self, candidate: usize) -> f64 {
        self.support
            .iter()
            .position(|&c| c == candidate)
            .map_or(0.0, |i| self.weights[i])
    }
}

/// Order by squared distance, then by candidate index.
pub(crate) fn neighbour_cmp(a: (usize, f64), b: (usize, f64)) -> Ordering {
    a.1.total_cmp(&b.1).then(a.0.cmp(&b.0))
}

/// Kernel weights `exp(−d²/(2θ₁))` on the `m` nearest candidates,
/// normalized to sum to one.
///
/// `candidates[i]` is the time index of the candidate at distance
/// `distances[i]`; ties are broken towards the smaller index. Infinite
/// distances mark unusable candidates.
pub fn kernel_weights(candidates: &[usize], distances: &[f64], theta1: f64, m: usize) -> Result<WeightVector> {
    if candidates.is_empty() {
        return Err(Error::Data("empty analog candidate pool".into()));
    }
    if candidates.len() != distances.len() {
        return Err(Error::Shape(format!(
            "{} candidates but {} distances",
            candidates.len(),
            distances.len()
        )));
    }
    if theta1 <= 0.0 || !theta1.is_finite() {
        return Err(Error::invalid("theta1", format!("must be positive, got {theta1}")));
    }
    if m == 0 {
        return Err(Error::invalid("m", "must be at least 1"));
    }
    let mut pool: Vec<(usize, f64)> = candidates
        .iter()
        .zip(distances)
        .map(|(&c, &d)| {
            if d.is_nan() || d < 0.0 {
                Err(Error::Numeric(format!("invalid distance {d} for candidate {c}")))
            } else {
                Ok((c, d * d))
            }
        })
        .collect::<Result<_>>()?;
    let k = m.min(pool.len());
    if k < pool.len() {
        pool.select_nth_unstable_by(k - 1, |a, b| neighbour_cmp(*a, *b));
        pool.truncate(k);
    }
    pool.sort_unstable_by(|a, b| neighbour_cmp(*a, *b));
    let d2: Vec<f64> = pool.iter().map(|p| p.1).collect();
    Ok(WeightVector {
        support: pool.iter().map(|p| p.0).collect(),
        weights: normalized_weights(&d2, theta1),
        h_max: *d2.last().expect("non-empty support"),
        theta1,
        truncated: k < m,
    })
}

/// Normalized weights for squared distances sorted ascending.
pub(crate) fn normalized_weights(sorted_d2: &[f64], theta1: f64) -> Vec<f64> {
    let mut w = Vec::with_capacity(sorted_d2.len());
    weights_into(sorted_d2, theta1, &mut w);
    w
}

pub(crate) fn weights_into(sorted_d2: &[f64], theta1: f64, out: &mut Vec<f64>) {
    out.clear();
    let d_min = sorted_d2[0];
    if d_min.is_infinite() {
        out.resize(sorted_d2.len(), 1.0 / sorted_d2.len() as f64);
        return;
    }
    let scale = 0.5 / theta1;
    out.extend(sorted_d2.iter().map(|&d2| (-(d2 - d_min) * scale).exp()));
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|w| *w /= total);
}
