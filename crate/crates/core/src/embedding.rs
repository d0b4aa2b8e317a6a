//! Lagged embedding matrices and the training/analog index sets.
//!
//! Time positions are 0-based column indices into a coefficient series.
//! The embedding at position `t` with lag `h` and `q` columns is
//! `B_t = [β_t, β_{t−h}, …, β_{t−h(q−1)}]`, so entries exist for
//! `t ∈ [h(q−1), T−1]`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::CoefficientSeries;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingLibrary {
    h: usize,
    q: usize,
    first: usize,
    entries: Vec<DMatrix<f64>>,
}

/// Build every embedding matrix of `coeffs` (p × T).
pub fn build_library(coeffs: &DMatrix<f64>, h: usize, q: usize) -> Result<EmbeddingLibrary> {
    if q < 2 {
        return Err(Error::invalid("q", format!("must be at least 2, got {q}")));
    }
    let first = h * (q - 1);
    let n = coeffs.ncols();
    if n <= first {
        return Err(Error::Data(format!(
            "series of length {n} too short for lag {h} and q = {q}"
        )));
    }
    let entries = (first..n).map(|t| embed_at(coeffs, t, h, q)).collect();
    Ok(EmbeddingLibrary { h, q, first, entries })
}

/// Library built from a [`CoefficientSeries`].
pub fn build_library_from(series: &CoefficientSeries, h: usize, q: usize) -> Result<EmbeddingLibrary> {
    build_library(series.coeffs(), h, q)
}

fn embed_at(coeffs: &DMatrix<f64>, t: usize, h: usize, q: usize) -> DMatrix<f64> {
    DMatrix::from_fn(coeffs.nrows(), q, |i, j| coeffs[(i, t - h * j)])
}

impl EmbeddingLibrary {
    pub fn h(&self) -> usize {
        self.h
    }

    pub fn q(&self) -> usize {
        self.q
    }

    /// Inclusive range of positions with an entry.
    pub fn valid_range(&self) -> (usize, usize) {
        (self.first, self.first + self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, t: usize) -> Option<&DMatrix<f64>> {
        t.checked_sub(self.first).and_then(|i| self.entries.get(i))
    }

    pub fn entry(&self, t: usize) -> Result<&DMatrix<f64>> {
        self.get(t).ok_or_else(|| {
            let (a, b) = self.valid_range();
            Error::Data(format!("no embedding at position {t}; valid range is [{a}, {b}]"))
        })
    }
}

/// Which library positions may serve as analogs of a training period.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidateRule {
    /// Every usable position before or after the training period.
    #[default]
    TwoSided,
    /// Only positions whose future response precedes the training period.
    PastOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexSpec {
    pub h: usize,
    pub q_max: usize,
    /// First training position t_st.
    pub start: usize,
    /// Last position whose response is part of training, T_tr.
    pub last_response: usize,
    pub lead: usize,
    #[serde(default)]
    pub exclusion_radius: usize,
    #[serde(default)]
    pub rule: CandidateRule,
}

/// Training periods and their analog candidate sets.
///
/// A training period `t` pairs the embedding at `t` with the response at
/// `t + τ ≤ T_tr`; its candidates `ℓ` satisfy `h(q_max−1) ≤ ℓ`,
/// `ℓ + τ ≤ T_tr` and `|ℓ − t| > exclusion_radius`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingIndex {
    spec: IndexSpec,
    periods: Vec<usize>,
    candidates: Vec<Vec<usize>>,
}

pub fn build_training_index(spec: IndexSpec) -> Result<TrainingIndex> {
    if spec.lead == 0 {
        return Err(Error::invalid("lead", "lead time must be at least 1"));
    }
    if spec.q_max < 2 {
        return Err(Error::invalid(
            "q_max",
            format!("must be at least 2, got {}", spec.q_max),
        ));
    }
    let floor = first_position(spec.h, spec.q_max);
    if spec.start < floor {
        return Err(Error::invalid(
            "t_st",
            format!("first training position {} precedes h(q_max−1) = {floor}", spec.start),
        ));
    }
    let last_period = spec.last_response.checked_sub(spec.lead).filter(|&l| l >= spec.start);
    let Some(last_period) = last_period else {
        return Err(Error::invalid(
            "T_tr",
            format!(
                "last training response {} leaves no period from {} at lead {}",
                spec.last_response, spec.start, spec.lead
            ),
        ));
    };
    let periods: Vec<usize> = (spec.start..=last_period).collect();
    let candidates = periods
        .iter()
        .map(|&t| {
            let upper = match spec.rule {
                CandidateRule::TwoSided => last_period,
                CandidateRule::PastOnly => t.saturating_sub(spec.lead),
            };
            (floor..=upper)
                .filter(|&l| l.abs_diff(t) > spec.exclusion_radius)
                .filter(|&l| spec.rule == CandidateRule::TwoSided || l + spec.lead <= t)
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>();
    if let Some(i) = candidates.iter().position(Vec::is_empty) {
        return Err(Error::invalid(
            "t_st",
            format!("training period {} has no analog candidates", periods[i]),
        ));
    }
    Ok(TrainingIndex {
        spec,
        periods,
        candidates,
    })
}

/// First library position usable for every `q ≤ q_max`.
pub fn first_position(h: usize, q_max: usize) -> usize {
    h * (q_max.max(1) - 1)
}

impl TrainingIndex {
    pub fn spec(&self) -> &IndexSpec {
        &self.spec
    }

    pub fn lead(&self) -> usize {
        self.spec.lead
    }

    pub fn periods(&self) -> &[usize] {
        &self.periods
    }

    pub fn candidates(&self, i: usize) -> &[usize] {
        &self.candidates[i]
    }

    pub fn n_periods(&self) -> usize {
        self.periods.len()
    }

    /// Candidates for an out-of-sample forecast from position `origin`:
    /// every position with a known training response at the lead.
    pub fn forecast_candidates(&self, origin: usize) -> Vec<usize> {
        let floor = first_position(self.spec.h, self.spec.q_max);
        let Some(upper) = self.spec.last_response.checked_sub(self.spec.lead) else {
            return Vec::new();
        };
        (floor..=upper)
            .filter(|&l| l.abs_diff(origin) > self.spec.exclusion_radius)
            .collect()
    }
}
