use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::embedding::{build_library, first_position, TrainingIndex};
use crate::error::{Error, Result};
use crate::kernel::{kernel_weights, neighbour_cmp, weights_into, WeightVector};
use crate::metric::{combined_distance, euclidean_distance, prepared_distance, PreparedShape, ProcrustesConfig};

use super::{Likelihood, ModelState};

/// Distance used to compare embedding matrices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Metric {
    Euclidean,
    Procrustes(ProcrustesConfig),
}

impl Default for Metric {
    fn default() -> Self {
        Metric::Procrustes(ProcrustesConfig::default())
    }
}

impl Metric {
    fn between(&self, target: &PreparedShape, comparison: &PreparedShape) -> f64 {
        let d = match self {
            Metric::Euclidean => euclidean_distance(target.matrix(), comparison.matrix()),
            Metric::Procrustes(cfg) => prepared_distance(target, comparison, *cfg),
        };
        // Degenerate comparisons are maximally distant.
        d.unwrap_or(f64::INFINITY)
    }
}

/// Lazily filled distances between embedding matrices of one coefficient
/// series, for every `q` in a range. Safe to share between chains.
#[derive(Debug)]
pub struct DistanceTable {
    coeffs: DMatrix<f64>,
    h: usize,
    q_min: usize,
    q_max: usize,
    floor: usize,
    metric: Metric,
    shapes: Vec<OnceLock<Vec<PreparedShape>>>,
    rows: Vec<Vec<OnceLock<Box<[f64]>>>>,
}

impl DistanceTable {
    pub fn new(coeffs: DMatrix<f64>, h: usize, q_min: usize, q_max: usize, metric: Metric) -> Result<Self> {
        if q_min < 2 || q_max < q_min {
            return Err(Error::invalid("q", format!("invalid range [{q_min}, {q_max}]")));
        }
        let floor = first_position(h, q_max);
        let n = coeffs.ncols();
        if n <= floor {
            return Err(Error::Data(format!(
                "series of length {n} too short for lag {h} and q_max = {q_max}"
            )));
        }
        let n_q = q_max - q_min + 1;
        Ok(DistanceTable {
            h,
            q_min,
            q_max,
            floor,
            metric,
            shapes: (0..n_q).map(|_| OnceLock::new()).collect(),
            rows: (0..n_q).map(|_| (0..n).map(|_| OnceLock::new()).collect()).collect(),
            coeffs,
        })
    }

    pub fn coeffs(&self) -> &DMatrix<f64> {
        &self.coeffs
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn q_range(&self) -> (usize, usize) {
        (self.q_min, self.q_max)
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn n_time(&self) -> usize {
        self.coeffs.ncols()
    }

    fn q_slot(&self, q: usize) -> Result<usize> {
        if q < self.q_min || q > self.q_max {
            return Err(Error::invalid(
                "q",
                format!("{q} outside [{}, {}]", self.q_min, self.q_max),
            ));
        }
        Ok(q - self.q_min)
    }

    fn shapes(&self, q: usize) -> Result<&[PreparedShape]> {
        let slot = self.q_slot(q)?;
        Ok(self.shapes[slot].get_or_init(|| {
            let lib = build_library(&self.coeffs, self.h, q).expect("length checked at construction");
            (self.floor..self.n_time())
                .map(|t| PreparedShape::new(lib.get(t).expect("position in range")))
                .collect()
        }))
    }

    /// Distances from the embedding at `target` to every position from
    /// `h(q_max−1)` on; entry `k` belongs to position `h(q_max−1) + k`.
    pub fn row(&self, q: usize, target: usize) -> Result<&[f64]> {
        let slot = self.q_slot(q)?;
        if target < self.floor || target >= self.n_time() {
            return Err(Error::Data(format!(
                "no embedding at position {target}; valid range is [{}, {}]",
                self.floor,
                self.n_time() - 1
            )));
        }
        let shapes = self.shapes(q)?;
        let row = self.rows[slot][target].get_or_init(|| {
            let x = &shapes[target - self.floor];
            shapes.iter().map(|y| self.metric.between(x, y)).collect()
        });
        Ok(row)
    }

    /// Distance from the embedding at `target` to the one at `candidate`.
    pub fn distance(&self, q: usize, target: usize, candidate: usize) -> Result<f64> {
        let row = self.row(q, target)?;
        candidate
            .checked_sub(self.floor)
            .and_then(|k| row.get(k).copied())
            .ok_or_else(|| Error::Data(format!("candidate position {candidate} has no embedding")))
    }

    fn gather(&self, q: usize, target: usize, candidates: &[usize], out: &mut Vec<f64>) -> Result<()> {
        let row = self.row(q, target)?;
        out.clear();
        for &c in candidates {
            let d = c
                .checked_sub(self.floor)
                .and_then(|k| row.get(k).copied())
                .ok_or_else(|| Error::Data(format!("candidate position {c} has no embedding")))?;
            out.push(d);
        }
        Ok(())
    }
}

/// Candidates of one training period sorted by distance.
type Neighbours = Vec<(usize, f64)>;

/// The analog model for one region and lead time: forcing distances,
/// response coefficients and the training index.
#[derive(Debug)]
pub struct AnalogModel {
    forcing: Arc<DistanceTable>,
    response_table: Option<Arc<DistanceTable>>,
    responses: DMatrix<f64>,
    index: TrainingIndex,
    m_max: usize,
    neighbours: Vec<OnceLock<Vec<Neighbours>>>,
}

impl AnalogModel {
    /// `responses` is p_α × T on the same time axis as the forcing table.
    /// A `response_table` enables the two-field distance.
    pub fn new(
        forcing: Arc<DistanceTable>,
        responses: DMatrix<f64>,
        index: TrainingIndex,
        m_max: usize,
        response_table: Option<Arc<DistanceTable>>,
    ) -> Result<Self> {
        let spec = index.spec();
        if spec.h != forcing.h || spec.q_max != forcing.q_max {
            return Err(Error::invalid(
                "q_max",
                "training index and distance table disagree on lag or q_max",
            ));
        }
        if responses.ncols() != forcing.n_time() {
            return Err(Error::Shape(format!(
                "response series has {} times, forcing {}",
                responses.ncols(),
                forcing.n_time()
            )));
        }
        if spec.last_response >= responses.ncols() {
            return Err(Error::invalid("T_tr", "last training response beyond the series"));
        }
        if let Some(rt) = &response_table {
            if rt.h != forcing.h || rt.q_range() != forcing.q_range() || rt.n_time() != forcing.n_time() {
                return Err(Error::invalid("response_table", "must match the forcing table layout"));
            }
        }
        if m_max == 0 {
            return Err(Error::invalid("m_max", "must be at least 1"));
        }
        let n_q = forcing.q_max - forcing.q_min + 1;
        Ok(AnalogModel {
            forcing,
            response_table,
            responses,
            index,
            m_max,
            neighbours: (0..n_q).map(|_| OnceLock::new()).collect(),
        })
    }

    pub fn index(&self) -> &TrainingIndex {
        &self.index
    }

    pub fn responses(&self) -> &DMatrix<f64> {
        &self.responses
    }

    pub fn forcing(&self) -> &Arc<DistanceTable> {
        &self.forcing
    }

    pub fn has_response_distance(&self) -> bool {
        self.response_table.is_some()
    }

    pub fn p(&self) -> usize {
        self.responses.nrows()
    }

    fn distances(
        &self,
        q: usize,
        gamma: Option<f64>,
        target: usize,
        candidates: &[usize],
        out: &mut Vec<f64>,
    ) -> Result<()> {
        self.forcing.gather(q, target, candidates, out)?;
        match (gamma, &self.response_table) {
            (None, _) => Ok(()),
            (Some(g), Some(rt)) => {
                let row = rt.row(q, target)?;
                for (d, &c) in out.iter_mut().zip(candidates) {
                    *d = combined_distance(*d, row[c - rt.floor], g);
                }
                Ok(())
            }
            (Some(_), None) => Err(Error::invalid("gamma", "two-field distance needs a response table")),
        }
    }

    /// Kernel weights of `candidates` as analogs of the embedding at `target`.
    pub fn weights(&self, state: &ModelState, target: usize, candidates: &[usize]) -> Result<WeightVector> {
        let mut d = Vec::with_capacity(candidates.len());
        self.distances(state.q, state.gamma, target, candidates, &mut d)?;
        kernel_weights(candidates, &d, state.theta1, state.m)
    }

    /// Weighted combination `Σ w_ℓ α_{ℓ+τ}` of the candidates' responses.
    pub fn analog_mean(&self, state: &ModelState, target: usize, candidates: &[usize]) -> Result<DVector<f64>> {
        let w = self.weights(state, target, candidates)?;
        let lead = self.index.lead();
        let mut mean = DVector::zeros(self.p());
        for (&c, &wc) in w.support.iter().zip(&w.weights) {
            let col = c + lead;
            if col >= self.responses.ncols() {
                return Err(Error::Data(format!("response at position {col} unavailable")));
            }
            mean.axpy(wc, &self.responses.column(col), 1.0);
        }
        Ok(mean)
    }

    /// Nearest `m_max` candidates of every training period at `q`.
    fn sorted_neighbours(&self, q: usize) -> Result<&[Neighbours]> {
        let slot = self.forcing.q_slot(q)?;
        if let Some(v) = self.neighbours[slot].get() {
            return Ok(v);
        }
        let mut all = Vec::with_capacity(self.index.n_periods());
        let mut d = Vec::new();
        for (i, &t) in self.index.periods().iter().enumerate() {
            let cands = self.index.candidates(i);
            self.forcing.gather(q, t, cands, &mut d)?;
            all.push(nearest(cands, &d, self.m_max));
        }
        Ok(self.neighbours[slot].get_or_init(|| all))
    }

    fn residual_ss(&self, t: usize, nb: &[(usize, f64)], theta1: f64, buf: &mut Vec<f64>, d2: &mut Vec<f64>) -> f64 {
        let lead = self.index.lead();
        d2.clear();
        d2.extend(nb.iter().map(|x| x.1));
        weights_into(d2, theta1, buf);
        let target = self.responses.column(t + lead);
        let mut ss = 0.0;
        for i in 0..self.p() {
            let mut mean = 0.0;
            for (&(c, _), &w) in nb.iter().zip(buf.iter()) {
                mean += w * self.responses[(i, c + lead)];
            }
            let r = target[i] - mean;
            ss += r * r;
        }
        ss
    }
}

fn nearest(cands: &[usize], d: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut pool: Vec<(usize, f64)> = cands.iter().zip(d).map(|(&c, &x)| (c, x * x)).collect();
    let k = k.min(pool.len());
    if k < pool.len() {
        pool.select_nth_unstable_by(k - 1, |a, b| neighbour_cmp(*a, *b));
        pool.truncate(k);
    }
    pool.sort_unstable_by(|a, b| neighbour_cmp(*a, *b));
    pool
}

impl Likelihood for AnalogModel {
    fn n_obs(&self) -> usize {
        self.index.n_periods() * self.p()
    }

    fn ssr(&self, state: &ModelState) -> Result<f64> {
        if state.m > self.m_max {
            return Err(Error::invalid(
                "m",
                format!("{} exceeds m_max = {}", state.m, self.m_max),
            ));
        }
        let mut buf = Vec::new();
        let mut d2 = Vec::new();
        let mut total = 0.0;
        match state.gamma {
            None => {
                let sorted = self.sorted_neighbours(state.q)?;
                for (nb, &t) in sorted.iter().zip(self.index.periods()) {
                    let k = state.m.min(nb.len());
                    total += self.residual_ss(t, &nb[..k], state.theta1, &mut buf, &mut d2);
                }
            }
            Some(_) => {
                let mut d = Vec::new();
                for (i, &t) in self.index.periods().iter().enumerate() {
                    let cands = self.index.candidates(i);
                    self.distances(state.q, state.gamma, t, cands, &mut d)?;
                    let nb = nearest(cands, &d, state.m);
                    total += self.residual_ss(t, &nb, state.theta1, &mut buf, &mut d2);
                }
            }
        }
        if !total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite residual sum of squares at θ₁ = {}, m = {}, q = {}",
                state.theta1, state.m, state.q
            )));
        }
        Ok(total)
    }
}
