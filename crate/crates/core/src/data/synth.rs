//! Synthetic coupled forcing/response system.
//!
//! The latent state is two lightly damped rotations (periods 16 and 37)
//! driven by small Gaussian innovations, rescaled to unit length at every
//! step so that only its direction carries information. The forcing field
//! is a smooth spatial read-out of the latent state; the response field at
//! time `t` reads the latent state at `t - coupling_lag` through a weak
//! linear map plus `nonlinearity` times a quadratic map (all pairwise
//! products).

use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{to_anomalies, Coord, FieldSeries};
use crate::error::{Error, Result};

const LATENT_DIM: usize = 4;
const PERIODS: [f64; 2] = [16.0, 37.0];
const DAMPING: f64 = 0.995;
const SPIN_UP: usize = 200;
/// Weight of the linear read-out relative to the unit-scaled quadratic one.
const LINEAR_GAIN: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_loc_forcing: usize,
    pub n_loc_response: usize,
    pub n_time: usize,
    pub coupling_lag: usize,
    pub nonlinearity: f64,
    pub noise_sd: f64,
    pub seed: u64,
    /// Longest embedding window (h·(q_max−1)+1) the data must support.
    pub embedding_extent: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_loc_forcing: 120,
            n_loc_response: 90,
            n_time: 240,
            coupling_lag: 6,
            nonlinearity: 1.0,
            noise_sd: 0.1,
            seed: 1,
            embedding_extent: 24,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_loc_forcing == 0 || self.n_loc_response == 0 {
            return Err(Error::invalid("n_loc", "location counts must be positive"));
        }
        if self.coupling_lag == 0 {
            return Err(Error::invalid("coupling_lag", "must be positive"));
        }
        if self.n_time <= self.coupling_lag + 3 * self.embedding_extent {
            return Err(Error::invalid(
                "n_time",
                format!(
                    "need more than coupling_lag + 3·embedding_extent = {} steps",
                    self.coupling_lag + 3 * self.embedding_extent
                ),
            ));
        }
        if !(self.nonlinearity >= 0.0 && self.nonlinearity.is_finite()) {
            return Err(Error::invalid("nonlinearity", "must be a nonnegative number"));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::invalid("noise_sd", "must be a nonnegative number"));
        }
        Ok(())
    }
}

/// Latent trajectory of length `n`, one column per step.
pub(crate) fn latent_path(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let mut dynamics = DMatrix::zeros(LATENT_DIM, LATENT_DIM);
    for (k, period) in PERIODS.iter().enumerate() {
        let w = TAU / period;
        let (s, c) = w.sin_cos();
        let o = 2 * k;
        dynamics[(o, o)] = DAMPING * c;
        dynamics[(o, o + 1)] = -DAMPING * s;
        dynamics[(o + 1, o)] = DAMPING * s;
        dynamics[(o + 1, o + 1)] = DAMPING * c;
    }
    let innovation_sd = (1.0 - DAMPING * DAMPING).sqrt();
    let mut state = DVector::from_fn(LATENT_DIM, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut path = DMatrix::zeros(LATENT_DIM, n);
    for step in 0..SPIN_UP + n {
        let noise = DVector::from_fn(LATENT_DIM, |_, _| rng.sample::<f64, _>(StandardNormal));
        state = &dynamics * state + noise * innovation_sd;
        if step >= SPIN_UP {
            path.set_column(step - SPIN_UP, &state);
        }
    }
    for mut col in path.column_iter_mut() {
        let norm = col.norm();
        col /= norm;
    }
    path
}

/// Locations on a near-square lon/lat grid, sorted by (lat, lon).
fn grid_coords(n: usize, lon0: f64, lat0: f64, spacing: f64) -> Vec<Coord> {
    let n_lon = (n as f64).sqrt().ceil() as usize;
    (0..n)
        .map(|k| Coord::new(lon0 + spacing * (k % n_lon) as f64, lat0 + spacing * (k / n_lon) as f64))
        .collect()
}

/// Smooth spatial patterns: plane waves with random wave vectors and phases.
fn smooth_patterns(rng: &mut ChaCha8Rng, coords: &[Coord], count: usize) -> DMatrix<f64> {
    let mut patterns = DMatrix::zeros(coords.len(), count);
    for k in 0..count {
        let kx: f64 = rng.random_range(-1.0..1.0) * PI / 20.0;
        let ky: f64 = rng.random_range(-1.0..1.0) * PI / 20.0;
        let phase: f64 = rng.random_range(0.0..TAU);
        let amp: f64 = 0.5 + rng.random::<f64>();
        for (i, c) in coords.iter().enumerate() {
            patterns[(i, k)] = amp * (kx * c.lon + ky * c.lat + phase).cos();
        }
    }
    patterns
}

/// Pairwise products z_i·z_j (i ≤ j), one row per product.
fn quadratic_features(latent: &DMatrix<f64>) -> DMatrix<f64> {
    let pairs: Vec<(usize, usize)> = (0..LATENT_DIM)
        .flat_map(|i| (i..LATENT_DIM).map(move |j| (i, j)))
        .collect();
    DMatrix::from_fn(pairs.len(), latent.ncols(), |r, t| {
        let (i, j) = pairs[r];
        latent[(i, t)] * latent[(j, t)]
    })
}

/// Generates `(forcing, response)` anomaly fields on the time axis
/// `0..n_time`. Identical specs give bit-identical output.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<(FieldSeries, FieldSeries)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lag = spec.coupling_lag;
    let n = spec.n_time;
    // latent[:, s] is the state at time s - lag.
    let latent = latent_path(&mut rng, n + lag);

    let forcing_coords = grid_coords(spec.n_loc_forcing, 150.0, -20.0, 2.0);
    let response_coords = grid_coords(spec.n_loc_response, -100.0, 35.0, 0.5);
    let forcing_patterns = smooth_patterns(&mut rng, &forcing_coords, LATENT_DIM);
    let linear_patterns = smooth_patterns(&mut rng, &response_coords, LATENT_DIM) * LINEAR_GAIN;
    let quad = quadratic_features(&latent);
    let quad_scale = (LATENT_DIM as f64 / quad.nrows() as f64).sqrt();
    let quad_patterns = smooth_patterns(&mut rng, &response_coords, quad.nrows()) * quad_scale;

    let forcing_noise = 0.5 * spec.noise_sd;
    let mut forcing = &forcing_patterns * latent.columns(lag, n);
    forcing
        .iter_mut()
        .for_each(|v| *v += forcing_noise * rng.sample::<f64, _>(StandardNormal));

    let mut response =
        &linear_patterns * latent.columns(0, n) + (&quad_patterns * quad.columns(0, n)) * spec.nonlinearity;
    response
        .iter_mut()
        .for_each(|v| *v += spec.noise_sd * rng.sample::<f64, _>(StandardNormal));

    let times: Vec<i64> = (0..n as i64).collect();
    let last = n as i64 - 1;
    let forcing = FieldSeries::new(forcing, forcing_coords, times.clone())?;
    let response = FieldSeries::new(response, response_coords, times)?;
    Ok((
        to_anomalies(&forcing, 0, last, 1)?,
        to_anomalies(&response, 0, last, 1)?,
    ))
}

/// The latent state driving a synthetic run, aligned so that column `t`
/// is the state the response at time `t` reads (i.e. forcing time
/// `t - coupling_lag`). Exposed for oracle tests.
pub fn synthetic_latent(spec: &SynthSpec) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(latent_path(&mut rng, spec.n_time + spec.coupling_lag)
        .columns(0, spec.n_time)
        .into_owned())
}

/// Splits locations into `lat_bands × lon_bands` blocks by coordinate rank.
pub fn block_regions(coords: &[Coord], lat_bands: usize, lon_bands: usize) -> Result<super::RegionPartition> {
    if lat_bands == 0 || lon_bands == 0 {
        return Err(Error::invalid("bands", "band counts must be positive"));
    }
    let band = |values: Vec<f64>, bands: usize| -> Vec<usize> {
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        values
            .iter()
            .map(|v| {
                let rank = sorted.partition_point(|s| s < v);
                rank * bands / sorted.len()
            })
            .collect()
    };
    let lat_band = band(coords.iter().map(|c| c.lat).collect(), lat_bands);
    let lon_band = band(coords.iter().map(|c| c.lon).collect(), lon_bands);
    let raw: Vec<usize> = lat_band.iter().zip(&lon_band).map(|(a, b)| a * lon_bands + b).collect();
    // Renumber so ids are contiguous from 1 even if a block is empty.
    let mut used: Vec<usize> = raw.clone();
    used.sort_unstable();
    used.dedup();
    let ids = raw
        .iter()
        .map(|r| used.binary_search(r).map(|k| k as u32 + 1).unwrap_or(1))
        .collect();
    super::RegionPartition::new(ids)
}
