use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::statistics::{Data, OrderStatistics};

use crate::basis::BasisSet;
use crate::error::{Error, Result};

use super::{AnalogModel, Chain};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictConfig {
    /// Use every `thin`-th retained state.
    pub thin: usize,
    pub draws_per_state: usize,
    pub seed: u64,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            thin: 5,
            draws_per_state: 1,
            seed: 1,
        }
    }
}

/// Posterior predictive draws of the response at `origin + lead`.
#[derive(Debug, Clone)]
pub struct ForecastDistribution {
    pub origin: usize,
    pub lead: usize,
    /// p_α × n_draws
    pub coeff_draws: DMatrix<f64>,
    /// n_loc × n_draws
    pub field_draws: DMatrix<f64>,
    pub coeff_mean: DVector<f64>,
    pub field_mean: DVector<f64>,
    pub field_lower: DVector<f64>,
    pub field_upper: DVector<f64>,
    pub coeff_lower: DVector<f64>,
    pub coeff_upper: DVector<f64>,
}

impl ForecastDistribution {
    pub fn n_draws(&self) -> usize {
        self.coeff_draws.ncols()
    }
}

fn row_quantiles(m: &DMatrix<f64>, p: f64) -> DVector<f64> {
    DVector::from_iterator(
        m.nrows(),
        m.row_iter()
            .map(|r| Data::new(r.iter().copied().collect::<Vec<_>>()).quantile(p)),
    )
}

/// Sample the posterior predictive distribution for a forecast from the
/// embedding at `origin`, using every library position whose response at
/// the lead is inside the training window as a candidate.
pub fn posterior_predict(
    chain: &Chain,
    model: &AnalogModel,
    origin: usize,
    basis: &BasisSet,
    config: &PredictConfig,
) -> Result<ForecastDistribution> {
    if basis.p() != model.p() {
        return Err(Error::Shape(format!(
            "basis has {} columns, model {} coefficients",
            basis.p(),
            model.p()
        )));
    }
    if config.thin == 0 || config.draws_per_state == 0 {
        return Err(Error::invalid("thin", "thinning and draws per state must be positive"));
    }
    let candidates = model.index().forecast_candidates(origin);
    if candidates.is_empty() {
        return Err(Error::Data(format!("no analog candidates for origin {origin}")));
    }
    let selected: Vec<_> = chain.states.iter().step_by(config.thin).collect();
    if selected.is_empty() {
        return Err(Error::Data("chain has no retained states".into()));
    }
    let p = model.p();
    let n = selected.len() * config.draws_per_state;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut coeff_draws = DMatrix::zeros(p, n);
    let mut col = 0;
    for state in selected {
        let mean = model.analog_mean(state, origin, &candidates)?;
        let sd = state.sigma2.sqrt();
        for _ in 0..config.draws_per_state {
            for i in 0..p {
                let z: f64 = StandardNormal.sample(&mut rng);
                coeff_draws[(i, col)] = mean[i] + sd * z;
            }
            col += 1;
        }
    }
    let phi = basis.matrix();
    let field_draws = phi * &coeff_draws;
    let coeff_mean = coeff_draws.column_mean();
    let field_mean = phi * &coeff_mean;
    Ok(ForecastDistribution {
        origin,
        lead: model.index().lead(),
        field_lower: row_quantiles(&field_draws, 0.025),
        field_upper: row_quantiles(&field_draws, 0.975),
        coeff_lower: row_quantiles(&coeff_draws, 0.025),
        coeff_upper: row_quantiles(&coeff_draws, 0.975),
        coeff_draws,
        field_draws,
        coeff_mean,
        field_mean,
    })
}
