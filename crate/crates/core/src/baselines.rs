//! Reference forecasters: regression, constructed analogue,
//! autoregression, climatology and persistence.
//!
//! Every forecaster sees the same [`BaselineInput`] and returns field
//! forecasts (locations × targets). Only responses up to the last training
//! position, or up to each forecast origin `target − lead`, are read.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{lstsq, pinv_solve};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BaselineKind {
    /// Multivariate regression of response on forcing coefficients.
    M1,
    /// Constructed analogue.
    M2,
    /// Per-location AR(1).
    M3,
    /// Per-location AR(2).
    M4,
    /// Climatology.
    M5,
    /// Persistence of the last observed response.
    M6,
    /// Persistence of an auxiliary same-period field.
    M7,
    /// Random forest; not provided.
    M8,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 8] = [
        BaselineKind::M1,
        BaselineKind::M2,
        BaselineKind::M3,
        BaselineKind::M4,
        BaselineKind::M5,
        BaselineKind::M6,
        BaselineKind::M7,
        BaselineKind::M8,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::M1 => "M1",
            BaselineKind::M2 => "M2",
            BaselineKind::M3 => "M3",
            BaselineKind::M4 => "M4",
            BaselineKind::M5 => "M5",
            BaselineKind::M6 => "M6",
            BaselineKind::M7 => "M7",
            BaselineKind::M8 => "M8",
        }
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::invalid("baselines", format!("unknown baseline {s:?}")))
    }
}

/// Data shared by all baselines. All matrices share one time axis.
#[derive(Debug, Clone, Copy)]
pub struct BaselineInput<'a> {
    /// Forcing coefficients, p_β × T.
    pub forcing: &'a DMatrix<f64>,
    /// Response coefficients, p_α × T.
    pub response_coeffs: &'a DMatrix<f64>,
    /// Response field, n_loc × T.
    pub response_field: &'a DMatrix<f64>,
    /// Response basis Φ, n_loc × p_α.
    pub basis: &'a DMatrix<f64>,
    /// Optional auxiliary field on the response locations, n_loc × T.
    pub auxiliary: Option<&'a DMatrix<f64>>,
    /// Last position whose response may be used for fitting.
    pub last_train: usize,
    pub lead: usize,
    /// Lag of the autoregressions and of persistence; at least `lead`.
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineForecast {
    /// n_loc × n_targets
    pub values: DMatrix<f64>,
    pub notes: Vec<String>,
}

impl BaselineInput<'_> {
    fn validate(&self, targets: &[usize]) -> Result<()> {
        let t = self.response_field.ncols();
        if self.forcing.ncols() != t || self.response_coeffs.ncols() != t {
            return Err(Error::Shape(
                "forcing, response coefficients and field differ in length".into(),
            ));
        }
        if self.basis.nrows() != self.response_field.nrows() || self.basis.ncols() != self.response_coeffs.nrows() {
            return Err(Error::Shape("response basis does not match the response data".into()));
        }
        if let Some(aux) = self.auxiliary {
            if aux.shape() != self.response_field.shape() {
                return Err(Error::Shape("auxiliary field must match the response field".into()));
            }
        }
        if self.lead == 0 {
            return Err(Error::invalid("lead", "lead time must be at least 1"));
        }
        if self.step < self.lead {
            return Err(Error::invalid(
                "step",
                format!("persistence step {} shorter than lead {}", self.step, self.lead),
            ));
        }
        if self.last_train >= t {
            return Err(Error::invalid("last_train", "beyond the end of the series"));
        }
        for &target in targets {
            if target >= t || target < self.lead {
                return Err(Error::Data(format!("target position {target} cannot be forecast")));
            }
        }
        Ok(())
    }

    fn training_pairs(&self) -> Result<usize> {
        let n = (self.last_train + 1).saturating_sub(self.lead);
        if n == 0 {
            return Err(Error::Data("no lagged training pairs".into()));
        }
        Ok(n)
    }
}

/// Fitted `α_{t+τ} = c + B β_t`; `coefficients` is p_α × (1 + p_β) with the
/// intercept first.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionFit {
    pub coefficients: DMatrix<f64>,
    pub ridge: bool,
}

const RIDGE: f64 = 1e-8;

pub fn fit_regression(input: &BaselineInput<'_>) -> Result<RegressionFit> {
    let n = input.training_pairs()?;
    let p = input.forcing.nrows();
    let x = DMatrix::from_fn(n, p + 1, |t, j| if j == 0 { 1.0 } else { input.forcing[(j - 1, t)] });
    let y = input.response_coeffs.columns(input.lead, n).transpose();
    match lstsq(&x, &y) {
        Ok(b) => Ok(RegressionFit {
            coefficients: b.transpose(),
            ridge: false,
        }),
        Err(Error::Degenerate(_)) => {
            let mut xtx = x.transpose() * &x;
            let scale = xtx.diagonal().mean().max(1.0);
            for i in 0..=p {
                xtx[(i, i)] += RIDGE * scale;
            }
            let b = xtx
                .cholesky()
                .ok_or_else(|| Error::Numeric("ridge regression failed".into()))?
                .solve(&(x.transpose() * y));
            Ok(RegressionFit {
                coefficients: b.transpose(),
                ridge: true,
            })
        }
        Err(e) => Err(e),
    }
}

fn augmented(forcing: &DMatrix<f64>, t: usize) -> DVector<f64> {
    DVector::from_fn(
        forcing.nrows() + 1,
        |j, _| if j == 0 { 1.0 } else { forcing[(j - 1, t)] },
    )
}

/// M1: regression forecasts reconstructed through Φ.
pub fn regression_forecast(input: &BaselineInput<'_>, targets: &[usize]) -> Result<BaselineForecast> {
    input.validate(targets)?;
    let fit = fit_regression(input)?;
    let mut coeffs = DMatrix::zeros(input.basis.ncols(), targets.len());
    for (k, &t) in targets.iter().enumerate() {
        coeffs.set_column(k, &(&fit.coefficients * augmented(input.forcing, t - input.lead)));
    }
    let mut notes = Vec::new();
    if fit.ridge {
        notes.push(format!("M1: singular design, ridge {RIDGE:e} applied"));
    }
    Ok(BaselineForecast {
        values: input.basis * coeffs,
        notes,
    })
}

/// Constructed-analogue weights reproducing `state` from the library
/// columns, both augmented with a constant row; minimum-norm when the
/// system is underdetermined.
pub fn analogue_weights(library: &DMatrix<f64>, state: &DVector<f64>) -> Result<(DVector<f64>, bool)> {
    let n = library.ncols();
    let lib = DMatrix::from_fn(
        library.nrows() + 1,
        n,
        |i, j| if i == 0 { 1.0 } else { library[(i - 1, j)] },
    );
    let x0 = DMatrix::from_fn(state.len() + 1, 1, |i, _| if i == 0 { 1.0 } else { state[i - 1] });
    let (w, deficient) = pinv_solve(&lib, &x0, 1e-12)?;
    Ok((w.column(0).into_owned(), deficient))
}

/// M2: the constructed analogue over all lagged training pairs.
pub fn constructed_analogue_forecast(input: &BaselineInput<'_>, targets: &[usize]) -> Result<BaselineForecast> {
    input.validate(targets)?;
    let n = input.training_pairs()?;
    let library = input.forcing.columns(0, n).into_owned();
    let futures = input.response_coeffs.columns(input.lead, n);
    let mut coeffs = DMatrix::zeros(input.basis.ncols(), targets.len());
    let mut notes = Vec::new();
    for (k, &t) in targets.iter().enumerate() {
        let state = input.forcing.column(t - input.lead).into_owned();
        let (w, deficient) = analogue_weights(&library, &state)?;
        if deficient && notes.is_empty() {
            notes.push("M2: rank-deficient library, minimum-norm weights".to_string());
        }
        coeffs.set_column(k, &(futures * w));
    }
    Ok(BaselineForecast {
        values: input.basis * coeffs,
        notes,
    })
}

/// Per-location autoregression of lag `step`, fitted by least squares
/// with an intercept on training positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ArFit {
    /// Intercept followed by `order` lag coefficients, per location.
    pub coefficients: Vec<Vec<f64>>,
    /// Locations that fell back to their training mean.
    pub fallback: Vec<usize>,
}

pub fn fit_autoregression(field: &DMatrix<f64>, order: usize, step: usize, last_train: usize) -> Result<ArFit> {
    if !(1..=2).contains(&order) {
        return Err(Error::invalid("order", format!("must be 1 or 2, got {order}")));
    }
    let first = order * step;
    if last_train < first + order + 1 {
        return Err(Error::Data(format!(
            "training window too short for AR({order}) at step {step}"
        )));
    }
    let rows: Vec<usize> = (first..=last_train).collect();
    let mut coefficients = Vec::with_capacity(field.nrows());
    let mut fallback = Vec::new();
    for loc in 0..field.nrows() {
        let x = DMatrix::from_fn(rows.len(), order + 1, |r, j| {
            if j == 0 {
                1.0
            } else {
                field[(loc, rows[r] - j * step)]
            }
        });
        let y = DMatrix::from_fn(rows.len(), 1, |r, _| field[(loc, rows[r])]);
        match lstsq(&x, &y) {
            Ok(b) => coefficients.push(b.column(0).iter().copied().collect()),
            Err(Error::Degenerate(_)) => {
                let mean = (0..=last_train).map(|t| field[(loc, t)]).sum::<f64>() / (last_train + 1) as f64;
                let mut c = vec![0.0; order + 1];
                c[0] = mean;
                coefficients.push(c);
                fallback.push(loc);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(ArFit { coefficients, fallback })
}

/// M3 (order 1) and M4 (order 2).
pub fn autoregressive_forecast(input: &BaselineInput<'_>, order: usize, targets: &[usize]) -> Result<BaselineForecast> {
    input.validate(targets)?;
    let fit = fit_autoregression(input.response_field, order, input.step, input.last_train)?;
    let field = input.response_field;
    let mut values = DMatrix::zeros(field.nrows(), targets.len());
    for (k, &t) in targets.iter().enumerate() {
        if t < order * input.step {
            return Err(Error::Data(format!("target {t} lacks AR({order}) history")));
        }
        for (loc, c) in fit.coefficients.iter().enumerate() {
            let mut v = c[0];
            for j in 1..=order {
                v += c[j] * field[(loc, t - j * input.step)];
            }
            values[(loc, k)] = v;
        }
    }
    let notes = if fit.fallback.is_empty() {
        Vec::new()
    } else {
        vec![format!(
            "M{}: {} degenerate locations use their training mean",
            order + 2,
            fit.fallback.len()
        )]
    };
    Ok(BaselineForecast { values, notes })
}

/// M5: per-location mean over training positions.
pub fn climatology_forecast(input: &BaselineInput<'_>, targets: &[usize]) -> Result<BaselineForecast> {
    input.validate(targets)?;
    let train = input.response_field.columns(0, input.last_train + 1);
    let mean = train.column_mean();
    let values = DMatrix::from_fn(mean.len(), targets.len(), |i, _| mean[i]);
    Ok(BaselineForecast {
        values,
        notes: Vec::new(),
    })
}

/// M6: the response `step` positions before the target.
pub fn persistence_forecast(input: &BaselineInput<'_>, targets: &[usize]) -> Result<BaselineForecast> {
    input.validate(targets)?;
    let field = input.response_field;
    let mut values = DMatrix::zeros(field.nrows(), targets.len());
    for (k, &t) in targets.iter().enumerate() {
        let src = t
            .checked_sub(input.step)
            .ok_or_else(|| Error::Data(format!("target {t} has no value {} positions earlier", input.step)))?;
        values.set_column(k, &field.column(src));
    }
    Ok(BaselineForecast {
        values,
        notes: Vec::new(),
    })
}

/// M7: the auxiliary field at the target position. Only meaningful at
/// lead 1, where it is observed one step before the target.
pub fn auxiliary_persistence_forecast(input: &BaselineInput<'_>, targets: &[usize]) -> Result<BaselineForecast> {
    input.validate(targets)?;
    let aux = input
        .auxiliary
        .ok_or_else(|| Error::invalid("auxiliary", "M7 needs an auxiliary series"))?;
    if input.lead != 1 {
        return Err(Error::invalid("lead", "M7 is only available at lead 1"));
    }
    let mut values = DMatrix::zeros(aux.nrows(), targets.len());
    for (k, &t) in targets.iter().enumerate() {
        values.set_column(k, &aux.column(t));
    }
    Ok(BaselineForecast {
        values,
        notes: Vec::new(),
    })
}

/// Dispatch on [`BaselineKind`].
pub fn forecast(kind: BaselineKind, input: &BaselineInput<'_>, targets: &[usize]) -> Result<BaselineForecast> {
    match kind {
        BaselineKind::M1 => regression_forecast(input, targets),
        BaselineKind::M2 => constructed_analogue_forecast(input, targets),
        BaselineKind::M3 => autoregressive_forecast(input, 1, targets),
        BaselineKind::M4 => autoregressive_forecast(input, 2, targets),
        BaselineKind::M5 => climatology_forecast(input, targets),
        BaselineKind::M6 => persistence_forecast(input, targets),
        BaselineKind::M7 => auxiliary_persistence_forecast(input, targets),
        BaselineKind::M8 => Err(Error::Unavailable("M8 (random forest) is unavailable")),
    }
}
