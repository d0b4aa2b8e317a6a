//! Distances between embedding matrices.
//!
//! The Procrustes distance matches a comparison matrix to a target by
//! column centering, an optimal orthogonal `q × q` rotation on the right
//! and an optimal positive scale, then measures the Frobenius residual:
//!
//! ```text
//! d(B_t, B_l) = ‖B̃_t − θ̂ B̃_l R̂‖_F,   B̃_l′B̃_t = U D V′,   R̂ = U V′,   θ̂ = tr D / ‖B̃_l‖²_F
//! ```
//!
//! The normalized distance divides the residual by a reference norm (by
//! default the target's centered norm, which bounds it by 1).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, center_columns};

/// Denominator of the optimal scale θ̂.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleDenominator {
    /// ‖B̃_l‖²: the exact least-squares scale for centered shapes.
    #[default]
    Centered,
    /// ‖B_l‖² of the uncentered comparison.
    Uncentered,
}

/// Reference norm used to normalize the residual.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalizer {
    /// Centered norm of the target; result lies in [0, 1].
    #[default]
    Target,
    /// Centered norm of the comparison, ‖B_l − 1μ′‖.
    Comparison,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcrustesConfig {
    #[serde(default)]
    pub scale: ScaleDenominator,
    #[serde(default)]
    pub normalizer: Normalizer,
}

/// Result of matching one comparison matrix to a target.
#[derive(Debug, Clone)]
pub struct ProcrustesFit {
    pub rotation: DMatrix<f64>,
    pub scale: f64,
    /// ‖B̃_t − θ̂ B̃_l R̂‖_F
    pub raw_distance: f64,
    pub distance: f64,
}

fn check_shapes(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{}×{} vs {}×{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    Ok(())
}

/// Frobenius norm of `a − b`.
pub fn euclidean_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    check_shapes(a, b)?;
    Ok(a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Full Procrustes fit of `comparison` onto `target`.
///
/// Fails with [`Error::Degenerate`] when the comparison (or, under the
/// target normalizer, the target) has zero centered norm.
pub fn procrustes_fit(
    target: &DMatrix<f64>,
    comparison: &DMatrix<f64>,
    config: ProcrustesConfig,
) -> Result<ProcrustesFit> {
    check_shapes(target, comparison)?;
    let xt = center_columns(target);
    let yt = center_columns(comparison);
    let y_norm2 = yt.norm_squared();
    if y_norm2 == 0.0 {
        return Err(Error::Degenerate("comparison has zero centered norm".into()));
    }
    let reference = reference_norm(&xt, &yt, config.normalizer)?;
    let svd = linalg::svd(&(yt.transpose() * &xt))?;
    let trace_d: f64 = svd.s.iter().sum();
    let rotation = svd.u * svd.v_t;
    let denom = match config.scale {
        ScaleDenominator::Centered => y_norm2,
        ScaleDenominator::Uncentered => comparison.norm_squared(),
    };
    let scale = trace_d / denom;
    let raw_distance = (&xt - &yt * &rotation * scale).norm();
    Ok(ProcrustesFit {
        rotation,
        scale,
        raw_distance,
        distance: raw_distance / reference,
    })
}

fn reference_norm(xt: &DMatrix<f64>, yt: &DMatrix<f64>, normalizer: Normalizer) -> Result<f64> {
    let r = match normalizer {
        Normalizer::Target => xt.norm(),
        Normalizer::Comparison => yt.norm(),
    };
    if r == 0.0 {
        return Err(Error::Degenerate("reference matrix has zero centered norm".into()));
    }
    Ok(r)
}

/// Normalized Procrustes distance. Same value as
/// [`procrustes_fit`]`(..).distance`.
pub fn procrustes_distance(target: &DMatrix<f64>, comparison: &DMatrix<f64>, config: ProcrustesConfig) -> Result<f64> {
    check_shapes(target, comparison)?;
    prepared_distance(&PreparedShape::new(target), &PreparedShape::new(comparison), config)
}

/// A matrix with its centered version and norms precomputed, so that many
/// distances against the same library can be evaluated cheaply.
#[derive(Debug, Clone)]
pub struct PreparedShape {
    raw: DMatrix<f64>,
    centered: DMatrix<f64>,
    centered_norm2: f64,
    raw_norm2: f64,
    /// Triangular factor of B̃′ = QR (p × p), used when p < q.
    factor: Option<DMatrix<f64>>,
}

impl PreparedShape {
    pub fn new(m: &DMatrix<f64>) -> Self {
        let centered = center_columns(m);
        let factor = (m.nrows() < m.ncols()).then(|| centered.transpose().qr().r());
        PreparedShape {
            raw: m.clone(),
            centered_norm2: centered.norm_squared(),
            raw_norm2: m.norm_squared(),
            centered,
            factor,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.raw
    }
}

/// Nuclear norm of B̃_l′B̃_t.
fn cross_nuclear_norm(target: &PreparedShape, comparison: &PreparedShape) -> Result<f64> {
    let cross = match (&target.factor, &comparison.factor) {
        // B̃_l′B̃_t = Q_l R_l R_t′ Q_t′ shares its singular values with R_l R_t′.
        (Some(rt), Some(rl)) => rl * rt.transpose(),
        _ => comparison.centered.transpose() * &target.centered,
    };
    Ok(linalg::singular_values(&cross)?.iter().sum())
}

/// Normalized distance between a prepared target and comparison.
pub fn prepared_distance(target: &PreparedShape, comparison: &PreparedShape, config: ProcrustesConfig) -> Result<f64> {
    let x2 = target.centered_norm2;
    let y2 = comparison.centered_norm2;
    if y2 == 0.0 {
        return Err(Error::Degenerate("comparison has zero centered norm".into()));
    }
    let reference2 = match config.normalizer {
        Normalizer::Target => x2,
        Normalizer::Comparison => y2,
    };
    if reference2 == 0.0 {
        return Err(Error::Degenerate("reference matrix has zero centered norm".into()));
    }
    let trace_d = cross_nuclear_norm(target, comparison)?;
    let denom = match config.scale {
        ScaleDenominator::Centered => y2,
        ScaleDenominator::Uncentered => comparison.raw_norm2,
    };
    let scale = trace_d / denom;
    // ‖X̃ − θỸR‖² = ‖X̃‖² − 2θ tr D + θ²‖Ỹ‖²
    let raw2 = (x2 - 2.0 * scale * trace_d + scale * scale * y2).max(0.0);
    let d = (raw2 / reference2).sqrt();
    if d < 1e-6 {
        // The closed form loses precision for near-perfect matches.
        return procrustes_fit(&target.raw, &comparison.raw, config).map(|f| f.distance);
    }
    Ok(d)
}

/// γ-weighted mix of a forcing-side and a response-side distance.
pub fn combined_distance(d_forcing: f64, d_response: f64, gamma: f64) -> f64 {
    gamma * d_forcing + (1.0 - gamma) * d_response
}
