//! Spatial bases (EOF, multivariate EOF, CCA) and projection to and from
//! coefficient space.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{Coord, FieldSeries};
use crate::error::{Error, Result};
use crate::linalg;

/// Relative ridge added to within-set covariances in CCA.
pub const CCA_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum BasisKind {
    Eof,
    Meof,
    Cca,
}

/// Which field a block of multivariate-EOF rows came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceField {
    Forcing,
    Response,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceBlock {
    pub field: SourceField,
    pub start: usize,
    pub end: usize,
    /// Standardization divisor applied to this field before stacking.
    pub scale: f64,
}

/// Sidecar metadata stored next to a saved basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisMeta {
    pub kind: BasisKind,
    #[serde(default)]
    pub explained_variance: Vec<f64>,
    #[serde(default)]
    pub source_rows: Vec<SourceBlock>,
    #[serde(default)]
    pub canonical_correlations: Vec<f64>,
    #[serde(default)]
    pub notes: Vec<String>,
}

/// A spatial basis: `n_loc × p` matrix plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSet {
    matrix: DMatrix<f64>,
    coords: Vec<Coord>,
    meta: BasisMeta,
}

impl BasisSet {
    pub fn new(matrix: DMatrix<f64>, coords: Vec<Coord>, meta: BasisMeta) -> Result<Self> {
        if coords.len() != matrix.nrows() {
            return Err(Error::Shape(format!(
                "basis has {} rows but {} coordinates",
                matrix.nrows(),
                coords.len()
            )));
        }
        if matrix.ncols() == 0 {
            return Err(Error::invalid("p", "basis needs at least one column"));
        }
        Ok(BasisSet { matrix, coords, meta })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn kind(&self) -> BasisKind {
        self.meta.kind
    }

    pub fn meta(&self) -> &BasisMeta {
        &self.meta
    }

    pub fn explained_variance(&self) -> &[f64] {
        &self.meta.explained_variance
    }

    pub fn canonical_correlations(&self) -> &[f64] {
        &self.meta.canonical_correlations
    }

    pub fn notes(&self) -> &[String] {
        &self.meta.notes
    }

    pub fn n_loc(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn p(&self) -> usize {
        self.matrix.ncols()
    }

    /// One field's rows of a multivariate-EOF basis, rescaled back to that
    /// field's physical units. The block is generally not orthonormal.
    pub fn block(&self, field: SourceField) -> Result<BasisSet> {
        let block = self
            .meta
            .source_rows
            .iter()
            .find(|b| b.field == field)
            .ok_or_else(|| Error::invalid("basis", format!("no {field:?} block in this basis")))?;
        let rows = block.end - block.start;
        let matrix = self.matrix.rows(block.start, rows) * block.scale;
        let meta = BasisMeta {
            source_rows: Vec::new(),
            ..self.meta.clone()
        };
        BasisSet::new(matrix, self.coords[block.start..block.end].to_vec(), meta)
    }

    /// Writes `lon,lat,b1..bp` plus a JSON sidecar (see [`sidecar_path`]).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let header: Vec<String> = (1..=self.p()).map(|k| format!("b{k}")).collect();
        writeln!(out, "lon,lat,{}", header.join(",")).map_err(|e| Error::io(path, e))?;
        for (i, c) in self.coords.iter().enumerate() {
            let row: Vec<String> = self.matrix.row(i).iter().map(|v| v.to_string()).collect();
            writeln!(out, "{},{},{}", c.lon, c.lat, row.join(",")).map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.meta)
            .map_err(|e| Error::Data(format!("cannot encode basis metadata: {e}")))?;
        std::fs::write(&side, json).map_err(|e| Error::io(side, e))
    }

    /// Reads a basis written by [`BasisSet::save`]. Row order is preserved
    /// exactly (stacked MEOF rows are not re-sorted).
    pub fn load(path: impl AsRef<Path>) -> Result<BasisSet> {
        let path = path.as_ref();
        let side = sidecar_path(path);
        let json = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: BasisMeta = serde_json::from_str(&json).map_err(|e| Error::Parse {
            path: side.clone(),
            line: e.line() as u64,
            message: e.to_string(),
        })?;
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
        let mut coords = Vec::new();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: e.position().map(|p| p.line()).unwrap_or(0),
                message: e.to_string(),
            })?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            let nums: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
            let nums = nums.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: e.to_string(),
            })?;
            if nums.len() < 3 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: "basis rows need lon, lat and at least one column".into(),
                });
            }
            coords.push(Coord::new(nums[0], nums[1]));
            rows.push(nums[2..].to_vec());
        }
        let p = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::Ragged {
                path: path.to_path_buf(),
                message: "basis rows differ in length".into(),
            });
        }
        let matrix = DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]);
        BasisSet::new(matrix, coords, meta)
    }
}

/// `basis.csv` → `basis.csv.meta.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn check_p(p: usize, n_loc: usize, n_time: usize) -> Result<()> {
    if p == 0 || p > n_loc.min(n_time) {
        return Err(Error::invalid(
            "p",
            format!("need 1 ≤ p ≤ min(n_loc, n_time) = {}, got {p}", n_loc.min(n_time)),
        ));
    }
    Ok(())
}

fn rank_note(singular: &[f64], p: usize) -> Option<String> {
    let largest = singular.first().copied().unwrap_or(0.0);
    let sp = singular.get(p - 1).copied().unwrap_or(0.0);
    if sp < 1e-12 * largest {
        log::warn!("basis is rank deficient: singular value {p} is {sp:.3e}");
        Some(format!("rank deficient: singular value {p} = {sp:.3e}"))
    } else {
        None
    }
}

/// Leading `p` EOFs of an anomaly field (left singular vectors of the
/// location × time matrix, taken as-is).
pub fn compute_eof(field: &FieldSeries, p: usize) -> Result<BasisSet> {
    check_p(p, field.n_loc(), field.n_time())?;
    let (u, s) = linalg::left_singular(field.values())?;
    let total: f64 = s.iter().map(|v| v * v).sum();
    if total == 0.0 {
        return Err(Error::Degenerate("field is identically zero".into()));
    }
    let meta = BasisMeta {
        kind: BasisKind::Eof,
        explained_variance: s[..p].iter().map(|v| v * v / total).collect(),
        source_rows: Vec::new(),
        canonical_correlations: Vec::new(),
        notes: rank_note(&s, p).into_iter().collect(),
    };
    BasisSet::new(u.columns(0, p).into_owned(), field.coords().to_vec(), meta)
}

/// Population standard deviation over every cell.
fn total_sd(m: &DMatrix<f64>) -> f64 {
    let n = m.len() as f64;
    let mean = m.sum() / n;
    (m.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Multivariate EOFs of two fields, each divided by its total standard
/// deviation and stacked (forcing rows first).
pub fn compute_meof(forcing: &FieldSeries, response: &FieldSeries, p: usize) -> Result<BasisSet> {
    if forcing.times() != response.times() {
        return Err(Error::Shape("forcing and response time axes differ".into()));
    }
    let nx = forcing.n_loc();
    let ny = response.n_loc();
    check_p(p, nx + ny, forcing.n_time())?;
    let sx = total_sd(forcing.values());
    let sy = total_sd(response.values());
    if sx == 0.0 || sy == 0.0 {
        return Err(Error::Degenerate("a field has zero variance".into()));
    }
    let mut stacked = DMatrix::zeros(nx + ny, forcing.n_time());
    stacked.rows_mut(0, nx).copy_from(&(forcing.values() / sx));
    stacked.rows_mut(nx, ny).copy_from(&(response.values() / sy));
    let (u, s) = linalg::left_singular(&stacked)?;
    let total: f64 = s.iter().map(|v| v * v).sum();
    let mut coords = forcing.coords().to_vec();
    coords.extend_from_slice(response.coords());
    let meta = BasisMeta {
        kind: BasisKind::Meof,
        explained_variance: s[..p].iter().map(|v| v * v / total).collect(),
        source_rows: vec![
            SourceBlock {
                field: SourceField::Forcing,
                start: 0,
                end: nx,
                scale: sx,
            },
            SourceBlock {
                field: SourceField::Response,
                start: nx,
                end: nx + ny,
                scale: sy,
            },
        ],
        canonical_correlations: Vec::new(),
        notes: rank_note(&s, p).into_iter().collect(),
    };
    BasisSet::new(u.columns(0, p).into_owned(), coords, meta)
}

/// Canonical weights between two coefficient series (rows = variables,
/// columns = paired samples).
#[derive(Debug, Clone)]
pub struct CanonicalFit {
    pub x_weights: DMatrix<f64>,
    pub y_weights: DMatrix<f64>,
    pub correlations: Vec<f64>,
    /// Set when a within-set covariance was numerically singular.
    pub singular_covariance: bool,
}

pub fn canonical_correlation(x: &DMatrix<f64>, y: &DMatrix<f64>, p: usize) -> Result<CanonicalFit> {
    let n = x.ncols();
    if y.ncols() != n {
        return Err(Error::Shape("paired series differ in length".into()));
    }
    if n < 3 {
        return Err(Error::invalid(
            "pairs",
            format!("need at least 3 paired samples, got {n}"),
        ));
    }
    if p == 0 || p > x.nrows().min(y.nrows()) {
        return Err(Error::invalid(
            "p",
            format!("need 1 ≤ p ≤ {}, got {p}", x.nrows().min(y.nrows())),
        ));
    }
    let xc = linalg::center_rows(x);
    let yc = linalg::center_rows(y);
    let scale = 1.0 / (n as f64 - 1.0);
    let mut cxx = &xc * xc.transpose() * scale;
    let mut cyy = &yc * yc.transpose() * scale;
    let cxy = &xc * yc.transpose() * scale;
    let mut singular = false;
    for c in [&mut cxx, &mut cyy] {
        let eig = c.clone().symmetric_eigenvalues();
        let max = eig.iter().fold(0.0f64, |m, v| m.max(*v));
        let min = eig.iter().fold(f64::INFINITY, |m, v| m.min(*v));
        if max <= 0.0 || min <= 1e-10 * max {
            singular = true;
        }
        let ridge = CCA_RIDGE * (c.trace() / c.nrows() as f64).max(f64::MIN_POSITIVE);
        for k in 0..c.nrows() {
            c[(k, k)] += ridge;
        }
    }
    let wx = linalg::sym_inv_sqrt(&cxx)?;
    let wy = linalg::sym_inv_sqrt(&cyy)?;
    let whitened = &wx * cxy * &wy;
    let linalg::Svd { u, s, v_t: vt } = linalg::svd(&whitened)?;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]).then(i.cmp(&j)));
    let mut xw = DMatrix::zeros(x.nrows(), p);
    let mut yw = DMatrix::zeros(y.nrows(), p);
    for (k, &src) in order.iter().take(p).enumerate() {
        let mut a = &wx * u.column(src);
        let mut b = &wy * vt.row(src).transpose();
        if linalg::fix_sign(&mut a) {
            b.neg_mut();
        }
        xw.set_column(k, &a);
        yw.set_column(k, &b);
    }
    if singular {
        log::warn!("singular within-set covariance in CCA; ridge {CCA_RIDGE:e} applied");
    }
    Ok(CanonicalFit {
        x_weights: xw,
        y_weights: yw,
        correlations: order.iter().take(p).map(|&i| s[i].clamp(0.0, 1.0)).collect(),
        singular_covariance: singular,
    })
}

/// Reduced-rank CCA bases: both fields are first reduced to `p_pre` EOFs,
/// then canonical weights are found between forcing coefficients at `t − lag`
/// and response coefficients at `t`. Each returned basis is the EOF matrix
/// times the canonical weights.
pub fn compute_cca(
    forcing: &FieldSeries,
    response: &FieldSeries,
    lag: usize,
    p_pre: usize,
    p: usize,
) -> Result<(BasisSet, BasisSet)> {
    if forcing.times() != response.times() {
        return Err(Error::Shape("forcing and response time axes differ".into()));
    }
    if p > p_pre {
        return Err(Error::invalid("p", format!("p = {p} exceeds p_pre = {p_pre}")));
    }
    let n = forcing.n_time();
    if n < lag + 3 {
        return Err(Error::invalid(
            "lag",
            format!("only {} lagged pairs", n.saturating_sub(lag)),
        ));
    }
    let ex = compute_eof(forcing, p_pre)?;
    let ey = compute_eof(response, p_pre)?;
    let ax = project(forcing, &ex)?;
    let ay = project(response, &ey)?;
    let xs = ax.coeffs().columns(0, n - lag).into_owned();
    let ys = ay.coeffs().columns(lag, n - lag).into_owned();
    let fit = canonical_correlation(&xs, &ys, p)?;
    let mut notes = Vec::new();
    if fit.singular_covariance {
        notes.push(format!("singular within-set covariance; ridge {CCA_RIDGE:e} applied"));
    }
    let meta = BasisMeta {
        kind: BasisKind::Cca,
        explained_variance: Vec::new(),
        source_rows: Vec::new(),
        canonical_correlations: fit.correlations.clone(),
        notes,
    };
    Ok((
        BasisSet::new(ex.matrix() * &fit.x_weights, forcing.coords().to_vec(), meta.clone())?,
        BasisSet::new(ey.matrix() * &fit.y_weights, response.coords().to_vec(), meta)?,
    ))
}

/// Basis coefficients of a field over time.
#[derive(Debug, Clone)]
pub struct CoefficientSeries {
    coeffs: DMatrix<f64>,
    times: Vec<i64>,
    basis: Arc<BasisSet>,
}

impl CoefficientSeries {
    pub fn new(coeffs: DMatrix<f64>, times: Vec<i64>, basis: Arc<BasisSet>) -> Result<Self> {
        if coeffs.nrows() != basis.p() || coeffs.ncols() != times.len() {
            return Err(Error::Shape(format!(
                "coefficients {}×{} for basis p={} and {} times",
                coeffs.nrows(),
                coeffs.ncols(),
                basis.p(),
                times.len()
            )));
        }
        Ok(CoefficientSeries { coeffs, times, basis })
    }

    pub fn coeffs(&self) -> &DMatrix<f64> {
        &self.coeffs
    }

    pub fn times(&self) -> &[i64] {
        &self.times
    }

    pub fn basis(&self) -> &Arc<BasisSet> {
        &self.basis
    }

    pub fn p(&self) -> usize {
        self.coeffs.nrows()
    }

    pub fn len(&self) -> usize {
        self.coeffs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.ncols() == 0
    }
}

/// Least-squares coefficients `(Φ'Φ)⁻¹Φ'y_t` for every column, via QR.
pub fn project(field: &FieldSeries, basis: &BasisSet) -> Result<CoefficientSeries> {
    project_shared(field, Arc::new(basis.clone()))
}

pub fn project_shared(field: &FieldSeries, basis: Arc<BasisSet>) -> Result<CoefficientSeries> {
    if basis.n_loc() != field.n_loc() {
        return Err(Error::Shape(format!(
            "basis has {} rows, field has {} locations",
            basis.n_loc(),
            field.n_loc()
        )));
    }
    let coeffs = linalg::lstsq(basis.matrix(), field.values()).map_err(|e| match e {
        Error::Degenerate(m) => Error::Degenerate(format!("Φ'Φ is singular: {m}")),
        other => other,
    })?;
    CoefficientSeries::new(coeffs, field.times().to_vec(), basis)
}

/// Maps coefficients back to physical space: `Φ α_t`.
pub fn reconstruct(c: &CoefficientSeries) -> Result<FieldSeries> {
    FieldSeries::new(c.basis.matrix() * &c.coeffs, c.basis.coords().to_vec(), c.times.clone())
}
