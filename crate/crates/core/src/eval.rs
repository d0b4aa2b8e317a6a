//! Forecast scores and score tables.
//!
//! Inputs are locations × hold-out times. The mean squared error averages
//! over both; the anomaly correlation is uncentered with sums pooled over
//! locations and times.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn aligned(actual: &DMatrix<f64>, predicted: &DMatrix<f64>) -> Result<()> {
    if actual.shape() != predicted.shape() {
        return Err(Error::Shape(format!(
            "actuals {:?} vs predictions {:?}",
            actual.shape(),
            predicted.shape()
        )));
    }
    if actual.is_empty() {
        return Err(Error::Data("no hold-out values to score".into()));
    }
    Ok(())
}

/// Mean of squared errors over all locations and times.
pub fn mse(actual: &DMatrix<f64>, predicted: &DMatrix<f64>) -> Result<f64> {
    aligned(actual, predicted)?;
    let ss: f64 = actual
        .iter()
        .zip(predicted.iter())
        .map(|(y, f)| (y - f) * (y - f))
        .sum();
    Ok(ss / actual.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcForm {
    /// `Σŷ′y / sqrt(Σŷ′ŷ · Σy′y)`
    #[default]
    Sqrt,
    /// `Σŷ′y / (Σŷ′ŷ · Σy′y)`, without the square root.
    Printed,
}

pub fn anomaly_correlation(actual: &DMatrix<f64>, predicted: &DMatrix<f64>) -> Result<f64> {
    anomaly_correlation_with(actual, predicted, AcForm::Sqrt)
}

pub fn anomaly_correlation_with(actual: &DMatrix<f64>, predicted: &DMatrix<f64>, form: AcForm) -> Result<f64> {
    aligned(actual, predicted)?;
    let mut cross = 0.0;
    let mut ff = 0.0;
    let mut yy = 0.0;
    for (y, f) in actual.iter().zip(predicted.iter()) {
        cross += f * y;
        ff += f * f;
        yy += y * y;
    }
    if ff == 0.0 || yy == 0.0 {
        return Err(Error::Degenerate("anomaly correlation of an all-zero field".into()));
    }
    Ok(match form {
        AcForm::Sqrt => cross / (ff.sqrt() * yy.sqrt()),
        AcForm::Printed => cross / (ff * yy),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub region: u32,
    pub model: String,
    pub lead: usize,
    pub mse: f64,
    pub ac: f64,
    pub is_best_mse: bool,
    pub is_best_ac: bool,
}

/// Scores per (region, model, lead) with per-(region, lead) bests flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreCard {
    pub rows: Vec<ScoreRow>,
}

/// Forecasts of one model for one region and lead.
#[derive(Debug, Clone)]
pub struct ScoreInput<'a> {
    pub region: u32,
    pub model: String,
    pub lead: usize,
    pub actual: &'a DMatrix<f64>,
    pub predicted: &'a DMatrix<f64>,
}

/// Score every cell. Every model must appear in every (region, lead).
pub fn scorecard(cells: &[ScoreInput<'_>], form: AcForm) -> Result<ScoreCard> {
    let mut rows = Vec::with_capacity(cells.len());
    for c in cells {
        let ac = match anomaly_correlation_with(c.actual, c.predicted, form) {
            Ok(v) => v,
            Err(Error::Degenerate(_)) => f64::NAN,
            Err(e) => return Err(e),
        };
        rows.push(ScoreRow {
            region: c.region,
            model: c.model.clone(),
            lead: c.lead,
            mse: mse(c.actual, c.predicted)?,
            ac,
            is_best_mse: false,
            is_best_ac: false,
        });
    }
    ScoreCard::from_rows(rows)
}

const HEADER: &str = "region,model,lead,mse,ac,is_best_mse,is_best_ac";

impl ScoreCard {
    /// Sort rows, check completeness and recompute the best flags. A model
    /// scored at some lead must be scored in every region at that lead.
    pub fn from_rows(mut rows: Vec<ScoreRow>) -> Result<ScoreCard> {
        rows.sort_by(|a, b| (a.region, a.lead, &a.model).cmp(&(b.region, b.lead, &b.model)));
        let mut models: BTreeMap<usize, BTreeSet<&str>> = BTreeMap::new();
        for r in &rows {
            models.entry(r.lead).or_default().insert(r.model.as_str());
        }
        let mut cells: BTreeMap<(u32, usize), Vec<usize>> = BTreeMap::new();
        for (i, r) in rows.iter().enumerate() {
            cells.entry((r.region, r.lead)).or_default().push(i);
        }
        for (&(region, lead), idx) in &cells {
            let present: BTreeSet<&str> = idx.iter().map(|&i| rows[i].model.as_str()).collect();
            if present.len() != idx.len() {
                return Err(Error::Data(format!("duplicate model in region {region}, lead {lead}")));
            }
            if let Some(missing) = models[&lead].difference(&present).next() {
                return Err(Error::Data(format!(
                    "missing output of model {missing} for region {region}, lead {lead}"
                )));
            }
        }
        for idx in cells.values() {
            let best_mse = idx.iter().map(|&i| rows[i].mse).fold(f64::INFINITY, f64::min);
            let best_ac = idx
                .iter()
                .map(|&i| rows[i].ac)
                .filter(|a| !a.is_nan())
                .fold(f64::NEG_INFINITY, f64::max);
            for &i in idx {
                rows[i].is_best_mse = rows[i].mse == best_mse;
                rows[i].is_best_ac = rows[i].ac == best_ac;
            }
        }
        Ok(ScoreCard { rows })
    }

    pub fn get(&self, region: u32, model: &str, lead: usize) -> Option<&ScoreRow> {
        self.rows
            .iter()
            .find(|r| r.region == region && r.model == model && r.lead == lead)
    }

    /// CSV text; floats are written in shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{:?},{:?},{},{}\n",
                r.region, r.model, r.lead, r.mse, r.ac, r.is_best_mse, r.is_best_ac
            ));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<ScoreCard> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        let mut rows = Vec::new();
        for rec in rdr.deserialize() {
            let row: ScoreRow = rec.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })?;
            rows.push(row);
        }
        ScoreCard::from_rows(rows)
    }
}
