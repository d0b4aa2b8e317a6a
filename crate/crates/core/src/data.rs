//! Gridded field series: ingestion, anomalies, regions, and the synthetic
//! test system.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

mod synth;

pub use synth::{block_regions, generate_synthetic, synthetic_latent, SynthSpec};

/// A grid point, in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coord {
    pub lon: f64,
    pub lat: f64,
}

impl Coord {
    pub fn new(lon: f64, lat: f64) -> Self {
        Coord { lon, lat }
    }

    /// Row order used everywhere: latitude first, then longitude.
    pub fn grid_cmp(&self, other: &Coord) -> Ordering {
        self.lat.total_cmp(&other.lat).then(self.lon.total_cmp(&other.lon))
    }
}

/// A spatio-temporal field: one row per location, one column per time.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSeries {
    values: DMatrix<f64>,
    coords: Vec<Coord>,
    times: Vec<i64>,
    labels: Vec<String>,
    regions: Option<Vec<u32>>,
}

impl FieldSeries {
    /// Builds a field, checking shape agreement, finiteness and that the time
    /// axis is strictly increasing. Time labels default to the time indices.
    pub fn new(values: DMatrix<f64>, coords: Vec<Coord>, times: Vec<i64>) -> Result<Self> {
        let labels = times.iter().map(|t| t.to_string()).collect();
        Self::with_labels(values, coords, times, labels)
    }

    pub fn with_labels(values: DMatrix<f64>, coords: Vec<Coord>, times: Vec<i64>, labels: Vec<String>) -> Result<Self> {
        if coords.len() != values.nrows() {
            return Err(Error::Shape(format!(
                "{} coordinates for {} rows",
                coords.len(),
                values.nrows()
            )));
        }
        if times.len() != values.ncols() || labels.len() != times.len() {
            return Err(Error::Shape(format!(
                "{} times / {} labels for {} columns",
                times.len(),
                labels.len(),
                values.ncols()
            )));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Data("time axis must be strictly increasing".into()));
        }
        if let Some((i, j)) = first_non_finite(&values) {
            return Err(Error::Data(format!(
                "non-finite value at location {i}, time {}",
                times[j]
            )));
        }
        Ok(FieldSeries {
            values,
            coords,
            times,
            labels,
            regions: None,
        })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn times(&self) -> &[i64] {
        &self.times
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn regions(&self) -> Option<&[u32]> {
        self.regions.as_deref()
    }

    pub fn n_loc(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_time(&self) -> usize {
        self.values.ncols()
    }

    /// Column position of a time index, if present.
    pub fn position(&self, time: i64) -> Option<usize> {
        self.times.binary_search(&time).ok()
    }

    /// Attaches a region partition to the rows.
    pub fn with_regions(mut self, partition: &RegionPartition) -> Result<Self> {
        if partition.len() != self.n_loc() {
            return Err(Error::Shape(format!(
                "region partition covers {} locations, field has {}",
                partition.len(),
                self.n_loc()
            )));
        }
        self.regions = Some(partition.assignments().to_vec());
        Ok(self)
    }

    /// Replaces the values, keeping coordinates and time axis.
    pub fn with_values(&self, values: DMatrix<f64>) -> Result<Self> {
        let mut out = Self::with_labels(values, self.coords.clone(), self.times.clone(), self.labels.clone())?;
        out.regions = self.regions.clone();
        Ok(out)
    }

    /// Subset of rows, in the given order.
    pub fn restrict_rows(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.n_loc()) {
            return Err(Error::invalid("rows", format!("row {bad} out of range")));
        }
        let values = self.values.select_rows(rows.iter());
        let coords = rows.iter().map(|&r| self.coords[r]).collect();
        let mut out = Self::with_labels(values, coords, self.times.clone(), self.labels.clone())?;
        out.regions = self.regions.as_ref().map(|reg| rows.iter().map(|&r| reg[r]).collect());
        Ok(out)
    }

    /// Rows belonging to one region of the given partition.
    pub fn restrict_region(&self, partition: &RegionPartition, region: u32) -> Result<Self> {
        let rows = partition.rows_of(region);
        if rows.is_empty() {
            return Err(Error::invalid("region", format!("region {region} is empty or unknown")));
        }
        self.restrict_rows(&rows)
    }

    /// Subset of columns between two time indices, inclusive.
    pub fn time_window(&self, start: i64, end: i64) -> Result<Self> {
        let cols: Vec<usize> = (0..self.n_time())
            .filter(|&j| self.times[j] >= start && self.times[j] <= end)
            .collect();
        if cols.is_empty() {
            return Err(Error::invalid("window", format!("no times in [{start}, {end}]")));
        }
        let mut out = Self::with_labels(
            self.values.select_columns(cols.iter()),
            self.coords.clone(),
            cols.iter().map(|&j| self.times[j]).collect(),
            cols.iter().map(|&j| self.labels[j].clone()).collect(),
        )?;
        out.regions = self.regions.clone();
        Ok(out)
    }

    /// Stacks fields sharing a time axis and re-sorts rows by (lat, lon).
    pub fn stack(parts: &[FieldSeries]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("parts", "nothing to stack"))?;
        if parts.iter().any(|p| p.times != first.times) {
            return Err(Error::Shape("stacked fields must share a time axis".into()));
        }
        let mut rows: Vec<(Coord, Option<u32>, Vec<f64>)> = Vec::new();
        for part in parts {
            for i in 0..part.n_loc() {
                rows.push((
                    part.coords[i],
                    part.regions.as_ref().map(|r| r[i]),
                    part.values.row(i).iter().copied().collect(),
                ));
            }
        }
        rows.sort_by(|a, b| a.0.grid_cmp(&b.0));
        let n_time = first.n_time();
        let values = DMatrix::from_fn(rows.len(), n_time, |i, j| rows[i].2[j]);
        let mut out = Self::with_labels(
            values,
            rows.iter().map(|r| r.0).collect(),
            first.times.clone(),
            first.labels.clone(),
        )?;
        if rows.iter().all(|r| r.1.is_some()) {
            out.regions = Some(rows.iter().map(|r| r.1.unwrap_or_default()).collect());
        }
        Ok(out)
    }

    /// Writes the field as a wide CSV (`lon,lat,<label>...`).
    pub fn write_wide(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let mut line = String::from("lon,lat");
        for label in &self.labels {
            line.push(',');
            line.push_str(label);
        }
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        for i in 0..self.n_loc() {
            line.clear();
            line.push_str(&format!("{},{}", self.coords[i].lon, self.coords[i].lat));
            for v in self.values.row(i).iter() {
                line.push_str(&format!(",{v}"));
            }
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

fn first_non_finite(m: &DMatrix<f64>) -> Option<(usize, usize)> {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if !m[(i, j)].is_finite() {
                return Some((i, j));
            }
        }
    }
    None
}

/// On-disk layouts accepted by [`load_field`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldFormat {
    /// `lon,lat,t1,...,tK`, one row per location.
    WideCsv,
    /// `lon,lat,time,value`, one row per cell.
    LongCsv,
}

/// Reads a field series from disk. Rows come back sorted by (lat, lon).
pub fn load_field(path: impl AsRef<Path>, format: FieldFormat) -> Result<FieldSeries> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    match format {
        FieldFormat::WideCsv => read_wide(path, file),
        FieldFormat::LongCsv => read_long(path, file),
    }
}

fn csv_reader(file: File) -> csv::Reader<File> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(file)
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_time_label(label: &str) -> Option<i64> {
    let digits = label.strip_prefix(['t', 'T']).unwrap_or(label);
    digits.parse().ok()
}

fn parse_number(path: &Path, line: u64, column: &str, cell: &str) -> Result<f64> {
    let v: f64 = cell
        .parse()
        .map_err(|_| parse_err(path, line, format!("column `{column}`: cannot parse `{cell}`")))?;
    if !v.is_finite() {
        return Err(Error::NonFinite {
            path: path.to_path_buf(),
            row: line,
            column: column.to_string(),
        });
    }
    Ok(v)
}

fn check_header(path: &Path, header: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    for (k, want) in expected.iter().enumerate() {
        if header.get(k).map(|h| h.eq_ignore_ascii_case(want)) != Some(true) {
            return Err(parse_err(path, 1, format!("expected column {} to be `{want}`", k + 1)));
        }
    }
    Ok(())
}

fn read_wide(path: &Path, file: File) -> Result<FieldSeries> {
    let mut rdr = csv_reader(file);
    let header = rdr.headers().map_err(|e| parse_err(path, 1, e.to_string()))?.clone();
    check_header(path, &header, &["lon", "lat"])?;
    let labels: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
    if labels.is_empty() {
        return Err(parse_err(path, 1, "no time columns"));
    }
    let mut times = Vec::with_capacity(labels.len());
    for label in &labels {
        let t = parse_time_label(label)
            .ok_or_else(|| parse_err(path, 1, format!("time column `{label}` is not an integer index")))?;
        times.push(t);
    }

    let mut rows: Vec<(Coord, Vec<f64>, u64)> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != header.len() {
            return Err(Error::Ragged {
                path: path.to_path_buf(),
                message: format!("line {line} has {} fields, header has {}", record.len(), header.len()),
            });
        }
        let lon = parse_number(path, line, "lon", &record[0])?;
        let lat = parse_number(path, line, "lat", &record[1])?;
        let mut vals = Vec::with_capacity(labels.len());
        for (k, cell) in record.iter().skip(2).enumerate() {
            vals.push(parse_number(path, line, &labels[k], cell)?);
        }
        rows.push((Coord::new(lon, lat), vals, line));
    }
    if rows.is_empty() {
        return Err(parse_err(path, 1, "no data rows"));
    }
    rows.sort_by(|a, b| a.0.grid_cmp(&b.0));
    if let Some(w) = rows.windows(2).find(|w| w[0].0.grid_cmp(&w[1].0) == Ordering::Equal) {
        return Err(Error::DuplicateCell {
            path: path.to_path_buf(),
            lon: w[1].0.lon,
            lat: w[1].0.lat,
            time: times[0],
        });
    }

    // Columns sorted by time as well.
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by_key(|&k| times[k]);
    if let Some(w) = order.windows(2).find(|w| times[w[0]] == times[w[1]]) {
        return Err(parse_err(path, 1, format!("time `{}` appears twice", labels[w[1]])));
    }
    let values = DMatrix::from_fn(rows.len(), order.len(), |i, j| rows[i].1[order[j]]);
    FieldSeries::with_labels(
        values,
        rows.iter().map(|r| r.0).collect(),
        order.iter().map(|&k| times[k]).collect(),
        order.iter().map(|&k| labels[k].clone()).collect(),
    )
}

fn read_long(path: &Path, file: File) -> Result<FieldSeries> {
    let mut rdr = csv_reader(file);
    let header = rdr.headers().map_err(|e| parse_err(path, 1, e.to_string()))?.clone();
    check_header(path, &header, &["lon", "lat", "time", "value"])?;

    let mut cells: Vec<(Coord, i64, f64)> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 4 {
            return Err(Error::Ragged {
                path: path.to_path_buf(),
                message: format!("line {line} has {} fields, expected 4", record.len()),
            });
        }
        let lon = parse_number(path, line, "lon", &record[0])?;
        let lat = parse_number(path, line, "lat", &record[1])?;
        let time =
            parse_time_label(&record[2]).ok_or_else(|| parse_err(path, line, format!("bad time `{}`", &record[2])))?;
        let value = parse_number(path, line, "value", &record[3])?;
        cells.push((Coord::new(lon, lat), time, value));
    }
    if cells.is_empty() {
        return Err(parse_err(path, 1, "no data rows"));
    }
    cells.sort_by(|a, b| a.0.grid_cmp(&b.0).then(a.1.cmp(&b.1)));
    if let Some(w) = cells
        .windows(2)
        .find(|w| w[0].0.grid_cmp(&w[1].0) == Ordering::Equal && w[0].1 == w[1].1)
    {
        return Err(Error::DuplicateCell {
            path: path.to_path_buf(),
            lon: w[1].0.lon,
            lat: w[1].0.lat,
            time: w[1].1,
        });
    }

    let mut by_loc: Vec<(Coord, Vec<(i64, f64)>)> = Vec::new();
    for (coord, time, value) in cells {
        match by_loc.last_mut() {
            Some((c, series)) if c.grid_cmp(&coord) == Ordering::Equal => series.push((time, value)),
            _ => by_loc.push((coord, vec![(time, value)])),
        }
    }
    let times: Vec<i64> = by_loc[0].1.iter().map(|c| c.0).collect();
    for (coord, series) in &by_loc {
        if series.len() != times.len() || series.iter().zip(&times).any(|(c, t)| c.0 != *t) {
            return Err(Error::Ragged {
                path: path.to_path_buf(),
                message: format!(
                    "location lon={}, lat={} does not cover the same times as the first location",
                    coord.lon, coord.lat
                ),
            });
        }
    }
    let values = DMatrix::from_fn(by_loc.len(), times.len(), |i, j| by_loc[i].1[j].1);
    FieldSeries::new(values, by_loc.iter().map(|r| r.0).collect(), times)
}

/// Removes, for every location and every period class `time mod by_period`,
/// the mean of that class over the climatology window `[clim_start, clim_end]`.
pub fn to_anomalies(field: &FieldSeries, clim_start: i64, clim_end: i64, by_period: usize) -> Result<FieldSeries> {
    if by_period == 0 {
        return Err(Error::invalid("by_period", "must be positive"));
    }
    if clim_start > clim_end {
        return Err(Error::invalid("climatology window", "empty window"));
    }
    let (first, last) = (field.times[0], field.times[field.n_time() - 1]);
    if clim_start < first || clim_end > last {
        return Err(Error::invalid(
            "climatology window",
            format!("[{clim_start}, {clim_end}] outside series [{first}, {last}]"),
        ));
    }
    let period = by_period as i64;
    let class_of = |t: i64| t.rem_euclid(period) as usize;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); by_period];
    for (j, &t) in field.times.iter().enumerate() {
        if t >= clim_start && t <= clim_end {
            members[class_of(t)].push(j);
        }
    }
    for &t in &field.times {
        if members[class_of(t)].is_empty() {
            return Err(Error::invalid(
                "climatology window",
                format!("no climatology columns for period class {}", class_of(t)),
            ));
        }
    }
    let mut values = field.values.clone();
    for i in 0..field.n_loc() {
        let means: Vec<f64> = members
            .iter()
            .map(|cols| {
                if cols.is_empty() {
                    0.0
                } else {
                    cols.iter().map(|&j| field.values[(i, j)]).sum::<f64>() / cols.len() as f64
                }
            })
            .collect();
        for (j, &t) in field.times.iter().enumerate() {
            values[(i, j)] -= means[class_of(t)];
        }
    }
    field.with_values(values)
}

/// Assignment of every location to exactly one region; ids run 1..=n.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionPartition {
    assignments: Vec<u32>,
    n_regions: u32,
}

impl RegionPartition {
    pub fn new(assignments: Vec<u32>) -> Result<Self> {
        let n_regions = assignments.iter().copied().max().unwrap_or(0);
        if assignments.is_empty() {
            return Err(Error::Data("empty region partition".into()));
        }
        if assignments.contains(&0) {
            return Err(Error::Data("region ids start at 1".into()));
        }
        let mut seen = vec![false; n_regions as usize];
        for &r in &assignments {
            seen[(r - 1) as usize] = true;
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(Error::Data(format!(
                "region ids must be contiguous; region {} has no locations",
                k + 1
            )));
        }
        Ok(RegionPartition { assignments, n_regions })
    }

    /// Single region containing every location.
    pub fn whole(n_loc: usize) -> Self {
        RegionPartition {
            assignments: vec![1; n_loc],
            n_regions: 1,
        }
    }

    pub fn assignments(&self) -> &[u32] {
        &self.assignments
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn n_regions(&self) -> u32 {
        self.n_regions
    }

    pub fn region_ids(&self) -> impl Iterator<Item = u32> {
        1..=self.n_regions
    }

    pub fn rows_of(&self, region: u32) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, &r)| r == region)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Reads a `lon,lat,region` file and matches it against the field's rows.
/// Extra rows for locations absent from the field are ignored.
pub fn load_regions(path: impl AsRef<Path>, field: &FieldSeries) -> Result<RegionPartition> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv_reader(file);
    let header = rdr.headers().map_err(|e| parse_err(path, 1, e.to_string()))?.clone();
    check_header(path, &header, &["lon", "lat", "region"])?;
    let mut lookup: BTreeMap<(u64, u64), u32> = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 3 {
            return Err(Error::Ragged {
                path: path.to_path_buf(),
                message: format!("line {line} has {} fields, expected 3", record.len()),
            });
        }
        let lon = parse_number(path, line, "lon", &record[0])?;
        let lat = parse_number(path, line, "lat", &record[1])?;
        let region: u32 = record[2]
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad region id `{}`", &record[2])))?;
        if lookup.insert((lon.to_bits(), lat.to_bits()), region).is_some() {
            return Err(parse_err(path, line, "location listed twice"));
        }
    }
    let mut assignments = Vec::with_capacity(field.n_loc());
    for c in field.coords() {
        let r = lookup.get(&(c.lon.to_bits(), c.lat.to_bits())).ok_or_else(|| {
            Error::Data(format!(
                "{}: no region for location lon={}, lat={}",
                path.display(),
                c.lon,
                c.lat
            ))
        })?;
        assignments.push(*r);
    }
    RegionPartition::new(assignments)
}

pub fn write_regions(path: impl AsRef<Path>, coords: &[Coord], partition: &RegionPartition) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "lon,lat,region").map_err(|e| Error::io(path, e))?;
    for (c, r) in coords.iter().zip(partition.assignments()) {
        writeln!(out, "{},{},{}", c.lon, c.lat, r).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
