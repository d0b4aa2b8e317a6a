//! Pipeline stages: data, bases, chains, forecasts and scores.
//!
//! Every stage rebuilds its inputs from the configuration, so stages can run
//! as separate processes. Artifacts under the output directory:
//!
//! - `bases/*.csv`: spatial bases with JSON sidecars
//! - `chains/<variant>_r<region>_lead<lead>.csv` and `chains/manifest.json`
//! - `forecasts/<model>_r<region>_lead<lead>_{mean,lower,upper,regional}.csv`
//!   and `forecasts/manifest.json`
//! - `scorecard.csv` and `timeseries/region_<region>.csv`

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::statistics::{Data, OrderStatistics};

use analog_core::baselines::{self, BaselineInput, BaselineKind};
use analog_core::basis::{compute_cca, compute_eof, compute_meof, project, project_shared, BasisSet, SourceField};
use analog_core::bayes::{
    posterior_predict, run_chain, AnalogModel, Chain, DistanceTable, Metric, PredictConfig, PriorConfig,
};
use analog_core::data::{
    block_regions, generate_synthetic, load_field, load_regions, to_anomalies, write_regions, FieldSeries,
    RegionPartition,
};
use analog_core::embedding::{build_training_index, first_position, IndexSpec};
use analog_core::eval::{scorecard, ScoreCard, ScoreInput};
use analog_core::Error;

use crate::config::{DistanceKind, RunConfig, Variant};
use crate::{CliResult, Context};

pub struct Dataset {
    pub forcing: FieldSeries,
    pub response: FieldSeries,
    pub auxiliary: Option<FieldSeries>,
    pub regions: RegionPartition,
}

fn existing(key: &'static str, path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::invalid(key, format!("file {} does not exist", path.display())).into())
    }
}

/// Load and align every input named by the config. All files are checked
/// before anything is parsed.
pub fn load_dataset(cfg: &RunConfig) -> CliResult<Dataset> {
    existing("forcing", &cfg.forcing)?;
    existing("response", &cfg.response)?;
    let has_aux = !cfg.auxiliary.as_os_str().is_empty();
    let has_regions = !cfg.regions.as_os_str().is_empty();
    if has_aux {
        existing("auxiliary", &cfg.auxiliary)?;
    }
    if has_regions {
        existing("regions", &cfg.regions)?;
    }
    let format = cfg.format.into();
    let anomalies = |f: FieldSeries, key: &str| -> CliResult<FieldSeries> {
        if cfg.anomalies {
            to_anomalies(&f, cfg.clim_start, cfg.clim_end, cfg.by_period as usize)
                .context(|| format!("anomalies of {key}"))
        } else {
            Ok(f)
        }
    };
    let forcing = anomalies(load_field(&cfg.forcing, format)?, "forcing")?;
    let response = anomalies(load_field(&cfg.response, format)?, "response")?;
    if forcing.times() != response.times() {
        return Err(Error::Data(format!(
            "{} and {} have different time axes",
            cfg.forcing.display(),
            cfg.response.display()
        ))
        .into());
    }
    let auxiliary = if has_aux {
        let aux = anomalies(load_field(&cfg.auxiliary, format)?, "auxiliary")?;
        if aux.times() != response.times() || aux.coords() != response.coords() {
            return Err(Error::Data(format!(
                "{} must share the response grid and time axis",
                cfg.auxiliary.display()
            ))
            .into());
        }
        Some(aux)
    } else {
        None
    };
    let regions = if has_regions {
        load_regions(&cfg.regions, &response)?
    } else {
        RegionPartition::whole(response.n_loc())
    };
    Ok(Dataset {
        forcing,
        response,
        auxiliary,
        regions,
    })
}

/// Training window and hold-out targets, as 0-based positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub n_time: usize,
    /// Last position whose response is used for training.
    pub last_train: usize,
    /// First training position.
    pub start: usize,
    pub targets: Vec<usize>,
}

impl Layout {
    pub fn new(cfg: &RunConfig, n_time: usize) -> CliResult<Layout> {
        if cfg.holdout + 2 > n_time {
            return Err(Error::invalid("holdout", format!("{} of {n_time} time points", cfg.holdout)).into());
        }
        let last_train = n_time - cfg.holdout - 1;
        let floor = first_position(cfg.lag, cfg.q_max);
        let start = if cfg.train_start < 0 {
            floor
        } else {
            cfg.train_start as usize
        };
        let max_lead = cfg.leads.iter().copied().max().unwrap_or(1);
        if start < floor || start + max_lead > last_train {
            return Err(Error::invalid(
                "train_start",
                format!(
                    "training positions [{start}, {last_train}] do not fit lag {}, q_max {} and lead {max_lead}",
                    cfg.lag, cfg.q_max
                ),
            )
            .into());
        }
        Ok(Layout {
            n_time,
            last_train,
            start,
            targets: (last_train + 1..n_time).collect(),
        })
    }
}

fn training_window(f: &FieldSeries, last_train: usize) -> CliResult<FieldSeries> {
    let times = f.times();
    Ok(f.time_window(times[0], times[last_train])?)
}

/// Deterministic per-job seed.
pub fn job_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

fn variant_tag(v: Variant) -> u64 {
    match v {
        Variant::BA1 => 1,
        Variant::BA2 => 2,
        Variant::BA3 => 3,
        Variant::BA4 => 4,
    }
}

const STAGE_TRAIN: u64 = 11;
const STAGE_PREDICT: u64 = 12;

/// One fitted model: a variant, region and lead.
pub struct Problem {
    pub variant: Variant,
    pub region: u32,
    pub lead: usize,
    pub model: AnalogModel,
    pub priors: PriorConfig,
    /// Maps response coefficients to the region's locations.
    pub response_basis: Arc<BasisSet>,
    pub bases: Vec<(String, Arc<BasisSet>)>,
}

impl Problem {
    pub fn name(&self) -> String {
        format!("{}_r{}_lead{}", self.variant.name(), self.region, self.lead)
    }

    pub fn seed(&self, cfg: &RunConfig, stage: u64) -> u64 {
        job_seed(
            cfg.seed,
            &[variant_tag(self.variant), self.region as u64, self.lead as u64, stage],
        )
    }
}

fn metric(cfg: &RunConfig) -> Metric {
    match cfg.distance {
        DistanceKind::Euclidean => Metric::Euclidean,
        DistanceKind::Procrustes | DistanceKind::Combined => Metric::Procrustes(cfg.procrustes()),
    }
}

struct Coefficients {
    forcing: Arc<DistanceTable>,
    response: DMatrix<f64>,
    response_table: Option<Arc<DistanceTable>>,
}

/// Forcing-side data shared by the regions of one variant.
struct Shared {
    forcing_basis: Arc<BasisSet>,
    forcing_table: Arc<DistanceTable>,
}

/// Scale both fields as the multivariate basis was built, stack, project.
fn meof_coefficients(forcing: &FieldSeries, response: &FieldSeries, basis: &BasisSet) -> CliResult<DMatrix<f64>> {
    let blocks = &basis.meta().source_rows;
    let scale = |field: SourceField| {
        blocks
            .iter()
            .find(|b| b.field == field)
            .map(|b| b.scale)
            .ok_or_else(|| Error::invalid("basis", "multivariate basis without source blocks"))
    };
    let (nx, ny) = (forcing.n_loc(), response.n_loc());
    let mut values = DMatrix::zeros(nx + ny, forcing.n_time());
    values
        .rows_mut(0, nx)
        .copy_from(&(forcing.values() / scale(SourceField::Forcing)?));
    values
        .rows_mut(nx, ny)
        .copy_from(&(response.values() / scale(SourceField::Response)?));
    let mut coords = forcing.coords().to_vec();
    coords.extend_from_slice(response.coords());
    let stacked = FieldSeries::new(values, coords, forcing.times().to_vec())?;
    Ok(project(&stacked, basis)?.coeffs().clone())
}

/// Lead, forcing coefficients, response basis and named bases to save.
type LeadInputs = (usize, Coefficients, Arc<BasisSet>, Vec<(String, Arc<BasisSet>)>);

/// Bases, coefficient series and models for every region and lead of a
/// variant. Bases only see the training window.
pub fn build_problems(cfg: &RunConfig, data: &Dataset, layout: &Layout, variant: Variant) -> CliResult<Vec<Problem>> {
    let ctx = || format!("variant {}", variant.name());
    let metric = metric(cfg);
    let table = |c: &DMatrix<f64>| -> CliResult<Arc<DistanceTable>> {
        Ok(Arc::new(DistanceTable::new(
            c.clone(),
            cfg.lag,
            cfg.q_min,
            cfg.q_max,
            metric,
        )?))
    };
    let combined = variant == Variant::BA4 || cfg.distance == DistanceKind::Combined;
    let forcing_train = training_window(&data.forcing, layout.last_train)?;
    let shared = match variant {
        Variant::BA1 | Variant::BA4 => {
            let basis = Arc::new(
                compute_eof(&forcing_train, cfg.p_beta)
                    .context(|| "forcing EOF")
                    .context(ctx)?,
            );
            let coeffs = project_shared(&data.forcing, basis.clone())?;
            Some(Shared {
                forcing_table: table(coeffs.coeffs())?,
                forcing_basis: basis,
            })
        }
        _ => None,
    };
    let mut out = Vec::new();
    for region in data.regions.region_ids() {
        let rctx = || format!("variant {} region {region}", variant.name());
        let response = data.response.restrict_region(&data.regions, region)?;
        let response_train = training_window(&response, layout.last_train)?;
        let mut per_lead: Vec<LeadInputs> = Vec::new();
        match (&shared, variant) {
            (Some(s), _) => {
                let rb = Arc::new(
                    compute_eof(&response_train, cfg.p_alpha)
                        .context(|| "response EOF")
                        .context(rctx)?,
                );
                let rc = project_shared(&response, rb.clone())?.coeffs().clone();
                let rt = if combined { Some(table(&rc)?) } else { None };
                let bases = vec![
                    (format!("{}_forcing", variant.name()), s.forcing_basis.clone()),
                    (format!("{}_r{region}_response", variant.name()), rb.clone()),
                ];
                for &lead in &cfg.leads {
                    let c = Coefficients {
                        forcing: s.forcing_table.clone(),
                        response: rc.clone(),
                        response_table: rt.clone(),
                    };
                    per_lead.push((lead, c, rb.clone(), bases.clone()));
                }
            }
            (None, Variant::BA2) => {
                let joint = Arc::new(
                    compute_meof(&forcing_train, &response_train, cfg.p_joint)
                        .context(|| "multivariate EOF")
                        .context(rctx)?,
                );
                let coeffs = meof_coefficients(&data.forcing, &response, &joint)?;
                let rb = Arc::new(joint.block(SourceField::Response)?);
                let ft = table(&coeffs)?;
                let rt = if combined { Some(table(&coeffs)?) } else { None };
                let bases = vec![(format!("BA2_r{region}_joint"), joint.clone())];
                for &lead in &cfg.leads {
                    let c = Coefficients {
                        forcing: ft.clone(),
                        response: coeffs.clone(),
                        response_table: rt.clone(),
                    };
                    per_lead.push((lead, c, rb.clone(), bases.clone()));
                }
            }
            (None, _) => {
                let pre = cfg.cca_pre.min(response.n_loc()).min(data.forcing.n_loc());
                let p = cfg.p_joint.min(pre);
                for &lead in &cfg.leads {
                    let (fb, rb) = compute_cca(&forcing_train, &response_train, lead, pre, p)
                        .context(|| format!("CCA at lead {lead}"))
                        .context(rctx)?;
                    let (fb, rb) = (Arc::new(fb), Arc::new(rb));
                    let fc = project_shared(&data.forcing, fb.clone())?.coeffs().clone();
                    let rc = project_shared(&response, rb.clone())?.coeffs().clone();
                    let c = Coefficients {
                        forcing: table(&fc)?,
                        response_table: if combined { Some(table(&rc)?) } else { None },
                        response: rc,
                    };
                    let bases = vec![
                        (format!("BA3_r{region}_lead{lead}_forcing"), fb),
                        (format!("BA3_r{region}_lead{lead}_response"), rb.clone()),
                    ];
                    per_lead.push((lead, c, rb, bases));
                }
            }
        }
        for (lead, c, response_basis, bases) in per_lead {
            let jctx = || format!("variant {} region {region} lead {lead}", variant.name());
            let index = build_training_index(IndexSpec {
                h: cfg.lag,
                q_max: cfg.q_max,
                start: layout.start,
                last_response: layout.last_train,
                lead,
                exclusion_radius: cfg.exclusion_radius,
                rule: cfg.candidate_rule,
            })
            .context(jctx)?;
            let sample_gamma = c.response_table.is_some();
            let model = AnalogModel::new(c.forcing, c.response, index, cfg.m_max, c.response_table).context(jctx)?;
            out.push(Problem {
                variant,
                region,
                lead,
                model,
                priors: PriorConfig {
                    sample_gamma,
                    ..cfg.priors()
                },
                response_basis,
                bases,
            });
        }
    }
    Ok(out)
}

fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path)
        .map_err(|e| Error::io(path, e))
        .context(|| "output_dir")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("manifest serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e).into())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        Error::Parse {
            path: path.to_path_buf(),
            line: e.line() as u64,
            message: e.to_string(),
        }
        .into()
    })
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::invalid("jobs", e.to_string()))?;
    Ok(pool.install(f))
}

/// Synthetic forcing, response, auxiliary and region files plus a config
/// pointing at them.
pub fn synth(cfg: &RunConfig, out: &Path) -> CliResult<PathBuf> {
    create_dir(out)?;
    let (forcing, response) = generate_synthetic(&cfg.synth_spec()).context(|| "synth")?;
    let n = response.n_time();
    let y = response.values();
    let aux = DMatrix::from_fn(y.nrows(), n, |i, t| 0.5 * (y[(i, t.saturating_sub(1))] + y[(i, t)]));
    let auxiliary = response.with_values(aux)?;
    let regions = block_regions(response.coords(), cfg.synth_regions_lat, cfg.synth_regions_lon)?;
    forcing.write_wide(out.join("forcing.csv"))?;
    response.write_wide(out.join("response.csv"))?;
    auxiliary.write_wide(out.join("auxiliary.csv"))?;
    write_regions(out.join("regions.csv"), response.coords(), &regions)?;
    let mut written = cfg.clone();
    written.forcing = "forcing.csv".into();
    written.response = "response.csv".into();
    written.auxiliary = "auxiliary.csv".into();
    written.regions = "regions.csv".into();
    written.format = crate::config::FileFormat::WideCsv;
    written.output_dir = "out".into();
    // Neighbouring windows of a smooth synthetic path are near-copies of the
    // training target under the Procrustes fit.
    written.exclusion_radius = written.exclusion_radius.max(2 * cfg.synth_coupling_lag);
    let path = out.join("config.toml");
    written.save(&path)?;
    log::info!("wrote synthetic inputs to {}", out.display());
    Ok(path)
}

/// Save every basis the configured variants use.
pub fn write_bases(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let data = load_dataset(cfg)?;
    let layout = Layout::new(cfg, data.response.n_time())?;
    let dir = cfg.output_dir.join("bases");
    create_dir(&dir)?;
    let mut seen = BTreeMap::new();
    for &variant in &cfg.variants {
        for p in build_problems(cfg, &data, &layout, variant)? {
            for (name, basis) in p.bases {
                seen.entry(name).or_insert(basis);
            }
        }
    }
    let mut written = Vec::new();
    for (name, basis) in seen {
        let path = dir.join(format!("{name}.csv"));
        basis.save(&path)?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRecord {
    pub variant: Variant,
    pub region: u32,
    pub lead: usize,
    pub file: String,
    pub seed: u64,
    pub accept_theta1: f64,
    pub accept_m: f64,
    pub accept_q: f64,
    /// Absent when γ is not sampled.
    pub accept_gamma: Option<f64>,
    pub theta1_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainManifest {
    pub config_hash: String,
    pub chains: Vec<ChainRecord>,
}

fn all_problems(cfg: &RunConfig, data: &Dataset, layout: &Layout) -> CliResult<Vec<Problem>> {
    let mut problems = Vec::new();
    for &v in &cfg.variants {
        problems.extend(build_problems(cfg, data, layout, v)?);
    }
    Ok(problems)
}

/// Run one chain per variant, region and lead and write them with a
/// manifest tying them to the config.
pub fn train(cfg: &RunConfig, jobs: usize) -> CliResult<ChainManifest> {
    let data = load_dataset(cfg)?;
    let layout = Layout::new(cfg, data.response.n_time())?;
    let problems = all_problems(cfg, &data, &layout)?;
    let dir = cfg.output_dir.join("chains");
    create_dir(&dir)?;
    let chains: Vec<CliResult<Chain>> = with_pool(jobs, || {
        problems
            .par_iter()
            .map(|p| {
                let chain = run_chain(&p.model, &p.priors, &cfg.chain_config(p.seed(cfg, STAGE_TRAIN)))
                    .context(|| format!("variant {} region {} lead {}", p.variant.name(), p.region, p.lead))?;
                log::info!(
                    "{}: acceptance θ₁ {:.3}, m {:.3}, q {:.3}; mode (m, q) = {:?}",
                    p.name(),
                    chain.acceptance.rate(0),
                    chain.acceptance.rate(1),
                    chain.acceptance.rate(2),
                    chain.mode_mq().unwrap_or_default()
                );
                Ok(chain)
            })
            .collect()
    })?;
    let mut records = Vec::new();
    for (p, chain) in problems.iter().zip(chains) {
        let chain = chain?;
        let file = format!("{}.csv", p.name());
        chain.write_csv(dir.join(&file))?;
        records.push(ChainRecord {
            variant: p.variant,
            region: p.region,
            lead: p.lead,
            file,
            seed: chain.seed,
            accept_theta1: chain.acceptance.rate(0),
            accept_m: chain.acceptance.rate(1),
            accept_q: chain.acceptance.rate(2),
            accept_gamma: p.priors.sample_gamma.then(|| chain.acceptance.rate(3)),
            theta1_sd: chain.theta1_sd,
        });
    }
    let manifest = ChainManifest {
        config_hash: cfg.training_hash(),
        chains: records,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub model: String,
    pub region: u32,
    pub lead: usize,
    /// Whether lower/upper band files exist.
    pub bands: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastManifest {
    pub config_hash: String,
    pub targets: Vec<i64>,
    pub forecasts: Vec<ForecastRecord>,
}

/// Forecast of one model for one region and lead over the hold-out targets.
pub struct RegionForecast {
    pub record: ForecastRecord,
    /// n_loc × targets
    pub mean: DMatrix<f64>,
    pub lower: Option<DMatrix<f64>>,
    pub upper: Option<DMatrix<f64>>,
    /// Region-mean summary per target: mean, lower, upper.
    pub regional: Vec<[f64; 3]>,
    pub draws: Option<DMatrix<f64>>,
}

fn file_stem(model: &str, region: u32, lead: usize) -> String {
    format!("{model}_r{region}_lead{lead}")
}

fn quantile(v: Vec<f64>, p: f64) -> f64 {
    Data::new(v).quantile(p)
}

fn analog_forecast(cfg: &RunConfig, p: &Problem, chain: &Chain, layout: &Layout) -> CliResult<RegionForecast> {
    let n_loc = p.response_basis.n_loc();
    let k = layout.targets.len();
    let mut mean = DMatrix::zeros(n_loc, k);
    let mut lower = DMatrix::zeros(n_loc, k);
    let mut upper = DMatrix::zeros(n_loc, k);
    let mut regional = Vec::with_capacity(k);
    let mut draws = cfg.write_draws.then(Vec::new);
    let seed = p.seed(cfg, STAGE_PREDICT);
    for (j, &target) in layout.targets.iter().enumerate() {
        let predict = PredictConfig {
            thin: cfg.thin,
            draws_per_state: cfg.draws_per_state,
            seed: job_seed(seed, &[target as u64]),
        };
        let f = posterior_predict(chain, &p.model, target - p.lead, &p.response_basis, &predict)
            .context(|| format!("{} target {target}", p.name()))?;
        mean.set_column(j, &f.field_mean);
        lower.set_column(j, &f.field_lower);
        upper.set_column(j, &f.field_upper);
        let area: Vec<f64> = f.field_draws.column_iter().map(|c| c.mean()).collect();
        regional.push([
            f.field_mean.mean(),
            quantile(area.clone(), 0.025),
            quantile(area, 0.975),
        ]);
        if let Some(d) = draws.as_mut() {
            d.push(f.field_draws);
        }
    }
    let draws = draws.map(|d| {
        let cols: Vec<DVector<f64>> = d.iter().flat_map(|m| m.column_iter().map(|c| c.into_owned())).collect();
        DMatrix::from_columns(&cols)
    });
    Ok(RegionForecast {
        record: ForecastRecord {
            model: p.variant.name().to_string(),
            region: p.region,
            lead: p.lead,
            bands: true,
        },
        mean,
        lower: Some(lower),
        upper: Some(upper),
        regional,
        draws,
    })
}

/// Baseline forecasts for every region and lead.
pub fn baseline_forecasts(cfg: &RunConfig, data: &Dataset, layout: &Layout) -> CliResult<Vec<RegionForecast>> {
    if cfg.baselines.is_empty() {
        return Ok(Vec::new());
    }
    let forcing_train = training_window(&data.forcing, layout.last_train)?;
    let fb = compute_eof(&forcing_train, cfg.p_beta).context(|| "baselines: forcing EOF")?;
    let fc = project(&data.forcing, &fb)?.coeffs().clone();
    let mut out = Vec::new();
    for region in data.regions.region_ids() {
        let response = data.response.restrict_region(&data.regions, region)?;
        let rb = compute_eof(&training_window(&response, layout.last_train)?, cfg.p_alpha)
            .context(|| format!("baselines: region {region} response EOF"))?;
        let rc = project(&response, &rb)?.coeffs().clone();
        let aux = match &data.auxiliary {
            Some(a) => Some(a.restrict_region(&data.regions, region)?.values().clone()),
            None => None,
        };
        for &lead in &cfg.leads {
            let input = BaselineInput {
                forcing: &fc,
                response_coeffs: &rc,
                response_field: response.values(),
                basis: rb.matrix(),
                auxiliary: aux.as_ref(),
                last_train: layout.last_train,
                lead,
                step: if cfg.persistence_step == 0 {
                    lead
                } else {
                    cfg.persistence_step
                },
            };
            for &kind in &cfg.baselines {
                if kind == BaselineKind::M7 && (lead != 1 || aux.is_none()) {
                    if region == 1 {
                        log::warn!("M7 skipped at lead {lead}: needs lead 1 and an auxiliary series");
                    }
                    continue;
                }
                let f = baselines::forecast(kind, &input, &layout.targets)
                    .context(|| format!("{} region {region} lead {lead}", kind.name()))?;
                for note in &f.notes {
                    log::info!("{} region {region} lead {lead}: {note}", kind.name());
                }
                let regional = f.values.column_iter().map(|c| [c.mean(), f64::NAN, f64::NAN]).collect();
                out.push(RegionForecast {
                    record: ForecastRecord {
                        model: kind.name().to_string(),
                        region,
                        lead,
                        bands: false,
                    },
                    mean: f.values,
                    lower: None,
                    upper: None,
                    regional,
                    draws: None,
                });
            }
        }
    }
    Ok(out)
}

fn target_times(data: &Dataset, layout: &Layout) -> Vec<i64> {
    layout.targets.iter().map(|&t| data.response.times()[t]).collect()
}

fn write_forecast(dir: &Path, region_field: &FieldSeries, times: &[i64], f: &RegionForecast) -> CliResult<()> {
    let stem = file_stem(&f.record.model, f.record.region, f.record.lead);
    let coords = region_field.coords().to_vec();
    let field = |m: &DMatrix<f64>| FieldSeries::new(m.clone(), coords.clone(), times.to_vec());
    field(&f.mean)?.write_wide(dir.join(format!("{stem}_mean.csv")))?;
    if let (Some(lo), Some(hi)) = (&f.lower, &f.upper) {
        field(lo)?.write_wide(dir.join(format!("{stem}_lower.csv")))?;
        field(hi)?.write_wide(dir.join(format!("{stem}_upper.csv")))?;
    }
    if let Some(d) = &f.draws {
        let labels = (0..d.ncols()).map(|k| k as i64).collect();
        FieldSeries::new(d.clone(), coords.clone(), labels)?.write_wide(dir.join(format!("{stem}_draws.csv")))?;
    }
    let mut text = String::from("time,mean,lower,upper\n");
    for (t, r) in times.iter().zip(&f.regional) {
        let band = |v: f64| if v.is_nan() { String::new() } else { format!("{v:?}") };
        writeln!(text, "{t},{:?},{},{}", r[0], band(r[1]), band(r[2])).expect("string write");
    }
    let path = dir.join(format!("{stem}_regional.csv"));
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn check_hash(cfg: &RunConfig, found: &str, path: &Path) -> CliResult<()> {
    if found != cfg.training_hash() {
        return Err(Error::invalid(
            "config",
            format!(
                "{} was produced with a different configuration; rerun train",
                path.display()
            ),
        )
        .into());
    }
    Ok(())
}

/// Posterior predictive forecasts from trained chains plus baseline
/// forecasts, dumped per model, region and lead.
pub fn forecast(cfg: &RunConfig, jobs: usize) -> CliResult<ForecastManifest> {
    let chain_dir = cfg.output_dir.join("chains");
    let manifest_path = chain_dir.join("manifest.json");
    let manifest: ChainManifest = read_json(&manifest_path)?;
    check_hash(cfg, &manifest.config_hash, &manifest_path)?;
    let data = load_dataset(cfg)?;
    let layout = Layout::new(cfg, data.response.n_time())?;
    let problems = all_problems(cfg, &data, &layout)?;
    let lookup: BTreeMap<(Variant, u32, usize), &ChainRecord> = manifest
        .chains
        .iter()
        .map(|r| ((r.variant, r.region, r.lead), r))
        .collect();
    let analog: Vec<CliResult<RegionForecast>> = with_pool(jobs, || {
        problems
            .par_iter()
            .map(|p| {
                let rec = lookup.get(&(p.variant, p.region, p.lead)).ok_or_else(|| {
                    Error::invalid(
                        "variants",
                        format!("no chain for {} in {}", p.name(), manifest_path.display()),
                    )
                })?;
                let chain = Chain::read_csv(chain_dir.join(&rec.file))?;
                analog_forecast(cfg, p, &chain, &layout)
            })
            .collect()
    })?;
    let mut all = analog.into_iter().collect::<CliResult<Vec<_>>>()?;
    all.extend(baseline_forecasts(cfg, &data, &layout)?);
    let dir = cfg.output_dir.join("forecasts");
    create_dir(&dir)?;
    let times = target_times(&data, &layout);
    let mut records = Vec::new();
    for f in &all {
        let region_field = data.response.restrict_region(&data.regions, f.record.region)?;
        write_forecast(&dir, &region_field, &times, f)?;
        records.push(f.record.clone());
    }
    let out = ForecastManifest {
        config_hash: cfg.training_hash(),
        targets: times,
        forecasts: records,
    };
    write_json(&dir.join("manifest.json"), &out)?;
    Ok(out)
}

fn read_dump(path: &Path, region_field: &FieldSeries, times: &[i64]) -> CliResult<DMatrix<f64>> {
    let f = load_field(path, analog_core::data::FieldFormat::WideCsv)?;
    if f.times() != times || f.coords() != region_field.coords() {
        return Err(Error::Data(format!(
            "{}: locations or hold-out window do not match the response data",
            path.display()
        ))
        .into());
    }
    Ok(f.values().clone())
}

fn read_regional(path: &Path) -> CliResult<Vec<[String; 3]>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .skip(1)
        .map(|l| {
            let mut it = l.split(',').skip(1).map(str::to_string);
            [
                it.next().unwrap_or_default(),
                it.next().unwrap_or_default(),
                it.next().unwrap_or_default(),
            ]
        })
        .collect())
}

/// Score dumped forecasts against the hold-out responses and write the
/// scorecard and per-region time series.
pub fn evaluate(cfg: &RunConfig) -> CliResult<ScoreCard> {
    let dir = cfg.output_dir.join("forecasts");
    let manifest_path = dir.join("manifest.json");
    let manifest: ForecastManifest = read_json(&manifest_path)?;
    let data = load_dataset(cfg)?;
    let layout = Layout::new(cfg, data.response.n_time())?;
    let times = target_times(&data, &layout);
    if manifest.targets != times {
        return Err(Error::Data(format!(
            "{}: hold-out window {:?} does not match the configured one {:?}",
            manifest_path.display(),
            manifest.targets,
            times
        ))
        .into());
    }
    let mut actual = BTreeMap::new();
    for region in data.regions.region_ids() {
        let field = data.response.restrict_region(&data.regions, region)?;
        let cols: Vec<_> = layout
            .targets
            .iter()
            .map(|&t| field.values().column(t).into_owned())
            .collect();
        actual.insert(region, (field, DMatrix::from_columns(&cols)));
    }
    let mut predicted = Vec::with_capacity(manifest.forecasts.len());
    for rec in &manifest.forecasts {
        let (field, _) = actual
            .get(&rec.region)
            .ok_or_else(|| Error::Data(format!("{}: unknown region {}", manifest_path.display(), rec.region)))?;
        let stem = file_stem(&rec.model, rec.region, rec.lead);
        predicted.push(read_dump(&dir.join(format!("{stem}_mean.csv")), field, &times)?);
    }
    let cells: Vec<ScoreInput<'_>> = manifest
        .forecasts
        .iter()
        .zip(&predicted)
        .map(|(rec, pred)| ScoreInput {
            region: rec.region,
            model: rec.model.clone(),
            lead: rec.lead,
            actual: &actual[&rec.region].1,
            predicted: pred,
        })
        .collect();
    let card = scorecard(&cells, cfg.ac_form)?;
    card.write_csv(cfg.output_dir.join("scorecard.csv"))?;

    let ts_dir = cfg.output_dir.join("timeseries");
    create_dir(&ts_dir)?;
    for (&region, (_, act)) in &actual {
        let mut text = String::from("model,lead,time,realized,mean,lower,upper\n");
        for rec in manifest.forecasts.iter().filter(|r| r.region == region) {
            let stem = file_stem(&rec.model, rec.region, rec.lead);
            let regional = read_regional(&dir.join(format!("{stem}_regional.csv")))?;
            for (j, t) in times.iter().enumerate() {
                let r = regional.get(j).cloned().unwrap_or_default();
                writeln!(
                    text,
                    "{},{},{t},{:?},{},{},{}",
                    rec.model,
                    rec.lead,
                    act.column(j).mean(),
                    r[0],
                    r[1],
                    r[2]
                )
                .expect("string write");
            }
        }
        let path = ts_dir.join(format!("region_{region}.csv"));
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(card)
}

/// Train, forecast and evaluate in one go.
pub fn compare(cfg: &RunConfig, jobs: usize) -> CliResult<ScoreCard> {
    train(cfg, jobs).context(|| "train")?;
    forecast(cfg, jobs).context(|| "forecast")?;
    evaluate(cfg).context(|| "evaluate")
}
