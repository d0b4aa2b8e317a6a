//! Flat key-value run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use analog_core::baselines::BaselineKind;
use analog_core::bayes::{ChainConfig, IntegerProposal, PriorConfig, SamplerConfig};
use analog_core::data::{FieldFormat, SynthSpec};
use analog_core::embedding::CandidateRule;
use analog_core::eval::AcForm;
use analog_core::metric::{Normalizer, ProcrustesConfig, ScaleDenominator};
use analog_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Separate EOF bases.
    BA1,
    /// Multivariate EOF basis.
    BA2,
    /// CCA bases.
    BA3,
    /// Separate EOF bases with the two-field distance.
    BA4,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::BA1 => "BA1",
            Variant::BA2 => "BA2",
            Variant::BA3 => "BA3",
            Variant::BA4 => "BA4",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "BA1" => Ok(Variant::BA1),
            "BA2" => Ok(Variant::BA2),
            "BA3" => Ok(Variant::BA3),
            "BA4" => Ok(Variant::BA4),
            _ => Err(Error::invalid("variants", format!("unknown variant {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    Euclidean,
    Procrustes,
    /// Procrustes on both fields, mixed by a sampled weight γ.
    Combined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FileFormat {
    WideCsv,
    LongCsv,
}

impl From<FileFormat> for FieldFormat {
    fn from(f: FileFormat) -> Self {
        match f {
            FileFormat::WideCsv => FieldFormat::WideCsv,
            FileFormat::LongCsv => FieldFormat::LongCsv,
        }
    }
}

/// Every run setting. Relative paths resolve against the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub forcing: PathBuf,
    pub response: PathBuf,
    /// Optional auxiliary series on the response grid (empty for none).
    pub auxiliary: PathBuf,
    /// Optional region file (empty for a single region).
    pub regions: PathBuf,
    pub format: FileFormat,
    pub output_dir: PathBuf,

    /// Subtract a climatology before fitting.
    pub anomalies: bool,
    pub clim_start: i64,
    pub clim_end: i64,
    pub by_period: i64,

    pub variants: Vec<Variant>,
    pub baselines: Vec<BaselineKind>,
    pub distance: DistanceKind,
    pub procrustes_scale: ScaleDenominator,
    pub procrustes_normalizer: Normalizer,
    pub p_alpha: usize,
    pub p_beta: usize,
    /// Basis size for the multivariate EOF and CCA variants.
    pub p_joint: usize,
    /// EOF truncation before CCA.
    pub cca_pre: usize,

    pub lag: usize,
    pub leads: Vec<usize>,
    /// Number of final time points held out for evaluation.
    pub holdout: usize,
    /// First training position; negative means the earliest allowed.
    pub train_start: i64,
    pub candidate_rule: CandidateRule,
    pub exclusion_radius: usize,
    /// Lag of the autoregressive and persistence baselines; 0 means the lead.
    pub persistence_step: usize,

    pub m_min: usize,
    pub m_max: usize,
    pub q_min: usize,
    pub q_max: usize,
    pub theta1_shape: f64,
    pub theta1_rate: f64,
    pub sigma2_shape: f64,
    pub sigma2_rate: f64,

    pub iterations: usize,
    pub burn_in: usize,
    pub theta1_sd: f64,
    pub adapt: bool,
    pub integer_proposal: IntegerProposal,
    pub gamma_width: f64,
    pub thin: usize,
    pub draws_per_state: usize,
    pub write_draws: bool,
    pub ac_form: AcForm,
    pub seed: u64,

    pub synth_n_loc_forcing: usize,
    pub synth_n_loc_response: usize,
    pub synth_n_time: usize,
    pub synth_coupling_lag: usize,
    pub synth_nonlinearity: f64,
    pub synth_noise_sd: f64,
    pub synth_regions_lat: usize,
    pub synth_regions_lon: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthSpec::default();
        let priors = PriorConfig::default();
        let chain = ChainConfig::default();
        let sampler = SamplerConfig::default();
        RunConfig {
            forcing: "forcing.csv".into(),
            response: "response.csv".into(),
            auxiliary: PathBuf::new(),
            regions: PathBuf::new(),
            format: FileFormat::WideCsv,
            output_dir: "out".into(),
            anomalies: false,
            clim_start: 0,
            clim_end: 0,
            by_period: 1,
            variants: vec![Variant::BA1],
            baselines: vec![
                BaselineKind::M1,
                BaselineKind::M2,
                BaselineKind::M3,
                BaselineKind::M4,
                BaselineKind::M5,
                BaselineKind::M6,
            ],
            distance: DistanceKind::Procrustes,
            procrustes_scale: ScaleDenominator::Centered,
            procrustes_normalizer: Normalizer::Target,
            p_alpha: 5,
            p_beta: 12,
            p_joint: 12,
            cca_pre: 12,
            lag: 1,
            leads: vec![1, 3, 6],
            holdout: 40,
            train_start: -1,
            candidate_rule: CandidateRule::TwoSided,
            exclusion_radius: 0,
            persistence_step: 0,
            m_min: priors.m_min,
            m_max: priors.m_max,
            q_min: priors.q_min,
            q_max: priors.q_max,
            theta1_shape: priors.theta1_shape,
            theta1_rate: priors.theta1_rate,
            sigma2_shape: priors.sigma2_shape,
            sigma2_rate: priors.sigma2_rate,
            iterations: chain.iterations,
            burn_in: chain.burn_in,
            theta1_sd: sampler.theta1_sd,
            adapt: sampler.adapt,
            integer_proposal: sampler.integer_proposal,
            gamma_width: sampler.gamma_width,
            thin: 5,
            draws_per_state: 1,
            write_draws: false,
            ac_form: AcForm::Sqrt,
            seed: 1,
            synth_n_loc_forcing: synth.n_loc_forcing,
            synth_n_loc_response: synth.n_loc_response,
            synth_n_time: synth.n_time,
            synth_coupling_lag: synth.coupling_lag,
            synth_nonlinearity: synth.nonlinearity,
            synth_noise_sd: synth.noise_sd,
            synth_regions_lat: 3,
            synth_regions_lon: 3,
        }
    }
}

impl RunConfig {
    /// Parse TOML text; unknown keys and bad values name the key.
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let key = e.span().map(|s| text[s].trim().to_string()).unwrap_or_default();
            Error::invalid("config", format!("{} {key}", e.message()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a config file, resolving relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::from_toml(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.forcing,
            &mut self.response,
            &mut self.auxiliary,
            &mut self.regions,
            &mut self.output_dir,
        ] {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.priors().validate()?;
        let positive = [
            ("p_alpha", self.p_alpha),
            ("p_beta", self.p_beta),
            ("p_joint", self.p_joint),
            ("cca_pre", self.cca_pre),
            ("holdout", self.holdout),
            ("thin", self.thin),
            ("draws_per_state", self.draws_per_state),
            ("by_period", self.by_period.max(0) as usize),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::invalid(key, "must be positive"));
            }
        }
        if self.p_joint > self.cca_pre && self.variants.contains(&Variant::BA3) {
            return Err(Error::invalid("p_joint", "must not exceed cca_pre for BA3"));
        }
        if self.leads.is_empty() || self.leads.contains(&0) {
            return Err(Error::invalid("leads", "need at least one lead, all positive"));
        }
        if self.variants.is_empty() && self.baselines.is_empty() {
            return Err(Error::invalid("variants", "nothing to run"));
        }
        if self.baselines.contains(&BaselineKind::M8) {
            return Err(Error::Unavailable("baselines: M8 (random forest)"));
        }
        if self.iterations <= self.burn_in {
            return Err(Error::invalid("iterations", "must exceed burn_in"));
        }
        if self.theta1_sd < 0.0 || self.theta1_sd.is_nan() {
            return Err(Error::invalid("theta1_sd", "must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.gamma_width) {
            return Err(Error::invalid("gamma_width", "must lie in [0, 1]"));
        }
        if self.anomalies && self.clim_end < self.clim_start {
            return Err(Error::invalid("clim_end", "climatology window is empty"));
        }
        Ok(())
    }

    pub fn priors(&self) -> PriorConfig {
        PriorConfig {
            m_min: self.m_min,
            m_max: self.m_max,
            q_min: self.q_min,
            q_max: self.q_max,
            theta1_shape: self.theta1_shape,
            theta1_rate: self.theta1_rate,
            sigma2_shape: self.sigma2_shape,
            sigma2_rate: self.sigma2_rate,
            sample_gamma: false,
        }
    }

    pub fn chain_config(&self, seed: u64) -> ChainConfig {
        ChainConfig {
            iterations: self.iterations,
            burn_in: self.burn_in,
            seed,
            sampler: SamplerConfig {
                theta1_sd: self.theta1_sd,
                adapt: self.adapt,
                integer_proposal: self.integer_proposal,
                gamma_width: self.gamma_width,
                ..SamplerConfig::default()
            },
        }
    }

    pub fn procrustes(&self) -> ProcrustesConfig {
        ProcrustesConfig {
            scale: self.procrustes_scale,
            normalizer: self.procrustes_normalizer,
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            n_loc_forcing: self.synth_n_loc_forcing,
            n_loc_response: self.synth_n_loc_response,
            n_time: self.synth_n_time,
            coupling_lag: self.synth_coupling_lag,
            nonlinearity: self.synth_nonlinearity,
            noise_sd: self.synth_noise_sd,
            seed: self.seed,
            embedding_extent: self.lag * (self.q_max - 1) + 1,
        }
    }

    /// Digest of every setting that affects training, used to tie chain
    /// files to the config that produced them.
    pub fn training_hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.baselines.clear();
        c.write_draws = false;
        c.ac_form = AcForm::Sqrt;
        c.thin = 0;
        c.draws_per_state = 0;
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
