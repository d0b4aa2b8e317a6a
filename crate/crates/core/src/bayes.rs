//! Bayesian analog model and its Metropolis-within-Gibbs sampler.
//!
//! The response coefficients at training period `t` are modelled as
//! `α_{t+τ} = Σ_ℓ w(B_t, B_ℓ; θ₁, m) α_{ℓ+τ} + ε`, `ε ~ N(0, σ² I)`, with
//! priors `m ~ DU(m_min, m_max)`, `q ~ DU(q_min, q_max)`, `θ₁ ~ IG`,
//! `σ² ~ IG` and, for the two-field distance, `γ ~ Unif(0, 1)`.

mod model;
mod predict;

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use model::{AnalogModel, DistanceTable, Metric};
pub use predict::{posterior_predict, ForecastDistribution, PredictConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub m_min: usize,
    pub m_max: usize,
    pub q_min: usize,
    pub q_max: usize,
    pub theta1_shape: f64,
    pub theta1_rate: f64,
    pub sigma2_shape: f64,
    pub sigma2_rate: f64,
    /// Sample the two-field weight γ.
    pub sample_gamma: bool,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            m_min: 1,
            m_max: 15,
            q_min: 2,
            q_max: 24,
            theta1_shape: 2.0,
            theta1_rate: 1.0,
            sigma2_shape: 0.001,
            sigma2_rate: 0.001,
            sample_gamma: false,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_min < 1 || self.m_max < self.m_min {
            return Err(Error::invalid(
                "m_min",
                format!("need 1 ≤ m_min ≤ m_max, got [{}, {}]", self.m_min, self.m_max),
            ));
        }
        if self.q_min < 2 || self.q_max < self.q_min {
            return Err(Error::invalid(
                "q_min",
                format!("need 2 ≤ q_min ≤ q_max, got [{}, {}]", self.q_min, self.q_max),
            ));
        }
        for (name, v) in [
            ("theta1_shape", self.theta1_shape),
            ("theta1_rate", self.theta1_rate),
            ("sigma2_shape", self.sigma2_shape),
            ("sigma2_rate", self.sigma2_rate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, format!("must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Inverse-gamma log density of θ₁ up to a constant.
    pub fn log_prior_theta1(&self, theta1: f64) -> f64 {
        -(self.theta1_shape + 1.0) * theta1.ln() - self.theta1_rate / theta1
    }

    pub fn log_prior_sigma2(&self, sigma2: f64) -> f64 {
        -(self.sigma2_shape + 1.0) * sigma2.ln() - self.sigma2_rate / sigma2
    }

    pub fn contains(&self, s: &ModelState) -> bool {
        s.theta1 > 0.0
            && s.sigma2 > 0.0
            && (self.m_min..=self.m_max).contains(&s.m)
            && (self.q_min..=self.q_max).contains(&s.q)
            && s.gamma.is_some() == self.sample_gamma
            && s.gamma.is_none_or(|g| (0.0..=1.0).contains(&g))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub theta1: f64,
    pub m: usize,
    pub q: usize,
    pub sigma2: f64,
    pub gamma: Option<f64>,
}

/// Residual sum of squares of the analog mean over the training periods.
pub trait Likelihood: Sync {
    /// Number of scalar observations, N_tr · p_α.
    fn n_obs(&self) -> usize;
    fn ssr(&self, state: &ModelState) -> Result<f64>;
}

/// Isotropic Gaussian log likelihood from a residual sum of squares.
pub fn gaussian_log_likelihood(ssr: f64, n_obs: usize, sigma2: f64) -> f64 {
    let n = n_obs as f64;
    -0.5 * n * (2.0 * std::f64::consts::PI * sigma2).ln() - 0.5 * ssr / sigma2
}

pub fn log_likelihood<L: Likelihood + ?Sized>(lik: &L, state: &ModelState) -> Result<f64> {
    let ll = gaussian_log_likelihood(lik.ssr(state)?, lik.n_obs(), state.sigma2);
    if !ll.is_finite() {
        return Err(Error::Numeric(format!("non-finite log likelihood at {state:?}")));
    }
    Ok(ll)
}

/// Proposal for the integer parameters m and q.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntegerProposal {
    /// ±1 step; a step out of bounds proposes the current value.
    RandomWalk,
    /// Uniform over the whole prior support.
    Uniform,
    /// Random walk or uniform with probability 1/2 each.
    #[default]
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Initial sd of the random walk on log θ₁.
    pub theta1_sd: f64,
    /// Tune `theta1_sd` towards `target_accept` during burn-in.
    pub adapt: bool,
    pub target_accept: f64,
    pub integer_proposal: IntegerProposal,
    /// Half-width of the reflected uniform step for γ.
    pub gamma_width: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            theta1_sd: 0.3,
            adapt: true,
            target_accept: 0.44,
            integer_proposal: IntegerProposal::Mixed,
            gamma_width: 0.2,
        }
    }
}

/// Accept/propose counts for θ₁, m, q and γ.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Acceptance {
    pub accepted: [u64; 4],
    pub proposed: [u64; 4],
}

impl Acceptance {
    pub const THETA1: usize = 0;
    pub const M: usize = 1;
    pub const Q: usize = 2;
    pub const GAMMA: usize = 3;

    pub fn rate(&self, k: usize) -> f64 {
        if self.proposed[k] == 0 {
            f64::NAN
        } else {
            self.accepted[k] as f64 / self.proposed[k] as f64
        }
    }

    fn record(&mut self, k: usize, accepted: bool) {
        self.proposed[k] += 1;
        self.accepted[k] += accepted as u64;
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepDiagnostics {
    pub accepted: [Option<bool>; 4],
    pub ssr: f64,
    pub log_post: f64,
}

/// Metropolis test for a log acceptance ratio.
pub fn metropolis_accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio
}

/// Log acceptance ratio of moving θ₁ from `current` to `proposed` under a
/// random walk on log θ₁, including the Jacobian of the log transform.
pub fn theta1_log_ratio(priors: &PriorConfig, current: f64, proposed: f64, delta_loglik: f64) -> f64 {
    delta_loglik + priors.log_prior_theta1(proposed) - priors.log_prior_theta1(current) + proposed.ln() - current.ln()
}

/// Conjugate draw of σ² from IG(a + n/2, b + ssr/2).
pub fn draw_sigma2<R: Rng + ?Sized>(priors: &PriorConfig, ssr: f64, n_obs: usize, rng: &mut R) -> Result<f64> {
    let shape = priors.sigma2_shape + 0.5 * n_obs as f64;
    let rate = priors.sigma2_rate + 0.5 * ssr;
    let g = Gamma::new(shape, 1.0 / rate).map_err(|e| Error::Numeric(format!("σ² full conditional: {e}")))?;
    Ok(1.0 / g.sample(rng))
}

fn propose_integer<R: Rng + ?Sized>(current: usize, lo: usize, hi: usize, kind: IntegerProposal, rng: &mut R) -> usize {
    match kind {
        IntegerProposal::Uniform => rng.random_range(lo..=hi),
        IntegerProposal::RandomWalk => {
            let up = rng.random::<bool>();
            match (up, current) {
                (true, c) if c < hi => c + 1,
                (false, c) if c > lo => c - 1,
                (_, c) => c,
            }
        }
        IntegerProposal::Mixed => {
            let kind = if rng.random::<bool>() {
                IntegerProposal::Uniform
            } else {
                IntegerProposal::RandomWalk
            };
            propose_integer(current, lo, hi, kind, rng)
        }
    }
}

fn reflect_unit(mut x: f64) -> f64 {
    loop {
        if x < 0.0 {
            x = -x;
        } else if x > 1.0 {
            x = 2.0 - x;
        } else {
            return x;
        }
    }
}

/// Log posterior up to a constant.
pub fn log_posterior(priors: &PriorConfig, state: &ModelState, ssr: f64, n_obs: usize) -> f64 {
    gaussian_log_likelihood(ssr, n_obs, state.sigma2)
        + priors.log_prior_theta1(state.theta1)
        + priors.log_prior_sigma2(state.sigma2)
}

/// One Metropolis-within-Gibbs sweep: σ², θ₁, m, q, then γ.
///
/// `ssr` is the residual sum of squares at `state`; the returned
/// diagnostics carry it for the new state.
pub fn mwg_step<L: Likelihood + ?Sized, R: Rng + ?Sized>(
    state: &ModelState,
    ssr: f64,
    lik: &L,
    priors: &PriorConfig,
    config: &SamplerConfig,
    theta1_sd: f64,
    rng: &mut R,
) -> Result<(ModelState, StepDiagnostics)> {
    let n = lik.n_obs();
    let mut s = *state;
    let mut ssr = ssr;
    let mut accepted = [None; 4];

    s.sigma2 = draw_sigma2(priors, ssr, n, rng)?;
    let ll = |r: f64, sigma2: f64| gaussian_log_likelihood(r, n, sigma2);

    let step = Normal::new(0.0, theta1_sd.max(0.0)).map_err(|e| Error::Numeric(e.to_string()))?;
    let mut proposal = s;
    proposal.theta1 = s.theta1 * step.sample(rng).exp();
    let ok = if proposal.theta1 == s.theta1 {
        true
    } else {
        let r = lik.ssr(&proposal)?;
        let ratio = theta1_log_ratio(priors, s.theta1, proposal.theta1, ll(r, s.sigma2) - ll(ssr, s.sigma2));
        let ok = metropolis_accept(ratio, rng);
        if ok {
            s = proposal;
            ssr = r;
        }
        ok
    };
    accepted[Acceptance::THETA1] = Some(ok);

    for k in [Acceptance::M, Acceptance::Q] {
        let mut proposal = s;
        let (cur, lo, hi) = if k == Acceptance::M {
            (s.m, priors.m_min, priors.m_max)
        } else {
            (s.q, priors.q_min, priors.q_max)
        };
        let next = propose_integer(cur, lo, hi, config.integer_proposal, rng);
        if next == cur {
            accepted[k] = Some(true);
            continue;
        }
        if k == Acceptance::M {
            proposal.m = next;
        } else {
            proposal.q = next;
        }
        let r = lik.ssr(&proposal)?;
        let ok = metropolis_accept(ll(r, s.sigma2) - ll(ssr, s.sigma2), rng);
        if ok {
            s = proposal;
            ssr = r;
        }
        accepted[k] = Some(ok);
    }

    if let Some(g) = s.gamma {
        let mut proposal = s;
        let next = reflect_unit(g + rng.random_range(-1.0..=1.0) * config.gamma_width);
        proposal.gamma = Some(next);
        let ok = if next == g {
            true
        } else {
            let r = lik.ssr(&proposal)?;
            let ok = metropolis_accept(ll(r, s.sigma2) - ll(ssr, s.sigma2), rng);
            if ok {
                s = proposal;
                ssr = r;
            }
            ok
        };
        accepted[Acceptance::GAMMA] = Some(ok);
    }

    let log_post = log_posterior(priors, &s, ssr, n);
    if !log_post.is_finite() {
        return Err(Error::Numeric(format!("non-finite log posterior at {s:?}")));
    }
    Ok((
        s,
        StepDiagnostics {
            accepted,
            ssr,
            log_post,
        },
    ))
}

/// Deterministic starting point: θ₁ at its prior mode, m and q at the
/// middle of their ranges, γ = 1/2 and σ² at the residual mean square.
pub fn initial_state<L: Likelihood + ?Sized>(lik: &L, priors: &PriorConfig) -> Result<ModelState> {
    let mut s = ModelState {
        theta1: priors.theta1_rate / (priors.theta1_shape + 1.0),
        m: (priors.m_min + priors.m_max) / 2,
        q: (priors.q_min + priors.q_max) / 2,
        sigma2: 1.0,
        gamma: priors.sample_gamma.then_some(0.5),
    };
    let ssr = lik.ssr(&s)?;
    s.sigma2 = (ssr / lik.n_obs().max(1) as f64).max(1e-12);
    Ok(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    /// Post-burn-in states, in order.
    pub states: Vec<ModelState>,
    pub log_post: Vec<f64>,
    pub acceptance: Acceptance,
    pub seed: u64,
    pub iterations: usize,
    pub burn_in: usize,
    /// Proposal sd for log θ₁ after burn-in.
    pub theta1_sd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub sampler: SamplerConfig,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            iterations: 5000,
            burn_in: 500,
            seed: 1,
            sampler: SamplerConfig::default(),
        }
    }
}

const ADAPT_BATCH: usize = 50;

pub fn run_chain<L: Likelihood + ?Sized>(lik: &L, priors: &PriorConfig, config: &ChainConfig) -> Result<Chain> {
    run_chain_from(lik, priors, config, None)
}

/// As [`run_chain`], optionally from a given starting state.
pub fn run_chain_from<L: Likelihood + ?Sized>(
    lik: &L,
    priors: &PriorConfig,
    config: &ChainConfig,
    start: Option<ModelState>,
) -> Result<Chain> {
    priors.validate()?;
    if config.iterations <= config.burn_in {
        return Err(Error::invalid(
            "iterations",
            format!("{} must exceed burn_in = {}", config.iterations, config.burn_in),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = match start {
        Some(s) => s,
        None => initial_state(lik, priors)?,
    };
    if !priors.contains(&state) {
        return Err(Error::invalid("start", format!("{state:?} outside the prior support")));
    }
    let mut ssr = lik.ssr(&state)?;
    let mut sd = config.sampler.theta1_sd;
    let mut acceptance = Acceptance::default();
    let mut batch_accepts = 0usize;
    let retained = config.iterations - config.burn_in;
    let mut states = Vec::with_capacity(retained);
    let mut log_post = Vec::with_capacity(retained);
    for iter in 0..config.iterations {
        let (next, diag) = mwg_step(&state, ssr, lik, priors, &config.sampler, sd, &mut rng)?;
        for (k, a) in diag.accepted.iter().enumerate() {
            if let Some(a) = a {
                acceptance.record(k, *a);
            }
        }
        state = next;
        ssr = diag.ssr;
        if iter < config.burn_in {
            if config.sampler.adapt {
                batch_accepts += usize::from(diag.accepted[Acceptance::THETA1] == Some(true));
                if (iter + 1) % ADAPT_BATCH == 0 {
                    let rate = batch_accepts as f64 / ADAPT_BATCH as f64;
                    sd = (sd * (rate - config.sampler.target_accept).exp()).clamp(0.01, 5.0);
                    batch_accepts = 0;
                }
            }
        } else {
            states.push(state);
            log_post.push(diag.log_post);
        }
    }
    log::debug!(
        "chain seed {}: acceptance θ₁ {:.3}, m {:.3}, q {:.3}",
        config.seed,
        acceptance.rate(Acceptance::THETA1),
        acceptance.rate(Acceptance::M),
        acceptance.rate(Acceptance::Q)
    );
    Ok(Chain {
        states,
        log_post,
        acceptance,
        seed: config.seed,
        iterations: config.iterations,
        burn_in: config.burn_in,
        theta1_sd: sd,
    })
}

const CHAIN_HEADER: [&str; 7] = ["iter", "theta1", "m", "q", "sigma2", "gamma", "log_post"];

impl Chain {
    /// Most frequent (m, q) pair among the retained states; ties go to the
    /// smaller pair.
    pub fn mode_mq(&self) -> Option<(usize, usize)> {
        let mut counts = std::collections::BTreeMap::new();
        for s in &self.states {
            *counts.entry((s.m, s.q)).or_insert(0usize) += 1;
        }
        let best = counts.values().copied().max()?;
        counts.into_iter().find(|&(_, c)| c == best).map(|(k, _)| k)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "{}", CHAIN_HEADER.join(",")).map_err(io)?;
        for (k, (s, lp)) in self.states.iter().zip(&self.log_post).enumerate() {
            let gamma = s.gamma.map(|g| format!("{g:?}")).unwrap_or_default();
            writeln!(
                w,
                "{},{:?},{},{},{:?},{},{:?}",
                self.burn_in + k + 1,
                s.theta1,
                s.m,
                s.q,
                s.sigma2,
                gamma,
                lp
            )
            .map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Read states written by [`Chain::write_csv`]. Acceptance counts and
    /// the seed are not stored in the file and come back zeroed.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Chain> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: e.to_string(),
            })?
            .iter()
            .map(str::to_owned)
            .collect();
        if header != CHAIN_HEADER {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("expected header {}", CHAIN_HEADER.join(",")),
            });
        }
        let mut states = Vec::new();
        let mut log_post = Vec::new();
        let mut first_iter = None;
        let mut last_iter = 0usize;
        for (k, rec) in rdr.records().enumerate() {
            let line = k as u64 + 2;
            let bad = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line,
                message,
            };
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let field = |i: usize| rec.get(i).unwrap_or("").trim();
            let num = |i: usize| -> Result<f64> {
                field(i)
                    .parse::<f64>()
                    .map_err(|e| bad(format!("column {}: {e}", CHAIN_HEADER[i])))
            };
            let int = |i: usize| -> Result<usize> {
                field(i)
                    .parse::<usize>()
                    .map_err(|e| bad(format!("column {}: {e}", CHAIN_HEADER[i])))
            };
            let iter = int(0)?;
            first_iter.get_or_insert(iter);
            last_iter = iter;
            states.push(ModelState {
                theta1: num(1)?,
                m: int(2)?,
                q: int(3)?,
                sigma2: num(4)?,
                gamma: if field(5).is_empty() { None } else { Some(num(5)?) },
            });
            log_post.push(num(6)?);
        }
        let burn_in = first_iter.map_or(0, |f| f.saturating_sub(1));
        Ok(Chain {
            states,
            log_post,
            acceptance: Acceptance::default(),
            seed: 0,
            iterations: last_iter,
            burn_in,
            theta1_sd: f64::NAN,
        })
    }
}

#[cfg(test)]
mod tests;
