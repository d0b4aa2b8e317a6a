use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::*;
use crate::basis::{BasisKind, BasisMeta, BasisSet};
use crate::data::Coord;
use crate::embedding::{build_training_index, CandidateRule, IndexSpec};

struct Flat {
    n: usize,
    ssr: f64,
}

impl Likelihood for Flat {
    fn n_obs(&self) -> usize {
        self.n
    }
    fn ssr(&self, _: &ModelState) -> Result<f64> {
        Ok(self.ssr)
    }
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn index(start: usize, last_response: usize, lead: usize, q_max: usize) -> TrainingIndex {
    build_training_index(IndexSpec {
        h: 1,
        q_max,
        start,
        last_response,
        lead,
        exclusion_radius: 0,
        rule: CandidateRule::TwoSided,
    })
    .unwrap()
}

use crate::embedding::TrainingIndex;

fn small_model(seed: u64, metric: Metric, two_field: bool) -> AnalogModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = random(2, 60, &mut rng);
    let alpha = random(2, 60, &mut rng);
    let table = Arc::new(DistanceTable::new(beta, 1, 2, 4, metric).unwrap());
    let rt = two_field.then(|| Arc::new(DistanceTable::new(alpha.clone(), 1, 2, 4, metric).unwrap()));
    AnalogModel::new(table, alpha, index(3, 50, 2, 4), 6, rt).unwrap()
}

fn state(theta1: f64, m: usize, q: usize, sigma2: f64) -> ModelState {
    ModelState {
        theta1,
        m,
        q,
        sigma2,
        gamma: None,
    }
}

#[test]
fn zero_residual_log_likelihood() {
    let n = 7 * 3;
    let ll = gaussian_log_likelihood(0.0, n, 1.0);
    assert!((ll + 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    let doubled = gaussian_log_likelihood(0.0, n, 2.0);
    assert!((ll - doubled - 0.5 * n as f64 * 2f64.ln()).abs() < 1e-12);
}

#[test]
fn log_likelihood_matches_density_sum() {
    use statrs::distribution::{Continuous, Normal as SNormal};
    for metric in [Metric::Euclidean, Metric::default()] {
        let model = small_model(3, metric, false);
        let s = state(0.4, 3, 3, 0.7);
        let idx = model.index();
        let mut direct = 0.0;
        for (i, &t) in idx.periods().iter().enumerate() {
            let mean = model.analog_mean(&s, t, idx.candidates(i)).unwrap();
            let y = model.responses().column(t + idx.lead());
            for k in 0..model.p() {
                direct += SNormal::new(mean[k], s.sigma2.sqrt()).unwrap().ln_pdf(y[k]);
            }
        }
        let ll = log_likelihood(&model, &s).unwrap();
        assert!((ll - direct).abs() < 1e-10, "{ll} vs {direct}");
    }
}

#[test]
fn analog_mean_single_neighbour() {
    let model = small_model(4, Metric::default(), false);
    let cands = model.index().candidates(5).to_vec();
    let t = model.index().periods()[5];
    let s = state(0.3, 1, 2, 1.0);
    let d: Vec<f64> = cands
        .iter()
        .map(|&c| model.forcing().distance(2, t, c).unwrap())
        .collect();
    let best = (0..d.len()).min_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap();
    let mean = model.analog_mean(&s, t, &cands).unwrap();
    assert_eq!(mean, model.responses().column(cands[best] + 2).into_owned());
}

#[test]
fn analog_mean_matches_hand_weights() {
    let model = small_model(5, Metric::Euclidean, false);
    let t = 30;
    let cands = [4, 9, 17, 22, 41];
    let s = state(0.8, 5, 3, 1.0);
    let mut expect = DVector::zeros(2);
    let mut total = 0.0;
    for &c in &cands {
        let d = model.forcing().distance(3, t, c).unwrap();
        let w = (-d * d / (2.0 * 0.8)).exp();
        total += w;
        expect += model.responses().column(c + 2) * w;
    }
    expect /= total;
    let got = model.analog_mean(&s, t, &cands).unwrap();
    assert!((got - expect).amax() < 1e-12);
}

#[test]
fn identical_embeddings_average_their_responses() {
    let beta = DMatrix::from_fn(2, 30, |i, _| i as f64 + 1.0);
    let alpha = DMatrix::from_fn(1, 30, |_, t| t as f64);
    let table = Arc::new(DistanceTable::new(beta, 1, 2, 3, Metric::Euclidean).unwrap());
    let model = AnalogModel::new(table, alpha, index(2, 25, 1, 3), 4, None).unwrap();
    let cands = [3, 5, 8, 13];
    let mean = model.analog_mean(&state(0.5, 4, 2, 1.0), 20, &cands).unwrap();
    let expect = cands.iter().map(|&c| (c + 1) as f64).sum::<f64>() / 4.0;
    assert!((mean[0] - expect).abs() < 1e-12);
}

#[test]
fn cached_ssr_matches_public_path() {
    for two_field in [false, true] {
        let model = small_model(6, Metric::default(), two_field);
        let mut s = state(0.25, 4, 4, 1.0);
        if two_field {
            s.gamma = Some(0.3);
        }
        let idx = model.index();
        let mut direct = 0.0;
        for (i, &t) in idx.periods().iter().enumerate() {
            let mean = model.analog_mean(&s, t, idx.candidates(i)).unwrap();
            direct += (model.responses().column(t + idx.lead()) - mean).norm_squared();
        }
        let fast = model.ssr(&s).unwrap();
        assert!((fast - direct).abs() < 1e-10 * direct.max(1.0));
    }
}

#[test]
fn forecast_mean_ignores_candidate_order() {
    let model = small_model(7, Metric::default(), false);
    let s = state(0.5, 5, 3, 1.0);
    let mut cands = model.index().forecast_candidates(55);
    let a = model.analog_mean(&s, 55, &cands).unwrap();
    cands.reverse();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in (1..cands.len()).rev() {
        cands.swap(i, rng.random_range(0..=i));
    }
    let b = model.analog_mean(&s, 55, &cands).unwrap();
    assert!((a - b).amax() < 1e-15);
}

#[test]
fn zero_proposal_sd_always_accepts() {
    let model = small_model(8, Metric::default(), false);
    let priors = PriorConfig {
        m_min: 3,
        m_max: 3,
        q_min: 2,
        q_max: 2,
        ..PriorConfig::default()
    };
    let s = state(0.5, 3, 2, 1.0);
    let ssr = model.ssr(&s).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (next, diag) = mwg_step(&s, ssr, &model, &priors, &SamplerConfig::default(), 0.0, &mut rng).unwrap();
    assert_eq!(diag.accepted[0..3], [Some(true); 3]);
    assert_eq!((next.theta1, next.m, next.q), (s.theta1, s.m, s.q));
    assert!((diag.ssr - ssr).abs() == 0.0);
}

#[test]
fn theta1_acceptance_matches_prior_ratio() {
    let priors = PriorConfig::default();
    let (cur, prop) = (0.5, 6.0);
    let ratio = theta1_log_ratio(&priors, cur, prop, 0.0);
    let expected = ratio.exp().min(1.0);
    let analytic = {
        let ig = |x: f64| x.powf(-3.0) * (-1.0 / x).exp();
        ig(prop) * prop / (ig(cur) * cur)
    };
    assert!((expected - analytic.min(1.0)).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let trials = 10_000;
    let hits = (0..trials).filter(|_| metropolis_accept(ratio, &mut rng)).count();
    let rate = hits as f64 / trials as f64;
    let se = (expected * (1.0 - expected) / trials as f64).sqrt();
    assert!((rate - expected).abs() < 4.0 * se, "{rate} vs {expected}");
}

fn chi_square_p(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    let e = n as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat)
}

#[test]
fn flat_likelihood_recovers_integer_priors() {
    let lik = Flat { n: 10, ssr: 3.0 };
    let priors = PriorConfig {
        m_max: 6,
        q_max: 5,
        ..PriorConfig::default()
    };
    for kind in [
        IntegerProposal::Uniform,
        IntegerProposal::Mixed,
        IntegerProposal::RandomWalk,
    ] {
        let sampler = SamplerConfig {
            integer_proposal: kind,
            ..SamplerConfig::default()
        };
        let cfg = ChainConfig {
            iterations: 8000,
            burn_in: 100,
            seed: 3,
            sampler,
        };
        let chain = run_chain(&lik, &priors, &cfg).unwrap();
        let mut m = vec![0; 6];
        let mut q = vec![0; 4];
        // Thin so that random-walk autocorrelation does not inflate the statistic.
        for s in chain.states.iter().step_by(10) {
            m[s.m - 1] += 1;
            q[s.q - 2] += 1;
        }
        assert!(chi_square_p(&m) > 0.01, "{kind:?} {m:?}");
        assert!(chi_square_p(&q) > 0.01, "{kind:?} {q:?}");
    }
}

#[test]
fn chains_are_reproducible() {
    let model = small_model(9, Metric::default(), false);
    let priors = PriorConfig {
        m_max: 6,
        q_max: 4,
        ..PriorConfig::default()
    };
    let cfg = ChainConfig {
        iterations: 60,
        burn_in: 20,
        seed: 11,
        ..ChainConfig::default()
    };
    let a = run_chain(&model, &priors, &cfg).unwrap();
    let b = run_chain(&model, &priors, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.states.len(), 40);
    assert!(a.log_post.iter().all(|x| x.is_finite()));
    assert!(a.states.iter().all(|s| priors.contains(s)));
    let one = run_chain(&model, &priors, &ChainConfig { iterations: 21, ..cfg }).unwrap();
    assert_eq!(one.states.len(), 1);
    assert!(run_chain(&model, &priors, &ChainConfig { iterations: 20, ..cfg }).is_err());
}

#[test]
fn gamma_is_sampled_in_unit_interval() {
    let model = small_model(10, Metric::default(), true);
    let priors = PriorConfig {
        m_max: 6,
        q_max: 4,
        sample_gamma: true,
        ..PriorConfig::default()
    };
    let cfg = ChainConfig {
        iterations: 80,
        burn_in: 10,
        seed: 2,
        ..ChainConfig::default()
    };
    let chain = run_chain(&model, &priors, &cfg).unwrap();
    assert!(chain
        .states
        .iter()
        .all(|s| s.gamma.is_some_and(|g| (0.0..=1.0).contains(&g))));
    assert!(chain.acceptance.proposed[Acceptance::GAMMA] > 0);
}

#[test]
fn sigma2_draws_follow_full_conditional() {
    use statrs::distribution::InverseGamma;
    let priors = PriorConfig::default();
    let (ssr, n) = (12.0, 40);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut draws: Vec<f64> = (0..4000)
        .map(|_| draw_sigma2(&priors, ssr, n, &mut rng).unwrap())
        .collect();
    draws.sort_by(f64::total_cmp);
    let ig = InverseGamma::new(priors.sigma2_shape + n as f64 / 2.0, priors.sigma2_rate + ssr / 2.0).unwrap();
    let theory: Vec<f64> = (0..draws.len())
        .map(|i| ig.inverse_cdf((i as f64 + 0.5) / draws.len() as f64))
        .collect();
    let r = pearson(&draws, &theory);
    assert!(r > 0.999, "{r}");
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

#[test]
fn chain_csv_round_trip() {
    let lik = Flat { n: 5, ssr: 1.0 };
    let priors = PriorConfig::default();
    let cfg = ChainConfig {
        iterations: 30,
        burn_in: 5,
        seed: 4,
        ..ChainConfig::default()
    };
    let chain = run_chain(&lik, &priors, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("chain.csv");
    chain.write_csv(&path).unwrap();
    let back = Chain::read_csv(&path).unwrap();
    assert_eq!(back.states, chain.states);
    assert_eq!(back.log_post, chain.log_post);
    assert_eq!((back.burn_in, back.iterations), (5, 30));
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("iter,theta1,m,q,sigma2,gamma,log_post\n6,"));
}

#[test]
fn invalid_priors_rejected() {
    let bad = PriorConfig {
        m_min: 0,
        ..PriorConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = PriorConfig {
        theta1_rate: 0.0,
        ..PriorConfig::default()
    };
    assert!(bad.validate().is_err());
}

fn basis_for(p: usize, n_loc: usize, seed: u64) -> BasisSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = (0..n_loc).map(|i| Coord::new(i as f64, 0.0)).collect();
    let meta = BasisMeta {
        kind: BasisKind::Eof,
        explained_variance: vec![0.0; p],
        source_rows: Vec::new(),
        canonical_correlations: Vec::new(),
        notes: Vec::new(),
    };
    BasisSet::new(random(n_loc, p, &mut rng), coords, meta).unwrap()
}

fn single_state_chain(s: ModelState) -> Chain {
    Chain {
        states: vec![s],
        log_post: vec![0.0],
        acceptance: Acceptance::default(),
        seed: 0,
        iterations: 1,
        burn_in: 0,
        theta1_sd: 0.3,
    }
}

#[test]
fn degenerate_forecast_returns_nearest_analog() {
    let model = small_model(12, Metric::default(), false);
    let basis = basis_for(2, 4, 1);
    let s = state(0.4, 1, 3, 0.0);
    let chain = single_state_chain(s);
    let cfg = PredictConfig {
        thin: 1,
        draws_per_state: 3,
        seed: 1,
    };
    let f = posterior_predict(&chain, &model, 57, &basis, &cfg).unwrap();
    let cands = model.index().forecast_candidates(57);
    let w = model.weights(&s, 57, &cands).unwrap();
    let expect = basis.matrix() * model.responses().column(w.support[0] + 2);
    for j in 0..3 {
        assert!((f.field_draws.column(j) - &expect).amax() < 1e-12);
    }
}

#[test]
fn forecast_summaries_are_consistent() {
    let model = small_model(13, Metric::default(), false);
    let priors = PriorConfig {
        m_max: 6,
        q_max: 4,
        ..PriorConfig::default()
    };
    let chain = run_chain(
        &model,
        &priors,
        &ChainConfig {
            iterations: 300,
            burn_in: 50,
            seed: 3,
            ..ChainConfig::default()
        },
    )
    .unwrap();
    let basis = basis_for(2, 5, 2);
    let f = posterior_predict(&chain, &model, 56, &basis, &PredictConfig::default()).unwrap();
    assert_eq!(f.n_draws(), 50);
    let direct = f.field_draws.column_mean();
    assert!((direct - &f.field_mean).amax() < 1e-10);
    for i in 0..5 {
        assert!(f.field_lower[i] <= f.field_upper[i]);
    }
    assert!(posterior_predict(&chain, &model, 56, &basis_for(3, 5, 1), &PredictConfig::default()).is_err());
}

#[test]
fn forecasts_do_not_read_future_responses() {
    let model = small_model(14, Metric::default(), false);
    let priors = PriorConfig {
        m_max: 6,
        q_max: 4,
        ..PriorConfig::default()
    };
    let cfg = ChainConfig {
        iterations: 200,
        burn_in: 50,
        seed: 8,
        ..ChainConfig::default()
    };
    let chain = run_chain(&model, &priors, &cfg).unwrap();
    let basis = basis_for(2, 3, 3);
    let clean = posterior_predict(&chain, &model, 57, &basis, &PredictConfig::default()).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let beta = random(2, 60, &mut rng);
    let mut alpha = random(2, 60, &mut rng);
    for t in 51..60 {
        alpha.column_mut(t).fill(f64::NAN);
    }
    let table = Arc::new(DistanceTable::new(beta, 1, 2, 4, Metric::default()).unwrap());
    let poisoned = AnalogModel::new(table, alpha, index(3, 50, 2, 4), 6, None).unwrap();
    let chain2 = run_chain(&poisoned, &priors, &cfg).unwrap();
    assert_eq!(chain.states, chain2.states);
    let f = posterior_predict(&chain2, &poisoned, 57, &basis, &PredictConfig::default()).unwrap();
    assert_eq!(f.field_draws, clean.field_draws);
}
