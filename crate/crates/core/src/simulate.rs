//! Synthetic occupancy data.
//!
//! Features are drawn from `N(0, sd^2 I)`. Only the first `n_relevant` entries of the
//! coefficient vectors `alpha` (site) and `beta` (survey) are nonzero, drawn from
//! `U(-1, 1)`. Logits mix a linear and a diagonal quadratic term:
//!
//! ```text
//! logit(o_i)  = (1 - rho) * alpha . x_i  + rho * sum_k alpha_k x_ik^2
//! logit(d_it) = (1 - rho) * beta . w_it  + rho * sum_k beta_k w_itk^2
//! ```
//!
//! then `z_i ~ Bernoulli(o_i)` and `y_it ~ Bernoulli(z_i d_it)`.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::likelihood::{sigmoid, Dataset, SiteRecord};
use crate::rng::{self, derive_seed, Rng};

/// Test splits always have this many sites.
pub const TEST_SITES: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n_sites: usize,
    pub n_visits: usize,
    pub rho: f64,
    pub seed: u64,
    pub n_site_features: usize,
    pub n_survey_features: usize,
    pub n_relevant: usize,
    pub feature_sd: f64,
}

impl SimConfig {
    /// Ten site and ten survey features, five relevant, unit feature variance.
    pub fn new(n_sites: usize, n_visits: usize, rho: f64, seed: u64) -> Self {
        Self {
            n_sites,
            n_visits,
            rho,
            seed,
            n_site_features: 10,
            n_survey_features: 10,
            n_relevant: 5,
            feature_sd: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sites == 0 || self.n_visits == 0 {
            return Err(invalid("n_sites and n_visits must be positive"));
        }
        if self.n_site_features == 0 || self.n_survey_features == 0 {
            return Err(invalid("feature counts must be positive"));
        }
        if self.n_relevant > self.n_site_features.min(self.n_survey_features) {
            return Err(invalid(format!(
                "n_relevant = {} exceeds the feature counts",
                self.n_relevant
            )));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(invalid(format!("rho = {} outside [0, 1]", self.rho)));
        }
        if !(self.feature_sd > 0.0 && self.feature_sd.is_finite()) {
            return Err(invalid(format!(
                "feature_sd = {} must be positive",
                self.feature_sd
            )));
        }
        Ok(())
    }
}

/// Generating coefficients and latent quantities of a simulated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub occ_prob: Vec<f64>,
    /// `det_prob[i][t]`.
    pub det_prob: Vec<Vec<f64>>,
    pub z: Vec<bool>,
}

impl GroundTruth {
    /// Zero-based indices of the features with nonzero site coefficients.
    pub fn relevant_site_features(&self) -> Vec<usize> {
        nonzero_indices(&self.alpha)
    }

    pub fn relevant_survey_features(&self) -> Vec<usize> {
        nonzero_indices(&self.beta)
    }

    /// Detection probabilities flattened in site-then-visit order.
    pub fn det_prob_flat(&self) -> Vec<f64> {
        self.det_prob.iter().flatten().copied().collect()
    }
}

fn nonzero_indices(v: &[f64]) -> Vec<usize> {
    v.iter()
        .enumerate()
        .filter(|(_, c)| **c != 0.0)
        .map(|(i, _)| i)
        .collect()
}

/// Mixed linear/diagonal-quadratic logit.
pub fn mixed_logit(coef: &[f64], features: &[f64], rho: f64) -> f64 {
    let linear: f64 = coef.iter().zip(features).map(|(c, x)| c * x).sum();
    let quadratic: f64 = coef.iter().zip(features).map(|(c, x)| c * x * x).sum();
    (1.0 - rho) * linear + rho * quadratic
}

fn draw_coefficients(n: usize, n_relevant: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n)
        .map(|k| {
            if k < n_relevant {
                rng.random_range(-1.0..1.0)
            } else {
                0.0
            }
        })
        .collect()
}

/// Draws `alpha` then `beta` from a stream seeded with `seed`.
pub fn draw_truth_coefficients(config: &SimConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    config.validate()?;
    let mut rng = rng::seeded(config.seed);
    let alpha = draw_coefficients(config.n_site_features, config.n_relevant, &mut rng);
    let beta = draw_coefficients(config.n_survey_features, config.n_relevant, &mut rng);
    Ok((alpha, beta))
}

/// Simulates a dataset. Draw order on the single seeded stream: `alpha`, `beta`, then
/// for each site its features followed by its visits' features, then every `z_i`,
/// then every `y_it`.
pub fn simulate(config: &SimConfig) -> Result<(Dataset, GroundTruth)> {
    config.validate()?;
    let mut rng = rng::seeded(config.seed);
    let alpha = draw_coefficients(config.n_site_features, config.n_relevant, &mut rng);
    let beta = draw_coefficients(config.n_survey_features, config.n_relevant, &mut rng);
    generate(config, alpha, beta, &mut rng)
}

/// Simulates with fixed coefficients; features and outcomes come from `config.seed`.
pub fn simulate_with_coefficients(
    config: &SimConfig,
    alpha: Vec<f64>,
    beta: Vec<f64>,
) -> Result<(Dataset, GroundTruth)> {
    config.validate()?;
    if alpha.len() != config.n_site_features || beta.len() != config.n_survey_features {
        return Err(invalid(
            "coefficient lengths do not match the feature counts",
        ));
    }
    let mut rng = rng::seeded(config.seed);
    generate(config, alpha, beta, &mut rng)
}

fn generate(
    config: &SimConfig,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    rng: &mut Rng,
) -> Result<(Dataset, GroundTruth)> {
    let normal = Normal::new(0.0, config.feature_sd)
        .map_err(|e| invalid(format!("feature distribution: {e}")))?;
    let m = config.n_sites;
    let t = config.n_visits;

    let mut xs = Vec::with_capacity(m);
    let mut ws = Vec::with_capacity(m);
    for _ in 0..m {
        let x: Vec<f64> = (0..config.n_site_features)
            .map(|_| normal.sample(rng))
            .collect();
        let w: Vec<Vec<f64>> = (0..t)
            .map(|_| {
                (0..config.n_survey_features)
                    .map(|_| normal.sample(rng))
                    .collect()
            })
            .collect();
        xs.push(x);
        ws.push(w);
    }

    let occ_prob: Vec<f64> = xs
        .iter()
        .map(|x| sigmoid(mixed_logit(&alpha, x, config.rho)))
        .collect();
    let det_prob: Vec<Vec<f64>> = ws
        .iter()
        .map(|w| {
            w.iter()
                .map(|wt| sigmoid(mixed_logit(&beta, wt, config.rho)))
                .collect()
        })
        .collect();

    let z: Vec<bool> = occ_prob.iter().map(|&o| rng.random::<f64>() < o).collect();
    let ys: Vec<Vec<bool>> = det_prob
        .iter()
        .zip(&z)
        .map(|(d, &zi)| {
            d.iter()
                .map(|&dt| {
                    let u = rng.random::<f64>();
                    zi && u < dt
                })
                .collect()
        })
        .collect();

    let sites = xs
        .into_iter()
        .zip(ws)
        .zip(ys)
        .map(|((x, w), y)| SiteRecord::new(x, w, y))
        .collect::<Result<Vec<_>>>()?;
    let data = Dataset::new(sites, config.n_site_features, config.n_survey_features)?;
    Ok((
        data,
        GroundTruth {
            alpha,
            beta,
            occ_prob,
            det_prob,
            z,
        },
    ))
}

/// A simulated scenario split three ways.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: (Dataset, GroundTruth),
    pub val: (Dataset, GroundTruth),
    pub test: (Dataset, GroundTruth),
}

/// Train and validation splits with `config.n_sites` sites and a test split with
/// [`TEST_SITES`] sites, all sharing `alpha`/`beta` drawn from `config.seed` and
/// each drawing features and outcomes from its own derived seed.
pub fn standard_splits(config: &SimConfig) -> Result<Splits> {
    let (alpha, beta) = draw_truth_coefficients(config)?;
    let split = |stream: u64, n_sites: usize| {
        let cfg = SimConfig {
            n_sites,
            seed: derive_seed(config.seed, stream),
            ..config.clone()
        };
        simulate_with_coefficients(&cfg, alpha.clone(), beta.clone())
    };
    Ok(Splits {
        train: split(1, config.n_sites)?,
        val: split(2, config.n_sites)?,
        test: split(3, TEST_SITES)?,
    })
}
