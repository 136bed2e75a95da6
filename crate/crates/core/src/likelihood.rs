//! The occupancy-detection likelihood.
//!
//! For a site with occupancy probability `o` and per-visit detection probabilities
//! `d_t`, the observations `y_t` have marginal likelihood
//!
//! ```text
//! L = o * prod_t d_t^y_t (1 - d_t)^(1 - y_t) + (1 - o) * [all y_t = 0]
//! ```
//!
//! The indicator term is the only route by which an unoccupied site explains its
//! data, since unoccupied sites never produce detections.

use crate::error::{invalid, Result};
use crate::nn::{group_norm, group_norm_subgradient, NetGradient, NetParams};

/// Probabilities are kept in `[PROB_EPS, 1 - PROB_EPS]` so logs stay finite.
pub const PROB_EPS: f64 = 1e-12;

/// Logistic function, evaluated without overflow for large `|logit|`.
pub fn sigmoid(logit: f64) -> f64 {
    if logit >= 0.0 {
        1.0 / (1.0 + (-logit).exp())
    } else {
        let e = logit.exp();
        e / (1.0 + e)
    }
}

/// Logistic function clamped into `[PROB_EPS, 1 - PROB_EPS]`.
pub fn clamped_sigmoid(logit: f64) -> f64 {
    sigmoid(logit).clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// One site: its features, the features of each visit, and the detections.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteRecord {
    pub site_features: Vec<f64>,
    pub survey_features: Vec<Vec<f64>>,
    pub observations: Vec<bool>,
}

impl SiteRecord {
    pub fn new(
        site_features: Vec<f64>,
        survey_features: Vec<Vec<f64>>,
        observations: Vec<bool>,
    ) -> Result<Self> {
        if survey_features.is_empty() {
            return Err(invalid("a site needs at least one visit"));
        }
        if survey_features.len() != observations.len() {
            return Err(invalid(format!(
                "{} survey feature rows but {} observations",
                survey_features.len(),
                observations.len()
            )));
        }
        Ok(Self {
            site_features,
            survey_features,
            observations,
        })
    }

    pub fn n_visits(&self) -> usize {
        self.observations.len()
    }

    /// True when at least one visit detected the species.
    pub fn detected(&self) -> bool {
        self.observations.iter().any(|&y| y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    sites: Vec<SiteRecord>,
    site_dim: usize,
    survey_dim: usize,
}

impl Dataset {
    /// Validates that every site has `site_dim` site features and every visit
    /// `survey_dim` survey features.
    pub fn new(sites: Vec<SiteRecord>, site_dim: usize, survey_dim: usize) -> Result<Self> {
        for (i, s) in sites.iter().enumerate() {
            if s.site_features.len() != site_dim {
                return Err(invalid(format!(
                    "site {i} has {} site features, expected {site_dim}",
                    s.site_features.len()
                )));
            }
            if let Some(w) = s.survey_features.iter().find(|w| w.len() != survey_dim) {
                return Err(invalid(format!(
                    "site {i} has a visit with {} survey features, expected {survey_dim}",
                    w.len()
                )));
            }
            if s.survey_features.len() != s.observations.len() || s.observations.is_empty() {
                return Err(invalid(format!("site {i} has inconsistent visit counts")));
            }
        }
        Ok(Self {
            sites,
            site_dim,
            survey_dim,
        })
    }

    pub fn sites(&self) -> &[SiteRecord] {
        &self.sites
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    /// `(J, K)`: site and survey feature counts.
    pub fn feature_dims(&self) -> (usize, usize) {
        (self.site_dim, self.survey_dim)
    }

    pub fn n_surveys(&self) -> usize {
        self.sites.iter().map(SiteRecord::n_visits).sum()
    }

    /// Keeps only sites with at least `min_visits` visits.
    pub fn filter_min_visits(self, min_visits: usize) -> Self {
        Self {
            sites: self
                .sites
                .into_iter()
                .filter(|s| s.n_visits() >= min_visits)
                .collect(),
            ..self
        }
    }
}

/// Occupancy net over site features and detection net over survey features.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyModel {
    pub occ: NetParams,
    pub det: NetParams,
}

/// Regularized objective and its parts. Penalties are the raw group norms, so
/// `value = nll + lambda_occ * occ_penalty + lambda_det * det_penalty`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub value: f64,
    pub nll: f64,
    pub occ_penalty: f64,
    pub det_penalty: f64,
}

/// Per-site quantities shared by the objective and its gradient.
struct SiteEval {
    log_lik: f64,
    occ_prob: f64,
    det_probs: Vec<f64>,
    /// Posterior probability that the site is occupied given its observations.
    posterior: f64,
}

/// Log marginal likelihood and occupancy posterior. Assumes validated inputs.
fn site_terms(o: f64, d: &[f64], y: &[bool]) -> (f64, f64) {
    let log_detect: f64 = d
        .iter()
        .zip(y)
        .map(|(&dt, &yt)| if yt { dt.ln() } else { (-dt).ln_1p() })
        .sum();
    let occupied = o.ln() + log_detect;
    if y.iter().any(|&yt| yt) {
        return (occupied, 1.0);
    }
    let empty = (-o).ln_1p();
    let (hi, lo) = if occupied > empty {
        (occupied, empty)
    } else {
        (empty, occupied)
    };
    let log_lik = hi + (lo - hi).exp().ln_1p();
    (log_lik, (occupied - log_lik).exp())
}

/// Natural log of a site's marginal likelihood over its latent occupancy state.
pub fn site_log_likelihood(o: f64, d: &[f64], y: &[bool]) -> Result<f64> {
    if d.len() != y.len() {
        return Err(invalid(format!(
            "{} detection probabilities but {} observations",
            d.len(),
            y.len()
        )));
    }
    if !(0.0..=1.0).contains(&o) {
        return Err(invalid(format!("occupancy probability {o} outside [0, 1]")));
    }
    if let Some(bad) = d.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(invalid(format!(
            "detection probability {bad} outside (0, 1)"
        )));
    }
    Ok(site_terms(o, d, y).0)
}

impl OccupancyModel {
    /// Fresh model; the two nets draw from separate seed streams.
    pub fn init(
        site_dim: usize,
        survey_dim: usize,
        hidden_width: usize,
        depth: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            occ: NetParams::init(
                site_dim,
                hidden_width,
                depth,
                crate::rng::derive_seed(seed, 0),
            )?,
            det: NetParams::init(
                survey_dim,
                hidden_width,
                depth,
                crate::rng::derive_seed(seed, 1),
            )?,
        })
    }

    pub fn new(occ: NetParams, det: NetParams) -> Result<Self> {
        if occ.depth() != det.depth() {
            return Err(invalid("occupancy and detection nets must share a depth"));
        }
        Ok(Self { occ, det })
    }

    /// `(J, K)`.
    pub fn feature_dims(&self) -> (usize, usize) {
        (self.occ.input_dim(), self.det.input_dim())
    }

    pub fn depth(&self) -> usize {
        self.occ.depth()
    }

    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if self.feature_dims() != data.feature_dims() {
            return Err(invalid(format!(
                "model expects (J, K) = {:?} but data has {:?}",
                self.feature_dims(),
                data.feature_dims()
            )));
        }
        Ok(())
    }

    pub fn occupancy_probability(&self, site_features: &[f64]) -> Result<f64> {
        self.occ.logit(site_features).map(clamped_sigmoid)
    }

    pub fn detection_probability(&self, survey_features: &[f64]) -> Result<f64> {
        self.det.logit(survey_features).map(clamped_sigmoid)
    }

    /// Predicted detection score `o * d` for one visit.
    pub fn predict_observation(
        &self,
        site_features: &[f64],
        survey_features: &[f64],
    ) -> Result<f64> {
        Ok(self.occupancy_probability(site_features)?
            * self.detection_probability(survey_features)?)
    }

    /// Occupancy probability and per-visit detection probabilities for a site.
    pub fn site_probabilities(&self, site: &SiteRecord) -> Result<(f64, Vec<f64>)> {
        let o = self.occupancy_probability(&site.site_features)?;
        let d = site
            .survey_features
            .iter()
            .map(|w| self.detection_probability(w))
            .collect::<Result<Vec<_>>>()?;
        Ok((o, d))
    }

    /// Per-visit scores `o * d` in dataset order, with the matching labels.
    pub fn predict_dataset(&self, data: &Dataset) -> Result<(Vec<f64>, Vec<bool>)> {
        self.check_dataset(data)?;
        let mut scores = Vec::with_capacity(data.n_surveys());
        let mut labels = Vec::with_capacity(data.n_surveys());
        for site in data.sites() {
            let (o, d) = self.site_probabilities(site)?;
            scores.extend(d.iter().map(|dt| o * dt));
            labels.extend_from_slice(&site.observations);
        }
        Ok((scores, labels))
    }

    fn eval_site(&self, site: &SiteRecord) -> SiteEval {
        let occ_prob = clamped_sigmoid(self.occ.forward_unchecked(&site.site_features).0);
        let det_probs: Vec<f64> = site
            .survey_features
            .iter()
            .map(|w| clamped_sigmoid(self.det.forward_unchecked(w).0))
            .collect();
        let (log_lik, posterior) = site_terms(occ_prob, &det_probs, &site.observations);
        SiteEval {
            log_lik,
            occ_prob,
            det_probs,
            posterior,
        }
    }

    /// Mean negative log-likelihood over `data` plus group penalties on the
    /// first layers of both nets.
    pub fn objective(&self, data: &Dataset, lambda_occ: f64, lambda_det: f64) -> Result<Objective> {
        if data.is_empty() {
            return Err(invalid("objective of an empty dataset"));
        }
        check_lambdas(lambda_occ, lambda_det)?;
        self.check_dataset(data)?;
        let total: f64 = data.sites().iter().map(|s| self.eval_site(s).log_lik).sum();
        let nll = -total / data.len() as f64;
        let occ_penalty = group_norm(&self.occ.first_layer());
        let det_penalty = group_norm(&self.det.first_layer());
        Ok(Objective {
            value: nll + lambda_occ * occ_penalty + lambda_det * det_penalty,
            nll,
            occ_penalty,
            det_penalty,
        })
    }

    /// Gradient of the batch estimate of the objective: the likelihood term is
    /// averaged over `batch`, the penalties contribute `lambda` times the group-norm
    /// subgradient of each first layer.
    pub fn objective_gradient(
        &self,
        batch: &[&SiteRecord],
        lambda_occ: f64,
        lambda_det: f64,
    ) -> Result<(NetGradient, NetGradient)> {
        if batch.is_empty() {
            return Err(invalid("gradient over an empty batch"));
        }
        check_lambdas(lambda_occ, lambda_det)?;
        let (j, k) = self.feature_dims();
        for site in batch {
            if site.site_features.len() != j || site.survey_features.iter().any(|w| w.len() != k) {
                return Err(invalid("batch site dimensions do not match the model"));
            }
            if site.survey_features.len() != site.observations.len() {
                return Err(invalid("batch site has inconsistent visit counts"));
            }
        }
        let mut g_occ = NetGradient::zeros_for(&self.occ);
        let mut g_det = NetGradient::zeros_for(&self.det);
        let scale = 1.0 / batch.len() as f64;
        for site in batch {
            // d log L / d occ_logit = posterior - o
            // d log L / d det_logit_t = posterior * (y_t - d_t)
            let (occ_logit, occ_acts) = self.occ.forward_unchecked(&site.site_features);
            let occ_prob = clamped_sigmoid(occ_logit);
            let mut det_cache = Vec::with_capacity(site.n_visits());
            let mut det_probs = Vec::with_capacity(site.n_visits());
            for w in &site.survey_features {
                let (logit, acts) = self.det.forward_unchecked(w);
                det_probs.push(clamped_sigmoid(logit));
                det_cache.push(acts);
            }
            let (_, posterior) = site_terms(occ_prob, &det_probs, &site.observations);
            self.occ.accumulate_backward(
                &site.site_features,
                &occ_acts,
                -scale * (posterior - occ_prob),
                &mut g_occ,
            );
            for (((w, acts), &d), &y) in site
                .survey_features
                .iter()
                .zip(&det_cache)
                .zip(&det_probs)
                .zip(&site.observations)
            {
                let target = if y { 1.0 } else { 0.0 };
                self.det.accumulate_backward(
                    w,
                    acts,
                    -scale * posterior * (target - d),
                    &mut g_det,
                );
            }
        }
        if lambda_occ > 0.0 {
            g_occ.add_to_first_layer(&group_norm_subgradient(&self.occ.first_layer()), lambda_occ);
        }
        if lambda_det > 0.0 {
            g_det.add_to_first_layer(&group_norm_subgradient(&self.det.first_layer()), lambda_det);
        }
        Ok((g_occ, g_det))
    }

    /// Mean log-likelihood contributions, used for NLL-based model selection.
    pub fn mean_log_likelihood(&self, data: &Dataset) -> Result<f64> {
        Ok(-self.objective(data, 0.0, 0.0)?.nll)
    }

    /// Per-site evaluation exposed for diagnostics: `(log L_i, o_i, d_i, P(z_i = 1 | y_i))`.
    pub fn site_diagnostics(&self, site: &SiteRecord) -> Result<(f64, f64, Vec<f64>, f64)> {
        let (j, k) = self.feature_dims();
        if site.site_features.len() != j || site.survey_features.iter().any(|w| w.len() != k) {
            return Err(invalid("site dimensions do not match the model"));
        }
        let e = self.eval_site(site);
        Ok((e.log_lik, e.occ_prob, e.det_probs, e.posterior))
    }

    /// `self -= step * grad` on both nets.
    pub fn apply_step(&mut self, occ: &NetGradient, det: &NetGradient, step: f64) {
        self.occ.apply_step(occ, step);
        self.det.apply_step(det, step);
    }
}

fn check_lambdas(lambda_occ: f64, lambda_det: f64) -> Result<()> {
    if !(lambda_occ >= 0.0 && lambda_det >= 0.0) {
        return Err(invalid(format!(
            "regularization weights must be nonnegative (got {lambda_occ}, {lambda_det})"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Matrix;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    /// Brute-force marginal: sum over z in {0, 1} of P(z) * prod_t P(y_t | z).
    fn enumerate_latent(o: f64, d: &[f64], y: &[bool]) -> f64 {
        let mut total = 0.0;
        for z in [0.0, 1.0] {
            let prior = if z == 1.0 { o } else { 1.0 - o };
            let mut p = prior;
            for (&dt, &yt) in d.iter().zip(y) {
                let detect = z * dt;
                p *= if yt { detect } else { 1.0 - detect };
            }
            total += p;
        }
        total.ln()
    }

    fn linear_model(occ: Vec<f64>, det: Vec<f64>) -> OccupancyModel {
        OccupancyModel::new(
            NetParams::new(vec![], occ).unwrap(),
            NetParams::new(vec![], det).unwrap(),
        )
        .unwrap()
    }

    fn random_site(rng: &mut rng::Rng, j: usize, k: usize, t: usize) -> SiteRecord {
        let x = (0..j).map(|_| rng.random_range(-1.5..1.5)).collect();
        let w = (0..t)
            .map(|_| (0..k).map(|_| rng.random_range(-1.5..1.5)).collect())
            .collect();
        let y = (0..t).map(|_| rng.random_bool(0.4)).collect();
        SiteRecord::new(x, w, y).unwrap()
    }

    #[test]
    fn sigmoid_heads() {
        let m = linear_model(vec![0.0, 0.0], vec![0.0]);
        assert_eq!(m.occupancy_probability(&[3.0, -1.0]).unwrap(), 0.5);
        assert_eq!(m.detection_probability(&[9.0]).unwrap(), 0.5);

        let m = linear_model(vec![3f64.ln()], vec![-(3f64.ln())]);
        assert!((m.occupancy_probability(&[1.0]).unwrap() - 0.75).abs() < 1e-15);
        assert!((m.detection_probability(&[1.0]).unwrap() - 0.25).abs() < 1e-15);

        let m = linear_model(vec![1000.0], vec![-1000.0]);
        assert_eq!(m.occupancy_probability(&[1.0]).unwrap(), 1.0 - PROB_EPS);
        assert_eq!(m.detection_probability(&[1.0]).unwrap(), PROB_EPS);
    }

    #[test]
    fn heads_reject_wrong_dims() {
        let m = linear_model(vec![0.0, 0.0], vec![0.0]);
        assert!(m.occupancy_probability(&[1.0]).is_err());
        assert!(m.detection_probability(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn detection_monotone_in_positively_weighted_feature() {
        let m = linear_model(vec![0.0], vec![0.7, -0.2]);
        let mut prev = 0.0;
        for step in 0..20 {
            let d = m
                .detection_probability(&[-3.0 + 0.3 * step as f64, 1.0])
                .unwrap();
            assert!(d > prev);
            prev = d;
        }
    }

    #[test]
    fn site_log_likelihood_examples() {
        let certain = site_log_likelihood(1.0, &[1.0 - PROB_EPS], &[true]).unwrap();
        assert!(certain.abs() < 1e-11);

        let both_zero = site_log_likelihood(0.5, &[0.5, 0.5], &[false, false]).unwrap();
        assert!((both_zero - 0.625f64.ln()).abs() < 1e-15);
        assert!((both_zero - -0.4700036292457356).abs() < 1e-12);

        let detected = site_log_likelihood(0.8, &[0.9], &[true]).unwrap();
        assert!((detected - (0.72f64).ln()).abs() < 1e-15);
        assert!((detected - -0.3285040669720361).abs() < 1e-12);
    }

    #[test]
    fn site_log_likelihood_rejects_bad_input() {
        assert!(site_log_likelihood(0.5, &[0.5], &[true, false]).is_err());
        assert!(site_log_likelihood(0.5, &[1.0], &[true]).is_err());
        assert!(site_log_likelihood(0.5, &[0.0], &[false]).is_err());
        assert!(site_log_likelihood(1.5, &[0.5], &[false]).is_err());
    }

    #[test]
    fn matches_latent_enumeration() {
        let mut rng = rng::seeded(5);
        for _ in 0..1000 {
            let t = rng.random_range(1..=5);
            let o = rng.random_range(0.001..0.999);
            let d: Vec<f64> = (0..t).map(|_| rng.random_range(0.001..0.999)).collect();
            let y: Vec<bool> = (0..t).map(|_| rng.random_bool(0.3)).collect();
            let got = site_log_likelihood(o, &d, &y).unwrap();
            let want = enumerate_latent(o, &d, &y);
            assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
        }
    }

    proptest! {
        #[test]
        fn increasing_in_o_when_detected(
            d in proptest::collection::vec(0.01f64..0.99, 1..5),
            o1 in 0.01f64..0.98,
            delta in 0.001f64..0.5,
            first in 0usize..5,
        ) {
            let mut y = vec![false; d.len()];
            y[first % d.len()] = true;
            let o2 = (o1 + delta).min(0.999);
            prop_assume!(o2 > o1);
            prop_assert!(site_log_likelihood(o2, &d, &y).unwrap() > site_log_likelihood(o1, &d, &y).unwrap());
        }

        #[test]
        fn detected_sites_ignore_empty_branch(
            d in proptest::collection::vec(0.01f64..0.99, 1..5),
            o in 0.01f64..0.99,
        ) {
            let mut y = vec![false; d.len()];
            y[0] = true;
            let occupied_only: f64 = o.ln() + d.iter().zip(&y)
                .map(|(&dt, &yt)| if yt { dt.ln() } else { (1.0 - dt).ln() })
                .sum::<f64>();
            prop_assert!((site_log_likelihood(o, &d, &y).unwrap() - occupied_only).abs() < 1e-12);
        }
    }

    #[test]
    fn objective_examples() {
        let site = SiteRecord::new(
            vec![1.0, 2.0],
            vec![vec![1.0], vec![-1.0]],
            vec![false, false],
        )
        .unwrap();
        let data = Dataset::new(vec![site.clone()], 2, 1).unwrap();
        let model = linear_model(vec![0.0, 0.0], vec![0.0]);
        let obj = model.objective(&data, 0.0, 0.0).unwrap();
        assert_eq!(obj.value, obj.nll);
        assert!((obj.value - 0.4700036292457356).abs() < 1e-12);

        let doubled = Dataset::new(vec![site.clone(), site], 2, 1).unwrap();
        let obj2 = model.objective(&doubled, 0.0, 0.0).unwrap();
        assert!((obj2.value - obj.value).abs() < 1e-15);
    }

    #[test]
    fn objective_penalties_are_raw_group_norms() {
        let mut rng = rng::seeded(9);
        let model = OccupancyModel::init(3, 2, 4, 3, 1).unwrap();
        let sites = (0..5).map(|_| random_site(&mut rng, 3, 2, 2)).collect();
        let data = Dataset::new(sites, 3, 2).unwrap();
        let obj = model.objective(&data, 0.3, 0.7).unwrap();
        assert_eq!(obj.occ_penalty, group_norm(&model.occ.first_layer()));
        assert_eq!(obj.det_penalty, group_norm(&model.det.first_layer()));
        assert!(
            (obj.value - (obj.nll + 0.3 * obj.occ_penalty + 0.7 * obj.det_penalty)).abs() < 1e-14
        );
    }

    #[test]
    fn objective_rejects_empty_and_negative_lambda() {
        let model = linear_model(vec![0.0], vec![0.0]);
        let empty = Dataset::new(vec![], 1, 1).unwrap();
        assert!(model.objective(&empty, 0.0, 0.0).is_err());
        assert!(model.objective_gradient(&[], 0.0, 0.0).is_err());
        let site = SiteRecord::new(vec![1.0], vec![vec![1.0]], vec![true]).unwrap();
        let data = Dataset::new(vec![site], 1, 1).unwrap();
        assert!(model.objective(&data, -0.1, 0.0).is_err());
    }

    #[test]
    fn objective_stays_finite_under_saturation() {
        let model = linear_model(vec![-5000.0], vec![5000.0]);
        let site =
            SiteRecord::new(vec![1.0], vec![vec![1.0], vec![-1.0]], vec![true, false]).unwrap();
        let data = Dataset::new(vec![site], 1, 1).unwrap();
        assert!(model.objective(&data, 0.1, 0.1).unwrap().value.is_finite());
    }

    /// Central differences of the batch objective over every weight of both nets.
    fn fd_objective_gradient(
        model: &OccupancyModel,
        data: &Dataset,
        lambda: f64,
        h: f64,
    ) -> (Vec<f64>, Vec<f64>) {
        let eval = |m: &OccupancyModel| m.objective(data, lambda, lambda).unwrap().value;
        let n_occ = model.occ.num_weights();
        let n_det = model.det.num_weights();
        let occ = (0..n_occ)
            .map(|i| {
                let mut p = model.clone();
                let mut q = model.clone();
                *p.occ.flat_mut().nth(i).unwrap() += h;
                *q.occ.flat_mut().nth(i).unwrap() -= h;
                (eval(&p) - eval(&q)) / (2.0 * h)
            })
            .collect();
        let det = (0..n_det)
            .map(|i| {
                let mut p = model.clone();
                let mut q = model.clone();
                *p.det.flat_mut().nth(i).unwrap() += h;
                *q.det.flat_mut().nth(i).unwrap() -= h;
                (eval(&p) - eval(&q)) / (2.0 * h)
            })
            .collect();
        (occ, det)
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rng::seeded(77);
        let mut checked = 0;
        for seed in 0..40u64 {
            let model = OccupancyModel::init(3, 3, 4, 1 + (seed % 3) as usize, seed).unwrap();
            let sites: Vec<_> = (0..4).map(|_| random_site(&mut rng, 3, 3, 2)).collect();
            let kinky = sites.iter().any(|s| {
                model
                    .occ
                    .pre_activations(&s.site_features)
                    .iter()
                    .flatten()
                    .any(|v| v.abs() < 1e-3)
                    || s.survey_features.iter().any(|w| {
                        model
                            .det
                            .pre_activations(w)
                            .iter()
                            .flatten()
                            .any(|v| v.abs() < 1e-3)
                    })
            });
            if kinky {
                continue;
            }
            let data = Dataset::new(sites, 3, 3).unwrap();
            let lambda = if seed % 2 == 0 { 0.0 } else { 0.05 };
            let batch: Vec<&SiteRecord> = data.sites().iter().collect();
            let (g_occ, g_det) = model.objective_gradient(&batch, lambda, lambda).unwrap();
            let (fd_occ, fd_det) = fd_objective_gradient(&model, &data, lambda, 1e-5);
            assert!(
                max_rel_err(&g_occ.flat(), &fd_occ) <= 1e-4,
                "seed {seed} occ"
            );
            assert!(
                max_rel_err(&g_det.flat(), &fd_det) <= 1e-4,
                "seed {seed} det"
            );
            checked += 1;
        }
        assert!(checked >= 20, "only {checked} kink-free models");
    }

    #[test]
    fn detection_gradient_carries_residual_factor() {
        // o saturates near 1 and every visit is a detection: posterior is 1, so the
        // detection logit gradient for visit t is -(y_t - d_t) / |B|.
        let model = linear_model(vec![50.0], vec![0.3, -0.4]);
        let w = vec![vec![1.0, 0.5], vec![-0.5, 2.0]];
        let site = SiteRecord::new(vec![1.0], w.clone(), vec![true, true]).unwrap();
        let (_, g_det) = model.objective_gradient(&[&site], 0.0, 0.0).unwrap();
        let mut want = vec![0.0; 2];
        for wt in &w {
            let d = model.detection_probability(wt).unwrap();
            for (g, x) in want.iter_mut().zip(wt) {
                *g -= (1.0 - d) * x;
            }
        }
        for (g, e) in g_det.flat().iter().zip(&want) {
            assert!((g - e).abs() < 1e-12);
        }
        let data = Dataset::new(vec![site], 1, 2).unwrap();
        let (_, fd_det) = fd_objective_gradient(&model, &data, 0.0, 1e-5);
        assert!(max_rel_err(&g_det.flat(), &fd_det) <= 1e-4);
    }

    #[test]
    fn full_batch_gradient_is_mean_of_site_gradients() {
        let mut rng = rng::seeded(3);
        let model = OccupancyModel::init(3, 2, 5, 3, 4).unwrap();
        let sites: Vec<_> = (0..6).map(|_| random_site(&mut rng, 3, 2, 3)).collect();
        let batch: Vec<&SiteRecord> = sites.iter().collect();
        let (full_occ, full_det) = model.objective_gradient(&batch, 0.0, 0.0).unwrap();
        let mut mean_occ = NetGradient::zeros_for(&model.occ);
        let mut mean_det = NetGradient::zeros_for(&model.det);
        for s in &sites {
            let (o, d) = model.objective_gradient(&[s], 0.0, 0.0).unwrap();
            mean_occ.add_scaled(&o, 1.0 / 6.0);
            mean_det.add_scaled(&d, 1.0 / 6.0);
        }
        for (a, b) in full_occ.flat().iter().zip(mean_occ.flat()) {
            assert!((a - b).abs() < 1e-14);
        }
        for (a, b) in full_det.flat().iter().zip(mean_det.flat()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn penalty_gradient_columns_are_unit() {
        // Penalty contribution = gradient with the penalty minus gradient without.
        let mut rng = rng::seeded(12);
        let model = OccupancyModel::init(4, 3, 6, 2, 8).unwrap();
        let site = random_site(&mut rng, 4, 3, 2);
        let (plain, _) = model.objective_gradient(&[&site], 0.0, 0.0).unwrap();
        let (penalized, _) = model.objective_gradient(&[&site], 1.0, 0.0).unwrap();
        let mut diff = penalized.clone();
        diff.add_scaled(&plain, -1.0);
        let first = diff.first_layer();
        let weights = model.occ.first_layer();
        for c in 0..first.cols() {
            if weights.column_norm(c) > 1e-12 {
                assert!((first.column_norm(c) - 1.0).abs() < 1e-12);
            }
        }
        // Deeper layers are unpenalized.
        assert_eq!(diff.as_params().hidden()[0].rows(), 6);
        assert!(diff.as_params().output().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn zero_column_subgradient_leaves_column_dead() {
        let mut w1 = Matrix::zeros(2, 2);
        w1.set(0, 0, 1.0);
        w1.set(1, 0, -1.0);
        let occ = NetParams::new(vec![w1], vec![1.0, 1.0]).unwrap();
        let det = NetParams::new(
            vec![Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap()],
            vec![1.0, 1.0],
        )
        .unwrap();
        let model = OccupancyModel::new(occ, det).unwrap();
        // Second site feature is zero, so its column gets no likelihood gradient.
        let site = SiteRecord::new(vec![1.0, 0.0], vec![vec![1.0]], vec![true]).unwrap();
        let (g, _) = model.objective_gradient(&[&site], 0.5, 0.0).unwrap();
        let first = g.first_layer();
        assert_eq!(first.get(0, 1), 0.0);
        assert_eq!(first.get(1, 1), 0.0);
    }

    #[test]
    fn predict_observation_is_product() {
        let m = linear_model(vec![0.0], vec![0.0]);
        assert_eq!(m.predict_observation(&[1.0], &[1.0]).unwrap(), 0.25);
        let m = linear_model(vec![0.4], vec![1000.0]);
        let o = m.occupancy_probability(&[1.0]).unwrap();
        assert!((m.predict_observation(&[1.0], &[1.0]).unwrap() - o).abs() < 1e-9);
    }

    #[test]
    fn predict_observation_increases_in_each_factor() {
        let m = linear_model(vec![1.0], vec![1.0]);
        let base = m.predict_observation(&[0.0], &[0.0]).unwrap();
        assert!(m.predict_observation(&[0.5], &[0.0]).unwrap() > base);
        assert!(m.predict_observation(&[0.0], &[0.5]).unwrap() > base);
    }

    #[test]
    fn dataset_validation() {
        let good = SiteRecord::new(vec![1.0], vec![vec![1.0, 2.0]], vec![false]).unwrap();
        assert!(Dataset::new(vec![good.clone()], 1, 2).is_ok());
        assert!(Dataset::new(vec![good.clone()], 2, 2).is_err());
        assert!(Dataset::new(vec![good], 1, 3).is_err());
        assert!(SiteRecord::new(vec![1.0], vec![], vec![]).is_err());
        assert!(SiteRecord::new(vec![1.0], vec![vec![1.0]], vec![true, false]).is_err());
    }

    #[test]
    fn variable_visit_counts_are_supported() {
        let mut rng = rng::seeded(21);
        let model = OccupancyModel::init(2, 2, 3, 2, 0).unwrap();
        let sites: Vec<_> = (1..=4).map(|t| random_site(&mut rng, 2, 2, t)).collect();
        let data = Dataset::new(sites, 2, 2).unwrap();
        assert!(model.objective(&data, 0.0, 0.0).unwrap().value.is_finite());
        assert_eq!(data.n_surveys(), 10);
        assert_eq!(data.clone().filter_min_visits(3).len(), 2);
    }
}
