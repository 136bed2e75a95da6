//! Replicated simulate → tune → evaluate runs and their summary table.

use occnet::metrics::{evaluate, top_k_recovery};
use occnet::simulate::{standard_splits, SimConfig};
use occnet::train::{grid_search, TrainConfig};
use rayon::prelude::*;

use crate::error::{CliError, Result};
use crate::io::fmt_real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, clap::ValueEnum)]
pub enum Method {
    /// Linear occupancy-detection model (depth 1, no penalty).
    Odlr,
    /// Penalized neural occupancy-detection model.
    Net,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Odlr => "odlr",
            Method::Net => "net",
        }
    }
}

/// A replicated synthetic experiment. Replicate `r` uses seed `base_seed + r` for
/// both the simulated scenario and training.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    /// Its `seed` is ignored.
    pub scenario: SimConfig,
    pub replicates: usize,
    pub base_seed: u64,
    pub methods: Vec<Method>,
    pub net_grid: Vec<TrainConfig>,
    pub odlr_grid: Vec<TrainConfig>,
    pub top_k: usize,
}

/// Test-set metrics of one method in one replicate. Correlations are absent when
/// the fitted probabilities are constant.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateRow {
    pub method: Method,
    pub replicate: usize,
    pub seed: u64,
    pub best_config: TrainConfig,
    pub best_epoch: usize,
    pub occ_prob_corr: Option<f64>,
    pub det_prob_corr: Option<f64>,
    pub auprc: f64,
    pub auroc: f64,
    pub top_k_occ: f64,
    pub top_k_det: f64,
    pub wall_time_seconds: f64,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(CliError::Usage("replicates must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(CliError::Usage("no methods selected".into()));
        }
        self.scenario
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        for cfg in self.net_grid.iter().chain(&self.odlr_grid) {
            cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        }
        if self.top_k == 0
            || self.top_k
                > self
                    .scenario
                    .n_site_features
                    .min(self.scenario.n_survey_features)
        {
            return Err(CliError::Usage(format!(
                "top-k {} out of range",
                self.top_k
            )));
        }
        Ok(())
    }

    fn grid(&self, method: Method) -> &[TrainConfig] {
        match method {
            Method::Odlr => &self.odlr_grid,
            Method::Net => &self.net_grid,
        }
    }
}

/// Runs every replicate (in parallel) and returns rows ordered by replicate, then
/// by method in `spec.methods` order.
pub fn run_replicates(spec: &ExperimentSpec) -> Result<Vec<ReplicateRow>> {
    spec.validate()?;
    let per_replicate: Vec<Result<Vec<ReplicateRow>>> = (0..spec.replicates)
        .into_par_iter()
        .map(|r| run_one(spec, r))
        .collect();
    let mut rows = Vec::new();
    for result in per_replicate {
        rows.extend(result?);
    }
    Ok(rows)
}

fn run_one(spec: &ExperimentSpec, replicate: usize) -> Result<Vec<ReplicateRow>> {
    let seed = spec.base_seed + replicate as u64;
    let splits = standard_splits(&SimConfig {
        seed,
        ..spec.scenario.clone()
    })?;
    let (test, truth) = &splits.test;
    let mut rows = Vec::new();
    for &method in &spec.methods {
        let grid: Vec<TrainConfig> = spec
            .grid(method)
            .iter()
            .map(|cfg| TrainConfig {
                seed,
                ..cfg.clone()
            })
            .collect();
        let outcome = grid_search(&splits.train.0, &splits.val.0, &grid)?;
        let report = evaluate(&outcome.best.model, test, Some(truth))?;
        rows.push(ReplicateRow {
            method,
            replicate,
            seed,
            best_config: grid[outcome.best_index].clone(),
            best_epoch: outcome.best.best_epoch,
            occ_prob_corr: report.occ_prob_corr,
            det_prob_corr: report.det_prob_corr,
            auprc: report.auprc,
            auroc: report.auroc,
            top_k_occ: top_k_recovery(
                &report.occ_importance,
                &truth.relevant_site_features(),
                spec.top_k,
            )?,
            top_k_det: top_k_recovery(
                &report.det_importance,
                &truth.relevant_survey_features(),
                spec.top_k,
            )?,
            wall_time_seconds: outcome.best.wall_time_seconds,
        });
    }
    Ok(rows)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: Method,
    pub metric: String,
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

/// Per method and metric over replicates. Absent correlations are left out of
/// their metric's `n`; a metric with no values is omitted.
pub fn summarize(rows: &[ReplicateRow], methods: &[Method], top_k: usize) -> Vec<SummaryRow> {
    type Getter = fn(&ReplicateRow) -> Option<f64>;
    let metrics: [(String, Getter); 6] = [
        ("occ_prob_corr".into(), |r| r.occ_prob_corr),
        ("det_prob_corr".into(), |r| r.det_prob_corr),
        ("auprc".into(), |r| Some(r.auprc)),
        ("auroc".into(), |r| Some(r.auroc)),
        (format!("top{top_k}_occ"), |r| Some(r.top_k_occ)),
        (format!("top{top_k}_det"), |r| Some(r.top_k_det)),
    ];
    let mut summary = Vec::new();
    for &method in methods {
        for (name, get) in &metrics {
            let values: Vec<f64> = rows
                .iter()
                .filter(|r| r.method == method)
                .filter_map(get)
                .collect();
            if values.is_empty() {
                continue;
            }
            let (mean, sd) = mean_sd(&values);
            summary.push(SummaryRow {
                method,
                metric: name.clone(),
                mean,
                sd,
                n: values.len(),
            });
        }
    }
    summary
}

pub fn summary_csv(summary: &[SummaryRow]) -> String {
    let mut out = String::from("method,metric,mean,sd,n\n");
    for s in summary {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.method.name(),
            s.metric,
            fmt_real(s.mean),
            fmt_real(s.sd),
            s.n
        ));
    }
    out
}

fn opt_real(v: Option<f64>) -> String {
    v.map(fmt_real).unwrap_or_default()
}

pub fn replicates_csv(rows: &[ReplicateRow], top_k: usize) -> String {
    let mut out = format!(
        "method,replicate,seed,learning_rate,batch_size,hidden_width,depth,lambda,best_epoch,\
         occ_prob_corr,det_prob_corr,auprc,auroc,top{top_k}_occ,top{top_k}_det\n"
    );
    for r in rows {
        let c = &r.best_config;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.method.name(),
            r.replicate,
            r.seed,
            fmt_real(c.learning_rate),
            c.batch_size,
            c.hidden_width,
            c.depth,
            fmt_real(c.lambda),
            r.best_epoch,
            opt_real(r.occ_prob_corr),
            opt_real(r.det_prob_corr),
            fmt_real(r.auprc),
            fmt_real(r.auroc),
            fmt_real(r.top_k_occ),
            fmt_real(r.top_k_det),
        ));
    }
    out
}
