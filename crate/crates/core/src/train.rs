//! Minibatch training with validation-based snapshotting.
//!
//! Every step uses the batch-averaged likelihood gradient plus the group-norm
//! subgradient of the first layers, applied either as a plain step `w -= lr * g`
//! or through Adam.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::likelihood::{Dataset, OccupancyModel, SiteRecord};
use crate::metrics;
use crate::nn::NetGradient;
use crate::rng::{self, derive_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BatchSize {
    All,
    Sites(usize),
}

impl fmt::Display for BatchSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BatchSize::All => write!(f, "all"),
            BatchSize::Sites(n) => write!(f, "{n}"),
        }
    }
}

impl FromStr for BatchSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(BatchSize::All);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(BatchSize::Sites(n)),
            _ => Err(invalid(format!(
                "batch size must be a positive integer or 'all', got '{s}'"
            ))),
        }
    }
}

/// Validation criterion used to pick the best epoch. Larger is better for all three;
/// `Nll` is scored as the mean log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SelectMetric {
    Auprc,
    Auroc,
    Nll,
}

impl fmt::Display for SelectMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectMetric::Auprc => "auprc",
            SelectMetric::Auroc => "auroc",
            SelectMetric::Nll => "nll",
        })
    }
}

impl FromStr for SelectMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "auprc" => Ok(SelectMetric::Auprc),
            "auroc" => Ok(SelectMetric::Auroc),
            "nll" => Ok(SelectMetric::Nll),
            _ => Err(invalid(format!("unknown selection metric '{s}'"))),
        }
    }
}

/// Update rule applied to each (sub)gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Optimizer {
    /// `w -= lr * g`.
    Sgd,
    /// Adam with beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    Adam,
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam => "adam",
        })
    }
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            _ => Err(invalid(format!("unknown optimizer '{s}'"))),
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Per-weight optimizer state over the occupancy then detection weights.
struct Stepper {
    kind: Optimizer,
    lr: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: i32,
}

impl Stepper {
    fn new(kind: Optimizer, lr: f64, model: &OccupancyModel) -> Self {
        let n = match kind {
            Optimizer::Sgd => 0,
            Optimizer::Adam => model.occ.num_weights() + model.det.num_weights(),
        };
        Self {
            kind,
            lr,
            first: vec![0.0; n],
            second: vec![0.0; n],
            steps: 0,
        }
    }

    fn step(&mut self, model: &mut OccupancyModel, g_occ: &NetGradient, g_det: &NetGradient) {
        match self.kind {
            Optimizer::Sgd => model.apply_step(g_occ, g_det, self.lr),
            Optimizer::Adam => {
                self.steps += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(self.steps);
                let c2 = 1.0 - ADAM_BETA2.powi(self.steps);
                let grads = g_occ.flat().into_iter().chain(g_det.flat());
                let weights = model.occ.flat_mut().chain(model.det.flat_mut());
                for (((w, g), m), v) in weights
                    .zip(grads)
                    .zip(self.first.iter_mut())
                    .zip(self.second.iter_mut())
                {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: BatchSize,
    pub hidden_width: usize,
    pub depth: usize,
    /// Shared by both nets.
    pub lambda: f64,
    pub seed: u64,
    pub select_metric: SelectMetric,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            max_epochs: 2000,
            batch_size: BatchSize::All,
            hidden_width: 16,
            depth: 3,
            lambda: 0.01,
            seed: 0,
            select_metric: SelectMetric::Auprc,
            optimizer: Optimizer::Adam,
        }
    }
}

impl TrainConfig {
    /// The linear baseline: depth 1 and no penalty.
    pub fn odlr(learning_rate: f64, max_epochs: usize, seed: u64) -> Self {
        Self {
            learning_rate,
            max_epochs,
            batch_size: BatchSize::All,
            depth: 1,
            lambda: 0.0,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(format!(
                "learning rate {} must be >= 0",
                self.learning_rate
            )));
        }
        if self.max_epochs == 0 {
            return Err(invalid("max_epochs must be positive"));
        }
        if self.hidden_width == 0 || self.depth == 0 {
            return Err(invalid("hidden_width and depth must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid(format!("lambda {} must be >= 0", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Regularized objective on the full training set after the epoch's updates.
    pub objective: f64,
    pub val_metric: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Snapshot from `best_epoch`.
    pub model: OccupancyModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub wall_time_seconds: f64,
}

impl TrainResult {
    pub fn best_record(&self) -> &EpochRecord {
        &self.history[self.best_epoch - 1]
    }

    pub fn best_val_metric(&self) -> f64 {
        self.best_record().val_metric
    }
}

/// Validation score; NaN when undefined (e.g. a validation set with no detections).
pub fn validation_metric(
    model: &OccupancyModel,
    val: &Dataset,
    metric: SelectMetric,
) -> Result<f64> {
    match metric {
        SelectMetric::Nll => model.mean_log_likelihood(val),
        SelectMetric::Auprc | SelectMetric::Auroc => {
            let (scores, labels) = model.predict_dataset(val)?;
            let value = if metric == SelectMetric::Auprc {
                metrics::auprc(&scores, &labels)
            } else {
                metrics::auroc(&scores, &labels)
            };
            Ok(value.unwrap_or(f64::NAN))
        }
    }
}

/// Trains from a fresh initialization drawn from `config.seed`.
pub fn train(train_set: &Dataset, val_set: &Dataset, config: &TrainConfig) -> Result<TrainResult> {
    config.validate()?;
    let (j, k) = train_set.feature_dims();
    let model = OccupancyModel::init(j, k, config.hidden_width, config.depth, config.seed)?;
    train_from(model, train_set, val_set, config)
}

/// Trains starting from `model`. Each epoch shuffles the sites with one continuing
/// seeded stream, steps once per batch, then scores the validation set and keeps the
/// best snapshot (earliest on ties).
pub fn train_from(
    mut model: OccupancyModel,
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainConfig,
) -> Result<TrainResult> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(invalid("training and validation sets must be nonempty"));
    }
    if train_set.feature_dims() != val_set.feature_dims() {
        return Err(invalid(format!(
            "training data has (J, K) = {:?} but validation data has {:?}",
            train_set.feature_dims(),
            val_set.feature_dims()
        )));
    }
    model.check_dataset(train_set)?;
    let batch = match config.batch_size {
        BatchSize::All => train_set.len(),
        BatchSize::Sites(n) if n <= train_set.len() => n,
        BatchSize::Sites(n) => {
            return Err(invalid(format!(
                "batch size {n} exceeds the {} training sites",
                train_set.len()
            )))
        }
    };

    let start = Instant::now();
    let mut shuffler = rng::seeded(derive_seed(config.seed, 2));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let sites = train_set.sites();
    let lambda = config.lambda;
    let mut stepper = Stepper::new(config.optimizer, config.learning_rate, &model);

    let mut history = Vec::with_capacity(config.max_epochs);
    let mut best: Option<(usize, f64, OccupancyModel)> = None;
    for epoch in 1..=config.max_epochs {
        if batch < sites.len() {
            order.shuffle(&mut shuffler);
        }
        for chunk in order.chunks(batch) {
            let members: Vec<&SiteRecord> = chunk.iter().map(|&i| &sites[i]).collect();
            let (g_occ, g_det) = model.objective_gradient(&members, lambda, lambda)?;
            stepper.step(&mut model, &g_occ, &g_det);
        }
        let objective = model.objective(train_set, lambda, lambda)?.value;
        if !objective.is_finite() {
            return Err(Error::Numeric(format!(
                "objective diverged at epoch {epoch}"
            )));
        }
        let val_metric = validation_metric(&model, val_set, config.select_metric)?;
        history.push(EpochRecord {
            epoch,
            objective,
            val_metric,
        });
        let improved = match &best {
            None => true,
            Some((_, score, _)) => val_metric > *score || (score.is_nan() && !val_metric.is_nan()),
        };
        if improved {
            best = Some((epoch, val_metric, model.clone()));
        }
    }
    let (best_epoch, _, best_model) = best.expect("at least one epoch ran");
    Ok(TrainResult {
        model: best_model,
        history,
        best_epoch,
        wall_time_seconds: start.elapsed().as_secs_f64(),
    })
}

/// The linear baseline: `train` with depth 1 and no penalty.
pub fn train_odlr(
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainConfig,
) -> Result<TrainResult> {
    let linear = TrainConfig {
        depth: 1,
        lambda: 0.0,
        ..config.clone()
    };
    train(train_set, val_set, &linear)
}

/// One grid cell's outcome.
#[derive(Debug, Clone)]
pub struct GridRow {
    pub index: usize,
    pub config: TrainConfig,
    pub outcome: std::result::Result<GridScore, Error>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridScore {
    pub best_epoch: usize,
    pub val_metric: f64,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub best_index: usize,
    pub best: TrainResult,
    /// In grid order.
    pub table: Vec<GridRow>,
}

/// Trains every config (in parallel) and keeps the one with the highest validation
/// score, the lowest grid index winning ties. Configs that fail are reported in the
/// table; the search fails only when all of them do.
pub fn grid_search(
    train_set: &Dataset,
    val_set: &Dataset,
    grid: &[TrainConfig],
) -> Result<GridOutcome> {
    if grid.is_empty() {
        return Err(invalid("empty hyperparameter grid"));
    }
    let results: Vec<Result<TrainResult>> = grid
        .par_iter()
        .map(|cfg| train(train_set, val_set, cfg))
        .collect();

    let mut best: Option<(usize, TrainResult)> = None;
    let mut table = Vec::with_capacity(grid.len());
    let mut first_error = None;
    for (index, (cfg, result)) in grid.iter().zip(results).enumerate() {
        let outcome = match result {
            Ok(r) => {
                let score = GridScore {
                    best_epoch: r.best_epoch,
                    val_metric: r.best_val_metric(),
                };
                let better = match &best {
                    None => true,
                    Some((_, b)) => {
                        score.val_metric > b.best_val_metric()
                            || (b.best_val_metric().is_nan() && !score.val_metric.is_nan())
                    }
                };
                if better {
                    best = Some((index, r));
                }
                Ok(score)
            }
            Err(e) => {
                first_error.get_or_insert_with(|| e.clone());
                Err(e)
            }
        };
        table.push(GridRow {
            index,
            config: cfg.clone(),
            outcome,
        });
    }
    match best {
        Some((best_index, best)) => Ok(GridOutcome {
            best_index,
            best,
            table,
        }),
        None => Err(first_error.expect("nonempty grid with no successes has an error")),
    }
}

/// Cartesian product of hyperparameter values, in nested order
/// learning rate, batch size, width, depth, lambda (last varies fastest).
pub fn expand_grid(
    learning_rates: &[f64],
    batch_sizes: &[BatchSize],
    widths: &[usize],
    depths: &[usize],
    lambdas: &[f64],
    base: &TrainConfig,
) -> Vec<TrainConfig> {
    let mut grid = Vec::new();
    for &learning_rate in learning_rates {
        for &batch_size in batch_sizes {
            for &hidden_width in widths {
                for &depth in depths {
                    for &lambda in lambdas {
                        grid.push(TrainConfig {
                            learning_rate,
                            batch_size,
                            hidden_width,
                            depth,
                            lambda,
                            ..base.clone()
                        });
                    }
                }
            }
        }
    }
    grid
}

/// Search space used for the synthetic scenarios.
pub fn default_synthetic_grid(base: &TrainConfig) -> Vec<TrainConfig> {
    expand_grid(
        &[0.0001, 0.001, 0.01],
        &[BatchSize::Sites(32), BatchSize::All],
        &[8, 16, 32],
        &[1, 3],
        &[0.0, 0.001, 0.01],
        base,
    )
}
