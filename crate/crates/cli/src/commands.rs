//! Command-line arguments and the subcommands behind them.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use occnet::metrics::{evaluate, probability_histograms, HistogramGrid};
use occnet::simulate::{standard_splits, SimConfig};
use occnet::train::{
    default_synthetic_grid, expand_grid, grid_search, train, BatchSize, GridRow, Optimizer,
    SelectMetric, TrainConfig, TrainResult,
};
use occnet::Dataset;

use crate::error::{CliError, Result};
use crate::experiment::{
    replicates_csv, run_replicates, summarize, summary_csv, ExperimentSpec, Method,
};
use crate::io::{
    fmt_real, read_dataset, read_model, read_truth, write_dataset, write_file, write_model,
    write_truth, LoadedData, Normalization,
};

#[derive(Debug, Parser)]
#[command(
    name = "occnet",
    version,
    about = "Occupancy-detection models with neural links"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate train, validation and test splits.
    Simulate(SimulateArgs),
    /// Train one configuration.
    Train(TrainArgs),
    /// Grid-search configurations on a validation set.
    Tune(TuneArgs),
    /// Score a model on a dataset.
    Evaluate(EvaluateArgs),
    /// Replicated simulate, tune and evaluate runs with a summary table.
    Replicate(ReplicateArgs),
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    /// Sites in the train and validation splits (the test split has 1000).
    #[arg(long, default_value_t = 1000)]
    pub sites: usize,
    #[arg(long, default_value_t = 10)]
    pub visits: usize,
    /// 0 for linear logits, 1 for diagonal-quadratic.
    #[arg(long, default_value_t = 1.0)]
    pub rho: f64,
    #[arg(long, default_value_t = 10)]
    pub site_features: usize,
    #[arg(long, default_value_t = 10)]
    pub survey_features: usize,
    /// Features with nonzero coefficients, the first ones in each block.
    #[arg(long, default_value_t = 5)]
    pub relevant: usize,
    /// Standard deviation of the simulated features.
    #[arg(long, default_value_t = 1.0)]
    pub feature_sd: f64,
}

impl ScenarioArgs {
    fn config(&self, seed: u64) -> SimConfig {
        SimConfig {
            n_site_features: self.site_features,
            n_survey_features: self.survey_features,
            n_relevant: self.relevant,
            feature_sd: self.feature_sd,
            ..SimConfig::new(self.sites, self.visits, self.rho, seed)
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; receives train/, val/ and test/.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelType {
    Net,
    /// Linear baseline: forces depth 1 and lambda 0.
    Odlr,
}

#[derive(Debug, Args)]
pub struct HyperArgs {
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 2000)]
    pub epochs: usize,
    /// Sites per minibatch, or "all".
    #[arg(long, default_value = "all")]
    pub batch: BatchSize,
    #[arg(long, default_value_t = 16)]
    pub width: usize,
    #[arg(long, default_value_t = 3)]
    pub depth: usize,
    /// Group-norm penalty on both first layers.
    #[arg(long, default_value_t = 0.01)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// auprc, auroc or nll.
    #[arg(long, default_value = "auprc")]
    pub select_metric: SelectMetric,
    /// adam or sgd.
    #[arg(long, default_value = "adam")]
    pub optimizer: Optimizer,
}

impl HyperArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            max_epochs: self.epochs,
            batch_size: self.batch,
            hidden_width: self.width,
            depth: self.depth,
            lambda: self.lambda,
            seed: self.seed,
            select_metric: self.select_metric,
            optimizer: self.optimizer,
        }
    }
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Training dataset directory.
    #[arg(long)]
    pub train: PathBuf,
    /// Validation dataset directory.
    #[arg(long)]
    pub val: PathBuf,
    /// Z-score features with training statistics (saved as normalization.json).
    #[arg(long)]
    pub normalize: bool,
    /// Drop sites with fewer visits.
    #[arg(long, default_value_t = 1)]
    pub min_visits: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "net")]
    pub model_type: ModelType,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Output directory for model.json and history.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long, value_delimiter = ',', default_value = "0.0001,0.001,0.01")]
    pub grid_lr: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "32,all")]
    pub grid_batch: Vec<BatchSize>,
    #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
    pub grid_width: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,3")]
    pub grid_depth: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.001,0.01")]
    pub grid_lambda: Vec<f64>,
}

impl GridArgs {
    /// For the linear baseline only learning rate and batch size vary.
    fn grid(&self, model_type: ModelType, base: &TrainConfig) -> Vec<TrainConfig> {
        match model_type {
            ModelType::Net => expand_grid(
                &self.grid_lr,
                &self.grid_batch,
                &self.grid_width,
                &self.grid_depth,
                &self.grid_lambda,
                base,
            ),
            ModelType::Odlr => expand_grid(
                &self.grid_lr,
                &self.grid_batch,
                &[base.hidden_width],
                &[1],
                &[0.0],
                base,
            ),
        }
    }
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "net")]
    pub model_type: ModelType,
    /// Epochs, seed, selection metric and optimizer apply to every grid cell.
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Output directory for configs.csv and the best model and history.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset directory; truth files are used when present.
    #[arg(long)]
    pub data: PathBuf,
    /// normalization.json written by train or tune.
    #[arg(long)]
    pub normalization: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub min_visits: usize,
    /// Histogram bins per axis.
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GridChoice {
    /// The full synthetic search space (108 cells for the network).
    Full,
    /// Only the configuration given by the hyperparameter flags.
    Fixed,
}

#[derive(Debug, Args)]
pub struct ReplicateArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long, default_value_t = 5)]
    pub replicates: usize,
    /// Replicate r uses seed base-seed + r.
    #[arg(long, default_value_t = 0)]
    pub base_seed: u64,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "odlr,net")]
    pub methods: Vec<Method>,
    #[arg(long, value_enum, default_value = "full")]
    pub grid: GridChoice,
    /// Network configuration for --grid fixed; epochs, selection metric and
    /// optimizer also apply to the full grid. --seed is ignored.
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Learning rate of the linear baseline under --grid fixed.
    #[arg(long, default_value_t = 0.01)]
    pub odlr_lr: f64,
    /// k for top-k recovery of the relevant features.
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Tune(args) => cmd_tune(&args),
        Command::Evaluate(args) => cmd_evaluate(&args),
        Command::Replicate(args) => cmd_replicate(&args),
    }
}

fn usage(e: occnet::Error) -> CliError {
    CliError::Usage(e.to_string())
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let config = args.scenario.config(args.seed);
    config.validate().map_err(usage)?;
    let splits = standard_splits(&config)?;
    for (name, (data, truth)) in [
        ("train", splits.train),
        ("val", splits.val),
        ("test", splits.test),
    ] {
        let dir = args.out.join(name);
        let loaded = LoadedData::numbered(data);
        write_dataset(&dir, &loaded)?;
        write_truth(&dir, &loaded.ids, &truth)?;
    }
    Ok(())
}

/// Reads both splits, applying `--min-visits` and `--normalize`.
fn load_train_val(args: &DataArgs) -> Result<(Dataset, Dataset, Option<Normalization>)> {
    let train_set = read_dataset(&args.train, args.min_visits)?.data;
    let val_set = read_dataset(&args.val, args.min_visits)?.data;
    if train_set.feature_dims() != val_set.feature_dims() {
        return Err(CliError::Schema(format!(
            "training data has (J, K) = {:?} but validation data has {:?}",
            train_set.feature_dims(),
            val_set.feature_dims()
        )));
    }
    if !args.normalize {
        return Ok((train_set, val_set, None));
    }
    let norm = Normalization::fit(&train_set);
    Ok((norm.apply(&train_set)?, norm.apply(&val_set)?, Some(norm)))
}

fn history_csv(result: &TrainResult) -> String {
    let mut out = String::from("epoch,objective,val_metric\n");
    for h in &result.history {
        out.push_str(&format!(
            "{},{},{}\n",
            h.epoch,
            fmt_real(h.objective),
            fmt_real(h.val_metric)
        ));
    }
    out
}

fn write_training_outputs(
    out: &Path,
    result: &TrainResult,
    norm: Option<&Normalization>,
) -> Result<()> {
    write_model(&out.join("model.json"), &result.model)?;
    write_file(&out.join("history.csv"), &history_csv(result))?;
    if let Some(norm) = norm {
        write_file(&out.join("normalization.json"), &norm.to_json())?;
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut config = args.hyper.config();
    if args.model_type == ModelType::Odlr {
        config.depth = 1;
        config.lambda = 0.0;
    }
    config.validate().map_err(usage)?;
    let (train_set, val_set, norm) = load_train_val(&args.data)?;
    let result = train(&train_set, &val_set, &config)?;
    eprintln!(
        "best epoch {} of {}, validation {} {:.4}, {:.1}s",
        result.best_epoch,
        result.history.len(),
        config.select_metric,
        result.best_val_metric(),
        result.wall_time_seconds
    );
    write_training_outputs(&args.out, &result, norm.as_ref())
}

/// Grid rows ranked by validation score (best first, grid order on ties), failed
/// cells last.
fn configs_csv(table: &[GridRow]) -> String {
    let mut ranked: Vec<&GridRow> = table.iter().collect();
    ranked.sort_by(|a, b| match (&a.outcome, &b.outcome) {
        (Ok(x), Ok(y)) => y
            .val_metric
            .partial_cmp(&x.val_metric)
            .unwrap_or_else(|| x.val_metric.is_nan().cmp(&y.val_metric.is_nan()))
            .then(a.index.cmp(&b.index)),
        (Ok(_), Err(_)) => std::cmp::Ordering::Less,
        (Err(_), Ok(_)) => std::cmp::Ordering::Greater,
        (Err(_), Err(_)) => a.index.cmp(&b.index),
    });
    let mut out =
        String::from("rank,grid_index,learning_rate,batch_size,hidden_width,depth,lambda,best_epoch,val_metric,error\n");
    for (rank, row) in ranked.into_iter().enumerate() {
        let c = &row.config;
        let (epoch, metric, error) = match &row.outcome {
            Ok(s) => (
                s.best_epoch.to_string(),
                fmt_real(s.val_metric),
                String::new(),
            ),
            Err(e) => (
                String::new(),
                String::new(),
                format!("\"{}\"", e.to_string().replace('"', "\"\"")),
            ),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{epoch},{metric},{error}\n",
            rank + 1,
            row.index,
            fmt_real(c.learning_rate),
            c.batch_size,
            c.hidden_width,
            c.depth,
            fmt_real(c.lambda),
        ));
    }
    out
}

fn cmd_tune(args: &TuneArgs) -> Result<()> {
    let base = args.hyper.config();
    let grid = args.grid.grid(args.model_type, &base);
    if grid.is_empty() {
        return Err(CliError::Usage("empty hyperparameter grid".into()));
    }
    for cfg in &grid {
        cfg.validate().map_err(usage)?;
    }
    let (train_set, val_set, norm) = load_train_val(&args.data)?;
    let started = Instant::now();
    let outcome = grid_search(&train_set, &val_set, &grid)?;
    eprintln!(
        "{} configurations in {:.1}s; best is grid index {} with validation {} {:.4}",
        grid.len(),
        started.elapsed().as_secs_f64(),
        outcome.best_index,
        base.select_metric,
        outcome.best.best_val_metric()
    );
    write_file(&args.out.join("configs.csv"), &configs_csv(&outcome.table))?;
    write_training_outputs(&args.out, &outcome.best, norm.as_ref())
}

fn histogram_csv(counts: &[Vec<u64>]) -> String {
    let bins = counts.len();
    let mut out = String::from("occ_bin");
    for d in 0..bins {
        out.push_str(&format!(",det_bin_{d}"));
    }
    out.push('\n');
    for (o, row) in counts.iter().enumerate() {
        out.push_str(&o.to_string());
        for c in row {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
    }
    out
}

#[derive(serde::Serialize)]
struct ReportFile<'a> {
    occ_prob_corr: Option<f64>,
    det_prob_corr: Option<f64>,
    auroc: f64,
    auprc: f64,
    occ_importance: &'a [f64],
    det_importance: &'a [f64],
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    if args.bins < 2 {
        return Err(CliError::Usage("--bins must be at least 2".into()));
    }
    let model = read_model(&args.model)?;
    let loaded = read_dataset(&args.data, args.min_visits)?;
    if model.feature_dims() != loaded.data.feature_dims() {
        return Err(CliError::Schema(format!(
            "model expects (J, K) = {:?} but data has {:?}",
            model.feature_dims(),
            loaded.data.feature_dims()
        )));
    }
    let truth = read_truth(&args.data, &loaded)?;
    let data = match &args.normalization {
        Some(path) => Normalization::read(path)?.apply(&loaded.data)?,
        None => loaded.data,
    };
    let report = evaluate(&model, &data, truth.as_ref())?;
    let hist: HistogramGrid = probability_histograms(&model, &data, args.bins)?;

    let mut json = serde_json::to_string_pretty(&ReportFile {
        occ_prob_corr: report.occ_prob_corr,
        det_prob_corr: report.det_prob_corr,
        auroc: report.auroc,
        auprc: report.auprc,
        occ_importance: &report.occ_importance,
        det_importance: &report.det_importance,
    })
    .expect("finite report serializes");
    json.push('\n');

    let mut importance = String::from("block,feature,importance\n");
    for (j, v) in report.occ_importance.iter().enumerate() {
        importance.push_str(&format!("site,x{},{}\n", j + 1, fmt_real(*v)));
    }
    for (k, v) in report.det_importance.iter().enumerate() {
        importance.push_str(&format!("survey,w{},{}\n", k + 1, fmt_real(*v)));
    }

    write_file(&args.out.join("report.json"), &json)?;
    write_file(&args.out.join("importance.csv"), &importance)?;
    write_file(
        &args.out.join("histogram_pos.csv"),
        &histogram_csv(&hist.counts_pos),
    )?;
    write_file(
        &args.out.join("histogram_neg.csv"),
        &histogram_csv(&hist.counts_neg),
    )
}

fn cmd_replicate(args: &ReplicateArgs) -> Result<()> {
    let base = args.hyper.config();
    let (net_grid, odlr_grid) = match args.grid {
        GridChoice::Fixed => (
            vec![base.clone()],
            vec![TrainConfig {
                select_metric: base.select_metric,
                optimizer: base.optimizer,
                ..TrainConfig::odlr(args.odlr_lr, base.max_epochs, base.seed)
            }],
        ),
        GridChoice::Full => {
            let table = default_synthetic_grid(&base);
            let odlr: Vec<TrainConfig> = table
                .iter()
                .filter(|c| c.depth == 1 && c.lambda == 0.0 && c.hidden_width == base.hidden_width)
                .cloned()
                .collect();
            (table, odlr)
        }
    };
    let spec = ExperimentSpec {
        scenario: args.scenario.config(args.base_seed),
        replicates: args.replicates,
        base_seed: args.base_seed,
        methods: args.methods.clone(),
        net_grid,
        odlr_grid,
        top_k: args.top_k,
    };
    let started = Instant::now();
    let rows = run_replicates(&spec)?;
    eprintln!(
        "{} replicates in {:.1}s",
        spec.replicates,
        started.elapsed().as_secs_f64()
    );
    let summary = summarize(&rows, &spec.methods, spec.top_k);
    write_file(
        &args.out.join("replicates.csv"),
        &replicates_csv(&rows, spec.top_k),
    )?;
    write_file(&args.out.join("summary.csv"), &summary_csv(&summary))
}
