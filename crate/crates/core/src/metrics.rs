//! Evaluation metrics.

use std::cmp::Ordering;

use crate::error::{invalid, Error, Result};
use crate::likelihood::{Dataset, OccupancyModel};
use crate::simulate::GroundTruth;

/// Sample Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(invalid(format!(
            "pearson needs equal nonzero lengths (got {} and {})",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let dx = x - mean_a;
        let dy = y - mean_b;
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "a vector has zero variance".into(),
        ));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

fn check_scores(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(invalid(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(invalid(format!("score {s} is not a number")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    Ok((pos, labels.len() - pos))
}

/// Indices sorted by descending score; ties keep input order.
fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap_or(Ordering::Equal));
    idx
}

/// Groups of equal scores in descending order, as `(positives, negatives)` counts.
fn tie_groups(scores: &[f64], labels: &[bool]) -> Vec<(usize, usize)> {
    let order = descending_order(scores);
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut prev: Option<f64> = None;
    for i in order {
        if prev != Some(scores[i]) {
            groups.push((0, 0));
            prev = Some(scores[i]);
        }
        let g = groups.last_mut().expect("group pushed above");
        if labels[i] {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    groups
}

/// Area under the ROC curve as the Mann-Whitney statistic: the fraction of
/// (positive, negative) pairs ranked correctly, ties counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_scores(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(invalid("auroc needs both classes"));
    }
    // Walking down the tie groups, every positive beats all negatives below it.
    let mut doubled_wins: u64 = 0;
    let mut neg_below = neg as u64;
    for (p, n) in tie_groups(scores, labels) {
        let (p, n) = (p as u64, n as u64);
        neg_below -= n;
        doubled_wins += 2 * p * neg_below + p * n;
    }
    Ok(doubled_wins as f64 / (2 * pos as u64 * neg as u64) as f64)
}

/// Average precision: the sum over distinct thresholds, from highest score down, of
/// the recall increment times the precision at that threshold.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check_scores(scores, labels)?;
    if pos == 0 {
        return Err(invalid("auprc needs at least one positive"));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut total = 0.0;
    for (p, n) in tie_groups(scores, labels) {
        tp += p;
        fp += n;
        total += precision_recall_term(p, tp, fp, pos);
    }
    Ok(total)
}

/// `(new_tp / positives) * (tp / (tp + fp))`.
pub fn precision_recall_term(new_tp: usize, tp: usize, fp: usize, positives: usize) -> f64 {
    if new_tp == 0 {
        return 0.0;
    }
    (new_tp as f64 / positives as f64) * (tp as f64 / (tp + fp) as f64)
}

/// First-layer column norms of each net, one entry per input feature.
pub fn feature_importance(model: &OccupancyModel) -> (Vec<f64>, Vec<f64>) {
    let col_norms = |m: crate::nn::Matrix| (0..m.cols()).map(|c| m.column_norm(c)).collect();
    (
        col_norms(model.occ.first_layer()),
        col_norms(model.det.first_layer()),
    )
}

/// Indices of the `k` largest values, ties going to the lower index.
pub fn top_k(importance: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..importance.len()).collect();
    idx.sort_by(|&i, &j| {
        importance[j]
            .partial_cmp(&importance[i])
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    });
    idx.truncate(k);
    idx
}

/// Fraction of `true_relevant` found among the `k` most important features.
pub fn top_k_recovery(importance: &[f64], true_relevant: &[usize], k: usize) -> Result<f64> {
    if k > importance.len() {
        return Err(invalid(format!(
            "k = {k} exceeds the {} features",
            importance.len()
        )));
    }
    if true_relevant.is_empty() {
        return Err(invalid("no relevant features given"));
    }
    let top = top_k(importance, k);
    let hits = true_relevant.iter().filter(|i| top.contains(i)).count();
    Ok(hits as f64 / true_relevant.len() as f64)
}

/// Counts of surveys by binned (occupancy, detection) probability, split by outcome.
/// `counts_pos[occ_bin][det_bin]` counts visits with a detection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistogramGrid {
    pub bins: usize,
    pub counts_pos: Vec<Vec<u64>>,
    pub counts_neg: Vec<Vec<u64>>,
}

impl HistogramGrid {
    pub fn total_pos(&self) -> u64 {
        self.counts_pos.iter().flatten().sum()
    }

    pub fn total_neg(&self) -> u64 {
        self.counts_neg.iter().flatten().sum()
    }
}

/// `floor(p * bins)`, with `p = 1` in the top bin.
pub fn bin_index(p: f64, bins: usize) -> usize {
    ((p * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

/// Builds the grid from raw probabilities: one `(o_i, d_i, y_i)` list per site.
pub fn histogram_from_probabilities(
    sites: &[(f64, Vec<f64>, Vec<bool>)],
    bins: usize,
) -> Result<HistogramGrid> {
    if bins < 2 {
        return Err(invalid("histograms need at least two bins"));
    }
    let mut grid = HistogramGrid {
        bins,
        counts_pos: vec![vec![0; bins]; bins],
        counts_neg: vec![vec![0; bins]; bins],
    };
    for (o, d, y) in sites {
        let ob = bin_index(*o, bins);
        for (&dt, &yt) in d.iter().zip(y) {
            let target = if yt {
                &mut grid.counts_pos
            } else {
                &mut grid.counts_neg
            };
            target[ob][bin_index(dt, bins)] += 1;
        }
    }
    Ok(grid)
}

pub fn probability_histograms(
    model: &OccupancyModel,
    data: &Dataset,
    bins: usize,
) -> Result<HistogramGrid> {
    model.check_dataset(data)?;
    let sites = data
        .sites()
        .iter()
        .map(|s| {
            let (o, d) = model.site_probabilities(s)?;
            Ok((o, d, s.observations.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    histogram_from_probabilities(&sites, bins)
}

/// Metrics of one model on one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Present only with ground truth and nonconstant probabilities.
    pub occ_prob_corr: Option<f64>,
    pub det_prob_corr: Option<f64>,
    pub auroc: f64,
    pub auprc: f64,
    pub occ_importance: Vec<f64>,
    pub det_importance: Vec<f64>,
}

pub fn evaluate(
    model: &OccupancyModel,
    data: &Dataset,
    truth: Option<&GroundTruth>,
) -> Result<EvalReport> {
    let (scores, labels) = model.predict_dataset(data)?;
    let (occ_importance, det_importance) = feature_importance(model);
    let (occ_prob_corr, det_prob_corr) = match truth {
        Some(t) => {
            if t.occ_prob.len() != data.len() || t.det_prob_flat().len() != data.n_surveys() {
                return Err(invalid("ground truth does not match the dataset"));
            }
            let mut est_occ = Vec::with_capacity(data.len());
            let mut est_det = Vec::with_capacity(data.n_surveys());
            for site in data.sites() {
                let (o, d) = model.site_probabilities(site)?;
                est_occ.push(o);
                est_det.extend(d);
            }
            (
                pearson(&t.occ_prob, &est_occ).ok(),
                pearson(&t.det_prob_flat(), &est_det).ok(),
            )
        }
        None => (None, None),
    };
    Ok(EvalReport {
        occ_prob_corr,
        det_prob_corr,
        auroc: auroc(&scores, &labels)?,
        auprc: auprc(&scores, &labels)?,
        occ_importance,
        det_importance,
    })
}
