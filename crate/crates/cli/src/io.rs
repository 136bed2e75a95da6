//! On-disk formats.
//!
//! A dataset directory holds:
//!
//! - `sites.csv`: `site_id,x1,...,xJ`, one row per site.
//! - `surveys.csv`: `site_id,visit,w1,...,wK,y`, visits numbered from 1 and
//!   contiguous within a site, a site's rows adjacent.
//! - optionally `truth_site.csv` (`site_id,o,z`) and `truth_survey.csv`
//!   (`site_id,visit,d`) for simulated data.
//!
//! Reals are written with 17 significant digits. Models are JSON with fields
//! `j,k,depth,width,occ_layers,det_layers`; each layer list holds the hidden matrices
//! as arrays of rows followed by the output vector as a single row.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use occnet::likelihood::{Dataset, OccupancyModel, SiteRecord};
use occnet::nn::{Matrix, NetParams};
use occnet::simulate::GroundTruth;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SITES_FILE: &str = "sites.csv";
pub const SURVEYS_FILE: &str = "surveys.csv";
pub const TRUTH_SITE_FILE: &str = "truth_site.csv";
pub const TRUTH_SURVEY_FILE: &str = "truth_survey.csv";

/// 17 significant digits.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `contents` to `path`, creating parent directories.
pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

/// A dataset with the site identifiers it was read or written with.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub ids: Vec<String>,
    pub data: Dataset,
}

impl LoadedData {
    /// Sites numbered `1..=M`.
    pub fn numbered(data: Dataset) -> Self {
        let ids = (1..=data.len()).map(|i| i.to_string()).collect();
        Self { ids, data }
    }
}

pub fn write_dataset(dir: &Path, loaded: &LoadedData) -> Result<()> {
    let (j, k) = loaded.data.feature_dims();
    let mut sites = String::from("site_id");
    for c in 1..=j {
        sites.push_str(&format!(",x{c}"));
    }
    sites.push('\n');
    let mut surveys = String::from("site_id,visit");
    for c in 1..=k {
        surveys.push_str(&format!(",w{c}"));
    }
    surveys.push_str(",y\n");
    for (id, site) in loaded.ids.iter().zip(loaded.data.sites()) {
        sites.push_str(id);
        for v in &site.site_features {
            sites.push(',');
            sites.push_str(&fmt_real(*v));
        }
        sites.push('\n');
        for (t, (w, y)) in site
            .survey_features
            .iter()
            .zip(&site.observations)
            .enumerate()
        {
            surveys.push_str(&format!("{id},{}", t + 1));
            for v in w {
                surveys.push(',');
                surveys.push_str(&fmt_real(*v));
            }
            surveys.push_str(if *y { ",1\n" } else { ",0\n" });
        }
    }
    write_file(&dir.join(SITES_FILE), &sites)?;
    write_file(&dir.join(SURVEYS_FILE), &surveys)
}

pub fn write_truth(dir: &Path, ids: &[String], truth: &GroundTruth) -> Result<()> {
    let mut site = String::from("site_id,o,z\n");
    let mut survey = String::from("site_id,visit,d\n");
    for (i, id) in ids.iter().enumerate() {
        site.push_str(&format!(
            "{id},{},{}\n",
            fmt_real(truth.occ_prob[i]),
            u8::from(truth.z[i])
        ));
        for (t, d) in truth.det_prob[i].iter().enumerate() {
            survey.push_str(&format!("{id},{},{}\n", t + 1, fmt_real(*d)));
        }
    }
    write_file(&dir.join(TRUTH_SITE_FILE), &site)?;
    write_file(&dir.join(TRUTH_SURVEY_FILE), &survey)
}

fn open_csv(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file))
}

fn headers(path: &Path, reader: &mut csv::Reader<fs::File>) -> Result<Vec<String>> {
    let h = reader.headers().map_err(|e| csv_error(path, e))?;
    Ok(h.iter().map(|s| s.trim().to_string()).collect())
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    let line = e.position().map_or(0, |p| p.line());
    let column = match e.kind() {
        csv::ErrorKind::UnequalLengths { len, .. } => *len as usize + 1,
        _ => 0,
    };
    CliError::parse(path, line, column, e.to_string())
}

struct Row<'a> {
    path: &'a Path,
    line: u64,
    record: csv::StringRecord,
}

impl Row<'_> {
    fn text(&self, col: usize) -> &str {
        self.record.get(col).unwrap_or("").trim()
    }

    fn real(&self, col: usize) -> Result<f64> {
        let raw = self.text(col);
        match raw.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(CliError::parse(
                self.path,
                self.line,
                col + 1,
                format!("expected a finite number, found '{raw}'"),
            )),
        }
    }

    fn count(&self, col: usize) -> Result<usize> {
        let raw = self.text(col);
        raw.parse::<usize>().map_err(|_| {
            CliError::parse(
                self.path,
                self.line,
                col + 1,
                format!("expected a positive integer, found '{raw}'"),
            )
        })
    }

    fn binary(&self, col: usize) -> Result<bool> {
        match self.text(col) {
            "0" => Ok(false),
            "1" => Ok(true),
            raw => Err(CliError::parse(
                self.path,
                self.line,
                col + 1,
                format!("expected 0 or 1, found '{raw}'"),
            )),
        }
    }

    fn error(&self, col: usize, message: impl Into<String>) -> CliError {
        CliError::parse(self.path, self.line, col + 1, message)
    }
}

fn rows(path: &Path, reader: csv::Reader<fs::File>) -> impl Iterator<Item = Result<Row<'_>>> {
    reader.into_records().map(move |r| {
        let record = r.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        Ok(Row { path, line, record })
    })
}

fn expect_leading(path: &Path, found: &[String], expected: &[&str]) -> Result<()> {
    for (col, name) in expected.iter().enumerate() {
        if found.get(col).map(String::as_str) != Some(*name) {
            return Err(CliError::parse(
                path,
                1,
                col + 1,
                format!("expected header column '{name}'"),
            ));
        }
    }
    Ok(())
}

/// Reads `sites.csv` and `surveys.csv` from `dir`, dropping sites with fewer than
/// `min_visits` visits.
pub fn read_dataset(dir: &Path, min_visits: usize) -> Result<LoadedData> {
    let sites_path = dir.join(SITES_FILE);
    let mut reader = open_csv(&sites_path)?;
    let site_header = headers(&sites_path, &mut reader)?;
    expect_leading(&sites_path, &site_header, &["site_id"])?;
    let j = site_header.len() - 1;
    if j == 0 {
        return Err(CliError::parse(
            &sites_path,
            1,
            2,
            "no site feature columns",
        ));
    }
    let mut ids = Vec::new();
    let mut features = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for row in rows(&sites_path, reader) {
        let row = row?;
        let id = row.text(0).to_string();
        if index.insert(id.clone(), ids.len()).is_some() {
            return Err(row.error(0, format!("duplicate site_id '{id}'")));
        }
        features.push((1..=j).map(|c| row.real(c)).collect::<Result<Vec<_>>>()?);
        ids.push(id);
    }

    let surveys_path = dir.join(SURVEYS_FILE);
    let mut reader = open_csv(&surveys_path)?;
    let survey_header = headers(&surveys_path, &mut reader)?;
    expect_leading(&surveys_path, &survey_header, &["site_id", "visit"])?;
    if survey_header.last().map(String::as_str) != Some("y") || survey_header.len() < 4 {
        return Err(CliError::parse(
            &surveys_path,
            1,
            survey_header.len(),
            "expected survey feature columns followed by 'y'",
        ));
    }
    let k = survey_header.len() - 3;
    let y_col = k + 2;
    let mut visits: Vec<(Vec<Vec<f64>>, Vec<bool>)> = vec![(Vec::new(), Vec::new()); ids.len()];
    let mut finished = vec![false; ids.len()];
    let mut current: Option<usize> = None;
    for row in rows(&surveys_path, reader) {
        let row = row?;
        let id = row.text(0);
        let Some(&site) = index.get(id) else {
            return Err(row.error(0, format!("site_id '{id}' is not in {SITES_FILE}")));
        };
        if current != Some(site) {
            if let Some(prev) = current {
                finished[prev] = true;
            }
            if finished[site] {
                return Err(row.error(0, format!("rows for site '{id}' are not contiguous")));
            }
            current = Some(site);
        }
        let visit = row.count(1)?;
        let expected = visits[site].1.len() + 1;
        if visit != expected {
            return Err(row.error(
                1,
                format!("expected visit {expected} for site '{id}', found {visit}"),
            ));
        }
        let w = (2..2 + k)
            .map(|c| row.real(c))
            .collect::<Result<Vec<_>>>()?;
        visits[site].0.push(w);
        visits[site].1.push(row.binary(y_col)?);
    }

    let mut kept_ids = Vec::new();
    let mut records = Vec::new();
    for ((id, x), (w, y)) in ids.into_iter().zip(features).zip(visits) {
        if y.len() < min_visits.max(1) {
            continue;
        }
        records.push(SiteRecord::new(x, w, y)?);
        kept_ids.push(id);
    }
    let data = Dataset::new(records, j, k).map_err(|e| CliError::Schema(e.to_string()))?;
    Ok(LoadedData {
        ids: kept_ids,
        data,
    })
}

/// Reads the truth files if both exist. Alignment is by `site_id`; coefficient
/// vectors are unknown from files and left empty.
pub fn read_truth(dir: &Path, loaded: &LoadedData) -> Result<Option<GroundTruth>> {
    let site_path = dir.join(TRUTH_SITE_FILE);
    let survey_path = dir.join(TRUTH_SURVEY_FILE);
    if !site_path.exists() || !survey_path.exists() {
        return Ok(None);
    }
    let mut reader = open_csv(&site_path)?;
    let header = headers(&site_path, &mut reader)?;
    expect_leading(&site_path, &header, &["site_id", "o", "z"])?;
    let mut site_truth: HashMap<String, (f64, bool)> = HashMap::new();
    for row in rows(&site_path, reader) {
        let row = row?;
        site_truth.insert(row.text(0).to_string(), (row.real(1)?, row.binary(2)?));
    }
    let mut reader = open_csv(&survey_path)?;
    let header = headers(&survey_path, &mut reader)?;
    expect_leading(&survey_path, &header, &["site_id", "visit", "d"])?;
    let mut det: HashMap<String, Vec<f64>> = HashMap::new();
    for row in rows(&survey_path, reader) {
        let row = row?;
        let entry = det.entry(row.text(0).to_string()).or_default();
        let visit = row.count(1)?;
        if visit != entry.len() + 1 {
            return Err(row.error(
                1,
                format!("expected visit {}, found {visit}", entry.len() + 1),
            ));
        }
        entry.push(row.real(2)?);
    }

    let mut truth = GroundTruth {
        alpha: Vec::new(),
        beta: Vec::new(),
        occ_prob: Vec::with_capacity(loaded.ids.len()),
        det_prob: Vec::with_capacity(loaded.ids.len()),
        z: Vec::with_capacity(loaded.ids.len()),
    };
    for (id, site) in loaded.ids.iter().zip(loaded.data.sites()) {
        let (o, z) = site_truth.get(id).ok_or_else(|| {
            CliError::Schema(format!("{TRUTH_SITE_FILE} has no row for site '{id}'"))
        })?;
        let d = det.remove(id).ok_or_else(|| {
            CliError::Schema(format!("{TRUTH_SURVEY_FILE} has no rows for site '{id}'"))
        })?;
        if d.len() != site.n_visits() {
            return Err(CliError::Schema(format!(
                "site '{id}' has {} visits but {} truth rows",
                site.n_visits(),
                d.len()
            )));
        }
        truth.occ_prob.push(*o);
        truth.z.push(*z);
        truth.det_prob.push(d);
    }
    Ok(Some(truth))
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    j: usize,
    k: usize,
    depth: usize,
    /// 0 for linear (depth 1) models.
    width: usize,
    occ_layers: Vec<Vec<Vec<f64>>>,
    det_layers: Vec<Vec<Vec<f64>>>,
}

fn net_layers(net: &NetParams) -> Vec<Vec<Vec<f64>>> {
    let mut layers: Vec<Vec<Vec<f64>>> = net.hidden().iter().map(Matrix::to_rows).collect();
    layers.push(vec![net.output().to_vec()]);
    layers
}

fn net_from_layers(mut layers: Vec<Vec<Vec<f64>>>, name: &str) -> Result<NetParams> {
    let schema = |msg: String| CliError::Schema(format!("{name}: {msg}"));
    let output = match layers.pop() {
        Some(mut rows) if rows.len() == 1 => rows.pop().expect("one row"),
        Some(_) => return Err(schema("output vector must be a single row".into())),
        None => return Err(schema("no layers".into())),
    };
    let hidden = layers
        .iter()
        .map(|rows| Matrix::from_rows(rows))
        .collect::<occnet::Result<Vec<_>>>()
        .map_err(|e| schema(e.to_string()))?;
    NetParams::new(hidden, output).map_err(|e| schema(e.to_string()))
}

pub fn model_to_json(model: &OccupancyModel) -> String {
    let (j, k) = model.feature_dims();
    let file = ModelFile {
        j,
        k,
        depth: model.depth(),
        width: model.occ.width().unwrap_or(0),
        occ_layers: net_layers(&model.occ),
        det_layers: net_layers(&model.det),
    };
    let mut out = serde_json::to_string(&file).expect("finite weights serialize");
    out.push('\n');
    out
}

pub fn model_from_json(text: &str, path: &Path) -> Result<OccupancyModel> {
    let file: ModelFile = serde_json::from_str(text)
        .map_err(|e| CliError::parse(path, e.line() as u64, e.column(), e.to_string()))?;
    let occ = net_from_layers(file.occ_layers, "occ_layers")?;
    let det = net_from_layers(file.det_layers, "det_layers")?;
    let model = OccupancyModel::new(occ, det).map_err(|e| CliError::Schema(e.to_string()))?;
    if model.feature_dims() != (file.j, file.k) || model.depth() != file.depth {
        return Err(CliError::Schema(format!(
            "model header says j={}, k={}, depth={} but layers imply {:?}, depth {}",
            file.j,
            file.k,
            file.depth,
            model.feature_dims(),
            model.depth()
        )));
    }
    let widths = (
        model.occ.width().unwrap_or(0),
        model.det.width().unwrap_or(0),
    );
    if widths != (file.width, file.width) {
        return Err(CliError::Schema(format!(
            "model header says width {} but layers have {widths:?}",
            file.width
        )));
    }
    Ok(model)
}

pub fn read_model(path: &Path) -> Result<OccupancyModel> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    model_from_json(&text, path)
}

pub fn write_model(path: &Path, model: &OccupancyModel) -> Result<()> {
    write_file(path, &model_to_json(model))
}

/// Per-feature z-score parameters fitted on a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub site_mean: Vec<f64>,
    pub site_sd: Vec<f64>,
    pub survey_mean: Vec<f64>,
    pub survey_sd: Vec<f64>,
}

fn mean_sd(rows: &[&[f64]], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(*r) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; dim];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(*r).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    // Constant features are centered but not scaled.
    let sd = var
        .into_iter()
        .map(|v| if v > 0.0 { v.sqrt() } else { 1.0 })
        .collect();
    (mean, sd)
}

impl Normalization {
    pub fn fit(data: &Dataset) -> Self {
        let (j, k) = data.feature_dims();
        let site_rows: Vec<&[f64]> = data
            .sites()
            .iter()
            .map(|s| s.site_features.as_slice())
            .collect();
        let survey_rows: Vec<&[f64]> = data
            .sites()
            .iter()
            .flat_map(|s| s.survey_features.iter().map(Vec::as_slice))
            .collect();
        let (site_mean, site_sd) = mean_sd(&site_rows, j);
        let (survey_mean, survey_sd) = mean_sd(&survey_rows, k);
        Self {
            site_mean,
            site_sd,
            survey_mean,
            survey_sd,
        }
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        let (j, k) = data.feature_dims();
        if (j, k) != (self.site_mean.len(), self.survey_mean.len()) {
            return Err(CliError::Schema(format!(
                "normalization is for (J, K) = ({}, {}) but data has ({j}, {k})",
                self.site_mean.len(),
                self.survey_mean.len()
            )));
        }
        let scale = |v: &[f64], mean: &[f64], sd: &[f64]| -> Vec<f64> {
            v.iter()
                .zip(mean)
                .zip(sd)
                .map(|((x, m), s)| (x - m) / s)
                .collect()
        };
        let sites = data
            .sites()
            .iter()
            .map(|s| {
                SiteRecord::new(
                    scale(&s.site_features, &self.site_mean, &self.site_sd),
                    s.survey_features
                        .iter()
                        .map(|w| scale(w, &self.survey_mean, &self.survey_sd))
                        .collect(),
                    s.observations.clone(),
                )
            })
            .collect::<occnet::Result<Vec<_>>>()?;
        Ok(Dataset::new(sites, j, k)?)
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string(self).expect("finite statistics serialize");
        out.push('\n');
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::parse(path, e.line() as u64, e.column(), e.to_string()))
    }
}
