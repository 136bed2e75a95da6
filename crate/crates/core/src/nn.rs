//! Dense ReLU networks without bias terms.
//!
//! A net of depth `L` holds `L - 1` hidden weight matrices followed by an output
//! vector, and computes
//!
//! ```text
//! logit = output . relu(W_{L-1} relu( ... relu(W_1 input)))
//! ```
//!
//! With depth 1 there are no hidden matrices and the output vector acts directly on
//! the input, giving a linear logit. The "first layer" of a net is `W_1`, or the
//! output vector viewed as a `1 x input_dim` matrix when depth is 1; that is the
//! layer the group penalty and feature importance look at.

use rand::distr::{Distribution, Uniform};

use crate::error::{invalid, Error, Result};
use crate::rng;

/// Columns with a Euclidean norm at or below this are treated as zero.
pub const COLUMN_NORM_FLOOR: f64 = 1e-12;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_cols) {
            return Err(invalid("matrix rows have unequal lengths"));
        }
        let data = rows.iter().flatten().copied().collect();
        Ok(Self {
            rows: n_rows,
            cols: n_cols,
            data,
        })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn column_norm(&self, c: usize) -> f64 {
        (0..self.rows)
            .map(|r| self.get(r, c).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    fn mat_vec(&self, input: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|r| dot(self.row(r), input)).collect()
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// l2,1 norm: the sum over columns of each column's Euclidean norm.
pub fn group_norm(matrix: &Matrix) -> f64 {
    (0..matrix.cols()).map(|c| matrix.column_norm(c)).sum()
}

/// A subgradient of [`group_norm`]. Each column is scaled to unit norm; columns whose
/// norm is at most [`COLUMN_NORM_FLOOR`] map to zero.
pub fn group_norm_subgradient(matrix: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(matrix.rows(), matrix.cols());
    for c in 0..matrix.cols() {
        let norm = matrix.column_norm(c);
        if norm > COLUMN_NORM_FLOOR {
            for r in 0..matrix.rows() {
                out.set(r, c, matrix.get(r, c) / norm);
            }
        }
    }
    out
}

/// Weights of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    hidden: Vec<Matrix>,
    output: Vec<f64>,
}

/// Post-ReLU outputs of every hidden layer, cached by [`NetParams::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Activations {
    layers: Vec<Vec<f64>>,
}

impl Activations {
    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }
}

impl NetParams {
    /// Builds a net from hidden matrices (input side first) and the output vector.
    pub fn new(hidden: Vec<Matrix>, output: Vec<f64>) -> Result<Self> {
        for pair in hidden.windows(2) {
            if pair[1].cols() != pair[0].rows() {
                return Err(invalid(format!(
                    "layer shapes do not chain: {}x{} followed by {}x{}",
                    pair[0].rows(),
                    pair[0].cols(),
                    pair[1].rows(),
                    pair[1].cols()
                )));
            }
        }
        if let Some(last) = hidden.last() {
            if last.rows() != output.len() {
                return Err(invalid(format!(
                    "output vector has length {} but last hidden layer has {} units",
                    output.len(),
                    last.rows()
                )));
            }
        }
        if hidden.iter().any(|m| m.rows() == 0 || m.cols() == 0) || output.is_empty() {
            return Err(invalid("layers must be nonempty"));
        }
        Ok(Self { hidden, output })
    }

    /// Glorot-uniform initialization, deterministic in `seed`.
    pub fn init(input_dim: usize, hidden_width: usize, depth: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden_width == 0 || depth == 0 {
            return Err(invalid(format!(
                "dimensions must be positive (input_dim={input_dim}, hidden_width={hidden_width}, depth={depth})"
            )));
        }
        let mut rng = rng::seeded(seed);
        let mut draw = |fan_in: usize, fan_out: usize, n: usize| -> Vec<f64> {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite positive limit");
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        };
        let mut hidden = Vec::with_capacity(depth - 1);
        let mut fan_in = input_dim;
        for _ in 1..depth {
            let data = draw(fan_in, hidden_width, hidden_width * fan_in);
            hidden.push(Matrix::from_vec(hidden_width, fan_in, data)?);
            fan_in = hidden_width;
        }
        let output = draw(fan_in, 1, fan_in);
        Self::new(hidden, output)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            hidden: self
                .hidden
                .iter()
                .map(|m| Matrix::zeros(m.rows(), m.cols()))
                .collect(),
            output: vec![0.0; self.output.len()],
        }
    }

    pub fn hidden(&self) -> &[Matrix] {
        &self.hidden
    }

    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn depth(&self) -> usize {
        self.hidden.len() + 1
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.first().map_or(self.output.len(), Matrix::cols)
    }

    /// Hidden width, or `None` for a linear net.
    pub fn width(&self) -> Option<usize> {
        self.hidden.first().map(Matrix::rows)
    }

    /// The input-side weight matrix; for depth 1 the output vector as a single row.
    pub fn first_layer(&self) -> Matrix {
        match self.hidden.first() {
            Some(m) => m.clone(),
            None => Matrix {
                rows: 1,
                cols: self.output.len(),
                data: self.output.clone(),
            },
        }
    }

    /// Multiplies every first-layer weight by `factor`.
    pub fn scale_first_layer(&mut self, factor: f64) {
        match self.hidden.first_mut() {
            Some(m) => m.data.iter_mut().for_each(|v| *v *= factor),
            None => self.output.iter_mut().for_each(|v| *v *= factor),
        }
    }

    pub fn num_weights(&self) -> usize {
        self.hidden.iter().map(|m| m.data.len()).sum::<usize>() + self.output.len()
    }

    /// All weights flattened: hidden matrices in order (row-major), then the output.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_weights());
        for m in &self.hidden {
            out.extend_from_slice(&m.data);
        }
        out.extend_from_slice(&self.output);
        out
    }

    pub fn flat_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.hidden
            .iter_mut()
            .flat_map(|m| m.data.iter_mut())
            .chain(self.output.iter_mut())
    }

    pub fn forward(&self, input: &[f64]) -> Result<(f64, Activations)> {
        if input.len() != self.input_dim() {
            return Err(invalid(format!(
                "input has length {}, net expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        Ok(self.forward_unchecked(input))
    }

    pub(crate) fn forward_unchecked(&self, input: &[f64]) -> (f64, Activations) {
        let mut layers: Vec<Vec<f64>> = Vec::with_capacity(self.hidden.len());
        for m in &self.hidden {
            let prev = layers.last().map_or(input, Vec::as_slice);
            let mut z = m.mat_vec(prev);
            z.iter_mut().for_each(|v| *v = v.max(0.0));
            layers.push(z);
        }
        let last = layers.last().map_or(input, Vec::as_slice);
        (dot(&self.output, last), Activations { layers })
    }

    #[cfg(test)]
    pub(crate) fn pre_activations(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = Vec::new();
        let mut prev = input.to_vec();
        for m in &self.hidden {
            let z = m.mat_vec(&prev);
            prev = z.iter().map(|v| v.max(0.0)).collect();
            out.push(z);
        }
        out
    }

    /// Logit only, for prediction.
    pub fn logit(&self, input: &[f64]) -> Result<f64> {
        self.forward(input).map(|(logit, _)| logit)
    }

    /// Gradient of `upstream * logit` with respect to every weight.
    pub fn backward(
        &self,
        input: &[f64],
        activations: &Activations,
        upstream: f64,
    ) -> Result<NetGradient> {
        let mut grad = NetGradient::zeros_for(self);
        self.check_cache(input, activations)?;
        self.accumulate_backward(input, activations, upstream, &mut grad);
        Ok(grad)
    }

    fn check_cache(&self, input: &[f64], activations: &Activations) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::Inconsistent(format!(
                "input has length {}, net expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        let shapes_match = activations.layers.len() == self.hidden.len()
            && activations
                .layers
                .iter()
                .zip(&self.hidden)
                .all(|(a, m)| a.len() == m.rows());
        if !shapes_match {
            return Err(Error::Inconsistent(
                "cached activations do not match the network shape".into(),
            ));
        }
        Ok(())
    }

    /// Adds the gradient of `upstream * logit` into `grad`. Shapes are assumed valid.
    pub(crate) fn accumulate_backward(
        &self,
        input: &[f64],
        activations: &Activations,
        upstream: f64,
        grad: &mut NetGradient,
    ) {
        if upstream == 0.0 {
            return;
        }
        let acts = &activations.layers;
        let last = acts.last().map_or(input, Vec::as_slice);
        for (g, a) in grad.0.output.iter_mut().zip(last) {
            *g += upstream * a;
        }
        if self.hidden.is_empty() {
            return;
        }
        // delta holds d(upstream * logit)/d(pre-activation) of the current layer.
        let mut delta: Vec<f64> = self
            .output
            .iter()
            .zip(last)
            .map(|(w, a)| if *a > 0.0 { upstream * w } else { 0.0 })
            .collect();
        for l in (0..self.hidden.len()).rev() {
            let prev = if l == 0 {
                input
            } else {
                acts[l - 1].as_slice()
            };
            let w = &self.hidden[l];
            let g = &mut grad.0.hidden[l];
            for (r, &dr) in delta.iter().enumerate() {
                if dr == 0.0 {
                    continue;
                }
                let row = &mut g.data[r * w.cols..(r + 1) * w.cols];
                for (gv, p) in row.iter_mut().zip(prev) {
                    *gv += dr * p;
                }
            }
            if l > 0 {
                let mut next = vec![0.0; w.cols];
                for (r, &dr) in delta.iter().enumerate() {
                    if dr == 0.0 {
                        continue;
                    }
                    for (n, wv) in next.iter_mut().zip(w.row(r)) {
                        *n += dr * wv;
                    }
                }
                for (n, a) in next.iter_mut().zip(prev) {
                    if *a <= 0.0 {
                        *n = 0.0;
                    }
                }
                delta = next;
            }
        }
    }

    /// `self -= step * grad`.
    pub fn apply_step(&mut self, grad: &NetGradient, step: f64) {
        for (w, g) in self.flat_mut().zip(grad.0.flat()) {
            *w -= step * g;
        }
    }
}

/// Derivatives of some scalar with respect to every weight of a [`NetParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetGradient(NetParams);

impl NetGradient {
    pub fn zeros_for(params: &NetParams) -> Self {
        Self(params.zeros_like())
    }

    pub fn as_params(&self) -> &NetParams {
        &self.0
    }

    pub fn flat(&self) -> Vec<f64> {
        self.0.flat()
    }

    pub fn first_layer(&self) -> Matrix {
        self.0.first_layer()
    }

    pub fn scale(&mut self, factor: f64) {
        self.0.flat_mut().for_each(|v| *v *= factor);
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &NetGradient, factor: f64) {
        for (a, b) in self.0.flat_mut().zip(other.0.flat()) {
            *a += factor * b;
        }
    }

    /// Adds `factor` times a matrix shaped like the first layer into the first layer.
    pub(crate) fn add_to_first_layer(&mut self, m: &Matrix, factor: f64) {
        let target = match self.0.hidden.first_mut() {
            Some(h) => h.data.as_mut_slice(),
            None => self.0.output.as_mut_slice(),
        };
        for (a, b) in target.iter_mut().zip(&m.data) {
            *a += factor * b;
        }
    }
}
