//! Dense multilayer perceptron with per-sample backpropagation.
//!
//! Parameters are stored per layer as a row-major `(fan_out, fan_in)` weight
//! matrix followed by a bias vector. The canonical flat ordering used by
//! [`flatten_params`] and by every gradient vector in the crate is: layer order,
//! weights row-major, then bias.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix, rejecting length mismatches and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "matrix entry ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Stacks equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// Gathers the given rows, in the given order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    ReLU,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::ReLU => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and activation `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::ReLU => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::ReLU),
            "tanh" => Ok(Activation::Tanh),
            other => Err(format!("unknown activation `{other}` (expected relu or tanh)")),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::ReLU => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpConfig {
    /// Three hidden layers of width 64 with ReLU.
    pub fn with_defaults(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: vec![64, 64, 64],
            output_dim,
            activation: Activation::ReLU,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() {
            return Err(Error::InvalidArgument("hidden_dims must be non-empty".into()));
        }
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidArgument("layer dimensions must be >= 1".into()));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in self.hidden_dims.iter().chain(std::iter::once(&self.output_dim)) {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `(fan_out, fan_in)`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn fan_in(&self) -> usize {
        self.weight.cols
    }

    pub fn fan_out(&self) -> usize {
        self.weight.rows
    }

    fn param_count(&self) -> usize {
        self.weight.data.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    layers: Vec<DenseLayer>,
    config: MlpConfig,
}

impl MlpModel {
    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    /// Parameters in canonical order.
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.data.iter().chain(l.bias.iter()))
    }

    /// Mutable parameters in canonical order.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.data.iter_mut().chain(l.bias.iter_mut()))
    }
}

/// Initializes weights from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` and zero biases.
pub fn init_model(config: &MlpConfig, seed: u64) -> Result<MlpModel> {
    config.validate()?;
    let mut rng = stream_rng(seed, Stream::Init, &[]);
    let layers = config
        .layer_dims()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite positive bound");
            let data = (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect();
            DenseLayer {
                weight: Matrix {
                    rows: fan_out,
                    cols: fan_in,
                    data,
                },
                bias: vec![0.0; fan_out],
            }
        })
        .collect();
    Ok(MlpModel {
        layers,
        config: config.clone(),
    })
}

/// Builds a model from explicit layers; shapes must chain as `config` describes.
pub fn model_from_layers(config: MlpConfig, layers: Vec<DenseLayer>) -> Result<MlpModel> {
    config.validate()?;
    let dims = config.layer_dims();
    if dims.len() != layers.len() {
        return Err(Error::Shape(format!(
            "{} layers for a config with {}",
            layers.len(),
            dims.len()
        )));
    }
    for (k, ((fan_in, fan_out), layer)) in dims.iter().zip(&layers).enumerate() {
        if layer.fan_in() != *fan_in || layer.fan_out() != *fan_out || layer.bias.len() != *fan_out
        {
            return Err(Error::Shape(format!("layer {k} does not match config")));
        }
    }
    Ok(MlpModel { layers, config })
}

/// Intermediate values of a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the input batch, the last entry the logits.
    activations: Vec<Matrix>,
    /// Pre-activations for each layer.
    pre: Vec<Matrix>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.activations[0].rows
    }

    pub fn logits(&self) -> &Matrix {
        self.activations.last().expect("at least one layer")
    }
}

pub fn forward(model: &MlpModel, batch: &Matrix) -> Result<(Matrix, ForwardCache)> {
    if batch.cols != model.config.input_dim {
        return Err(Error::Shape(format!(
            "batch has {} columns, model expects {}",
            batch.cols, model.config.input_dim
        )));
    }
    let n = batch.rows;
    let last = model.layers.len() - 1;
    let mut activations = Vec::with_capacity(model.layers.len() + 1);
    let mut pre = Vec::with_capacity(model.layers.len());
    activations.push(batch.clone());
    for (k, layer) in model.layers.iter().enumerate() {
        let input = &activations[k];
        let (fan_in, fan_out) = (layer.fan_in(), layer.fan_out());
        let mut z = Matrix::zeros(n, fan_out);
        for i in 0..n {
            let x = input.row(i);
            let zi = z.row_mut(i);
            for (o, zo) in zi.iter_mut().enumerate() {
                let w = &layer.weight.data[o * fan_in..(o + 1) * fan_in];
                *zo = dot(w, x) + layer.bias[o];
            }
        }
        let a = if k == last {
            z.clone()
        } else {
            let act = model.config.activation;
            Matrix {
                rows: n,
                cols: fan_out,
                data: z.data.iter().map(|&v| act.apply(v)).collect(),
            }
        };
        pre.push(z);
        activations.push(a);
    }
    let logits = activations.last().expect("non-empty").clone();
    Ok((logits, ForwardCache { activations, pre }))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Row-wise softmax.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let lse = log_sum_exp(row);
        row.iter_mut().for_each(|v| *v = (*v - lse).exp());
    }
    out
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape(format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Softmax cross-entropy; returns the mean and the per-sample losses.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    check_labels(labels, logits.rows, logits.cols)?;
    if labels.is_empty() {
        return Err(Error::Empty("cross-entropy of an empty batch".into()));
    }
    let per_sample: Vec<f64> = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = logits.row(i);
            log_sum_exp(row) - row[y]
        })
        .collect();
    let mean = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok((mean, per_sample))
}

/// One flat gradient vector per sample, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct PerSampleGrads {
    batch_size: usize,
    param_count: usize,
    data: Vec<f64>,
}

impl PerSampleGrads {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let batch_size = rows.len();
        if batch_size == 0 {
            return Err(Error::Empty("per-sample gradients need at least one sample".into()));
        }
        let param_count = rows[0].len();
        if rows.iter().any(|r| r.len() != param_count) {
            return Err(Error::Shape("per-sample gradients of different lengths".into()));
        }
        Ok(Self {
            batch_size,
            param_count,
            data: rows.concat(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.data[i * self.param_count..(i + 1) * self.param_count]
    }

    pub fn samples(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.param_count)
    }

    /// Mean over samples, summed in sample order.
    pub fn mean(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.param_count];
        for g in self.samples() {
            acc.iter_mut().zip(g).for_each(|(a, v)| *a += v);
        }
        let n = self.batch_size as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

/// Gradients of each sample's own loss (not the batch mean) with respect to
/// the flattened parameters, computed in a single batched backward pass.
pub fn backward_per_sample(
    model: &MlpModel,
    cache: &ForwardCache,
    labels: &[usize],
) -> Result<PerSampleGrads> {
    let n_layers = model.layers.len();
    if cache.pre.len() != n_layers
        || cache
            .pre
            .iter()
            .zip(&model.layers)
            .any(|(z, l)| z.cols != l.fan_out())
        || cache.activations[0].cols != model.config.input_dim
    {
        return Err(Error::Shape("forward cache was not produced by this model".into()));
    }
    let n = cache.batch_size();
    if n == 0 {
        return Err(Error::Empty("backward over an empty batch".into()));
    }
    let logits = cache.logits();
    check_labels(labels, logits.rows, logits.cols)?;

    let param_count = model.param_count();
    let mut offsets = Vec::with_capacity(n_layers);
    let mut off = 0;
    for l in &model.layers {
        offsets.push(off);
        off += l.param_count();
    }

    let mut data = vec![0.0; n * param_count];
    // dL_i/dz for the output layer: softmax - onehot
    let mut delta = softmax(logits);
    for (i, &y) in labels.iter().enumerate() {
        delta.data[i * delta.cols + y] -= 1.0;
    }
    let act = model.config.activation;
    for k in (0..n_layers).rev() {
        let layer = &model.layers[k];
        let (fan_in, fan_out) = (layer.fan_in(), layer.fan_out());
        let input = &cache.activations[k];
        for i in 0..n {
            let g = &mut data[i * param_count + offsets[k]..i * param_count + offsets[k] + layer.param_count()];
            let (gw, gb) = g.split_at_mut(fan_in * fan_out);
            let d = delta.row(i);
            let x = input.row(i);
            for (o, &d_o) in d.iter().enumerate() {
                let row = &mut gw[o * fan_in..(o + 1) * fan_in];
                row.iter_mut().zip(x).for_each(|(w, &xv)| *w = d_o * xv);
            }
            gb.copy_from_slice(d);
        }
        if k > 0 {
            let z_prev = &cache.pre[k - 1];
            let a_prev = &cache.activations[k];
            let mut next = Matrix::zeros(n, fan_in);
            for i in 0..n {
                let d = delta.row(i);
                let out = next.row_mut(i);
                for (o, &d_o) in d.iter().enumerate() {
                    let w = &layer.weight.data[o * fan_in..(o + 1) * fan_in];
                    out.iter_mut().zip(w).for_each(|(acc, &wv)| *acc += d_o * wv);
                }
                let (zr, ar) = (z_prev.row(i), a_prev.row(i));
                for j in 0..fan_in {
                    out[j] *= act.derivative(zr[j], ar[j]);
                }
            }
            delta = next;
        }
    }
    Ok(PerSampleGrads {
        batch_size: n,
        param_count,
        data,
    })
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Fraction of rows whose argmax logit equals the label.
pub fn evaluate(model: &MlpModel, features: &Matrix, labels: &[usize]) -> Result<f64> {
    Ok(loss_and_accuracy(model, features, labels)?.1)
}

/// Mean cross-entropy and accuracy over a dataset.
pub fn loss_and_accuracy(model: &MlpModel, features: &Matrix, labels: &[usize]) -> Result<(f64, f64)> {
    if features.rows == 0 {
        return Err(Error::Empty("evaluation on an empty dataset".into()));
    }
    let (logits, _) = forward(model, features)?;
    let (loss, _) = cross_entropy(&logits, labels)?;
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(logits.row(*i)) == y)
        .count();
    Ok((loss, correct as f64 / labels.len() as f64))
}

pub fn flatten_params(model: &MlpModel) -> Vec<f64> {
    model.params().copied().collect()
}

/// Returns a copy of `model` carrying the parameters in `params`.
pub fn unflatten_params(model: &MlpModel, params: &[f64]) -> Result<MlpModel> {
    let mut out = model.clone();
    set_params(&mut out, params)?;
    Ok(out)
}

pub fn set_params(model: &mut MlpModel, params: &[f64]) -> Result<()> {
    if params.len() != model.param_count() {
        return Err(Error::Shape(format!(
            "{} values for {} parameters",
            params.len(),
            model.param_count()
        )));
    }
    model.params_mut().zip(params).for_each(|(p, v)| *p = *v);
    Ok(())
}

/// Draws a batch of standard-normal features; handy for tests and examples.
pub fn random_batch<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    let dist = rand_distr::StandardNormal;
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Matrix { rows, cols, data }
}
