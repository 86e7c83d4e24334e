//! Datasets: CSV ingestion, synthetic two-class blobs, splitting and z-scoring.
//!
//! CSV schema: UTF-8, comma separated, mandatory header, final column named
//! `label` holding a non-negative integer class index, all other columns
//! float64 features in decimal notation.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub name: String,
    /// Feature column names; `f0, f1, ...` when not read from a file.
    pub feature_names: Vec<String>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, name: impl Into<String>) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::Shape(format!(
                "{} labels for {} rows",
                labels.len(),
                features.rows()
            )));
        }
        let feature_names = (0..features.cols()).map(|j| format!("f{j}")).collect();
        Ok(Self {
            features,
            labels,
            name: name.into(),
            feature_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    /// `max(label) + 1`, and at least 2.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(2, |m| (m + 1).max(2))
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            name: name.into(),
            feature_names: self.feature_names.clone(),
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::Data { line: 1, message: "empty file".into() });
    }
    if headers.len() < 2 {
        return Err(Error::Data { line: 1, message: "need at least one feature column and a label".into() });
    }
    let n_cols = headers.len();
    if headers[n_cols - 1].trim() != "label" {
        return Err(Error::Data {
            line: 1,
            message: format!("final column must be `label`, found `{}`", &headers[n_cols - 1]),
        });
    }
    let d = n_cols - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != n_cols {
            return Err(Error::Data {
                line,
                message: format!("expected {n_cols} fields, found {}", record.len()),
            });
        }
        for (j, field) in record.iter().take(d).enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| Error::Data {
                line,
                message: format!("column `{}`: `{field}` is not a number", &headers[j]),
            })?;
            if !v.is_finite() {
                return Err(Error::Data {
                    line,
                    message: format!("column `{}`: non-finite value `{field}`", &headers[j]),
                });
            }
            data.push(v);
        }
        let raw = record[d].trim();
        let label: usize = raw.parse().map_err(|_| Error::Data {
            line,
            message: format!("label `{raw}` is not a non-negative integer"),
        })?;
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::Data { line: 2, message: "no data rows".into() });
    }
    let features = Matrix::new(labels.len(), d, data)?;
    let name = path
        .file_stem()
        .map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned());
    Ok(Dataset {
        features,
        labels,
        name,
        feature_names: headers.iter().take(d).map(str::to_string).collect(),
    })
}

/// Writes shortest round-trip decimal representations, so `load_csv` recovers
/// every value bit for bit.
pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(File::create(path)?);
    let mut header = dataset.feature_names.join(",");
    header.push_str(",label\n");
    w.write_all(header.as_bytes())?;
    for i in 0..dataset.len() {
        let mut line = String::new();
        for v in dataset.features.row(i) {
            line.push_str(&v.to_string());
            line.push(',');
        }
        line.push_str(&dataset.labels[i].to_string());
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train: 0.6, val: 0.2, test: 0.2 }
    }
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let s = Self { train, val, test };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(*p > 0.0)) {
            return Err(Error::InvalidArgument("split fractions must be positive".into()));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument("split fractions must sum to 1".into()));
        }
        Ok(())
    }
}

/// Seeded shuffle, then contiguous cut into `floor(train*N)`, `floor(val*N)`
/// and the remainder.
pub fn split(dataset: &Dataset, spec: &SplitSpec, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    let n = dataset.len();
    if n < 5 {
        return Err(Error::InvalidArgument(format!("cannot split {n} samples (need >= 5)")));
    }
    let n_train = (spec.train * n as f64).floor() as usize;
    let n_val = (spec.val * n as f64).floor() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::InvalidArgument(format!("split of {n} samples leaves an empty part")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, Stream::Split, &[]));
    let (train, rest) = idx.split_at(n_train);
    let (val, test) = rest.split_at(n_val);
    Ok((
        dataset.subset(train, format!("{}-train", dataset.name)),
        dataset.subset(val, format!("{}-val", dataset.name)),
        dataset.subset(test, format!("{}-test", dataset.name)),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub n_features: usize,
    pub class_separation: f64,
    pub noise_std: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 || self.n_features == 0 {
            return Err(Error::InvalidArgument("need n_samples >= 2 and n_features >= 1".into()));
        }
        if !(self.noise_std > 0.0) || !self.class_separation.is_finite() {
            return Err(Error::InvalidArgument("noise_std must be > 0 and separation finite".into()));
        }
        Ok(())
    }

    /// Class means `-/+ separation/2 * u` with `u = (1, ..., 1) / sqrt(d)`.
    pub fn class_mean(&self, class: usize) -> Vec<f64> {
        let sign = if class == 0 { -1.0 } else { 1.0 };
        let c = sign * 0.5 * self.class_separation / (self.n_features as f64).sqrt();
        vec![c; self.n_features]
    }
}

/// Two isotropic Gaussian classes; labels alternate so the classes are balanced.
pub fn synth_blobs(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = stream_rng(seed, Stream::Synth, &[]);
    let noise = Normal::new(0.0, spec.noise_std)
        .map_err(|e| Error::InvalidArgument(format!("noise: {e}")))?;
    let means = [spec.class_mean(0), spec.class_mean(1)];
    let mut data = Vec::with_capacity(spec.n_samples * spec.n_features);
    let mut labels = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let y = i % 2;
        data.extend(means[y].iter().map(|m| m + noise.sample(&mut rng)));
        labels.push(y);
    }
    Dataset::new(Matrix::new(spec.n_samples, spec.n_features, data)?, labels, "blobs")
}

/// Per-feature z-score statistics fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    /// `None` marks a constant column, which passes through untouched.
    pub std: Vec<Option<f64>>,
}

pub fn normalize_fit(train: &Dataset) -> Result<Normalizer> {
    let n = train.len();
    if n == 0 {
        return Err(Error::Empty("cannot fit a normalizer on an empty dataset".into()));
    }
    let d = train.n_features();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        mean.iter_mut().zip(train.features.row(i)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for i in 0..n {
        for (j, v) in train.features.row(i).iter().enumerate() {
            let c = v - mean[j];
            var[j] += c * c;
        }
    }
    let std = var
        .iter()
        .zip(&mean)
        .map(|(v, m)| {
            let s = (v / n as f64).sqrt();
            (s > 1e-12 * m.abs().max(1.0)).then_some(s)
        })
        .collect();
    Ok(Normalizer { mean, std })
}

pub fn normalize_apply(norm: &Normalizer, dataset: &Dataset) -> Result<Dataset> {
    if norm.mean.len() != dataset.n_features() {
        return Err(Error::Shape(format!(
            "normalizer for {} features applied to {}",
            norm.mean.len(),
            dataset.n_features()
        )));
    }
    let mut out = dataset.clone();
    for i in 0..out.len() {
        for (j, v) in out.features.row_mut(i).iter_mut().enumerate() {
            if let Some(s) = norm.std[j] {
                *v = (*v - norm.mean[j]) / s;
            }
        }
    }
    Ok(out)
}
