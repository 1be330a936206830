//! Datasets: a Gaussian-mixture task with an exact Bayes posterior, plus
//! IDX and CSV ingestion for small real datasets.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::seed::{self, stream};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad IDX magic: expected 00 00, found {0:02x} {1:02x}")]
    BadMagic(u8, u8),
    #[error("unsupported IDX type code 0x{0:02x} (only 0x08, unsigned byte, is supported)")]
    UnsupportedType(u8),
    #[error("IDX header truncated: need {expected} bytes, file has {actual}")]
    TruncatedHeader { expected: usize, actual: usize },
    #[error("IDX payload truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("IDX file has {0} trailing bytes after the payload")]
    TrailingBytes(usize),
    #[error("IDX dimensions {0:?} are invalid")]
    BadDims(Vec<usize>),
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("CSV has no column named `{0}`")]
    UnknownColumn(String),
    #[error("CSV has no feature columns besides the label `{0}`")]
    NoFeatures(String),
    #[error("CSV line {line}: expected {expected} fields, found {found}")]
    Ragged { line: u64, expected: u64, found: u64 },
    #[error("CSV line {line}, column `{column}`: `{value}` is not a number")]
    NonNumeric { line: u64, column: String, value: String },
    #[error("CSV line {line}: label `{value}` is not a non-negative integer")]
    BadLabel { line: u64, value: String },
    #[error("CSV parse error: {0}")]
    Csv(String),
    #[error("dataset is empty")]
    Empty,
    #[error("label {label} does not fit {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitId {
    Train,
    Test,
}

impl fmt::Display for SplitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitId::Train => "train",
            SplitId::Test => "test",
        })
    }
}

/// Inputs `[N × D]`, labels, and the true class posterior when the
/// generating process is known.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Row-major `[N × K]` Bayes posterior, kept in f64.
    pub posterior: Option<Vec<f64>>,
    pub split: SplitId,
}

impl DatasetSplit {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize, split: SplitId) -> Result<Self> {
        let rows = match inputs.shape() {
            [r, _] => *r,
            other => return Err(DataError::BadDims(other.to_vec())),
        };
        if rows != labels.len() {
            return Err(DataError::CountMismatch { images: rows, labels: labels.len() });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::LabelRange { label, classes: num_classes });
        }
        Ok(Self { inputs, labels, num_classes, posterior: None, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn posterior_row(&self, i: usize) -> Option<&[f64]> {
        let k = self.num_classes;
        self.posterior.as_ref().map(|p| &p[i * k..(i + 1) * k])
    }

    /// Inputs and labels for the given sample indices, in that order.
    pub fn gather(&self, indices: &[usize]) -> crate::tensor::Result<(Tensor, Vec<usize>)> {
        let d = self.input_dim();
        let src = self.inputs.data();
        let mut x = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            x.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::from_vec(vec![indices.len(), d], x)?, labels))
    }

    /// Widens the class count, e.g. when a test split lacks some labels.
    pub fn with_num_classes(mut self, k: usize) -> Result<Self> {
        if let Some(&label) = self.labels.iter().find(|&&l| l >= k) {
            return Err(DataError::LabelRange { label, classes: k });
        }
        self.num_classes = k;
        Ok(self)
    }
}

/// A train/test pair plus an identifier used in reports.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub id: String,
    pub train: DatasetSplit,
    pub test: DatasetSplit,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.train.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.train.input_dim()
    }

    pub fn has_posterior(&self) -> bool {
        self.train.posterior.is_some() && self.test.posterior.is_some()
    }
}

/// K isotropic Gaussians with equal priors, means spaced evenly on a circle
/// of radius `radius` in the first two input coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub radius: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 5,
            input_dim: 2,
            train_samples: 2000,
            test_samples: 2000,
            radius: 2.0,
            sigma: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DataError::Spec(m.to_string()));
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.input_dim == 0 {
            return bad("input_dim must be positive");
        }
        if self.train_samples == 0 || self.test_samples == 0 {
            return bad("both splits need at least one sample");
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return bad("radius must be positive");
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be positive");
        }
        Ok(())
    }

    pub fn class_means(&self) -> Vec<Vec<f64>> {
        (0..self.num_classes)
            .map(|k| {
                let theta = 2.0 * PI * k as f64 / self.num_classes as f64;
                let mut mu = vec![0.0; self.input_dim];
                mu[0] = self.radius * theta.cos();
                if self.input_dim > 1 {
                    mu[1] = self.radius * theta.sin();
                }
                mu
            })
            .collect()
    }

    /// Bayes posterior `p(k | x)` under equal priors, via a stable
    /// log-sum-exp over the class log-densities.
    pub fn posterior_at(&self, x: &[f64]) -> Vec<f64> {
        let var2 = 2.0 * self.sigma * self.sigma;
        let logits: Vec<f64> = self
            .class_means()
            .iter()
            .map(|mu| -mu.iter().zip(x).map(|(m, v)| (v - m) * (v - m)).sum::<f64>() / var2)
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    pub fn id(&self) -> String {
        format!(
            "synthetic(k={},d={},r={},sigma={},seed={})",
            self.num_classes, self.input_dim, self.radius, self.sigma, self.seed
        )
    }
}

/// Draws `train_samples + test_samples` points from one stream; the first
/// block is the train split, the rest the test split.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = seed::rng(seed::derive(spec.seed, stream::DATA));
    let means = spec.class_means();
    let (k, d) = (spec.num_classes, spec.input_dim);
    let mut make = |n: usize, split: SplitId| -> Result<DatasetSplit> {
        let mut x = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        let mut posterior = Vec::with_capacity(n * k);
        for _ in 0..n {
            let c = rng.random_range(0..k);
            let point: Vec<f32> = means[c]
                .iter()
                .map(|m| {
                    let z: f64 = rng.sample(StandardNormal);
                    (m + spec.sigma * z) as f32
                })
                .collect();
            let as64: Vec<f64> = point.iter().map(|&v| v as f64).collect();
            posterior.extend(spec.posterior_at(&as64));
            x.extend(point);
            labels.push(c);
        }
        let mut s = DatasetSplit::new(Tensor::from_vec(vec![n, d], x)?, labels, k, split)?;
        s.posterior = Some(posterior);
        Ok(s)
    };
    let train = make(spec.train_samples, SplitId::Train)?;
    let test = make(spec.test_samples, SplitId::Test)?;
    Ok(Dataset { id: spec.id(), train, test })
}

/// Sample indices grouped into batches, shuffled by `epoch_seed`. The last
/// batch keeps the remainder.
pub fn batches(split: &DatasetSplit, batch_size: usize, epoch_seed: u64) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..split.len()).collect();
    order.shuffle(&mut seed::rng(epoch_seed));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Raw contents of an IDX file.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub bytes: Vec<u8>,
}

/// Parses a big-endian IDX container of unsigned bytes.
pub fn parse_idx(raw: &[u8]) -> Result<IdxArray> {
    if raw.len() < 4 {
        return Err(DataError::TruncatedHeader { expected: 4, actual: raw.len() });
    }
    if raw[0] != 0 || raw[1] != 0 {
        return Err(DataError::BadMagic(raw[0], raw[1]));
    }
    if raw[2] != 0x08 {
        return Err(DataError::UnsupportedType(raw[2]));
    }
    let rank = raw[3] as usize;
    let header = 4 + 4 * rank;
    if raw.len() < header {
        return Err(DataError::TruncatedHeader { expected: header, actual: raw.len() });
    }
    let dims: Vec<usize> = raw[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    if dims.is_empty() || dims.contains(&0) {
        return Err(DataError::BadDims(dims));
    }
    let expected: usize = dims.iter().product();
    let actual = raw.len() - header;
    if actual < expected {
        return Err(DataError::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(DataError::TrailingBytes(actual - expected));
    }
    Ok(IdxArray { dims, bytes: raw[header..].to_vec() })
}

pub fn read_idx(path: impl AsRef<Path>) -> Result<IdxArray> {
    let path = path.as_ref();
    parse_idx(&fs::read(path).map_err(io_err(path))?)
}

/// Loads an IDX file as a tensor of its declared shape, bytes rescaled to [0, 1].
pub fn load_idx(path: impl AsRef<Path>) -> Result<Tensor> {
    let arr = read_idx(path)?;
    let data = arr.bytes.iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Tensor::from_vec(arr.dims, data)?)
}

/// Loads an image file and a rank-1 label file into one split; each image is
/// flattened into a row.
pub fn load_idx_split(images: impl AsRef<Path>, labels: impl AsRef<Path>, split: SplitId) -> Result<DatasetSplit> {
    let img = load_idx(images)?;
    let lab = read_idx(labels)?;
    if lab.dims.len() != 1 {
        return Err(DataError::BadDims(lab.dims));
    }
    let n = img.shape()[0];
    if n != lab.dims[0] {
        return Err(DataError::CountMismatch { images: n, labels: lab.dims[0] });
    }
    let d = img.numel() / n;
    let inputs = Tensor::from_vec(vec![n, d], img.to_vec())?;
    let labels: Vec<usize> = lab.bytes.iter().map(|&b| b as usize).collect();
    let k = labels.iter().max().map_or(2, |m| (m + 1).max(2));
    DatasetSplit::new(inputs, labels, k, split)
}

/// Reads a rectangular numeric CSV with a header row. Every column other
/// than `label_column` becomes a feature.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str, split: SplitId) -> Result<DatasetSplit> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(false).trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers().map_err(csv_err)?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| DataError::UnknownColumn(label_column.to_string()))?;
    let d = headers.len() - 1;
    if d == 0 {
        return Err(DataError::NoFeatures(label_column.to_string()));
    }
    let mut x = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        for (j, cell) in record.iter().enumerate() {
            if j == label_idx {
                labels.push(parse_label(cell).ok_or_else(|| DataError::BadLabel { line, value: cell.to_string() })?);
            } else {
                let v: f32 = cell.parse().map_err(|_| DataError::NonNumeric {
                    line,
                    column: headers[j].to_string(),
                    value: cell.to_string(),
                })?;
                x.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(DataError::Empty);
    }
    let k = labels.iter().max().map_or(2, |m| (m + 1).max(2));
    DatasetSplit::new(Tensor::from_vec(vec![labels.len(), d], x)?, labels, k, split)
}

fn parse_label(cell: &str) -> Option<usize> {
    if let Ok(v) = cell.parse::<usize>() {
        return Some(v);
    }
    let f: f64 = cell.parse().ok()?;
    (f >= 0.0 && f.fract() == 0.0 && f < u32::MAX as f64).then_some(f as usize)
}

fn csv_err(e: csv::Error) -> DataError {
    if let csv::ErrorKind::UnequalLengths { pos, expected_len, len } = e.kind() {
        return DataError::Ragged {
            line: pos.as_ref().map_or(0, |p| p.line()),
            expected: *expected_len,
            found: *len,
        };
    }
    DataError::Csv(e.to_string())
}

/// Writes features as `x0..x{D-1}` plus the label column.
pub fn save_csv(split: &DatasetSplit, path: impl AsRef<Path>, label_column: &str) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let d = split.input_dim();
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.push(label_column.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for (i, &label) in split.labels.iter().enumerate() {
        let mut row: Vec<String> = split.inputs.row(i).iter().map(|v| v.to_string()).collect();
        row.push(label.to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}
