//! Dataset loading, synthetic data and minibatch sampling.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, RngState};
use crate::model::Shape;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Per-channel standardization fitted on a training set.
///
/// For image data a channel is one colour plane; for flat data every
/// feature is its own channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Features are stored one sample per row, in the layout the network
/// expects for `shape` (channel-major for images).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    classes: usize,
    shape: Shape,
    normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, classes: usize, shape: Shape) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::InvalidArgument("dataset is empty".into()));
        }
        if features.rows() != labels.len() {
            return Err(Error::shape(
                "Dataset::new",
                format!("{} feature rows, {} labels", features.rows(), labels.len()),
            ));
        }
        if features.cols() != shape.size() {
            return Err(Error::shape(
                "Dataset::new",
                format!("{} features per row for shape {:?}", features.cols(), shape),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {classes})"
            )));
        }
        if !features.is_finite() {
            return Err(Error::InvalidArgument("non-finite feature value".into()));
        }
        Ok(Self {
            features,
            labels,
            classes,
            shape,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    /// Rows `indices` as a `(features, labels)` minibatch.
    pub fn batch(&self, indices: &[usize]) -> (Matrix, Vec<usize>) {
        let d = self.features.cols();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
        }
        let x = Matrix::from_vec(indices.len(), d, data).expect("rows copied from a valid matrix");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("empty subset".into()));
        }
        let (features, labels) = self.batch(indices);
        Ok(Dataset {
            features,
            labels,
            classes: self.classes,
            shape: self.shape,
            normalization: self.normalization.clone(),
        })
    }

    /// Seeded shuffle into `(train, test)` with `round(test_fraction·N)`
    /// test records.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "test fraction must lie in (0, 1), got {test_fraction}"
            )));
        }
        let n = self.len();
        let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);
        let mut order: Vec<usize> = (0..n).collect();
        shuffle(&mut order, &mut RngState::new(seed));
        let (test, train) = order.split_at(n_test);
        Ok((self.subset(train)?, self.subset(test)?))
    }

    fn channels(&self) -> (usize, usize) {
        match self.shape {
            Shape::Image {
                channels,
                height,
                width,
            } => (channels, height * width),
            Shape::Flat { size } => (size, 1),
        }
    }

    /// Per-channel mean and standard deviation of this dataset.
    pub fn fit_normalization(&self) -> Normalization {
        let (channels, plane) = self.channels();
        let count = (self.len() * plane) as f64;
        let mut mean = vec![0.0; channels];
        let mut sq = vec![0.0; channels];
        for s in 0..self.len() {
            for (k, &v) in self.features.row(s).iter().enumerate() {
                mean[k / plane] += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for s in 0..self.len() {
            for (k, &v) in self.features.row(s).iter().enumerate() {
                let d = v - mean[k / plane];
                sq[k / plane] += d * d;
            }
        }
        let std = sq
            .into_iter()
            .map(|s| {
                let sd = (s / count).sqrt();
                if sd > 1e-8 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Normalization { mean, std }
    }

    /// Applies `norm` unless this dataset already carries exactly it.
    pub fn standardize(&mut self, norm: &Normalization) -> Result<()> {
        if self.normalization.as_ref() == Some(norm) {
            return Ok(());
        }
        if self.normalization.is_some() {
            return Err(Error::InvalidArgument(
                "dataset is already standardized with different statistics".into(),
            ));
        }
        let (channels, plane) = self.channels();
        if norm.mean.len() != channels || norm.std.len() != channels {
            return Err(Error::shape(
                "Dataset::standardize",
                format!("{} channels, statistics for {}", channels, norm.mean.len()),
            ));
        }
        for s in 0..self.len() {
            for (k, v) in self.features.row_mut(s).iter_mut().enumerate() {
                let c = k / plane;
                *v = (*v - norm.mean[c]) / norm.std[c];
            }
        }
        self.normalization = Some(norm.clone());
        Ok(())
    }
}

fn shuffle(v: &mut [usize], rng: &mut RngState) {
    for i in (1..v.len()).rev() {
        let j = rng.below(i + 1);
        v.swap(i, j);
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn check_len(path: &Path, bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: expected as u64,
            actual: bytes.len() as u64,
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!(
                "{} trailing bytes after {expected} expected",
                bytes.len() - expected
            ),
        });
    }
    Ok(())
}

fn class_count(labels: &[usize]) -> usize {
    labels.iter().copied().max().map_or(2, |m| (m + 1).max(2))
}

/// IDX image/label pair; pixels are scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = read_file(images)?;
    if img.len() < 16 {
        return Err(Error::Truncated {
            path: images.to_path_buf(),
            expected: 16,
            actual: img.len() as u64,
        });
    }
    let magic = be_u32(&img, 0);
    if magic != IDX_IMAGES {
        return Err(Error::Format {
            path: images.to_path_buf(),
            msg: format!("magic {magic:#010x}, expected {IDX_IMAGES:#010x}"),
        });
    }
    let (n, rows, cols) = (
        be_u32(&img, 4) as usize,
        be_u32(&img, 8) as usize,
        be_u32(&img, 12) as usize,
    );
    check_len(images, &img, 16 + n * rows * cols)?;

    let lab = read_file(labels)?;
    if lab.len() < 8 {
        return Err(Error::Truncated {
            path: labels.to_path_buf(),
            expected: 8,
            actual: lab.len() as u64,
        });
    }
    let magic = be_u32(&lab, 0);
    if magic != IDX_LABELS {
        return Err(Error::Format {
            path: labels.to_path_buf(),
            msg: format!("magic {magic:#010x}, expected {IDX_LABELS:#010x}"),
        });
    }
    let n_labels = be_u32(&lab, 4) as usize;
    check_len(labels, &lab, 8 + n_labels)?;
    if n_labels != n {
        return Err(Error::Format {
            path: labels.to_path_buf(),
            msg: format!("{n_labels} labels for {n} images"),
        });
    }

    let features = img[16..].iter().map(|&b| f64::from(b) / 255.0).collect();
    let features = Matrix::from_vec(n, rows * cols, features)?;
    let labels: Vec<usize> = lab[8..].iter().map(|&b| usize::from(b)).collect();
    let classes = class_count(&labels);
    Dataset::new(
        features,
        labels,
        classes,
        Shape::Image {
            channels: 1,
            height: rows,
            width: cols,
        },
    )
}

/// CIFAR-10 binary batches (`label byte + 3·32·32` channel-major pixels per
/// record), concatenated in the given order.
pub fn load_cifar10(files: &[PathBuf]) -> Result<Dataset> {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for path in files {
        let bytes = read_file(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            let whole = bytes.len().div_ceil(CIFAR_RECORD).max(1) * CIFAR_RECORD;
            return Err(Error::Truncated {
                path: path.clone(),
                expected: whole as u64,
                actual: bytes.len() as u64,
            });
        }
        for record in bytes.chunks_exact(CIFAR_RECORD) {
            if record[0] > 9 {
                return Err(Error::Format {
                    path: path.clone(),
                    msg: format!("label {} outside 0..10", record[0]),
                });
            }
            labels.push(usize::from(record[0]));
            features.extend(record[1..].iter().map(|&b| f64::from(b) / 255.0));
        }
    }
    let n = labels.len();
    Dataset::new(
        Matrix::from_vec(n, 3 * 32 * 32, features)?,
        labels,
        10,
        Shape::Image {
            channels: 3,
            height: 32,
            width: 32,
        },
    )
}

/// CSV with a header row; `label` names the integer class column and every
/// other column is a numeric feature.
pub fn load_csv(path: &Path, label: &str) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let label_col = headers
        .iter()
        .position(|h| h == label)
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            msg: format!("no column named `{label}`"),
        })?;
    let d = headers.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let bad = |field: &str| Error::Format {
            path: path.to_path_buf(),
            msg: format!("record {}: cannot parse `{field}`", line + 1),
        };
        for (k, field) in record.iter().enumerate() {
            let field = field.trim();
            if k == label_col {
                labels.push(field.parse::<usize>().map_err(|_| bad(field))?);
            } else {
                features.push(field.parse::<f64>().map_err(|_| bad(field))?);
            }
        }
    }
    let n = labels.len();
    let classes = class_count(&labels);
    Dataset::new(
        Matrix::from_vec(n, d, features)?,
        labels,
        classes,
        Shape::Flat { size: d },
    )
}

/// Isotropic unit-variance Gaussian clusters.
///
/// Sample `i` has label `i mod classes`. Class `c` is centred at
/// `±4·(1 + ⌊c / 2dim⌋)·e_{c mod dim}`, with the sign flipping every `dim`
/// classes, so classes on different axes are about `5.7σ` apart.
pub fn synth_gaussian_blobs(classes: usize, dim: usize, n: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 || dim == 0 || n == 0 {
        return Err(Error::InvalidArgument(format!(
            "blobs need classes ≥ 2, dim ≥ 1, n ≥ 1 (got {classes}, {dim}, {n})"
        )));
    }
    let mut rng = RngState::new(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let features = Matrix::from_fn(n, dim, |i, j| {
        let c = labels[i];
        let centre = if c % dim == j {
            let sign = if (c / dim) % 2 == 0 { 1.0 } else { -1.0 };
            sign * 4.0 * (1 + c / (2 * dim)) as f64
        } else {
            0.0
        };
        centre + rng.standard_normal()
    });
    Dataset::new(features, labels, classes, Shape::Flat { size: dim })
}

/// Poisson subsampling: each of `n` records independently with probability
/// `q`, returned in increasing order.
pub fn poisson_sample(n: usize, q: f64, rng: &mut RngState) -> Result<Vec<usize>> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "sampling rate must lie in (0, 1], got {q}"
        )));
    }
    Ok((0..n).filter(|_| rng.uniform() < q).collect())
}

/// `size` distinct records drawn uniformly, in increasing order.
pub fn fixed_size_sample(n: usize, size: usize, rng: &mut RngState) -> Result<Vec<usize>> {
    if size > n {
        return Err(Error::InvalidArgument(format!(
            "batch of {size} from {n} records"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    for i in 0..size {
        let j = i + rng.below(n - i);
        order.swap(i, j);
    }
    let mut batch = order[..size].to_vec();
    batch.sort_unstable();
    Ok(batch)
}

/// Where a run's data comes from. Relative paths are resolved against the
/// data directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
    },
    Cifar10 {
        train: Vec<PathBuf>,
        #[serde(default)]
        test: Vec<PathBuf>,
    },
    Csv {
        train: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
        #[serde(default = "default_label")]
        label: String,
    },
    Blobs {
        classes: usize,
        dim: usize,
        n: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn default_label() -> String {
    "label".into()
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(flatten)]
    pub source: DataSource,
    /// Held-out share when the source has no separate test files.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default = "default_true")]
    pub standardize: bool,
    /// When positive, this share of the training part is held out and
    /// returned in place of the test set (for tuning without touching it).
    #[serde(default)]
    pub validation_fraction: f64,
    /// When positive, this share of the training part is set aside as public
    /// data (for pretraining). Runs train on the private rest unless `public`.
    #[serde(default)]
    pub public_fraction: f64,
    /// Train on the public share instead of the private rest.
    #[serde(default)]
    pub public: bool,
}

impl DataConfig {
    pub fn blobs(classes: usize, dim: usize, n: usize, seed: u64) -> Self {
        Self {
            source: DataSource::Blobs {
                classes,
                dim,
                n,
                seed,
            },
            test_fraction: default_test_fraction(),
            split_seed: 0,
            standardize: true,
            validation_fraction: 0.0,
            public_fraction: 0.0,
            public: false,
        }
    }

    /// Loads `(train, test)`, standardizing both with training statistics.
    pub fn load(&self, data_dir: &Path) -> Result<(Dataset, Dataset)> {
        let resolve = |p: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                data_dir.join(p)
            }
        };
        let split = |ds: Dataset| ds.split(self.test_fraction, self.split_seed);
        let (mut train, mut test) = match &self.source {
            DataSource::Idx {
                images,
                labels,
                test_images,
                test_labels,
            } => {
                let train = load_idx(&resolve(images), &resolve(labels))?;
                match (test_images, test_labels) {
                    (Some(ti), Some(tl)) => (train, load_idx(&resolve(ti), &resolve(tl))?),
                    (None, None) => split(train)?,
                    _ => {
                        return Err(Error::Config(
                            "test_images and test_labels must be given together".into(),
                        ))
                    }
                }
            }
            DataSource::Cifar10 { train, test } => {
                let files: Vec<_> = train.iter().map(|p| resolve(p)).collect();
                let ds = load_cifar10(&files)?;
                if test.is_empty() {
                    split(ds)?
                } else {
                    let files: Vec<_> = test.iter().map(|p| resolve(p)).collect();
                    (ds, load_cifar10(&files)?)
                }
            }
            DataSource::Csv { train, test, label } => {
                let ds = load_csv(&resolve(train), label)?;
                match test {
                    Some(t) => (ds, load_csv(&resolve(t), label)?),
                    None => split(ds)?,
                }
            }
            DataSource::Blobs {
                classes,
                dim,
                n,
                seed,
            } => split(synth_gaussian_blobs(*classes, *dim, *n, *seed)?)?,
        };
        if train.shape() != test.shape() {
            return Err(Error::Config(format!(
                "train shape {:?} differs from test shape {:?}",
                train.shape(),
                test.shape()
            )));
        }
        if self.public_fraction > 0.0 {
            let (private, public) =
                train.split(self.public_fraction, self.split_seed.wrapping_add(2))?;
            train = if self.public { public } else { private };
        } else if self.public {
            return Err(Error::Config(
                "`public = true` needs a positive public_fraction".into(),
            ));
        }
        if self.validation_fraction > 0.0 {
            (train, test) =
                train.split(self.validation_fraction, self.split_seed.wrapping_add(1))?;
        }
        let classes = train.classes.max(test.classes);
        train.classes = classes;
        test.classes = classes;
        if self.standardize {
            let norm = train.fit_normalization();
            train.standardize(&norm)?;
            test.standardize(&norm)?;
        }
        Ok((train, test))
    }
}
