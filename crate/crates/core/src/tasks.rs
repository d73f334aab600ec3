//! Datasets (IDX files or synthetic Gaussian clusters) and the four
//! nonstationary task streams.
//!
//! Task indices are 1-based. Every task is a pure function of the base data,
//! the stream kind, the master seed and `τ`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::seed;
use crate::tensor::Matrix;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Cluster noise of the synthetic dataset.
pub const SYNTH_NOISE: f64 = 0.15;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("IDX file truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("task index must be >= 1")]
    ZeroTask,
    #[error("task {tau} needs {needed} classes, only {available} exist")]
    ClassBudget {
        tau: usize,
        needed: usize,
        available: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self, DataError> {
        if inputs.rows() == 0 {
            return Err(DataError::Invalid("no examples".into()));
        }
        if labels.len() != inputs.rows() {
            return Err(DataError::CountMismatch {
                images: inputs.rows(),
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(DataError::Invalid(format!("label {bad} >= {num_classes} classes")));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// First `n` examples and the rest.
    pub fn split_at(&self, n: usize) -> Result<(Dataset, Dataset), DataError> {
        if n == 0 || n >= self.len() {
            return Err(DataError::Invalid(format!("cannot split {} examples at {n}", self.len())));
        }
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        Ok((self.select(&head), self.select(&tail)))
    }

    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32, DataError> {
    let b = bytes.get(at..at + 4).ok_or(DataError::Truncated {
        needed: at + 4,
        have: bytes.len(),
    })?;
    Ok(u32::from_be_bytes(b.try_into().expect("4 bytes")))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<(), DataError> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(DataError::BadMagic { expected, found });
    }
    Ok(())
}

/// Parses IDX image and label buffers. Pixels are scaled by `1/255` and the
/// class count is one more than the largest label.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset, DataError> {
    check_magic(images, IDX_IMAGES_MAGIC)?;
    check_magic(labels, IDX_LABELS_MAGIC)?;
    let n = be_u32(images, 4)? as usize;
    let rows = be_u32(images, 8)? as usize;
    let cols = be_u32(images, 12)? as usize;
    let n_labels = be_u32(labels, 4)? as usize;
    if n != n_labels {
        return Err(DataError::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }
    let d = rows * cols;
    let pixels = images.get(16..16 + n * d).ok_or(DataError::Truncated {
        needed: 16 + n * d,
        have: images.len(),
    })?;
    let ys = labels.get(8..8 + n).ok_or(DataError::Truncated {
        needed: 8 + n,
        have: labels.len(),
    })?;
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let inputs = Matrix::new(n, d, data).map_err(|e| DataError::Invalid(e.to_string()))?;
    let labels: Vec<usize> = ys.iter().map(|&y| y as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(inputs, labels, classes)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    parse_idx(&read_file(images_path)?, &read_file(labels_path)?)
}

/// Encodes a dataset as IDX buffers, with pixels rounded to bytes.
pub fn encode_idx(data: &Dataset, rows: usize, cols: usize) -> (Vec<u8>, Vec<u8>) {
    let mut images = Vec::with_capacity(16 + data.inputs.len());
    images.extend(IDX_IMAGES_MAGIC.to_be_bytes());
    images.extend((data.len() as u32).to_be_bytes());
    images.extend((rows as u32).to_be_bytes());
    images.extend((cols as u32).to_be_bytes());
    images.extend(data.inputs.as_slice().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut labels = Vec::with_capacity(8 + data.len());
    labels.extend(IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend((data.len() as u32).to_be_bytes());
    labels.extend(data.labels.iter().map(|&y| y as u8));
    (images, labels)
}

/// Class-conditional Gaussian clusters in `[0, 1]^d`.
///
/// Class means are uniform in the cube, noise is isotropic with σ = 0.15 and
/// values are clipped to the cube. Labels cycle through the classes before a
/// seeded shuffle, so every class count is `⌊n/C⌋` or `⌈n/C⌉`.
pub fn synth_dataset(seed: u64, n: usize, d: usize, classes: usize) -> Result<Dataset, DataError> {
    if classes < 2 || n < classes || d == 0 {
        return Err(DataError::Invalid(format!("need n >= classes >= 2 and d >= 1, got n={n} d={d} C={classes}")));
    }
    let mut rng = seed::rng(seed, seed::tag::DATA, 0);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..d).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect();
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let noise = Normal::new(0.0, SYNTH_NOISE).expect("positive sigma");
    let mut data = Vec::with_capacity(n * d);
    for &y in &labels {
        for mean in &means[y] {
            data.push((mean + noise.sample(&mut rng)).clamp(0.0, 1.0));
        }
    }
    let inputs = Matrix::new(n, d, data).map_err(|e| DataError::Invalid(e.to_string()))?;
    Dataset::new(inputs, labels, classes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum StreamKind {
    RandomLabels,
    PixelPermute,
    LabelFlip,
    ClassIncremental,
}

impl StreamKind {
    pub fn name(self) -> &'static str {
        match self {
            StreamKind::RandomLabels => "random_labels",
            StreamKind::PixelPermute => "pixel_permute",
            StreamKind::LabelFlip => "label_flip",
            StreamKind::ClassIncremental => "class_incremental",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "random_labels" => StreamKind::RandomLabels,
            "pixel_permute" => StreamKind::PixelPermute,
            "label_flip" => StreamKind::LabelFlip,
            "class_incremental" => StreamKind::ClassIncremental,
            _ => return None,
        })
    }

    /// Random labels measure memorization, so the train split is the one scored.
    pub fn scores_train_split(self) -> bool {
        self == StreamKind::RandomLabels
    }
}

#[derive(Clone, Debug)]
pub struct TaskStream {
    pub train: Dataset,
    pub test: Dataset,
    pub kind: StreamKind,
    pub master_seed: u64,
    pub epochs_per_task: usize,
    pub num_tasks: usize,
    pub class_step: usize,
    /// Task 1 uses the identity permutation (pixel permute and label flip).
    pub identity_first: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskView {
    pub tau: usize,
    pub train: Dataset,
    pub test: Dataset,
}

impl TaskView {
    /// The split whose accuracy is reported as the task's score.
    pub fn scored(&self, kind: StreamKind) -> &Dataset {
        if kind.scores_train_split() {
            &self.train
        } else {
            &self.test
        }
    }
}

impl TaskStream {
    pub fn new(train: Dataset, test: Dataset, kind: StreamKind, master_seed: u64) -> Self {
        Self {
            train,
            test,
            kind,
            master_seed,
            epochs_per_task: 100,
            num_tasks: 10,
            class_step: 5,
            identity_first: true,
        }
    }

    pub fn task(&self, tau: usize) -> Result<TaskView, DataError> {
        match self.kind {
            StreamKind::RandomLabels => random_label_task(self, tau),
            StreamKind::PixelPermute => pixel_permute_task(self, tau),
            StreamKind::LabelFlip => label_flip_task(self, tau),
            StreamKind::ClassIncremental => class_incremental_task(self, tau),
        }
    }

    fn identity_task(&self, tau: usize) -> bool {
        self.identity_first && tau == 1
    }
}

fn check_tau(tau: usize) -> Result<(), DataError> {
    if tau == 0 {
        Err(DataError::ZeroTask)
    } else {
        Ok(())
    }
}

fn random_labels(n: usize, classes: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

/// Labels redrawn uniformly per task; the held-out split gets its own draw.
pub fn random_label_task(stream: &TaskStream, tau: usize) -> Result<TaskView, DataError> {
    check_tau(tau)?;
    let c = stream.train.num_classes;
    let mut rng = seed::rng(stream.master_seed, seed::tag::LABELS, tau as u64);
    let mut test_rng = seed::rng(stream.master_seed, seed::tag::TEST_LABELS, tau as u64);
    let mut train = stream.train.clone();
    train.labels = random_labels(train.len(), c, &mut rng);
    let mut test = stream.test.clone();
    test.labels = random_labels(test.len(), c, &mut test_rng);
    Ok(TaskView { tau, train, test })
}

/// Seeded Fisher–Yates permutation of `0..n`.
pub fn permutation(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

pub fn invert_permutation(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &j) in p.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

/// Output column `j` takes input column `perm[j]`.
pub fn permute_columns(m: &Matrix, perm: &[usize]) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, perm[j]))
}

pub fn pixel_permutation(stream: &TaskStream, tau: usize) -> Result<Vec<usize>, DataError> {
    check_tau(tau)?;
    let d = stream.train.dim();
    if stream.identity_task(tau) {
        return Ok((0..d).collect());
    }
    Ok(permutation(d, &mut seed::rng(stream.master_seed, seed::tag::PERMUTE, tau as u64)))
}

pub fn pixel_permute_task(stream: &TaskStream, tau: usize) -> Result<TaskView, DataError> {
    let perm = pixel_permutation(stream, tau)?;
    let apply = |d: &Dataset| Dataset {
        inputs: permute_columns(&d.inputs, &perm),
        ..d.clone()
    };
    Ok(TaskView {
        tau,
        train: apply(&stream.train),
        test: apply(&stream.test),
    })
}

pub fn label_permutation(stream: &TaskStream, tau: usize) -> Result<Vec<usize>, DataError> {
    check_tau(tau)?;
    let c = stream.train.num_classes;
    if stream.identity_task(tau) {
        return Ok((0..c).collect());
    }
    Ok(permutation(c, &mut seed::rng(stream.master_seed, seed::tag::FLIP, tau as u64)))
}

/// Every label `y` becomes `ρ_τ(y)` on both splits.
pub fn label_flip_task(stream: &TaskStream, tau: usize) -> Result<TaskView, DataError> {
    let rho = label_permutation(stream, tau)?;
    let apply = |d: &Dataset| Dataset {
        labels: d.labels.iter().map(|&y| rho[y]).collect(),
        ..d.clone()
    };
    Ok(TaskView {
        tau,
        train: apply(&stream.train),
        test: apply(&stream.test),
    })
}

/// Fixed seeded order in which classes join the class-incremental stream.
pub fn class_order(stream: &TaskStream) -> Vec<usize> {
    permutation(
        stream.train.num_classes,
        &mut seed::rng(stream.master_seed, seed::tag::CLASS_ORDER, 0),
    )
}

/// Task `τ` keeps the examples of the first `class_step·τ` classes in order.
pub fn class_incremental_task(stream: &TaskStream, tau: usize) -> Result<TaskView, DataError> {
    check_tau(tau)?;
    let available = stream.train.num_classes;
    let needed = stream.class_step * tau;
    if needed > available {
        return Err(DataError::ClassBudget {
            tau,
            needed,
            available,
        });
    }
    let order = class_order(stream);
    let mut included = vec![false; available];
    for &c in &order[..needed] {
        included[c] = true;
    }
    let filter = |d: &Dataset| -> Result<Dataset, DataError> {
        let idx: Vec<usize> = (0..d.len()).filter(|&i| included[d.labels[i]]).collect();
        if idx.is_empty() {
            return Err(DataError::Invalid(format!("task {tau} selects no examples")));
        }
        Ok(d.select(&idx))
    };
    Ok(TaskView {
        tau,
        train: filter(&stream.train)?,
        test: filter(&stream.test)?,
    })
}
