//! Datasets, standardization, and the forget/remain partition.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::tensor::Tensor;

/// A feature vector with its class label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Tensor,
    pub label: usize,
}

impl Example {
    pub fn new(features: Vec<f64>, label: usize) -> Self {
        Self {
            features: Tensor::vector(features),
            label,
        }
    }

    pub fn x(&self) -> &[f64] {
        self.features.as_slice()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub num_classes: usize,
    pub feature_dim: usize,
}

impl LabeledDataset {
    pub fn new(train: Vec<Example>, test: Vec<Example>, num_classes: usize, feature_dim: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("a dataset needs at least two classes"));
        }
        if feature_dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        for (which, set) in [("train", &train), ("test", &test)] {
            for (i, ex) in set.iter().enumerate() {
                if ex.features.len() != feature_dim {
                    return Err(Error::invalid(format!(
                        "{which} example {i} has {} features, expected {feature_dim}",
                        ex.features.len()
                    )));
                }
                if ex.label >= num_classes {
                    return Err(Error::invalid(format!(
                        "{which} example {i} has label {} but only {num_classes} classes exist",
                        ex.label
                    )));
                }
                if !ex.features.is_finite() {
                    return Err(Error::invalid(format!("{which} example {i} has non-finite features")));
                }
            }
        }
        Ok(Self {
            train,
            test,
            num_classes,
            feature_dim,
        })
    }

    /// Standardizes both splits with statistics fitted on `train` only.
    pub fn standardized(mut self) -> Self {
        let s = Standardizer::fit(&self.train, self.feature_dim);
        s.apply(&mut self.train);
        s.apply(&mut self.test);
        self
    }

    /// Axis-aligned bounding box of the training features.
    pub fn train_bounds(&self) -> Vec<(f64, f64)> {
        let mut b = vec![(f64::INFINITY, f64::NEG_INFINITY); self.feature_dim];
        for ex in &self.train {
            for (bound, v) in b.iter_mut().zip(ex.x()) {
                bound.0 = bound.0.min(*v);
                bound.1 = bound.1.max(*v);
            }
        }
        b
    }
}

/// Per-feature affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population statistics over `data`; a constant feature gets `std = 1`.
    pub fn fit(data: &[Example], dim: usize) -> Self {
        let n = data.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for ex in data {
            for (m, v) in mean.iter_mut().zip(ex.x()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for ex in data {
            for ((s, v), m) in var.iter_mut().zip(ex.x()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, data: &mut [Example]) {
        for ex in data {
            for ((v, m), s) in ex.features.as_mut_slice().iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
    }
}

/// Gaussian blobs, one per class, split 80/20 per class into train/test and
/// standardized on the training split.
///
/// In two dimensions the class centres sit evenly spaced on the unit circle;
/// in higher dimensions they are random unit vectors.
pub fn make_blobs(
    num_classes: usize,
    per_class: usize,
    feature_dim: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if num_classes < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {num_classes}")));
    }
    if per_class < 2 {
        return Err(Error::invalid(format!("need at least 2 examples per class, got {per_class}")));
    }
    if feature_dim == 0 {
        return Err(Error::invalid("feature dimension must be positive"));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::invalid(format!("spread must be positive, got {spread}")));
    }
    let mut rng = seeded(seed);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");

    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|k| {
            if feature_dim == 2 {
                let angle = std::f64::consts::TAU * k as f64 / num_classes as f64;
                vec![angle.cos(), angle.sin()]
            } else {
                let mut v: Vec<f64> = (0..feature_dim).map(|_| unit.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.iter_mut().for_each(|x| *x /= norm);
                v
            }
        })
        .collect();

    let n_train = ((per_class as f64 * 0.8).round() as usize).clamp(1, per_class - 1);
    let mut train = Vec::with_capacity(num_classes * n_train);
    let mut test = Vec::with_capacity(num_classes * (per_class - n_train));
    for (label, center) in centers.iter().enumerate() {
        for i in 0..per_class {
            let x = center.iter().map(|c| c + spread * unit.sample(&mut rng)).collect();
            let ex = Example::new(x, label);
            if i < n_train {
                train.push(ex);
            } else {
                test.push(ex);
            }
        }
    }
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);
    Ok(LabeledDataset::new(train, test, num_classes, feature_dim)?.standardized())
}

/// Options for [`load_csv`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CsvOptions {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Skip the first line.
    pub header: bool,
    /// Seeds the row-hash train/test assignment.
    pub seed: u64,
}

/// Parses `f1,...,fd,label` rows without standardizing.
pub fn parse_csv(text: &str, path: &Path, opts: &CsvOptions) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if (opts.header && idx == 0) || line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != opts.feature_dim + 1 {
            return Err(parse_err(format!(
                "expected {} fields, found {}",
                opts.feature_dim + 1,
                fields.len()
            )));
        }
        let mut features = Vec::with_capacity(opts.feature_dim);
        for (col, f) in fields[..opts.feature_dim].iter().enumerate() {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(format!("column {} is not a number: `{f}`", col + 1)))?;
            if !v.is_finite() {
                return Err(parse_err(format!("column {} is not finite", col + 1)));
            }
            features.push(v);
        }
        let raw = fields[opts.feature_dim];
        let label: usize = raw
            .parse()
            .map_err(|_| parse_err(format!("label is not a non-negative integer: `{raw}`")))?;
        if label >= opts.num_classes {
            return Err(Error::invalid(format!(
                "{}:{line_no}: label {label} out of range for {} classes",
                path.display(),
                opts.num_classes
            )));
        }
        out.push(Example::new(features, label));
    }
    Ok(out)
}

/// Loads a CSV dataset. Each row goes to the test split when a seeded hash
/// of its text falls in the lowest fifth, otherwise to train.
pub fn load_csv(path: &Path, opts: &CsvOptions) -> Result<LabeledDataset> {
    let text = std::fs::read_to_string(path)?;
    let rows = parse_csv(&text, path, opts)?;
    let lines: Vec<&str> = text
        .lines()
        .enumerate()
        .filter(|(i, l)| !(opts.header && *i == 0) && !l.trim().is_empty())
        .map(|(_, l)| l)
        .collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (ex, line) in rows.into_iter().zip(lines) {
        let mut h = Sha256::new();
        h.update(opts.seed.to_le_bytes());
        h.update(line.as_bytes());
        let digest = h.finalize();
        let bucket = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) % 5;
        if bucket == 0 {
            test.push(ex);
        } else {
            train.push(ex);
        }
    }
    Ok(LabeledDataset::new(train, test, opts.num_classes, opts.feature_dim)?.standardized())
}

/// Partition of a dataset into forgetting and remaining parts for class `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgetSplit {
    pub forget_class: usize,
    pub num_classes: usize,
    /// Training examples of the forgetting class.
    pub forget_train: Vec<Example>,
    /// All other training examples.
    pub remain_train: Vec<Example>,
    pub forget_test: Vec<Example>,
    pub remain_test: Vec<Example>,
}

/// Splits train and test by `label == t`, preserving order.
pub fn forget_split(ds: &LabeledDataset, t: usize) -> Result<ForgetSplit> {
    if t >= ds.num_classes {
        return Err(Error::invalid(format!(
            "forgetting class {t} out of range for {} classes",
            ds.num_classes
        )));
    }
    let part = |set: &[Example]| -> (Vec<Example>, Vec<Example>) {
        set.iter().cloned().partition(|e| e.label == t)
    };
    let (forget_train, remain_train) = part(&ds.train);
    let (forget_test, remain_test) = part(&ds.test);
    Ok(ForgetSplit {
        forget_class: t,
        num_classes: ds.num_classes,
        forget_train,
        remain_train,
        forget_test,
        remain_test,
    })
}

/// Read access to the training parts of a [`ForgetSplit`].
///
/// Unlearning methods only see data through this trait so that which part
/// they read can be audited.
pub trait SplitAccess {
    fn forget_class(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn forget_train(&self) -> &[Example];
    fn remain_train(&self) -> &[Example];
}

impl SplitAccess for ForgetSplit {
    fn forget_class(&self) -> usize {
        self.forget_class
    }
    fn num_classes(&self) -> usize {
        self.num_classes
    }
    fn forget_train(&self) -> &[Example] {
        &self.forget_train
    }
    fn remain_train(&self) -> &[Example] {
        &self.remain_train
    }
}

/// Wraps a split and counts how many examples of each part were handed out.
#[derive(Debug)]
pub struct AccessCounter<'a> {
    inner: &'a ForgetSplit,
    forget_reads: AtomicUsize,
    remain_reads: AtomicUsize,
    forget_class_in_remain: AtomicUsize,
}

/// Snapshot of an [`AccessCounter`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessLog {
    pub forget_reads: usize,
    pub remain_reads: usize,
    /// Forgetting-class examples that were served through `remain_train`.
    pub forget_class_in_remain: usize,
}

impl<'a> AccessCounter<'a> {
    pub fn new(inner: &'a ForgetSplit) -> Self {
        Self {
            inner,
            forget_reads: AtomicUsize::new(0),
            remain_reads: AtomicUsize::new(0),
            forget_class_in_remain: AtomicUsize::new(0),
        }
    }

    pub fn log(&self) -> AccessLog {
        AccessLog {
            forget_reads: self.forget_reads.load(Ordering::Relaxed),
            remain_reads: self.remain_reads.load(Ordering::Relaxed),
            forget_class_in_remain: self.forget_class_in_remain.load(Ordering::Relaxed),
        }
    }
}

impl SplitAccess for AccessCounter<'_> {
    fn forget_class(&self) -> usize {
        self.inner.forget_class
    }
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }
    fn forget_train(&self) -> &[Example] {
        self.forget_reads
            .fetch_add(self.inner.forget_train.len(), Ordering::Relaxed);
        &self.inner.forget_train
    }
    fn remain_train(&self) -> &[Example] {
        let set = &self.inner.remain_train;
        self.remain_reads.fetch_add(set.len(), Ordering::Relaxed);
        let leaked = set.iter().filter(|e| e.label == self.inner.forget_class).count();
        self.forget_class_in_remain.fetch_add(leaked, Ordering::Relaxed);
        set
    }
}

/// Draws a label uniformly from `0..k` excluding `skip`.
pub(crate) fn random_other_label<R: Rng + ?Sized>(rng: &mut R, k: usize, skip: usize) -> usize {
    let r = rng.random_range(0..k - 1);
    if r >= skip {
        r + 1
    } else {
        r
    }
}
