//! Datasets, file formats and experiment configuration.

pub mod checkpoint;
pub mod cifar;
pub mod config;
pub mod contour;
pub mod io;

use std::f64::consts::PI;

use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::rng::stream;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Contract(String),
    #[error("dataset is already normalized")]
    AlreadyNormalized,
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl DataError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelKind {
    /// Labels in `{−1, +1}`, one output.
    Binary,
    /// Labels in `0..C`, `C` outputs.
    MultiClass(usize),
}

impl LabelKind {
    pub fn output_dim(self) -> usize {
        match self {
            LabelKind::Binary => 1,
            LabelKind::MultiClass(c) => c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Per-coordinate affine normalization `(x − mean) / scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    pub fn apply(&self, x: f64, coord: usize) -> f64 {
        (x - self.mean[coord]) / self.scale[coord]
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<i64>,
    kind: LabelKind,
    split: Split,
    normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<i64>, kind: LabelKind, split: Split) -> Result<Self, DataError> {
        let (n, _) = inputs
            .dims2("dataset")
            .map_err(|e| DataError::Contract(e.to_string()))?;
        if labels.len() != n {
            return Err(DataError::Contract(format!(
                "{} labels for {n} inputs",
                labels.len()
            )));
        }
        let bad = match kind {
            LabelKind::Binary => labels.iter().find(|&&l| l != -1 && l != 1),
            LabelKind::MultiClass(c) => labels.iter().find(|&&l| l < 0 || l >= c as i64),
        };
        if let Some(l) = bad {
            return Err(DataError::Contract(format!("label {l} invalid for {kind:?}")));
        }
        Ok(Self {
            inputs,
            labels,
            kind,
            split,
            normalization: None,
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

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn kind(&self) -> LabelKind {
        self.kind
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    /// Target rows for the given examples: `±1` column (binary) or one-hot.
    pub fn targets(&self, indices: &[usize]) -> Tensor {
        match self.kind {
            LabelKind::Binary => Tensor::matrix(
                indices.len(),
                1,
                indices.iter().map(|&i| self.labels[i] as f64).collect(),
            )
            .expect("target column"),
            LabelKind::MultiClass(c) => {
                let mut t = Tensor::zeros(&[indices.len(), c]);
                for (row, &i) in indices.iter().enumerate() {
                    t.row_mut(row)[self.labels[i] as usize] = 1.0;
                }
                t
            }
        }
    }

    pub fn all_targets(&self) -> Tensor {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.targets(&idx)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            kind: self.kind,
            split: self.split,
            normalization: self.normalization.clone(),
        }
    }

    /// Per-coordinate mean and standard deviation of the inputs.
    pub fn fit_normalization(&self) -> Normalization {
        let (n, d) = (self.len(), self.dim());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            mean.iter_mut().zip(self.inputs.row(i)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(self.inputs.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Normalization { mean, scale }
    }

    /// Applies `norm` in place; a dataset can be normalized only once.
    pub fn normalize(&mut self, norm: Normalization) -> Result<(), DataError> {
        if self.normalization.is_some() {
            return Err(DataError::AlreadyNormalized);
        }
        let d = self.dim();
        if norm.dim() != d {
            return Err(DataError::Contract(format!(
                "normalization has {} coordinates, data has {d}",
                norm.dim()
            )));
        }
        for i in 0..self.len() {
            for (j, v) in self.inputs.row_mut(i).iter_mut().enumerate() {
                *v = norm.apply(*v, j);
            }
        }
        self.normalization = Some(norm);
        Ok(())
    }
}

/// Two interleaving half circles.
///
/// `⌈n/2⌉` points on `(cos t, sin t)` with label `−1` and `⌊n/2⌋` points on
/// `(1 − cos t, 0.5 − sin t)` with label `+1`, `t` equispaced over `[0, π]`,
/// plus isotropic Gaussian noise of standard deviation `noise`.
pub fn two_moons(n: usize, noise: f64, seed: u64, split: Split) -> Result<Dataset, DataError> {
    if n < 2 {
        return Err(DataError::Contract(format!("two_moons needs n >= 2, got {n}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(DataError::Contract(format!("noise must be >= 0, got {noise}")));
    }
    let n_outer = n.div_ceil(2);
    let n_inner = n / 2;
    let angle = |i: usize, count: usize| {
        if count <= 1 {
            0.0
        } else {
            PI * i as f64 / (count - 1) as f64
        }
    };
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n_outer {
        let t = angle(i, n_outer);
        data.extend([t.cos(), t.sin()]);
        labels.push(-1);
    }
    for i in 0..n_inner {
        let t = angle(i, n_inner);
        data.extend([1.0 - t.cos(), 0.5 - t.sin()]);
        labels.push(1);
    }
    if noise > 0.0 {
        let normal = Normal::new(0.0, noise).expect("valid std");
        let mut rng = stream(seed);
        data.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    Dataset::new(
        Tensor::matrix(n, 2, data).expect("two-moon buffer"),
        labels,
        LabelKind::Binary,
        split,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_moons_lie_on_arcs() {
        let d = two_moons(4, 0.0, 0, Split::Train).unwrap();
        let x = d.inputs();
        assert_eq!(x.row(0), &[1.0, 0.0]);
        for i in 0..2 {
            let r = x.row(i);
            assert!((r[0].hypot(r[1]) - 1.0).abs() < 1e-15);
            assert_eq!(d.labels()[i], -1);
        }
        for i in 2..4 {
            let r = x.row(i);
            assert!(((1.0 - r[0]).hypot(0.5 - r[1]) - 1.0).abs() < 1e-15);
            assert_eq!(d.labels()[i], 1);
        }
    }

    #[test]
    fn labels_are_balanced() {
        for n in [2, 3, 7, 100, 101] {
            let d = two_moons(n, 0.1, 1, Split::Train).unwrap();
            let pos = d.labels().iter().filter(|&&l| l == 1).count() as i64;
            let neg = d.len() as i64 - pos;
            assert!((pos - neg).abs() <= 1);
        }
    }

    #[test]
    fn bad_arguments_rejected() {
        assert!(two_moons(1, 0.1, 0, Split::Train).is_err());
        assert!(two_moons(10, -0.1, 0, Split::Train).is_err());
    }

    #[test]
    fn moons_are_seeded() {
        let a = two_moons(50, 0.2, 9, Split::Train).unwrap();
        assert_eq!(a, two_moons(50, 0.2, 9, Split::Train).unwrap());
        assert_ne!(a, two_moons(50, 0.2, 10, Split::Train).unwrap());
    }

    #[test]
    fn normalization_applies_once() {
        let mut d = two_moons(20, 0.1, 0, Split::Train).unwrap();
        let norm = d.fit_normalization();
        d.normalize(norm.clone()).unwrap();
        assert!(matches!(d.normalize(norm), Err(DataError::AlreadyNormalized)));
        let refit = d.fit_normalization();
        assert!(refit.mean.iter().all(|m| m.abs() < 1e-12));
        assert!(refit.scale.iter().all(|s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn targets_encode_labels() {
        let d = Dataset::new(
            Tensor::zeros(&[3, 1]),
            vec![2, 0, 1],
            LabelKind::MultiClass(3),
            Split::Test,
        )
        .unwrap();
        let t = d.targets(&[0, 2]);
        assert_eq!(t.data(), &[0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        assert!(Dataset::new(Tensor::zeros(&[1, 1]), vec![0], LabelKind::Binary, Split::Test).is_err());
    }
}
