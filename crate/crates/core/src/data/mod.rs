//! Datasets, semi-supervised splits and batch streams.

mod idx;
mod split;

pub use idx::{load_idx, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels};
pub use split::{split_ssl, BatchStream, SslSplit, UnlabeledPool};

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::rng::rng_from;
use crate::{Error, Result};

/// Layout of one sample's flattened feature vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum SampleShape {
    Vector {
        dim: usize,
    },
    /// Channel-major `(channels, height, width)`.
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl SampleShape {
    pub fn len(&self) -> usize {
        match *self {
            SampleShape::Vector { dim } => dim,
            SampleShape::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            SampleShape::Vector { dim } => vec![dim],
            SampleShape::Image {
                channels,
                height,
                width,
            } => vec![channels, height, width],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// `(n, sample_shape.len())`.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub sample_shape: SampleShape,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        features: Tensor,
        labels: Vec<usize>,
        n_classes: usize,
        sample_shape: SampleShape,
    ) -> Result<Self> {
        if features.shape() != [labels.len(), sample_shape.len()] {
            return Err(Error::shape(
                "dataset",
                features.shape(),
                &[labels.len(), sample_shape.len()],
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::Config(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        Ok(Self {
            name: name.into(),
            features,
            labels,
            n_classes,
            sample_shape,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    /// Rows at `indices`, in that order, as an `(m, d)` tensor.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let d = self.sample_shape.len();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Tensor::new(vec![indices.len(), d], data).expect("consistent row width")
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            features: self.gather(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            sample_shape: self.sample_shape,
        }
    }

    /// Keeps only samples whose label is in `classes`, relabelled to their
    /// position in that list.
    pub fn select_classes(&self, classes: &[usize]) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::config("class selection is empty"));
        }
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect();
        let mut out = self.subset(&keep);
        for y in &mut out.labels {
            *y = classes.iter().position(|c| c == y).expect("kept");
        }
        out.n_classes = classes.len();
        Ok(out)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// Two interleaved half-circles in the plane, `n / 2` points per class.
///
/// Class 0 follows `(cos t, sin t)` and class 1 follows
/// `(1 − cos t, 0.5 − sin t)` for `t` evenly spaced on `[0, π]`; both are
/// then shifted by `(−0.5, −0.25)` so the cloud is centred on the origin.
/// Gaussian noise of the given standard deviation is added to each
/// coordinate, and the rows are shuffled.
pub fn make_two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if !n.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "two-moons needs an even count, got {n}"
        )));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Config(format!(
            "noise must be a finite nonnegative value, got {noise}"
        )));
    }
    let half = n / 2;
    let mut rng = rng_from(seed);
    let normal = Normal::new(0.0, noise).expect("validated");
    let mut points = Vec::with_capacity(n);
    for class in 0..2 {
        for i in 0..half {
            let t = if half > 1 {
                std::f64::consts::PI * i as f64 / (half - 1) as f64
            } else {
                0.0
            };
            let (x, y) = if class == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            points.push(([x - 0.5, y - 0.25], class));
        }
    }
    if noise > 0.0 {
        for (p, _) in &mut points {
            p[0] += normal.sample(&mut rng);
            p[1] += normal.sample(&mut rng);
        }
    }
    points.shuffle(&mut rng);
    let features = points.iter().flat_map(|(p, _)| *p).collect();
    let labels = points.iter().map(|&(_, y)| y).collect();
    Dataset::new(
        "two-moons",
        Tensor::new(vec![n, 2], features)?,
        labels,
        2,
        SampleShape::Vector { dim: 2 },
    )
}

/// The held-out companion of a two-moons training draw.
pub fn two_moons_test_set(noise: f64, seed: u64) -> Result<Dataset> {
    make_two_moons(2000, noise, seed.wrapping_add(1))
}

/// Where the training and test samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(
    tag = "kind",
    rename_all = "kebab-case",
    rename_all_fields = "kebab-case",
    deny_unknown_fields
)]
pub enum DataSource {
    TwoMoons {
        n: usize,
        noise: f64,
        seed: u64,
    },
    /// Uncompressed IDX files; `classes` keeps only the listed labels.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        classes: Option<Vec<usize>>,
    },
}

/// A dataset together with the recipe for its labeled split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub labels_per_class: usize,
    pub fold_seed: u64,
    pub pool: UnlabeledPool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            source: DataSource::TwoMoons {
                n: 500,
                noise: 0.1,
                seed: 0,
            },
            labels_per_class: 4,
            fold_seed: 0,
            pool: UnlabeledPool::All,
        }
    }
}

impl DatasetSpec {
    /// `(train, test)` sets.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match &self.source {
            DataSource::TwoMoons { n, noise, seed } => Ok((
                make_two_moons(*n, *noise, *seed)?,
                two_moons_test_set(*noise, *seed)?,
            )),
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                classes,
            } => {
                let train = load_idx(train_images, train_labels)?;
                let test = load_idx(test_images, test_labels)?;
                match classes {
                    Some(c) => Ok((train.select_classes(c)?, test.select_classes(c)?)),
                    None => Ok((train, test)),
                }
            }
        }
    }

    pub fn split(&self, train: &Dataset) -> Result<SslSplit> {
        split_ssl(train, self.labels_per_class, self.fold_seed, self.pool)
    }
}
