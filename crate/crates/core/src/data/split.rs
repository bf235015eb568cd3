//! Labeled/unlabeled partitions and the paired batch stream.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::rng::{derive, rng_from, stream};
use crate::{Error, Result};

/// Which training samples feed the unlabeled branch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnlabeledPool {
    /// Every training sample, labeled ones included.
    #[default]
    All,
    /// Only samples not picked for the labeled set.
    Disjoint,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SslSplit {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub fold_seed: u64,
    pub pool: UnlabeledPool,
}

/// Picks `labels_per_class` samples of every class using `fold_seed`.
pub fn split_ssl(
    ds: &Dataset,
    labels_per_class: usize,
    fold_seed: u64,
    pool: UnlabeledPool,
) -> Result<SslSplit> {
    if labels_per_class == 0 {
        return Err(Error::config("labels per class must be positive"));
    }
    let mut labeled = Vec::with_capacity(labels_per_class * ds.n_classes);
    for class in 0..ds.n_classes {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        if members.len() < labels_per_class {
            return Err(Error::InsufficientClass {
                class,
                available: members.len(),
                required: labels_per_class,
            });
        }
        let mut rng = rng_from(derive(fold_seed, &[stream::SPLIT, class as u64]));
        members.shuffle(&mut rng);
        labeled.extend_from_slice(&members[..labels_per_class]);
    }
    let unlabeled = match pool {
        UnlabeledPool::All => (0..ds.len()).collect(),
        UnlabeledPool::Disjoint => {
            let mut taken = vec![false; ds.len()];
            labeled.iter().for_each(|&i| taken[i] = true);
            (0..ds.len()).filter(|&i| !taken[i]).collect()
        }
    };
    Ok(SslSplit {
        labeled,
        unlabeled,
        fold_seed,
        pool,
    })
}

/// An endless stream over a finite index set: the concatenation of one fresh
/// permutation per pass, so the batch at step `t` depends only on `t`.
#[derive(Clone, Debug)]
struct EpochStream {
    items: Vec<usize>,
    seed: u64,
    tag: u64,
    cached: Option<(u64, Vec<usize>)>,
}

impl EpochStream {
    fn new(items: Vec<usize>, seed: u64, tag: u64) -> Self {
        Self {
            items,
            seed,
            tag,
            cached: None,
        }
    }

    fn permutation(&mut self, pass: u64) -> &[usize] {
        if self.cached.as_ref().map(|(p, _)| *p) != Some(pass) {
            let mut perm = self.items.clone();
            perm.shuffle(&mut rng_from(derive(self.seed, &[self.tag, pass])));
            self.cached = Some((pass, perm));
        }
        &self.cached.as_ref().expect("just filled").1
    }

    fn window(&mut self, start: u64, len: usize) -> Vec<usize> {
        let n = self.items.len() as u64;
        (start..start + len as u64)
            .map(|p| self.permutation(p / n)[(p % n) as usize])
            .collect()
    }
}

/// Pairs of (labeled, unlabeled) index batches.
#[derive(Clone, Debug)]
pub struct BatchStream {
    labeled: EpochStream,
    unlabeled: Option<EpochStream>,
    batch_labeled: usize,
    batch_unlabeled: usize,
    step: u64,
}

impl BatchStream {
    pub fn new(
        split: &SslSplit,
        batch_labeled: usize,
        batch_unlabeled: usize,
        lambda: f64,
        seed: u64,
    ) -> Result<Self> {
        if batch_labeled == 0 || split.labeled.is_empty() {
            return Err(Error::config(
                "labeled batches need a positive size and a nonempty labeled set",
            ));
        }
        let active = batch_unlabeled > 0 && lambda > 0.0;
        if active && split.unlabeled.is_empty() {
            return Err(Error::config(
                "unlabeled set is empty but the unlabeled loss weight is positive",
            ));
        }
        Ok(Self {
            labeled: EpochStream::new(split.labeled.clone(), seed, stream::LABELED_ORDER),
            unlabeled: (batch_unlabeled > 0 && !split.unlabeled.is_empty())
                .then(|| EpochStream::new(split.unlabeled.clone(), seed, stream::UNLABELED_ORDER)),
            batch_labeled,
            batch_unlabeled,
            step: 0,
        })
    }

    /// The batch emitted at step `t`.
    pub fn batch(&mut self, t: u64) -> (Vec<usize>, Vec<usize>) {
        let l = self
            .labeled
            .window(t * self.batch_labeled as u64, self.batch_labeled);
        let u = match &mut self.unlabeled {
            Some(s) => s.window(t * self.batch_unlabeled as u64, self.batch_unlabeled),
            None => Vec::new(),
        };
        (l, u)
    }

    /// Moves the cursor so the next emission is step `t`.
    pub fn seek(&mut self, t: u64) {
        self.step = t;
    }

    pub fn position(&self) -> u64 {
        self.step
    }

    /// Labeled passes completed after `t` steps.
    pub fn epoch_at(&self, t: u64) -> u64 {
        t * self.batch_labeled as u64 / self.labeled.items.len() as u64
    }
}

impl Iterator for BatchStream {
    type Item = (Vec<usize>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        let out = self.batch(self.step);
        self.step += 1;
        Some(out)
    }
}
