//! Samples, multi-domain bundles, the synthetic shift generator, the
//! JSON-lines vector file and seeded mini-batching.

mod synthetic;
mod vecfile;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::Tensor2;
use crate::rng;

pub use synthetic::{generate_synthetic, DomainShift, SyntheticSpec};
pub use vecfile::{load_vectors, save_vectors, FORMAT_NAME, FORMAT_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: Option<usize>,
    pub domain: usize,
}

/// `M` labelled sources, an unlabelled target training set and a labelled
/// target test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub sources: Vec<Vec<Sample>>,
    pub target_train: Vec<Sample>,
    pub target_test: Vec<Sample>,
    pub num_classes: usize,
    pub dim: usize,
    /// One name per domain id; sources first, the target last for generated data.
    pub domain_names: Vec<String>,
}

impl DatasetBundle {
    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn target_domain(&self) -> Option<usize> {
        self.target_train
            .first()
            .or(self.target_test.first())
            .map(|s| s.domain)
    }

    /// Checks every structural invariant of a bundle.
    pub fn validate(&self) -> Result<()> {
        if self.num_sources() < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 source domains, found {}",
                self.num_sources()
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 classes, found {}",
                self.num_classes
            )));
        }
        if self.target_train.is_empty() {
            return Err(Error::Validation("target_train is empty".into()));
        }
        let check = |s: &Sample, what: &str, labelled: bool| -> Result<()> {
            if s.features.len() != self.dim {
                return Err(Error::Validation(format!(
                    "{what} sample has {} features, expected {}",
                    s.features.len(),
                    self.dim
                )));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("{what} sample has non-finite features")));
            }
            match (s.label, labelled) {
                (Some(k), true) if k < self.num_classes => Ok(()),
                (Some(k), true) => Err(Error::Validation(format!(
                    "{what} label {k} outside [0, {})",
                    self.num_classes
                ))),
                (None, true) => Err(Error::Validation(format!("{what} sample is unlabelled"))),
                (Some(_), false) => Err(Error::Validation(format!("{what} sample carries a label"))),
                (None, false) => Ok(()),
            }
        };
        for (i, set) in self.sources.iter().enumerate() {
            let mut seen = vec![false; self.num_classes];
            for s in set {
                check(s, &format!("source {i}"), true)?;
                seen[s.label.expect("checked")] = true;
            }
            if let Some(k) = seen.iter().position(|&p| !p) {
                return Err(Error::Validation(format!("class {k} missing from source {i}")));
            }
        }
        for s in &self.target_train {
            check(s, "target_train", false)?;
        }
        for s in &self.target_test {
            check(s, "target_test", true)?;
        }
        Ok(())
    }
}

/// A mini-batch: stacked features and, when known, labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor2,
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    /// Stacks samples; labels are kept only if every sample has one.
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<Self> {
        let samples: Vec<&Sample> = samples.into_iter().collect();
        let rows: Vec<&[f64]> = samples.iter().map(|s| s.features.as_slice()).collect();
        let x = Tensor2::from_rows(&rows)?;
        let labels = samples.iter().map(|s| s.label).collect::<Option<Vec<_>>>();
        Ok(Self { x, labels })
    }

    pub fn labelled(x: Tensor2, labels: Vec<usize>) -> Self {
        Self {
            x,
            labels: Some(labels),
        }
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn require_labels(&self, what: &str) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Contract(format!("{what} requires a labelled batch")))
    }
}

/// Shuffled index batches for one pass over `len` samples. The permutation is
/// a pure function of `(seed, epoch)`; the final batch may be partial.
pub fn batch_indices(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Config(format!("batch size must be >= 2, got {batch_size}")));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng::rng_for(seed ^ epoch, &[0xBA7C]));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Batches over a sample set, see [`batch_indices`].
pub fn batch_iter(set: &[Sample], batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    batch_indices(set.len(), batch_size, seed, epoch)?
        .into_iter()
        .map(|idx| Batch::from_samples(idx.iter().map(|&i| &set[i])))
        .collect()
}

/// Stacks the features of a whole set.
pub fn features_of(set: &[Sample]) -> Result<Tensor2> {
    let rows: Vec<&[f64]> = set.iter().map(|s| s.features.as_slice()).collect();
    Tensor2::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_sizes() {
        let b = batch_indices(10, 4, 1, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(batch_indices(10, 1, 1, 0).is_err());
    }

    #[test]
    fn batch_determinism_and_epoch_variation() {
        assert_eq!(batch_indices(100, 8, 5, 3).unwrap(), batch_indices(100, 8, 5, 3).unwrap());
        let orders: Vec<Vec<usize>> = (0..5)
            .map(|e| batch_indices(100, 100, 5, e).unwrap().concat())
            .collect();
        for a in 0..5 {
            for b in (a + 1)..5 {
                assert_ne!(orders[a], orders[b], "epochs {a} and {b}");
            }
        }
    }

    #[test]
    fn batch_keeps_labels_only_when_complete() {
        let s = |l| Sample { features: vec![0.0, 1.0], label: l, domain: 0 };
        let b = Batch::from_samples(&[s(Some(1)), s(Some(0))]).unwrap();
        assert_eq!(b.labels, Some(vec![1, 0]));
        let b = Batch::from_samples(&[s(Some(1)), s(None)]).unwrap();
        assert!(b.labels.is_none());
        assert!(b.require_labels("test").is_err());
    }
}
