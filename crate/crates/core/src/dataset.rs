//! Feature datasets: per-class feature vectors with base/novel split tags,
//! plus a synthetic Gaussian-mixture generator for desk-scale experiments.
//!
//! Features are stored raw (not pre-normalized); L2 normalization happens
//! at classifier boundaries. Synthetic examples are the exception: they are
//! normalized at generation so their cosine geometry matches real features.

use alloc::vec::Vec;
use core::fmt;

use crate::rng;
use crate::tensor::Matrix;

/// Role of a class in the base/novel protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitTag {
    Base,
    NovelVal,
    NovelTest,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Base => "base",
            SplitTag::NovelVal => "novel_val",
            SplitTag::NovelTest => "novel_test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "base" => Some(SplitTag::Base),
            "novel_val" => Some(SplitTag::NovelVal),
            "novel_test" => Some(SplitTag::NovelTest),
            _ => None,
        }
    }
}

/// All feature vectors of one class.
#[derive(Clone, Debug)]
pub struct ClassRecord {
    pub class_id: u32,
    pub split: SplitTag,
    /// `examples x dim` feature rows.
    pub features: Matrix,
}

/// Validation failures for [`FeatureDataset`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetError {
    DuplicateClassId { class_id: u32 },
    EmptyClass { class_id: u32 },
    DimMismatch { class_id: u32, expected: usize, actual: usize },
    NonFinite { class_id: u32 },
    InvalidConfig { msg: &'static str },
}

impl fmt::Display for DatasetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetError::DuplicateClassId { class_id } => {
                write!(f, "duplicate class id {class_id}")
            }
            DatasetError::EmptyClass { class_id } => {
                write!(f, "class {class_id} has no feature vectors")
            }
            DatasetError::DimMismatch { class_id, expected, actual } => write!(
                f,
                "class {class_id}: feature dimension {actual} does not match dataset dim {expected}"
            ),
            DatasetError::NonFinite { class_id } => {
                write!(f, "class {class_id} contains non-finite feature values")
            }
            DatasetError::InvalidConfig { msg } => write!(f, "invalid config: {msg}"),
        }
    }
}

impl core::error::Error for DatasetError {}

/// Immutable collection of per-class feature vectors.
#[derive(Clone, Debug)]
pub struct FeatureDataset {
    dim: usize,
    classes: Vec<ClassRecord>,
}

impl FeatureDataset {
    /// Build a dataset, verifying every invariant: unique class ids,
    /// non-empty classes, consistent dimensions, finite values.
    pub fn new(dim: usize, classes: Vec<ClassRecord>) -> Result<Self, DatasetError> {
        let mut seen: Vec<u32> = Vec::with_capacity(classes.len());
        for c in &classes {
            if seen.contains(&c.class_id) {
                return Err(DatasetError::DuplicateClassId { class_id: c.class_id });
            }
            seen.push(c.class_id);
            if c.features.rows() == 0 {
                return Err(DatasetError::EmptyClass { class_id: c.class_id });
            }
            if c.features.cols() != dim {
                return Err(DatasetError::DimMismatch {
                    class_id: c.class_id,
                    expected: dim,
                    actual: c.features.cols(),
                });
            }
            if !c.features.is_finite() {
                return Err(DatasetError::NonFinite { class_id: c.class_id });
            }
        }
        Ok(FeatureDataset { dim, classes })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> &[ClassRecord] {
        &self.classes
    }

    pub fn class(&self, index: usize) -> &ClassRecord {
        &self.classes[index]
    }

    /// Indices of classes carrying the given split tag, in dataset order.
    pub fn split_indices(&self, tag: SplitTag) -> Vec<usize> {
        self.classes
            .iter()
            .enumerate()
            .filter(|(_, c)| c.split == tag)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn find_class(&self, class_id: u32) -> Option<usize> {
        self.classes.iter().position(|c| c.class_id == class_id)
    }
}

/// How many leading examples of a class are available for training when a
/// trailing fraction is held out (evaluation base queries come from the
/// tail). At least one example always remains on the training side.
pub fn holdout_boundary(total_examples: usize, holdout_fraction: f64) -> usize {
    let holdout = ((total_examples as f64) * holdout_fraction) as usize;
    (total_examples - holdout).max(1)
}

/// Configuration for [`generate_synthetic`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub num_base: usize,
    pub num_novel_val: usize,
    pub num_novel_test: usize,
    pub dim: usize,
    pub examples_per_class: usize,
    /// Within-class standard deviation around the class center.
    pub cluster_spread: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    fn validate(&self) -> Result<(), DatasetError> {
        if self.num_base == 0 || self.num_novel_val == 0 || self.num_novel_test == 0 {
            return Err(DatasetError::InvalidConfig {
                msg: "all class counts must be positive",
            });
        }
        if self.dim == 0 || self.examples_per_class == 0 {
            return Err(DatasetError::InvalidConfig {
                msg: "dim and examples_per_class must be positive",
            });
        }
        if !(self.cluster_spread > 0.0) {
            return Err(DatasetError::InvalidConfig {
                msg: "cluster_spread must be positive",
            });
        }
        Ok(())
    }
}

/// Gaussian-mixture dataset: each class center is uniform on the unit
/// sphere; examples are `center + N(0, spread^2 I)`, L2-normalized.
/// A pure function of its config.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<FeatureDataset, DatasetError> {
    config.validate()?;
    let mut stream = rng::stream_from_seed(config.seed);
    let mut classes = Vec::new();
    let mut next_id = 0u32;
    let groups = [
        (SplitTag::Base, config.num_base),
        (SplitTag::NovelVal, config.num_novel_val),
        (SplitTag::NovelTest, config.num_novel_test),
    ];
    for (split, count) in groups {
        for _ in 0..count {
            // Center: normalized isotropic Gaussian = uniform on the sphere.
            let mut center: Vec<f64> = (0..config.dim).map(|_| rng::normal(&mut stream, 1.0)).collect();
            let norm = crate::mathx::sqrt(center.iter().map(|v| v * v).sum::<f64>()).max(1e-12);
            center.iter_mut().for_each(|v| *v /= norm);

            let mut features = Matrix::zeros(config.examples_per_class, config.dim);
            for r in 0..config.examples_per_class {
                let row = features.row_mut(r);
                for (j, v) in row.iter_mut().enumerate() {
                    *v = center[j] + rng::normal(&mut stream, config.cluster_spread);
                }
                let n = crate::mathx::sqrt(row.iter().map(|v| v * v).sum::<f64>()).max(1e-12);
                row.iter_mut().for_each(|v| *v /= n);
            }
            classes.push(ClassRecord {
                class_id: next_id,
                split,
                features,
            });
            next_id += 1;
        }
    }
    FeatureDataset::new(config.dim, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn tiny_config() -> SyntheticConfig {
        SyntheticConfig {
            num_base: 3,
            num_novel_val: 1,
            num_novel_test: 2,
            dim: 8,
            examples_per_class: 4,
            cluster_spread: 0.1,
            seed: 7,
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_synthetic(&tiny_config()).unwrap();
        let b = generate_synthetic(&tiny_config()).unwrap();
        for (ca, cb) in a.classes().iter().zip(b.classes()) {
            assert_eq!(ca.class_id, cb.class_id);
            assert_eq!(ca.split, cb.split);
            assert_eq!(ca.features, cb.features);
        }
    }

    #[test]
    fn examples_are_unit_norm_and_finite() {
        let ds = generate_synthetic(&tiny_config()).unwrap();
        assert_eq!(ds.dim(), 8);
        for c in ds.classes() {
            assert!(c.features.is_finite());
            for r in 0..c.features.rows() {
                let n: f64 = c.features.row(r).iter().map(|v| v * v).sum();
                assert!((n - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn vanishing_spread_collapses_to_center() {
        let mut cfg = tiny_config();
        cfg.cluster_spread = 1e-12;
        let ds = generate_synthetic(&cfg).unwrap();
        for c in ds.classes() {
            let first = c.features.row(0);
            for r in 1..c.features.rows() {
                for (a, b) in c.features.row(r).iter().zip(first) {
                    assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = tiny_config();
        cfg.cluster_spread = 0.0;
        assert!(generate_synthetic(&cfg).is_err());
        let mut cfg = tiny_config();
        cfg.num_base = 0;
        assert!(generate_synthetic(&cfg).is_err());
    }

    #[test]
    fn dataset_invariants_enforced() {
        let m = Matrix::zeros(1, 4);
        let dup = vec![
            ClassRecord { class_id: 1, split: SplitTag::Base, features: m.clone() },
            ClassRecord { class_id: 1, split: SplitTag::Base, features: m.clone() },
        ];
        assert!(matches!(
            FeatureDataset::new(4, dup),
            Err(DatasetError::DuplicateClassId { class_id: 1 })
        ));

        let wrong_dim = vec![ClassRecord {
            class_id: 0,
            split: SplitTag::Base,
            features: Matrix::zeros(1, 3),
        }];
        assert!(matches!(
            FeatureDataset::new(4, wrong_dim),
            Err(DatasetError::DimMismatch { .. })
        ));

        let mut bad = Matrix::zeros(1, 4);
        bad.set(0, 2, f64::NAN);
        let nonfinite = vec![ClassRecord {
            class_id: 0,
            split: SplitTag::Base,
            features: bad,
        }];
        assert!(matches!(
            FeatureDataset::new(4, nonfinite),
            Err(DatasetError::NonFinite { class_id: 0 })
        ));
    }

    #[test]
    fn split_indices_group_by_tag() {
        let ds = generate_synthetic(&tiny_config()).unwrap();
        assert_eq!(ds.split_indices(SplitTag::Base).len(), 3);
        assert_eq!(ds.split_indices(SplitTag::NovelVal).len(), 1);
        assert_eq!(ds.split_indices(SplitTag::NovelTest).len(), 2);
    }

    #[test]
    fn holdout_boundary_reserves_tail() {
        assert_eq!(holdout_boundary(100, 0.2), 80);
        assert_eq!(holdout_boundary(5, 0.2), 4);
        assert_eq!(holdout_boundary(1, 0.9), 1);
        assert_eq!(holdout_boundary(10, 0.0), 10);
    }
}
