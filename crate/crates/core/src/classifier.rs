//! Cosine-similarity feature classifier: scoring, weight imprinting for
//! novel classes, base-classifier pretraining, and top-k accuracy.

use alloc::vec::Vec;
use core::fmt;

use crate::dataset::{holdout_boundary, FeatureDataset, SplitTag};
use crate::optim::{sgd_step, SgdConfig, SgdState};
use crate::rng;
use crate::tensor::{Axis, Matrix, Record, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub enum ClassifierError {
    DimMismatch { features: usize, weights: usize },
    DuplicateClassId { class_id: u32 },
    RowNotNormalized { row: usize, norm: f64 },
    NotEnoughBaseClasses { found: usize },
    EmptyNovelClass { index: usize },
    KOutOfRange { k: usize, classes: usize },
    NonFiniteWeights { epoch: usize },
    InvalidScale { scale: f64 },
    Tensor(TensorError),
}

impl fmt::Display for ClassifierError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassifierError::DimMismatch { features, weights } => {
                write!(f, "feature dim {features} does not match weight dim {weights}")
            }
            ClassifierError::DuplicateClassId { class_id } => {
                write!(f, "duplicate class id {class_id} in classifier weights")
            }
            ClassifierError::RowNotNormalized { row, norm } => {
                write!(f, "weight row {row} has norm {norm}, expected 1 (or guarded zero)")
            }
            ClassifierError::NotEnoughBaseClasses { found } => {
                write!(f, "pretraining needs at least 2 base classes, found {found}")
            }
            ClassifierError::EmptyNovelClass { index } => {
                write!(f, "novel class {index} has no training features")
            }
            ClassifierError::KOutOfRange { k, classes } => {
                write!(f, "top-k with k={k} invalid for {classes} classes")
            }
            ClassifierError::NonFiniteWeights { epoch } => {
                write!(f, "pretraining produced non-finite weights at epoch {epoch}")
            }
            ClassifierError::InvalidScale { scale } => {
                write!(f, "cosine score scale must be positive, got {scale}")
            }
            ClassifierError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for ClassifierError {}

impl From<TensorError> for ClassifierError {
    fn from(e: TensorError) -> Self {
        ClassifierError::Tensor(e)
    }
}

/// `N x d` matrix of unit-norm per-class weight rows plus the scalar
/// multiplier applied to cosine scores.
#[derive(Clone, Debug)]
pub struct ClassifierWeights {
    weights: Matrix,
    class_ids: Vec<u32>,
    scale: f64,
}

impl ClassifierWeights {
    /// Validates invariants: unique class ids, one id per row, every row of
    /// unit norm within 1e-6 (or the guarded zero vector).
    pub fn new(weights: Matrix, class_ids: Vec<u32>, scale: f64) -> Result<Self, ClassifierError> {
        if !(scale > 0.0) {
            return Err(ClassifierError::InvalidScale { scale });
        }
        if class_ids.len() != weights.rows() {
            return Err(ClassifierError::DimMismatch {
                features: class_ids.len(),
                weights: weights.rows(),
            });
        }
        let mut seen: Vec<u32> = Vec::with_capacity(class_ids.len());
        for &id in &class_ids {
            if seen.contains(&id) {
                return Err(ClassifierError::DuplicateClassId { class_id: id });
            }
            seen.push(id);
        }
        for r in 0..weights.rows() {
            let norm = crate::mathx::sqrt(weights.row(r).iter().map(|v| v * v).sum::<f64>());
            if (norm - 1.0).abs() > 1e-6 && norm > 1e-9 {
                return Err(ClassifierError::RowNotNormalized { row: r, norm });
            }
        }
        Ok(ClassifierWeights {
            weights,
            class_ids,
            scale,
        })
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    /// Row index of a class id.
    pub fn row_of(&self, class_id: u32) -> Option<usize> {
        self.class_ids.iter().position(|&id| id == class_id)
    }
}

/// Differentiable cosine scores: `scale * normalize(features) * weights^T`.
/// Gradients flow to both features and weight rows.
pub fn score(
    rec: &mut Record,
    features: &Tensor,
    weight_rows: &Tensor,
    scale: f64,
) -> Result<Tensor, TensorError> {
    if features.cols() != weight_rows.cols() {
        return Err(TensorError::ShapeMismatch {
            op: "score",
            lhs: features.shape(),
            rhs: weight_rows.shape(),
        });
    }
    let z = rec.l2_normalize(features, Axis::Rows);
    let s = rec.matmul_nt(&z, weight_rows)?;
    Ok(rec.scale(&s, scale))
}

/// Plain-value scoring through the same op route.
pub fn cosine_scores(features: &Matrix, weight_rows: &Matrix, scale: f64) -> Result<Matrix, TensorError> {
    let mut rec = Record::inference();
    let f = rec.constant(features.clone());
    let w = rec.constant(weight_rows.clone());
    Ok(score(&mut rec, &f, &w, scale)?.to_matrix())
}

/// Weight imprinting: base rows are copied verbatim; each novel row is the
/// renormalized mean of its K normalized training features. Output rows are
/// ordered base-first, then novel in the given order.
pub fn initial_estimate(
    novel_train: &[(u32, Matrix)],
    base: &ClassifierWeights,
) -> Result<ClassifierWeights, ClassifierError> {
    let d = base.dim();
    let n_out = base.num_classes() + novel_train.len();
    let mut weights = Matrix::zeros(n_out, d);
    let mut class_ids = Vec::with_capacity(n_out);
    for r in 0..base.num_classes() {
        weights.row_mut(r).copy_from_slice(base.weights.row(r));
        class_ids.push(base.class_ids[r]);
    }
    for (i, (class_id, feats)) in novel_train.iter().enumerate() {
        if feats.rows() == 0 {
            return Err(ClassifierError::EmptyNovelClass { index: i });
        }
        if feats.cols() != d {
            return Err(ClassifierError::DimMismatch {
                features: feats.cols(),
                weights: d,
            });
        }
        let row = imprint_row(feats);
        weights
            .row_mut(base.num_classes() + i)
            .copy_from_slice(&row);
        class_ids.push(*class_id);
    }
    ClassifierWeights::new(weights, class_ids, base.scale)
}

/// Renormalized mean of normalized feature rows (one novel class).
pub fn imprint_row(features: &Matrix) -> Vec<f64> {
    let normed = features.l2_normalize_rows();
    let d = normed.cols();
    let k = normed.rows() as f64;
    let mut mean = alloc::vec![0.0; d];
    for r in 0..normed.rows() {
        for (m, &v) in mean.iter_mut().zip(normed.row(r)) {
            *m += v / k;
        }
    }
    let norm = crate::mathx::sqrt(mean.iter().map(|v| v * v).sum::<f64>()).max(crate::tensor::EPS_NORM);
    mean.iter_mut().for_each(|v| *v /= norm);
    mean
}

/// Configuration for base-classifier pretraining.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Scalar multiplier applied to cosine scores.
    pub scale: f64,
    /// Trailing fraction of each base class reserved for evaluation-time
    /// base queries; never seen during pretraining.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            batch_size: 64,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            scale: 10.0,
            holdout_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Summary of a pretraining run.
#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub final_train_accuracy: f64,
    pub epochs_run: usize,
    pub examples_seen: usize,
}

/// Train base-class weights by minimizing cross entropy of cosine scores
/// over the base split (holdout tail excluded), starting from imprinted
/// class means. Rows are renormalized after every update. Deterministic
/// given the seed.
pub fn pretrain_base(
    dataset: &FeatureDataset,
    config: &PretrainConfig,
) -> Result<(ClassifierWeights, PretrainReport), ClassifierError> {
    let base_idx = dataset.split_indices(SplitTag::Base);
    if base_idx.len() < 2 {
        return Err(ClassifierError::NotEnoughBaseClasses { found: base_idx.len() });
    }
    let d = dataset.dim();
    let n = base_idx.len();

    // Flatten the training portion of every base class.
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut class_ids = Vec::with_capacity(n);
    let mut weights = Matrix::zeros(n, d);
    for (label, &ci) in base_idx.iter().enumerate() {
        let class = dataset.class(ci);
        class_ids.push(class.class_id);
        let train_rows = holdout_boundary(class.features.rows(), config.holdout_fraction);
        let train = Matrix::from_vec(
            train_rows,
            d,
            class.features.data()[..train_rows * d].to_vec(),
        )?;
        weights.row_mut(label).copy_from_slice(&imprint_row(&train));
        for r in 0..train_rows {
            rows.push(train.row(r).to_vec());
            labels.push(label);
        }
    }

    let mut stream = rng::stream_from_seed(config.seed);
    let sgd_cfg = SgdConfig {
        momentum: config.momentum,
        weight_decay: config.weight_decay,
    };
    let mut state = SgdState::new(&[n * d]);
    let total = rows.len();
    for epoch in 0..config.epochs {
        let order = rng::sample_indices(&mut stream, total, total);
        for batch in order.chunks(config.batch_size.max(1)) {
            let feats = Matrix::from_rows(
                &batch.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>(),
            )?;
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();

            let mut rec = Record::new();
            let w = rec.leaf(weights.clone(), true);
            let z = rec.constant(feats);
            let s = score(&mut rec, &z, &w, config.scale)?;
            let loss = rec.cross_entropy_from_scores(&s, &batch_labels)?;
            rec.backward(&loss)?;

            let grad = w.grad().expect("weights participate in the loss");
            sgd_step(
                weights.data_mut(),
                grad.data(),
                config.learning_rate,
                &sgd_cfg,
                state.velocity_mut(0),
            );
            weights = weights.l2_normalize_rows();
        }
        if !weights.is_finite() {
            return Err(ClassifierError::NonFiniteWeights { epoch });
        }
    }

    let all = Matrix::from_rows(&rows)?;
    let scores = cosine_scores(&all, &weights, config.scale)?;
    let final_train_accuracy = topk_accuracy(&scores, &labels, 1)?;
    let weights = ClassifierWeights::new(weights, class_ids, config.scale)?;
    Ok((
        weights,
        PretrainReport {
            final_train_accuracy,
            epochs_run: config.epochs,
            examples_seen: total * config.epochs,
        },
    ))
}

/// Fraction of rows whose true label ranks among the k highest scores.
/// Ties rank the lower class index first, so the result is deterministic.
pub fn topk_accuracy(scores: &Matrix, labels: &[usize], k: usize) -> Result<f64, ClassifierError> {
    let n = scores.cols();
    if k == 0 || k > n {
        return Err(ClassifierError::KOutOfRange { k, classes: n });
    }
    if labels.len() != scores.rows() {
        return Err(ClassifierError::DimMismatch {
            features: labels.len(),
            weights: scores.rows(),
        });
    }
    let mut hits = 0usize;
    for (r, &label) in labels.iter().enumerate() {
        if label >= n {
            return Err(ClassifierError::KOutOfRange { k: label, classes: n });
        }
        let row = scores.row(r);
        let target = row[label];
        // Rank = number of classes strictly ahead under (score desc, index asc).
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &s)| s > target || (s == target && j < label))
            .count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}
