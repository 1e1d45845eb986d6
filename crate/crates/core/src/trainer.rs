//! Episodic training of the weight denoiser: sample episodes with "fake"
//! novel classes drawn from the base split, inject Gaussian noise into the
//! imprinted weight estimates, and optimize the joint reconstruction +
//! classification loss with SGD.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::classifier::{initial_estimate, score, ClassifierError, ClassifierWeights};
use crate::dataset::{holdout_boundary, FeatureDataset, SplitTag};
use crate::eval::{self, EvalConfig, EvalError, Ways};
use crate::graph::{build_graph, ClassGraph, GraphError};
use crate::model::{LiftedParams, ModelConfig, ModelError, WdaeModel};
use crate::optim::{sgd_step, SgdConfig, SgdState};
use crate::rng::{self, Stream};
use crate::tensor::{Matrix, Record, Tensor, TensorError};

/// Stream index reserved for model initialization; episode `i` draws from
/// stream `EPISODE_STREAM_BASE + i`.
const INIT_STREAM: u64 = 0;
const EPISODE_STREAM_BASE: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    NotEnoughBaseClasses { available: usize, needed: usize },
    InsufficientExamples { class_id: u32, needed: usize, available: usize },
    InvalidConfig { msg: &'static str },
    NonFiniteLoss { epoch: usize, episode: usize, stream_index: u64 },
    Classifier(ClassifierError),
    Graph(GraphError),
    Model(ModelError),
    Tensor(TensorError),
    Eval(EvalError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::NotEnoughBaseClasses { available, needed } => write!(
                f,
                "episode needs more than {needed} base classes, dataset has {available}"
            ),
            TrainError::InsufficientExamples { class_id, needed, available } => write!(
                f,
                "class {class_id} has {available} usable examples, episode needs {needed}"
            ),
            TrainError::InvalidConfig { msg } => write!(f, "invalid train config: {msg}"),
            TrainError::NonFiniteLoss { epoch, episode, stream_index } => write!(
                f,
                "non-finite loss at epoch {epoch} episode {episode} (episode stream {stream_index})"
            ),
            TrainError::Classifier(e) => write!(f, "{e}"),
            TrainError::Graph(e) => write!(f, "{e}"),
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Tensor(e) => write!(f, "{e}"),
            TrainError::Eval(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for TrainError {}

impl From<ClassifierError> for TrainError {
    fn from(e: ClassifierError) -> Self {
        TrainError::Classifier(e)
    }
}

impl From<GraphError> for TrainError {
    fn from(e: GraphError) -> Self {
        TrainError::Graph(e)
    }
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}

impl From<EvalError> for TrainError {
    fn from(e: EvalError) -> Self {
        TrainError::Eval(e)
    }
}

/// Shape of one training episode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeConfig {
    /// Fake novel classes sampled per episode.
    pub num_fake_novel: usize,
    /// Training shots per fake novel class.
    pub shots: usize,
    /// Validation examples per episode.
    pub num_validation: usize,
    /// Standard deviation of the additive Gaussian noise.
    pub noise_sigma: f64,
    /// Spread validation examples as evenly as possible over the episode
    /// classes (uniform pooled sampling when off).
    pub stratified: bool,
    /// Trailing per-class fraction reserved for evaluation; episodes only
    /// touch the leading training portion.
    pub holdout_fraction: f64,
}

impl EpisodeConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if self.num_fake_novel == 0 || self.shots == 0 || self.num_validation == 0 {
            return Err(TrainError::InvalidConfig {
                msg: "num_fake_novel, shots and num_validation must be positive",
            });
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(TrainError::InvalidConfig {
                msg: "noise_sigma must be finite and non-negative",
            });
        }
        Ok(())
    }
}

/// One sampled training episode. Row order everywhere is: remaining base
/// classes first (in base-weight order), then the fake novel classes.
#[derive(Clone, Debug)]
pub struct Episode {
    pub base_ids: Vec<u32>,
    pub fake_novel_ids: Vec<u32>,
    /// K training features per fake novel class, aligned with
    /// `fake_novel_ids`.
    pub novel_train: Vec<(u32, Matrix)>,
    pub validation_features: Matrix,
    /// Labels over the episode's row order.
    pub validation_labels: Vec<usize>,
    /// Pretrained weight rows of every episode class (the targets).
    pub target_weights: Matrix,
    /// Rows 0..num_base of `target_weights` are the base rows.
    pub num_base: usize,
}

/// Ablation switches mirroring the trainer's loss and input variations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AblationFlags {
    /// Skip the Gaussian noise on the denoiser input.
    pub no_noise: bool,
    /// Feed noisy targets instead of noisy imprinted estimates.
    pub noisy_targets_as_input: bool,
    /// Drop the validation cross-entropy term.
    pub no_cls_loss: bool,
    /// Drop the reconstruction term.
    pub no_rec_loss: bool,
}

/// Periodic validation-accuracy probe run on the novel-val split.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationProbe {
    pub every_epochs: usize,
    pub episodes: usize,
    pub ways: usize,
    pub shots: usize,
    pub queries_per_class: usize,
    pub step_size: f64,
}

/// Optimization settings for [`train`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub learning_rate: f64,
    /// The learning rate is multiplied by `lr_drop_factor` once, at
    /// `floor(epochs * lr_drop_fraction)`.
    pub lr_drop_fraction: f64,
    pub lr_drop_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Weight of the reconstruction term.
    pub rec_weight: f64,
    /// Weight of the classification term.
    pub cls_weight: f64,
    /// Scalar applied to cosine scores inside the classification term.
    pub score_scale: f64,
    /// Episodes per optimizer step (gradients averaged).
    pub grad_accumulation: usize,
    pub ablation: AblationFlags,
    pub seed: u64,
    pub validation: Option<ValidationProbe>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            episodes_per_epoch: 100,
            learning_rate: 0.1,
            lr_drop_fraction: 2.0 / 3.0,
            lr_drop_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            rec_weight: 1.0,
            cls_weight: 1.0,
            score_scale: 10.0,
            grad_accumulation: 1,
            ablation: AblationFlags::default(),
            seed: 0,
            validation: None,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.episodes_per_epoch == 0 {
            return Err(TrainError::InvalidConfig {
                msg: "epochs and episodes_per_epoch must be positive",
            });
        }
        if self.grad_accumulation == 0 {
            return Err(TrainError::InvalidConfig {
                msg: "grad_accumulation must be positive",
            });
        }
        if !(self.score_scale > 0.0) {
            return Err(TrainError::InvalidConfig {
                msg: "score_scale must be positive",
            });
        }
        Ok(())
    }

    fn learning_rate_at(&self, epoch: usize) -> f64 {
        let drop_epoch = (self.epochs as f64 * self.lr_drop_fraction) as usize;
        if epoch >= drop_epoch {
            self.learning_rate * self.lr_drop_factor
        } else {
            self.learning_rate
        }
    }
}

/// Sample one training episode: fake novel classes drawn uniformly without
/// replacement from the base split, K shots each, and a validation set
/// spread over all episode classes. Deterministic given the rng state.
pub fn sample_episode(
    dataset: &FeatureDataset,
    base_weights: &ClassifierWeights,
    cfg: &EpisodeConfig,
    rng: &mut Stream,
) -> Result<Episode, TrainError> {
    cfg.validate()?;
    let n_base_total = base_weights.num_classes();
    if cfg.num_fake_novel >= n_base_total {
        return Err(TrainError::NotEnoughBaseClasses {
            available: n_base_total,
            needed: cfg.num_fake_novel,
        });
    }

    let fake_rows = rng::sample_indices(rng, n_base_total, cfg.num_fake_novel);
    let is_fake = |row: usize| fake_rows.contains(&row);
    let base_rows: Vec<usize> = (0..n_base_total).filter(|&r| !is_fake(r)).collect();

    // Training portion of each class (evaluation holdout excluded).
    let train_rows_of = |class_id: u32| -> Result<(usize, usize), TrainError> {
        let ci = dataset
            .find_class(class_id)
            .ok_or(TrainError::InvalidConfig {
                msg: "base weights reference a class missing from the dataset",
            })?;
        let total = dataset.class(ci).features.rows();
        Ok((ci, holdout_boundary(total, cfg.holdout_fraction)))
    };

    // K shots per fake novel class.
    let mut novel_train = Vec::with_capacity(cfg.num_fake_novel);
    let mut shot_indices: Vec<Vec<usize>> = Vec::with_capacity(cfg.num_fake_novel);
    for &row in &fake_rows {
        let class_id = base_weights.class_ids()[row];
        let (ci, train_rows) = train_rows_of(class_id)?;
        if train_rows < cfg.shots {
            return Err(TrainError::InsufficientExamples {
                class_id,
                needed: cfg.shots,
                available: train_rows,
            });
        }
        let sel = rng::sample_indices(rng, train_rows, cfg.shots);
        novel_train.push((class_id, dataset.class(ci).features.select_rows(&sel)));
        shot_indices.push(sel);
    }

    // Episode row order: remaining base classes, then fake novels.
    let episode_rows: Vec<usize> = base_rows.iter().chain(fake_rows.iter()).copied().collect();
    let n_classes = episode_rows.len();
    let target_weights = base_weights.weights().select_rows(&episode_rows);
    let base_ids: Vec<u32> = base_rows
        .iter()
        .map(|&r| base_weights.class_ids()[r])
        .collect();
    let fake_novel_ids: Vec<u32> = fake_rows
        .iter()
        .map(|&r| base_weights.class_ids()[r])
        .collect();

    // Validation candidates per episode slot: the training portion, minus
    // the K shots for fake novel classes.
    let candidates_of = |slot: usize| -> Result<(usize, Vec<usize>), TrainError> {
        let class_id = if slot < base_ids.len() {
            base_ids[slot]
        } else {
            fake_novel_ids[slot - base_ids.len()]
        };
        let (ci, train_rows) = train_rows_of(class_id)?;
        let mut pool: Vec<usize> = (0..train_rows).collect();
        if slot >= base_ids.len() {
            let shots = &shot_indices[slot - base_ids.len()];
            pool.retain(|i| !shots.contains(i));
        }
        Ok((ci, pool))
    };

    let mut val_rows: Vec<Vec<f64>> = Vec::with_capacity(cfg.num_validation);
    let mut val_labels: Vec<usize> = Vec::with_capacity(cfg.num_validation);
    if cfg.stratified {
        // Even quota per class; the remainder goes to randomly chosen slots.
        let quota = cfg.num_validation / n_classes;
        let remainder = cfg.num_validation % n_classes;
        let extra = rng::sample_indices(rng, n_classes, remainder);
        for slot in 0..n_classes {
            let want = quota + usize::from(extra.contains(&slot));
            if want == 0 {
                continue;
            }
            let (ci, pool) = candidates_of(slot)?;
            if pool.len() < want {
                let class_id = dataset.class(ci).class_id;
                return Err(TrainError::InsufficientExamples {
                    class_id,
                    needed: want,
                    available: pool.len(),
                });
            }
            for pick in rng::sample_indices(rng, pool.len(), want) {
                val_rows.push(dataset.class(ci).features.row(pool[pick]).to_vec());
                val_labels.push(slot);
            }
        }
    } else {
        let mut flat: Vec<(usize, usize, usize)> = Vec::new();
        for slot in 0..n_classes {
            let (ci, pool) = candidates_of(slot)?;
            flat.extend(pool.into_iter().map(|i| (slot, ci, i)));
        }
        if flat.len() < cfg.num_validation {
            return Err(TrainError::InvalidConfig {
                msg: "not enough validation candidates in the episode",
            });
        }
        for pick in rng::sample_indices(rng, flat.len(), cfg.num_validation) {
            let (slot, ci, i) = flat[pick];
            val_rows.push(dataset.class(ci).features.row(i).to_vec());
            val_labels.push(slot);
        }
    }

    Ok(Episode {
        base_ids,
        fake_novel_ids,
        novel_train,
        validation_features: Matrix::from_rows(&val_rows)?,
        validation_labels: val_labels,
        target_weights,
        num_base: base_rows.len(),
    })
}

/// The denoiser input for one episode: the pre-noise basis (estimates, or
/// the targets under the noisy-targets ablation) and its noisy version.
/// The class graph is built from `basis`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyInput {
    pub basis: Matrix,
    pub noisy: Matrix,
}

/// Build the (possibly noisy) denoiser input for an episode. With
/// `sigma == 0` no random draws happen at all, so the no-noise ablation
/// and a zero-sigma run consume identical rng state.
pub fn make_noisy_input(
    episode: &Episode,
    sigma: f64,
    flags: AblationFlags,
    rng: &mut Stream,
) -> Result<NoisyInput, TrainError> {
    let basis = if flags.noisy_targets_as_input {
        episode.target_weights.clone()
    } else {
        let d = episode.target_weights.cols();
        let base_part = Matrix::from_vec(
            episode.num_base,
            d,
            episode.target_weights.data()[..episode.num_base * d].to_vec(),
        )?;
        let base = ClassifierWeights::new(base_part, episode.base_ids.clone(), 1.0)?;
        initial_estimate(&episode.novel_train, &base)?
            .weights()
            .clone()
    };
    let mut noisy = basis.clone();
    if !flags.no_noise && sigma > 0.0 {
        for v in noisy.data_mut() {
            *v += rng::normal(rng, sigma);
        }
    }
    Ok(NoisyInput { basis, noisy })
}

/// Everything produced by one episode's loss evaluation.
pub struct EpisodeLossOutput {
    pub loss: Tensor,
    pub reconstructed: Tensor,
    pub rec_term: f64,
    pub cls_term: f64,
    pub lifted: LiftedParams,
}

/// Joint episodic loss: mean squared row reconstruction against the target
/// weights plus mean validation cross entropy of scaled cosine scores,
/// with ablation flags dropping either term.
pub fn episode_loss(
    rec: &mut Record,
    model: &mut WdaeModel,
    episode: &Episode,
    noisy_input: &Matrix,
    graph: &ClassGraph,
    cfg: &TrainConfig,
    rng: &mut Stream,
) -> Result<EpisodeLossOutput, TrainError> {
    let n_classes = episode.target_weights.rows();
    let (reconstructed, lifted) = model.reconstruct_train(rec, noisy_input, graph, rng)?;

    let mut rec_term = 0.0;
    let mut cls_term = 0.0;
    let mut parts: Vec<Tensor> = Vec::with_capacity(2);
    if !cfg.ablation.no_rec_loss {
        let targets = rec.constant(episode.target_weights.clone());
        let diff = rec.sub(&reconstructed, &targets)?;
        let sq = rec.mul(&diff, &diff)?;
        let total = rec.sum(&sq);
        let term = rec.scale(&total, 1.0 / n_classes as f64);
        rec_term = term.item();
        parts.push(rec.scale(&term, cfg.rec_weight));
    }
    if !cfg.ablation.no_cls_loss {
        let features = rec.constant(episode.validation_features.clone());
        let scores = score(rec, &features, &reconstructed, cfg.score_scale)?;
        let term = rec.cross_entropy_from_scores(&scores, &episode.validation_labels)?;
        cls_term = term.item();
        parts.push(rec.scale(&term, cfg.cls_weight));
    }
    let loss = match parts.len() {
        0 => rec.scalar(0.0),
        1 => parts.pop().expect("one part"),
        _ => {
            let b = parts.pop().expect("two parts");
            let a = parts.pop().expect("two parts");
            rec.add(&a, &b)?
        }
    };
    Ok(EpisodeLossOutput {
        loss,
        reconstructed,
        rec_term,
        cls_term,
        lifted,
    })
}

/// Per-episode log record; the training log file is one line per record.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeLog {
    pub epoch: usize,
    pub episode: usize,
    pub loss: f64,
    pub rec: f64,
    pub cls: f64,
}

impl EpisodeLog {
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} episode={} loss={} rec={} cls={}",
            self.epoch, self.episode, self.loss, self.rec, self.cls
        )
    }
}

/// Per-epoch summary.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub learning_rate: f64,
    /// Refined novel top-1 on the validation split, when probed.
    pub validation_accuracy: Option<f64>,
}

/// Full training log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub episodes: Vec<EpisodeLog>,
    pub epochs: Vec<EpochLog>,
}

/// Train a fresh model episodically. The whole run is a deterministic
/// function of the dataset, weights, and configs: the model is initialized
/// from stream 0 of the seed and episode `i` draws everything (sampling,
/// noise, dropout) from stream `1 + i`.
pub fn train(
    dataset: &FeatureDataset,
    base_weights: &ClassifierWeights,
    model_config: ModelConfig,
    episode_config: &EpisodeConfig,
    train_config: &TrainConfig,
) -> Result<(WdaeModel, TrainLog), TrainError> {
    episode_config.validate()?;
    train_config.validate()?;
    let mut model = WdaeModel::init(
        model_config,
        &mut rng::substream(train_config.seed, INIT_STREAM),
    )?;
    let sgd_cfg = SgdConfig {
        momentum: train_config.momentum,
        weight_decay: train_config.weight_decay,
    };
    let sizes = model.trainable_sizes();
    let mut sgd_state = SgdState::new(&sizes);
    let mut accum: Vec<Vec<f64>> = sizes.iter().map(|&n| alloc::vec![0.0; n]).collect();
    let mut accum_count = 0usize;

    let mut log = TrainLog::default();
    let mut global_episode = 0u64;
    for epoch in 0..train_config.epochs {
        let lr = train_config.learning_rate_at(epoch);
        let mut loss_sum = 0.0;
        for episode_idx in 0..train_config.episodes_per_epoch {
            let stream_index = EPISODE_STREAM_BASE + global_episode;
            let mut stream = rng::substream(train_config.seed, stream_index);
            global_episode += 1;

            let episode = sample_episode(dataset, base_weights, episode_config, &mut stream)?;
            let input = make_noisy_input(
                &episode,
                episode_config.noise_sigma,
                train_config.ablation,
                &mut stream,
            )?;
            let graph = build_graph(
                &input.basis,
                model_config.graph_neighbors,
                model_config.inverse_temperature,
            )?;

            let mut rec = Record::new();
            let out = episode_loss(
                &mut rec,
                &mut model,
                &episode,
                &input.noisy,
                &graph,
                train_config,
                &mut stream,
            )?;
            let loss_value = out.loss.item();
            if !loss_value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    episode: episode_idx,
                    stream_index,
                });
            }
            rec.backward(&out.loss)?;

            for (acc, grad) in accum.iter_mut().zip(out.lifted.grads()) {
                for (a, g) in acc.iter_mut().zip(&grad) {
                    *a += g;
                }
            }
            accum_count += 1;
            if accum_count == train_config.grad_accumulation {
                let inv = 1.0 / accum_count as f64;
                let mut buf_idx = 0usize;
                model.visit_trainable_mut(|param| {
                    let grad: Vec<f64> = accum[buf_idx].iter().map(|&g| g * inv).collect();
                    sgd_step(param, &grad, lr, &sgd_cfg, sgd_state.velocity_mut(buf_idx));
                    buf_idx += 1;
                });
                for acc in &mut accum {
                    acc.iter_mut().for_each(|v| *v = 0.0);
                }
                accum_count = 0;
            }

            loss_sum += loss_value;
            log.episodes.push(EpisodeLog {
                epoch,
                episode: episode_idx,
                loss: loss_value,
                rec: out.rec_term,
                cls: out.cls_term,
            });
        }

        let validation_accuracy = match &train_config.validation {
            Some(probe)
                if probe.every_epochs > 0
                    && (epoch % probe.every_epochs == probe.every_epochs - 1
                        || epoch + 1 == train_config.epochs) =>
            {
                Some(validation_probe_accuracy(
                    dataset,
                    base_weights,
                    &model,
                    probe,
                    episode_config.holdout_fraction,
                    train_config.seed,
                )?)
            }
            _ => None,
        };
        log.epochs.push(EpochLog {
            epoch,
            mean_loss: loss_sum / train_config.episodes_per_epoch as f64,
            learning_rate: lr,
            validation_accuracy,
        });
    }
    Ok((model, log))
}

fn validation_probe_accuracy(
    dataset: &FeatureDataset,
    base_weights: &ClassifierWeights,
    model: &WdaeModel,
    probe: &ValidationProbe,
    holdout_fraction: f64,
    seed: u64,
) -> Result<f64, TrainError> {
    let cfg = EvalConfig {
        split: SplitTag::NovelVal,
        ways: Ways::Count(probe.ways),
        shots: probe.shots,
        queries_per_class: probe.queries_per_class,
        episodes: probe.episodes,
        step_size: probe.step_size,
        top_k: alloc::vec![1],
        include_base: false,
        base_queries_per_class: 0,
        holdout_fraction,
        // Decorrelated from the training episode streams.
        seed: seed ^ 0x9E37_79B9_7F4A_7C15,
    };
    let report = eval::run_eval(dataset, base_weights, model, &cfg)?;
    Ok(report.novel_refined[0].mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{pretrain_base, PretrainConfig};
    use crate::dataset::{generate_synthetic, SyntheticConfig};
    use crate::model::Variant;
    use crate::rng::stream_from_seed;
    use alloc::vec;

    fn fixture() -> (FeatureDataset, ClassifierWeights) {
        let ds = generate_synthetic(&SyntheticConfig {
            num_base: 8,
            num_novel_val: 2,
            num_novel_test: 2,
            dim: 12,
            examples_per_class: 20,
            cluster_spread: 0.15,
            seed: 9,
        })
        .unwrap();
        let (w, _) = pretrain_base(
            &ds,
            &PretrainConfig {
                epochs: 5,
                seed: 2,
                ..PretrainConfig::default()
            },
        )
        .unwrap();
        (ds, w)
    }

    fn episode_cfg() -> EpisodeConfig {
        EpisodeConfig {
            num_fake_novel: 3,
            shots: 1,
            num_validation: 10,
            noise_sigma: 0.1,
            stratified: true,
            holdout_fraction: 0.2,
        }
    }

    fn model_cfg() -> ModelConfig {
        ModelConfig {
            variant: Variant::Gnn,
            dim: 12,
            hidden_width: 8,
            dropout_p: 0.1,
            leaky_slope: 0.2,
            graph_neighbors: 3,
            inverse_temperature: 5.0,
        }
    }

    #[test]
    fn episode_shape_and_disjointness() {
        let (ds, w) = fixture();
        let cfg = episode_cfg();
        let mut rng = stream_from_seed(3);
        let ep = sample_episode(&ds, &w, &cfg, &mut rng).unwrap();
        assert_eq!(ep.fake_novel_ids.len(), 3);
        assert_eq!(ep.base_ids.len(), 5);
        assert_eq!(ep.num_base, 5);
        assert_eq!(ep.target_weights.rows(), 8);
        assert_eq!(ep.validation_labels.len(), 10);
        for id in &ep.fake_novel_ids {
            assert!(!ep.base_ids.contains(id));
        }
        // target rows are pretrained rows of the right classes
        for (slot, id) in ep.base_ids.iter().chain(&ep.fake_novel_ids).enumerate() {
            let row = w.row_of(*id).unwrap();
            assert_eq!(ep.target_weights.row(slot), w.weights().row(row));
        }
    }

    #[test]
    fn episode_validation_never_reuses_shots() {
        let (ds, w) = fixture();
        let mut cfg = episode_cfg();
        cfg.num_validation = 30;
        for seed in 0..20 {
            let mut rng = stream_from_seed(seed);
            let ep = sample_episode(&ds, &w, &cfg, &mut rng).unwrap();
            for ((_, shots), _) in ep.novel_train.iter().zip(&ep.fake_novel_ids) {
                for vrow in 0..ep.validation_features.rows() {
                    for s in 0..shots.rows() {
                        assert_ne!(
                            ep.validation_features.row(vrow),
                            shots.row(s),
                            "a fake-novel shot leaked into the validation set"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn episode_boundary_single_remaining_base() {
        let (ds, w) = fixture();
        let mut cfg = episode_cfg();
        cfg.num_fake_novel = 7;
        let mut rng = stream_from_seed(1);
        let ep = sample_episode(&ds, &w, &cfg, &mut rng).unwrap();
        assert_eq!(ep.base_ids.len(), 1);

        cfg.num_fake_novel = 8;
        assert!(matches!(
            sample_episode(&ds, &w, &cfg, &mut rng),
            Err(TrainError::NotEnoughBaseClasses { .. })
        ));
    }

    #[test]
    fn episode_sampling_deterministic() {
        let (ds, w) = fixture();
        let cfg = episode_cfg();
        let ep1 = sample_episode(&ds, &w, &cfg, &mut stream_from_seed(5)).unwrap();
        let ep2 = sample_episode(&ds, &w, &cfg, &mut stream_from_seed(5)).unwrap();
        assert_eq!(ep1.fake_novel_ids, ep2.fake_novel_ids);
        assert_eq!(ep1.validation_labels, ep2.validation_labels);
        assert_eq!(ep1.validation_features, ep2.validation_features);
    }

    #[test]
    fn noisy_input_sigma_zero_is_exact() {
        let (ds, w) = fixture();
        let cfg = episode_cfg();
        let mut rng = stream_from_seed(7);
        let ep = sample_episode(&ds, &w, &cfg, &mut rng).unwrap();
        let input = make_noisy_input(&ep, 0.0, AblationFlags::default(), &mut rng).unwrap();
        assert_eq!(input.basis, input.noisy);
        // base rows equal the pretrained rows exactly
        for slot in 0..ep.num_base {
            assert_eq!(input.basis.row(slot), ep.target_weights.row(slot));
        }
    }

    #[test]
    fn noisy_targets_flag_uses_targets() {
        let (ds, w) = fixture();
        let cfg = episode_cfg();
        let mut rng = stream_from_seed(7);
        let ep = sample_episode(&ds, &w, &cfg, &mut rng).unwrap();
        let flags = AblationFlags {
            noisy_targets_as_input: true,
            ..AblationFlags::default()
        };
        let input = make_noisy_input(&ep, 0.0, flags, &mut rng).unwrap();
        assert_eq!(input.noisy, ep.target_weights);
    }

    #[test]
    fn noise_sigma_statistics() {
        // empirical per-component std over many draws close to sigma
        let (ds, w) = fixture();
        let cfg = episode_cfg();
        let mut rng = stream_from_seed(11);
        let ep = sample_episode(&ds, &w, &cfg, &mut rng).unwrap();
        let sigma = 0.08;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let mut count = 0usize;
        for _ in 0..200 {
            let input = make_noisy_input(&ep, sigma, AblationFlags::default(), &mut rng).unwrap();
            for (n, b) in input.noisy.data().iter().zip(input.basis.data()) {
                let d = n - b;
                sum += d;
                sumsq += d * d;
                count += 1;
            }
        }
        let mean = sum / count as f64;
        let std = crate::mathx::sqrt(sumsq / count as f64 - mean * mean);
        assert!(count > 10_000);
        assert!((0.079..=0.081).contains(&std), "std {std}");
    }

    #[test]
    fn loss_flags_zero_out_terms() {
        let (ds, w) = fixture();
        let ecfg = episode_cfg();
        let mut stream = stream_from_seed(21);
        let ep = sample_episode(&ds, &w, &ecfg, &mut stream).unwrap();
        let input = make_noisy_input(&ep, 0.1, AblationFlags::default(), &mut stream).unwrap();
        let graph = build_graph(&input.basis, 3, 5.0).unwrap();
        let mut model = WdaeModel::init(model_cfg(), &mut stream_from_seed(1)).unwrap();

        let run = |model: &mut WdaeModel, flags: AblationFlags| {
            let cfg = TrainConfig {
                ablation: flags,
                ..TrainConfig::default()
            };
            let mut rec = Record::new();
            let mut rng = stream_from_seed(99);
            episode_loss(&mut rec, model, &ep, &input.noisy, &graph, &cfg, &mut rng).unwrap()
        };

        let both = run(&mut model, AblationFlags::default());
        assert!((both.loss.item() - (both.rec_term + both.cls_term)).abs() < 1e-12);

        let no_rec = run(
            &mut model,
            AblationFlags {
                no_rec_loss: true,
                ..AblationFlags::default()
            },
        );
        assert_eq!(no_rec.rec_term, 0.0);
        assert!((no_rec.loss.item() - no_rec.cls_term).abs() < 1e-12);

        let none = run(
            &mut model,
            AblationFlags {
                no_rec_loss: true,
                no_cls_loss: true,
                ..AblationFlags::default()
            },
        );
        assert_eq!(none.loss.item(), 0.0);
    }

    #[test]
    fn gate_zero_model_loss_is_analytic() {
        // With o ~ 0 the reconstruction equals the noisy input, so the rec
        // term is the squared noise plus imprint error computed directly.
        let (ds, w) = fixture();
        let ecfg = episode_cfg();
        let mut stream = stream_from_seed(31);
        let ep = sample_episode(&ds, &w, &ecfg, &mut stream).unwrap();
        let input = make_noisy_input(&ep, 0.0, AblationFlags::default(), &mut stream).unwrap();
        let graph = build_graph(&input.basis, 3, 5.0).unwrap();
        let mut model = WdaeModel::init(model_cfg(), &mut stream_from_seed(1)).unwrap();
        for (j, b) in model.layers_mut()[1].update.bias.iter_mut().enumerate() {
            if j >= 12 {
                *b = -100.0;
            }
        }
        let cfg = TrainConfig {
            ablation: AblationFlags {
                no_cls_loss: true,
                ..AblationFlags::default()
            },
            ..TrainConfig::default()
        };
        let mut rec = Record::new();
        let mut rng = stream_from_seed(99);
        let out = episode_loss(&mut rec, &mut model, &ep, &input.noisy, &graph, &cfg, &mut rng)
            .unwrap();
        let direct: f64 = input
            .noisy
            .data()
            .iter()
            .zip(ep.target_weights.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / ep.target_weights.rows() as f64;
        assert!((out.loss.item() - direct).abs() < 1e-9, "loss {} direct {direct}", out.loss.item());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (ds, w) = fixture();
        let tcfg = TrainConfig {
            epochs: 2,
            episodes_per_epoch: 3,
            learning_rate: 0.0,
            seed: 4,
            ..TrainConfig::default()
        };
        let (model, _) = train(&ds, &w, model_cfg(), &episode_cfg(), &tcfg).unwrap();
        let fresh = WdaeModel::init(model_cfg(), &mut rng::substream(4, 0)).unwrap();
        // trainable parameters bit-identical to initialization
        let trained: Vec<Vec<f64>> = {
            let mut m = model.clone();
            let mut out = Vec::new();
            m.visit_trainable_mut(|p| out.push(p.to_vec()));
            out
        };
        let init: Vec<Vec<f64>> = {
            let mut m = fresh.clone();
            let mut out = Vec::new();
            m.visit_trainable_mut(|p| out.push(p.to_vec()));
            out
        };
        assert_eq!(trained, init);
    }

    #[test]
    fn training_is_deterministic() {
        let (ds, w) = fixture();
        let tcfg = TrainConfig {
            epochs: 2,
            episodes_per_epoch: 4,
            seed: 12,
            validation: Some(ValidationProbe {
                every_epochs: 1,
                episodes: 2,
                ways: 2,
                shots: 1,
                queries_per_class: 3,
                step_size: 1.0,
            }),
            ..TrainConfig::default()
        };
        let (m1, log1) = train(&ds, &w, model_cfg(), &episode_cfg(), &tcfg).unwrap();
        let (m2, log2) = train(&ds, &w, model_cfg(), &episode_cfg(), &tcfg).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(log1, log2);
        let lines: Vec<String> = log1.episodes.iter().map(EpisodeLog::to_line).collect();
        assert!(lines[0].starts_with("epoch=0 episode=0 loss="));
    }

    #[test]
    fn no_noise_flag_equals_sigma_zero() {
        let (ds, w) = fixture();
        let mut ecfg = episode_cfg();
        ecfg.noise_sigma = 0.0;
        let tcfg = TrainConfig {
            epochs: 1,
            episodes_per_epoch: 4,
            seed: 3,
            ..TrainConfig::default()
        };
        let (m1, log1) = train(&ds, &w, model_cfg(), &ecfg, &tcfg).unwrap();
        let flagged = TrainConfig {
            ablation: AblationFlags {
                no_noise: true,
                ..AblationFlags::default()
            },
            ..tcfg
        };
        let (m2, log2) = train(&ds, &w, model_cfg(), &ecfg, &flagged).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(log1, log2);
    }

    #[test]
    fn degenerate_ablation_is_parameter_noop() {
        let (ds, w) = fixture();
        let tcfg = TrainConfig {
            epochs: 1,
            episodes_per_epoch: 3,
            weight_decay: 0.0,
            ablation: AblationFlags {
                no_rec_loss: true,
                no_cls_loss: true,
                ..AblationFlags::default()
            },
            seed: 6,
            ..TrainConfig::default()
        };
        let (model, log) = train(&ds, &w, model_cfg(), &episode_cfg(), &tcfg).unwrap();
        for e in &log.episodes {
            assert_eq!(e.loss, 0.0);
        }
        let mut fresh = WdaeModel::init(model_cfg(), &mut rng::substream(6, 0)).unwrap();
        let mut trained = model.clone();
        let mut a = Vec::new();
        let mut b = Vec::new();
        trained.visit_trainable_mut(|p| a.push(p.to_vec()));
        fresh.visit_trainable_mut(|p| b.push(p.to_vec()));
        assert_eq!(a, b);
    }
}
