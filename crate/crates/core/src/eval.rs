//! K-shot test episodes: imprint novel weights, refine them with the
//! trained denoiser, and score queries over novel-only and unified
//! base+novel label spaces, aggregating means with 95% confidence
//! intervals.
//!
//! Episodes are independent pure computations; each one draws from its own
//! substream `substream(seed, episode_index)`, so reports do not depend on
//! execution order and episodes can be evaluated concurrently by a driver.

use alloc::vec::Vec;
use core::fmt;

use crate::classifier::{
    cosine_scores, initial_estimate, topk_accuracy, ClassifierError, ClassifierWeights,
};
use crate::dataset::{holdout_boundary, FeatureDataset, SplitTag};
use crate::graph::{build_graph, GraphError};
use crate::mathx;
use crate::model::{ModelError, WdaeModel};
use crate::rng;
use crate::tensor::{Matrix, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub enum EvalError {
    NoNovelClasses { split: SplitTag },
    WaysTooLarge { ways: usize, available: usize },
    InsufficientExamples { class_id: u32, needed: usize, available: usize },
    EmptyInput,
    InvalidConfig { msg: &'static str },
    Classifier(ClassifierError),
    Graph(GraphError),
    Model(ModelError),
    Tensor(TensorError),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::NoNovelClasses { split } => {
                write!(f, "no classes tagged {} in the dataset", split.as_str())
            }
            EvalError::WaysTooLarge { ways, available } => {
                write!(f, "requested {ways}-way episodes but only {available} classes exist")
            }
            EvalError::InsufficientExamples { class_id, needed, available } => write!(
                f,
                "class {class_id} has {available} examples, episode needs {needed}"
            ),
            EvalError::EmptyInput => write!(f, "metric aggregation needs at least one value"),
            EvalError::InvalidConfig { msg } => write!(f, "invalid eval config: {msg}"),
            EvalError::Classifier(e) => write!(f, "{e}"),
            EvalError::Graph(e) => write!(f, "{e}"),
            EvalError::Model(e) => write!(f, "{e}"),
            EvalError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for EvalError {}

impl From<ClassifierError> for EvalError {
    fn from(e: ClassifierError) -> Self {
        EvalError::Classifier(e)
    }
}

impl From<GraphError> for EvalError {
    fn from(e: GraphError) -> Self {
        EvalError::Graph(e)
    }
}

impl From<ModelError> for EvalError {
    fn from(e: ModelError) -> Self {
        EvalError::Model(e)
    }
}

impl From<TensorError> for EvalError {
    fn from(e: TensorError) -> Self {
        EvalError::Tensor(e)
    }
}

/// Novel classes per episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ways {
    Count(usize),
    /// Every class of the chosen split, in dataset order.
    All,
}

/// Evaluation protocol for one K-shot setting.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Which novel split supplies the episode classes.
    pub split: SplitTag,
    pub ways: Ways,
    pub shots: usize,
    /// Queries per novel class.
    pub queries_per_class: usize,
    pub episodes: usize,
    /// Refinement step size for this K.
    pub step_size: f64,
    pub top_k: Vec<usize>,
    /// Also score a unified base+novel task with held-out base queries.
    pub include_base: bool,
    pub base_queries_per_class: usize,
    /// Trailing fraction of base examples reserved at pretraining time;
    /// base queries are drawn from that tail.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl EvalConfig {
    fn validate(&self) -> Result<(), EvalError> {
        if self.split == SplitTag::Base {
            return Err(EvalError::InvalidConfig {
                msg: "episodes sample novel classes, not the base split",
            });
        }
        if self.shots == 0 || self.queries_per_class == 0 || self.episodes == 0 {
            return Err(EvalError::InvalidConfig {
                msg: "shots, queries_per_class and episodes must be positive",
            });
        }
        if !self.step_size.is_finite() || self.step_size < 0.0 {
            return Err(EvalError::InvalidConfig {
                msg: "step_size must be a finite non-negative value",
            });
        }
        if self.top_k.is_empty() {
            return Err(EvalError::InvalidConfig { msg: "top_k list is empty" });
        }
        Ok(())
    }
}

/// Accuracies of one episode, aligned with `EvalConfig::top_k`. Initial
/// (unrefined) accuracies are recorded alongside for paired comparisons.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeAccuracies {
    pub novel_refined: Vec<f64>,
    pub novel_initial: Vec<f64>,
    pub all_refined: Option<Vec<f64>>,
    pub all_initial: Option<Vec<f64>>,
}

/// Mean and 95% confidence interval of one metric.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricSummary {
    pub mean: f64,
    pub ci95_halfwidth: f64,
    pub episodes: usize,
    /// True when only one episode was aggregated (halfwidth reported 0).
    pub degenerate_ci: bool,
}

/// Aggregated evaluation results.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub top_k: Vec<usize>,
    pub novel_refined: Vec<MetricSummary>,
    pub novel_initial: Vec<MetricSummary>,
    pub all_refined: Option<Vec<MetricSummary>>,
    pub all_initial: Option<Vec<MetricSummary>>,
    pub per_episode: Vec<EpisodeAccuracies>,
    pub ways_used: usize,
    pub shots: usize,
    pub step_size: f64,
    pub episodes: usize,
}

/// Sample mean and `1.96 * s / sqrt(n)` halfwidth with `s` the unbiased
/// sample standard deviation. A single value yields halfwidth 0 (flagged
/// as degenerate by callers).
pub fn aggregate_metrics(values: &[f64]) -> Result<(f64, f64), EvalError> {
    if values.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, 1.96 * mathx::sqrt(var) / mathx::sqrt(n)))
}

fn summarize(values: &[f64]) -> Result<MetricSummary, EvalError> {
    let (mean, hw) = aggregate_metrics(values)?;
    Ok(MetricSummary {
        mean,
        ci95_halfwidth: hw,
        episodes: values.len(),
        degenerate_ci: values.len() == 1,
    })
}

fn ways_count(cfg: &EvalConfig, available: usize) -> Result<usize, EvalError> {
    let ways = match cfg.ways {
        Ways::Count(n) => n,
        Ways::All => available,
    };
    if ways == 0 {
        return Err(EvalError::InvalidConfig { msg: "ways must be positive" });
    }
    if ways > available {
        return Err(EvalError::WaysTooLarge { ways, available });
    }
    Ok(ways)
}

/// Evaluate a single episode, reproducible from `(seed, episode_index)`.
pub fn eval_episode(
    dataset: &FeatureDataset,
    base_weights: &ClassifierWeights,
    model: &WdaeModel,
    cfg: &EvalConfig,
    episode_index: usize,
) -> Result<EpisodeAccuracies, EvalError> {
    cfg.validate()?;
    let novel_pool = dataset.split_indices(cfg.split);
    if novel_pool.is_empty() {
        return Err(EvalError::NoNovelClasses { split: cfg.split });
    }
    let ways = ways_count(cfg, novel_pool.len())?;
    let mut stream = rng::substream(cfg.seed, episode_index as u64);

    let picked: Vec<usize> = match cfg.ways {
        Ways::All => novel_pool.clone(),
        Ways::Count(_) => rng::sample_indices(&mut stream, novel_pool.len(), ways)
            .into_iter()
            .map(|i| novel_pool[i])
            .collect(),
    };

    // K shots + queries per novel class, drawn without replacement.
    let per_class = cfg.shots + cfg.queries_per_class;
    let mut shots: Vec<(u32, Matrix)> = Vec::with_capacity(ways);
    let mut query_rows: Vec<Vec<f64>> = Vec::new();
    let mut query_slots: Vec<usize> = Vec::new();
    for (slot, &ci) in picked.iter().enumerate() {
        let class = dataset.class(ci);
        let rows = class.features.rows();
        if rows < per_class {
            return Err(EvalError::InsufficientExamples {
                class_id: class.class_id,
                needed: per_class,
                available: rows,
            });
        }
        let sel = rng::sample_indices(&mut stream, rows, per_class);
        let shot_feats = class.features.select_rows(&sel[..cfg.shots]);
        shots.push((class.class_id, shot_feats));
        for &qi in &sel[cfg.shots..] {
            query_rows.push(class.features.row(qi).to_vec());
            query_slots.push(slot);
        }
    }
    let queries = Matrix::from_rows(&query_rows)?;

    // Imprint over base + novel, build the graph from the estimates, refine.
    let est = initial_estimate(&shots, base_weights)?;
    let graph = build_graph(
        est.weights(),
        model.config().graph_neighbors,
        model.config().inverse_temperature,
    )?;
    let refined = model.refine(est.weights(), &graph, cfg.step_size)?;
    let n_base = base_weights.num_classes();
    let scale = base_weights.scale();

    // Novel-only task: scores restricted to the novel rows.
    let novel_rows: Vec<usize> = (n_base..n_base + ways).collect();
    let novel_scores_ref = cosine_scores(&queries, &refined.select_rows(&novel_rows), scale)?;
    let novel_scores_init =
        cosine_scores(&queries, &est.weights().select_rows(&novel_rows), scale)?;
    let mut novel_refined = Vec::with_capacity(cfg.top_k.len());
    let mut novel_initial = Vec::with_capacity(cfg.top_k.len());
    for &k in &cfg.top_k {
        novel_refined.push(topk_accuracy(&novel_scores_ref, &query_slots, k)?);
        novel_initial.push(topk_accuracy(&novel_scores_init, &query_slots, k)?);
    }

    // Unified task: add held-out base queries and score over all rows.
    let (all_refined, all_initial) = if cfg.include_base {
        let mut rows = query_rows.clone();
        let mut labels: Vec<usize> = query_slots.iter().map(|&s| n_base + s).collect();
        for label in 0..n_base {
            let ci = dataset
                .find_class(base_weights.class_ids()[label])
                .ok_or(EvalError::InvalidConfig {
                    msg: "base weights reference a class missing from the dataset",
                })?;
            let class = dataset.class(ci);
            let total = class.features.rows();
            let start = holdout_boundary(total, cfg.holdout_fraction);
            let holdout = total - start;
            if holdout == 0 {
                continue;
            }
            let take = cfg.base_queries_per_class.min(holdout);
            let sel = rng::sample_indices(&mut stream, holdout, take);
            for &qi in &sel {
                rows.push(class.features.row(start + qi).to_vec());
                labels.push(label);
            }
        }
        let all_queries = Matrix::from_rows(&rows)?;
        let scores_ref = cosine_scores(&all_queries, &refined, scale)?;
        let scores_init = cosine_scores(&all_queries, est.weights(), scale)?;
        let mut acc_ref = Vec::with_capacity(cfg.top_k.len());
        let mut acc_init = Vec::with_capacity(cfg.top_k.len());
        for &k in &cfg.top_k {
            acc_ref.push(topk_accuracy(&scores_ref, &labels, k)?);
            acc_init.push(topk_accuracy(&scores_init, &labels, k)?);
        }
        (Some(acc_ref), Some(acc_init))
    } else {
        (None, None)
    };

    Ok(EpisodeAccuracies {
        novel_refined,
        novel_initial,
        all_refined,
        all_initial,
    })
}

/// Run the full evaluation sequentially and aggregate. Drivers that
/// parallelize call [`eval_episode`] per index and [`aggregate_episodes`]
/// on the collected results; both paths produce identical reports.
pub fn run_eval(
    dataset: &FeatureDataset,
    base_weights: &ClassifierWeights,
    model: &WdaeModel,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    let mut per_episode = Vec::with_capacity(cfg.episodes);
    for e in 0..cfg.episodes {
        per_episode.push(eval_episode(dataset, base_weights, model, cfg, e)?);
    }
    aggregate_episodes(dataset, cfg, per_episode)
}

/// Aggregate per-episode accuracies (in episode order) into a report.
pub fn aggregate_episodes(
    dataset: &FeatureDataset,
    cfg: &EvalConfig,
    per_episode: Vec<EpisodeAccuracies>,
) -> Result<EvalReport, EvalError> {
    if per_episode.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let ways_used = ways_count(cfg, dataset.split_indices(cfg.split).len())?;
    let column =
        |get: &dyn Fn(&EpisodeAccuracies) -> Option<&Vec<f64>>, ki: usize| -> Option<Vec<f64>> {
            per_episode
                .iter()
                .map(|e| get(e).map(|v| v[ki]))
                .collect::<Option<Vec<f64>>>()
        };
    let mut novel_refined = Vec::new();
    let mut novel_initial = Vec::new();
    let mut all_refined = Vec::new();
    let mut all_initial = Vec::new();
    for ki in 0..cfg.top_k.len() {
        novel_refined.push(summarize(
            &column(&|e| Some(&e.novel_refined), ki).expect("always present"),
        )?);
        novel_initial.push(summarize(
            &column(&|e| Some(&e.novel_initial), ki).expect("always present"),
        )?);
        if let Some(vals) = column(&|e| e.all_refined.as_ref(), ki) {
            all_refined.push(summarize(&vals)?);
        }
        if let Some(vals) = column(&|e| e.all_initial.as_ref(), ki) {
            all_initial.push(summarize(&vals)?);
        }
    }
    Ok(EvalReport {
        top_k: cfg.top_k.clone(),
        novel_refined,
        novel_initial,
        all_refined: (!all_refined.is_empty()).then_some(all_refined),
        all_initial: (!all_initial.is_empty()).then_some(all_initial),
        per_episode,
        ways_used,
        shots: cfg.shots,
        step_size: cfg.step_size,
        episodes: cfg.episodes,
    })
}

/// Paired per-episode difference `refined - initial` of the novel metric
/// at `top_k[k_index]`: returns `(mean gap, 95% CI halfwidth)`.
pub fn paired_novel_gap(report: &EvalReport, k_index: usize) -> Result<(f64, f64), EvalError> {
    let diffs: Vec<f64> = report
        .per_episode
        .iter()
        .map(|e| e.novel_refined[k_index] - e.novel_initial[k_index])
        .collect();
    aggregate_metrics(&diffs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{pretrain_base, PretrainConfig};
    use crate::dataset::{generate_synthetic, SyntheticConfig};
    use crate::model::{ModelConfig, Variant, WdaeModel};
    use crate::rng::stream_from_seed;
    use alloc::vec;

    fn fixture() -> (FeatureDataset, ClassifierWeights, WdaeModel) {
        let ds = generate_synthetic(&SyntheticConfig {
            num_base: 6,
            num_novel_val: 2,
            num_novel_test: 4,
            dim: 16,
            examples_per_class: 20,
            cluster_spread: 0.1,
            seed: 5,
        })
        .unwrap();
        let (w, _) = pretrain_base(
            &ds,
            &PretrainConfig {
                epochs: 5,
                seed: 1,
                ..PretrainConfig::default()
            },
        )
        .unwrap();
        let model = WdaeModel::init(
            ModelConfig {
                variant: Variant::Gnn,
                dim: 16,
                hidden_width: 8,
                dropout_p: 0.1,
                leaky_slope: 0.2,
                graph_neighbors: 3,
                inverse_temperature: 5.0,
            },
            &mut stream_from_seed(2),
        )
        .unwrap();
        (ds, w, model)
    }

    fn config() -> EvalConfig {
        EvalConfig {
            split: SplitTag::NovelTest,
            ways: Ways::Count(3),
            shots: 1,
            queries_per_class: 5,
            episodes: 4,
            step_size: 1.0,
            top_k: vec![1],
            include_base: true,
            base_queries_per_class: 2,
            holdout_fraction: 0.2,
            seed: 77,
        }
    }

    #[test]
    fn aggregate_metrics_cases() {
        let (m, hw) = aggregate_metrics(&[0.5, 0.5, 0.5]).unwrap();
        assert_eq!(m, 0.5);
        assert_eq!(hw, 0.0);

        let (m, hw) = aggregate_metrics(&[0.0, 1.0]).unwrap();
        assert_eq!(m, 0.5);
        // s = 0.7071..., hw = 1.96 * s / sqrt(2) ~ 0.980
        assert!((hw - 0.980).abs() < 1e-3);

        // permutation invariant
        let (m2, hw2) = aggregate_metrics(&[1.0, 0.0]).unwrap();
        assert_eq!((m, hw), (m2, hw2));

        assert!(matches!(aggregate_metrics(&[]), Err(EvalError::EmptyInput)));
        let (m, hw) = aggregate_metrics(&[0.25]).unwrap();
        assert_eq!((m, hw), (0.25, 0.0));
    }

    #[test]
    fn episodes_are_reproducible_out_of_order() {
        let (ds, w, model) = fixture();
        let cfg = config();
        let e2 = eval_episode(&ds, &w, &model, &cfg, 2).unwrap();
        let _e0 = eval_episode(&ds, &w, &model, &cfg, 0).unwrap();
        let e2_again = eval_episode(&ds, &w, &model, &cfg, 2).unwrap();
        assert_eq!(e2, e2_again, "episode 2 must not depend on what ran before it");
    }

    #[test]
    fn run_eval_matches_per_episode_assembly() {
        let (ds, w, model) = fixture();
        let cfg = config();
        let report = run_eval(&ds, &w, &model, &cfg).unwrap();
        let collected: Vec<EpisodeAccuracies> = (0..cfg.episodes)
            .map(|e| eval_episode(&ds, &w, &model, &cfg, e).unwrap())
            .collect();
        let assembled = aggregate_episodes(&ds, &cfg, collected).unwrap();
        assert_eq!(report.per_episode, assembled.per_episode);
        assert_eq!(report.novel_refined[0], assembled.novel_refined[0]);
        assert_eq!(
            report.all_refined.unwrap()[0],
            assembled.all_refined.unwrap()[0]
        );
    }

    #[test]
    fn zero_step_size_reduces_to_initial_estimates() {
        let (ds, w, model) = fixture();
        let mut cfg = config();
        cfg.step_size = 0.0;
        let report = run_eval(&ds, &w, &model, &cfg).unwrap();
        for ep in &report.per_episode {
            assert_eq!(ep.novel_refined, ep.novel_initial);
            assert_eq!(ep.all_refined, ep.all_initial);
        }
    }

    #[test]
    fn degenerate_separable_task_is_perfect() {
        let (ds, w, model) = fixture();
        let mut cfg = config();
        // 1 way: every query belongs to the only class
        cfg.ways = Ways::Count(1);
        cfg.include_base = false;
        cfg.episodes = 2;
        let report = run_eval(&ds, &w, &model, &cfg).unwrap();
        assert_eq!(report.novel_refined[0].mean, 1.0);
        assert_eq!(report.novel_initial[0].mean, 1.0);
    }

    #[test]
    fn errors_on_overdrawn_episodes() {
        let (ds, w, model) = fixture();
        let mut cfg = config();
        cfg.queries_per_class = 100;
        assert!(matches!(
            run_eval(&ds, &w, &model, &cfg),
            Err(EvalError::InsufficientExamples { .. })
        ));
        let mut cfg = config();
        cfg.ways = Ways::Count(10);
        assert!(matches!(
            run_eval(&ds, &w, &model, &cfg),
            Err(EvalError::WaysTooLarge { ways: 10, available: 4 })
        ));
    }

    #[test]
    fn paired_gap_is_zero_for_identical_columns() {
        let (ds, w, model) = fixture();
        let mut cfg = config();
        cfg.step_size = 0.0;
        let report = run_eval(&ds, &w, &model, &cfg).unwrap();
        let (gap, hw) = paired_novel_gap(&report, 0).unwrap();
        assert_eq!(gap, 0.0);
        assert_eq!(hw, 0.0);
    }
}
