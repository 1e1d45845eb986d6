//! Central finite-difference verification of every differentiable op and
//! of the full episodic loss. This is the engine behind the `gradcheck`
//! command; the test suites carry their own independent FD oracles.
//!
//! The error metric is `|analytic - numeric| / max(1, |analytic|,
//! |numeric|)`, i.e. relative where gradients are large and absolute near
//! zero, evaluated with step 1e-5 in double precision.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::classifier::{pretrain_base, PretrainConfig};
use crate::dataset::{generate_synthetic, SyntheticConfig};
use crate::graph::build_graph;
use crate::model::{ModelConfig, Variant, WdaeModel};
use crate::rng::{self, Stream};
use crate::tensor::{Axis, BnRunning, Matrix, Phase, Record, Tensor, TensorError};
use crate::trainer::{make_noisy_input, sample_episode, AblationFlags, EpisodeConfig, TrainConfig};

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Default acceptance tolerance on the scaled error.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Result of one gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct FdCheck {
    pub name: String,
    pub max_error: f64,
    pub evaluations: usize,
}

impl FdCheck {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_error.is_finite() && self.max_error < tolerance
    }
}

fn scaled_error(analytic: f64, numeric: f64) -> f64 {
    let denom = 1.0f64.max(analytic.abs()).max(numeric.abs());
    (analytic - numeric).abs() / denom
}

fn random_matrix(shape: [usize; 2], rng: &mut Stream) -> Matrix {
    let mut m = Matrix::zeros(shape[0], shape[1]);
    for v in m.data_mut() {
        *v = rng::normal(rng, 1.0);
    }
    m
}

type BuildFn<'a> = dyn Fn(&mut Record, &[Tensor]) -> Result<Tensor, TensorError> + 'a;

/// Check one op over one set of input shapes: probe d(sum(C .* op(x)))/dx
/// for every input element against central differences.
fn probe_case(
    build: &BuildFn<'_>,
    input_shapes: &[[usize; 2]],
    step: f64,
    rng: &mut Stream,
) -> (f64, usize) {
    let inputs: Vec<Matrix> = input_shapes.iter().map(|&s| random_matrix(s, rng)).collect();

    // Output shape and probe coefficients.
    let out_shape = {
        let mut rec = Record::inference();
        let ts: Vec<Tensor> = inputs.iter().map(|m| rec.constant(m.clone())).collect();
        build(&mut rec, &ts).expect("fdcheck op must accept its declared shapes").shape()
    };
    let coeffs = random_matrix(out_shape, rng);

    let value = |mats: &[Matrix]| -> f64 {
        let mut rec = Record::inference();
        let ts: Vec<Tensor> = mats.iter().map(|m| rec.constant(m.clone())).collect();
        let y = build(&mut rec, &ts).expect("fdcheck op re-evaluation");
        let c = rec.constant(coeffs.clone());
        let prod = rec.mul(&y, &c).expect("probe product");
        rec.sum(&prod).item()
    };

    // Analytic gradients of the probe scalar.
    let grads: Vec<Matrix> = {
        let mut rec = Record::new();
        let ts: Vec<Tensor> = inputs.iter().map(|m| rec.leaf(m.clone(), true)).collect();
        let y = build(&mut rec, &ts).expect("fdcheck op analytic pass");
        let c = rec.constant(coeffs.clone());
        let prod = rec.mul(&y, &c).expect("probe product");
        let s = rec.sum(&prod);
        rec.backward(&s).expect("probe backward");
        ts.iter()
            .zip(&inputs)
            .map(|(t, m)| t.grad().unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols())))
            .collect()
    };

    let mut max_err = 0.0f64;
    let mut evals = 0usize;
    for (i, grad) in grads.iter().enumerate() {
        for j in 0..inputs[i].data().len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += step;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= step;
            let numeric = (value(&plus) - value(&minus)) / (2.0 * step);
            evals += 2;
            max_err = max_err.max(scaled_error(grad.data()[j], numeric));
        }
    }
    (max_err, evals)
}

fn check_op(
    name: &str,
    shape_sets: &[Vec<[usize; 2]>],
    build: &BuildFn<'_>,
    step: f64,
    rng: &mut Stream,
) -> FdCheck {
    let mut max_error = 0.0f64;
    let mut evaluations = 0usize;
    for shapes in shape_sets {
        let (e, n) = probe_case(build, shapes, step, rng);
        max_error = max_error.max(e);
        evaluations += n;
    }
    FdCheck {
        name: String::from(name),
        max_error,
        evaluations,
    }
}

fn unary_shapes() -> Vec<Vec<[usize; 2]>> {
    alloc::vec![
        alloc::vec![[1, 4]],
        alloc::vec![[3, 5]],
        alloc::vec![[6, 2]],
    ]
}

fn binary_shapes() -> Vec<Vec<[usize; 2]>> {
    alloc::vec![
        alloc::vec![[1, 4], [1, 4]],
        alloc::vec![[3, 5], [3, 5]],
        alloc::vec![[6, 2], [6, 2]],
    ]
}

/// Run the finite-difference suite over every differentiable op, plus the
/// full episodic loss for both model variants. `filter` restricts checks
/// to names containing the given substring.
pub fn run_checks(seed: u64, step: f64, filter: Option<&str>) -> Vec<FdCheck> {
    let mut rng = rng::stream_from_seed(seed);
    let mut out: Vec<FdCheck> = Vec::new();
    let mut push = |check: FdCheck| out.push(check);

    let wants = |name: &str| filter.is_none_or(|f| name.contains(f));

    macro_rules! op {
        ($name:expr, $shapes:expr, $build:expr) => {
            if wants($name) {
                push(check_op($name, &$shapes, &$build, step, &mut rng));
            }
        };
    }

    op!(
        "matmul",
        alloc::vec![
            alloc::vec![[2, 3], [3, 4]],
            alloc::vec![[1, 5], [5, 2]],
            alloc::vec![[4, 2], [2, 4]],
        ],
        |rec: &mut Record, ts: &[Tensor]| rec.matmul(&ts[0], &ts[1])
    );
    op!(
        "matmul_nt",
        alloc::vec![
            alloc::vec![[2, 3], [4, 3]],
            alloc::vec![[1, 5], [2, 5]],
            alloc::vec![[4, 2], [4, 2]],
        ],
        |rec: &mut Record, ts: &[Tensor]| rec.matmul_nt(&ts[0], &ts[1])
    );
    op!("add", binary_shapes(), |rec: &mut Record, ts: &[Tensor]| {
        rec.add(&ts[0], &ts[1])
    });
    op!("sub", binary_shapes(), |rec: &mut Record, ts: &[Tensor]| {
        rec.sub(&ts[0], &ts[1])
    });
    op!("mul", binary_shapes(), |rec: &mut Record, ts: &[Tensor]| {
        rec.mul(&ts[0], &ts[1])
    });
    op!("scale", unary_shapes(), |rec: &mut Record, ts: &[Tensor]| {
        Ok(rec.scale(&ts[0], -1.7))
    });
    op!(
        "add_bias",
        alloc::vec![
            alloc::vec![[2, 3], [1, 3]],
            alloc::vec![[5, 2], [1, 2]],
            alloc::vec![[1, 6], [1, 6]],
        ],
        |rec: &mut Record, ts: &[Tensor]| rec.add_bias(&ts[0], &ts[1])
    );
    op!(
        "concat_cols",
        alloc::vec![
            alloc::vec![[2, 3], [2, 2]],
            alloc::vec![[4, 1], [4, 5]],
            alloc::vec![[3, 3], [3, 3]],
        ],
        |rec: &mut Record, ts: &[Tensor]| rec.concat_cols(&ts[0], &ts[1])
    );
    op!(
        "slice_cols",
        alloc::vec![
            alloc::vec![[2, 6]],
            alloc::vec![[4, 5]],
            alloc::vec![[3, 8]],
        ],
        |rec: &mut Record, ts: &[Tensor]| {
            let c = ts[0].cols();
            rec.slice_cols(&ts[0], 1..c - 1)
        }
    );
    op!(
        "gather_rows",
        alloc::vec![
            alloc::vec![[3, 4]],
            alloc::vec![[5, 2]],
            alloc::vec![[4, 3]],
        ],
        |rec: &mut Record, ts: &[Tensor]| {
            let n = ts[0].rows();
            let idx: Vec<usize> = (0..n + 2).map(|i| i % n).collect();
            rec.gather_rows(&ts[0], &idx)
        }
    );
    op!(
        "weighted_segment_sum",
        alloc::vec![
            alloc::vec![[6, 3]],
            alloc::vec![[4, 5]],
            alloc::vec![[8, 2]],
        ],
        |rec: &mut Record, ts: &[Tensor]| {
            let e = ts[0].rows();
            let weights: Vec<f64> = (0..e).map(|i| 0.3 + 0.1 * i as f64).collect();
            let half = e / 2;
            rec.weighted_segment_sum(&ts[0], &weights, &[0..half, half..e])
        }
    );
    op!(
        "leaky_relu",
        unary_shapes(),
        |rec: &mut Record, ts: &[Tensor]| Ok(rec.leaky_relu(&ts[0], 0.2))
    );
    op!("sigmoid", unary_shapes(), |rec: &mut Record, ts: &[Tensor]| {
        Ok(rec.sigmoid(&ts[0]))
    });
    op!(
        "softmax_scaled_rows",
        unary_shapes(),
        |rec: &mut Record, ts: &[Tensor]| Ok(rec.softmax_scaled(&ts[0], 5.0, Axis::Rows))
    );
    op!(
        "softmax_scaled_cols",
        unary_shapes(),
        |rec: &mut Record, ts: &[Tensor]| Ok(rec.softmax_scaled(&ts[0], 5.0, Axis::Cols))
    );
    op!(
        "l2_normalize_rows",
        unary_shapes(),
        |rec: &mut Record, ts: &[Tensor]| Ok(rec.l2_normalize(&ts[0], Axis::Rows))
    );
    op!(
        "l2_normalize_cols",
        unary_shapes(),
        |rec: &mut Record, ts: &[Tensor]| Ok(rec.l2_normalize(&ts[0], Axis::Cols))
    );
    op!(
        "batch_norm_train",
        alloc::vec![
            alloc::vec![[4, 3], [1, 3], [1, 3]],
            alloc::vec![[6, 2], [1, 2], [1, 2]],
            alloc::vec![[3, 5], [1, 5], [1, 5]],
        ],
        |rec: &mut Record, ts: &[Tensor]| {
            let mut running = BnRunning::identity(ts[0].cols());
            rec.batch_norm(&ts[0], &ts[1], &ts[2], &mut running, Phase::Train)
        }
    );
    op!(
        "batch_norm_eval",
        alloc::vec![
            alloc::vec![[4, 3], [1, 3], [1, 3]],
            alloc::vec![[1, 2], [1, 2], [1, 2]],
            alloc::vec![[3, 5], [1, 5], [1, 5]],
        ],
        |rec: &mut Record, ts: &[Tensor]| {
            let c = ts[0].cols();
            let mut running = BnRunning {
                mean: (0..c).map(|i| 0.1 * i as f64).collect(),
                var: (0..c).map(|i| 0.5 + 0.2 * i as f64).collect(),
            };
            rec.batch_norm(&ts[0], &ts[1], &ts[2], &mut running, Phase::Eval)
        }
    );
    op!(
        "dropout",
        unary_shapes(),
        |rec: &mut Record, ts: &[Tensor]| {
            // Fixed mask stream so every FD evaluation sees the same mask.
            let mut mask_rng = rng::stream_from_seed(1234);
            rec.dropout(&ts[0], 0.4, Phase::Train, &mut mask_rng)
        }
    );
    op!(
        "dropout_shared_rows",
        unary_shapes(),
        |rec: &mut Record, ts: &[Tensor]| {
            let mut mask_rng = rng::stream_from_seed(4321);
            rec.dropout_shared_rows(&ts[0], 0.4, Phase::Train, &mut mask_rng)
        }
    );
    op!(
        "cross_entropy_from_scores",
        alloc::vec![
            alloc::vec![[2, 4]],
            alloc::vec![[5, 3]],
            alloc::vec![[1, 6]],
        ],
        |rec: &mut Record, ts: &[Tensor]| {
            let [m, n] = ts[0].shape();
            let labels: Vec<usize> = (0..m).map(|i| (i * 2 + 1) % n).collect();
            rec.cross_entropy_from_scores(&ts[0], &labels)
        }
    );
    op!("sum", unary_shapes(), |rec: &mut Record, ts: &[Tensor]| {
        Ok(rec.sum(&ts[0]))
    });
    op!(
        "score",
        alloc::vec![
            alloc::vec![[3, 4], [2, 4]],
            alloc::vec![[2, 6], [5, 6]],
            alloc::vec![[4, 3], [3, 3]],
        ],
        |rec: &mut Record, ts: &[Tensor]| crate::classifier::score(rec, &ts[0], &ts[1], 10.0)
    );

    if wants("episode_loss_gnn") {
        push(episode_loss_check(Variant::Gnn, seed, step));
    }
    if wants("episode_loss_mlp") {
        push(episode_loss_check(Variant::Mlp, seed, step));
    }
    out
}

/// Gradient check of the full episodic loss (reconstruction + validation
/// cross entropy through the denoiser, batch norm, dropout and the graph)
/// on a 6-node, d=8 instance: every trainable parameter is probed.
fn episode_loss_check(variant: Variant, seed: u64, step: f64) -> FdCheck {
    let d = 8;
    let dataset = generate_synthetic(&SyntheticConfig {
        num_base: 6,
        num_novel_val: 1,
        num_novel_test: 1,
        dim: d,
        examples_per_class: 12,
        cluster_spread: 0.2,
        seed,
    })
    .expect("fdcheck dataset");
    let (weights, _) = pretrain_base(
        &dataset,
        &PretrainConfig {
            epochs: 3,
            seed,
            ..PretrainConfig::default()
        },
    )
    .expect("fdcheck pretraining");

    let episode_config = EpisodeConfig {
        num_fake_novel: 2,
        shots: 1,
        num_validation: 5,
        noise_sigma: 0.1,
        stratified: true,
        holdout_fraction: 0.2,
    };
    let train_config = TrainConfig {
        score_scale: 10.0,
        ..TrainConfig::default()
    };
    let model_config = ModelConfig {
        variant,
        dim: d,
        hidden_width: 6,
        dropout_p: 0.3,
        leaky_slope: 0.2,
        graph_neighbors: 3,
        inverse_temperature: 5.0,
    };

    let mut sample_rng = rng::substream(seed, 7);
    let episode = sample_episode(&dataset, &weights, &episode_config, &mut sample_rng)
        .expect("fdcheck episode");
    let input = make_noisy_input(
        &episode,
        episode_config.noise_sigma,
        AblationFlags::default(),
        &mut sample_rng,
    )
    .expect("fdcheck noisy input");
    let graph = build_graph(
        &input.basis,
        model_config.graph_neighbors,
        model_config.inverse_temperature,
    )
    .expect("fdcheck graph");

    let model = WdaeModel::init(model_config, &mut rng::substream(seed, 8)).expect("fdcheck model");
    let mask_seed = seed ^ 0xD1F2_3EA5;

    // Deterministic loss of a model clone: fresh dropout stream per call,
    // running-stat updates discarded with the clone.
    let loss_of = |m: &WdaeModel| -> f64 {
        let mut scratch = m.clone();
        let mut rec = Record::new();
        let mut mask_rng = rng::stream_from_seed(mask_seed);
        let out = crate::trainer::episode_loss(
            &mut rec,
            &mut scratch,
            &episode,
            &input.noisy,
            &graph,
            &train_config,
            &mut mask_rng,
        )
        .expect("fdcheck loss");
        out.loss.item()
    };

    // Analytic gradients for every trainable buffer.
    let analytic: Vec<Vec<f64>> = {
        let mut scratch = model.clone();
        let mut rec = Record::new();
        let mut mask_rng = rng::stream_from_seed(mask_seed);
        let out = crate::trainer::episode_loss(
            &mut rec,
            &mut scratch,
            &episode,
            &input.noisy,
            &graph,
            &train_config,
            &mut mask_rng,
        )
        .expect("fdcheck analytic loss");
        rec.backward(&out.loss).expect("fdcheck backward");
        out.lifted.grads()
    };

    let mut max_error = 0.0f64;
    let mut evaluations = 0usize;
    let n_buffers = analytic.len();
    for b in 0..n_buffers {
        for j in 0..analytic[b].len() {
            let mut plus = model.clone();
            perturb(&mut plus, b, j, step);
            let mut minus = model.clone();
            perturb(&mut minus, b, j, -step);
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * step);
            evaluations += 2;
            max_error = max_error.max(scaled_error(analytic[b][j], numeric));
        }
    }
    FdCheck {
        name: format!("episode_loss_{}", variant.as_str()),
        max_error,
        evaluations,
    }
}

fn perturb(model: &mut WdaeModel, buffer: usize, element: usize, delta: f64) {
    let mut idx = 0usize;
    model.visit_trainable_mut(|buf| {
        if idx == buffer {
            buf[element] += delta;
        }
        idx += 1;
    });
}

/// Convenience: run everything with defaults and report pass/fail lines.
pub fn run_all(seed: u64) -> Vec<FdCheck> {
    run_checks(seed, DEFAULT_STEP, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaled_error_behaves() {
        assert_eq!(scaled_error(1.0, 1.0), 0.0);
        assert!(scaled_error(0.0, 1e-6) < 1e-5);
        assert!(scaled_error(100.0, 101.0) < 0.011);
    }

    #[test]
    fn elementwise_ops_pass_quickly() {
        let checks = run_checks(5, DEFAULT_STEP, Some("mul"));
        assert!(!checks.is_empty());
        for c in &checks {
            assert!(c.passed(DEFAULT_TOLERANCE), "{}: {}", c.name, c.max_error);
        }
    }

    #[test]
    fn filter_restricts_names() {
        let checks = run_checks(5, DEFAULT_STEP, Some("softmax"));
        assert_eq!(checks.len(), 2);
        assert!(checks.iter().all(|c| c.name.contains("softmax")));
    }
}
