//! The classification-weight denoiser `r(w)`: a two-layer graph network
//! (relation messages + gated residual output) or its MLP variant, plus the
//! refinement rule that moves weights along `r(w) - w`.
//!
//! Layer 1 (hidden): per-edge messages `q(h_i, h_j)` through a shared
//! linear map, aggregated with the graph's edge strengths, then the update
//! `h <- [h ; u([h ; h_agg])]` whose output is L2-normalized. Layer 2
//! (final): the same aggregation feeding one linear map that emits the
//! residual direction (L2-normalized) and the sigmoid gate; the output is
//! `w + o (*) dw` per node. The MLP variant drops all aggregation and feeds
//! each node through the update path alone.

use alloc::vec::Vec;
use core::fmt;

use crate::graph::ClassGraph;
use crate::rng::{self, Stream};
use crate::tensor::{Axis, BnRunning, Matrix, Phase, Record, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    InvalidConfig { msg: &'static str },
    NodeCountMismatch { weights: usize, graph: usize },
    DimMismatch { expected: usize, actual: usize },
    StateMismatch { index: usize, expected: usize, actual: usize },
    Tensor(TensorError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::InvalidConfig { msg } => write!(f, "invalid model config: {msg}"),
            ModelError::NodeCountMismatch { weights, graph } => write!(
                f,
                "weight matrix has {weights} rows but the graph has {graph} nodes"
            ),
            ModelError::DimMismatch { expected, actual } => {
                write!(f, "expected width {expected}, got {actual}")
            }
            ModelError::StateMismatch { index, expected, actual } => write!(
                f,
                "state tensor {index} has {actual} values, expected {expected}"
            ),
            ModelError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

/// Denoiser architecture: graph-aware or per-node MLP.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Gnn,
    Mlp,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Gnn => "gnn",
            Variant::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gnn" => Some(Variant::Gnn),
            "mlp" => Some(Variant::Mlp),
            _ => None,
        }
    }
}

/// Fully connected layer parameters; `weight` is `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LinearParams {
    fn init(in_dim: usize, out_dim: usize, rng: &mut Stream) -> Self {
        // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero bias.
        let bound = 1.0 / crate::mathx::sqrt(in_dim as f64);
        let mut weight = Matrix::zeros(in_dim, out_dim);
        for v in weight.data_mut() {
            *v = rng::uniform_symmetric(rng, bound);
        }
        LinearParams {
            weight,
            bias: alloc::vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Batch-normalization parameters plus running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub running: BnRunning,
}

impl BatchNormParams {
    fn init(channels: usize) -> Self {
        BatchNormParams {
            scale: alloc::vec![1.0; channels],
            shift: alloc::vec![0.0; channels],
            running: BnRunning::identity(channels),
        }
    }
}

/// Parameters of one layer. The message path (`q`) is present on both GNN
/// layers and absent in the MLP variant; the update norm exists on hidden
/// layers only (the final update is a bare linear map).
#[derive(Clone, Debug, PartialEq)]
pub struct GnnLayerParams {
    pub message: Option<LinearParams>,
    pub message_norm: Option<BatchNormParams>,
    pub update: LinearParams,
    pub update_norm: Option<BatchNormParams>,
}

/// Model dimensions and unit hyperparameters, fixed at init.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Weight-vector dimensionality `d`.
    pub dim: usize,
    /// Channels of `q` outputs and of the hidden update output.
    pub hidden_width: usize,
    pub dropout_p: f64,
    pub leaky_slope: f64,
    /// Neighbors per node when building class graphs for this model.
    pub graph_neighbors: usize,
    /// Inverse temperature of the edge-strength softmax.
    pub inverse_temperature: f64,
}

impl ModelConfig {
    fn validate(&self) -> Result<(), ModelError> {
        if self.dim == 0 || self.hidden_width == 0 {
            return Err(ModelError::InvalidConfig {
                msg: "dim and hidden_width must be positive",
            });
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(ModelError::InvalidConfig {
                msg: "dropout_p must lie in [0, 1)",
            });
        }
        if !(0.0..=1.0).contains(&self.leaky_slope) {
            return Err(ModelError::InvalidConfig {
                msg: "leaky_slope must lie in [0, 1]",
            });
        }
        if self.graph_neighbors == 0 {
            return Err(ModelError::InvalidConfig {
                msg: "graph_neighbors must be positive",
            });
        }
        if !(self.inverse_temperature > 0.0) {
            return Err(ModelError::InvalidConfig {
                msg: "inverse_temperature must be positive",
            });
        }
        Ok(())
    }
}

/// The weight denoiser: two layers of parameters plus configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct WdaeModel {
    config: ModelConfig,
    layers: [GnnLayerParams; 2],
}

/// Input widths per layer: the hidden update concatenates its input with
/// the layer's message/aggregate output, so widths grow by `hidden_width`.
fn layer_widths(config: &ModelConfig) -> ([usize; 2], [usize; 2]) {
    let d = config.dim;
    let h = config.hidden_width;
    let node_in = [d, d + h];
    let update_in = match config.variant {
        Variant::Gnn => [d + h, (d + h) + h],
        Variant::Mlp => [d, d + h],
    };
    (node_in, update_in)
}

impl WdaeModel {
    /// Fresh model with uniform `1/sqrt(fan_in)` linear weights, zero
    /// biases, and identity batch-norm parameters.
    pub fn init(config: ModelConfig, rng: &mut Stream) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.dim;
        let h = config.hidden_width;
        let (node_in, update_in) = layer_widths(&config);
        let make_layer = |l: usize, rng: &mut Stream| -> GnnLayerParams {
            let (message, message_norm) = match config.variant {
                Variant::Gnn => (
                    Some(LinearParams::init(node_in[l], h, rng)),
                    Some(BatchNormParams::init(h)),
                ),
                Variant::Mlp => (None, None),
            };
            let update_out = if l == 0 { h } else { 2 * d };
            GnnLayerParams {
                message,
                message_norm,
                update: LinearParams::init(update_in[l], update_out, rng),
                update_norm: if l == 0 {
                    Some(BatchNormParams::init(h))
                } else {
                    None
                },
            }
        };
        let layers = [make_layer(0, rng), make_layer(1, rng)];
        Ok(WdaeModel { config, layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[GnnLayerParams; 2] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [GnnLayerParams; 2] {
        &mut self.layers
    }

    /// Total trainable parameter count.
    pub fn num_parameters(&self) -> usize {
        self.trainable_sizes().iter().sum()
    }

    /// Sizes of the trainable buffers, in declaration order.
    pub fn trainable_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::new();
        for layer in &self.layers {
            if let Some(m) = &layer.message {
                sizes.push(m.weight.data().len());
                sizes.push(m.bias.len());
            }
            if let Some(bn) = &layer.message_norm {
                sizes.push(bn.scale.len());
                sizes.push(bn.shift.len());
            }
            sizes.push(layer.update.weight.data().len());
            sizes.push(layer.update.bias.len());
            if let Some(bn) = &layer.update_norm {
                sizes.push(bn.scale.len());
                sizes.push(bn.shift.len());
            }
        }
        sizes
    }

    /// Visit every trainable buffer mutably, in declaration order.
    pub fn visit_trainable_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        for layer in &mut self.layers {
            if let Some(m) = &mut layer.message {
                f(m.weight.data_mut());
                f(&mut m.bias);
            }
            if let Some(bn) = &mut layer.message_norm {
                f(&mut bn.scale);
                f(&mut bn.shift);
            }
            f(layer.update.weight.data_mut());
            f(&mut layer.update.bias);
            if let Some(bn) = &mut layer.update_norm {
                f(&mut bn.scale);
                f(&mut bn.shift);
            }
        }
    }

    /// Dims of every state tensor (trainable parameters followed by batch
    /// norm running statistics, per unit, in declaration order). This is
    /// the checkpoint layout.
    pub fn state_layout(&self) -> Vec<Vec<usize>> {
        let mut dims = Vec::new();
        self.visit_state(|d, _| dims.push(d));
        dims
    }

    /// Values of every state tensor in checkpoint order.
    pub fn state_values(&self) -> Vec<Vec<f64>> {
        let mut values = Vec::new();
        self.visit_state(|_, v| values.push(v.to_vec()));
        values
    }

    fn visit_state(&self, mut f: impl FnMut(Vec<usize>, &[f64])) {
        for layer in &self.layers {
            if let Some(m) = &layer.message {
                f(alloc::vec![m.weight.rows(), m.weight.cols()], m.weight.data());
                f(alloc::vec![m.bias.len()], &m.bias);
            }
            if let Some(bn) = &layer.message_norm {
                f(alloc::vec![bn.scale.len()], &bn.scale);
                f(alloc::vec![bn.shift.len()], &bn.shift);
                f(alloc::vec![bn.running.mean.len()], &bn.running.mean);
                f(alloc::vec![bn.running.var.len()], &bn.running.var);
            }
            f(
                alloc::vec![layer.update.weight.rows(), layer.update.weight.cols()],
                layer.update.weight.data(),
            );
            f(alloc::vec![layer.update.bias.len()], &layer.update.bias);
            if let Some(bn) = &layer.update_norm {
                f(alloc::vec![bn.scale.len()], &bn.scale);
                f(alloc::vec![bn.shift.len()], &bn.shift);
                f(alloc::vec![bn.running.mean.len()], &bn.running.mean);
                f(alloc::vec![bn.running.var.len()], &bn.running.var);
            }
        }
    }

    /// Overwrite all state tensors from checkpoint order.
    pub fn load_state_values(&mut self, values: &[Vec<f64>]) -> Result<(), ModelError> {
        let layout = self.state_layout();
        if values.len() != layout.len() {
            return Err(ModelError::StateMismatch {
                index: values.len().min(layout.len()),
                expected: layout.len(),
                actual: values.len(),
            });
        }
        for (i, (dims, v)) in layout.iter().zip(values).enumerate() {
            let expected: usize = dims.iter().product();
            if v.len() != expected {
                return Err(ModelError::StateMismatch {
                    index: i,
                    expected,
                    actual: v.len(),
                });
            }
        }
        let mut it = values.iter();
        let mut next = |buf: &mut [f64]| {
            buf.copy_from_slice(it.next().expect("layout length checked"));
        };
        for layer in &mut self.layers {
            if let Some(m) = &mut layer.message {
                next(m.weight.data_mut());
                next(&mut m.bias);
            }
            if let Some(bn) = &mut layer.message_norm {
                next(&mut bn.scale);
                next(&mut bn.shift);
                next(&mut bn.running.mean);
                next(&mut bn.running.var);
            }
            next(layer.update.weight.data_mut());
            next(&mut layer.update.bias);
            if let Some(bn) = &mut layer.update_norm {
                next(&mut bn.scale);
                next(&mut bn.shift);
                next(&mut bn.running.mean);
                next(&mut bn.running.var);
            }
        }
        Ok(())
    }

    /// Training-mode forward pass. Records every op on `rec`, draws dropout
    /// masks from `rng`, updates batch-norm running statistics, and returns
    /// the reconstructed weights together with the lifted parameter leaves
    /// (for gradient collection after `rec.backward`).
    pub fn reconstruct_train(
        &mut self,
        rec: &mut Record,
        noisy_input: &Matrix,
        graph: &ClassGraph,
        rng: &mut Stream,
    ) -> Result<(Tensor, LiftedParams), ModelError> {
        let mut pass = ForwardPass {
            rec,
            phase: Phase::Train,
            rng: Some(rng),
            lifted: LiftedParams::default(),
        };
        let out = run_forward(self, &mut pass, noisy_input, graph)?;
        let lifted = pass.lifted;
        Ok((out, lifted))
    }

    /// Eval-mode reconstruction `r(w)`: pure with respect to the model.
    pub fn reconstruct(&self, input: &Matrix, graph: &ClassGraph) -> Result<Matrix, ModelError> {
        let mut rec = Record::inference();
        // Eval never mutates; work on a scratch copy of the model so the
        // pass can share the training code path.
        let mut scratch = self.clone();
        let mut pass = ForwardPass {
            rec: &mut rec,
            phase: Phase::Eval,
            rng: None,
            lifted: LiftedParams::default(),
        };
        let out = run_forward(&mut scratch, &mut pass, input, graph)?;
        Ok(out.to_matrix())
    }

    /// One refinement step `l2_normalize(w + eps * (r(w) - w))`, row-wise.
    pub fn refine(
        &self,
        w: &Matrix,
        graph: &ClassGraph,
        step_size: f64,
    ) -> Result<Matrix, ModelError> {
        let r = self.reconstruct(w, graph)?;
        let mut moved = w.clone();
        for (m, (&wv, &rv)) in moved
            .data_mut()
            .iter_mut()
            .zip(w.data().iter().zip(r.data()))
        {
            *m = wv + step_size * (rv - wv);
        }
        Ok(moved.l2_normalize_rows())
    }

    /// Eval-mode relation message `q(h_i, h_j)` of one node pair.
    /// Symmetric in its arguments since the linear map is shared.
    pub fn relation_message(
        &self,
        layer: usize,
        h_i: &[f64],
        h_j: &[f64],
    ) -> Result<Vec<f64>, ModelError> {
        let params = &self.layers[layer];
        let (Some(message), Some(norm)) = (&params.message, &params.message_norm) else {
            return Err(ModelError::InvalidConfig {
                msg: "relation messages exist only in the gnn variant",
            });
        };
        if h_i.len() != message.in_dim() || h_j.len() != message.in_dim() {
            return Err(ModelError::DimMismatch {
                expected: message.in_dim(),
                actual: h_i.len(),
            });
        }
        let mut rec = Record::inference();
        let ti = rec.constant(Matrix::from_rows(&[h_i.to_vec()])?);
        let tj = rec.constant(Matrix::from_rows(&[h_j.to_vec()])?);
        let w = rec.constant(message.weight.clone());
        let b = rec.constant(Matrix::from_rows(&[message.bias.clone()])?);
        let wi = rec.matmul(&ti, &w)?;
        let wj = rec.matmul(&tj, &w)?;
        let sum = rec.add(&wi, &wj)?;
        let pre = rec.add_bias(&sum, &b)?;
        let out = eval_unit_chain(&mut rec, &pre, norm, self.config.leaky_slope)?;
        Ok(out.to_matrix().data().to_vec())
    }

    /// Eval-mode aggregation for one node: the edge-strength-weighted sum
    /// of relation messages from its neighbors.
    pub fn aggregate(
        &self,
        layer: usize,
        node: usize,
        node_features: &Matrix,
        graph: &ClassGraph,
    ) -> Result<Vec<f64>, ModelError> {
        if node_features.rows() != graph.num_nodes() {
            return Err(ModelError::NodeCountMismatch {
                weights: node_features.rows(),
                graph: graph.num_nodes(),
            });
        }
        let width = self
            .layers
            .get(layer)
            .and_then(|l| l.message.as_ref())
            .map(LinearParams::out_dim)
            .ok_or(ModelError::InvalidConfig {
                msg: "aggregation exists only in the gnn variant",
            })?;
        let mut acc = alloc::vec![0.0; width];
        let h_i = node_features.row(node);
        for (&j, &a) in graph
            .neighbors(node)
            .iter()
            .zip(graph.strengths(node))
        {
            let msg = self.relation_message(layer, h_i, node_features.row(j))?;
            for (o, &m) in acc.iter_mut().zip(&msg) {
                *o += a * m;
            }
        }
        Ok(acc)
    }

    /// Eval-mode hidden update: `[h_i ; u([h_i ; h_agg])]` where the `u`
    /// output has unit L2 norm.
    pub fn update_hidden(&self, h_i: &[f64], h_agg: &[f64]) -> Result<Vec<f64>, ModelError> {
        let layer = &self.layers[0];
        let norm = layer.update_norm.as_ref().ok_or(ModelError::InvalidConfig {
            msg: "hidden layer is missing its update norm",
        })?;
        let mut joined = h_i.to_vec();
        if self.config.variant == Variant::Gnn {
            joined.extend_from_slice(h_agg);
        }
        if joined.len() != layer.update.in_dim() {
            return Err(ModelError::DimMismatch {
                expected: layer.update.in_dim(),
                actual: joined.len(),
            });
        }
        let mut rec = Record::inference();
        let x = rec.constant(Matrix::from_rows(&[joined])?);
        let w = rec.constant(layer.update.weight.clone());
        let b = rec.constant(Matrix::from_rows(&[layer.update.bias.clone()])?);
        let lin = rec.matmul(&x, &w)?;
        let pre = rec.add_bias(&lin, &b)?;
        let chained = eval_unit_chain(&mut rec, &pre, norm, self.config.leaky_slope)?;
        let u = rec.l2_normalize(&chained, Axis::Rows);
        let mut out = h_i.to_vec();
        out.extend_from_slice(u.to_matrix().data());
        Ok(out)
    }

    /// Eval-mode final update: one linear map over `[h_i ; h_agg]` emitting
    /// the L2-normalized residual direction and the sigmoid gate.
    pub fn predict_final(
        &self,
        h_i: &[f64],
        h_agg: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        let layer = &self.layers[1];
        let mut joined = h_i.to_vec();
        if self.config.variant == Variant::Gnn {
            joined.extend_from_slice(h_agg);
        }
        if joined.len() != layer.update.in_dim() {
            return Err(ModelError::DimMismatch {
                expected: layer.update.in_dim(),
                actual: joined.len(),
            });
        }
        let d = self.config.dim;
        let mut rec = Record::inference();
        let x = rec.constant(Matrix::from_rows(&[joined])?);
        let w = rec.constant(layer.update.weight.clone());
        let b = rec.constant(Matrix::from_rows(&[layer.update.bias.clone()])?);
        let lin = rec.matmul(&x, &w)?;
        let pre = rec.add_bias(&lin, &b)?;
        let raw_dw = rec.slice_cols(&pre, 0..d)?;
        let raw_o = rec.slice_cols(&pre, d..2 * d)?;
        let dw = rec.l2_normalize(&raw_dw, Axis::Rows);
        let o = rec.sigmoid(&raw_o);
        Ok((
            dw.to_matrix().data().to_vec(),
            o.to_matrix().data().to_vec(),
        ))
    }
}

/// Lifted parameter leaves of one training forward pass, in trainable
/// declaration order.
#[derive(Default)]
pub struct LiftedParams {
    leaves: Vec<Tensor>,
}

impl LiftedParams {
    /// Gradients per trainable buffer (zeros where nothing flowed).
    pub fn grads(&self) -> Vec<Vec<f64>> {
        self.leaves
            .iter()
            .map(|t| {
                t.grad()
                    .map(|m| m.data().to_vec())
                    .unwrap_or_else(|| alloc::vec![0.0; t.rows() * t.cols()])
            })
            .collect()
    }

    fn push(&mut self, t: Tensor) {
        self.leaves.push(t);
    }
}

struct ForwardPass<'a> {
    rec: &'a mut Record,
    phase: Phase,
    rng: Option<&'a mut Stream>,
    lifted: LiftedParams,
}

fn lift(pass: &mut ForwardPass<'_>, value: Matrix) -> Tensor {
    let t = pass.rec.leaf(value, true);
    pass.lifted.push(t.clone());
    t
}

struct LiftedLinear {
    w: Tensor,
    b: Tensor,
}

fn lift_linear(pass: &mut ForwardPass<'_>, p: &LinearParams) -> Result<LiftedLinear, ModelError> {
    let w = lift(pass, p.weight.clone());
    let b = lift(pass, Matrix::from_rows(&[p.bias.clone()])?);
    Ok(LiftedLinear { w, b })
}

struct LiftedBn {
    scale: Tensor,
    shift: Tensor,
}

fn lift_bn(pass: &mut ForwardPass<'_>, p: &BatchNormParams) -> Result<LiftedBn, ModelError> {
    let scale = lift(pass, Matrix::from_rows(&[p.scale.clone()])?);
    let shift = lift(pass, Matrix::from_rows(&[p.shift.clone()])?);
    Ok(LiftedBn { scale, shift })
}

fn apply_linear(
    rec: &mut Record,
    x: &Tensor,
    lin: &LiftedLinear,
) -> Result<Tensor, TensorError> {
    let y = rec.matmul(x, &lin.w)?;
    rec.add_bias(&y, &lin.b)
}

/// BatchNorm -> Dropout -> LeakyReLU with an eval-mode record.
fn eval_unit_chain(
    rec: &mut Record,
    pre: &Tensor,
    norm: &BatchNormParams,
    slope: f64,
) -> Result<Tensor, ModelError> {
    let scale = rec.constant(Matrix::from_rows(&[norm.scale.clone()])?);
    let shift = rec.constant(Matrix::from_rows(&[norm.shift.clone()])?);
    let mut running = norm.running.clone();
    let bn = rec.batch_norm(pre, &scale, &shift, &mut running, Phase::Eval)?;
    Ok(rec.leaky_relu(&bn, slope))
}

/// Full forward pass shared by training and eval. The order of dropout
/// draws is fixed by op execution order, so a given rng state yields one
/// reproducible mask assignment.
fn run_forward(
    model: &mut WdaeModel,
    pass: &mut ForwardPass<'_>,
    input: &Matrix,
    graph: &ClassGraph,
) -> Result<Tensor, ModelError> {
    let config = model.config;
    let d = config.dim;
    if input.cols() != d {
        return Err(ModelError::DimMismatch {
            expected: d,
            actual: input.cols(),
        });
    }
    if config.variant == Variant::Gnn && input.rows() != graph.num_nodes() {
        return Err(ModelError::NodeCountMismatch {
            weights: input.rows(),
            graph: graph.num_nodes(),
        });
    }
    let edges = graph.flat_edges();
    let w_in = pass.rec.constant(input.clone());

    // Layer 0 (hidden).
    let h1 = {
        let layer = &mut model.layers[0];
        let agg = match config.variant {
            Variant::Gnn => Some(message_aggregate(pass, layer, &w_in, &edges, config)?),
            Variant::Mlp => None,
        };
        let u_in = match &agg {
            Some(a) => pass.rec.concat_cols(&w_in, a)?,
            None => w_in.clone(),
        };
        let lin = lift_linear(pass, &layer.update)?;
        let pre = apply_linear(pass.rec, &u_in, &lin)?;
        let norm = layer
            .update_norm
            .as_mut()
            .expect("hidden layer always has an update norm");
        let bn_params = lift_bn_inplace(pass, norm)?;
        let bn = apply_bn(pass, &pre, &bn_params, &mut norm.running)?;
        let dropped = apply_dropout(pass, &bn, config.dropout_p, false)?;
        let act = pass.rec.leaky_relu(&dropped, config.leaky_slope);
        let u = pass.rec.l2_normalize(&act, Axis::Rows);
        pass.rec.concat_cols(&w_in, &u)?
    };

    // Layer 1 (final prediction).
    let pre = {
        let layer = &mut model.layers[1];
        let agg = match config.variant {
            Variant::Gnn => Some(message_aggregate(pass, layer, &h1, &edges, config)?),
            Variant::Mlp => None,
        };
        let u_in = match &agg {
            Some(a) => pass.rec.concat_cols(&h1, a)?,
            None => h1.clone(),
        };
        let lin = lift_linear(pass, &layer.update)?;
        apply_linear(pass.rec, &u_in, &lin)?
    };
    let raw_dw = pass.rec.slice_cols(&pre, 0..d)?;
    let raw_o = pass.rec.slice_cols(&pre, d..2 * d)?;
    let dw = pass.rec.l2_normalize(&raw_dw, Axis::Rows);
    let o = pass.rec.sigmoid(&raw_o);
    let residual = pass.rec.mul(&o, &dw)?;
    Ok(pass.rec.add(&w_in, &residual)?)
}

/// Per-edge messages through the shared linear + unit chain, then the
/// strength-weighted per-receiver sum.
fn message_aggregate(
    pass: &mut ForwardPass<'_>,
    layer: &mut GnnLayerParams,
    h: &Tensor,
    edges: &crate::graph::FlatEdges,
    config: ModelConfig,
) -> Result<Tensor, ModelError> {
    let message = layer.message.as_ref().expect("gnn layer has a message map");
    let lin = lift_linear(pass, message)?;
    let h_recv = pass.rec.gather_rows(h, &edges.receivers)?;
    let h_send = pass.rec.gather_rows(h, &edges.senders)?;
    // W h_i + W h_j + b; the shared map keeps messages symmetric.
    let wi = pass.rec.matmul(&h_recv, &lin.w)?;
    let wj = pass.rec.matmul(&h_send, &lin.w)?;
    let sum = pass.rec.add(&wi, &wj)?;
    let pre = pass.rec.add_bias(&sum, &lin.b)?;
    let norm = layer
        .message_norm
        .as_mut()
        .expect("gnn layer has a message norm");
    let bn_params = lift_bn_inplace(pass, norm)?;
    let bn = apply_bn(pass, &pre, &bn_params, &mut norm.running)?;
    // One mask per (layer, episode), shared across node pairs.
    let dropped = apply_dropout(pass, &bn, config.dropout_p, true)?;
    let msg = pass.rec.leaky_relu(&dropped, config.leaky_slope);
    Ok(pass
        .rec
        .weighted_segment_sum(&msg, &edges.strengths, &edges.segments)?)
}

fn lift_bn_inplace(
    pass: &mut ForwardPass<'_>,
    norm: &BatchNormParams,
) -> Result<LiftedBn, ModelError> {
    lift_bn(pass, norm)
}

fn apply_bn(
    pass: &mut ForwardPass<'_>,
    pre: &Tensor,
    lifted: &LiftedBn,
    running: &mut BnRunning,
) -> Result<Tensor, ModelError> {
    Ok(pass
        .rec
        .batch_norm(pre, &lifted.scale, &lifted.shift, running, pass.phase)?)
}

fn apply_dropout(
    pass: &mut ForwardPass<'_>,
    x: &Tensor,
    p: f64,
    shared_rows: bool,
) -> Result<Tensor, ModelError> {
    match (pass.phase, pass.rng.as_deref_mut()) {
        (Phase::Train, Some(rng)) => Ok(if shared_rows {
            pass.rec.dropout_shared_rows(x, p, Phase::Train, rng)?
        } else {
            pass.rec.dropout(x, p, Phase::Train, rng)?
        }),
        _ => Ok(x.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graph;
    use crate::rng::stream_from_seed;
    use alloc::vec;
    use alloc::vec::Vec;

    pub(crate) fn test_config(variant: Variant, d: usize, h: usize) -> ModelConfig {
        ModelConfig {
            variant,
            dim: d,
            hidden_width: h,
            dropout_p: 0.2,
            leaky_slope: 0.2,
            graph_neighbors: 3,
            inverse_temperature: 5.0,
        }
    }

    fn random_unit_rows(n: usize, d: usize, seed: u64) -> Matrix {
        let mut stream = stream_from_seed(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng::normal(&mut stream, 1.0)).collect())
            .collect();
        Matrix::from_rows(&rows).unwrap().l2_normalize_rows()
    }

    #[test]
    fn init_is_deterministic_and_sized() {
        let cfg = test_config(Variant::Gnn, 8, 16);
        let m1 = WdaeModel::init(cfg, &mut stream_from_seed(3)).unwrap();
        let m2 = WdaeModel::init(cfg, &mut stream_from_seed(3)).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(m1.trainable_sizes(), m2.trainable_sizes());
        // layer 0: q 8->16, u (8+16)->16; layer 1: q 24->16, u (24+16)->16 (2d)
        let expected: usize = (8 * 16 + 16) + (16 + 16) + (24 * 16 + 16) + (16 + 16)
            + (24 * 16 + 16) + (16 + 16) + (40 * 16 + 16);
        assert_eq!(m1.num_parameters(), expected);
    }

    #[test]
    fn mlp_has_no_message_path() {
        let cfg = test_config(Variant::Mlp, 8, 16);
        let m = WdaeModel::init(cfg, &mut stream_from_seed(1)).unwrap();
        assert!(m.layers()[0].message.is_none());
        assert!(m.layers()[1].message.is_none());
        assert_eq!(m.layers()[0].update.in_dim(), 8);
        assert_eq!(m.layers()[1].update.in_dim(), 24);
        assert_eq!(m.layers()[1].update.out_dim(), 16);
    }

    #[test]
    fn message_is_symmetric_and_zero_on_zero() {
        let cfg = test_config(Variant::Gnn, 6, 12);
        let m = WdaeModel::init(cfg, &mut stream_from_seed(5)).unwrap();
        let zero = vec![0.0; 6];
        let msg = m.relation_message(0, &zero, &zero).unwrap();
        // zero inputs, zero bias, identity norm, leaky relu of 0 is 0
        assert!(msg.iter().all(|&v| v == 0.0));

        let a: Vec<f64> = (0..6).map(|i| 0.1 * i as f64 - 0.2).collect();
        let b: Vec<f64> = (0..6).map(|i| 0.3 - 0.07 * i as f64).collect();
        let ab = m.relation_message(0, &a, &b).unwrap();
        let ba = m.relation_message(0, &b, &a).unwrap();
        assert_eq!(ab, ba, "messages must be bitwise symmetric");
    }

    #[test]
    fn aggregate_matches_manual_sum() {
        let cfg = test_config(Variant::Gnn, 6, 8);
        let m = WdaeModel::init(cfg, &mut stream_from_seed(7)).unwrap();
        let h = random_unit_rows(5, 6, 11);
        let g = build_graph(&h, 3, 5.0).unwrap();
        for node in 0..5 {
            let got = m.aggregate(0, node, &h, &g).unwrap();
            let mut want = vec![0.0; 8];
            for (&j, &a) in g.neighbors(node).iter().zip(g.strengths(node)) {
                let msg = m.relation_message(0, h.row(node), h.row(j)).unwrap();
                for (w, &v) in want.iter_mut().zip(&msg) {
                    *w += a * v;
                }
            }
            for (x, y) in got.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn update_hidden_prefix_and_norm() {
        let cfg = test_config(Variant::Gnn, 6, 8);
        let m = WdaeModel::init(cfg, &mut stream_from_seed(9)).unwrap();
        let h_i: Vec<f64> = (0..6).map(|i| 0.2 * i as f64 - 0.5).collect();
        let h_agg: Vec<f64> = (0..8).map(|i| 0.1 * i as f64).collect();
        let out = m.update_hidden(&h_i, &h_agg).unwrap();
        assert_eq!(out.len(), 6 + 8);
        assert_eq!(&out[..6], &h_i[..], "prefix must be h_i bitwise");
        let norm: f64 = out[6..].iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn predict_final_ranges() {
        let cfg = test_config(Variant::Gnn, 6, 8);
        let m = WdaeModel::init(cfg, &mut stream_from_seed(13)).unwrap();
        let h_i: Vec<f64> = (0..14).map(|i| 0.05 * i as f64 - 0.3).collect();
        let h_agg: Vec<f64> = (0..8).map(|i| -0.1 * i as f64 + 0.2).collect();
        let (dw, o) = m.predict_final(&h_i, &h_agg).unwrap();
        let norm: f64 = dw.iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-9);
        assert!(o.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn predict_final_zero_params_is_guarded() {
        let cfg = test_config(Variant::Gnn, 4, 6);
        let mut m = WdaeModel::init(cfg, &mut stream_from_seed(1)).unwrap();
        // zero out the final update entirely
        let lin = &mut m.layers_mut()[1].update;
        lin.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        lin.bias.iter_mut().for_each(|v| *v = 0.0);
        let h_i = vec![0.1; 10];
        let h_agg = vec![0.2; 6];
        let (dw, o) = m.predict_final(&h_i, &h_agg).unwrap();
        assert!(dw.iter().all(|&v| v == 0.0), "guarded zero direction");
        assert!(o.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn reconstruct_identity_under_gate_zero() {
        let cfg = test_config(Variant::Gnn, 6, 8);
        let mut m = WdaeModel::init(cfg, &mut stream_from_seed(21)).unwrap();
        // push the gate bias very negative so o ~ 0
        let d = 6;
        for (j, b) in m.layers_mut()[1].update.bias.iter_mut().enumerate() {
            if j >= d {
                *b = -100.0;
            }
        }
        let w = random_unit_rows(5, 6, 2);
        let g = build_graph(&w, 3, 5.0).unwrap();
        let out = m.reconstruct(&w, &g).unwrap();
        for (a, b) in out.data().iter().zip(w.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn reconstruct_permutation_equivariant() {
        let cfg = test_config(Variant::Gnn, 6, 8);
        let m = WdaeModel::init(cfg, &mut stream_from_seed(23)).unwrap();
        let w = random_unit_rows(6, 6, 31);
        let g = build_graph(&w, 3, 5.0).unwrap();
        let out = m.reconstruct(&w, &g).unwrap();

        let perm = [3usize, 0, 4, 1, 5, 2];
        let wp = w.select_rows(&perm);
        let gp = build_graph(&wp, 3, 5.0).unwrap();
        let outp = m.reconstruct(&wp, &gp).unwrap();
        for (new_row, &old_row) in perm.iter().enumerate() {
            assert_eq!(
                outp.row(new_row),
                out.row(old_row),
                "row {old_row} must map to {new_row} bitwise"
            );
        }
    }

    #[test]
    fn mlp_ignores_the_graph() {
        let cfg = test_config(Variant::Mlp, 6, 8);
        let m = WdaeModel::init(cfg, &mut stream_from_seed(29)).unwrap();
        let w = random_unit_rows(5, 6, 41);
        let g1 = build_graph(&w, 2, 5.0).unwrap();
        let g2 = build_graph(&w, 4, 1.0).unwrap();
        let o1 = m.reconstruct(&w, &g1).unwrap();
        let o2 = m.reconstruct(&w, &g2).unwrap();
        assert_eq!(o1, o2);
    }

    #[test]
    fn refine_endpoints() {
        let cfg = test_config(Variant::Gnn, 6, 8);
        let m = WdaeModel::init(cfg, &mut stream_from_seed(37)).unwrap();
        let w = random_unit_rows(5, 6, 43);
        let g = build_graph(&w, 3, 5.0).unwrap();

        let at0 = m.refine(&w, &g, 0.0).unwrap();
        let wn = w.l2_normalize_rows();
        for (a, b) in at0.data().iter().zip(wn.data()) {
            assert!((a - b).abs() < 1e-9);
        }

        let at1 = m.refine(&w, &g, 1.0).unwrap();
        let rn = m.reconstruct(&w, &g).unwrap().l2_normalize_rows();
        for (a, b) in at1.data().iter().zip(rn.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn refine_midpoint_arithmetic() {
        // w = [1, 0], r(w) = [0, 1], eps = 0.5 -> normalize([0.5, 0.5])
        let w = vec![1.0, 0.0];
        let r = vec![0.0, 1.0];
        let eps = 0.5;
        let moved: Vec<f64> = w
            .iter()
            .zip(&r)
            .map(|(&wv, &rv)| wv + eps * (rv - wv))
            .collect();
        let m = Matrix::from_rows(&[moved]).unwrap().l2_normalize_rows();
        let inv_sqrt2 = 1.0 / crate::mathx::sqrt(2.0);
        assert!((m.get(0, 0) - inv_sqrt2).abs() < 1e-12);
        assert!((m.get(0, 1) - inv_sqrt2).abs() < 1e-12);
    }

    #[test]
    fn state_roundtrip() {
        let cfg = test_config(Variant::Gnn, 6, 8);
        let m = WdaeModel::init(cfg, &mut stream_from_seed(51)).unwrap();
        let values = m.state_values();
        let mut fresh = WdaeModel::init(cfg, &mut stream_from_seed(999)).unwrap();
        assert_ne!(m, fresh);
        fresh.load_state_values(&values).unwrap();
        assert_eq!(m, fresh);

        let mut truncated = values.clone();
        truncated.pop();
        assert!(fresh.load_state_values(&truncated).is_err());
    }

    #[test]
    fn train_forward_collects_grads() {
        let cfg = test_config(Variant::Gnn, 6, 8);
        let mut m = WdaeModel::init(cfg, &mut stream_from_seed(61)).unwrap();
        let w = random_unit_rows(6, 6, 71);
        let g = build_graph(&w, 3, 5.0).unwrap();
        let mut rec = Record::new();
        let mut rng = stream_from_seed(5);
        let (out, lifted) = m.reconstruct_train(&mut rec, &w, &g, &mut rng).unwrap();
        let loss = rec.sum(&out);
        rec.backward(&loss).unwrap();
        let grads = lifted.grads();
        assert_eq!(grads.len(), m.trainable_sizes().len());
        let any_nonzero = grads.iter().flatten().any(|&v| v != 0.0);
        assert!(any_nonzero);
    }
}
