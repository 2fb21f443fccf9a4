//! GCN and GIN forward passes, the readout head, and the deterministic
//! training loop: Adam, softmax cross-entropy, per-graph updates over a
//! shuffled order, Glorot-uniform init. Plain (value-only) and
//! tape-recorded forwards share the same kernels so their outputs agree
//! bitwise.

use crate::autodiff::{softmax_cross_entropy_parts, Tape, Tensor, TensorError};
use crate::graph::{normalized_adjacency, Dataset, Graph, GraphError, SplitSpec};
use crate::matrix::Matrix;
use crate::pooling::{pool, pool_t, PoolError, PoolingKind};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GnnError {
    #[error("graph feature dimension {got} does not match model input {expected}")]
    InputDimMismatch { got: usize, expected: usize },
    #[error("weight shapes do not chain: {0}")]
    BadChain(String),
    #[error("training diverged with a non-finite loss at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("evaluation requires at least one graph")]
    EmptyEvaluation,
    #[error("fold {fold} out of range for {folds} folds")]
    BadFold { fold: usize, folds: usize },
    #[error("split assigns {split} graphs, dataset has {dataset}")]
    SplitMismatch { split: usize, dataset: usize },
    #[error("fold {fold} leaves no training graphs")]
    EmptyTrainSet { fold: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Message-passing architecture family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Gcn,
    Gin,
}

/// Stack of GCN layers `H <- relu(A_hat H W)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnModel {
    weights: Vec<Matrix>,
}

impl GcnModel {
    pub fn new(weights: Vec<Matrix>) -> Result<Self, GnnError> {
        if weights.is_empty() {
            return Err(GnnError::BadChain("a model needs at least one layer".into()));
        }
        if let Some(mismatch) = windows_mismatch(&weights) {
            return Err(GnnError::BadChain(mismatch));
        }
        Ok(GcnModel { weights })
    }

    pub fn init(input_dim: usize, hidden_dim: usize, layers: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut weights = Vec::with_capacity(layers);
        let mut d_in = input_dim;
        for _ in 0..layers {
            weights.push(glorot_uniform(d_in, hidden_dim, rng));
            d_in = hidden_dim;
        }
        GcnModel { weights }
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn layer_count(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().unwrap().cols()
    }
}

/// One GIN layer's two-matrix MLP with a ReLU between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GinLayer {
    pub w1: Matrix,
    pub w2: Matrix,
}

/// Stack of GIN layers `h_u <- T((1 + zeta) h_u + sum of neighbors)`,
/// with `zeta` fixed at 0 and `T` the per-layer MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GinModel {
    layers: Vec<GinLayer>,
    zeta: f64,
}

impl GinModel {
    pub fn new(layers: Vec<GinLayer>) -> Result<Self, GnnError> {
        if layers.is_empty() {
            return Err(GnnError::BadChain("a model needs at least one layer".into()));
        }
        let mut prev_out: Option<usize> = None;
        for (i, layer) in layers.iter().enumerate() {
            if layer.w1.cols() != layer.w2.rows() {
                return Err(GnnError::BadChain(format!(
                    "layer {i}: mlp shapes {:?} and {:?}",
                    layer.w1.shape(),
                    layer.w2.shape()
                )));
            }
            if let Some(out) = prev_out {
                if layer.w1.rows() != out {
                    return Err(GnnError::BadChain(format!(
                        "layer {i} input {} after output {out}",
                        layer.w1.rows()
                    )));
                }
            }
            prev_out = Some(layer.w2.cols());
        }
        Ok(GinModel { layers, zeta: 0.0 })
    }

    pub fn init(input_dim: usize, hidden_dim: usize, layers: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut out = Vec::with_capacity(layers);
        let mut d_in = input_dim;
        for _ in 0..layers {
            out.push(GinLayer {
                w1: glorot_uniform(d_in, hidden_dim, rng),
                w2: glorot_uniform(hidden_dim, hidden_dim, rng),
            });
            d_in = hidden_dim;
        }
        GinModel { layers: out, zeta: 0.0 }
    }

    pub fn layers(&self) -> &[GinLayer] {
        &self.layers
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w1.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w2.cols()
    }
}

fn windows_mismatch(weights: &[Matrix]) -> Option<String> {
    for pair in weights.windows(2) {
        if pair[0].cols() != pair[1].rows() {
            return Some(format!("{:?} feeds {:?}", pair[0].shape(), pair[1].shape()));
        }
    }
    None
}

/// Either message-passing family behind one interface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", content = "params", rename_all = "snake_case")]
pub enum Gnn {
    Gcn(GcnModel),
    Gin(GinModel),
}

impl Gnn {
    pub fn arch(&self) -> ArchKind {
        match self {
            Gnn::Gcn(_) => ArchKind::Gcn,
            Gnn::Gin(_) => ArchKind::Gin,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Gnn::Gcn(m) => m.input_dim(),
            Gnn::Gin(m) => m.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Gnn::Gcn(m) => m.output_dim(),
            Gnn::Gin(m) => m.output_dim(),
        }
    }

    pub fn layer_count(&self) -> usize {
        match self {
            Gnn::Gcn(m) => m.layer_count(),
            Gnn::Gin(m) => m.layer_count(),
        }
    }

    /// The constant matrix message passing multiplies by: the normalized
    /// adjacency for GCN, `A + (1 + zeta) I` for GIN.
    pub fn structure_operator(&self, g: &Graph) -> Matrix {
        match self {
            Gnn::Gcn(_) => normalized_adjacency(g),
            Gnn::Gin(m) => {
                let mut agg = g.adjacency().clone();
                for i in 0..g.n() {
                    agg.set(i, i, 1.0 + m.zeta);
                }
                agg
            }
        }
    }

    /// All weight matrices in canonical order (GIN layers flattened as
    /// w1, w2 per layer).
    pub fn flat_weights(&self) -> Vec<&Matrix> {
        match self {
            Gnn::Gcn(m) => m.weights.iter().collect(),
            Gnn::Gin(m) => m.layers.iter().flat_map(|l| [&l.w1, &l.w2]).collect(),
        }
    }

    fn flat_weights_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            Gnn::Gcn(m) => m.weights.iter_mut().collect(),
            Gnn::Gin(m) => m.layers.iter_mut().flat_map(|l| [&mut l.w1, &mut l.w2]).collect(),
        }
    }

    /// Node embeddings after all message-passing layers.
    pub fn embed(&self, g: &Graph) -> Result<Matrix, GnnError> {
        if g.feature_dim() != self.input_dim() {
            return Err(GnnError::InputDimMismatch { got: g.feature_dim(), expected: self.input_dim() });
        }
        let op = self.structure_operator(g);
        let mut h = g.features().clone();
        match self {
            Gnn::Gcn(m) => {
                for w in &m.weights {
                    h = op.matmul(&h).matmul(w).map(|v| v.max(0.0));
                }
            }
            Gnn::Gin(m) => {
                for layer in &m.layers {
                    h = op.matmul(&h).matmul(&layer.w1).map(|v| v.max(0.0)).matmul(&layer.w2);
                }
            }
        }
        Ok(h)
    }
}

/// Node embeddings of a GCN stack.
pub fn gcn_forward(model: &GcnModel, g: &Graph) -> Result<Matrix, GnnError> {
    Gnn::Gcn(model.clone()).embed(g)
}

/// Node embeddings of a GIN stack.
pub fn gin_forward(model: &GinModel, g: &Graph) -> Result<Matrix, GnnError> {
    Gnn::Gin(model.clone()).embed(g)
}

/// Tape-recorded embedding from prepared tensors. `model_weights` uses
/// the same canonical order as [`Gnn::flat_weights`].
pub fn embed_t(
    tape: &mut Tape,
    arch: ArchKind,
    structure: Tensor,
    features: Tensor,
    model_weights: &[Tensor],
) -> Result<Tensor, GnnError> {
    let mut h = features;
    match arch {
        ArchKind::Gcn => {
            for &w in model_weights {
                let agg = tape.matmul(structure, h)?;
                let proj = tape.matmul(agg, w)?;
                h = tape.relu(proj)?;
            }
        }
        ArchKind::Gin => {
            assert!(model_weights.len() % 2 == 0, "GIN weights come in pairs");
            for pair in model_weights.chunks(2) {
                let agg = tape.matmul(structure, h)?;
                let lin = tape.matmul(agg, pair[0])?;
                let act = tape.relu(lin)?;
                h = tape.matmul(act, pair[1])?;
            }
        }
    }
    Ok(h)
}

/// MLP mapping the pooled vector to class logits: one hidden layer with
/// ReLU, no biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadoutHead {
    pub w1: Matrix,
    pub w2: Matrix,
}

impl ReadoutHead {
    pub fn new(w1: Matrix, w2: Matrix) -> Result<Self, GnnError> {
        if w1.cols() != w2.rows() {
            return Err(GnnError::BadChain(format!("head shapes {:?} and {:?}", w1.shape(), w2.shape())));
        }
        Ok(ReadoutHead { w1, w2 })
    }

    pub fn init(pooled_dim: usize, hidden_dim: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        ReadoutHead {
            w1: glorot_uniform(pooled_dim, hidden_dim, rng),
            w2: glorot_uniform(hidden_dim, classes, rng),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.w2.cols()
    }

    pub fn logits(&self, pooled: &Matrix) -> Matrix {
        pooled.matmul(&self.w1).map(|v| v.max(0.0)).matmul(&self.w2)
    }
}

/// Glorot-style uniform init on `[-sqrt(6/(fan_in+fan_out)), +...]`.
pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Matrix::from_vec(rows, cols, data)
}

/// Softmax cross-entropy of a logit row against a class index, without
/// a tape. Same arithmetic as the recorded op.
pub fn cross_entropy(logits: &Matrix, class: usize) -> f64 {
    softmax_cross_entropy_parts(logits.row(0), class).0
}

/// Class with the largest logit; ties go to the lower index.
pub fn predicted_class(logits: &Matrix) -> usize {
    let row = logits.row(0);
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fixed start seed for the spectral readout, derived once per training
/// seed so every forward pass of a run shares one start vector.
pub fn rs_start_seed(train_seed: u64) -> u64 {
    train_seed ^ 0x9E37_79B9_7F4A_7C15
}

/// A trained model, head, and pooling bundled with the spectral
/// readout's start seed; the full graph-to-logits function.
#[derive(Clone, Copy)]
pub struct Predictor<'a> {
    pub model: &'a Gnn,
    pub head: &'a ReadoutHead,
    pub pooling: &'a PoolingKind,
    pub start_seed: u64,
}

impl Predictor<'_> {
    pub fn logits(&self, g: &Graph) -> Result<Matrix, GnnError> {
        let h = self.model.embed(g)?;
        let pooled = pool(&h, self.pooling, self.start_seed)?;
        Ok(self.head.logits(&pooled))
    }

    pub fn predict(&self, g: &Graph) -> Result<usize, GnnError> {
        Ok(predicted_class(&self.logits(g)?))
    }

    /// Cross-entropy against the graph's own label; the attack fitness.
    pub fn loss(&self, g: &Graph) -> Result<f64, GnnError> {
        Ok(cross_entropy(&self.logits(g)?, g.label()))
    }
}

/// Tape-recorded loss from prepared tensors through embedding, pooling,
/// head, and softmax cross-entropy.
#[allow(clippy::too_many_arguments)]
pub fn loss_on_tape(
    tape: &mut Tape,
    arch: ArchKind,
    structure: Tensor,
    features: Tensor,
    model_weights: &[Tensor],
    head_weights: (Tensor, Tensor),
    pooling: &PoolingKind,
    start_seed: u64,
    label: usize,
) -> Result<Tensor, GnnError> {
    let h = embed_t(tape, arch, structure, features, model_weights)?;
    let pooled = pool_t(tape, h, pooling, start_seed)?;
    let hidden = tape.matmul(pooled, head_weights.0)?;
    let hidden = tape.relu(hidden)?;
    let logits = tape.matmul(hidden, head_weights.1)?;
    Ok(tape.softmax_cross_entropy(logits, label)?)
}

/// Training hyperparameters. Defaults: 100 epochs, learning rate 1e-3,
/// hidden width 32, 10 repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub hidden_dim: usize,
    pub seed: u64,
    pub repeats: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 100, learning_rate: 1e-3, hidden_dim: 32, seed: 0, repeats: 10 }
    }
}

/// Result of one training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Gnn,
    pub head: ReadoutHead,
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    fn step(&mut self, params: &mut [Matrix], grads: &[Matrix]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            let ps = p.as_mut_slice();
            let gs = g.as_slice();
            let ms = m.as_mut_slice();
            let vs = v.as_mut_slice();
            for i in 0..ps.len() {
                ms[i] = self.beta1 * ms[i] + (1.0 - self.beta1) * gs[i];
                vs[i] = self.beta2 * vs[i] + (1.0 - self.beta2) * gs[i] * gs[i];
                let m_hat = ms[i] / bc1;
                let v_hat = vs[i] / bc2;
                ps[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Freshly initialized model and head for a dataset, deterministic in
/// the seed.
pub fn init_models(
    arch: ArchKind,
    layers: usize,
    feature_dim: usize,
    hidden_dim: usize,
    num_classes: usize,
    seed: u64,
) -> (Gnn, ReadoutHead) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = match arch {
        ArchKind::Gcn => Gnn::Gcn(GcnModel::init(feature_dim, hidden_dim, layers, &mut rng)),
        ArchKind::Gin => Gnn::Gin(GinModel::init(feature_dim, hidden_dim, layers, &mut rng)),
    };
    let head = ReadoutHead::init(model.output_dim(), hidden_dim, num_classes, &mut rng);
    (model, head)
}

/// Train on one fold: full-batch per-graph Adam updates over a shuffled
/// order each epoch, deterministic in the seed. A non-finite loss
/// aborts with the offending epoch.
pub fn train(
    arch: ArchKind,
    layers: usize,
    ds: &Dataset,
    split: &SplitSpec,
    fold: usize,
    pooling: &PoolingKind,
    config: &TrainConfig,
) -> Result<TrainOutcome, GnnError> {
    if split.assignment.len() != ds.len() {
        return Err(GnnError::SplitMismatch { split: split.assignment.len(), dataset: ds.len() });
    }
    if fold >= split.folds {
        return Err(GnnError::BadFold { fold, folds: split.folds });
    }
    let train_idx = split.train_indices(fold);
    let test_idx = split.test_indices(fold);
    if train_idx.is_empty() {
        return Err(GnnError::EmptyTrainSet { fold });
    }

    let (mut model, mut head) = init_models(arch, layers, ds.feature_dim, config.hidden_dim, ds.num_classes, config.seed);
    let start_seed = rs_start_seed(config.seed);

    // Flatten parameters into one canonically ordered list for Adam.
    let mut params: Vec<Matrix> = model.flat_weights().into_iter().cloned().collect();
    params.push(head.w1.clone());
    params.push(head.w2.clone());
    let shapes: Vec<(usize, usize)> = params.iter().map(|p| p.shape()).collect();
    let mut adam = Adam::new(config.learning_rate, &shapes);

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);

    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for &gi in &order {
            let g = &ds.graphs[gi];
            let mut tape = Tape::new();
            let structure = tape.constant(model.structure_operator(g))?;
            let features = tape.constant(g.features().clone())?;
            let tensors: Vec<Tensor> =
                params.iter().map(|p| tape.variable(p.clone())).collect::<Result<_, _>>()?;
            let n_model = tensors.len() - 2;
            let loss = loss_on_tape(
                &mut tape,
                arch,
                structure,
                features,
                &tensors[..n_model],
                (tensors[n_model], tensors[n_model + 1]),
                pooling,
                start_seed,
                g.label(),
            )?;
            let loss_value = tape.scalar(loss)?;
            if !loss_value.is_finite() {
                return Err(GnnError::Diverged { epoch });
            }
            total += loss_value;
            tape.backward(loss)?;
            let grads: Vec<Matrix> = tensors.iter().map(|&t| tape.grad_or_zeros(t)).collect();
            adam.step(&mut params, &grads);
        }
        epoch_losses.push(total / order.len() as f64);
    }

    // Write the trained parameters back.
    {
        let mut slots = model.flat_weights_mut();
        let n_model = slots.len();
        for (slot, value) in slots.iter_mut().zip(&params[..n_model]) {
            **slot = value.clone();
        }
        head.w1 = params[n_model].clone();
        head.w2 = params[n_model + 1].clone();
    }

    let predictor = Predictor { model: &model, head: &head, pooling, start_seed };
    let train_graphs: Vec<&Graph> = train_idx.iter().map(|&i| &ds.graphs[i]).collect();
    let test_graphs: Vec<&Graph> = test_idx.iter().map(|&i| &ds.graphs[i]).collect();
    let train_accuracy = evaluate(&predictor, &train_graphs)?;
    let test_accuracy = if test_graphs.is_empty() { 0.0 } else { evaluate(&predictor, &test_graphs)? };

    Ok(TrainOutcome { model, head, epoch_losses, train_accuracy, test_accuracy })
}

/// Fraction of graphs whose argmax prediction matches the label.
pub fn evaluate(p: &Predictor<'_>, graphs: &[&Graph]) -> Result<f64, GnnError> {
    if graphs.is_empty() {
        return Err(GnnError::EmptyEvaluation);
    }
    use rayon::prelude::*;
    let correct: Vec<bool> = graphs
        .par_iter()
        .map(|g| p.predict(g).map(|c| c == g.label()))
        .collect::<Result<_, _>>()?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / graphs.len() as f64)
}
