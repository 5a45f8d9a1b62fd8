//! Trainable species-presence predictor.
//!
//! ```text
//! x --frozen encoder--> h --adapter (trainable, optional)--> u --l2--> z --MLP--> y_hat
//! ```
//!
//! The encoder stands in for a frozen pretrained backbone and never changes
//! after construction. The adapter is the only trainable layer in front of the
//! l2 normalisation, so it is the path through which the contrastive term
//! shapes the embeddings; without it that term is a constant.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::{combined_loss, ContrastiveConfig};
use crate::metrics::{self, EvalSummary};
use crate::numeric::{dot, l2_normalize, norm, sigmoid, Matrix, RngState, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Inputs already are embeddings; only normalised.
    #[default]
    Identity,
    /// Fixed seeded linear map followed by `tanh`.
    RandomProjection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FrozenEncoder {
    Identity {
        dim: usize,
    },
    RandomProjection {
        seed: u64,
        weights: Matrix,
        bias: Vec<f64>,
    },
}

impl FrozenEncoder {
    pub fn identity(dim: usize) -> Self {
        Self::Identity { dim }
    }

    pub fn random_projection(input_dim: usize, output_dim: usize, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        let scale = 1.0 / (input_dim as f64).sqrt();
        let data = (0..input_dim * output_dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let bias = (0..output_dim).map(|_| rng.random_range(-0.1..0.1)).collect();
        Self::RandomProjection {
            seed,
            weights: Matrix::from_vec(output_dim, input_dim, data).expect("sized above"),
            bias,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Self::Identity { dim } => *dim,
            Self::RandomProjection { weights, .. } => weights.cols(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Self::Identity { dim } => *dim,
            Self::RandomProjection { weights, .. } => weights.rows(),
        }
    }

    /// Encodes one input row; the result has unit norm.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "encoder expects {} features, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        match self {
            Self::Identity { .. } => l2_normalize(x),
            Self::RandomProjection { weights, bias, .. } => {
                let mut h = weights.matvec(x);
                for (v, b) in h.iter_mut().zip(bias) {
                    *v = (*v + b).tanh();
                }
                l2_normalize(&h)
            }
        }
    }
}

/// Fully connected layer, weights stored as (out, in).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    /// Uniform fan-in initialisation, `U(-sqrt(6/in), sqrt(6/in))`, zero bias.
    pub fn he_uniform(input: usize, output: usize, rng: &mut SeededRng) -> Self {
        let bound = (6.0 / input as f64).sqrt();
        let data = (0..input * output)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weights: Matrix::from_vec(output, input, data).expect("sized above"),
            bias: vec![0.0; output],
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weights: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.weights.matvec(x);
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o += b;
        }
        out
    }
}

/// ReLU MLP with a sigmoid output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpProjector {
    pub layers: Vec<Dense>,
}

impl MlpProjector {
    /// `n_layers` dense layers: `input -> hidden -> ... -> output`.
    pub fn new(
        input: usize,
        hidden: usize,
        n_layers: usize,
        output: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if n_layers == 0 || input == 0 || output == 0 || (n_layers > 1 && hidden == 0) {
            return Err(Error::InvalidConfig(format!(
                "cannot build an MLP with {n_layers} layers {input}->{hidden}->{output}"
            )));
        }
        let mut dims = vec![input];
        dims.extend(std::iter::repeat(hidden).take(n_layers - 1));
        dims.push(output);
        let layers = dims
            .windows(2)
            .map(|w| Dense::he_uniform(w[0], w[1], rng))
            .collect();
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::output_dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    #[serde(default = "ModelConfig::default_embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default = "ModelConfig::default_hidden")]
    pub hidden: usize,
    #[serde(default = "ModelConfig::default_layers")]
    pub layers: usize,
    pub species: usize,
    #[serde(default = "ModelConfig::default_adapter")]
    pub adapter: bool,
    #[serde(default)]
    pub encoder: EncoderKind,
    #[serde(default)]
    pub encoder_seed: u64,
}

impl ModelConfig {
    fn default_embedding_dim() -> usize {
        256
    }
    fn default_hidden() -> usize {
        256
    }
    fn default_layers() -> usize {
        3
    }
    fn default_adapter() -> bool {
        true
    }

    /// Identity encoder over `input_dim` features, defaults elsewhere.
    pub fn new(input_dim: usize, species: usize) -> Self {
        Self {
            input_dim,
            embedding_dim: input_dim,
            hidden: Self::default_hidden(),
            layers: Self::default_layers(),
            species,
            adapter: true,
            encoder: EncoderKind::Identity,
            encoder_seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.encoder == EncoderKind::Identity && self.input_dim != self.embedding_dim {
            return Err(Error::InvalidConfig(format!(
                "identity encoder needs input_dim ({}) == embedding_dim ({})",
                self.input_dim, self.embedding_dim
            )));
        }
        if self.input_dim == 0 || self.embedding_dim == 0 || self.species == 0 {
            return Err(Error::InvalidConfig("dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct SampleCache {
    encoded: Vec<f64>,
    /// Norm of the adapter output before normalisation.
    pre_norm: f64,
    /// Input to every projector layer (`inputs[0]` is the embedding).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of every projector layer.
    pre_activations: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub embeddings: Vec<Vec<f64>>,
    pub preds: Vec<Vec<f64>>,
    cache: Option<Vec<SampleCache>>,
}

impl ForwardPass {
    pub fn len(&self) -> usize {
        self.preds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.preds.is_empty()
    }

    /// Drops the backprop cache.
    pub fn without_cache(mut self) -> Self {
        self.cache = None;
        self
    }
}

/// Gradients in the same tensor order as [`SpeciesModel::parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.concat()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeciesModel {
    pub config: ModelConfig,
    pub encoder: FrozenEncoder,
    pub adapter: Option<Dense>,
    pub projector: MlpProjector,
}

impl SpeciesModel {
    pub fn new(config: &ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let encoder = match config.encoder {
            EncoderKind::Identity => FrozenEncoder::identity(config.input_dim),
            EncoderKind::RandomProjection => {
                FrozenEncoder::random_projection(config.input_dim, config.embedding_dim, config.encoder_seed)
            }
        };
        let d = config.embedding_dim;
        let adapter = config.adapter.then(|| Dense::he_uniform(d, d, rng));
        let projector = MlpProjector::new(d, config.hidden, config.layers, config.species, rng)?;
        Ok(Self {
            config: config.clone(),
            encoder,
            adapter,
            projector,
        })
    }

    pub fn parameters(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in self.adapter.iter().chain(&self.projector.layers) {
            out.push(layer.weights.as_slice());
            out.push(layer.bias.as_slice());
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in self.adapter.iter_mut().chain(self.projector.layers.iter_mut()) {
            out.push(layer.weights.as_mut_slice());
            out.push(layer.bias.as_mut_slice());
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    pub fn flat_parameters(&self) -> Vec<f64> {
        self.parameters().concat()
    }

    pub fn set_flat_parameters(&mut self, flat: &[f64]) -> Result<()> {
        let total = self.num_parameters();
        if flat.len() != total {
            return Err(Error::LengthMismatch {
                expected: total,
                actual: flat.len(),
            });
        }
        let mut offset = 0;
        for p in self.parameters_mut() {
            p.copy_from_slice(&flat[offset..offset + p.len()]);
            offset += p.len();
        }
        Ok(())
    }

    fn embed(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>, f64)> {
        let encoded = self.encoder.encode(x)?;
        match &self.adapter {
            Some(adapter) => {
                let u = adapter.apply(&encoded);
                let n = norm(&u);
                let z = l2_normalize(&u)?;
                Ok((encoded, z, n))
            }
            None => {
                let z = encoded.clone();
                Ok((encoded, z, 1.0))
            }
        }
    }

    /// Runs the batch and keeps the activations needed by [`Self::backward`].
    pub fn forward(&self, features: &Matrix) -> Result<ForwardPass> {
        if features.cols() != self.encoder.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "features have {} columns, encoder expects {}",
                features.cols(),
                self.encoder.input_dim()
            )));
        }
        let last = self.projector.layers.len() - 1;
        let mut embeddings = Vec::with_capacity(features.rows());
        let mut preds = Vec::with_capacity(features.rows());
        let mut cache = Vec::with_capacity(features.rows());
        for x in features.iter_rows() {
            let (encoded, z, pre_norm) = self.embed(x)?;
            let mut inputs = Vec::with_capacity(last + 1);
            let mut pre_activations = Vec::with_capacity(last + 1);
            let mut a = z.clone();
            for (l, layer) in self.projector.layers.iter().enumerate() {
                let pre = layer.apply(&a);
                let next = if l == last {
                    pre.iter().map(|&v| sigmoid(v)).collect()
                } else {
                    pre.iter().map(|&v| v.max(0.0)).collect()
                };
                inputs.push(std::mem::replace(&mut a, next));
                pre_activations.push(pre);
            }
            embeddings.push(z);
            preds.push(a);
            cache.push(SampleCache {
                encoded,
                pre_norm,
                inputs,
                pre_activations,
            });
        }
        Ok(ForwardPass {
            embeddings,
            preds,
            cache: Some(cache),
        })
    }

    pub fn predict(&self, features: &Matrix) -> Result<ForwardPass> {
        Ok(self.forward(features)?.without_cache())
    }

    /// Reverse-mode gradients of a loss given its gradients w.r.t. the
    /// predictions and (optionally) the embeddings.
    ///
    /// Embedding gradients only reach parameters through the adapter.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        grad_preds: &[Vec<f64>],
        grad_embeddings: Option<&[Vec<f64>]>,
    ) -> Result<Gradients> {
        let cache = pass.cache.as_ref().ok_or(Error::MissingForwardCache)?;
        if grad_preds.len() != cache.len() || grad_embeddings.is_some_and(|g| g.len() != cache.len()) {
            return Err(Error::ShapeMismatch(format!(
                "gradients for {} samples, forward pass had {}",
                grad_preds.len(),
                cache.len()
            )));
        }

        let mut tensors: Vec<Vec<f64>> = self.parameters().iter().map(|p| vec![0.0; p.len()]).collect();
        let offset = if self.adapter.is_some() { 2 } else { 0 };
        let last = self.projector.layers.len() - 1;

        for (s, sample) in cache.iter().enumerate() {
            let out = &pass.preds[s];
            if grad_preds[s].len() != out.len() {
                return Err(Error::ShapeMismatch("prediction gradient width".into()));
            }
            let mut delta: Vec<f64> = grad_preds[s]
                .iter()
                .zip(out)
                .map(|(g, p)| g * p * (1.0 - p))
                .collect();

            for l in (0..=last).rev() {
                let layer = &self.projector.layers[l];
                let input = &sample.inputs[l];
                {
                    let gw = &mut tensors[offset + 2 * l];
                    for (r, &d) in delta.iter().enumerate() {
                        if d == 0.0 {
                            continue;
                        }
                        let row = &mut gw[r * input.len()..(r + 1) * input.len()];
                        for (g, &a) in row.iter_mut().zip(input) {
                            *g += d * a;
                        }
                    }
                }
                for (g, &d) in tensors[offset + 2 * l + 1].iter_mut().zip(&delta) {
                    *g += d;
                }
                let mut back = layer.weights.matvec_transposed(&delta);
                if l > 0 {
                    for (b, &pre) in back.iter_mut().zip(&sample.pre_activations[l - 1]) {
                        if pre <= 0.0 {
                            *b = 0.0;
                        }
                    }
                }
                delta = back;
            }

            // delta is now dL/dz
            if self.adapter.is_some() {
                if let Some(ge) = grad_embeddings {
                    if ge[s].len() != delta.len() {
                        return Err(Error::ShapeMismatch("embedding gradient width".into()));
                    }
                    for (d, g) in delta.iter_mut().zip(&ge[s]) {
                        *d += g;
                    }
                }
                let z = &pass.embeddings[s];
                let radial = dot(z, &delta);
                let du: Vec<f64> = delta
                    .iter()
                    .zip(z)
                    .map(|(d, zi)| (d - zi * radial) / sample.pre_norm)
                    .collect();
                let h = &sample.encoded;
                let gw = &mut tensors[0];
                for (r, &d) in du.iter().enumerate() {
                    for (g, &hv) in gw[r * h.len()..(r + 1) * h.len()].iter_mut().zip(h) {
                        *g += d * hv;
                    }
                }
                for (g, d) in tensors[1].iter_mut().zip(&du) {
                    *g += d;
                }
            }
        }
        Ok(Gradients { tensors })
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint::new(self.clone(), None, None);
        ckpt.save(path)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(learning_rate: f64, shapes: &[usize]) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_model(learning_rate: f64, model: &SpeciesModel) -> Self {
        let shapes: Vec<usize> = model.parameters().iter().map(|p| p.len()).collect();
        Self::new(learning_rate, &shapes)
    }

    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam tracks {} tensors, got {} params / {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(Error::ShapeMismatch("tensor size".into()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Which validation loss decides the retained epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    #[default]
    Combined,
    Bce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs without validation improvement before stopping; `None` disables.
    pub patience: Option<usize>,
    pub seed: u64,
    pub selection: SelectionMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            patience: Some(10),
            seed: 0,
            selection: SelectionMetric::Combined,
        }
    }
}

/// Features and labels of one split, row-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub ids: Vec<String>,
    pub features: Matrix,
    pub labels: Vec<Vec<f64>>,
}

impl DataSplit {
    pub fn new(ids: Vec<String>, features: Matrix, labels: Vec<Vec<f64>>) -> Result<Self> {
        if ids.len() != features.rows() || ids.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} ids, {} feature rows, {} label rows",
                ids.len(),
                features.rows(),
                labels.len()
            )));
        }
        Ok(Self {
            ids,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn species(&self) -> usize {
        self.labels.first().map_or(0, Vec::len)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_bce: f64,
    pub val_loss: f64,
    pub val_bce: f64,
}

impl EpochRecord {
    fn selection_value(&self, metric: SelectionMetric) -> f64 {
        match metric {
            SelectionMetric::Combined => self.val_loss,
            SelectionMetric::Bce => self.val_bce,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub loss: ContrastiveConfig,
    /// Epoch 0 is the untrained model.
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Validation metrics of the retained model.
    pub validation: EvalSummary,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: SpeciesModel,
    pub report: TrainReport,
    pub optimizer: AdamState,
    pub rng: RngState,
}

/// Mean combined and BCE loss over a split in fixed-order batches.
pub fn evaluate_loss(
    model: &SpeciesModel,
    split: &DataSplit,
    batch_size: usize,
    loss: &ContrastiveConfig,
) -> Result<(f64, f64)> {
    if split.is_empty() {
        return Err(Error::EmptySplit("evaluation".into()));
    }
    let batch_size = batch_size.max(1);
    let (mut total, mut bce) = (0.0, 0.0);
    let indices: Vec<usize> = (0..split.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let batch = split.subset(chunk);
        let pass = model.predict(&batch.features)?;
        let out = combined_loss(&batch.labels, &pass.preds, &pass.embeddings, loss)?;
        total += out.total.value * chunk.len() as f64;
        bce += out.bce * chunk.len() as f64;
    }
    let n = split.len() as f64;
    Ok((total / n, bce / n))
}

/// Trains a fresh model with minibatch Adam and keeps the epoch with the
/// lowest validation loss.
pub fn fit(
    model_config: &ModelConfig,
    train: &DataSplit,
    val: &DataSplit,
    training: &TrainConfig,
    loss: &ContrastiveConfig,
) -> Result<FitOutcome> {
    if train.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptySplit("val".into()));
    }
    if train.species() != model_config.species || val.species() != model_config.species {
        return Err(Error::ShapeMismatch(format!(
            "model predicts {} species, splits carry {} / {}",
            model_config.species,
            train.species(),
            val.species()
        )));
    }
    if training.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    loss.validate()?;

    let root = SeededRng::new(training.seed);
    let mut init_rng = root.fork(0);
    let mut shuffle_rng = root.fork(1);
    let mut model = SpeciesModel::new(model_config, &mut init_rng)?;
    let mut adam = AdamState::for_model(training.learning_rate, &model);

    let record = |model: &SpeciesModel, epoch: usize| -> Result<EpochRecord> {
        let (train_loss, train_bce) = evaluate_loss(model, train, training.batch_size, loss)?;
        let (val_loss, val_bce) = evaluate_loss(model, val, training.batch_size, loss)?;
        Ok(EpochRecord {
            epoch,
            train_loss,
            train_bce,
            val_loss,
            val_bce,
        })
    };

    let mut epochs = vec![record(&model, 0)?];
    let mut best = (
        0usize,
        epochs[0].selection_value(training.selection),
        model.clone(),
    );
    let mut since_best = 0usize;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=training.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut train_loss = 0.0;
        let mut train_bce = 0.0;
        for chunk in order.chunks(training.batch_size) {
            let batch = train.subset(chunk);
            let pass = model.forward(&batch.features)?;
            let out = combined_loss(&batch.labels, &pass.preds, &pass.embeddings, loss)?;
            train_loss += out.total.value * chunk.len() as f64;
            train_bce += out.bce * chunk.len() as f64;
            let grad_preds = out.total.grad_predictions.as_deref().unwrap_or_default();
            let grads = model.backward(&pass, grad_preds, out.total.grad_embeddings.as_deref())?;
            adam.update(&mut model.parameters_mut(), &grads.tensors)?;
        }
        let (val_loss, val_bce) = evaluate_loss(&model, val, training.batch_size, loss)?;
        let rec = EpochRecord {
            epoch,
            train_loss: train_loss / train.len() as f64,
            train_bce: train_bce / train.len() as f64,
            val_loss,
            val_bce,
        };
        epochs.push(rec);
        let score = rec.selection_value(training.selection);
        if score < best.1 {
            best = (epoch, score, model.clone());
            since_best = 0;
        } else {
            since_best += 1;
        }
        if training.patience.is_some_and(|p| since_best >= p) {
            stopped_early = epoch < training.epochs;
            break;
        }
    }

    let (best_epoch, _, best_model) = best;
    let val_preds = best_model.predict(&val.features)?.preds;
    let validation = metrics::summarize(&val.labels, &val_preds)?;
    Ok(FitOutcome {
        report: TrainReport {
            seed: training.seed,
            model: model_config.clone(),
            training: training.clone(),
            loss: *loss,
            epochs,
            best_epoch,
            stopped_early,
            validation,
        },
        model: best_model,
        optimizer: adam,
        rng: shuffle_rng.state(),
    })
}

/// Location-independent baseline: per-species mean encounter rate of the
/// training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanRateModel {
    pub rates: Vec<f64>,
}

impl MeanRateModel {
    pub fn fit<L: AsRef<[f64]>>(labels: &[L]) -> Result<Self> {
        let first = labels.first().ok_or_else(|| Error::EmptySplit("train".into()))?;
        let s = first.as_ref().len();
        let mut rates = vec![0.0; s];
        for y in labels {
            let y = y.as_ref();
            if y.len() != s {
                return Err(Error::LengthMismatch {
                    expected: s,
                    actual: y.len(),
                });
            }
            for (r, v) in rates.iter_mut().zip(y) {
                *r += v;
            }
        }
        let n = labels.len() as f64;
        rates.iter_mut().for_each(|r| *r /= n);
        Ok(Self { rates })
    }

    pub fn predict(&self, n: usize) -> Vec<Vec<f64>> {
        vec![self.rates.clone(); n]
    }
}

/// On-disk model state: layer shapes, row-major weights and, optionally, the
/// optimizer moments and shuffle stream position needed to resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: SpeciesModel,
    pub optimizer: Option<AdamState>,
    pub rng: Option<RngState>,
}

impl Checkpoint {
    pub const FORMAT: &'static str = "pecl-lab-checkpoint";
    pub const VERSION: u32 = 1;

    pub fn new(model: SpeciesModel, optimizer: Option<AdamState>, rng: Option<RngState>) -> Self {
        Self {
            format: Self::FORMAT.into(),
            version: Self::VERSION,
            model,
            optimizer,
            rng,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let ckpt: Self = serde_json::from_reader(file)?;
        if ckpt.format != Self::FORMAT || ckpt.version != Self::VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::bce_loss;
    use crate::numeric::{finite_diff_grad, FD_STEP};
    use crate::pairing::SoftLabelSource;

    fn small_config(input: usize, species: usize) -> ModelConfig {
        ModelConfig {
            input_dim: input,
            embedding_dim: input,
            hidden: 6,
            layers: 3,
            species,
            adapter: true,
            encoder: EncoderKind::Identity,
            encoder_seed: 0,
        }
    }

    fn random_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn random_labels(rng: &mut SeededRng, n: usize, s: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..s).map(|_| rng.random::<f64>()).collect())
            .collect()
    }

    #[test]
    fn zero_projector_predicts_half() {
        let mut rng = SeededRng::new(0);
        let mut model = SpeciesModel::new(&small_config(4, 3), &mut rng).unwrap();
        for layer in &mut model.projector.layers {
            *layer = Dense::zeros(layer.input_dim(), layer.output_dim());
        }
        let x = random_matrix(&mut rng, 5, 4);
        let pass = model.forward(&x).unwrap();
        assert!(pass.preds.iter().flatten().all(|&p| p == 0.5));
    }

    #[test]
    fn identity_encoder_passes_unit_inputs() {
        let mut cfg = small_config(2, 2);
        cfg.adapter = false;
        let model = SpeciesModel::new(&cfg, &mut SeededRng::new(1)).unwrap();
        let x = Matrix::from_rows(&[vec![0.6, 0.8], vec![0.0, 1.0]]).unwrap();
        let pass = model.forward(&x).unwrap();
        assert_eq!(pass.embeddings, x.to_rows());
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = ModelConfig {
            encoder: EncoderKind::RandomProjection,
            embedding_dim: 5,
            encoder_seed: 9,
            ..small_config(7, 4)
        };
        let a = SpeciesModel::new(&cfg, &mut SeededRng::new(3)).unwrap();
        let b = SpeciesModel::new(&cfg, &mut SeededRng::new(3)).unwrap();
        let x = random_matrix(&mut SeededRng::new(4), 6, 7);
        let pa = a.forward(&x).unwrap();
        let pb = b.forward(&x).unwrap();
        assert_eq!(pa.preds, pb.preds);
        assert_eq!(pa.embeddings, pb.embeddings);
        for z in &pa.embeddings {
            assert!((norm(z) - 1.0).abs() < 1e-12);
        }
        assert!(matches!(
            a.forward(&random_matrix(&mut SeededRng::new(4), 2, 3)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn backward_needs_cache() {
        let model = SpeciesModel::new(&small_config(3, 2), &mut SeededRng::new(0)).unwrap();
        let pass = model
            .predict(&random_matrix(&mut SeededRng::new(1), 2, 3))
            .unwrap();
        let g = vec![vec![0.0; 2]; 2];
        assert!(matches!(
            model.backward(&pass, &g, None),
            Err(Error::MissingForwardCache)
        ));
    }

    fn combined_value(model: &SpeciesModel, x: &Matrix, y: &[Vec<f64>], cfg: &ContrastiveConfig) -> f64 {
        let pass = model.predict(x).unwrap();
        combined_loss(y, &pass.preds, &pass.embeddings, cfg)
            .unwrap()
            .total
            .value
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = SeededRng::new(17);
        for trial in 0..6 {
            let (n, d, s) = (2 + trial, 3 + trial % 3, 3 + trial);
            let mut cfg_model = small_config(d, s);
            cfg_model.adapter = trial % 2 == 0;
            let mut model = SpeciesModel::new(&cfg_model, &mut rng).unwrap();
            // zero-initialised biases can put a pre-activation exactly on the ReLU kink
            let jittered: Vec<f64> = model
                .flat_parameters()
                .iter()
                .map(|p| p + rng.random_range(-0.1..0.1))
                .collect();
            model.set_flat_parameters(&jittered).unwrap();
            let x = random_matrix(&mut rng, n, d);
            let y = random_labels(&mut rng, n, s);
            let cfg = ContrastiveConfig {
                k: 2,
                tau: 0.5,
                alpha: 0.7,
                soft_label_source: SoftLabelSource::LabelCosineSquared,
            };
            let pass = model.forward(&x).unwrap();
            let out = combined_loss(&y, &pass.preds, &pass.embeddings, &cfg).unwrap();
            let analytic = model
                .backward(
                    &pass,
                    out.total.grad_predictions.as_ref().unwrap(),
                    out.total.grad_embeddings.as_deref(),
                )
                .unwrap()
                .flatten();
            let mut probe = model.clone();
            let numeric = finite_diff_grad(
                |theta| {
                    probe.set_flat_parameters(theta).unwrap();
                    combined_value(&probe, &x, &y, &cfg)
                },
                &model.flat_parameters(),
                FD_STEP,
            );
            for (idx, (a, b)) in analytic.iter().zip(&numeric).enumerate() {
                let err = (a - b).abs();
                assert!(
                    err <= 1e-8 || err <= 1e-5 * a.abs().max(b.abs()),
                    "trial {trial} param {idx}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn alpha_zero_contributes_nothing() {
        let mut rng = SeededRng::new(2);
        let model = SpeciesModel::new(&small_config(4, 3), &mut rng).unwrap();
        let x = random_matrix(&mut rng, 5, 4);
        let y = random_labels(&mut rng, 5, 3);
        let pass = model.forward(&x).unwrap();
        let cfg = ContrastiveConfig {
            alpha: 0.0,
            ..Default::default()
        };
        let out = combined_loss(&y, &pass.preds, &pass.embeddings, &cfg).unwrap();
        let with = model
            .backward(
                &pass,
                out.total.grad_predictions.as_ref().unwrap(),
                out.total.grad_embeddings.as_deref(),
            )
            .unwrap();
        let bce = bce_loss(&y, &pass.preds).unwrap();
        let without = model
            .backward(&pass, bce.grad_predictions.as_ref().unwrap(), None)
            .unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn adam_examples() {
        let mut adam = AdamState::new(0.01, &[2]);
        let mut p = vec![1.0, -2.0];
        adam.update(&mut [&mut p[..]], &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);

        let mut frozen = AdamState::new(0.0, &[2]);
        frozen.update(&mut [&mut p[..]], &[vec![0.3, -1.0]]).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);

        // constant gradient: every step moves each parameter by ~lr
        let lr = 1e-3;
        let mut adam = AdamState::new(lr, &[3]);
        let mut q = vec![0.0; 3];
        let g = vec![vec![0.5, -2.0, 1e-3]];
        for _ in 0..1000 {
            let before = q.clone();
            adam.update(&mut [&mut q[..]], &g).unwrap();
            for (a, b) in q.iter().zip(&before) {
                assert!(((a - b).abs() - lr).abs() <= 0.05 * lr);
            }
        }

        let run = || {
            let mut adam = AdamState::new(0.1, &[2]);
            let mut p = vec![0.2, 0.4];
            for i in 0..20 {
                let g = vec![vec![(i as f64).sin(), (i as f64).cos()]];
                adam.update(&mut [&mut p[..]], &g).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
        assert!(AdamState::new(0.1, &[2])
            .update(&mut [&mut p[..1]], &[vec![0.0]])
            .is_err());
    }

    fn toy_splits(seed: u64) -> (DataSplit, DataSplit) {
        // labels are a smooth function of the features, so the task is learnable
        let mut rng = SeededRng::new(seed);
        let make = |rng: &mut SeededRng, n: usize| {
            let x = random_matrix(rng, n, 4);
            let y = x
                .iter_rows()
                .map(|r| {
                    vec![
                        sigmoid(3.0 * r[0]),
                        sigmoid(-3.0 * r[1]),
                        sigmoid(2.0 * (r[2] - r[3])),
                    ]
                })
                .collect();
            DataSplit::new((0..n).map(|i| format!("loc{i}")).collect(), x, y).unwrap()
        };
        (make(&mut rng, 40), make(&mut rng, 12))
    }

    #[test]
    fn fit_examples() {
        let (train, val) = toy_splits(0);
        let cfg = small_config(4, 3);
        let loss = ContrastiveConfig {
            alpha: 0.1,
            k: 2,
            ..Default::default()
        };

        let zero = TrainConfig {
            epochs: 0,
            batch_size: 8,
            ..Default::default()
        };
        let out = fit(&cfg, &train, &val, &zero, &loss).unwrap();
        let init = SpeciesModel::new(&cfg, &mut SeededRng::new(0).fork(0)).unwrap();
        assert_eq!(out.model, init);
        assert_eq!(out.report.best_epoch, 0);

        let tc = TrainConfig {
            epochs: 50,
            batch_size: 8,
            learning_rate: 1e-2,
            patience: None,
            ..Default::default()
        };
        let a = fit(&cfg, &train, &val, &tc, &loss).unwrap();
        let last = a.report.epochs.last().unwrap();
        assert!(last.train_bce < a.report.epochs[0].train_bce);
        let best = a.report.epochs[a.report.best_epoch].val_loss;
        assert!(a.report.epochs.iter().all(|e| best <= e.val_loss));

        let b = fit(&cfg, &train, &val, &tc, &loss).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn fit_keeps_encoder_frozen() {
        let (train, val) = toy_splits(1);
        let cfg = ModelConfig {
            encoder: EncoderKind::RandomProjection,
            embedding_dim: 5,
            encoder_seed: 4,
            ..small_config(4, 3)
        };
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 8,
            ..Default::default()
        };
        let out = fit(&cfg, &train, &val, &tc, &ContrastiveConfig::default()).unwrap();
        assert_eq!(out.model.encoder, FrozenEncoder::random_projection(4, 5, 4));
    }

    #[test]
    fn fit_with_pairs_ignores_contrastive_term() {
        let (train, val) = toy_splits(2);
        let (train, val) = (train.subset(&[0, 1]), val.subset(&[0, 1]));
        let cfg = small_config(4, 3);
        let tc = TrainConfig {
            epochs: 5,
            batch_size: 2,
            ..Default::default()
        };
        let off = fit(
            &cfg,
            &train,
            &val,
            &tc,
            &ContrastiveConfig {
                alpha: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        let on = fit(
            &cfg,
            &train,
            &val,
            &tc,
            &ContrastiveConfig {
                alpha: 0.5,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(off.report.epochs, on.report.epochs);
        assert_eq!(off.model, on.model);
    }

    #[test]
    fn fit_rejects_empty_splits() {
        let (train, val) = toy_splits(3);
        let empty = train.subset(&[]);
        let tc = TrainConfig::default();
        let cfg = small_config(4, 3);
        let loss = ContrastiveConfig::default();
        assert!(matches!(
            fit(&cfg, &empty, &val, &tc, &loss),
            Err(Error::EmptySplit(_))
        ));
        assert!(matches!(
            fit(&cfg, &train, &empty, &tc, &loss),
            Err(Error::EmptySplit(_))
        ));
    }

    #[test]
    fn mean_rate_examples() {
        let m = MeanRateModel::fit(&[vec![0.2, 0.6], vec![0.4, 0.8]]).unwrap();
        assert!((m.rates[0] - 0.3).abs() < 1e-15 && (m.rates[1] - 0.7).abs() < 1e-15);
        let m = MeanRateModel::fit(&[vec![0.1, 0.9]]).unwrap();
        assert_eq!(m.rates, vec![0.1, 0.9]);
        let preds = m.predict(4);
        assert!(preds.iter().all(|p| p == &m.rates));
        let empty: [Vec<f64>; 0] = [];
        assert!(matches!(MeanRateModel::fit(&empty), Err(Error::EmptySplit(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let (train, val) = toy_splits(4);
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 16,
            ..Default::default()
        };
        let out = fit(
            &small_config(4, 3),
            &train,
            &val,
            &tc,
            &ContrastiveConfig::default(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        Checkpoint::new(
            out.model.clone(),
            Some(out.optimizer.clone()),
            Some(out.rng.clone()),
        )
        .save(&path)
        .unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.model, out.model);
        assert_eq!(back.optimizer.as_ref(), Some(&out.optimizer));
        assert_eq!(back.rng.as_ref(), Some(&out.rng));
    }
}
