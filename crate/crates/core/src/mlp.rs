//! From-scratch dense feed-forward classifier with backpropagation.
//!
//! Hidden layers use ReLU; the output layer is softmax over the class count,
//! folded into the cross-entropy loss for numerical stability. Layers carry
//! a per-layer trainable flag: frozen layers keep propagating activations
//! and deltas but never receive parameter updates, which is what makes
//! output-layer-only transfer learning cheap.
//!
//! Training is single-threaded and every random draw is seeded, so a fit is
//! bitwise reproducible. Forward passes on an immutable model are safe to
//! run concurrently.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{fit_scaler, ByteReader, Scaler};
use crate::error::{Error, Result};
use crate::linalg::{gemm_nn, gemm_nt, gemm_tn, GemmScratch, Real};
use crate::seeding::derive_seed_indexed;
use crate::spectral::SpectralDataset;

/// Hidden-layer widths of the reference architecture; the input width and
/// class count complete the layer list.
pub const DEFAULT_HIDDEN_DIMS: [usize; 5] = [1400, 800, 500, 200, 100];

/// Layer dimensions `[input, hidden.., classes]` of the reference
/// architecture for a given input width and class count.
pub fn default_dims(input_width: usize, n_classes: usize) -> Vec<usize> {
    let mut dims = Vec::with_capacity(DEFAULT_HIDDEN_DIMS.len() + 2);
    dims.push(input_width);
    dims.extend_from_slice(&DEFAULT_HIDDEN_DIMS);
    dims.push(n_classes);
    dims
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam {
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
    Sgd {
        learning_rate: f64,
    },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Training-loop parameters. Defaults: 30 epochs, batch 128, Adam, per-epoch
/// reshuffling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub shuffle_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 128,
            optimizer: OptimizerKind::default(),
            seed: 0,
            shuffle_each_epoch: true,
        }
    }
}

/// What a fit did: per-epoch training loss and validation accuracy, wall
/// time, and the parameter accounting under the model's trainable mask.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub epoch_val_accuracy: Vec<f64>,
    pub wall_time_seconds: f64,
    pub trainable_params: usize,
    pub total_params: usize,
}

/// Per-layer parameter gradients for the trainable layers.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// One entry per layer; `None` for frozen layers.
    pub layers: Vec<Option<LayerGradient>>,
}

#[derive(Debug, Clone)]
pub struct LayerGradient {
    /// `dims[l] x dims[l+1]` row-major, same layout as the weights.
    pub weights: Vec<f32>,
    pub biases: Vec<f32>,
}

// --- generic network core ---------------------------------------------------

/// Raw network parameters, generic over the scalar type so the
/// finite-difference oracle can run the same code at `f64`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct NetParams<T> {
    pub(crate) dims: Vec<usize>,
    /// Per layer, `dims[l] x dims[l+1]` row-major.
    pub(crate) weights: Vec<Vec<T>>,
    pub(crate) biases: Vec<Vec<T>>,
}

pub(crate) struct Scratch<T> {
    acts: Vec<Vec<T>>,
    delta_cur: Vec<T>,
    delta_next: Vec<T>,
    gemm: GemmScratch<T>,
    batch_cap: usize,
}

impl<T: Real> Scratch<T> {
    pub(crate) fn new(dims: &[usize], batch_cap: usize) -> Self {
        let max_dim = *dims.iter().max().unwrap();
        Scratch {
            acts: dims[1..].iter().map(|&d| vec![T::zero(); batch_cap * d]).collect(),
            delta_cur: vec![T::zero(); batch_cap * max_dim],
            delta_next: vec![T::zero(); batch_cap * max_dim],
            gemm: GemmScratch::new(),
            batch_cap,
        }
    }
}

pub(crate) struct RawGrads<T> {
    weights: Vec<Vec<T>>,
    biases: Vec<Vec<T>>,
}

impl<T: Real> RawGrads<T> {
    pub(crate) fn new(dims: &[usize], trainable: &[bool]) -> Self {
        let weights = trainable
            .iter()
            .enumerate()
            .map(|(l, &t)| if t { vec![T::zero(); dims[l] * dims[l + 1]] } else { Vec::new() })
            .collect();
        let biases = trainable
            .iter()
            .enumerate()
            .map(|(l, &t)| if t { vec![T::zero(); dims[l + 1]] } else { Vec::new() })
            .collect();
        RawGrads { weights, biases }
    }
}

impl<T: Real> NetParams<T> {
    /// He-initialized network: weights from N(0, 2 / fan_in), biases zero.
    /// Each layer draws from its own derived seed so partially rebuilding a
    /// network reproduces exactly what full initialization would have given.
    pub(crate) fn he_init(dims: &[usize], seed: u64) -> Self {
        let n_layers = dims.len() - 1;
        let mut weights = Vec::with_capacity(n_layers);
        let mut biases = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            weights.push(he_layer_weights(dims, l, seed));
            biases.push(vec![T::zero(); dims[l + 1]]);
        }
        NetParams {
            dims: dims.to_vec(),
            weights,
            biases,
        }
    }

    pub(crate) fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    /// Forward from `first_layer` with `input` as that layer's activations.
    /// Fills `scratch.acts[first_layer..]`; the last entry holds raw logits.
    pub(crate) fn forward(
        &self,
        first_layer: usize,
        input: &[T],
        batch: usize,
        scratch: &mut Scratch<T>,
    ) {
        debug_assert!(batch <= scratch.batch_cap);
        let n_layers = self.n_layers();
        for l in first_layer..n_layers {
            let (before, after) = scratch.acts.split_at_mut(l);
            let in_buf: &[T] = if l == first_layer {
                input
            } else {
                &before[l - 1][..batch * self.dims[l]]
            };
            let out = &mut after[0][..batch * self.dims[l + 1]];
            let width = self.dims[l + 1];
            for row in out.chunks_exact_mut(width) {
                row.copy_from_slice(&self.biases[l]);
            }
            gemm_nn(
                in_buf,
                &self.weights[l],
                out,
                batch,
                self.dims[l],
                width,
                &mut scratch.gemm,
            );
            if l + 1 < n_layers {
                for v in out.iter_mut() {
                    if *v < T::zero() {
                        *v = T::zero();
                    }
                }
            }
        }
    }

    /// Mean cross-entropy loss over the batch plus parameter gradients for
    /// the trainable layers. Deltas propagate down to the lowest trainable
    /// layer and stop there.
    pub(crate) fn loss_and_grads(
        &self,
        first_layer: usize,
        input: &[T],
        batch: usize,
        labels: &[u32],
        trainable: &[bool],
        grads: &mut RawGrads<T>,
        scratch: &mut Scratch<T>,
    ) -> f64 {
        debug_assert_eq!(labels.len(), batch);
        let n_layers = self.n_layers();
        let classes = *self.dims.last().unwrap();
        self.forward(first_layer, input, batch, scratch);

        // Softmax delta and loss from the raw logits, with max subtraction.
        let inv_batch = T::from_usize(batch).unwrap().recip();
        let mut loss = 0.0f64;
        {
            let logits = &scratch.acts[n_layers - 1][..batch * classes];
            let delta = &mut scratch.delta_cur[..batch * classes];
            for (b, (lrow, drow)) in logits
                .chunks_exact(classes)
                .zip(delta.chunks_exact_mut(classes))
                .enumerate()
            {
                let max = lrow.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let mut z = T::zero();
                for (d, &v) in drow.iter_mut().zip(lrow) {
                    let e = (v - max).exp();
                    *d = e;
                    z = z + e;
                }
                let y = labels[b] as usize;
                loss += (z.ln() - (lrow[y] - max)).to_f64().unwrap();
                let inv_z = z.recip();
                for d in drow.iter_mut() {
                    *d = *d * inv_z * inv_batch;
                }
                drow[y] = drow[y] - inv_batch;
            }
        }

        let lowest_trainable = trainable.iter().position(|&t| t).unwrap_or(n_layers);
        for l in (first_layer..n_layers).rev() {
            if l < lowest_trainable {
                break;
            }
            let in_dim = self.dims[l];
            let out_dim = self.dims[l + 1];
            let prev: &[T] = if l == first_layer {
                input
            } else {
                &scratch.acts[l - 1][..batch * in_dim]
            };
            if trainable[l] {
                let gw = &mut grads.weights[l];
                gw.iter_mut().for_each(|g| *g = T::zero());
                gemm_tn(
                    prev,
                    &scratch.delta_cur[..batch * out_dim],
                    gw,
                    in_dim,
                    batch,
                    out_dim,
                    &mut scratch.gemm,
                );
                let gb = &mut grads.biases[l];
                gb.iter_mut().for_each(|g| *g = T::zero());
                for drow in scratch.delta_cur[..batch * out_dim].chunks_exact(out_dim) {
                    for (g, &d) in gb.iter_mut().zip(drow) {
                        *g += d;
                    }
                }
            }
            if l > first_layer && l > lowest_trainable {
                // delta_prev = delta * W^T, masked by ReLU'(activation).
                scratch.delta_next[..batch * in_dim]
                    .iter_mut()
                    .for_each(|d| *d = T::zero());
                gemm_nt(
                    &scratch.delta_cur[..batch * out_dim],
                    &self.weights[l],
                    &mut scratch.delta_next[..batch * in_dim],
                    batch,
                    out_dim,
                    in_dim,
                    &mut scratch.gemm,
                );
                let prev_act = &scratch.acts[l - 1][..batch * in_dim];
                for (d, &a) in scratch.delta_next[..batch * in_dim].iter_mut().zip(prev_act) {
                    if a <= T::zero() {
                        *d = T::zero();
                    }
                }
                std::mem::swap(&mut scratch.delta_cur, &mut scratch.delta_next);
            }
        }

        loss / batch as f64
    }
}

fn he_layer_weights<T: Real>(dims: &[usize], layer: usize, seed: u64) -> Vec<T> {
    let fan_in = dims[layer];
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("std is positive and finite");
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(seed, "layer", layer as u64));
    (0..dims[layer] * dims[layer + 1])
        .map(|_| T::from_f64(normal.sample(&mut rng)).unwrap())
        .collect()
}

struct AdamState<T> {
    m_w: Vec<Vec<T>>,
    v_w: Vec<Vec<T>>,
    m_b: Vec<Vec<T>>,
    v_b: Vec<Vec<T>>,
    step: u64,
}

impl<T: Real> AdamState<T> {
    fn new(dims: &[usize], trainable: &[bool]) -> Self {
        let zero_like = |per_w: bool| -> Vec<Vec<T>> {
            trainable
                .iter()
                .enumerate()
                .map(|(l, &t)| {
                    if t {
                        let len = if per_w { dims[l] * dims[l + 1] } else { dims[l + 1] };
                        vec![T::zero(); len]
                    } else {
                        Vec::new()
                    }
                })
                .collect()
        };
        AdamState {
            m_w: zero_like(true),
            v_w: zero_like(true),
            m_b: zero_like(false),
            v_b: zero_like(false),
            step: 0,
        }
    }
}

fn adam_update<T: Real>(
    params: &mut [T],
    grads: &[T],
    m: &mut [T],
    v: &mut [T],
    lr: T,
    beta1: T,
    beta2: T,
    epsilon: T,
    bias1: T,
    bias2: T,
) {
    let one = T::one();
    for (((p, &g), mm), vv) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        *mm = beta1 * *mm + (one - beta1) * g;
        *vv = beta2 * *vv + (one - beta2) * g * g;
        let m_hat = *mm * bias1;
        let v_hat = *vv * bias2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + epsilon);
    }
}

fn sgd_update<T: Real>(params: &mut [T], grads: &[T], lr: T) {
    for (p, &g) in params.iter_mut().zip(grads) {
        *p = *p - lr * g;
    }
}

// --- public model -----------------------------------------------------------

/// Dense feed-forward classifier with a per-layer trainable mask and the
/// feature scaler it was fitted with.
///
/// All entry points take raw (unstandardized) features; the model applies
/// its own scaler. The scaler travels with the model, so evaluating or
/// transferring onto another device's data always normalizes that data the
/// way this model's training data was normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    net: NetParams<f32>,
    trainable: Vec<bool>,
    scaler: Scaler,
    class_names: Vec<String>,
    seed: u64,
}

/// Builds an untrained model with He-initialized weights, zero biases, an
/// identity scaler, and every layer trainable.
pub fn new_model(dims: &[usize], seed: u64) -> Result<MlpModel> {
    if dims.len() < 2 {
        return Err(Error::Argument(format!(
            "a model needs at least input and output dims, got {dims:?}"
        )));
    }
    if let Some(&bad) = dims.iter().find(|&&d| d == 0) {
        return Err(Error::Argument(format!("layer dim must be positive, got {bad}")));
    }
    let n_layers = dims.len() - 1;
    Ok(MlpModel {
        net: NetParams::he_init(dims, seed),
        trainable: vec![true; n_layers],
        scaler: Scaler::identity(dims[0]),
        class_names: Vec::new(),
        seed,
    })
}

const PREDICT_CHUNK: usize = 512;
/// Prefix activations are cached during transfer fits only while they fit
/// in a modest memory budget (elements, not bytes).
const PREFIX_CACHE_MAX_ELEMS: usize = 1 << 26;

impl MlpModel {
    pub fn dims(&self) -> &[usize] {
        &self.net.dims
    }

    pub fn n_layers(&self) -> usize {
        self.net.n_layers()
    }

    pub fn input_width(&self) -> usize {
        self.net.dims[0]
    }

    pub fn n_classes(&self) -> usize {
        *self.net.dims.last().unwrap()
    }

    pub fn trainable(&self) -> &[bool] {
        &self.trainable
    }

    pub fn set_trainable(&mut self, mask: Vec<bool>) -> Result<()> {
        if mask.len() != self.n_layers() {
            return Err(Error::Argument(format!(
                "trainable mask has {} entries for {} layers",
                mask.len(),
                self.n_layers()
            )));
        }
        self.trainable = mask;
        Ok(())
    }

    pub fn scaler(&self) -> &Scaler {
        &self.scaler
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub(crate) fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }

    #[cfg(test)]
    pub(crate) fn net(&self) -> &NetParams<f32> {
        &self.net
    }

    #[cfg(test)]
    pub(crate) fn net_mut(&mut self) -> &mut NetParams<f32> {
        &mut self.net
    }

    #[cfg(test)]
    pub(crate) fn set_class_names(&mut self, names: Vec<String>) {
        self.class_names = names;
    }

    /// Rebuilds one layer with fresh He-initialized weights and zero biases,
    /// optionally changing its output width (only valid for the last layer).
    pub(crate) fn reinit_layer(&mut self, layer: usize, out_dim: usize) {
        let n_layers = self.n_layers();
        assert!(layer < n_layers);
        assert!(out_dim == self.net.dims[layer + 1] || layer == n_layers - 1);
        self.net.dims[layer + 1] = out_dim;
        self.net.weights[layer] = he_layer_weights(&self.net.dims, layer, self.seed);
        self.net.biases[layer] = vec![0.0; out_dim];
    }

    /// Per-layer parameter counts: `dims[l] * dims[l+1] + dims[l+1]`.
    pub fn layer_param_counts(&self) -> Vec<usize> {
        (0..self.n_layers())
            .map(|l| self.net.dims[l] * self.net.dims[l + 1] + self.net.dims[l + 1])
            .collect()
    }

    /// `(trainable, total)` parameter counts under the current mask.
    pub fn count_params(&self) -> (usize, usize) {
        let counts = self.layer_param_counts();
        let total = counts.iter().sum();
        let trainable = counts
            .iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|(c, _)| c)
            .sum();
        (trainable, total)
    }

    fn check_width(&self, width: usize) -> Result<()> {
        if width != self.input_width() {
            return Err(Error::Shape(format!(
                "input width {width} does not match model input dim {}",
                self.input_width()
            )));
        }
        Ok(())
    }

    fn scale_rows(&self, features: &[f32]) -> Vec<f32> {
        let width = self.input_width();
        let mut out = vec![0.0f32; features.len()];
        for (o, row) in out.chunks_exact_mut(width).zip(features.chunks_exact(width)) {
            self.scaler.apply_row(row, o);
        }
        out
    }

    /// Class probabilities for a batch of raw feature rows
    /// (`batch x input_width`, row-major). Softmax is computed with max
    /// subtraction; each output row sums to 1.
    pub fn forward(&self, features: &[f32]) -> Result<Vec<f32>> {
        let width = self.input_width();
        if features.is_empty() || features.len() % width != 0 {
            return Err(Error::Shape(format!(
                "feature buffer of {} values is not a whole number of {width}-wide rows",
                features.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite value in input features".into()));
        }
        let batch = features.len() / width;
        let scaled = self.scale_rows(features);
        let classes = self.n_classes();
        let mut scratch = Scratch::new(&self.net.dims, batch.min(PREDICT_CHUNK));
        let mut probs = Vec::with_capacity(batch * classes);
        for (chunk_rows, chunk) in scaled
            .chunks(PREDICT_CHUNK * width)
            .map(|c| (c.len() / width, c))
        {
            self.net.forward(0, chunk, chunk_rows, &mut scratch);
            let logits = &scratch.acts[self.n_layers() - 1][..chunk_rows * classes];
            for lrow in logits.chunks_exact(classes) {
                let max = lrow.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
                let exps: Vec<f32> = lrow.iter().map(|&v| (v - max).exp()).collect();
                let z: f32 = exps.iter().sum();
                probs.extend(exps.iter().map(|&e| e / z));
            }
        }
        Ok(probs)
    }

    /// Mean sparse cross-entropy loss over the batch and the parameter
    /// gradients of the trainable layers. Frozen layers participate in the
    /// backward flow but report no gradients.
    pub fn loss_and_grads(&self, features: &[f32], labels: &[u32]) -> Result<(f64, Gradients)> {
        let width = self.input_width();
        if features.is_empty() || features.len() % width != 0 {
            return Err(Error::Shape(format!(
                "feature buffer of {} values is not a whole number of {width}-wide rows",
                features.len()
            )));
        }
        let batch = features.len() / width;
        if labels.len() != batch {
            return Err(Error::Shape(format!(
                "{} labels for {batch} feature rows",
                labels.len()
            )));
        }
        let classes = self.n_classes() as u32;
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite value in input features".into()));
        }

        let scaled = self.scale_rows(features);
        let mut scratch = Scratch::new(&self.net.dims, batch);
        let mut raw = RawGrads::new(&self.net.dims, &self.trainable);
        let loss = self.net.loss_and_grads(
            0,
            &scaled,
            batch,
            labels,
            &self.trainable,
            &mut raw,
            &mut scratch,
        );
        let layers = self
            .trainable
            .iter()
            .enumerate()
            .map(|(l, &t)| {
                t.then(|| LayerGradient {
                    weights: std::mem::take(&mut raw.weights[l]),
                    biases: std::mem::take(&mut raw.biases[l]),
                })
            })
            .collect();
        Ok((loss, Gradients { layers }))
    }

    /// Argmax class per row. Ties break toward the lower class index.
    pub fn predict(&self, ds: &SpectralDataset) -> Result<Vec<u32>> {
        self.check_width(ds.width())?;
        let scaled = self.scale_rows(ds.features());
        let mut scratch = Scratch::new(&self.net.dims, PREDICT_CHUNK.min(ds.rows().max(1)));
        Ok(self.predict_scaled(0, &scaled, ds.rows(), &mut scratch))
    }

    fn predict_scaled(
        &self,
        first_layer: usize,
        scaled: &[f32],
        rows: usize,
        scratch: &mut Scratch<f32>,
    ) -> Vec<u32> {
        let width = if rows == 0 { 0 } else { scaled.len() / rows };
        let classes = self.n_classes();
        let mut out = Vec::with_capacity(rows);
        let chunk_cap = scratch.batch_cap;
        for (chunk_rows, chunk) in scaled
            .chunks(chunk_cap * width.max(1))
            .map(|c| (c.len() / width.max(1), c))
        {
            self.net.forward(first_layer, chunk, chunk_rows, scratch);
            let logits = &scratch.acts[self.n_layers() - 1][..chunk_rows * classes];
            for lrow in logits.chunks_exact(classes) {
                let mut best = 0usize;
                for (j, &v) in lrow.iter().enumerate() {
                    if v > lrow[best] {
                        best = j;
                    }
                }
                out.push(best as u32);
            }
        }
        out
    }

    /// Trains the model on `train`, reporting validation accuracy per epoch.
    ///
    /// Fits the feature scaler on the training rows, adopts the dataset's
    /// class names, updates only trainable layers, and is deterministic for
    /// a given seed.
    pub fn fit(
        &mut self,
        train: &SpectralDataset,
        val: &SpectralDataset,
        config: &TrainConfig,
    ) -> Result<TrainReport> {
        if config.epochs == 0 {
            return Err(Error::Argument("training requires epochs >= 1".into()));
        }
        self.fit_inner(train, val, config, true)
    }

    /// Shared fit path; `refit_scaler = false` keeps the existing scaler
    /// (transfer learning) and permits zero epochs.
    pub(crate) fn fit_inner(
        &mut self,
        train: &SpectralDataset,
        val: &SpectralDataset,
        config: &TrainConfig,
        refit_scaler: bool,
    ) -> Result<TrainReport> {
        let started = Instant::now();
        if config.batch_size == 0 {
            return Err(Error::Argument("batch_size must be >= 1".into()));
        }
        if train.rows() == 0 {
            return Err(Error::Data("training set is empty".into()));
        }
        if val.rows() == 0 {
            return Err(Error::Data("validation set is empty".into()));
        }
        self.check_width(train.width())?;
        self.check_width(val.width())?;
        if train.n_classes() != self.n_classes() {
            return Err(Error::Contract(format!(
                "training set has {} classes, model outputs {}",
                train.n_classes(),
                self.n_classes()
            )));
        }
        if !self.trainable.iter().any(|&t| t) {
            return Err(Error::Contract("no trainable layers".into()));
        }

        if refit_scaler {
            self.scaler = fit_scaler(train)?;
        } else if self.scaler.width() != self.input_width() {
            return Err(Error::Shape("model scaler width does not match input".into()));
        }
        self.class_names = train.class_names().to_vec();

        let scaled_train = self.scale_rows(train.features());
        let scaled_val = self.scale_rows(val.features());

        // Layers below the lowest trainable one never change during this
        // fit, so their output can be computed once and reused every epoch
        // when it fits in the cache budget.
        let lowest_trainable = self.trainable.iter().position(|&t| t).unwrap();
        let cache_prefix = lowest_trainable > 0
            && (train.rows() + val.rows()) * self.net.dims[lowest_trainable]
                <= PREFIX_CACHE_MAX_ELEMS;
        let (first_layer, train_input, val_input) = if cache_prefix {
            let t = self.prefix_activations(lowest_trainable, &scaled_train, train.rows());
            let v = self.prefix_activations(lowest_trainable, &scaled_val, val.rows());
            (lowest_trainable, t, v)
        } else {
            (0, scaled_train, scaled_val)
        };
        let in_width = self.net.dims[first_layer];

        let batch_size = config.batch_size.min(train.rows());
        let mut scratch = Scratch::new(&self.net.dims, batch_size.max(PREDICT_CHUNK));
        let mut grads = RawGrads::new(&self.net.dims, &self.trainable);
        let mut adam = AdamState::<f32>::new(&self.net.dims, &self.trainable);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut order: Vec<usize> = (0..train.rows()).collect();
        let mut batch_feats = vec![0.0f32; batch_size * in_width];
        let mut batch_labels = vec![0u32; batch_size];

        let mut epoch_loss = Vec::with_capacity(config.epochs);
        let mut epoch_val_accuracy = Vec::with_capacity(config.epochs);

        for epoch in 0..config.epochs {
            if config.shuffle_each_epoch {
                order.shuffle(&mut rng);
            }
            let mut loss_sum = 0.0f64;
            for batch_idx in order.chunks(batch_size) {
                let bs = batch_idx.len();
                for (slot, &row) in batch_idx.iter().enumerate() {
                    batch_feats[slot * in_width..(slot + 1) * in_width]
                        .copy_from_slice(&train_input[row * in_width..(row + 1) * in_width]);
                    batch_labels[slot] = train.label(row);
                }
                let loss = self.net.loss_and_grads(
                    first_layer,
                    &batch_feats[..bs * in_width],
                    bs,
                    &batch_labels[..bs],
                    &self.trainable,
                    &mut grads,
                    &mut scratch,
                );
                loss_sum += loss * bs as f64;
                self.apply_update(&config.optimizer, &grads, &mut adam);
            }
            let mean_loss = loss_sum / train.rows() as f64;
            if !mean_loss.is_finite() {
                return Err(Error::Training {
                    epoch: epoch + 1,
                    detail: format!("loss became {mean_loss}"),
                });
            }
            epoch_loss.push(mean_loss);

            let predictions = self.predict_scaled(first_layer, &val_input, val.rows(), &mut scratch);
            let correct = predictions
                .iter()
                .zip(val.labels())
                .filter(|(p, l)| p == l)
                .count();
            epoch_val_accuracy.push(correct as f64 / val.rows() as f64);
        }

        let (trainable_params, total_params) = self.count_params();
        Ok(TrainReport {
            epoch_loss,
            epoch_val_accuracy,
            wall_time_seconds: started.elapsed().as_secs_f64().max(1e-9),
            trainable_params,
            total_params,
        })
    }

    fn prefix_activations(&self, prefix_layers: usize, scaled: &[f32], rows: usize) -> Vec<f32> {
        let out_width = self.net.dims[prefix_layers];
        let in_width = self.net.dims[0];
        let mut out = Vec::with_capacity(rows * out_width);
        let mut scratch = Scratch::new(&self.net.dims[..prefix_layers + 1], PREDICT_CHUNK.min(rows.max(1)));
        let prefix = NetParams {
            dims: self.net.dims[..prefix_layers + 1].to_vec(),
            weights: self.net.weights[..prefix_layers].to_vec(),
            biases: self.net.biases[..prefix_layers].to_vec(),
        };
        for (chunk_rows, chunk) in scaled
            .chunks(scratch.batch_cap * in_width)
            .map(|c| (c.len() / in_width, c))
        {
            prefix.forward(0, chunk, chunk_rows, &mut scratch);
            // forward() leaves the last layer of any net un-activated, so
            // apply this hidden layer's ReLU here, same form as in-place.
            let acts = &scratch.acts[prefix_layers - 1][..chunk_rows * out_width];
            out.extend(acts.iter().map(|&v| if v < 0.0 { 0.0 } else { v }));
        }
        out
    }

    fn apply_update(&mut self, optimizer: &OptimizerKind, grads: &RawGrads<f32>, adam: &mut AdamState<f32>) {
        match *optimizer {
            OptimizerKind::Adam {
                learning_rate,
                beta1,
                beta2,
                epsilon,
            } => {
                adam.step += 1;
                let t = adam.step as i32;
                let bias1 = (1.0 / (1.0 - beta1.powi(t))) as f32;
                let bias2 = (1.0 / (1.0 - beta2.powi(t))) as f32;
                for l in 0..self.n_layers() {
                    if !self.trainable[l] {
                        continue;
                    }
                    adam_update(
                        &mut self.net.weights[l],
                        &grads.weights[l],
                        &mut adam.m_w[l],
                        &mut adam.v_w[l],
                        learning_rate as f32,
                        beta1 as f32,
                        beta2 as f32,
                        epsilon as f32,
                        bias1,
                        bias2,
                    );
                    adam_update(
                        &mut self.net.biases[l],
                        &grads.biases[l],
                        &mut adam.m_b[l],
                        &mut adam.v_b[l],
                        learning_rate as f32,
                        beta1 as f32,
                        beta2 as f32,
                        epsilon as f32,
                        bias1,
                        bias2,
                    );
                }
            }
            OptimizerKind::Sgd { learning_rate } => {
                for l in 0..self.n_layers() {
                    if !self.trainable[l] {
                        continue;
                    }
                    sgd_update(&mut self.net.weights[l], &grads.weights[l], learning_rate as f32);
                    sgd_update(&mut self.net.biases[l], &grads.biases[l], learning_rate as f32);
                }
            }
        }
    }

    // --- EMNN container -----------------------------------------------------
    //
    // magic "EMNN", version u32, n_layers u32, dims (n_layers + 1) x u32,
    // per-layer trainable flag u8, per layer weights then biases as f32
    // row-major, scaler mean then std (input width each), class-name table
    // (u32 count, then u32 byte length + UTF-8 per name), all little-endian.

    /// Writes the model in the EMNN container format; [`MlpModel::load`]
    /// reproduces it bit-exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(EMNN_MAGIC);
        out.extend_from_slice(&EMNN_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n_layers() as u32).to_le_bytes());
        for &d in &self.net.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &t in &self.trainable {
            out.push(t as u8);
        }
        for l in 0..self.n_layers() {
            for &w in &self.net.weights[l] {
                out.extend_from_slice(&w.to_le_bytes());
            }
            for &b in &self.net.biases[l] {
                out.extend_from_slice(&b.to_le_bytes());
            }
        }
        for &m in self.scaler.mean() {
            out.extend_from_slice(&m.to_le_bytes());
        }
        for &s in self.scaler.std() {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.extend_from_slice(&(self.class_names.len() as u32).to_le_bytes());
        for name in &self.class_names {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads a model written by [`MlpModel::save`]. Corrupt or truncated
    /// files report the byte offset of the problem.
    pub fn load(path: &Path) -> Result<MlpModel> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = ByteReader::new(&bytes, path);
        if r.take(4)? != EMNN_MAGIC {
            return Err(Error::format(path, 0, "bad magic, expected EMNN"));
        }
        let version = r.u32()?;
        if version != EMNN_VERSION {
            return Err(Error::format(
                path,
                r.offset - 4,
                format!("unsupported EMNN version {version}"),
            ));
        }
        let n_layers = r.u32()? as usize;
        if n_layers == 0 {
            return Err(Error::format(path, r.offset - 4, "model has no layers"));
        }
        let mut dims = Vec::with_capacity(n_layers + 1);
        for _ in 0..=n_layers {
            let at = r.offset;
            let d = r.u32()? as usize;
            if d == 0 {
                return Err(Error::format(path, at, "zero layer dim"));
            }
            dims.push(d);
        }
        let mut trainable = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let at = r.offset;
            match r.u8()? {
                0 => trainable.push(false),
                1 => trainable.push(true),
                other => {
                    return Err(Error::format(
                        path,
                        at,
                        format!("trainable flag must be 0 or 1, got {other}"),
                    ))
                }
            }
        }
        let mut weights = Vec::with_capacity(n_layers);
        let mut biases = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let mut w = Vec::with_capacity(dims[l] * dims[l + 1]);
            for _ in 0..dims[l] * dims[l + 1] {
                w.push(r.f32()?);
            }
            let mut b = Vec::with_capacity(dims[l + 1]);
            for _ in 0..dims[l + 1] {
                b.push(r.f32()?);
            }
            weights.push(w);
            biases.push(b);
        }
        let mut mean = Vec::with_capacity(dims[0]);
        for _ in 0..dims[0] {
            mean.push(r.f32()?);
        }
        let mut std = Vec::with_capacity(dims[0]);
        for _ in 0..dims[0] {
            std.push(r.f32()?);
        }
        let n_names = r.u32()? as usize;
        if n_names != 0 && n_names != dims[n_layers] {
            return Err(Error::format(
                path,
                r.offset - 4,
                format!(
                    "class-name table has {n_names} entries for {} output classes",
                    dims[n_layers]
                ),
            ));
        }
        let mut class_names = Vec::with_capacity(n_names);
        for _ in 0..n_names {
            let len = r.u32()? as usize;
            let at = r.offset;
            let raw = r.take(len)?;
            let name = std::str::from_utf8(raw)
                .map_err(|e| Error::format(path, at, format!("class name is not UTF-8: {e}")))?;
            class_names.push(name.to_string());
        }
        r.expect_end()?;

        let scaler = Scaler::from_parts(mean, std)?;
        Ok(MlpModel {
            net: NetParams { dims, weights, biases },
            trainable,
            scaler,
            class_names,
            seed: 0,
        })
    }
}

const EMNN_MAGIC: &[u8; 4] = b"EMNN";
const EMNN_VERSION: u32 = 1;

pub mod gradient_check {
    //! Finite-difference verification of the analytic gradients.
    //!
    //! The oracle side is an independent, naive f64 forward pass and
    //! cross-entropy loss; central differences over it are compared against
    //! the backpropagated gradients from the same parameters. Models and
    //! batches whose hidden pre-activations sit within `KINK_MARGIN` of a
    //! ReLU kink are redrawn, since finite differences are meaningless
    //! across a kink.

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal, Uniform};

    use super::{NetParams, RawGrads, Scratch};
    use crate::seeding::derive_seed_indexed;

    const STEP: f64 = 1e-4;
    const KINK_MARGIN: f64 = 1e-2;
    const REL_FLOOR: f64 = 1e-3;

    /// Naive forward + mean cross-entropy, written independently of the
    /// production kernels.
    fn naive_loss(net: &NetParams<f64>, input: &[f64], batch: usize, labels: &[u32]) -> f64 {
        let n_layers = net.n_layers();
        let mut cur: Vec<f64> = input.to_vec();
        for l in 0..n_layers {
            let (d_in, d_out) = (net.dims[l], net.dims[l + 1]);
            let mut next = vec![0.0f64; batch * d_out];
            for b in 0..batch {
                for j in 0..d_out {
                    let mut z = net.biases[l][j];
                    for i in 0..d_in {
                        z += cur[b * d_in + i] * net.weights[l][i * d_out + j];
                    }
                    next[b * d_out + j] = if l + 1 < n_layers { z.max(0.0) } else { z };
                }
            }
            cur = next;
        }
        let classes = *net.dims.last().unwrap();
        let mut loss = 0.0;
        for b in 0..batch {
            let row = &cur[b * classes..(b + 1) * classes];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let z: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            loss += z.ln() - (row[labels[b] as usize] - max);
        }
        loss / batch as f64
    }

    /// Smallest |pre-activation| over all hidden units and samples.
    fn min_kink_distance(net: &NetParams<f64>, input: &[f64], batch: usize) -> f64 {
        let n_layers = net.n_layers();
        let mut cur: Vec<f64> = input.to_vec();
        let mut min_abs = f64::INFINITY;
        for l in 0..n_layers {
            let (d_in, d_out) = (net.dims[l], net.dims[l + 1]);
            let mut next = vec![0.0f64; batch * d_out];
            for b in 0..batch {
                for j in 0..d_out {
                    let mut z = net.biases[l][j];
                    for i in 0..d_in {
                        z += cur[b * d_in + i] * net.weights[l][i * d_out + j];
                    }
                    if l + 1 < n_layers {
                        min_abs = min_abs.min(z.abs());
                        next[b * d_out + j] = z.max(0.0);
                    } else {
                        next[b * d_out + j] = z;
                    }
                }
            }
            cur = next;
        }
        min_abs
    }

    /// Runs `n_cases` random model/batch pairs and returns the largest
    /// relative error between analytic and central finite-difference
    /// gradients (relative with an absolute floor of `1e-3`).
    pub fn max_relative_error(dims: &[usize], n_cases: usize, batch: usize, seed: u64) -> f64 {
        assert!(dims.len() >= 2);
        let classes = *dims.last().unwrap();
        let normal = Normal::new(0.0f64, 1.0).unwrap();
        let label_dist = Uniform::new(0u32, classes as u32).unwrap();
        let mut worst: f64 = 0.0;

        for case in 0..n_cases {
            // Redraw until all hidden pre-activations are clear of the
            // ReLU kink; a perturbation of STEP cannot cross it then.
            let (net, input, labels) = (0..)
                .map(|attempt| {
                    let s = derive_seed_indexed(seed, "gradcheck", (case * 1000 + attempt) as u64);
                    let net = NetParams::<f64>::he_init(dims, s);
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(s, "batch", 0));
                    let input: Vec<f64> =
                        (0..batch * dims[0]).map(|_| normal.sample(&mut rng)).collect();
                    let labels: Vec<u32> =
                        (0..batch).map(|_| label_dist.sample(&mut rng)).collect();
                    (net, input, labels)
                })
                .find(|(net, input, _)| min_kink_distance(net, input, batch) > KINK_MARGIN)
                .unwrap();

            let trainable = vec![true; net.n_layers()];
            let mut grads = RawGrads::new(&net.dims, &trainable);
            let mut scratch = Scratch::new(&net.dims, batch);
            let loss =
                net.loss_and_grads(0, &input, batch, &labels, &trainable, &mut grads, &mut scratch);

            // The independent forward pass must agree on the loss itself.
            let naive = naive_loss(&net, &input, batch, &labels);
            worst = worst.max((loss - naive).abs() / naive.abs().max(REL_FLOOR));

            let mut probe = net.clone();
            for l in 0..net.n_layers() {
                for idx in 0..probe.weights[l].len() {
                    let orig = probe.weights[l][idx];
                    probe.weights[l][idx] = orig + STEP;
                    let up = naive_loss(&probe, &input, batch, &labels);
                    probe.weights[l][idx] = orig - STEP;
                    let down = naive_loss(&probe, &input, batch, &labels);
                    probe.weights[l][idx] = orig;
                    let fd = (up - down) / (2.0 * STEP);
                    let analytic = grads.weights[l][idx];
                    let rel =
                        (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(REL_FLOOR);
                    worst = worst.max(rel);
                }
                for idx in 0..probe.biases[l].len() {
                    let orig = probe.biases[l][idx];
                    probe.biases[l][idx] = orig + STEP;
                    let up = naive_loss(&probe, &input, batch, &labels);
                    probe.biases[l][idx] = orig - STEP;
                    let down = naive_loss(&probe, &input, batch, &labels);
                    probe.biases[l][idx] = orig;
                    let fd = (up - down) / (2.0 * STEP);
                    let analytic = grads.biases[l][idx];
                    let rel =
                        (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(REL_FLOOR);
                    worst = worst.max(rel);
                }
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{SourceTag, SpectralDataset, StftConfig};

    fn dataset(
        rows: usize,
        width: usize,
        n_classes: usize,
        mut fill: impl FnMut(usize, usize) -> f32,
        label: impl Fn(usize) -> u32,
    ) -> SpectralDataset {
        let mut features = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for c in 0..width {
                features.push(fill(r, c));
            }
        }
        SpectralDataset::from_rows(
            width,
            features,
            (0..rows).map(label).collect(),
            (0..n_classes).map(|c| format!("class{c}")).collect(),
            SourceTag {
                device_id: "dev".into(),
                session_id: "s0".into(),
            },
            StftConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn default_ten_class_model_has_published_parameter_counts() {
        let model = new_model(&default_dims(2048, 10), 0).unwrap();
        assert_eq!(
            model.layer_param_counts(),
            vec![2_868_600, 1_120_800, 400_500, 100_200, 20_100, 1_010]
        );
        assert_eq!(model.count_params(), (4_511_210, 4_511_210));
    }

    #[test]
    fn three_class_final_layer_has_303_params() {
        let model = new_model(&default_dims(2048, 3), 0).unwrap();
        assert_eq!(*model.layer_param_counts().last().unwrap(), 303);
    }

    #[test]
    fn eight_class_final_layer_has_808_params() {
        let model = new_model(&default_dims(2048, 8), 0).unwrap();
        assert_eq!(*model.layer_param_counts().last().unwrap(), 808);
    }

    #[test]
    fn new_model_rejects_bad_dims() {
        assert!(matches!(new_model(&[5], 0), Err(Error::Argument(_))));
        assert!(matches!(new_model(&[5, 0, 2], 0), Err(Error::Argument(_))));
    }

    #[test]
    fn new_model_is_deterministic_per_seed() {
        let a = new_model(&[8, 4, 2], 7).unwrap();
        let b = new_model(&[8, 4, 2], 7).unwrap();
        let c = new_model(&[8, 4, 2], 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_weight_model_predicts_uniformly() {
        let mut model = new_model(&[4, 10], 0).unwrap();
        model.net.weights[0].iter_mut().for_each(|w| *w = 0.0);
        let probs = model.forward(&[1.0, -2.0, 0.5, 3.0]).unwrap();
        for &p in &probs {
            assert!((p - 0.1).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_rows_sum_to_one() {
        let model = new_model(&[6, 5, 3], 3).unwrap();
        let feats: Vec<f32> = (0..4 * 6).map(|i| (i as f32 * 0.37).sin()).collect();
        let probs = model.forward(&feats).unwrap();
        for row in probs.chunks(3) {
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-6);
            assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn hand_built_logits_give_quarter_three_quarter_split() {
        // One input fixed at 1.0; weights produce logits (ln 1, ln 3).
        let mut model = new_model(&[1, 2], 0).unwrap();
        model.net.weights[0] = vec![0.0, 3.0f32.ln()];
        model.net.biases[0] = vec![0.0, 0.0];
        let probs = model.forward(&[1.0]).unwrap();
        assert!((probs[0] - 0.25).abs() < 1e-6);
        assert!((probs[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let mut model = new_model(&[1, 3], 0).unwrap();
        model.net.weights[0] = vec![1e4, -1e4, 5e3];
        model.net.biases[0] = vec![0.0; 3];
        let probs = model.forward(&[1.0]).unwrap();
        let sum: f32 = probs.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-6);
        assert!(probs.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn forward_rejects_width_mismatch_and_non_finite() {
        let model = new_model(&[4, 2], 0).unwrap();
        assert!(matches!(model.forward(&[1.0; 6]), Err(Error::Shape(_))));
        assert!(matches!(
            model.forward(&[1.0, f32::NAN, 0.0, 0.0]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn uniform_prediction_loss_is_ln_k() {
        let mut model = new_model(&[4, 10], 0).unwrap();
        model.net.weights[0].iter_mut().for_each(|w| *w = 0.0);
        let feats: Vec<f32> = (0..3 * 4).map(|i| i as f32).collect();
        let (loss, _) = model.loss_and_grads(&feats, &[0, 5, 9]).unwrap();
        assert!((loss - 10.0f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn perfect_prediction_loss_is_tiny() {
        let mut model = new_model(&[1, 2], 0).unwrap();
        model.net.weights[0] = vec![50.0, -50.0];
        let (loss, _) = model.loss_and_grads(&[1.0], &[0]).unwrap();
        assert!(loss <= 1e-6, "loss {loss}");
    }

    #[test]
    fn out_of_range_label_is_a_data_error() {
        let model = new_model(&[2, 2], 0).unwrap();
        assert!(matches!(
            model.loss_and_grads(&[1.0, 2.0], &[2]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn gradients_match_finite_differences_on_small_model() {
        let worst = gradient_check::max_relative_error(&[4, 3, 2], 10, 6, 11);
        assert!(worst <= 1e-4, "max relative error {worst}");
    }

    #[test]
    fn frozen_layers_report_no_gradients() {
        let mut model = new_model(&[4, 3, 2], 1).unwrap();
        model.set_trainable(vec![false, true]).unwrap();
        let (_, grads) = model
            .loss_and_grads(&[0.1, 0.2, 0.3, 0.4], &[1])
            .unwrap();
        assert!(grads.layers[0].is_none());
        assert!(grads.layers[1].is_some());
    }

    fn toy_separable(rows: usize, seed: u64) -> SpectralDataset {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pending: Option<f32> = None;
        dataset(
            rows,
            4,
            2,
            move |_, c| match c {
                // First two features keep a margin so the decision boundary
                // is learnable to full accuracy in a short fit.
                0 => {
                    let a = rng.random_range(-1.0f32..1.0);
                    let gap: f32 = rng.random_range(0.05f32..1.0);
                    let sign = if rng.random_range(0.0f32..1.0) < 0.5 { 1.0 } else { -1.0 };
                    pending = Some(a + sign * gap);
                    a
                }
                1 => pending.take().unwrap(),
                _ => rng.random_range(-1.0f32..1.0),
            },
            |_| 0,
        )
        .relabel_argmax()
    }

    impl SpectralDataset {
        /// Test helper: label = argmax of the first two features.
        fn relabel_argmax(&self) -> SpectralDataset {
            let labels: Vec<u32> = (0..self.rows())
                .map(|r| {
                    let row = self.row(r);
                    u32::from(row[1] > row[0])
                })
                .collect();
            SpectralDataset::from_rows(
                self.width(),
                self.features().to_vec(),
                labels,
                self.class_names().to_vec(),
                self.provenance(0).clone(),
                *self.config(),
            )
            .unwrap()
        }
    }

    #[test]
    fn fit_learns_linearly_separable_toy_set() {
        let train = toy_separable(1500, 5);
        let val = toy_separable(300, 6);
        // The labeling rule itself classifies the data perfectly, so the
        // oracle accuracy on this set is exactly 1.0 by construction.
        let oracle_correct = (0..train.rows())
            .filter(|&r| {
                let row = train.row(r);
                u32::from(row[1] > row[0]) == train.label(r)
            })
            .count();
        assert_eq!(oracle_correct, train.rows());

        let mut model = new_model(&[4, 8, 2], 3).unwrap();
        model
            .fit(
                &train,
                &val,
                &TrainConfig { batch_size: 32, seed: 9, ..TrainConfig::default() },
            )
            .unwrap();
        let predictions = model.predict(&train).unwrap();
        let correct = predictions
            .iter()
            .zip(train.labels())
            .filter(|(p, l)| p == l)
            .count();
        let accuracy = correct as f64 / train.rows() as f64;
        assert!(accuracy >= 0.99, "train accuracy {accuracy}");
    }

    #[test]
    fn thirty_epochs_do_not_underperform_one() {
        let train = toy_separable(200, 15);
        let val = toy_separable(80, 16);
        let acc_of = |epochs: usize| {
            let mut model = new_model(&[4, 8, 2], 3).unwrap();
            let report = model
                .fit(
                    &train,
                    &val,
                    &TrainConfig { epochs, seed: 9, ..TrainConfig::default() },
                )
                .unwrap();
            *report.epoch_val_accuracy.last().unwrap()
        };
        assert!(acc_of(30) >= acc_of(1));
    }

    #[test]
    fn same_seed_same_data_identical_weights() {
        let train = toy_separable(120, 21);
        let val = toy_separable(40, 22);
        let config = TrainConfig { epochs: 3, seed: 4, ..TrainConfig::default() };
        let mut a = new_model(&[4, 8, 2], 3).unwrap();
        let mut b = new_model(&[4, 8, 2], 3).unwrap();
        a.fit(&train, &val, &config).unwrap();
        b.fit(&train, &val, &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fit_updates_only_trainable_layers() {
        let train = toy_separable(100, 31);
        let val = toy_separable(40, 32);
        let mut model = new_model(&[4, 8, 6, 2], 3).unwrap();
        let frozen_weights = model.net.weights[1].clone();
        let frozen_biases = model.net.biases[1].clone();
        model.set_trainable(vec![true, false, true]).unwrap();
        model
            .fit(&train, &val, &TrainConfig { epochs: 2, seed: 1, ..TrainConfig::default() })
            .unwrap();
        assert_eq!(model.net.weights[1], frozen_weights);
        assert_eq!(model.net.biases[1], frozen_biases);
        assert_ne!(model.net.weights[0], new_model(&[4, 8, 6, 2], 3).unwrap().net.weights[0]);
    }

    #[test]
    fn empty_train_set_is_a_data_error() {
        let val = toy_separable(10, 1);
        let empty = dataset(0, 4, 2, |_, _| 0.0, |_| 0);
        let mut model = new_model(&[4, 8, 2], 0).unwrap();
        assert!(matches!(
            model.fit(&empty, &val, &TrainConfig::default()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn divergence_names_the_epoch() {
        let train = toy_separable(50, 41);
        let val = toy_separable(20, 42);
        let mut model = new_model(&[4, 8, 2], 0).unwrap();
        // An absurd learning rate reliably overflows f32 logits.
        let config = TrainConfig {
            epochs: 10,
            optimizer: OptimizerKind::Sgd { learning_rate: 1e30 },
            seed: 0,
            ..TrainConfig::default()
        };
        match model.fit(&train, &val, &config) {
            Err(Error::Training { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected training error, got {other:?}"),
        }
    }

    #[test]
    fn save_load_round_trip_preserves_predictions_bitwise() {
        let train = toy_separable(150, 51);
        let val = toy_separable(50, 52);
        let mut model = new_model(&[4, 8, 2], 3).unwrap();
        model
            .fit(&train, &val, &TrainConfig { epochs: 3, seed: 2, ..TrainConfig::default() })
            .unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.emnn");
        model.save(&path).unwrap();
        let loaded = MlpModel::load(&path).unwrap();

        assert_eq!(loaded.net, model.net);
        assert_eq!(loaded.predict(&val).unwrap(), model.predict(&val).unwrap());

        // Saving the loaded model reproduces the file byte for byte.
        let path2 = dir.path().join("model2.emnn");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupt_model_file_reports_offset() {
        let model = new_model(&[4, 3, 2], 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.emnn");
        model.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&path, &bytes).unwrap();
        match MlpModel::load(&path) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn models_are_safely_shared_across_threads() {
        fn assert_send_sync<T: Send + Sync>() {}
        assert_send_sync::<MlpModel>();

        let train = toy_separable(120, 61);
        let val = toy_separable(40, 62);
        let mut model = new_model(&[4, 8, 2], 3).unwrap();
        model
            .fit(&train, &val, &TrainConfig { epochs: 2, seed: 1, ..TrainConfig::default() })
            .unwrap();
        let reference = model.predict(&val).unwrap();
        std::thread::scope(|scope| {
            for _ in 0..4 {
                scope.spawn(|| {
                    assert_eq!(model.predict(&val).unwrap(), reference);
                });
            }
        });
    }

    #[test]
    fn all_frozen_model_counts_zero_trainable() {
        let mut model = new_model(&default_dims(2048, 10), 0).unwrap();
        model.set_trainable(vec![false; 6]).unwrap();
        assert_eq!(model.count_params(), (0, 4_511_210));
    }

    #[test]
    fn output_only_mask_counts_published_split() {
        let mut model = new_model(&default_dims(2048, 10), 0).unwrap();
        let mut mask = vec![false; 6];
        mask[5] = true;
        model.set_trainable(mask).unwrap();
        let (trainable, total) = model.count_params();
        assert_eq!(trainable, 1_010);
        assert_eq!(total - trainable, 4_510_200);
    }
}
