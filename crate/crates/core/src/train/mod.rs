//! Hardware-in-the-loop training.
//!
//! Forward passes run through a [`MatmulEngine`]: the software model with
//! optional Gaussian output noise, or the simulated chip. Backward passes
//! always use the exact float product on the master weights, treating
//! quantization as identity. Softmax and cross-entropy run on the host.

mod checkpoint;
mod data;
mod har;
mod layer;
mod metrics;

pub use checkpoint::{load_checkpoint, save_checkpoint, MANIFEST};
pub use data::{load_har, load_split, write_har_split, Dataset, HarDataset, Normalizer, HAR_CHANNELS, HAR_CLASSES, HAR_STEPS};
pub use har::{har_model, run_chip_stage, run_har_experiment, ChipStage, HarConfig, HarReport};
pub use layer::{matmul_backward, matmul_forward, Layer, LayerKind, SavedState};
pub use metrics::{confusion_matrix, metrics_csv, ConfusionMatrix, MetricRow};

use rand::seq::SliceRandom;
use rand::RngCore;

use crate::chip::ChipConfig;
use crate::error::{Error, Result};
use crate::executor::{ExecOptions, Executor};
use crate::matmul::{ChipBackend, MatmulEngine, SoftwareModel};
use crate::perf::TimingModel;
use crate::quantize::{INPUT_MAX, OUTPUT_MAX};
use crate::rng::keyed;
use crate::tensor::Tensor;

const TAG_TRAIN: u64 = 0x7472_6169;
const TAG_EVAL: u64 = 0x6576_616c;
const TAG_SHUFFLE: u64 = 0x7368_7566;
const TAG_NOISE: u64 = 0x6e6f_6973;
const EVAL_BATCH: usize = 256;

pub enum Backend {
    /// Noiseless digital twin; `noise_lsb` is added to outputs while
    /// training.
    Software { model: SoftwareModel, noise_lsb: f32 },
    Chip(Box<ChipBackend>),
}

impl Backend {
    /// Software model with the gain and temporal noise level of `cfg`.
    pub fn software(cfg: &ChipConfig) -> Self {
        Backend::Software { model: SoftwareModel::new(cfg.gain), noise_lsb: cfg.sigma_temporal }
    }

    pub fn chip(cfg: ChipConfig, n_chips: usize, workers: Option<usize>) -> Result<Self> {
        let opts = ExecOptions { workers, ..ExecOptions::default() };
        let exec = Executor::standalone(n_chips, cfg, TimingModel::default(), opts)?;
        Ok(Backend::Chip(Box::new(ChipBackend::new(exec))))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Backend::Software { .. } => "software",
            Backend::Chip(_) => "chip",
        }
    }

    pub fn engine(&mut self) -> &mut dyn MatmulEngine {
        match self {
            Backend::Software { model, .. } => model,
            Backend::Chip(c) => c.as_mut(),
        }
    }

    fn train_noise(&self) -> f32 {
        match self {
            Backend::Software { noise_lsb, .. } => *noise_lsb,
            Backend::Chip(_) => 0.0,
        }
    }
}

/// Per-layer forward state.
struct Cache {
    saved: SavedState,
    w: Tensor,
    input_map: Vec<Option<usize>>,
    output_map: Vec<usize>,
    out: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub layers: Vec<Layer>,
    pub n_classes: usize,
    /// Float value of one input LSB for the first layer.
    pub input_scale: f32,
    pub normalizer: Option<Normalizer>,
}

fn softmax_ce(logits: &[f32], labels: &[usize], n: usize) -> (f64, Vec<f32>, Vec<usize>) {
    let b = labels.len();
    let mut loss = 0.0;
    let mut grad = vec![0f32; logits.len()];
    let mut preds = Vec::with_capacity(b);
    for (i, &t) in labels.iter().enumerate() {
        let z = &logits[i * n..(i + 1) * n];
        let m = z.iter().fold(f32::NEG_INFINITY, |a, &v| a.max(v)) as f64;
        let e: Vec<f64> = z.iter().map(|&v| (v as f64 - m).exp()).collect();
        let s: f64 = e.iter().sum();
        loss -= (e[t] / s).ln();
        for c in 0..n {
            grad[i * n + c] = ((e[c] / s - (c == t) as u8 as f64) / b as f64) as f32;
        }
        preds.push(argmax(z));
    }
    (loss / b as f64, grad, preds)
}

fn argmax(z: &[f32]) -> usize {
    z.iter().enumerate().fold(0, |best, (i, &v)| if v > z[best] { i } else { best })
}

impl Model {
    pub fn new(layers: Vec<Layer>, n_classes: usize) -> Result<Self> {
        let model = Model { layers, n_classes, input_scale: 1.0 / INPUT_MAX as f32, normalizer: None };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(last) = self.layers.last() else {
            return Err(Error::ShapeMismatch("a model needs at least one layer".into()));
        };
        if !matches!(last.kind, LayerKind::Dense { .. }) || last.output_len() != self.n_classes {
            return Err(Error::ShapeMismatch(format!("last layer must be dense with {} outputs", self.n_classes)));
        }
        for pair in self.layers.windows(2) {
            if pair[0].output_len() != pair[1].input_len() {
                return Err(Error::ShapeMismatch(format!(
                    "layer emits {} values, next expects {}",
                    pair[0].output_len(),
                    pair[1].input_len()
                )));
            }
        }
        for l in &self.layers {
            if l.weights.shape() != l.weight_shape().as_slice() {
                return Err(Error::ShapeMismatch(format!("weights {:?}, layer expects {:?}", l.weights.shape(), l.weight_shape())));
            }
            if let Some(j) = l.weights.as_f32()?.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteInput(j));
            }
        }
        Ok(())
    }

    fn forward(&self, x: &[f32], batch: usize, backend: &mut Backend, noisy: bool, key: &[u64]) -> Result<(Vec<f32>, Vec<Cache>)> {
        let mut h = x.to_vec();
        let mut in_s = self.input_scale;
        let mut caches = Vec::with_capacity(self.layers.len());
        let sigma = if noisy { backend.train_noise() } else { 0.0 };
        for (l, layer) in self.layers.iter().enumerate() {
            if h.len() != batch * layer.input_len() {
                return Err(Error::ShapeMismatch(format!("layer {l} expects {} values per sample", layer.input_len())));
            }
            let (shape, input_map) = layer.input_map(batch)?;
            let xm = Tensor::from_f32(shape.clone(), input_map.iter().map(|i| i.map_or(0.0, |i| h[i])).collect())?;
            let w = layer.weight_matrix()?;
            let engine = backend.engine();
            let spec = layer.quant_spec(in_s, engine.gain())?;
            let seed = keyed(&[key, &[l as u64]].concat()).next_u64();
            engine.set_run_seed(seed);
            let mut rng = keyed(&[seed, TAG_NOISE]);
            let noise = (sigma > 0.0).then_some((sigma, &mut rng));
            let (y, saved) = matmul_forward(engine, &xm, &w, &spec, layer.hw, noise)?;
            let output_map = layer.output_map(batch, shape[0], w.dim(1))?;
            let yv = y.as_f32()?;
            let mut out: Vec<f32> = output_map.iter().map(|&i| yv[i]).collect();
            if l + 1 < self.layers.len() {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = out.clone();
            in_s = spec.output_scale * OUTPUT_MAX as f32 / INPUT_MAX as f32;
            caches.push(Cache { saved, w, input_map, output_map, out });
        }
        Ok((h, caches))
    }

    fn backward(&self, caches: &[Cache], batch: usize, grad_logits: Vec<f32>) -> Result<Vec<Tensor>> {
        let mut grads = vec![None; self.layers.len()];
        let mut g_out = grad_logits;
        for (l, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            if l + 1 < self.layers.len() {
                for (g, &o) in g_out.iter_mut().zip(&cache.out) {
                    if o <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let (rows, cols) = (cache.saved.x.dim(0), cache.w.dim(1));
            let mut g_mat = vec![0f32; rows * cols];
            for (&i, &g) in cache.output_map.iter().zip(&g_out) {
                g_mat[i] += g;
            }
            let (gx, gw) = matmul_backward(&Tensor::from_f32(vec![rows, cols], g_mat)?, Some(&cache.saved), &cache.w)?;
            grads[l] = Some(layer.weight_grad(&gw)?);
            if l > 0 {
                let mut g_in = vec![0f32; batch * layer.input_len()];
                for (i, &g) in cache.input_map.iter().zip(gx.as_f32()?) {
                    if let Some(i) = i {
                        g_in[*i] += g;
                    }
                }
                g_out = g_in;
            }
        }
        Ok(grads.into_iter().map(|g| g.expect("every layer has a gradient")).collect())
    }

    /// Class scores for `[B, ...]` samples.
    pub fn logits(&self, x: &Tensor, backend: &mut Backend, key: &[u64]) -> Result<Tensor> {
        let batch = x.dim(0);
        let (z, _) = self.forward(x.as_f32()?, batch, backend, false, key)?;
        Tensor::from_f32(vec![batch, self.n_classes], z)
    }

    /// One SGD step; returns the loss and the predictions of the noisy
    /// forward pass.
    pub fn step(&mut self, batch: &Dataset, backend: &mut Backend, lr: f32, key: &[u64]) -> Result<(f64, Vec<usize>)> {
        let (z, caches) = self.forward(batch.x.as_f32()?, batch.len(), backend, true, key)?;
        let (loss, grad, preds) = softmax_ce(&z, &batch.labels, self.n_classes);
        if lr != 0.0 {
            let grads = self.backward(&caches, batch.len(), grad)?;
            for (layer, g) in self.layers.iter_mut().zip(grads) {
                let w: Vec<f32> = layer.weights.as_f32()?.iter().zip(g.as_f32()?).map(|(w, g)| w - lr * g).collect();
                layer.weights = Tensor::from_f32(layer.weights.shape().to_vec(), w)?;
            }
        }
        Ok((loss, preds))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

/// Noiseless for the software backend; the chip keeps its noise, keyed by
/// `seed`.
pub fn evaluate(model: &Model, data: &Dataset, backend: &mut Backend, seed: u64) -> Result<Evaluation> {
    let mut preds = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for (c, chunk) in idx.chunks(EVAL_BATCH).enumerate() {
        let part = data.select(chunk)?;
        let z = model.logits(&part.x, backend, &[seed, TAG_EVAL, c as u64])?;
        preds.extend(z.as_f32()?.chunks(model.n_classes).map(argmax));
    }
    let confusion = confusion_matrix(&preds, &data.labels, model.n_classes)?;
    Ok(Evaluation { accuracy: confusion.accuracy(), confusion })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Adds copies of the training data advanced by the first layer's
    /// stride, one per expansion copy.
    pub augment_stride_shift: bool,
    /// Number given to the first epoch; keeps noise keys distinct across
    /// consecutive calls.
    pub first_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 1, lr: 0.05, batch_size: 64, seed: 0, augment_stride_shift: false, first_epoch: 1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub test: Option<Evaluation>,
}

impl EpochMetrics {
    pub fn rows(&self) -> Vec<MetricRow> {
        let mut rows = vec![MetricRow { epoch: self.epoch, split: "train".into(), accuracy: self.train_accuracy }];
        if let Some(t) = &self.test {
            rows.push(MetricRow { epoch: self.epoch, split: "test".into(), accuracy: t.accuracy });
        }
        rows
    }
}

fn augment(model: &Model, data: &Dataset) -> Result<Dataset> {
    match model.layers.first().map(|l| &l.kind) {
        Some(LayerKind::Conv1d { spec, expansion: Some(plan), .. }) => data.stride_shifted(spec.stride[0], plan.copies),
        _ => Ok(data.clone()),
    }
}

/// Minibatch SGD with cross-entropy. `on_epoch` sees every epoch's
/// metrics as soon as they are available.
pub fn train_model(
    model: &mut Model,
    train: &Dataset,
    test: Option<&Dataset>,
    backend: &mut Backend,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    if cfg.batch_size == 0 || !cfg.lr.is_finite() {
        return Err(Error::InvalidConfig(format!("batch size {} and lr {}", cfg.batch_size, cfg.lr)));
    }
    let data = if cfg.augment_stride_shift { augment(model, train)? } else { train.clone() };
    let mut out = Vec::with_capacity(cfg.epochs);
    for e in 0..cfg.epochs {
        let epoch = cfg.first_epoch + e;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut keyed(&[cfg.seed, TAG_SHUFFLE, epoch as u64]));
        let (mut loss, mut hits) = (0.0, 0);
        for (s, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = data.select(chunk)?;
            let (l, preds) = model.step(&batch, backend, cfg.lr, &[cfg.seed, TAG_TRAIN, epoch as u64, s as u64])?;
            loss += l * chunk.len() as f64;
            hits += preds.iter().zip(&batch.labels).filter(|(p, t)| p == t).count();
        }
        let test = test.map(|t| evaluate(model, t, backend, cfg.seed ^ epoch as u64)).transpose()?;
        let m = EpochMetrics {
            epoch,
            loss: loss / data.len().max(1) as f64,
            train_accuracy: hits as f64 / data.len().max(1) as f64,
            test,
        };
        on_epoch(&m);
        out.push(m);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
