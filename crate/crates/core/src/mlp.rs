//! Multilayer perceptron regressor for `E[X_0 | X_t = x, t]`.
//!
//! Parameters live in one flat vector (per layer: weights `in × out`
//! row-major, then biases) so the optimizer and checkpoints treat them
//! uniformly. Hidden layers use softplus; the output layer is linear.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linear_score::{Moments, PosteriorMean};
use crate::rng;
use crate::sde::PathEnsemble;

const MAGIC: &[u8; 8] = b"MBSMLP\0\0";
const FORMAT_VERSION: u32 = 1;
/// Normalized inputs beyond this magnitude count as extrapolation.
pub const EXTRAPOLATION_LIMIT: f64 = 6.0;

#[inline]
fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else if z < -30.0 {
        z.exp()
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    /// Over `(x_1..x_m, t)`.
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub output_mean: Vec<f64>,
    pub output_std: Vec<f64>,
}

fn mean_std(sum: f64, sum2: f64, n: f64) -> (f64, f64) {
    let mean = sum / n;
    let var = (sum2 / n - mean * mean).max(0.0);
    let std = var.sqrt();
    (mean, if std > 1e-12 * mean.abs().max(1.0) { std } else { 1.0 })
}

impl Normalization {
    pub fn identity(m: usize) -> Self {
        Normalization {
            input_mean: vec![0.0; m + 1],
            input_std: vec![1.0; m + 1],
            output_mean: vec![0.0; m],
            output_std: vec![1.0; m],
        }
    }

    pub fn normalize_input(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let m = x.len();
        for j in 0..m {
            out[j] = (x[j] - self.input_mean[j]) / self.input_std[j];
        }
        out[m] = (t - self.input_mean[m]) / self.input_std[m];
    }

    pub fn normalize_output(&self, y: &[f64], out: &mut [f64]) {
        for j in 0..y.len() {
            out[j] = (y[j] - self.output_mean[j]) / self.output_std[j];
        }
    }

    pub fn denormalize_output(&self, z: &[f64], out: &mut [f64]) {
        for j in 0..z.len() {
            out[j] = z[j] * self.output_std[j] + self.output_mean[j];
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub dims: Vec<usize>,
    pub params: Vec<f64>,
    pub norm: Normalization,
}

impl Mlp {
    /// Random initialization with `N(0, 1/fan_in)` weights and zero biases.
    pub fn new(dims: Vec<usize>, norm: Normalization, seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return invalid(format!("invalid layer widths {dims:?}"));
        }
        if norm.input_mean.len() != dims[0] || norm.output_mean.len() != *dims.last().unwrap() {
            return invalid("normalization does not match the layer widths");
        }
        let n: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let mut params = vec![0.0; n];
        let mut r = rng::stream(seed, rng::domain::TRAIN, u64::MAX);
        let mut off = 0;
        for w in dims.windows(2) {
            let scale = (1.0 / w[0] as f64).sqrt();
            for p in &mut params[off..off + w[0] * w[1]] {
                let g: f64 = StandardNormal.sample(&mut r);
                *p = g * scale;
            }
            off += w[0] * w[1] + w[1];
        }
        Ok(Mlp { dims, params, norm })
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Offsets of each layer's weights and biases in `params`.
    fn layout(&self) -> Vec<(usize, usize)> {
        let mut off = 0;
        self.dims
            .windows(2)
            .map(|w| {
                let wo = off;
                off += w[0] * w[1];
                let bo = off;
                off += w[1];
                (wo, bo)
            })
            .collect()
    }

    /// Mask that is 1 on weights and 0 on biases.
    pub fn weight_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.params.len()];
        for ((wo, bo), _) in self.layout().into_iter().zip(self.dims.windows(2)) {
            mask[wo..bo].fill(true);
        }
        mask
    }

    fn weights(&self, l: usize, off: usize) -> ArrayView2<'_, f64> {
        let (i, o) = (self.dims[l], self.dims[l + 1]);
        ArrayView2::from_shape((i, o), &self.params[off..off + i * o]).expect("layer shape")
    }

    /// Mean squared error on normalized data and its gradient w.r.t. `params`.
    pub fn loss_and_gradient(&self, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> (f64, Vec<f64>) {
        let layout = self.layout();
        let nl = self.n_layers();
        let mut pre: Vec<Array2<f64>> = Vec::with_capacity(nl);
        let mut acts: Vec<Array2<f64>> = Vec::with_capacity(nl + 1);
        acts.push(x.to_owned());
        for (l, &(wo, bo)) in layout.iter().enumerate() {
            let w = self.weights(l, wo);
            let b = &self.params[bo..bo + self.dims[l + 1]];
            let mut z = acts[l].dot(&w);
            for mut row in z.rows_mut() {
                for (v, bj) in row.iter_mut().zip(b) {
                    *v += bj;
                }
            }
            let a = if l + 1 < nl { z.mapv(softplus) } else { z.clone() };
            pre.push(z);
            acts.push(a);
        }
        let out = &acts[nl];
        let diff = out - &y;
        let k = diff.len() as f64;
        let loss = diff.iter().map(|v| v * v).sum::<f64>() / k;
        let mut grad = vec![0.0; self.params.len()];
        let mut delta = diff.mapv(|v| 2.0 * v / k);
        for l in (0..nl).rev() {
            let (wo, bo) = layout[l];
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            let gw = acts[l].t().dot(&delta);
            grad[wo..wo + i * o].iter_mut().zip(gw.iter()).for_each(|(g, v)| *g = *v);
            let gb = delta.sum_axis(Axis(0));
            grad[bo..bo + o].iter_mut().zip(gb.iter()).for_each(|(g, v)| *g = *v);
            if l > 0 {
                let w = self.weights(l, wo);
                let mut back = delta.dot(&w.t());
                back.zip_mut_with(&pre[l - 1], |d, z| *d *= sigmoid(*z));
                delta = back;
            }
        }
        (loss, grad)
    }

    pub fn loss(&self, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> f64 {
        let z = self.forward_normalized_batch(x);
        let diff = z - &y;
        diff.iter().map(|v| v * v).sum::<f64>() / diff.len() as f64
    }

    /// Forward pass on one normalized input row, with a fixed summation
    /// order so batch and single evaluation agree bitwise.
    pub fn forward_normalized(&self, input: &[f64], out: &mut [f64]) {
        let layout = self.layout();
        let nl = self.n_layers();
        let mut cur = input.to_vec();
        let mut next = Vec::new();
        for (l, &(wo, bo)) in layout.iter().enumerate() {
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            next.clear();
            next.extend_from_slice(&self.params[bo..bo + o]);
            for (a, row) in cur.iter().zip(self.params[wo..wo + i * o].chunks(o)) {
                for (v, w) in next.iter_mut().zip(row) {
                    *v += a * w;
                }
            }
            if l + 1 < nl {
                for v in next.iter_mut() {
                    *v = softplus(*v);
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        out.copy_from_slice(&cur);
    }

    pub fn forward_normalized_batch(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = Array2::zeros((x.nrows(), self.output_dim()));
        for (row, mut o) in x.rows().into_iter().zip(out.rows_mut()) {
            let input: Vec<f64> = row.to_vec();
            self.forward_normalized(&input, o.as_slice_mut().expect("contiguous"));
        }
        out
    }

    /// Denormalized prediction; returns whether any normalized input was
    /// beyond the extrapolation limit.
    pub fn predict(&self, x: &[f64], t: f64, out: &mut [f64]) -> bool {
        let mut input = vec![0.0; self.input_dim()];
        self.norm.normalize_input(x, t, &mut input);
        let extrapolated = input.iter().any(|v| v.abs() > EXTRAPOLATION_LIMIT);
        let mut z = vec![0.0; self.output_dim()];
        self.forward_normalized(&input, &mut z);
        self.norm.denormalize_output(&z, out);
        extrapolated
    }

    /// Row-major batch prediction at a shared time; returns the number of
    /// extrapolated rows.
    pub fn predict_batch(&self, xs: &[f64], t: f64, out: &mut [f64]) -> usize {
        let (m, k) = (self.input_dim() - 1, self.output_dim());
        let mut n = 0;
        for (x, o) in xs.chunks(m).zip(out.chunks_mut(k)) {
            if self.predict(x, t, o) {
                n += 1;
            }
        }
        n
    }
}

/// Ensemble-backed training data: one example per `(path, node k ≥ 1)`,
/// input `(X_k, t_k)`, target `X_0`.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub m: usize,
    pub n_paths: usize,
    pub times: Vec<f64>,
    /// `n_paths × n_nodes × m`.
    pub states: Vec<f64>,
}

pub fn build_training_set(ens: &PathEnsemble) -> Result<TrainingSet> {
    let m = ens.dim();
    let valid: Vec<usize> = ens.valid_paths().collect();
    if valid.is_empty() || ens.grid.n_steps == 0 {
        return Err(Error::InsufficientData("ensemble has no usable paths".into()));
    }
    let mut states = Vec::with_capacity(valid.len() * ens.grid.n_nodes() * m);
    for &i in &valid {
        states.extend_from_slice(ens.path(i));
    }
    Ok(TrainingSet { m, n_paths: valid.len(), times: ens.grid.nodes(), states })
}

impl TrainingSet {
    pub fn n_nodes(&self) -> usize {
        self.times.len()
    }

    pub fn n_examples(&self) -> usize {
        self.n_paths * (self.n_nodes() - 1)
    }

    fn state(&self, path: usize, k: usize) -> &[f64] {
        let off = (path * self.n_nodes() + k) * self.m;
        &self.states[off..off + self.m]
    }

    /// `(input x, t, target x0)` of example `idx` within the given paths.
    pub fn example(&self, paths: &[usize], idx: usize) -> (&[f64], f64, &[f64]) {
        let per = self.n_nodes() - 1;
        let p = paths[idx / per];
        let k = 1 + idx % per;
        (self.state(p, k), self.times[k], self.state(p, 0))
    }

    /// Split of path indices; the validation share is drawn by path.
    pub fn split(&self, validation_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let mut ids: Vec<usize> = (0..self.n_paths).collect();
        let mut r = rng::stream(seed, rng::domain::TRAIN, u64::MAX - 1);
        ids.shuffle(&mut r);
        let n_val = ((self.n_paths as f64 * validation_fraction).round() as usize).min(self.n_paths - 1);
        let mut val = ids.split_off(self.n_paths - n_val);
        ids.sort_unstable();
        val.sort_unstable();
        (ids, val)
    }

    pub fn normalization(&self, paths: &[usize]) -> Normalization {
        let m = self.m;
        let (mut sx, mut sx2) = (vec![0.0; m + 1], vec![0.0; m + 1]);
        let (mut sy, mut sy2) = (vec![0.0; m], vec![0.0; m]);
        let per = self.n_nodes() - 1;
        for &p in paths {
            for k in 1..self.n_nodes() {
                for (j, v) in self.state(p, k).iter().enumerate() {
                    sx[j] += v;
                    sx2[j] += v * v;
                }
                sx[m] += self.times[k];
                sx2[m] += self.times[k] * self.times[k];
            }
            for (j, v) in self.state(p, 0).iter().enumerate() {
                sy[j] += v * per as f64;
                sy2[j] += v * v * per as f64;
            }
        }
        let n = (paths.len() * per) as f64;
        let (input_mean, input_std) = (0..=m).map(|j| mean_std(sx[j], sx2[j], n)).unzip();
        let (output_mean, output_std) = (0..m).map(|j| mean_std(sy[j], sy2[j], n)).unzip();
        Normalization { input_mean, input_std, output_mean, output_std }
    }

    /// Normalized `(inputs, targets)` for a list of example indices.
    pub fn batch(&self, paths: &[usize], idx: &[usize], norm: &Normalization) -> (Array2<f64>, Array2<f64>) {
        let m = self.m;
        let mut x = Array2::zeros((idx.len(), m + 1));
        let mut y = Array2::zeros((idx.len(), m));
        for (r, &i) in idx.iter().enumerate() {
            let (xi, t, x0) = self.example(paths, i);
            norm.normalize_input(xi, t, x.slice_mut(s![r, ..]).as_slice_mut().expect("row"));
            norm.normalize_output(x0, y.slice_mut(s![r, ..]).as_slice_mut().expect("row"));
        }
        (x, y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from the base rate to `min_learning_rate` over all epochs.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub validation_fraction: f64,
    /// Examples drawn (without replacement) per epoch; all when `None`.
    pub examples_per_epoch: Option<usize>,
    /// Cap on validation examples evaluated per epoch.
    pub validation_examples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 512,
            learning_rate: 1e-3,
            min_learning_rate: 1e-5,
            lr_schedule: LrSchedule::Constant,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            hidden_width: 256,
            hidden_layers: 6,
            validation_fraction: 0.1,
            examples_per_epoch: None,
            validation_examples: 20_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.min_learning_rate >= 0.0) {
            return invalid("learning rate must be positive");
        }
        if self.batch_size == 0 || self.hidden_width == 0 || self.epochs == 0 {
            return invalid("batch size, width and epochs must be at least 1");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return invalid("validation fraction must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return invalid("invalid optimizer constants");
        }
        if !(self.weight_decay >= 0.0) {
            return invalid("weight decay must be non-negative");
        }
        Ok(())
    }

    pub fn layer_dims(&self, m: usize) -> Vec<usize> {
        let mut dims = vec![m + 1];
        dims.extend(std::iter::repeat_n(self.hidden_width, self.hidden_layers));
        dims.push(m);
        dims
    }

    fn rate(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let frac = epoch as f64 / self.epochs.max(1) as f64;
                self.min_learning_rate
                    + 0.5 * (self.learning_rate - self.min_learning_rate) * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// AdamW moments over the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    /// One decoupled-weight-decay Adam update; decay applies to weights only.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64], decay_mask: &[bool], lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let b1t = 1.0 - cfg.beta1.powi(self.step as i32);
        let b2t = 1.0 - cfg.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            let decay = if decay_mask[i] { cfg.weight_decay * params[i] } else { 0.0 };
            params[i] -= lr * (mh / (vh.sqrt() + cfg.epsilon) + decay);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub learning_rate: f64,
}

/// Mean of the first and last `window` training losses.
pub fn smoothed_endpoints(curve: &[EpochRecord], window: usize) -> (f64, f64) {
    let w = window.clamp(1, curve.len().max(1));
    let head = curve.iter().take(w).map(|r| r.train_loss).sum::<f64>() / w as f64;
    let tail = curve.iter().rev().take(w).map(|r| r.train_loss).sum::<f64>() / w as f64;
    (head, tail)
}

/// Model, optimizer state and history of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Mlp,
    pub adam: AdamState,
    pub config: TrainConfig,
    pub curve: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(data: &TrainingSet, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if data.n_paths < 2 {
            return Err(Error::InsufficientData("need at least two paths to split".into()));
        }
        let (train, _) = data.split(config.validation_fraction, config.seed);
        let norm = data.normalization(&train);
        let model = Mlp::new(config.layer_dims(data.m), norm, config.seed)?;
        let adam = AdamState::new(model.params.len());
        Ok(Trainer { model, adam, config, curve: Vec::new() })
    }

    pub fn epochs_done(&self) -> usize {
        self.curve.len()
    }

    /// Runs until `config.epochs` epochs are complete.
    pub fn run(&mut self, data: &TrainingSet) -> Result<()> {
        self.run_until(data, self.config.epochs)
    }

    pub fn run_until(&mut self, data: &TrainingSet, epochs: usize) -> Result<()> {
        if data.m + 1 != self.model.input_dim() {
            return invalid("training data dimension differs from the model");
        }
        let (train, val) = data.split(self.config.validation_fraction, self.config.seed);
        let per = data.n_nodes() - 1;
        let n_train = train.len() * per;
        let n_val = val.len() * per;
        let val_idx: Vec<usize> = if n_val == 0 {
            Vec::new()
        } else {
            let take = self.config.validation_examples.min(n_val);
            let mut r = rng::stream(self.config.seed, rng::domain::TRAIN, u64::MAX - 2);
            rand::seq::index::sample(&mut r, n_val, take).into_vec()
        };
        let (vx, vy) = data.batch(&val, &val_idx, &self.model.norm);
        let mask = self.model.weight_mask();
        let mut order: Vec<usize> = (0..n_train).collect();
        while self.curve.len() < epochs {
            let epoch = self.curve.len();
            let lr = self.config.rate(epoch);
            let mut r = rng::stream(self.config.seed, rng::domain::TRAIN, epoch as u64);
            let take = self.config.examples_per_epoch.unwrap_or(n_train).min(n_train);
            let (chosen, _) = order.partial_shuffle(&mut r, take);
            let mut total = 0.0;
            let mut batches = 0usize;
            for (b, idx) in chosen.chunks(self.config.batch_size).enumerate() {
                let (x, y) = data.batch(&train, idx, &self.model.norm);
                let (loss, grad) = self.model.loss_and_gradient(x.view(), y.view());
                if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at epoch {epoch}, batch {b} (learning rate {lr:e}); \
                         lower the learning rate or check the data for outliers"
                    )));
                }
                self.adam.update(&mut self.model.params, &grad, &mask, lr, &self.config);
                total += loss;
                batches += 1;
            }
            let validation_loss = if val_idx.is_empty() { f64::NAN } else { self.model.loss(vx.view(), vy.view()) };
            self.curve.push(EpochRecord { epoch, train_loss: total / batches as f64, validation_loss, learning_rate: lr });
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            adam: Some(self.adam.clone()),
            config: self.config.clone(),
            curve: self.curve.clone(),
        }
    }

    pub fn resume(ckpt: Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        let n = ckpt.model.params.len();
        Ok(Trainer {
            adam: ckpt.adam.unwrap_or_else(|| AdamState::new(n)),
            model: ckpt.model,
            config: ckpt.config,
            curve: ckpt.curve,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Mlp,
    pub adam: Option<AdamState>,
    pub config: TrainConfig,
    pub curve: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    format_version: u32,
    dims: Vec<usize>,
    activation: String,
    normalization: Normalization,
    config: TrainConfig,
    epochs_done: usize,
    adam_step: u64,
    loss_curve: Vec<EpochRecord>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

impl Checkpoint {
    /// Writes the binary parameter file at `path` and the JSON sidecar next
    /// to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MAGIC)?;
        f.write_all(&FORMAT_VERSION.to_le_bytes())?;
        f.write_all(&(self.model.dims.len() as u32).to_le_bytes())?;
        for &d in &self.model.dims {
            f.write_all(&(d as u32).to_le_bytes())?;
        }
        f.write_all(&(self.model.params.len() as u64).to_le_bytes())?;
        for p in &self.model.params {
            f.write_all(&p.to_le_bytes())?;
        }
        match &self.adam {
            None => f.write_all(&[0u8])?,
            Some(a) => {
                f.write_all(&[1u8])?;
                f.write_all(&a.step.to_le_bytes())?;
                for v in a.m.iter().chain(&a.v) {
                    f.write_all(&v.to_le_bytes())?;
                }
            }
        }
        f.flush()?;
        let side = Sidecar {
            format_version: FORMAT_VERSION,
            dims: self.model.dims.clone(),
            activation: "softplus".into(),
            normalization: self.model.norm.clone(),
            config: self.config.clone(),
            epochs_done: self.curve.len(),
            adam_step: self.adam.as_ref().map_or(0, |a| a.step),
            loss_curve: self.curve.clone(),
        };
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return invalid(format!("{} is not a model checkpoint", path.display()));
        }
        let version = read_u32(&mut f)?;
        if version != FORMAT_VERSION {
            return Err(Error::Unsupported(format!("checkpoint format version {version}")));
        }
        let nd = read_u32(&mut f)? as usize;
        let dims = (0..nd).map(|_| read_u32(&mut f).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let np = read_u64(&mut f)? as usize;
        let expected: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        if np != expected {
            return invalid("checkpoint parameter count does not match its layer widths");
        }
        let params = read_f64s(&mut f, np)?;
        let mut flag = [0u8; 1];
        f.read_exact(&mut flag)?;
        let adam = if flag[0] == 1 {
            let step = read_u64(&mut f)?;
            let m = read_f64s(&mut f, np)?;
            let v = read_f64s(&mut f, np)?;
            Some(AdamState { step, m, v })
        } else {
            None
        };
        let side: Sidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
        if side.dims != dims {
            return invalid("checkpoint sidecar disagrees with the parameter file");
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("checkpoint holds non-finite parameters".into()));
        }
        Ok(Checkpoint {
            model: Mlp { dims, params, norm: side.normalization },
            adam,
            config: side.config,
            curve: side.loss_curve,
        })
    }
}

/// A trained model used as the conditional-expectation provider.
#[derive(Debug)]
pub struct MlpPosteriorMean {
    pub model: Mlp,
    extrapolated: AtomicUsize,
}

impl MlpPosteriorMean {
    pub fn new(model: Mlp) -> Self {
        MlpPosteriorMean { model, extrapolated: AtomicUsize::new(0) }
    }

    pub fn extrapolated_count(&self) -> usize {
        self.extrapolated.load(Ordering::Relaxed)
    }
}

impl PosteriorMean for MlpPosteriorMean {
    fn dim(&self) -> usize {
        self.model.output_dim()
    }

    fn posterior_mean(&self, t: f64, y: &[f64], _moments: &Moments, out: &mut [f64]) -> Result<()> {
        if self.model.predict(y, t, out) {
            self.extrapolated.fetch_add(1, Ordering::Relaxed);
        }
        Ok(())
    }

    fn posterior_mean_batch(&self, t: f64, ys: &[f64], _moments: &Moments, out: &mut [f64]) -> Result<()> {
        let n = self.model.predict_batch(ys, t, out);
        self.extrapolated.fetch_add(n, Ordering::Relaxed);
        Ok(())
    }
}

/// Draws `n` example indices uniformly; used by callers that want a quick
/// loss estimate on a subset.
pub fn sample_indices(n_total: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut r = rng::stream(seed, rng::domain::TRAIN, u64::MAX - 3);
    (0..n).map(|_| r.random_range(0..n_total)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(seed: u64) -> Mlp {
        Mlp::new(vec![3, 5, 4, 2], Normalization::identity(2), seed).unwrap()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut net = toy(3);
        for (i, p) in net.params.iter_mut().enumerate() {
            *p += 0.01 * ((i * 7 % 11) as f64 - 5.0) / 5.0;
        }
        let x = Array2::from_shape_fn((6, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin());
        let y = Array2::from_shape_fn((6, 2), |(i, j)| ((i + 2 * j) as f64 * 0.5).cos());
        let (_, grad) = net.loss_and_gradient(x.view(), y.view());
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..net.params.len() {
            let orig = net.params[i];
            net.params[i] = orig + h;
            let lp = net.loss_and_gradient(x.view(), y.view()).0;
            net.params[i] = orig - h;
            let lm = net.loss_and_gradient(x.view(), y.view()).0;
            net.params[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let scale = fd.abs().max(grad[i].abs()).max(1e-6);
            worst = worst.max((fd - grad[i]).abs() / scale);
        }
        assert!(worst <= 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn batch_prediction_is_rowwise_bitwise() {
        let net = toy(4);
        let xs = [0.1, -0.2, 0.7, 1.3, 2.0, -3.0];
        let mut batch = vec![0.0; 6];
        net.predict_batch(&xs, 0.4, &mut batch);
        for r in 0..3 {
            let mut one = [0.0; 2];
            net.predict(&xs[2 * r..2 * r + 2], 0.4, &mut one);
            assert_eq!(one[0].to_bits(), batch[2 * r].to_bits());
            assert_eq!(one[1].to_bits(), batch[2 * r + 1].to_bits());
        }
    }

    #[test]
    fn training_loss_and_batch_forward_agree() {
        let net = toy(5);
        let x = Array2::from_shape_fn((4, 3), |(i, j)| (i as f64 - j as f64) * 0.3);
        let y = Array2::zeros((4, 2));
        let (l, _) = net.loss_and_gradient(x.view(), y.view());
        assert!((l - net.loss(x.view(), y.view())).abs() < 1e-12);
    }

    #[test]
    fn normalization_round_trip() {
        let norm = Normalization {
            input_mean: vec![0.3, -1.0],
            input_std: vec![2.0, 0.5],
            output_mean: vec![0.7],
            output_std: vec![3.0],
        };
        let mut z = [0.0];
        let mut back = [0.0];
        norm.normalize_output(&[1.234_567], &mut z);
        norm.denormalize_output(&z, &mut back);
        assert!((back[0] - 1.234_567).abs() <= 1e-12);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(100.0), 100.0);
        assert!(softplus(-100.0) > 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((sigmoid(-800.0)).abs() < 1e-300 && sigmoid(800.0) == 1.0);
    }
}
