//! The distilled switching policy: a feedforward softmax classifier over
//! the four admissible modes, trained with class-weighted cross-entropy,
//! hand-derived backpropagation, and a first-party Adam optimizer.
//!
//! The network is deliberately small — one ReLU hidden layer — so that a
//! single decision costs a few thousand multiply-adds and comfortably
//! undercuts the receding-horizon search it imitates. Weights are single
//! precision; batch statistics and gradient accumulation run in double
//! precision so training stays deterministic and the analytic gradients
//! survive a finite-difference audit.
//!
//! A model file is self-contained for deployment: layer shapes, weights,
//! the feature normalizer, and the output-to-mode mapping.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::converter::SwitchMode;
use crate::dataset::Sample;
use crate::mpc::FeatureVector;
use crate::scenario::SwitchingPolicy;
use crate::seeding;
use crate::{Error, Result};

const MODEL_MAGIC: &[u8; 4] = b"FCNN";
const MODEL_VERSION: u32 = 1;

/// Number of output classes; one per admissible mode.
pub const N_CLASSES: usize = 4;

/// Per-feature standardization persisted with the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalizer {
    pub fn identity(n: usize) -> Self {
        Normalizer { mean: vec![0.0; n], std: vec![1.0; n] }
    }

    pub fn from_stats(mean: &[f64], std: &[f64]) -> Self {
        Normalizer {
            mean: mean.iter().map(|&v| v as f32).collect(),
            std: std.iter().map(|&v| v as f32).collect(),
        }
    }

    #[inline]
    fn apply_into(&self, z: &[f32], out: &mut [f32]) {
        for i in 0..z.len() {
            out[i] = (z[i] - self.mean[i]) / self.std[i];
        }
    }
}

/// Feedforward classifier `softmax(W2·relu(W1·normalize(z) + b1) + b2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    pub n_in: usize,
    pub n_hidden: usize,
    /// Hidden weights, row-major `[n_hidden][n_in]`.
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    /// Output weights, row-major `[N_CLASSES][n_hidden]`.
    pub w2: Vec<f32>,
    pub b2: [f32; N_CLASSES],
    pub normalizer: Normalizer,
    /// Mode answered by each output index.
    pub mode_order: [SwitchMode; N_CLASSES],
}

impl MlpModel {
    /// Fresh model with uniform fan-in-scaled weights and zero biases.
    pub fn init(n_in: usize, n_hidden: usize, seed: u64) -> Self {
        let mut rng = seeding::stream_rng(seed, 0x1217);
        let lim1 = (6.0 / n_in as f64).sqrt();
        let lim2 = (6.0 / n_hidden as f64).sqrt();
        let w1 = (0..n_hidden * n_in).map(|_| rng.random_range(-lim1..lim1) as f32).collect();
        let w2 = (0..N_CLASSES * n_hidden).map(|_| rng.random_range(-lim2..lim2) as f32).collect();
        MlpModel {
            n_in,
            n_hidden,
            w1,
            b1: vec![0.0; n_hidden],
            w2,
            b2: [0.0; N_CLASSES],
            normalizer: Normalizer::identity(n_in),
            mode_order: SwitchMode::ALL,
        }
    }

    /// Standard policy shape: 6 features, 128 hidden units.
    pub fn standard(seed: u64) -> Self {
        MlpModel::init(6, 128, seed)
    }

    /// Output index a label maps to.
    pub fn class_of(&self, label: SwitchMode) -> usize {
        self.mode_order.iter().position(|&m| m == label).expect("all four modes are mapped")
    }

    fn check_shapes(&self) -> Result<()> {
        let ok = self.w1.len() == self.n_hidden * self.n_in
            && self.b1.len() == self.n_hidden
            && self.w2.len() == N_CLASSES * self.n_hidden
            && self.normalizer.mean.len() == self.n_in
            && self.normalizer.std.len() == self.n_in;
        if ok {
            Ok(())
        } else {
            Err(Error::Model("inconsistent tensor shapes".into()))
        }
    }

    /// Raw logits for normalized scratch buffers supplied by the caller.
    /// `zn` and `hidden` must have lengths `n_in` and `n_hidden`.
    #[inline]
    fn logits_into(&self, z: &[f32], zn: &mut [f32], hidden: &mut [f32]) -> [f32; N_CLASSES] {
        self.normalizer.apply_into(z, zn);
        for j in 0..self.n_hidden {
            let row = &self.w1[j * self.n_in..(j + 1) * self.n_in];
            let mut acc = self.b1[j];
            for i in 0..self.n_in {
                acc += row[i] * zn[i];
            }
            hidden[j] = acc.max(0.0);
        }
        let mut logits = self.b2;
        for (o, logit) in logits.iter_mut().enumerate() {
            let row = &self.w2[o * self.n_hidden..(o + 1) * self.n_hidden];
            let mut acc = 0.0f32;
            for j in 0..self.n_hidden {
                acc += row[j] * hidden[j];
            }
            *logit += acc;
        }
        logits
    }

    fn logits(&self, z: &[f32]) -> [f32; N_CLASSES] {
        let mut zn = vec![0.0f32; self.n_in];
        let mut hidden = vec![0.0f32; self.n_hidden];
        self.logits_into(z, &mut zn, &mut hidden)
    }

    /// Class probabilities for a measured feature vector.
    pub fn forward(&self, z: &FeatureVector) -> Result<[f32; N_CLASSES]> {
        if !z.is_finite() {
            return Err(Error::NonFinite { what: "feature vector" });
        }
        Ok(softmax(self.logits(&z.to_f32())))
    }

    /// Mode with the highest probability; exact ties resolve to the lowest
    /// output index, i.e. the fixed mode order.
    pub fn predict_mode(&self, z: &FeatureVector) -> SwitchMode {
        let logits = self.logits(&z.to_f32());
        self.mode_order[argmax(&logits)]
    }

    pub fn save_file(&self, path: &Path) -> Result<()> {
        self.check_shapes()?;
        let file = std::fs::File::create(path)?;
        let mut out = BufWriter::new(file);
        out.write_all(MODEL_MAGIC)?;
        out.write_all(&MODEL_VERSION.to_le_bytes())?;
        out.write_all(&(self.n_in as u32).to_le_bytes())?;
        out.write_all(&(self.n_hidden as u32).to_le_bytes())?;
        out.write_all(&(N_CLASSES as u32).to_le_bytes())?;
        for m in self.mode_order {
            out.write_all(&[m.index() as u8])?;
        }
        for group in [&self.normalizer.mean, &self.normalizer.std, &self.w1, &self.b1, &self.w2] {
            for v in group.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        for v in self.b2 {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load_file(path: &Path) -> Result<MlpModel> {
        let file = std::fs::File::open(path)?;
        let mut input = BufReader::new(file);
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Model(format!("{}: not a model file", path.display())));
        }
        let mut u32buf = [0u8; 4];
        let mut read_u32 = |input: &mut BufReader<std::fs::File>| -> Result<u32> {
            input.read_exact(&mut u32buf)?;
            Ok(u32::from_le_bytes(u32buf))
        };
        let version = read_u32(&mut input)?;
        if version != MODEL_VERSION {
            return Err(Error::Model(format!("unsupported model version {version}")));
        }
        let n_in = read_u32(&mut input)? as usize;
        let n_hidden = read_u32(&mut input)? as usize;
        let n_out = read_u32(&mut input)? as usize;
        if n_out != N_CLASSES {
            return Err(Error::Model(format!("expected {N_CLASSES} outputs, file has {n_out}")));
        }
        let mut order_bytes = [0u8; N_CLASSES];
        input.read_exact(&mut order_bytes)?;
        let mut mode_order = [SwitchMode::Op; N_CLASSES];
        for (slot, byte) in mode_order.iter_mut().zip(order_bytes) {
            *slot = SwitchMode::from_index(byte as usize)
                .ok_or_else(|| Error::Model("invalid mode byte in model header".into()))?;
        }
        let read_f32s = |input: &mut BufReader<std::fs::File>, n: usize| -> Result<Vec<f32>> {
            let mut buf = vec![0u8; 4 * n];
            input.read_exact(&mut buf)?;
            Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let mean = read_f32s(&mut input, n_in)?;
        let std = read_f32s(&mut input, n_in)?;
        let w1 = read_f32s(&mut input, n_hidden * n_in)?;
        let b1 = read_f32s(&mut input, n_hidden)?;
        let w2 = read_f32s(&mut input, N_CLASSES * n_hidden)?;
        let b2_vec = read_f32s(&mut input, N_CLASSES)?;
        let model = MlpModel {
            n_in,
            n_hidden,
            w1,
            b1,
            w2,
            b2: b2_vec.try_into().unwrap(),
            normalizer: Normalizer { mean, std },
            mode_order,
        };
        model.check_shapes()?;
        Ok(model)
    }
}

#[inline]
fn softmax(logits: [f32; N_CLASSES]) -> [f32; N_CLASSES] {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut out = [0.0f32; N_CLASSES];
    let mut sum = 0.0f32;
    for (o, &l) in out.iter_mut().zip(logits.iter()) {
        let e = (l - m).exp();
        *o = e;
        sum += e;
    }
    for o in &mut out {
        *o /= sum;
    }
    out
}

#[inline]
fn argmax(values: &[f32; N_CLASSES]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Parameter gradients, shaped like the model tensors.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    pub w2: Vec<f32>,
    pub b2: [f32; N_CLASSES],
}

/// Mean class-weighted cross-entropy over a batch and its gradients.
///
/// The loss is `mean_k −α_{c_k}·log p_{c_k}` with log-probabilities from a
/// log-sum-exp formulation, so near-certain predictions cannot underflow.
/// The ReLU subgradient at exactly zero is taken as zero.
pub fn loss_and_grad(
    model: &MlpModel,
    batch: &[Sample],
    weights: &[f64; N_CLASSES],
) -> Result<(f64, Gradients)> {
    let (loss, _, grads) = loss_grad_stats(model, batch, weights)?;
    Ok((loss, grads))
}

/// [`loss_and_grad`] plus the number of correctly classified samples.
pub fn loss_grad_stats(
    model: &MlpModel,
    batch: &[Sample],
    weights: &[f64; N_CLASSES],
) -> Result<(f64, usize, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Train("gradient of an empty batch".into()));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::Train("class weights must be positive".into()));
    }
    let n_in = model.n_in;
    let n_hidden = model.n_hidden;
    let inv_batch = 1.0 / batch.len() as f64;

    let mut gw1 = vec![0.0f64; n_hidden * n_in];
    let mut gb1 = vec![0.0f64; n_hidden];
    let mut gw2 = vec![0.0f64; N_CLASSES * n_hidden];
    let mut gb2 = [0.0f64; N_CLASSES];
    let mut zn = vec![0.0f32; n_in];
    let mut hidden = vec![0.0f32; n_hidden];
    let mut loss = 0.0f64;
    let mut correct = 0usize;

    for sample in batch {
        let logits = model.logits_into(&sample.z, &mut zn, &mut hidden);
        let class = model.class_of(sample.label);
        if argmax(&logits) == class {
            correct += 1;
        }

        let l64: [f64; N_CLASSES] = [
            logits[0] as f64,
            logits[1] as f64,
            logits[2] as f64,
            logits[3] as f64,
        ];
        let m = l64.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + l64.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
        let alpha = weights[class];
        loss += -alpha * (l64[class] - lse) * inv_batch;

        // d(−α·logp_c)/dlogits = α·(softmax − onehot_c), averaged over the
        // batch.
        let mut dlogits = [0.0f64; N_CLASSES];
        for (o, &l) in dlogits.iter_mut().zip(l64.iter()) {
            *o = alpha * (l - lse).exp() * inv_batch;
        }
        dlogits[class] -= alpha * inv_batch;

        for o in 0..N_CLASSES {
            let d = dlogits[o];
            gb2[o] += d;
            let grow = &mut gw2[o * n_hidden..(o + 1) * n_hidden];
            for j in 0..n_hidden {
                grow[j] += d * hidden[j] as f64;
            }
        }
        for j in 0..n_hidden {
            if hidden[j] <= 0.0 {
                continue;
            }
            let mut dh = 0.0f64;
            for (o, &d) in dlogits.iter().enumerate() {
                dh += model.w2[o * n_hidden + j] as f64 * d;
            }
            gb1[j] += dh;
            let grow = &mut gw1[j * n_in..(j + 1) * n_in];
            for i in 0..n_in {
                grow[i] += dh * zn[i] as f64;
            }
        }
    }

    let grads = Gradients {
        w1: gw1.into_iter().map(|v| v as f32).collect(),
        b1: gb1.into_iter().map(|v| v as f32).collect(),
        w2: gw2.into_iter().map(|v| v as f32).collect(),
        b2: [gb2[0] as f32, gb2[1] as f32, gb2[2] as f32, gb2[3] as f32],
    };
    Ok((loss, correct, grads))
}

/// Training hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub class_weights: [f64; N_CLASSES],
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 2048,
            epochs: 260,
            class_weights: [1.0; N_CLASSES],
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if !(self.beta1 >= 0.0 && self.beta1 < 1.0 && self.beta2 >= 0.0 && self.beta2 < 1.0) {
            return Err(Error::InvalidConfig("Adam moments must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Losses and accuracies of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, model: &mut MlpModel, grads: &Gradients, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let update = |params: &mut [f32], grads: &[f32], m: &mut [f64], v: &mut [f64]| {
            for i in 0..params.len() {
                let g = grads[i] as f64;
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                params[i] =
                    (params[i] as f64 - cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps)) as f32;
            }
        };
        let (mw1, rest) = self.m.split_at_mut(model.w1.len());
        let (vw1, vrest) = self.v.split_at_mut(model.w1.len());
        update(&mut model.w1, &grads.w1, mw1, vw1);
        let (mb1, rest) = rest.split_at_mut(model.b1.len());
        let (vb1, vrest) = vrest.split_at_mut(model.b1.len());
        update(&mut model.b1, &grads.b1, mb1, vb1);
        let (mw2, rest) = rest.split_at_mut(model.w2.len());
        let (vw2, vrest) = vrest.split_at_mut(model.w2.len());
        update(&mut model.w2, &grads.w2, mw2, vw2);
        update(&mut model.b2, &grads.b2, rest, vrest);
    }
}

/// Mean weighted loss and accuracy over a sample set. Returns NaNs on an
/// empty set.
pub fn evaluate(model: &MlpModel, samples: &[Sample], weights: &[f64; N_CLASSES]) -> (f64, f64) {
    if samples.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut zn = vec![0.0f32; model.n_in];
    let mut hidden = vec![0.0f32; model.n_hidden];
    let mut loss = 0.0f64;
    let mut correct = 0usize;
    for sample in samples {
        let logits = model.logits_into(&sample.z, &mut zn, &mut hidden);
        let class = model.class_of(sample.label);
        if argmax(&logits) == class {
            correct += 1;
        }
        let l64: [f64; N_CLASSES] =
            [logits[0] as f64, logits[1] as f64, logits[2] as f64, logits[3] as f64];
        let m = l64.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + l64.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
        loss += -weights[class] * (l64[class] - lse);
    }
    (loss / samples.len() as f64, correct as f64 / samples.len() as f64)
}

/// Classification accuracy over a sample set.
pub fn accuracy(model: &MlpModel, samples: &[Sample]) -> f64 {
    evaluate(model, samples, &[1.0; N_CLASSES]).1
}

/// Minibatch Adam training with a seeded per-epoch shuffle. Validation
/// metrics are recorded every epoch; the returned model is whatever the
/// last epoch produced — no early stopping, no weight decay.
pub fn train(
    model: &mut MlpModel,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    model.check_shapes()?;
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    if train_set.is_empty() {
        return Err(Error::Train("training split is empty".into()));
    }

    let n_params = model.w1.len() + model.b1.len() + model.w2.len() + N_CLASSES;
    let mut adam = AdamState::new(n_params);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rng = seeding::stream_rng(cfg.seed, 0x7e41);
    let mut batch: Vec<Sample> = Vec::with_capacity(cfg.batch_size.min(train_set.len()));
    let mut history = Vec::with_capacity(cfg.epochs);

    use rand::seq::SliceRandom;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut epoch_correct = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train_set[i]));
            let (loss, n_correct, grads) = loss_grad_stats(model, &batch, &cfg.class_weights)?;
            if !loss.is_finite() {
                return Err(Error::Train(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_idx}"
                )));
            }
            adam.step(model, &grads, cfg);
            epoch_loss += loss * chunk.len() as f64;
            epoch_correct += n_correct;
        }
        let (val_loss, val_acc) = evaluate(model, val_set, &cfg.class_weights);
        history.push(EpochStats {
            epoch,
            train_loss: epoch_loss / train_set.len() as f64,
            train_acc: epoch_correct as f64 / train_set.len() as f64,
            val_loss,
            val_acc,
        });
    }
    Ok(history)
}

/// Writes a training history as CSV.
pub fn write_history_csv<W: Write>(history: &[EpochStats], mut out: W) -> Result<()> {
    writeln!(out, "epoch,train_loss,train_acc,val_loss,val_acc")?;
    for h in history {
        writeln!(out, "{},{},{},{},{}", h.epoch, h.train_loss, h.train_acc, h.val_loss, h.val_acc)?;
    }
    Ok(())
}

/// The trained classifier wrapped as a closed-loop switching policy, with
/// reusable scratch buffers so a decision allocates nothing.
pub struct NeuralPolicy {
    model: MlpModel,
    zn: Vec<f32>,
    hidden: Vec<f32>,
}

impl NeuralPolicy {
    pub fn new(model: MlpModel) -> Self {
        assert_eq!(model.n_in, 6, "closed-loop policies consume the 6-feature measurement vector");
        let zn = vec![0.0f32; model.n_in];
        let hidden = vec![0.0f32; model.n_hidden];
        NeuralPolicy { model, zn, hidden }
    }

    pub fn model(&self) -> &MlpModel {
        &self.model
    }
}

impl SwitchingPolicy for NeuralPolicy {
    fn decide(&mut self, z: &FeatureVector) -> SwitchMode {
        let logits = self.model.logits_into(&z.to_f32(), &mut self.zn, &mut self.hidden);
        self.model.mode_order[argmax(&logits)]
    }
}
