//! The retrieval-necessity classifier: a feed-forward network with two ReLU
//! hidden layers and a logistic output, trained with Adam on binary
//! cross-entropy and selected by validation accuracy.

use std::fs;
use std::path::Path;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{ByteReader, SentenceEmbedding};
use crate::error::{Error, Result};
use crate::labeler::LabeledSet;

pub const DEFAULT_HIDDEN: (usize, usize) = (256, 64);
pub const DEFAULT_THRESHOLD: f64 = 0.5;

const MODEL_MAGIC: &[u8; 4] = b"EIMC";
const MODEL_VERSION: u32 = 1;

/// Network parameters stored flat as `[W1 | b1 | W2 | b2 | w3 | b3]`, with
/// weight matrices row-major (one row per output unit).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<F> {
    d: usize,
    h1: usize,
    h2: usize,
    data: Vec<F>,
}

fn param_count(d: usize, h1: usize, h2: usize) -> usize {
    h1 * d + h1 + h2 * h1 + h2 + h2 + 1
}

struct Offsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
}

impl<F: Float> MlpParams<F> {
    pub fn zeros(d: usize, h1: usize, h2: usize) -> Self {
        Self {
            d,
            h1,
            h2,
            data: vec![F::zero(); param_count(d, h1, h2)],
        }
    }

    pub fn from_flat(d: usize, h1: usize, h2: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != param_count(d, h1, h2) {
            return Err(Error::Validation(format!(
                "expected {} parameters for ({d}, {h1}, {h2}), got {}",
                param_count(d, h1, h2),
                data.len()
            )));
        }
        Ok(Self { d, h1, h2, data })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.d, self.h1, self.h2)
    }

    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [F] {
        &mut self.data
    }

    fn offsets(&self) -> Offsets {
        let w1 = 0;
        let b1 = w1 + self.h1 * self.d;
        let w2 = b1 + self.h1;
        let b2 = w2 + self.h2 * self.h1;
        let w3 = b2 + self.h2;
        let b3 = w3 + self.h2;
        Offsets { w1, b1, w2, b2, w3, b3 }
    }

    pub fn cast<G: Float>(&self) -> MlpParams<G> {
        MlpParams {
            d: self.d,
            h1: self.h1,
            h2: self.h2,
            data: self.data.iter().map(|v| G::from(*v).expect("float cast")).collect(),
        }
    }

    /// Hidden activations (pre-ReLU) and the output logit.
    fn activations(&self, x: &[F]) -> (Vec<F>, Vec<F>, F) {
        let o = self.offsets();
        let p = &self.data;
        let z1: Vec<F> = (0..self.h1)
            .map(|i| {
                let row = &p[o.w1 + i * self.d..o.w1 + (i + 1) * self.d];
                row.iter().zip(x).fold(p[o.b1 + i], |acc, (&w, &xv)| acc + w * xv)
            })
            .collect();
        let z2: Vec<F> = (0..self.h2)
            .map(|i| {
                let row = &p[o.w2 + i * self.h1..o.w2 + (i + 1) * self.h1];
                row.iter().zip(&z1).fold(p[o.b2 + i], |acc, (&w, &z)| acc + w * relu(z))
            })
            .collect();
        let z3 = p[o.w3..o.w3 + self.h2]
            .iter()
            .zip(&z2)
            .fold(p[o.b3], |acc, (&w, &z)| acc + w * relu(z));
        (z1, z2, z3)
    }

    pub fn logit(&self, x: &[F]) -> F {
        self.activations(x).2
    }

    pub fn probability(&self, x: &[F]) -> F {
        logistic(self.logit(x))
    }

    /// Mean binary cross-entropy over the batch.
    pub fn loss(&self, xs: &[&[F]], ys: &[F]) -> F {
        let n = F::from(xs.len()).unwrap();
        xs.iter()
            .zip(ys)
            .fold(F::zero(), |acc, (x, &y)| acc + bce_with_logit(self.logit(x), y))
            / n
    }

    /// Mean binary cross-entropy and its gradient with respect to every
    /// parameter, laid out like the parameters themselves.
    pub fn loss_and_grad(&self, xs: &[&[F]], ys: &[F]) -> (F, MlpParams<F>) {
        let o = self.offsets();
        let p = &self.data;
        let mut grad = MlpParams::zeros(self.d, self.h1, self.h2);
        let g = &mut grad.data;
        let mut total = F::zero();
        let mut dz2 = vec![F::zero(); self.h2];
        let mut dz1 = vec![F::zero(); self.h1];

        for (x, &y) in xs.iter().zip(ys) {
            let (z1, z2, z3) = self.activations(x);
            total = total + bce_with_logit(z3, y);
            let dz3 = logistic(z3) - y;

            g[o.b3] = g[o.b3] + dz3;
            for i in 0..self.h2 {
                g[o.w3 + i] = g[o.w3 + i] + dz3 * relu(z2[i]);
                dz2[i] = if z2[i] > F::zero() {
                    dz3 * p[o.w3 + i]
                } else {
                    F::zero()
                };
            }

            dz1.iter_mut().for_each(|v| *v = F::zero());
            for i in 0..self.h2 {
                if dz2[i] == F::zero() {
                    continue;
                }
                g[o.b2 + i] = g[o.b2 + i] + dz2[i];
                let row = o.w2 + i * self.h1;
                for j in 0..self.h1 {
                    g[row + j] = g[row + j] + dz2[i] * relu(z1[j]);
                    dz1[j] = dz1[j] + dz2[i] * p[row + j];
                }
            }

            for j in 0..self.h1 {
                if z1[j] <= F::zero() || dz1[j] == F::zero() {
                    continue;
                }
                g[o.b1 + j] = g[o.b1 + j] + dz1[j];
                let row = o.w1 + j * self.d;
                for k in 0..self.d {
                    g[row + k] = g[row + k] + dz1[j] * x[k];
                }
            }
        }

        let n = F::from(xs.len()).unwrap();
        g.iter_mut().for_each(|v| *v = *v / n);
        (total / n, grad)
    }
}

fn relu<F: Float>(z: F) -> F {
    if z > F::zero() {
        z
    } else {
        F::zero()
    }
}

fn logistic<F: Float>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

/// `-[y ln σ(z) + (1-y) ln(1-σ(z))]`, evaluated without overflow.
fn bce_with_logit<F: Float>(z: F, y: F) -> F {
    z.max(F::zero()) - z * y + (F::one() + (-z.abs()).exp()).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub seed: u64,
    /// Epoch whose parameters were kept; 0 for an untrained model.
    pub best_epoch: u32,
    pub val_accuracy: f32,
    /// Embedding layer the model was trained on.
    pub layer: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub params: MlpParams<f32>,
    pub meta: ModelMeta,
}

pub fn init_model(d: usize, h1: usize, h2: usize, seed: u64) -> Result<ClassifierModel> {
    if d == 0 || h1 == 0 || h2 == 0 {
        return Err(Error::Validation(format!(
            "layer sizes must be >= 1, got ({d}, {h1}, {h2})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = MlpParams::<f32>::zeros(d, h1, h2);
    let o = params.offsets();
    for (start, fan_in, fan_out) in [(o.w1, d, h1), (o.w2, h1, h2), (o.w3, h2, 1)] {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
        for w in &mut params.data[start..start + fan_in * fan_out] {
            *w = rng.random_range(-limit..=limit);
        }
    }
    Ok(ClassifierModel {
        params,
        meta: ModelMeta {
            seed,
            best_epoch: 0,
            val_accuracy: 0.0,
            layer: 0,
        },
    })
}

impl ClassifierModel {
    pub fn input_dim(&self) -> usize {
        self.params.d
    }

    fn check_dim(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.params.d {
            return Err(Error::Validation(format!(
                "embedding has dimension {}, model expects {}",
                x.len(),
                self.params.d
            )));
        }
        Ok(())
    }

    pub fn forward_values(&self, x: &[f32]) -> Result<f32> {
        self.check_dim(x)?;
        Ok(self.params.probability(x))
    }

    /// Probability that retrieval helps for this question.
    pub fn forward(&self, x: &SentenceEmbedding) -> Result<f32> {
        self.forward_values(&x.values)
    }

    /// 1 (retrieve) iff the forward probability is at least `threshold`.
    pub fn decide(&self, x: &SentenceEmbedding, threshold: f64) -> Result<u8> {
        check_threshold(threshold)?;
        Ok(u8::from(self.forward(x)? as f64 >= threshold))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn encode(&self) -> Vec<u8> {
        let (d, h1, h2) = self.params.dims();
        let mut out = Vec::with_capacity(40 + self.params.data.len() * 4);
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        for n in [d, h1, h2] {
            out.extend_from_slice(&(n as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.meta.seed.to_le_bytes());
        out.extend_from_slice(&self.meta.best_epoch.to_le_bytes());
        out.extend_from_slice(&self.meta.layer.to_le_bytes());
        out.extend_from_slice(&self.meta.val_accuracy.to_le_bytes());
        for v in &self.params.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != MODEL_MAGIC {
            return Err(Error::Format("not a classifier model (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported model version {version}")));
        }
        let (d, h1, h2) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let meta = ModelMeta {
            seed: r.u64()?,
            best_epoch: r.u32()?,
            layer: r.u32()?,
            val_accuracy: r.f32()?,
        };
        let count = param_count(d, h1, h2);
        let remaining = bytes.len() - 40;
        if d == 0 || h1 == 0 || h2 == 0 || remaining != count * 4 {
            return Err(Error::Format(format!(
                "header declares ({d}, {h1}, {h2}) = {count} parameters but {remaining} payload bytes follow"
            )));
        }
        let data = (0..count).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("model contains non-finite parameters".into()));
        }
        Ok(Self {
            params: MlpParams { d, h1, h2, data },
            meta,
        })
    }
}

pub(crate) fn check_threshold(threshold: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Validation(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub max_epochs: u32,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            max_epochs: 50,
            batch_size: 32,
            val_fraction: 0.1,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.max_epochs == 0 {
            return Err(Error::Validation("max_epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be >= 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Validation(format!(
                "val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: u32,
    /// Mean cross-entropy over the training portion after this epoch.
    pub train_loss: f32,
    pub val_accuracy: f32,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Entry 0 describes the initial parameters.
    pub epochs: Vec<EpochStats>,
    pub best_epoch: u32,
    pub best_val_accuracy: f32,
    pub train_size: usize,
    pub val_size: usize,
    pub warnings: Vec<String>,
}

/// Stratified by label: each class contributes `round(val_fraction * n_c)`
/// examples to validation, keeping at least one of each class for training.
fn stratified_split(labels: &[u8], val_fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(rng);
        let n_val = ((val_fraction * idx.len() as f64).round() as usize).min(idx.len().saturating_sub(1));
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn accuracy(params: &MlpParams<f32>, xs: &[&[f32]], ys: &[f32]) -> f32 {
    if xs.is_empty() {
        return 0.0;
    }
    let hits = xs
        .iter()
        .zip(ys)
        .filter(|(x, &y)| (params.probability(x) >= 0.5) == (y >= 0.5))
        .count();
    hits as f32 / xs.len() as f32
}

struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    step: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [f32], grad: &[f32], cfg: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

/// Trains `model` on `data` and returns the parameters from the epoch with
/// the highest validation accuracy (earliest on ties).
///
/// If the training portion holds a single class the result is a constant
/// model whose output is the smoothed class prior.
pub fn train(model: &ClassifierModel, data: &LabeledSet, cfg: &TrainConfig) -> Result<(ClassifierModel, TrainingLog)> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(Error::Validation(format!(
            "need at least 2 labeled examples, got {}",
            data.len()
        )));
    }
    let d = model.input_dim();
    let layer = data.examples()[0].embedding.layer;
    for e in data.examples() {
        if e.embedding.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "example {} has non-finite features",
                e.query_id
            )));
        }
        if e.embedding.dim() != d {
            return Err(Error::Validation(format!(
                "example {} has dimension {}, model expects {d}",
                e.query_id,
                e.embedding.dim()
            )));
        }
    }

    let labels: Vec<u8> = data.examples().iter().map(|e| e.label).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (train_idx, val_idx) = stratified_split(&labels, cfg.val_fraction, &mut rng);
    let xs = |idx: &[usize]| -> Vec<&[f32]> {
        idx.iter()
            .map(|&i| data.examples()[i].embedding.values.as_slice())
            .collect()
    };
    let ys = |idx: &[usize]| -> Vec<f32> { idx.iter().map(|&i| labels[i] as f32).collect() };
    let (train_x, train_y) = (xs(&train_idx), ys(&train_idx));
    let (mut val_x, mut val_y) = (xs(&val_idx), ys(&val_idx));

    let mut log = TrainingLog {
        train_size: train_idx.len(),
        val_size: val_idx.len(),
        ..Default::default()
    };

    let positives = train_y.iter().filter(|&&y| y >= 0.5).count();
    if positives == 0 || positives == train_y.len() {
        let prior = (positives as f64 + 0.5) / (train_y.len() as f64 + 1.0);
        let msg = format!("training portion holds a single class; returning constant prior {prior:.4}");
        tracing::warn!("{msg}");
        log.warnings.push(msg);
        let mut params = MlpParams::<f32>::zeros(d, model.params.h1, model.params.h2);
        let b3 = params.offsets().b3;
        params.data[b3] = (prior / (1.0 - prior)).ln() as f32;
        let val_accuracy = accuracy(&params, &val_x, &val_y);
        log.best_epoch = 1;
        log.best_val_accuracy = val_accuracy;
        let meta = ModelMeta {
            seed: cfg.seed,
            best_epoch: 1,
            val_accuracy,
            layer,
        };
        return Ok((ClassifierModel { params, meta }, log));
    }

    if val_x.is_empty() {
        log.warnings
            .push("validation split is empty; selecting on training accuracy".to_string());
        val_x = train_x.clone();
        val_y = train_y.clone();
    }

    let mut params = model.params.clone();
    let mut adam = Adam::new(params.data.len());
    log.epochs.push(EpochStats {
        epoch: 0,
        train_loss: params.loss(&train_x, &train_y),
        val_accuracy: accuracy(&params, &val_x, &val_y),
    });

    let mut order: Vec<usize> = (0..train_x.len()).collect();
    let mut best: Option<(u32, f32, MlpParams<f32>)> = None;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let bx: Vec<&[f32]> = chunk.iter().map(|&i| train_x[i]).collect();
            let by: Vec<f32> = chunk.iter().map(|&i| train_y[i]).collect();
            let (loss, grad) = params.loss_and_grad(&bx, &by);
            if !loss.is_finite() || grad.data.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite loss {loss} at epoch {epoch}, batch {batch_no}"
                )));
            }
            adam.update(&mut params.data, &grad.data, cfg);
        }
        let train_loss = params.loss(&train_x, &train_y);
        if !train_loss.is_finite() {
            return Err(Error::Training(format!("non-finite training loss after epoch {epoch}")));
        }
        let val_accuracy = accuracy(&params, &val_x, &val_y);
        log.epochs.push(EpochStats {
            epoch,
            train_loss,
            val_accuracy,
        });
        if best.as_ref().is_none_or(|(_, acc, _)| val_accuracy > *acc) {
            best = Some((epoch, val_accuracy, params.clone()));
        }
    }

    let (best_epoch, best_acc, best_params) = best.expect("at least one epoch ran");
    log.best_epoch = best_epoch;
    log.best_val_accuracy = best_acc;
    let meta = ModelMeta {
        seed: cfg.seed,
        best_epoch,
        val_accuracy: best_acc,
        layer,
    };
    Ok((
        ClassifierModel {
            params: best_params,
            meta,
        },
        log,
    ))
}
