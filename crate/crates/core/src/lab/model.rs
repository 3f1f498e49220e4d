//! One-hidden-layer tanh classifier over hashed features:
//!
//! ```text
//! h     = tanh(b1 + xᵀ W1)        W1: dim × hidden (row per feature)
//! logit = b2 + w2 · h
//! score = sigmoid(logit)
//! ```
//!
//! Parameters live in f64 during training but are always representable in
//! f32, so writing a checkpoint and reading it back is lossless.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::Example;
use super::features::{featurize, SparseFeatures};
use super::LabError;
use crate::ckpt::{Checkpoint, Tensor};
use crate::metrics::{binarize, PredictionRecord, DEFAULT_THRESHOLD};

pub const W1: &str = "W1";
pub const B1: &str = "b1";
pub const W2: &str = "w2";
pub const B2: &str = "b2";

/// Stream ids carved out of a seed.
const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const LORA_STREAM: u64 = 3;

pub(crate) fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub dim: usize,
    pub hidden: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape {
            dim: 4096,
            hidden: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub shape: ModelShape,
    /// Row-major `dim × hidden`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Forward-pass intermediates for one example.
pub(crate) struct Activations {
    pub hidden: Vec<f64>,
    pub logit: f64,
}

impl ToyModel {
    pub fn zeros(shape: ModelShape) -> Self {
        ToyModel {
            shape,
            w1: vec![0.0; shape.dim * shape.hidden],
            b1: vec![0.0; shape.hidden],
            w2: vec![0.0; shape.hidden],
            b2: 0.0,
        }
    }

    /// Initial weights: `W1 ~ U(−0.05, 0.05)`, `w2 ~ U(−1/√hidden, 1/√hidden)`,
    /// zero biases. Every fine-tune from the same seed starts here.
    pub fn init(shape: ModelShape, seed: u64) -> Self {
        let mut rng = seeded(seed, INIT_STREAM);
        let mut m = Self::zeros(shape);
        for w in &mut m.w1 {
            *w = round_f32(rng.random_range(-0.05..0.05));
        }
        let bound = 1.0 / (shape.hidden as f64).sqrt();
        for w in &mut m.w2 {
            *w = round_f32(rng.random_range(-bound..bound));
        }
        m
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + 1
    }

    /// Flat parameter view, in the order W1, b1, w2, b2.
    pub fn param(&self, i: usize) -> f64 {
        let (a, b, c) = (self.w1.len(), self.b1.len(), self.w2.len());
        match i {
            i if i < a => self.w1[i],
            i if i < a + b => self.b1[i - a],
            i if i < a + b + c => self.w2[i - a - b],
            _ => self.b2,
        }
    }

    pub fn param_mut(&mut self, i: usize) -> &mut f64 {
        let (a, b, c) = (self.w1.len(), self.b1.len(), self.w2.len());
        match i {
            i if i < a => &mut self.w1[i],
            i if i < a + b => &mut self.b1[i - a],
            i if i < a + b + c => &mut self.w2[i - a - b],
            _ => &mut self.b2,
        }
    }

    pub(crate) fn forward(&self, x: &SparseFeatures) -> Activations {
        let h = self.shape.hidden;
        let mut pre = self.b1.clone();
        for &(i, v) in &x.entries {
            let row = &self.w1[i * h..(i + 1) * h];
            for (p, w) in pre.iter_mut().zip(row) {
                *p += v * w;
            }
        }
        let hidden: Vec<f64> = pre.iter().map(|p| p.tanh()).collect();
        let logit = self.b2 + hidden.iter().zip(&self.w2).map(|(a, b)| a * b).sum::<f64>();
        Activations { hidden, logit }
    }

    pub fn score(&self, x: &SparseFeatures) -> f64 {
        sigmoid(self.forward(x).logit)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let f = |v: &[f64]| v.iter().map(|x| *x as f32).collect::<Vec<f32>>();
        let ModelShape { dim, hidden } = self.shape;
        Checkpoint::from_tensors([
            (W1, Tensor::from_f32(vec![dim, hidden], &f(&self.w1)).expect("shape")),
            (B1, Tensor::from_f32(vec![hidden], &f(&self.b1)).expect("shape")),
            (W2, Tensor::from_f32(vec![hidden], &f(&self.w2)).expect("shape")),
            (B2, Tensor::from_f32(vec![], &[self.b2 as f32]).expect("shape")),
        ])
        .expect("fixed names")
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, LabError> {
        let incompatible = |m: String| LabError::IncompatibleCheckpoint(m);
        let names = ckpt.tensor_names();
        if names != [W1, B1, B2, W2] {
            return Err(incompatible(format!("expected tensors W1, b1, b2, w2; found {names:?}")));
        }
        let w1 = ckpt.get(W1).expect("checked");
        let [dim, hidden] = w1.shape() else {
            return Err(incompatible(format!("W1 must be 2-D, got {:?}", w1.shape())));
        };
        let (dim, hidden) = (*dim, *hidden);
        if dim == 0 || hidden == 0 {
            return Err(incompatible("W1 has a zero extent".into()));
        }
        let expect = |name: &str, shape: &[usize]| -> Result<Vec<f64>, LabError> {
            let t = ckpt.get(name).expect("checked");
            if t.shape() != shape {
                return Err(incompatible(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t.to_f32_vec().into_iter().map(f64::from).collect())
        };
        let model = ToyModel {
            shape: ModelShape { dim, hidden },
            w1: expect(W1, &[dim, hidden])?,
            b1: expect(B1, &[hidden])?,
            w2: expect(W2, &[hidden])?,
            b2: expect(B2, &[])?[0],
        };
        Ok(model)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of `sigmoid(z)` against `y`, computed stably.
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - y * z + (-z.abs()).exp().ln_1p()
}

/// A featurized labelled example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: SparseFeatures,
    pub y: f64,
}

pub fn samples(examples: &[Example], dim: usize) -> Vec<Sample> {
    crate::par::map(examples, |e| Sample {
        x: featurize(&e.tokens, dim),
        y: f64::from(e.y_true),
    })
}

/// Dense gradient in the model's parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl Grads {
    pub fn zeros(shape: ModelShape) -> Self {
        let m = ToyModel::zeros(shape);
        Grads {
            w1: m.w1,
            b1: m.b1,
            w2: m.w2,
            b2: 0.0,
        }
    }

    pub fn get(&self, i: usize) -> f64 {
        let (a, b, c) = (self.w1.len(), self.b1.len(), self.w2.len());
        match i {
            i if i < a => self.w1[i],
            i if i < a + b => self.b1[i - a],
            i if i < a + b + c => self.w2[i - a - b],
            _ => self.b2,
        }
    }
}

/// Mean loss over `batch`.
pub fn loss(model: &ToyModel, batch: &[Sample]) -> f64 {
    batch
        .iter()
        .map(|s| bce_with_logit(model.forward(&s.x).logit, s.y))
        .sum::<f64>()
        / batch.len() as f64
}

/// Accumulates `scale · ∂loss_i/∂θ` for one sample into `g`; returns the
/// sample's loss and the hidden-layer error for callers that need it.
pub(crate) fn backprop_sample(
    model: &ToyModel,
    s: &Sample,
    scale: f64,
    g: &mut Grads,
    touched: Option<&mut Vec<usize>>,
) -> (f64, Vec<f64>) {
    let h = model.shape.hidden;
    let act = model.forward(&s.x);
    let dz = (sigmoid(act.logit) - s.y) * scale;
    g.b2 += dz;
    let mut dpre = vec![0.0; h];
    for j in 0..h {
        g.w2[j] += dz * act.hidden[j];
        dpre[j] = dz * model.w2[j] * (1.0 - act.hidden[j] * act.hidden[j]);
        g.b1[j] += dpre[j];
    }
    let mut touched = touched;
    for &(i, v) in &s.x.entries {
        if let Some(t) = touched.as_deref_mut() {
            t.push(i);
        }
        let row = &mut g.w1[i * h..(i + 1) * h];
        for (gw, d) in row.iter_mut().zip(&dpre) {
            *gw += v * d;
        }
    }
    (bce_with_logit(act.logit, s.y), dpre)
}

/// Mean loss and its exact gradient over `batch`.
pub fn loss_and_grad(model: &ToyModel, batch: &[Sample]) -> (f64, Grads) {
    let mut g = Grads::zeros(model.shape);
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for s in batch {
        total += backprop_sample(model, s, scale, &mut g, None).0;
    }
    (total * scale, g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            learning_rate: 0.1,
            batch_size: 32,
            seed: 13,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LabError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(LabError::InvalidHyper(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(LabError::InvalidHyper("batch size must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Provenance recorded in a trained checkpoint's metadata.
#[derive(Debug, Clone, Default)]
pub struct TrainProvenance {
    pub dataset_id: String,
    pub subset: String,
}

/// Mini-batch gradient descent on mean BCE, starting from `init`.
/// Single-threaded; the visiting order is a seeded shuffle per epoch.
pub fn train_from(
    init: &ToyModel,
    data: &[Sample],
    cfg: &TrainConfig,
) -> Result<ToyModel, LabError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(LabError::EmptyDataset);
    }
    let mut model = init.clone();
    let h = model.shape.hidden;
    let mut rng = seeded(cfg.seed, SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut g = Grads::zeros(model.shape);
    let mut touched = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            touched.clear();
            for &k in batch {
                epoch_loss += backprop_sample(&model, &data[k], scale, &mut g, Some(&mut touched)).0;
            }
            let lr = cfg.learning_rate;
            touched.sort_unstable();
            touched.dedup();
            for &i in &touched {
                let row = i * h..(i + 1) * h;
                for (w, gw) in model.w1[row.clone()].iter_mut().zip(&mut g.w1[row]) {
                    *w = round_f32(*w - lr * *gw);
                    *gw = 0.0;
                }
            }
            for j in 0..h {
                model.b1[j] = round_f32(model.b1[j] - lr * g.b1[j]);
                model.w2[j] = round_f32(model.w2[j] - lr * g.w2[j]);
                g.b1[j] = 0.0;
                g.w2[j] = 0.0;
            }
            model.b2 = round_f32(model.b2 - lr * g.b2);
            g.b2 = 0.0;
        }
        if !epoch_loss.is_finite() {
            return Err(LabError::DivergedTraining { epoch });
        }
    }
    Ok(model)
}

fn label_warning(data: &[Sample]) -> Option<&'static str> {
    let pos = data.iter().filter(|s| s.y == 1.0).count();
    (pos == 0 || pos == data.len()).then_some("degenerate_labels")
}

/// Writes the model plus training provenance as a checkpoint.
pub fn trained_checkpoint(
    model: &ToyModel,
    cfg: &TrainConfig,
    prov: &TrainProvenance,
    warning: Option<&str>,
) -> Checkpoint {
    let mut meta = BTreeMap::from([
        ("model".to_string(), "toy-mlp".to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
        ("dataset_id".to_string(), prov.dataset_id.clone()),
        ("subset".to_string(), prov.subset.clone()),
        ("epochs".to_string(), cfg.epochs.to_string()),
        ("learning_rate".to_string(), cfg.learning_rate.to_string()),
        ("batch_size".to_string(), cfg.batch_size.to_string()),
    ]);
    if let Some(w) = warning {
        meta.insert("warning".to_string(), w.to_string());
    }
    model.to_checkpoint().with_metadata(meta)
}

/// Fine-tunes the seed's initial model on `examples` (pooled training).
pub fn train(
    examples: &[Example],
    shape: ModelShape,
    cfg: &TrainConfig,
    prov: &TrainProvenance,
) -> Result<Checkpoint, LabError> {
    let init = ToyModel::init(shape, cfg.seed);
    train_checkpoint_from(&init, examples, cfg, prov)
}

pub fn train_checkpoint_from(
    init: &ToyModel,
    examples: &[Example],
    cfg: &TrainConfig,
    prov: &TrainProvenance,
) -> Result<Checkpoint, LabError> {
    if examples.is_empty() {
        return Err(LabError::EmptyDataset);
    }
    let data = samples(examples, init.shape.dim);
    let model = train_from(init, &data, cfg)?;
    Ok(trained_checkpoint(&model, cfg, prov, label_warning(&data)))
}

/// Fine-tunes the seed's initial model on one subgroup's examples only.
/// Single-class subgroups train anyway and carry a `warning` metadata entry.
pub fn train_subgroup(
    examples: &[Example],
    attribute: &str,
    group: &str,
    shape: ModelShape,
    cfg: &TrainConfig,
    dataset_id: &str,
) -> Result<Checkpoint, LabError> {
    let init = ToyModel::init(shape, cfg.seed);
    train_subgroup_from(&init, examples, attribute, group, cfg, dataset_id)
}

pub fn train_subgroup_from(
    init: &ToyModel,
    examples: &[Example],
    attribute: &str,
    group: &str,
    cfg: &TrainConfig,
    dataset_id: &str,
) -> Result<Checkpoint, LabError> {
    let subset = super::corpus::subset(examples, attribute, group);
    if subset.is_empty() {
        return Err(LabError::EmptyGroup(group.to_string()));
    }
    let prov = TrainProvenance {
        dataset_id: dataset_id.to_string(),
        subset: group.to_string(),
    };
    train_checkpoint_from(init, &subset, cfg, &prov)
}

pub(crate) fn lora_rng(seed: u64) -> ChaCha8Rng {
    seeded(seed, LORA_STREAM)
}

/// Scores every example with the checkpointed model and binarizes at 0.5.
pub fn predict(ckpt: &Checkpoint, examples: &[Example]) -> Result<Vec<PredictionRecord>, LabError> {
    let model = ToyModel::from_checkpoint(ckpt)?;
    Ok(predict_model(&model, examples))
}

pub fn predict_model(model: &ToyModel, examples: &[Example]) -> Vec<PredictionRecord> {
    crate::par::map(examples, |e| {
        let score = model.score(&featurize(&e.tokens, model.shape.dim));
        PredictionRecord {
            id: e.id.clone(),
            y_true: e.y_true,
            score,
            y_pred: Some(binarize(score, DEFAULT_THRESHOLD)),
            groups: e.groups.clone(),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelShape {
        ModelShape { dim: 64, hidden: 4 }
    }

    fn ex(id: usize, tokens: &[&str], y: u8, g: &str) -> Example {
        Example {
            id: format!("e{id}"),
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            y_true: y,
            groups: BTreeMap::from([("g".to_string(), g.to_string())]),
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_lossless() {
        let m = ToyModel::init(small(), 13);
        let c = m.to_checkpoint();
        assert_eq!(c.tensor_names(), vec!["W1", "b1", "b2", "w2"]);
        assert_eq!(ToyModel::from_checkpoint(&c).unwrap(), m);
    }

    #[test]
    fn incompatible_checkpoint() {
        let c = Checkpoint::from_tensors([("W1", Tensor::from_f32(vec![2], &[0.0, 0.0]).unwrap())])
            .unwrap();
        assert!(matches!(
            ToyModel::from_checkpoint(&c),
            Err(LabError::IncompatibleCheckpoint(_))
        ));
    }

    #[test]
    fn zero_weights_predict_boundary_positive() {
        let c = ToyModel::zeros(small()).to_checkpoint();
        let preds = predict(&c, &[ex(0, &["a", "b"], 0, "x")]).unwrap();
        assert_eq!(preds[0].score, 0.5);
        assert_eq!(preds[0].y_pred, Some(1));
    }

    #[test]
    fn zero_epochs_returns_init() {
        let data = samples(&[ex(0, &["a"], 1, "x")], 64);
        let init = ToyModel::init(small(), 4);
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert_eq!(train_from(&init, &data, &cfg).unwrap(), init);
    }

    #[test]
    fn bce_matches_naive_form() {
        for &(z, y) in &[(0.3, 1.0), (-2.0, 0.0), (5.0, 0.0), (-7.5, 1.0)] {
            let p = sigmoid(z);
            let naive = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            assert!((bce_with_logit(z, y) - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_inputs_rejected() {
        let cfg = TrainConfig::default();
        assert!(matches!(
            train(&[], small(), &cfg, &TrainProvenance::default()),
            Err(LabError::EmptyDataset)
        ));
        let data = [ex(0, &["a"], 1, "x")];
        assert!(matches!(
            train_subgroup(&data, "g", "y", small(), &cfg, "d"),
            Err(LabError::EmptyGroup(_))
        ));
        let bad = TrainConfig {
            batch_size: 0,
            ..cfg
        };
        assert!(train(&data, small(), &bad, &TrainProvenance::default()).is_err());
    }

    #[test]
    fn degenerate_subgroup_warns_and_trains() {
        let data = [ex(0, &["a"], 1, "x"), ex(1, &["b"], 1, "x"), ex(2, &["c"], 0, "y")];
        let cfg = TrainConfig {
            epochs: 3,
            ..Default::default()
        };
        let c = train_subgroup(&data, "g", "x", small(), &cfg, "d").unwrap();
        assert_eq!(c.metadata()["warning"], "degenerate_labels");
        assert_eq!(c.metadata()["subset"], "x");
    }
}
