//! Low-rank adapter on the first-layer weights.
//!
//! The effective weight is `W1 + (α/r)·A·B` with `A: dim × r` and
//! `B: r × hidden`. `W1`, `b1` and `w2` stay frozen; `A`, `B` and `b2` train.
//! `A` starts from `U(−1/√r, 1/√r)` and `B` from zero, so the untrained
//! adapter leaves the base model unchanged.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::corpus::Example;
use super::model::{
    bce_with_logit, lora_rng, samples, sigmoid, trained_checkpoint, Sample, ToyModel,
    TrainConfig, TrainProvenance,
};
use super::LabError;
use crate::ckpt::{Checkpoint, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub alpha: f64,
    /// Row-major `dim × rank`.
    pub a: Vec<f64>,
    /// Row-major `rank × hidden`.
    pub b: Vec<f64>,
    pub dim: usize,
    pub hidden: usize,
}

impl LoraAdapter {
    pub fn init(dim: usize, hidden: usize, rank: usize, alpha: f64, seed: u64) -> Self {
        let mut rng = lora_rng(seed);
        let bound = 1.0 / (rank as f64).sqrt();
        LoraAdapter {
            rank,
            alpha,
            a: (0..dim * rank)
                .map(|_| rng.random_range(-bound..bound) as f32 as f64)
                .collect(),
            b: vec![0.0; rank * hidden],
            dim,
            hidden,
        }
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `(α/r)·A·B`, row-major `dim × hidden`.
    pub fn delta(&self) -> Vec<f64> {
        let (r, h, s) = (self.rank, self.hidden, self.scaling());
        let mut out = vec![0.0; self.dim * h];
        for i in 0..self.dim {
            let a_row = &self.a[i * r..(i + 1) * r];
            let out_row = &mut out[i * h..(i + 1) * h];
            for (k, a) in a_row.iter().enumerate() {
                if *a == 0.0 {
                    continue;
                }
                for (o, b) in out_row.iter_mut().zip(&self.b[k * h..(k + 1) * h]) {
                    *o += s * a * b;
                }
            }
        }
        out
    }

    /// Base model with the adapter folded into `W1` (rounded to f32).
    pub fn merge_into(&self, base: &ToyModel, b2: f64) -> ToyModel {
        let mut m = base.clone();
        if self.b.iter().any(|x| *x != 0.0) {
            for (w, d) in m.w1.iter_mut().zip(self.delta()) {
                *w = (*w + d) as f32 as f64;
            }
        }
        m.b2 = b2;
        m
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let f = |v: &[f64]| v.iter().map(|x| *x as f32).collect::<Vec<f32>>();
        let mut c = Checkpoint::from_tensors([
            ("lora_A", Tensor::from_f32(vec![self.dim, self.rank], &f(&self.a)).expect("shape")),
            ("lora_B", Tensor::from_f32(vec![self.rank, self.hidden], &f(&self.b)).expect("shape")),
        ])
        .expect("fixed names");
        c.set_metadata("role", "lora_adapter");
        c.set_metadata("target", super::model::W1);
        c.set_metadata("rank", self.rank.to_string());
        c.set_metadata("alpha", self.alpha.to_string());
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig { rank: 8, alpha: 16.0 }
    }
}

struct LoraState<'a> {
    base: &'a ToyModel,
    adapter: LoraAdapter,
    b2: f64,
}

impl LoraState<'_> {
    /// Returns `(xᵀA, hidden activations, logit)` for one sample.
    fn forward(&self, s: &Sample) -> (Vec<f64>, Vec<f64>, f64) {
        let h = self.base.shape.hidden;
        let r = self.adapter.rank;
        let sc = self.adapter.scaling();
        let mut u = vec![0.0; r];
        let mut pre = self.base.b1.clone();
        for &(i, v) in &s.x.entries {
            for (p, w) in pre.iter_mut().zip(&self.base.w1[i * h..(i + 1) * h]) {
                *p += v * w;
            }
            for (uk, a) in u.iter_mut().zip(&self.adapter.a[i * r..(i + 1) * r]) {
                *uk += v * a;
            }
        }
        for (k, uk) in u.iter().enumerate() {
            for (p, b) in pre.iter_mut().zip(&self.adapter.b[k * h..(k + 1) * h]) {
                *p += sc * uk * b;
            }
        }
        let hidden: Vec<f64> = pre.iter().map(|p| p.tanh()).collect();
        let logit = self.b2 + hidden.iter().zip(&self.base.w2).map(|(a, b)| a * b).sum::<f64>();
        (u, hidden, logit)
    }
}

/// Trains a rank-`r` adapter on top of a frozen `base` and returns the
/// merged checkpoint together with the adapter.
pub fn train_lora(
    examples: &[Example],
    base: &Checkpoint,
    lora: LoraConfig,
    cfg: &TrainConfig,
    prov: &TrainProvenance,
) -> Result<(Checkpoint, LoraAdapter), LabError> {
    cfg.validate()?;
    if lora.rank == 0 {
        return Err(LabError::InvalidHyper("LoRA rank must be ≥ 1".into()));
    }
    if !(lora.alpha.is_finite() && lora.alpha > 0.0) {
        return Err(LabError::InvalidHyper("LoRA alpha must be positive".into()));
    }
    if examples.is_empty() {
        return Err(LabError::EmptyDataset);
    }
    let base_model = ToyModel::from_checkpoint(base)?;
    let data = samples(examples, base_model.shape.dim);
    let (adapter, b2) = fit_adapter(&base_model, &data, lora, cfg)?;
    let merged = adapter.merge_into(&base_model, b2);
    let mut ckpt = trained_checkpoint(&merged, cfg, prov, None);
    ckpt.set_metadata("lora_rank", lora.rank.to_string());
    ckpt.set_metadata("lora_alpha", lora.alpha.to_string());
    Ok((ckpt, adapter))
}

fn fit_adapter(
    base: &ToyModel,
    data: &[Sample],
    lora: LoraConfig,
    cfg: &TrainConfig,
) -> Result<(LoraAdapter, f64), LabError> {
    let (h, r) = (base.shape.hidden, lora.rank);
    let mut st = LoraState {
        base,
        adapter: LoraAdapter::init(base.shape.dim, h, r, lora.alpha, cfg.seed),
        b2: base.b2,
    };
    let sc = st.adapter.scaling();
    let mut rng = super::model::seeded(cfg.seed, 2);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut ga = vec![0.0; st.adapter.a.len()];
    let mut gb = vec![0.0; st.adapter.b.len()];
    let mut touched = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut gb2 = 0.0;
            touched.clear();
            for &k in batch {
                let s = &data[k];
                let (u, hidden, logit) = st.forward(s);
                epoch_loss += bce_with_logit(logit, s.y);
                let dz = (sigmoid(logit) - s.y) * scale;
                gb2 += dz;
                let dpre: Vec<f64> = (0..h)
                    .map(|j| dz * base.w2[j] * (1.0 - hidden[j] * hidden[j]))
                    .collect();
                let mut du = vec![0.0; r];
                for k2 in 0..r {
                    let b_row = &st.adapter.b[k2 * h..(k2 + 1) * h];
                    du[k2] = sc * b_row.iter().zip(&dpre).map(|(b, d)| b * d).sum::<f64>();
                    for (g, d) in gb[k2 * h..(k2 + 1) * h].iter_mut().zip(&dpre) {
                        *g += sc * u[k2] * d;
                    }
                }
                for &(i, v) in &s.x.entries {
                    touched.push(i);
                    for (g, d) in ga[i * r..(i + 1) * r].iter_mut().zip(&du) {
                        *g += v * d;
                    }
                }
            }
            let lr = cfg.learning_rate;
            touched.sort_unstable();
            touched.dedup();
            for &i in &touched {
                for (a, g) in st.adapter.a[i * r..(i + 1) * r]
                    .iter_mut()
                    .zip(&mut ga[i * r..(i + 1) * r])
                {
                    *a = (*a - lr * *g) as f32 as f64;
                    *g = 0.0;
                }
            }
            for (b, g) in st.adapter.b.iter_mut().zip(gb.iter_mut()) {
                *b = (*b - lr * *g) as f32 as f64;
                *g = 0.0;
            }
            st.b2 = (st.b2 - lr * gb2) as f32 as f64;
        }
        if !epoch_loss.is_finite() {
            return Err(LabError::DivergedTraining { epoch });
        }
    }
    Ok((st.adapter, st.b2))
}
