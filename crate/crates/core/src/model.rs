//! Multinomial logistic regression with SGD and a FedProx proximal term.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClientShard, Dataset};
use crate::error::{FedError, Result};
use crate::rng::SimRng;

/// Weights (`n_classes x n_features`, row-major) and per-class bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub n_classes: usize,
    pub n_features: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(n_features: usize, n_classes: usize) -> Self {
        Self {
            n_classes,
            n_features,
            weights: vec![0.0; n_classes * n_features],
            bias: vec![0.0; n_classes],
        }
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.n_classes == other.n_classes && self.n_features == other.n_features
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(&self.bias)
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn norm_sq(&self) -> f64 {
        self.values().map(|v| v * v).sum()
    }

    /// Squared Euclidean distance over all parameters.
    pub fn distance_sq(&self, other: &ModelParams) -> f64 {
        self.values()
            .zip(other.values())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// `self += scale * other`
    pub fn axpy(&mut self, scale: f64, other: &ModelParams) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.values_mut().for_each(|v| *v *= s);
    }

    pub fn sub(&self, other: &ModelParams) -> ModelParams {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    fn logits_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.n_features;
        for (c, o) in out.iter_mut().enumerate() {
            let row = &self.weights[c * d..(c + 1) * d];
            *o = self.bias[c] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    /// Class scores for one sample.
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_classes];
        self.logits_into(x, &mut out);
        out
    }

    /// Argmax of the logits; ties go to the lowest class id.
    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// How the proximal pull toward the global model enters each SGD step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxStep {
    /// `w <- (w - lr * g + lr * mu * w_global) / (1 + lr * mu)`; stable for any `lr * mu`.
    #[default]
    Implicit,
    /// `w <- w - lr * (g + mu * (w - w_global))`; diverges once `lr * mu > 2`.
    Explicit,
}

/// Local training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub proximal_mu: f64,
    pub batch_size: usize,
    pub prox_step: ProxStep,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            local_epochs: 5,
            learning_rate: 0.05,
            proximal_mu: 0.1,
            batch_size: 16,
            prox_step: ProxStep::Implicit,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_epochs < 1 {
            return Err(FedError::config("train.local_epochs must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(FedError::config("train.learning_rate must be > 0"));
        }
        if !(self.proximal_mu >= 0.0 && self.proximal_mu.is_finite()) {
            return Err(FedError::config("train.proximal_mu must be >= 0"));
        }
        if self.batch_size < 1 {
            return Err(FedError::config("train.batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// Small uniform weights in `[-0.01, 0.01]`, zero bias.
pub fn init_params(n_features: usize, n_classes: usize, rng: &mut SimRng) -> Result<ModelParams> {
    if n_features < 1 || n_classes < 2 {
        return Err(FedError::config("model needs d >= 1 and C >= 2"));
    }
    let mut p = ModelParams::zeros(n_features, n_classes);
    for w in &mut p.weights {
        *w = rng.random_range(-0.01..=0.01);
    }
    Ok(p)
}

fn check_indices(indices: &[usize]) -> Result<()> {
    if indices.is_empty() {
        Err(FedError::domain("index set is empty"))
    } else {
        Ok(())
    }
}

fn log_softmax_at(logits: &[f64], class: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits[class] - lse
}

/// Mean cross-entropy over the indexed samples.
pub fn loss(params: &ModelParams, dataset: &Dataset, indices: &[usize]) -> Result<f64> {
    check_indices(indices)?;
    let mut z = vec![0.0; params.n_classes];
    let total: f64 = indices
        .iter()
        .map(|&i| {
            params.logits_into(dataset.row(i), &mut z);
            -log_softmax_at(&z, dataset.label(i))
        })
        .sum();
    Ok(total / indices.len() as f64)
}

/// Mean cross-entropy and its gradient, in one pass.
pub fn loss_and_gradient(
    params: &ModelParams,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<(f64, ModelParams)> {
    check_indices(indices)?;
    let d = params.n_features;
    let mut grad = ModelParams::zeros(d, params.n_classes);
    let mut z = vec![0.0; params.n_classes];
    let mut total = 0.0;
    for &i in indices {
        let x = dataset.row(i);
        let y = dataset.label(i);
        params.logits_into(x, &mut z);
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in z.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        total += -((z[y] / sum).ln());
        for (c, p) in z.iter().enumerate() {
            let r = p / sum - if c == y { 1.0 } else { 0.0 };
            grad.bias[c] += r;
            for (g, v) in grad.weights[c * d..(c + 1) * d].iter_mut().zip(x) {
                *g += r * v;
            }
        }
    }
    let n = indices.len() as f64;
    grad.scale(1.0 / n);
    Ok((total / n, grad))
}

/// Exact gradient of the mean cross-entropy.
pub fn gradient(params: &ModelParams, dataset: &Dataset, indices: &[usize]) -> Result<ModelParams> {
    loss_and_gradient(params, dataset, indices).map(|(_, g)| g)
}

/// Fraction of argmax-correct predictions.
pub fn accuracy(params: &ModelParams, dataset: &Dataset, indices: &[usize]) -> Result<f64> {
    check_indices(indices)?;
    let correct = indices
        .iter()
        .filter(|&&i| params.predict(dataset.row(i)) == dataset.label(i))
        .count();
    Ok(correct as f64 / indices.len() as f64)
}

/// Runs `E` epochs of mini-batch SGD on
/// `L_k(w) + mu/2 * ||w - w_global||^2`, starting from `global`.
/// Batch order is reshuffled every epoch from `rng`. The proximal term is
/// applied on every mini-batch step, see [`ProxStep`].
pub fn local_train_fedprox(
    global: &ModelParams,
    dataset: &Dataset,
    shard: &ClientShard,
    cfg: &TrainConfig,
    rng: &mut SimRng,
) -> Result<ModelParams> {
    cfg.validate()?;
    if shard.is_empty() {
        return Err(FedError::domain(format!(
            "client {} has an empty shard",
            shard.client_id
        )));
    }
    let mut w = global.clone();
    let mut order = shard.sample_indices.clone();
    for _ in 0..cfg.local_epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            let (batch_loss, mut g) = loss_and_gradient(&w, dataset, batch)?;
            if !batch_loss.is_finite() {
                return Err(FedError::Divergence {
                    round: 0,
                    client: shard.client_id,
                    detail: format!("local loss became {batch_loss}"),
                });
            }
            let lr = cfg.learning_rate;
            let mu = cfg.proximal_mu;
            if mu == 0.0 {
                w.axpy(-lr, &g);
                continue;
            }
            match cfg.prox_step {
                ProxStep::Explicit => {
                    g.axpy(mu, &w.sub(global));
                    w.axpy(-lr, &g);
                }
                ProxStep::Implicit => {
                    w.axpy(-lr, &g);
                    w.axpy(lr * mu, global);
                    w.scale(1.0 / (1.0 + lr * mu));
                }
            }
        }
    }
    if !w.is_finite() {
        return Err(FedError::Divergence {
            round: 0,
            client: shard.client_id,
            detail: "parameters became non-finite".into(),
        });
    }
    Ok(w)
}
