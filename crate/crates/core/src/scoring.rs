//! Multi-criteria client scoring and probabilistic selection.
//!
//! Each round every available client receives six component scores: a
//! normalized loss value, label-distribution diversity, loss momentum,
//! participation fairness, staleness and an update-norm penalty. The components
//! are combined additively (default) or multiplicatively, turned into selection
//! probabilities by a softmax whose temperature decays over the first
//! `horizon` rounds, and a subset of `m` clients is drawn without replacement.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AverageMode, LabelDistribution};
use crate::error::{FedError, Result};
use crate::rng::SimRng;

/// Server-side bookkeeping for one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientMetadata {
    pub client_id: usize,
    /// `(round, loss of the global model on this client's data)`, in round order.
    pub loss_history: Vec<(usize, f64)>,
    pub participation_count: usize,
    /// `None` until the client is selected for the first time.
    pub last_selected_round: Option<usize>,
    /// `||w_k - w_global||^2` from the client's most recent participation.
    pub last_update_norm_sq: Option<f64>,
}

impl ClientMetadata {
    pub fn new(client_id: usize) -> Self {
        Self {
            client_id,
            loss_history: Vec::new(),
            participation_count: 0,
            last_selected_round: None,
            last_update_norm_sq: None,
        }
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.loss_history.last().map(|&(_, l)| l)
    }
}

/// The six per-client scores for one round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreComponents {
    pub info_value: f64,
    pub diversity: f64,
    pub momentum: f64,
    pub fairness: f64,
    pub staleness: f64,
    pub norm_penalty: f64,
}

impl ScoreComponents {
    /// All components at values where they neither reward nor penalize.
    pub fn neutral() -> Self {
        Self {
            info_value: 0.0,
            diversity: 0.0,
            momentum: 0.5,
            fairness: 1.0,
            staleness: 1.0,
            norm_penalty: 1.0,
        }
    }

    /// Checks every component against its admissible range.
    pub fn check_ranges(&self, cfg: &SelectorConfig) -> Result<()> {
        let tol = 1e-12;
        let st_max = 1.0 + cfg.staleness_gamma * cfg.log_base.log(1.0 + cfg.staleness_cap as f64);
        let d_max = 2.0 * std::f64::consts::LN_2;
        let checks = [
            ("info_value", self.info_value, 0.0, 1.0),
            ("diversity", self.diversity, 0.0, d_max),
            ("momentum", self.momentum, -0.5, 1.5),
            ("fairness", self.fairness, f64::MIN_POSITIVE, 1.0),
            ("staleness", self.staleness, 1.0, st_max),
            ("norm_penalty", self.norm_penalty, 1.0 - cfg.norm_alpha, 1.0),
        ];
        for (name, v, lo, hi) in checks {
            if !(v >= lo - tol && v <= hi + tol) {
                return Err(FedError::domain(format!(
                    "{name} = {v} outside [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    #[default]
    Additive,
    Multiplicative,
}

/// Logarithm used by the staleness bonus and the exploration bound.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogBase {
    #[default]
    Natural,
    Two,
}

impl LogBase {
    pub fn log(self, x: f64) -> f64 {
        match self {
            LogBase::Natural => x.ln(),
            LogBase::Two => x.log2(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreWeights {
    pub value: f64,
    pub diversity: f64,
    pub momentum: f64,
    pub fairness: f64,
    pub staleness: f64,
    pub norm: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self {
            value: 1.0,
            diversity: 1.0,
            momentum: 1.0,
            fairness: 1.0,
            staleness: 1.0,
            norm: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectorConfig {
    pub weights: ScoreWeights,
    pub fairness_eta: f64,
    pub staleness_gamma: f64,
    pub norm_alpha: f64,
    pub base_temperature: f64,
    pub staleness_cap: usize,
    pub epsilon: f64,
    pub composition: Composition,
    pub subset_size: usize,
    /// Rounds over which diversity weight and temperature decay.
    pub horizon: f64,
    pub log_base: LogBase,
    pub average_mode: AverageMode,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self::champion(6)
    }
}

impl SelectorConfig {
    /// gamma = 0.7, eta = 0.3, tau0 = 2.0, additive, unit weights.
    pub fn champion(subset_size: usize) -> Self {
        Self {
            weights: ScoreWeights::default(),
            fairness_eta: 0.3,
            staleness_gamma: 0.7,
            norm_alpha: 0.5,
            base_temperature: 2.0,
            staleness_cap: 20,
            epsilon: 1e-8,
            composition: Composition::Additive,
            subset_size,
            horizon: 100.0,
            log_base: LogBase::Natural,
            average_mode: AverageMode::ClientUniform,
        }
    }

    pub fn validate(&self, n_clients: usize) -> Result<()> {
        let w = &self.weights;
        for (name, v) in [
            ("weights.value", w.value),
            ("weights.diversity", w.diversity),
            ("weights.momentum", w.momentum),
            ("weights.fairness", w.fairness),
            ("weights.staleness", w.staleness),
            ("weights.norm", w.norm),
        ] {
            if !v.is_finite() {
                return Err(FedError::config(format!("selector.{name} must be finite")));
            }
        }
        if !(self.fairness_eta >= 0.0 && self.fairness_eta.is_finite()) {
            return Err(FedError::config("selector.fairness_eta must be >= 0"));
        }
        if !(self.staleness_gamma >= 0.0 && self.staleness_gamma.is_finite()) {
            return Err(FedError::config("selector.staleness_gamma must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.norm_alpha) {
            return Err(FedError::config("selector.norm_alpha must lie in [0, 1]"));
        }
        if !(self.base_temperature > 0.0 && self.base_temperature.is_finite()) {
            return Err(FedError::config("selector.base_temperature must be > 0"));
        }
        if !(self.epsilon > 0.0) {
            return Err(FedError::config("selector.epsilon must be > 0"));
        }
        if !(self.horizon > 0.0) {
            return Err(FedError::config("selector.horizon must be > 0"));
        }
        if self.subset_size < 1 || self.subset_size > n_clients {
            return Err(FedError::config(format!(
                "selector.subset_size (m) must lie in [1, K = {n_clients}]"
            )));
        }
        Ok(())
    }
}

/// `(l_k - min) / (max - min + eps)` for every client.
pub fn normalized_info_values(losses: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if losses.is_empty() {
        return Err(FedError::domain("no losses to normalize"));
    }
    if let Some(bad) = losses.iter().find(|l| !l.is_finite()) {
        return Err(FedError::domain(format!("non-finite loss {bad}")));
    }
    let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min + epsilon;
    Ok(losses.iter().map(|l| (l - min) / span).collect())
}

fn kl_to_mixture(p: &[f64], m: &[f64]) -> f64 {
    p.iter()
        .zip(m)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &mi)| pi * (pi / mi).ln())
        .sum()
}

/// Jensen-Shannon divergence in nats.
pub fn js_divergence(p: &LabelDistribution, q: &LabelDistribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(FedError::domain(format!(
            "distribution lengths differ ({} vs {})",
            p.len(),
            q.len()
        )));
    }
    let m: Vec<f64> = p.probs.iter().zip(&q.probs).map(|(a, b)| 0.5 * (a + b)).collect();
    let js = 0.5 * kl_to_mixture(&p.probs, &m) + 0.5 * kl_to_mixture(&q.probs, &m);
    Ok(js.max(0.0))
}

/// Linear decay `1 - 0.5 * min(t / horizon, 1)`, shared by the diversity
/// multiplier and the temperature schedule.
fn decay(t: usize, horizon: f64) -> f64 {
    1.0 - 0.5 * (t as f64 / horizon).min(1.0)
}

/// `JS(P_k || P_avg) * 2 * (1 - 0.5 * min(t / horizon, 1))`.
pub fn diversity_score(
    client: &LabelDistribution,
    average: &LabelDistribution,
    t: usize,
    horizon: f64,
) -> Result<f64> {
    Ok(js_divergence(client, average)? * 2.0 * decay(t, horizon))
}

/// `2 / (1 + exp(-5 m)) - 0.5` with `m = (l_prev2 - l_prev1) / l_prev2`.
pub fn momentum_factor(loss_prev2: f64, loss_prev1: f64) -> Result<f64> {
    if !(loss_prev2 > 0.0) {
        return Err(FedError::domain(format!(
            "momentum needs a positive earlier loss, got {loss_prev2}"
        )));
    }
    let m = (loss_prev2 - loss_prev1) / loss_prev2;
    Ok(2.0 / (1.0 + (-5.0 * m).exp()) - 0.5)
}

/// Momentum from the two most recent recorded losses; 0.5 (the `m = 0`
/// value) when fewer than two are available.
pub fn momentum_from_history(history: &[(usize, f64)]) -> Result<f64> {
    match history {
        [.., (_, prev2), (_, prev1)] => momentum_factor(*prev2, *prev1),
        _ => Ok(0.5),
    }
}

/// `(1 + eta * h_k / h_max)^-2`; 1 when nobody has participated yet.
pub fn fairness_factor(h_k: usize, h_max: usize, eta: f64) -> Result<f64> {
    if h_k > h_max {
        return Err(FedError::domain(format!(
            "participation count {h_k} exceeds the maximum {h_max}"
        )));
    }
    if !(eta >= 0.0) {
        return Err(FedError::domain("fairness eta must be >= 0"));
    }
    if h_max == 0 {
        return Ok(1.0);
    }
    Ok((1.0 + eta * h_k as f64 / h_max as f64).powi(-2))
}

/// Rounds since the last selection. Never-selected clients count as selected
/// at round -1.
pub fn staleness(t: usize, last_selected: Option<usize>) -> Result<usize> {
    match last_selected {
        None => Ok(t + 1),
        Some(l) if l <= t => Ok(t - l),
        Some(l) => Err(FedError::domain(format!(
            "last selection round {l} is after current round {t}"
        ))),
    }
}

/// `1 + gamma * log(1 + min(delta, cap))`.
pub fn staleness_factor_from_delta(delta: usize, gamma: f64, cap: usize, base: LogBase) -> f64 {
    1.0 + gamma * base.log(1.0 + delta.min(cap) as f64)
}

pub fn staleness_factor(
    t: usize,
    last_selected: Option<usize>,
    gamma: f64,
    cap: usize,
    base: LogBase,
) -> Result<f64> {
    Ok(staleness_factor_from_delta(
        staleness(t, last_selected)?,
        gamma,
        cap,
        base,
    ))
}

/// `1 - alpha * (2 / (1 + exp(-3 r)) - 1)` with `r = norm / avg`. Clients with
/// no recorded update, or an all-zero average, get `r = 0`.
pub fn norm_penalty(update_norm_sq: Option<f64>, avg_norm_sq: f64, alpha: f64) -> Result<f64> {
    if avg_norm_sq < 0.0 || update_norm_sq.is_some_and(|n| n < 0.0) {
        return Err(FedError::domain("update norms must be non-negative"));
    }
    let r = match update_norm_sq {
        Some(n) if avg_norm_sq > 0.0 => n / avg_norm_sq,
        _ => 0.0,
    };
    Ok(1.0 - alpha * (2.0 / (1.0 + (-3.0 * r).exp()) - 1.0))
}

/// Combines the components into a single score.
pub fn compose_score(c: &ScoreComponents, cfg: &SelectorConfig) -> f64 {
    match cfg.composition {
        Composition::Additive => {
            let w = &cfg.weights;
            w.value * c.info_value
                + w.diversity * c.diversity
                + w.momentum * c.momentum
                + w.fairness * (c.fairness - 1.0)
                + w.staleness * (c.staleness - 1.0)
                + w.norm * (c.norm_penalty - 1.0)
        }
        Composition::Multiplicative => {
            c.info_value * c.diversity * c.momentum * c.fairness * c.staleness * c.norm_penalty
        }
    }
}

/// `tau0 * (1 - 0.5 * min(t / horizon, 1))`.
pub fn dynamic_temperature(t: usize, base_temperature: f64, horizon: f64) -> f64 {
    base_temperature * decay(t, horizon)
}

/// `softmax(scores / tau)`, computed with max subtraction.
pub fn selection_probabilities(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(FedError::domain("no scores"));
    }
    if !(tau > 0.0) {
        return Err(FedError::domain("temperature must be > 0"));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(FedError::domain(format!("non-finite score {bad}")));
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / tau).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Draws `m` distinct indices without replacement with Gumbel-top-k keys
/// `ln p_i + G_i`. Returned ids are sorted ascending.
pub fn sample_subset(probabilities: &[f64], m: usize, rng: &mut SimRng) -> Result<Vec<usize>> {
    let n = probabilities.len();
    if m > n {
        return Err(FedError::config(format!(
            "cannot select {m} clients from {n} candidates"
        )));
    }
    if probabilities.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
        return Err(FedError::domain("probabilities must be finite and >= 0"));
    }
    let mut keyed: Vec<(f64, usize)> = probabilities
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            // draw for every id so the stream position does not depend on p
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            let gumbel = -(-u.ln()).ln();
            let key = if p > 0.0 { p.ln() + gumbel } else { f64::NEG_INFINITY };
            (key, i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut chosen: Vec<usize> = keyed.into_iter().take(m).map(|(_, i)| i).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Parameters of the exploration lower bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundInputs {
    /// Extremes of the non-staleness part of the score over candidates.
    pub s_min: f64,
    pub s_max: f64,
    /// Effective staleness weight (`w_st * gamma` in additive mode).
    pub gamma: f64,
    pub staleness: usize,
    pub tau: f64,
    pub competitors: usize,
    pub staleness_cap: usize,
    pub log_base: LogBase,
}

/// Lower bound on the selection probability of a client with the given
/// staleness when every competitor is credited the full staleness bonus:
///
/// `e^{a/tau} / (e^{a/tau} + n_other * e^{b/tau})` with
/// `a = S_min + gamma log(1 + min(delta, cap))`, `b = S_max + gamma log(1 + cap)`.
pub fn exploration_lower_bound(b: &BoundInputs) -> Result<f64> {
    if b.s_min > b.s_max {
        return Err(FedError::domain("S_min must not exceed S_max"));
    }
    if !(b.tau > 0.0) || b.competitors < 1 {
        return Err(FedError::domain("need tau > 0 and at least one competitor"));
    }
    let own = b.s_min + b.gamma * b.log_base.log(1.0 + b.staleness.min(b.staleness_cap) as f64);
    let rival = b.s_max + b.gamma * b.log_base.log(1.0 + b.staleness_cap as f64);
    // divide through by e^{own/tau} for overflow safety
    let ratio = ((rival - own) / b.tau).exp();
    Ok(1.0 / (1.0 + b.competitors as f64 * ratio))
}

/// Everything computed while scoring one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundScoring {
    pub components: Vec<ScoreComponents>,
    pub scores: Vec<f64>,
    /// Score without its staleness term (additive mode only).
    pub base_scores: Option<Vec<f64>>,
    pub staleness: Vec<usize>,
    pub temperature: f64,
    pub probabilities: Vec<f64>,
}

impl RoundScoring {
    /// Per-client exploration lower bounds using this round's realized
    /// `S_min`/`S_max` and `K - 1` competitors. `None` in multiplicative mode,
    /// where the staleness term is not additive.
    pub fn exploration_bounds(&self, cfg: &SelectorConfig) -> Option<Vec<f64>> {
        let base = self.base_scores.as_ref()?;
        if base.len() < 2 {
            return None;
        }
        let s_min = base.iter().cloned().fold(f64::INFINITY, f64::min);
        let s_max = base.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        self.staleness
            .iter()
            .map(|&delta| {
                exploration_lower_bound(&BoundInputs {
                    s_min,
                    s_max,
                    gamma: cfg.weights.staleness * cfg.staleness_gamma,
                    staleness: delta,
                    tau: self.temperature,
                    competitors: base.len() - 1,
                    staleness_cap: cfg.staleness_cap,
                    log_base: cfg.log_base,
                })
                .ok()
            })
            .collect()
    }
}

/// Scores all clients for round `t`.
///
/// `current_losses[k]` is client `k`'s loss on the current global model. It
/// must not yet be appended to `metadata`; momentum compares it with the newest
/// recorded loss.
pub fn score_round(
    t: usize,
    metadata: &[ClientMetadata],
    current_losses: &[f64],
    distributions: &[LabelDistribution],
    average: &LabelDistribution,
    cfg: &SelectorConfig,
) -> Result<RoundScoring> {
    let k = metadata.len();
    if current_losses.len() != k || distributions.len() != k {
        return Err(FedError::domain("metadata, losses and distributions differ in length"));
    }
    let values = normalized_info_values(current_losses, cfg.epsilon)?;
    let h_max = metadata.iter().map(|m| m.participation_count).max().unwrap_or(0);
    let recorded: Vec<f64> = metadata.iter().filter_map(|m| m.last_update_norm_sq).collect();
    let avg_norm = if recorded.is_empty() {
        0.0
    } else {
        recorded.iter().sum::<f64>() / recorded.len() as f64
    };

    let mut components = Vec::with_capacity(k);
    let mut stale = Vec::with_capacity(k);
    for (i, meta) in metadata.iter().enumerate() {
        let delta = staleness(t, meta.last_selected_round)?;
        let c = ScoreComponents {
            info_value: values[i],
            diversity: diversity_score(&distributions[i], average, t, cfg.horizon)?,
            momentum: match meta.last_loss() {
                Some(prev) if prev > 0.0 => momentum_factor(prev, current_losses[i])?,
                _ => 0.5,
            },
            fairness: fairness_factor(meta.participation_count, h_max, cfg.fairness_eta)?,
            staleness: staleness_factor_from_delta(
                delta,
                cfg.staleness_gamma,
                cfg.staleness_cap,
                cfg.log_base,
            ),
            norm_penalty: norm_penalty(meta.last_update_norm_sq, avg_norm, cfg.norm_alpha)?,
        };
        c.check_ranges(cfg)
            .map_err(|e| FedError::domain(format!("client {}: {e}", meta.client_id)))?;
        components.push(c);
        stale.push(delta);
    }
    let scores: Vec<f64> = components.iter().map(|c| compose_score(c, cfg)).collect();
    let base_scores = match cfg.composition {
        Composition::Additive => Some(
            components
                .iter()
                .zip(&scores)
                .map(|(c, s)| s - cfg.weights.staleness * (c.staleness - 1.0))
                .collect(),
        ),
        Composition::Multiplicative => None,
    };
    let temperature = dynamic_temperature(t, cfg.base_temperature, cfg.horizon);
    let probabilities = selection_probabilities(&scores, temperature)?;
    Ok(RoundScoring {
        components,
        scores,
        base_scores,
        staleness: stale,
        temperature,
        probabilities,
    })
}
