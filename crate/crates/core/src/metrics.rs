//! Evaluation metrics and theory diagnostics computed from round telemetry.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClientShard, Dataset};
use crate::engine::{self, ExperimentConfig, ExperimentResult, Federation, RoundRecord};
use crate::error::{FedError, Result};
use crate::model::{self, ModelParams};
use crate::rng::SimRng;
use crate::scoring::{compose_score, selection_probabilities, Composition, ScoreComponents, SelectorConfig};

/// Trailing window for the stable-accuracy mean.
pub const STABLE_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub peak_accuracy: f64,
    pub final_accuracy: f64,
    pub stable_accuracy: f64,
    pub stability_drop: f64,
    pub selection_count_std: f64,
    pub selection_counts: Vec<usize>,
    pub mean_drift: f64,
    /// Per-round `(B^2_sel, B^2)` when the run tracked it.
    pub heterogeneity: Vec<(f64, f64)>,
}

/// Peak, final and trailing-mean accuracy plus selection concentration.
pub fn summarize(records: &[RoundRecord], n_clients: usize) -> Result<ExperimentSummary> {
    let last = records
        .last()
        .ok_or_else(|| FedError::domain("cannot summarize an empty run"))?;
    let peak = records
        .iter()
        .map(|r| r.accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    let window = &records[records.len().saturating_sub(STABLE_WINDOW)..];
    let stable = window.iter().map(|r| r.accuracy).sum::<f64>() / window.len() as f64;
    let mut counts = vec![0usize; n_clients];
    for r in records {
        for &k in &r.selected {
            if k >= n_clients {
                return Err(FedError::domain(format!("client id {k} >= K = {n_clients}")));
            }
            counts[k] += 1;
        }
    }
    Ok(ExperimentSummary {
        peak_accuracy: peak,
        final_accuracy: last.accuracy,
        stable_accuracy: stable,
        stability_drop: peak - last.accuracy,
        selection_count_std: selection_concentration(&counts),
        selection_counts: counts,
        mean_drift: records.iter().map(|r| r.mean_drift).sum::<f64>() / records.len() as f64,
        heterogeneity: records.iter().filter_map(|r| r.heterogeneity).collect(),
    })
}

/// Population standard deviation of per-client selection counts.
pub fn selection_concentration(counts: &[usize]) -> f64 {
    if counts.is_empty() {
        return 0.0;
    }
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<usize>() as f64 / n;
    (counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Mean squared deviation of the selected clients' full-batch gradients from
/// the global gradient `(1/K) sum_k grad f_k`.
pub fn effective_heterogeneity(
    dataset: &Dataset,
    shards: &[ClientShard],
    params: &ModelParams,
    selected: &[usize],
) -> Result<f64> {
    if selected.is_empty() {
        return Err(FedError::domain("effective heterogeneity needs a non-empty selection"));
    }
    if shards.is_empty() {
        return Err(FedError::domain("no client shards"));
    }
    let grads = shards
        .iter()
        .map(|s| model::gradient(params, dataset, &s.sample_indices))
        .collect::<Result<Vec<_>>>()?;
    let mut global = ModelParams::zeros(params.n_features, params.n_classes);
    for g in &grads {
        global.axpy(1.0 / grads.len() as f64, g);
    }
    let mut total = 0.0;
    for &k in selected {
        let g = grads
            .get(k)
            .ok_or_else(|| FedError::domain(format!("unknown client id {k}")))?;
        total += g.distance_sq(&global);
    }
    Ok(total / selected.len() as f64)
}

/// `E * eta_l * (G^2 + B^2_sel) / ||w_0 - w*||^2`.
pub fn optimal_mu_estimate(
    local_epochs: f64,
    local_lr: f64,
    grad_sq: f64,
    heterogeneity_sq: f64,
    dist_sq: f64,
) -> Result<f64> {
    let inputs = [local_epochs, local_lr, grad_sq, heterogeneity_sq, dist_sq];
    if inputs.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(FedError::domain(format!(
            "optimal mu needs positive finite inputs, got {inputs:?}"
        )));
    }
    Ok(local_epochs * local_lr * (grad_sq + heterogeneity_sq) / dist_sq)
}

/// Measured inputs and result of the optimal-mu diagnostic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MuDiagnostic {
    pub grad_sq: f64,
    pub heterogeneity_sq: f64,
    pub dist_sq: f64,
    pub mu_star: f64,
}

/// Estimates the optimal proximal weight for a finished run, using the
/// initial model for `G^2` and `B^2` and the best-accuracy model as `w*`.
pub fn mu_diagnostic(
    cfg: &ExperimentConfig,
    fed: &Federation,
    result: &ExperimentResult,
) -> Result<MuDiagnostic> {
    let w0 = &fed.initial;
    let grad_sq = fed
        .shards
        .iter()
        .map(|s| model::gradient(w0, &fed.train, &s.sample_indices).map(|g| g.norm_sq()))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let all: Vec<usize> = (0..fed.shards.len()).collect();
    let heterogeneity_sq = effective_heterogeneity(&fed.train, &fed.shards, w0, &all)?;
    let dist_sq = w0.distance_sq(&result.best_params);
    let mu_star = optimal_mu_estimate(
        cfg.train.local_epochs as f64,
        cfg.train.learning_rate,
        grad_sq,
        heterogeneity_sq,
        dist_sq,
    )?;
    Ok(MuDiagnostic {
        grad_sq,
        heterogeneity_sq,
        dist_sq,
        mu_star,
    })
}

/// Coefficient of variation (population std over mean).
pub fn coefficient_of_variation(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CvComparison {
    /// Share of trials with `CV_mult >= CV_add`.
    pub fraction_mult_ge_add: f64,
    pub mean_cv_mult: f64,
    pub mean_cv_add: f64,
}

/// CVs of `softmax(S_mult)` and `softmax(S_add)` at `tau = 1` for one set of
/// per-client components.
pub fn cv_pair(components: &[ScoreComponents]) -> Result<(f64, f64)> {
    let add_cfg = SelectorConfig::champion(1);
    let mult_cfg = SelectorConfig {
        composition: Composition::Multiplicative,
        ..add_cfg.clone()
    };
    let mult: Vec<f64> = components.iter().map(|c| compose_score(c, &mult_cfg)).collect();
    let add: Vec<f64> = components.iter().map(|c| compose_score(c, &add_cfg)).collect();
    Ok((
        coefficient_of_variation(&selection_probabilities(&mult, 1.0)?),
        coefficient_of_variation(&selection_probabilities(&add, 1.0)?),
    ))
}

/// Monte-Carlo comparison of selection concentration under multiplicative
/// and additive composition, with six iid `U[0,1]` components per client and
/// unit weights.
pub fn cv_comparison_experiment(
    n_clients: usize,
    n_trials: usize,
    rng: &mut SimRng,
) -> Result<CvComparison> {
    if n_clients < 2 || n_trials < 1 {
        return Err(FedError::domain("need at least two clients and one trial"));
    }
    let mut wins = 0usize;
    let (mut sum_mult, mut sum_add) = (0.0, 0.0);
    for _ in 0..n_trials {
        let comps: Vec<ScoreComponents> = (0..n_clients)
            .map(|_| ScoreComponents {
                info_value: rng.random(),
                diversity: rng.random(),
                momentum: rng.random(),
                fairness: rng.random(),
                staleness: rng.random(),
                norm_penalty: rng.random(),
            })
            .collect();
        let (cv_mult, cv_add) = cv_pair(&comps)?;
        if cv_mult >= cv_add {
            wins += 1;
        }
        sum_mult += cv_mult;
        sum_add += cv_add;
    }
    let n = n_trials as f64;
    Ok(CvComparison {
        fraction_mult_ge_add: wins as f64 / n,
        mean_cv_mult: sum_mult / n,
        mean_cv_add: sum_add / n,
    })
}

/// Mean local drift `||w_k - w_t||^2` over selected clients and rounds, one
/// run per `mu` with everything else fixed.
pub fn drift_probe(base: &ExperimentConfig, mus: &[f64]) -> Result<Vec<(f64, f64)>> {
    if mus.is_empty() {
        return Err(FedError::domain("mu grid is empty"));
    }
    mus.iter()
        .map(|&mu| {
            let mut cfg = base.clone();
            cfg.train.proximal_mu = mu;
            let out = engine::run_experiment(&cfg)?;
            let drift = out.records.iter().map(|r| r.mean_drift).sum::<f64>()
                / out.records.len() as f64;
            Ok((mu, drift))
        })
        .collect()
}
