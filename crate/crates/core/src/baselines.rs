//! Reference selectors: uniform random, Power-of-Choice and an Oort-like
//! loss-greedy selector with a staleness-first exploration slice.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::rng::SimRng;
use crate::scoring::ClientMetadata;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Random,
    PowerOfChoice,
    OortLike,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    pub subset_size: usize,
    /// Power-of-Choice candidate set size `d`; defaults to `K`.
    #[serde(default)]
    pub candidate_count: Option<usize>,
    /// Share of the Oort-like selection filled by stale clients.
    #[serde(default = "default_exploration")]
    pub exploration_fraction: f64,
}

fn default_exploration() -> f64 {
    0.2
}

impl BaselineConfig {
    pub fn new(kind: BaselineKind, subset_size: usize) -> Self {
        Self {
            kind,
            subset_size,
            candidate_count: None,
            exploration_fraction: default_exploration(),
        }
    }

    pub fn validate(&self, n_clients: usize) -> Result<()> {
        let m = self.subset_size;
        if m < 1 || m > n_clients {
            return Err(FedError::config(format!(
                "selector.subset_size (m) must lie in [1, K = {n_clients}]"
            )));
        }
        if let (BaselineKind::PowerOfChoice, Some(d)) = (self.kind, self.candidate_count) {
            if d < m || d > n_clients {
                return Err(FedError::config(format!(
                    "selector.candidate_count must satisfy m <= d <= K (m = {m}, d = {d}, K = {n_clients})"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.exploration_fraction) {
            return Err(FedError::config("selector.exploration_fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn check_m(m: usize, n: usize) -> Result<()> {
    if m > n {
        Err(FedError::config(format!("cannot select {m} clients from {n}")))
    } else {
        Ok(())
    }
}

/// Uniform sample of `m` ids without replacement, sorted ascending.
pub fn random_select(client_ids: &[usize], m: usize, rng: &mut SimRng) -> Result<Vec<usize>> {
    check_m(m, client_ids.len())?;
    let mut out: Vec<usize> = index::sample(rng, client_ids.len(), m)
        .into_iter()
        .map(|i| client_ids[i])
        .collect();
    out.sort_unstable();
    Ok(out)
}

/// Draws `d` candidates uniformly and keeps the `m` with highest loss
/// (ties to the lower id).
pub fn power_of_choice_select(
    losses: &[f64],
    m: usize,
    d: usize,
    rng: &mut SimRng,
) -> Result<Vec<usize>> {
    let n = losses.len();
    if m > d || d > n {
        return Err(FedError::config(format!(
            "power-of-choice needs m <= d <= n (m = {m}, d = {d}, n = {n})"
        )));
    }
    let mut candidates: Vec<usize> = index::sample(rng, n, d).into_vec();
    candidates.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
    let mut out: Vec<usize> = candidates.into_iter().take(m).collect();
    out.sort_unstable();
    Ok(out)
}

/// Takes the top `round((1 - exploration_fraction) * m)` clients by last
/// recorded loss, then fills the rest with the stalest remaining clients
/// (never-selected first), breaking staleness ties uniformly at random.
/// Clients without any recorded loss are only reachable through the fill.
pub fn oort_like_select(
    metadata: &[ClientMetadata],
    m: usize,
    round: usize,
    exploration_fraction: f64,
    rng: &mut SimRng,
) -> Result<Vec<usize>> {
    let n = metadata.len();
    check_m(m, n)?;
    if !(0.0..=1.0).contains(&exploration_fraction) {
        return Err(FedError::config("exploration_fraction must lie in [0, 1]"));
    }
    let n_exploit = ((1.0 - exploration_fraction) * m as f64).round() as usize;
    let mut by_utility: Vec<(usize, f64)> = metadata
        .iter()
        .enumerate()
        .filter_map(|(i, md)| md.last_loss().map(|l| (i, l)))
        .collect();
    by_utility.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut chosen: Vec<usize> = by_utility.iter().take(n_exploit).map(|&(i, _)| i).collect();

    let mut rest: Vec<(usize, u64, usize)> = metadata
        .iter()
        .enumerate()
        .filter(|(i, _)| !chosen.contains(i))
        .map(|(i, md)| {
            let stale = match md.last_selected_round {
                None => usize::MAX,
                Some(l) => round.saturating_sub(l),
            };
            (stale, rng.random::<u64>(), i)
        })
        .collect();
    rest.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    chosen.extend(rest.into_iter().take(m - chosen.len()).map(|(_, _, i)| i));
    chosen.sort_unstable();
    Ok(chosen)
}
