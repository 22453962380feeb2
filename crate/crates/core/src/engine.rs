//! Federated round loop: scouting losses, client selection, parallel FedProx
//! local training, FedAvg aggregation and metadata bookkeeping.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::baselines::{self, BaselineConfig, BaselineKind};
use crate::data::{
    self, average_distribution, dirichlet_partition, label_distribution,
    weighted_average_distribution, AverageMode, ClientShard, Dataset, LabelDistribution,
};
use crate::error::{FedError, Result};
use crate::exec::{self, Parallelism};
use crate::metrics;
use crate::model::{self, ModelParams, TrainConfig};
use crate::rng::{self, Purpose};
use crate::scoring::{self, ClientMetadata, ScoreComponents, SelectorConfig};

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        n_classes: usize,
        n_features: usize,
        n_per_class: usize,
        class_separation: f64,
    },
    Csv {
        path: PathBuf,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic {
            n_classes: 10,
            n_features: 10,
            n_per_class: 100,
            class_separation: 3.0,
        }
    }
}

/// Which client selector to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SelectorSpec {
    HeteroSelect(SelectorConfig),
    Random {
        subset_size: usize,
    },
    PowerOfChoice {
        subset_size: usize,
        #[serde(default)]
        candidate_count: Option<usize>,
    },
    OortLike {
        subset_size: usize,
        #[serde(default = "default_exploration")]
        exploration_fraction: f64,
    },
}

fn default_exploration() -> f64 {
    0.2
}

impl SelectorSpec {
    pub fn subset_size(&self) -> usize {
        match self {
            SelectorSpec::HeteroSelect(c) => c.subset_size,
            SelectorSpec::Random { subset_size }
            | SelectorSpec::PowerOfChoice { subset_size, .. }
            | SelectorSpec::OortLike { subset_size, .. } => *subset_size,
        }
    }

    pub fn baseline(&self) -> Option<BaselineConfig> {
        let mut cfg = match self {
            SelectorSpec::HeteroSelect(_) => return None,
            SelectorSpec::Random { subset_size } => {
                BaselineConfig::new(BaselineKind::Random, *subset_size)
            }
            SelectorSpec::PowerOfChoice {
                subset_size,
                candidate_count,
            } => {
                let mut c = BaselineConfig::new(BaselineKind::PowerOfChoice, *subset_size);
                c.candidate_count = *candidate_count;
                c
            }
            SelectorSpec::OortLike {
                subset_size,
                exploration_fraction,
            } => {
                let mut c = BaselineConfig::new(BaselineKind::OortLike, *subset_size);
                c.exploration_fraction = *exploration_fraction;
                c
            }
        };
        cfg.subset_size = self.subset_size();
        Some(cfg)
    }

    fn validate(&self, n_clients: usize) -> Result<()> {
        match self {
            SelectorSpec::HeteroSelect(c) => c.validate(n_clients),
            _ => self.baseline().expect("baseline").validate(n_clients),
        }
    }
}

fn default_test_fraction() -> f64 {
    0.2
}

/// Full description of one simulated federation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub label: String,
    #[serde(default)]
    pub dataset: DatasetSpec,
    /// Number of clients `K`.
    #[serde(rename = "K")]
    pub clients: usize,
    pub dirichlet_alpha: f64,
    /// Number of rounds `T`.
    #[serde(rename = "T")]
    pub rounds: usize,
    pub selector: SelectorSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub parallelism: Parallelism,
    /// Weight the FedAvg mean by client sample counts instead of `1/m`.
    #[serde(default)]
    pub weighted_aggregation: bool,
    /// Record selected-subset and all-client gradient heterogeneity each round.
    #[serde(default)]
    pub track_heterogeneity: bool,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients < 2 {
            return Err(FedError::config("K must be at least 2"));
        }
        if self.rounds < 1 {
            return Err(FedError::config("T must be at least 1"));
        }
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return Err(FedError::config("dirichlet_alpha must be > 0"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(FedError::config("test_fraction must lie in (0, 1)"));
        }
        self.selector.validate(self.clients)?;
        self.train.validate()
    }

    fn selector_config(&self) -> Option<&SelectorConfig> {
        match &self.selector {
            SelectorSpec::HeteroSelect(c) => Some(c),
            _ => None,
        }
    }
}

/// Static state of a federation: data, shards and the initial model.
#[derive(Debug, Clone)]
pub struct Federation {
    pub train: Dataset,
    pub test: Dataset,
    pub shards: Vec<ClientShard>,
    pub distributions: Vec<LabelDistribution>,
    pub average: LabelDistribution,
    pub initial: ModelParams,
}

impl Federation {
    /// Builds data, split, partition and initial parameters from `cfg`.
    /// Every random choice is keyed by `cfg.master_seed`.
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.master_seed;
        let full = match &cfg.dataset {
            DatasetSpec::Synthetic {
                n_classes,
                n_features,
                n_per_class,
                class_separation,
            } => data::generate_synthetic(
                rng::mix(&[seed, Purpose::Data as u64]),
                *n_classes,
                *n_features,
                *n_per_class,
                *class_separation,
            )?,
            DatasetSpec::Csv { path } => Dataset::from_csv(path)?,
        };
        let (train_idx, test_idx) =
            data::stratified_split(&full, cfg.test_fraction, &mut rng::stream(seed, Purpose::Split, 0, 0))?;
        let train = full.subset(&train_idx)?;
        let test = full.subset(&test_idx)?;
        let shards = dirichlet_partition(
            &train,
            cfg.clients,
            cfg.dirichlet_alpha,
            rng::mix(&[seed, Purpose::Partition as u64]),
        )?;
        let c = train.n_classes();
        let distributions = shards
            .iter()
            .map(|s| label_distribution(&train, s, c))
            .collect::<Result<Vec<_>>>()?;
        let mode = cfg
            .selector_config()
            .map(|s| s.average_mode)
            .unwrap_or_default();
        let average = match mode {
            AverageMode::ClientUniform => average_distribution(&distributions)?,
            AverageMode::SampleWeighted => {
                let w: Vec<f64> = shards.iter().map(|s| s.len() as f64).collect();
                weighted_average_distribution(&distributions, &w)?
            }
        };
        let initial = model::init_params(
            train.n_features(),
            c,
            &mut rng::stream(seed, Purpose::Init, 0, 0),
        )?;
        Ok(Self {
            train,
            test,
            shards,
            distributions,
            average,
            initial,
        })
    }
}

/// Telemetry for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub selected: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub components: Option<Vec<ScoreComponents>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<Vec<f64>>,
    /// Per-client exploration lower bounds (additive scoring only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exploration_bounds: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    pub accuracy: f64,
    pub test_loss: f64,
    /// Mean of `||w_k - w_{t-1}||^2` over the selected clients.
    pub mean_drift: f64,
    /// `(B^2_sel, B^2)` at the round's starting model, when tracked.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heterogeneity: Option<(f64, f64)>,
    #[serde(skip)]
    pub aggregation_time: Duration,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub records: Vec<RoundRecord>,
    pub final_params: ModelParams,
    /// Parameters of the most accurate round.
    pub best_params: ModelParams,
    pub metadata: Vec<ClientMetadata>,
}

/// Unweighted element-wise mean.
pub fn fedavg_aggregate(locals: &[ModelParams]) -> Result<ModelParams> {
    let weights = vec![1.0; locals.len()];
    weighted_aggregate(locals, &weights)
}

/// Mean of `locals` weighted by `weights`.
pub fn weighted_aggregate(locals: &[ModelParams], weights: &[f64]) -> Result<ModelParams> {
    let first = locals
        .first()
        .ok_or_else(|| FedError::domain("nothing to aggregate"))?;
    if weights.len() != locals.len() {
        return Err(FedError::domain("one weight per model is required"));
    }
    let total: f64 = weights.iter().sum();
    let mut acc = ModelParams::zeros(first.n_features, first.n_classes);
    for (p, w) in locals.iter().zip(weights) {
        if !p.same_shape(first) {
            return Err(FedError::domain("aggregated models differ in shape"));
        }
        acc.axpy(*w, p);
    }
    acc.scale(1.0 / total);
    Ok(acc)
}

/// What a selected client sent back.
#[derive(Debug, Clone)]
pub struct LocalResult {
    pub client: usize,
    pub params: ModelParams,
    pub update_norm_sq: f64,
}

/// Appends scouting losses for every client and records participation for
/// the selected ones.
pub fn update_metadata(
    metadata: &mut [ClientMetadata],
    round: usize,
    selected: &[usize],
    local_results: &[LocalResult],
    scouting_losses: &[f64],
) -> Result<()> {
    if scouting_losses.len() != metadata.len() {
        return Err(FedError::domain("one scouting loss per client is required"));
    }
    if let Some(&bad) = selected
        .iter()
        .chain(local_results.iter().map(|r| &r.client))
        .find(|&&id| id >= metadata.len())
    {
        return Err(FedError::domain(format!("unknown client id {bad}")));
    }
    for (md, &l) in metadata.iter_mut().zip(scouting_losses) {
        md.loss_history.push((round, l));
    }
    for &id in selected {
        metadata[id].participation_count += 1;
        metadata[id].last_selected_round = Some(round);
    }
    for r in local_results {
        metadata[r.client].last_update_norm_sq = Some(r.update_norm_sq);
    }
    Ok(())
}

struct Selection {
    ids: Vec<usize>,
    scoring: Option<scoring::RoundScoring>,
}

fn select(
    cfg: &ExperimentConfig,
    fed: &Federation,
    t: usize,
    metadata: &[ClientMetadata],
    losses: &[f64],
) -> Result<Selection> {
    let mut rng = rng::stream(cfg.master_seed, Purpose::Selection, t as u64, 0);
    let k = cfg.clients;
    match &cfg.selector {
        SelectorSpec::HeteroSelect(sc) => {
            let s = scoring::score_round(t, metadata, losses, &fed.distributions, &fed.average, sc)?;
            let ids = scoring::sample_subset(&s.probabilities, sc.subset_size, &mut rng)?;
            Ok(Selection {
                ids,
                scoring: Some(s),
            })
        }
        SelectorSpec::Random { subset_size } => {
            let all: Vec<usize> = (0..k).collect();
            Ok(Selection {
                ids: baselines::random_select(&all, *subset_size, &mut rng)?,
                scoring: None,
            })
        }
        SelectorSpec::PowerOfChoice {
            subset_size,
            candidate_count,
        } => {
            let d = candidate_count.unwrap_or((2 * subset_size).min(k));
            Ok(Selection {
                ids: baselines::power_of_choice_select(losses, *subset_size, d, &mut rng)?,
                scoring: None,
            })
        }
        SelectorSpec::OortLike {
            subset_size,
            exploration_fraction,
        } => {
            // utility is the freshest loss, which the scouting pass just measured
            let mut snapshot = metadata.to_vec();
            for (md, &l) in snapshot.iter_mut().zip(losses) {
                md.loss_history.push((t, l));
            }
            Ok(Selection {
                ids: baselines::oort_like_select(
                    &snapshot,
                    *subset_size,
                    t,
                    *exploration_fraction,
                    &mut rng,
                )?,
                scoring: None,
            })
        }
    }
}

fn with_round(e: FedError, round: usize) -> FedError {
    match e {
        FedError::Divergence { client, detail, .. } => FedError::Divergence {
            round,
            client,
            detail,
        },
        other => other,
    }
}

/// Runs every round of `cfg` on a freshly built federation.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let fed = Federation::build(cfg)?;
    run_on(cfg, &fed)
}

/// Runs every round of `cfg` on an existing federation.
pub fn run_on(cfg: &ExperimentConfig, fed: &Federation) -> Result<ExperimentResult> {
    cfg.validate()?;
    if fed.shards.len() != cfg.clients {
        return Err(FedError::config("federation and config disagree on K"));
    }
    let mode = cfg.parallelism;
    let test_idx = fed.test.all_indices();
    let mut global = fed.initial.clone();
    let mut metadata: Vec<ClientMetadata> = (0..cfg.clients).map(ClientMetadata::new).collect();
    let mut records = Vec::with_capacity(cfg.rounds);
    let mut best = (f64::NEG_INFINITY, global.clone());

    for t in 1..=cfg.rounds {
        let losses = exec::try_map(mode, &fed.shards, |s| {
            model::loss(&global, &fed.train, &s.sample_indices)
        })?;
        if let Some((k, l)) = losses.iter().enumerate().find(|(_, l)| !l.is_finite()) {
            return Err(FedError::Divergence {
                round: t,
                client: k,
                detail: format!("scouting loss is {l}"),
            });
        }

        let selection = select(cfg, fed, t, &metadata, &losses)?;

        let heterogeneity = if cfg.track_heterogeneity {
            let all: Vec<usize> = (0..cfg.clients).collect();
            Some((
                metrics::effective_heterogeneity(&fed.train, &fed.shards, &global, &selection.ids)?,
                metrics::effective_heterogeneity(&fed.train, &fed.shards, &global, &all)?,
            ))
        } else {
            None
        };

        let results = exec::try_map(mode, &selection.ids, |&k| {
            let mut client_rng = rng::stream(cfg.master_seed, Purpose::Training, t as u64, k as u64);
            let params =
                model::local_train_fedprox(&global, &fed.train, &fed.shards[k], &cfg.train, &mut client_rng)
                    .map_err(|e| with_round(e, t))?;
            let update_norm_sq = params.distance_sq(&global);
            Ok::<_, FedError>(LocalResult {
                client: k,
                params,
                update_norm_sq,
            })
        })?;

        let started = Instant::now();
        let locals: Vec<ModelParams> = results.iter().map(|r| r.params.clone()).collect();
        global = if cfg.weighted_aggregation {
            let w: Vec<f64> = results
                .iter()
                .map(|r| fed.shards[r.client].len() as f64)
                .collect();
            weighted_aggregate(&locals, &w)?
        } else {
            fedavg_aggregate(&locals)?
        };
        let aggregation_time = started.elapsed();

        update_metadata(&mut metadata, t, &selection.ids, &results, &losses)?;

        let accuracy = model::accuracy(&global, &fed.test, &test_idx)?;
        let test_loss = model::loss(&global, &fed.test, &test_idx)?;
        if accuracy > best.0 {
            best = (accuracy, global.clone());
        }
        let mean_drift =
            results.iter().map(|r| r.update_norm_sq).sum::<f64>() / results.len() as f64;

        let (components, scores, probabilities, bounds, temperature) = match selection.scoring {
            Some(s) => {
                let bounds = s.exploration_bounds(cfg.selector_config().expect("hetero config"));
                (
                    Some(s.components),
                    Some(s.scores),
                    Some(s.probabilities),
                    bounds,
                    Some(s.temperature),
                )
            }
            None => (None, None, None, None, None),
        };
        records.push(RoundRecord {
            round: t,
            selected: selection.ids,
            components,
            scores,
            probabilities,
            exploration_bounds: bounds,
            temperature,
            accuracy,
            test_loss,
            mean_drift,
            heterogeneity,
            aggregation_time,
        });
    }

    Ok(ExperimentResult {
        records,
        final_params: global,
        best_params: best.1,
        metadata,
    })
}
