//! Config-driven experiment runner: presets, overrides, seed sweeps and
//! CSV/JSONL emitters.
//!
//! A run file is a single JSON document:
//!
//! ```json
//! {
//!   "preset": "champion",
//!   "base": { "T": 60 },
//!   "experiments": [],
//!   "seeds": [1, 2, 3]
//! }
//! ```
//!
//! `preset` expands to a list of labelled experiments; `experiments` adds
//! explicit ones (each an `ExperimentConfig` object with a `label`). `base`
//! is merged over preset experiments and under explicit ones, and
//! command-line overrides (`key.path=value`) are applied last.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::engine::{self, ExperimentConfig, Federation, RoundRecord};
use crate::error::{FedError, Result};
use crate::exec;
use crate::metrics::{self, ExperimentSummary, MuDiagnostic};
use crate::rng;
use crate::scoring::SelectorConfig;

/// Names accepted by `"preset"`.
pub const PRESETS: &[&str] = &[
    "champion",
    "comparison",
    "participation",
    "ablation-gamma",
    "ablation-eta",
    "ablation-temperature",
    "ablation-participation",
    "ablation-mu",
];

/// The desk-scale non-IID task shared by all presets: 12 clients over a
/// 10-class Gaussian-blob problem with Dirichlet(0.1) label skew.
pub fn desk_task() -> Value {
    json!({
        "dataset": {
            "source": "synthetic",
            "n_classes": 10,
            "n_features": 10,
            "n_per_class": 120,
            "class_separation": 2.5
        },
        "K": 12,
        "dirichlet_alpha": 0.1,
        "T": 80,
        "test_fraction": 0.2,
        "train": {
            "local_epochs": 5,
            "learning_rate": 0.05,
            "proximal_mu": 0.1,
            "batch_size": 16
        }
    })
}

fn hetero(gamma: f64, eta: f64, tau0: f64, m: usize, composition: &str) -> Value {
    json!({
        "kind": "hetero_select",
        "subset_size": m,
        "staleness_gamma": gamma,
        "fairness_eta": eta,
        "base_temperature": tau0,
        "composition": composition
    })
}

fn experiment(label: &str, selector: Value, extra: Value) -> Value {
    let mut v = desk_task();
    merge(&mut v, &json!({ "label": label, "selector": selector }));
    merge(&mut v, &extra);
    v
}

/// Labelled experiment definitions for a preset.
pub fn preset(name: &str) -> Result<Vec<Value>> {
    let ablation = json!({ "T": 50, "train": { "local_epochs": 2, "proximal_mu": 0.01 } });
    let out = match name {
        "champion" => vec![experiment("hetero-additive", hetero(0.7, 0.3, 2.0, 6, "additive"), json!({}))],
        "comparison" => vec![
            experiment("hetero-additive", hetero(0.7, 0.3, 2.0, 6, "additive"), json!({})),
            experiment("hetero-multiplicative", hetero(0.7, 0.3, 2.0, 6, "multiplicative"), json!({})),
            experiment("oort-like", json!({ "kind": "oort_like", "subset_size": 6 }), json!({})),
            experiment("power-of-choice", json!({ "kind": "power_of_choice", "subset_size": 6 }), json!({})),
            experiment("random", json!({ "kind": "random", "subset_size": 6 }), json!({})),
        ],
        "participation" => vec![
            experiment(
                "fedavg-full",
                json!({ "kind": "random", "subset_size": 12 }),
                json!({ "train": { "proximal_mu": 0.0 } }),
            ),
            experiment("fedprox-full", json!({ "kind": "random", "subset_size": 12 }), json!({})),
            experiment("hetero-half", hetero(0.7, 0.3, 2.0, 6, "additive"), json!({})),
        ],
        "ablation-gamma" => [0.0, 0.3, 0.7, 1.0]
            .iter()
            .map(|&g| experiment(&format!("gamma-{g}"), hetero(g, 0.3, 1.0, 6, "additive"), ablation.clone()))
            .collect(),
        "ablation-eta" => [0.0, 0.3, 0.7, 1.0]
            .iter()
            .map(|&e| experiment(&format!("eta-{e}"), hetero(0.7, e, 1.0, 6, "additive"), ablation.clone()))
            .collect(),
        "ablation-temperature" => [0.1, 0.5, 1.0, 2.0, 5.0]
            .iter()
            .map(|&t| experiment(&format!("tau-{t}"), hetero(0.7, 0.3, t, 6, "additive"), ablation.clone()))
            .collect(),
        "ablation-participation" => [(25, 3), (50, 6), (80, 10)]
            .iter()
            .map(|&(pct, m)| {
                experiment(&format!("participation-{pct}"), hetero(0.7, 0.3, 1.0, m, "additive"), ablation.clone())
            })
            .collect(),
        "ablation-mu" => [("explorative", 0.7, 0.3), ("exploitative", 0.05, 0.1)]
            .iter()
            .flat_map(|&(name, g, e)| {
                [0.01, 0.1].map(|mu| {
                    experiment(
                        &format!("{name}-mu-{mu}"),
                        hetero(g, e, 2.0, 6, "additive"),
                        json!({ "T": 50, "train": { "local_epochs": 2, "proximal_mu": mu } }),
                    )
                })
            })
            .collect(),
        other => {
            return Err(FedError::config(format!(
                "preset: unknown preset `{other}` (known: {})",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(out)
}

/// Recursively merges `patch` into `target`; objects merge, everything else
/// replaces.
pub fn merge(target: &mut Value, patch: &Value) {
    match (target, patch) {
        (Value::Object(t), Value::Object(p)) => {
            for (k, v) in p {
                merge(t.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (t, p) => *t = p.clone(),
    }
}

/// Applies a `dotted.key=value` override. The value is parsed as JSON when
/// possible and taken as a string otherwise.
pub fn apply_override(target: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| FedError::config(format!("override `{spec}` is not key=value")))?;
    if path.is_empty() {
        return Err(FedError::config(format!("override `{spec}` has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = target;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(o) => o,
            _ => {
                return Err(FedError::config(format!(
                    "override `{path}`: `{}` is not an object",
                    parts[..i].join(".")
                )))
            }
        };
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        node = obj
            .entry((*part).to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("loop returns on the last path component")
}

/// Deserializes a config value, naming the offending field on failure.
pub fn parse_experiment(value: Value) -> Result<ExperimentConfig> {
    let label = value
        .get("label")
        .and_then(Value::as_str)
        .unwrap_or("<unlabelled>")
        .to_string();
    check_selector_fields(&label, &value)?;
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            FedError::config(format!("experiment `{label}`: {}", e.inner()))
        } else {
            FedError::config(format!("experiment `{label}`: field `{path}`: {}", e.inner()))
        }
    })?;
    cfg.validate()
        .map_err(|e| FedError::config(format!("experiment `{label}`: {e}")))?;
    Ok(cfg)
}

// Tagged enums buffer their content, which hides the field path from
// serde_path_to_error. Deserialize the selector body on its own first.
fn check_selector_fields(label: &str, value: &Value) -> Result<()> {
    let Some(Value::Object(sel)) = value.get("selector") else {
        return Ok(());
    };
    if sel.get("kind").and_then(Value::as_str) != Some("hetero_select") {
        return Ok(());
    }
    let mut body = sel.clone();
    body.remove("kind");
    serde_path_to_error::deserialize::<_, SelectorConfig>(Value::Object(body))
        .map(drop)
        .map_err(|e| {
            FedError::config(format!(
                "experiment `{label}`: field `selector.{}`: {}",
                e.path(),
                e.inner()
            ))
        })
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunFile {
    #[serde(default)]
    preset: Option<String>,
    #[serde(default)]
    base: Option<Value>,
    #[serde(default)]
    experiments: Vec<Value>,
    #[serde(default)]
    seeds: Option<Vec<u64>>,
}

/// A fully resolved run: experiments ready to execute, one per label.
#[derive(Debug, Clone)]
pub struct RunPlan {
    pub experiments: Vec<ExperimentConfig>,
    pub seeds: Vec<u64>,
    pub config_hash: u64,
}

/// Resolves a run file's JSON text plus overrides and optional seed list.
pub fn plan_from_str(text: &str, overrides: &[String], seeds: Option<Vec<u64>>) -> Result<RunPlan> {
    let file: RunFile = serde_path_to_error::deserialize(&mut serde_json::Deserializer::from_str(text))
        .map_err(|e| FedError::config(format!("run file: field `{}`: {}", e.path(), e.inner())))?;
    let base = file.base.clone().unwrap_or_else(|| json!({}));
    let mut raw = Vec::new();
    if let Some(name) = &file.preset {
        for mut exp in preset(name)? {
            merge(&mut exp, &base);
            raw.push(exp);
        }
    }
    for exp in &file.experiments {
        let mut v = base.clone();
        merge(&mut v, exp);
        raw.push(v);
    }
    if raw.is_empty() {
        return Err(FedError::config("run file defines no experiments (set `preset` or `experiments`)"));
    }
    let mut experiments = Vec::with_capacity(raw.len());
    let mut canonical = Vec::with_capacity(raw.len());
    for (i, mut v) in raw.into_iter().enumerate() {
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        if v.get("label").and_then(Value::as_str).is_none_or(str::is_empty) {
            apply_override(&mut v, &format!("label=experiment-{i}"))?;
        }
        let cfg = parse_experiment(v)?;
        canonical.push(serde_json::to_string(&cfg).expect("config serializes"));
        experiments.push(cfg);
    }
    let mut labels: Vec<&str> = experiments.iter().map(|e| e.label.as_str()).collect();
    labels.sort_unstable();
    if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
        return Err(FedError::config(format!("duplicate experiment label `{}`", w[0])));
    }
    let seeds = seeds.or(file.seeds).unwrap_or_else(|| vec![0]);
    if seeds.is_empty() {
        return Err(FedError::config("seeds: at least one seed is required"));
    }
    let config_hash = fnv1a(canonical.join("\n").as_bytes());
    Ok(RunPlan {
        experiments,
        seeds,
        config_hash,
    })
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// One finished `(experiment, seed)` pair.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub label: String,
    pub seed: u64,
    pub summary: ExperimentSummary,
    pub records: Vec<RoundRecord>,
    pub mu: Option<MuDiagnostic>,
}

/// Summary row as written to CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub label: String,
    pub seed: u64,
    pub peak_acc: f64,
    pub final_acc: f64,
    pub stable_acc: f64,
    pub stability_drop: f64,
    pub selection_std: f64,
}

impl From<&RunOutcome> for SummaryRow {
    fn from(o: &RunOutcome) -> Self {
        Self {
            label: o.label.clone(),
            seed: o.seed,
            peak_acc: o.summary.peak_accuracy,
            final_acc: o.summary.final_accuracy,
            stable_acc: o.summary.stable_accuracy,
            stability_drop: o.summary.stability_drop,
            selection_std: o.summary.selection_count_std,
        }
    }
}

pub const SUMMARY_HEADER: &str = "label,seed,peak_acc,final_acc,stable_acc,stability_drop,selection_std";

/// Writes the summary CSV (header plus one row per experiment and seed).
pub fn emit_summary(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{SUMMARY_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            csv_field(&r.label),
            r.seed,
            r.peak_acc,
            r.final_acc,
            r.stable_acc,
            r.stability_drop,
            r.selection_std
        )?;
    }
    w.flush()?;
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Serialize)]
struct PlotLine<'a> {
    round: usize,
    accuracy: f64,
    selected: &'a [usize],
    #[serde(skip_serializing_if = "Option::is_none")]
    temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    probabilities: Option<&'a [f64]>,
}

/// Writes one JSON object per round.
pub fn emit_plotdata(records: &[RoundRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        let line = PlotLine {
            round: r.round,
            accuracy: r.accuracy,
            selected: &r.selected,
            temperature: r.temperature,
            probabilities: r.probabilities.as_deref(),
        };
        serde_json::to_writer(&mut w, &line).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Bookkeeping written next to the outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub master_seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub experiment_labels: Vec<String>,
    pub files: Vec<String>,
}

/// File name for a `(label, seed)` telemetry stream.
pub fn plot_file_name(label: &str, seed: u64) -> String {
    let safe: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect();
    format!("{safe}__seed{seed}.jsonl")
}

/// Runs every experiment for every seed. Pairs run concurrently when the
/// experiments ask for parallelism; results come back in plan order.
pub fn execute(plan: &RunPlan) -> Result<Vec<RunOutcome>> {
    let jobs: Vec<(usize, u64)> = plan
        .experiments
        .iter()
        .enumerate()
        .flat_map(|(i, _)| plan.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let mode = plan
        .experiments
        .first()
        .map(|e| e.parallelism)
        .unwrap_or_default();
    exec::try_map(mode, &jobs, |&(i, seed)| {
        let mut cfg = plan.experiments[i].clone();
        cfg.master_seed = rng::mix(&[cfg.master_seed, seed]);
        let fed = Federation::build(&cfg)?;
        let out = engine::run_on(&cfg, &fed)?;
        let summary = metrics::summarize(&out.records, cfg.clients)?;
        let mu = metrics::mu_diagnostic(&cfg, &fed, &out).ok();
        Ok(RunOutcome {
            label: cfg.label.clone(),
            seed,
            summary,
            records: out.records,
            mu,
        })
    })
}

/// Executes a plan and writes `summary.csv`, one JSONL per pair and
/// `manifest.json` into `out_dir`.
pub fn run_to_dir(plan: &RunPlan, out_dir: &Path) -> Result<(Vec<RunOutcome>, RunManifest)> {
    fs::create_dir_all(out_dir)?;
    let outcomes = execute(plan)?;
    let mut files = Vec::new();
    for o in &outcomes {
        let name = plot_file_name(&o.label, o.seed);
        emit_plotdata(&o.records, &out_dir.join(&name))?;
        files.push(name);
    }
    let rows: Vec<SummaryRow> = outcomes.iter().map(SummaryRow::from).collect();
    emit_summary(&rows, &out_dir.join("summary.csv"))?;
    files.push("summary.csv".into());
    let manifest = RunManifest {
        config_hash: format!("{:016x}", plan.config_hash),
        master_seeds: plan.seeds.clone(),
        output_dir: out_dir.to_path_buf(),
        experiment_labels: plan.experiments.iter().map(|e| e.label.clone()).collect(),
        files,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::from)?;
    fs::write(out_dir.join("manifest.json"), text + "\n")?;
    Ok((outcomes, manifest))
}

/// Reads `FEDSIM_THREADS`, if set to a positive integer.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var("FEDSIM_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| FedError::config(format!("FEDSIM_THREADS=`{v}` is not a positive integer"))),
        Err(_) => Ok(None),
    }
}
