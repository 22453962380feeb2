//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Run with `cargo test --release --test acceptance`.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use fedsim::data::LabelDistribution;
use fedsim::engine::{self, ExperimentConfig, SelectorSpec};
use fedsim::metrics;
use fedsim::model::{self, ModelParams};
use fedsim::rng::{self, Purpose};
use fedsim::runner::{self, RunOutcome};
use fedsim::scoring::{self, LogBase};

type Check = Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Check,
}

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn close(label: &str, got: f64, want: f64, tol: f64, misses: &mut Vec<String>) {
    if (got - want).abs() > tol || !got.is_finite() {
        misses.push(format!("{label}: got {got:.10}, want {want} ± {tol}"));
    }
}

fn sweep(preset: &str, overrides: &[&str], seeds: std::ops::Range<u64>) -> Vec<RunOutcome> {
    let text = format!(r#"{{"preset": "{preset}"}}"#);
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    let plan = runner::plan_from_str(&text, &overrides, Some(seeds.collect())).expect("preset plan");
    runner::execute(&plan).expect("sweep runs")
}

fn by_label<'a>(runs: &'a [RunOutcome], label: &str) -> Vec<&'a RunOutcome> {
    let mut v: Vec<&RunOutcome> = runs.iter().filter(|r| r.label == label).collect();
    v.sort_by_key(|r| r.seed);
    v
}

fn champion_config(overrides: &[&str], seed: u64) -> ExperimentConfig {
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    let plan = runner::plan_from_str(r#"{"preset": "champion"}"#, &overrides, None).expect("plan");
    let mut cfg = plan.experiments[0].clone();
    cfg.master_seed = rng::mix(&[cfg.master_seed, seed]);
    cfg
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn c1_scoring_values() -> Check {
    let mut misses = Vec::new();
    let v = scoring::normalized_info_values(&[1.0, 2.0, 3.0], 1e-8).map_err(|e| e.to_string())?;
    for (got, want) in v.iter().zip([0.0, 0.5, 1.0]) {
        close("min-max", *got, want, 1e-7, &mut misses);
    }
    let eq = scoring::normalized_info_values(&[0.4; 4], 1e-8).map_err(|e| e.to_string())?;
    if eq.iter().any(|&x| x != 0.0) {
        misses.push(format!("equal losses: {eq:?}"));
    }
    let single = scoring::normalized_info_values(&[0.7], 1e-8).map_err(|e| e.to_string())?;
    if single != [0.0] {
        misses.push(format!("single client: {single:?}"));
    }
    let m0 = scoring::momentum_factor(2.0, 2.0).map_err(|e| e.to_string())?;
    if m0 != 0.5 {
        misses.push(format!("M(m=0) = {m0}"));
    }
    let f = scoring::fairness_factor(4, 4, 0.3).map_err(|e| e.to_string())?;
    close("F(h=h_max, eta=0.3)", f, 0.591716, 1e-6, &mut misses);
    let st = scoring::staleness_factor_from_delta(5, 0.7, 20, LogBase::Natural);
    close("St(gamma=0.7, delta=5)", st, 2.254232, 1e-5, &mut misses);
    let n = scoring::norm_penalty(Some(1.0), 1.0, 0.5).map_err(|e| e.to_string())?;
    close("N(r=1, alpha=0.5)", n, 0.54743, 1e-5, &mut misses);
    let p = LabelDistribution { probs: vec![1.0, 0.0] };
    let q = LabelDistribution { probs: vec![0.0, 1.0] };
    let js = scoring::js_divergence(&p, &q).map_err(|e| e.to_string())?;
    close("JS disjoint", js, std::f64::consts::LN_2, 1e-9, &mut misses);
    if misses.is_empty() {
        Ok("min-max, M, F, St, N and JS all within tolerance".into())
    } else {
        Err(misses.join("; "))
    }
}

fn c2_exploration_bound() -> Check {
    let cfg = champion_config(&["T=60"], 0);
    let out = engine::run_experiment(&cfg).map_err(|e| e.to_string())?;
    let (mut pairs, mut violations) = (0usize, Vec::new());
    for r in &out.records {
        let probs = r.probabilities.as_ref().ok_or("round without probabilities")?;
        let bounds = r.exploration_bounds.as_ref().ok_or("round without bounds")?;
        for (k, (p, b)) in probs.iter().zip(bounds).enumerate() {
            pairs += 1;
            if *p < b * (1.0 - 1e-12) {
                violations.push(format!("round {} client {k}: p={p:.3e} < bound={b:.3e}", r.round));
            }
        }
    }
    ensure(
        violations.is_empty() && pairs == 60 * 12,
        format!(
            "{}/{pairs} (client, round) pairs satisfy p >= bound{}",
            pairs - violations.len(),
            violations.first().map(|v| format!(", first violation {v}")).unwrap_or_default()
        ),
    )
}

fn c3_starvation_freedom() -> Check {
    let runs = sweep("champion", &["T=60"], 0..30);
    let covered = runs
        .iter()
        .filter(|r| r.summary.selection_counts.iter().all(|&c| c >= 1))
        .count();
    let frac = covered as f64 / runs.len() as f64;
    ensure(
        runs.len() == 30 && frac >= 0.95,
        format!("{covered}/{} seeds select every client at least once ({frac:.3} >= 0.95)", runs.len()),
    )
}

fn c4_concentration() -> Check {
    let runs = sweep("comparison", &[], 0..30);
    let hetero = by_label(&runs, "hetero-additive");
    let poc = by_label(&runs, "power-of-choice");
    let random = by_label(&runs, "random");
    let wins = poc
        .iter()
        .zip(&hetero)
        .filter(|(p, h)| p.summary.selection_count_std > h.summary.selection_count_std)
        .count();
    let frac = wins as f64 / hetero.len() as f64;
    let std_h = mean(hetero.iter().map(|r| r.summary.selection_count_std));
    let std_p = mean(poc.iter().map(|r| r.summary.selection_count_std));
    let std_r = mean(random.iter().map(|r| r.summary.selection_count_std));
    ensure(
        hetero.len() == 30 && frac >= 0.90 && std_h <= 2.0 * std_r,
        format!(
            "PoC std > HeteRo std in {wins}/30 seeds ({frac:.3} >= 0.90); mean std PoC {std_p:.3}, \
             HeteRo {std_h:.3}, Random {std_r:.3} (HeteRo <= 2x Random: {})",
            std_h <= 2.0 * std_r
        ),
    )
}

fn c5_stability() -> Check {
    let runs = sweep("comparison", &[], 0..30);
    let add = by_label(&runs, "hetero-additive");
    let mult = by_label(&runs, "hetero-multiplicative");
    let random = by_label(&runs, "random");
    let drop_add = mean(add.iter().map(|r| r.summary.stability_drop));
    let drop_rand = mean(random.iter().map(|r| r.summary.stability_drop));
    let wins = add
        .iter()
        .zip(&mult)
        .filter(|(a, m)| a.summary.stable_accuracy >= m.summary.stable_accuracy)
        .count();
    let frac = wins as f64 / add.len() as f64;
    ensure(
        add.len() == 30 && drop_add <= drop_rand && frac >= 0.60,
        format!(
            "mean drop additive {drop_add:.4} vs random {drop_rand:.4}; additive stable >= \
             multiplicative in {wins}/30 seeds ({frac:.2} >= 0.60); mean stable add {:.4} mult {:.4}",
            mean(add.iter().map(|r| r.summary.stable_accuracy)),
            mean(mult.iter().map(|r| r.summary.stable_accuracy)),
        ),
    )
}

fn c6_drift() -> Check {
    let mus = [0.0, 0.01, 0.1, 1.0];
    let seeds: Vec<u64> = (0..20).collect();
    let per_seed = fedsim::exec::try_map(fedsim::exec::Parallelism::Rayon, &seeds, |&s| {
        metrics::drift_probe(&champion_config(&[], s), &mus)
    })
    .map_err(|e| e.to_string())?;
    let means: Vec<f64> = (0..mus.len())
        .map(|i| mean(per_seed.iter().map(|row| row[i].1)))
        .collect();
    let worst = means
        .windows(2)
        .map(|w| (w[1] - w[0]) / w[0])
        .fold(f64::NEG_INFINITY, f64::max);
    let shown: Vec<String> = mus
        .iter()
        .zip(&means)
        .map(|(m, d)| format!("mu={m}: {d:.5}"))
        .collect();
    ensure(
        worst <= 0.05,
        format!("mean drift [{}]; worst relative increase {worst:+.4} (<= 0.05)", shown.join(", ")),
    )
}

fn c7_cv_comparison() -> Check {
    let mut rng = rng::stream(7, Purpose::Selection, 0, 0);
    let cmp = metrics::cv_comparison_experiment(12, 1000, &mut rng).map_err(|e| e.to_string())?;
    ensure(
        cmp.fraction_mult_ge_add >= 0.95,
        format!(
            "fraction CV_mult >= CV_add = {:.3} (>= 0.95); mean CV mult {:.4}, add {:.4}",
            cmp.fraction_mult_ge_add, cmp.mean_cv_mult, cmp.mean_cv_add
        ),
    )
}

fn c8_gradient() -> Check {
    let mut worst: f64 = 0.0;
    for inst in 0..10u64 {
        let mut r = rng::stream(8, Purpose::Init, inst, 0);
        let ds = fedsim::data::generate_synthetic(100 + inst, 4, 5, 10, 1.5).map_err(|e| e.to_string())?;
        let idx = ds.all_indices();
        let mut w = model::init_params(5, 4, &mut r).map_err(|e| e.to_string())?;
        for (i, x) in w.weights.iter_mut().chain(w.bias.iter_mut()).enumerate() {
            *x += 0.3 * ((i as f64 * 0.7 + inst as f64).sin());
        }
        let (_, g) = model::loss_and_gradient(&w, &ds, &idx).map_err(|e| e.to_string())?;
        let flat = |p: &ModelParams| p.weights.iter().chain(&p.bias).copied().collect::<Vec<f64>>();
        let analytic = flat(&g);
        let n = analytic.len();
        let h = 1e-5;
        let mut numeric = Vec::with_capacity(n);
        for j in 0..n {
            let bump = |delta: f64| {
                let mut p = w.clone();
                if j < p.weights.len() {
                    p.weights[j] += delta;
                } else {
                    let b = j - p.weights.len();
                    p.bias[b] += delta;
                }
                model::loss(&p, &ds, &idx).expect("loss")
            };
            numeric.push((bump(h) - bump(-h)) / (2.0 * h));
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        worst = worst.max(diff / scale);
    }
    ensure(worst < 1e-5, format!("worst relative error over 10 instances {worst:.2e} (< 1e-5)"))
}

fn run_cli(config: &Path, out: &Path, threads: &str) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_fedsim"))
        .arg("run")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(["--seeds", "0,1,2"])
        .env("FEDSIM_THREADS", threads)
        .output()
        .map_err(|e| e.to_string())?;
    if status.status.success() {
        Ok(())
    } else {
        Err(format!(
            "fedsim exited with {:?}: {}",
            status.status.code(),
            String::from_utf8_lossy(&status.stderr)
        ))
    }
}

fn output_files(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv") || n.ends_with(".jsonl"))
        .map(|n| {
            let bytes = std::fs::read(dir.join(&n)).unwrap_or_default();
            (n, bytes)
        })
        .collect();
    files.sort();
    Ok(files)
}

fn c9_determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = tmp.path().join("champion.json");
    std::fs::write(&config, r#"{"preset": "champion"}"#).map_err(|e| e.to_string())?;
    let dirs: Vec<_> = ["1", "4", "1"]
        .iter()
        .enumerate()
        .map(|(i, t)| (tmp.path().join(format!("out{i}")), *t))
        .collect();
    for (dir, threads) in &dirs {
        run_cli(&config, dir, threads)?;
    }
    let reference = output_files(&dirs[0].0)?;
    let n = reference.len();
    for (dir, threads) in &dirs[1..] {
        let other = output_files(dir)?;
        if other != reference {
            return Err(format!("outputs differ with FEDSIM_THREADS={threads}"));
        }
    }
    ensure(
        n == 4,
        format!("{n} files (summary.csv + 3 JSONL) byte-identical across 3 runs with FEDSIM_THREADS 1, 4, 1"),
    )
}

fn c10_full_participation() -> Check {
    let base = champion_config(&["selector.subset_size=12"], 5);
    let mut random = base.clone();
    random.selector = SelectorSpec::Random { subset_size: 12 };
    let a = engine::run_experiment(&base).map_err(|e| e.to_string())?;
    let b = engine::run_experiment(&random).map_err(|e| e.to_string())?;
    ensure(
        a.final_params == b.final_params,
        format!(
            "final params identical at m=K=12 over {} rounds (max |diff| {:.1e})",
            base.rounds,
            a.final_params
                .weights
                .iter()
                .zip(&b.final_params.weights)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        ),
    )
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let criteria = [
        Criterion { id: 1, name: "scoring unit values", budget: Duration::from_secs(1), run: c1_scoring_values },
        Criterion { id: 2, name: "exploration-bound soundness", budget: Duration::from_secs(60), run: c2_exploration_bound },
        Criterion { id: 3, name: "starvation freedom", budget: Duration::from_secs(600), run: c3_starvation_freedom },
        Criterion { id: 4, name: "concentration ordering", budget: Duration::from_secs(600), run: c4_concentration },
        Criterion { id: 5, name: "stability ordering", budget: Duration::from_secs(1800), run: c5_stability },
        Criterion { id: 6, name: "proximal drift direction", budget: Duration::from_secs(600), run: c6_drift },
        Criterion { id: 7, name: "additive vs multiplicative CV", budget: Duration::from_secs(10), run: c7_cv_comparison },
        Criterion { id: 8, name: "gradient oracle", budget: Duration::from_secs(5), run: c8_gradient },
        Criterion { id: 9, name: "output determinism", budget: Duration::from_secs(300), run: c9_determinism },
        Criterion { id: 10, name: "full-participation reduction", budget: Duration::from_secs(60), run: c10_full_participation },
    ];
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let outcome = (c.run)();
        let took = start.elapsed();
        let over = took > c.budget;
        let (tag, detail) = match (&outcome, over) {
            (Ok(d), false) => ("PASS", d.clone()),
            (Ok(d), true) => ("FAIL", format!("{d}; over time budget {:?}", c.budget)),
            (Err(d), _) => ("FAIL", d.clone()),
        };
        if tag == "FAIL" {
            failed += 1;
        }
        println!("[{tag}] criterion {:>2} {}: {detail} ({:.2}s)", c.id, c.name, took.as_secs_f64());
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
