use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedsim::runner::{self, RunPlan};
use fedsim::{exec, FedError};

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Federated client-selection simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiments described by a JSON run file.
    Run {
        config: PathBuf,
        /// `key.path=value`, applied to every experiment.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Comma-separated master seeds; replaces the file's `seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Print a run file for a named preset.
    Preset { name: Option<String> },
}

fn run(config: PathBuf, overrides: Vec<String>, out: PathBuf, seeds: Option<Vec<u64>>) -> Result<(), FedError> {
    let text = std::fs::read_to_string(&config)
        .map_err(|e| FedError::Config(format!("cannot read {}: {e}", config.display())))?;
    let plan: RunPlan = runner::plan_from_str(&text, &overrides, seeds)?;
    let threads = runner::threads_from_env()?;
    let (outcomes, manifest) = exec::with_threads(threads, || runner::run_to_dir(&plan, &out))?;
    for o in &outcomes {
        let s = &o.summary;
        let mu = o
            .mu
            .map(|d| format!(" mu*={:.4}", d.mu_star))
            .unwrap_or_default();
        eprintln!(
            "{:<28} seed {:<6} peak {:.4} final {:.4} stable {:.4} drop {:.4} sel_std {:.3}{mu}",
            o.label, o.seed, s.peak_accuracy, s.final_accuracy, s.stable_accuracy, s.stability_drop,
            s.selection_count_std
        );
    }
    eprintln!(
        "wrote {} files to {} (config {})",
        manifest.files.len() + 1,
        out.display(),
        manifest.config_hash
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            overrides,
            out,
            seeds,
        } => run(config, overrides, out, seeds),
        Command::Preset { name: None } => {
            for p in runner::PRESETS {
                println!("{p}");
            }
            Ok(())
        }
        Command::Preset { name: Some(name) } => runner::preset(&name).map(|_| {
            println!("{}", serde_json::json!({ "preset": name, "seeds": [0] }));
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
