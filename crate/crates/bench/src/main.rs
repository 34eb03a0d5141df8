use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use clr_bench::commands::{cmd_bench, cmd_fit, cmd_gen, cmd_metrics, cmd_predict, FitArgs};
use clr_bench::io::{self, TruthFile};
use clr_bench::{BenchError, SweepConfig};
use clr_core::em::{Algorithm, EmConfig};

#[derive(Parser)]
#[command(name = "clr", version, about = "Clusterwise linear regression toolkit")]
struct Cli {
    /// Overrides the configured base seed (or fit seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sweeps.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the problem suite described by a sweep config.
    Gen {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fit one dataset CSV.
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// Truth file for ACC.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value = "em_is")]
        algorithm: Algorithm,
        /// Engine settings (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Cluster count; defaults to the config, then the truth file.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        restarts: Option<usize>,
        /// Also store the N x K membership matrix in the model file.
        #[arg(long)]
        weights: bool,
    },
    /// Run a parameter sweep.
    Bench {
        #[arg(long)]
        config: PathBuf,
    },
    /// Resolvability, RMSE and (with truth) ACC of a model on a dataset.
    Metrics {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-cluster predictions with probabilities and XP for new X rows.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        density: PathBuf,
        /// CSV with columns x1..xp.
        #[arg(long)]
        x: PathBuf,
        /// Output CSV; defaults to `<out-dir>/predictions.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_sweep(path: &Path, cli: &Cli) -> Result<SweepConfig, BenchError> {
    let mut cfg = SweepConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.base_seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.cmd {
        Cmd::Gen { config } => {
            let cfg = load_sweep(config, cli)?;
            let s = cmd_gen(&cfg, &cli.out_dir)?;
            for e in &s.errors {
                eprintln!("cell {} replicate {}: {}", e.cell_id, e.replicate, e.error);
            }
            println!("wrote {} datasets to {}", s.datasets.len(), cli.out_dir.display());
        }
        Cmd::Fit {
            data,
            truth,
            algorithm,
            config,
            k,
            restarts,
            weights,
        } => {
            let (mut em, k_in_config) = match config {
                Some(p) => {
                    let table: toml::Table = io::read_text(p)?.parse().map_err(|e| BenchError::parse(p, e))?;
                    let k_in_config = table.contains_key("k");
                    let em: EmConfig = table.try_into().map_err(|e| BenchError::parse(p, e))?;
                    (em, k_in_config)
                }
                None => (EmConfig::default(), false),
            };
            if let Some(k) = k {
                em.k = *k;
            } else if !k_in_config {
                if let Some(t) = truth {
                    em.k = TruthFile::load(t)?.0.spec.k;
                }
            }
            if let Some(r) = restarts {
                em.restarts = *r;
            }
            if let Some(s) = cli.seed {
                em.seed = s;
            }
            let rec = cmd_fit(&FitArgs {
                data: data.clone(),
                truth: truth.clone(),
                algorithm: *algorithm,
                em,
                out_dir: cli.out_dir.clone(),
                with_weights: *weights,
            })?;
            println!("{}", serde_json::to_string_pretty(&rec).context("serializing fit record")?);
        }
        Cmd::Bench { config } => {
            let cfg = load_sweep(config, cli)?;
            let out = cmd_bench(&cfg, &cli.out_dir)?;
            let failed = out.records.iter().filter(|r| !r.error.is_empty()).count();
            println!(
                "{} records ({} with errors) -> {}, {}",
                out.records.len(),
                failed,
                out.results.display(),
                out.aggregates.display()
            );
        }
        Cmd::Metrics { model, data, truth, out } => {
            let rep = cmd_metrics(model, data, truth.as_deref())?;
            let text = serde_json::to_string_pretty(&rep).context("serializing report")?;
            match out {
                Some(p) => io::write_text(p, &(text + "\n"))?,
                None => println!("{text}"),
            }
        }
        Cmd::Predict { model, density, x, out } => {
            let out = out.clone().unwrap_or_else(|| cli.out_dir.join("predictions.csv"));
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                io::ensure_dir(dir)?;
            }
            let n = cmd_predict(model, density, x, &out)?;
            println!("wrote {n} predictions to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<BenchError>().map_or(1, BenchError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
