use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use thsgr::commands;
use thsgr::config::RunConfig;

/// Multimodal hyperspectral + SAR/LiDAR patch classifier.
#[derive(Parser, Debug)]
#[command(name = "thsgr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate a synthetic scene (hsi.thsg, aux.thsg, labels.thsg).
    Synth,
    /// Train a model and save model.json and loss_curve.csv.
    Train,
    /// Evaluate a saved model on the test split; writes metrics, confusion matrix and map.
    Eval,
    /// Train the four cumulative ablation variants and write ablation.csv.
    Ablate,
    /// Count FLOPs and parameters of attention vs the modulator; writes profile.csv.
    Profile,
    /// Finite-difference gradient checks of every block; exits non-zero on failure.
    Gradcheck,
}

#[derive(Args, Debug)]
struct Common {
    /// key = value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for weights, batch order and the synthetic scene
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Disable the graph encoder (branch outputs are summed)
    #[arg(long, global = true)]
    ablate_graph: bool,
    /// Disable the convolutional modulator
    #[arg(long, global = true)]
    ablate_modulator: bool,
    /// Disable the mean-forward block
    #[arg(long, global = true)]
    ablate_meanforward: bool,
    /// Worker threads (1 gives the reference single-threaded run)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override one configuration key, e.g. `--set epochs=50`
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

fn build_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for o in &c.overrides {
        cfg.set_override(o)?;
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.out = out.clone();
    }
    cfg.ablation.no_graph_encoder |= c.ablate_graph;
    cfg.ablation.no_modulator |= c.ablate_modulator;
    cfg.ablation.no_mean_forward |= c.ablate_meanforward;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<bool> {
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    let cfg = build_config(&cli.common)?;
    match cli.command {
        Command::Synth => {
            for p in commands::cmd_synth(&cfg)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Train => {
            let run = commands::cmd_train(&cfg)?;
            let last = run.outcome.curve.last().expect("at least one epoch");
            println!(
                "trained {} epochs on {} samples: loss={:.4} acc={:.4}",
                last.epoch,
                run.data.train.len(),
                last.loss,
                last.acc
            );
            println!("wrote {}", cfg.out.join("model.json").display());
        }
        Command::Eval => {
            let report = commands::cmd_eval(&cfg)?;
            println!("{}", report.summary());
        }
        Command::Ablate => {
            println!("rung,oa,kappa");
            for row in commands::cmd_ablate(&cfg)? {
                println!("{},{:.4},{:.4}", row.rung, row.mean_oa(), row.mean_kappa());
            }
        }
        Command::Profile => print!("{}", commands::cmd_profile(&cfg)?.to_csv()),
        Command::Gradcheck => {
            let checks = commands::cmd_gradcheck(&cfg)?;
            let mut ok = true;
            let mut blocks: Vec<&str> = checks.iter().map(|c| c.block).collect();
            blocks.dedup();
            for block in blocks {
                let of_block = checks.iter().filter(|c| c.block == block);
                let worst = of_block
                    .clone()
                    .map(|c| c.report.max_rel_error)
                    .fold(0.0, f64::max);
                let passed = of_block.clone().all(|c| c.report.passed);
                ok &= passed;
                println!(
                    "{block:<22} max_rel_error={worst:.3e} {}",
                    if passed { "PASS" } else { "FAIL" }
                );
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
