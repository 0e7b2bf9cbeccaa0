use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

mod commands;
mod config;
mod exit;
mod run_dir;

use commands::*;

/// Step-wise distillation of visual-program sub-modules.
#[derive(Debug, Parser)]
#[command(name = "vpdistill", version)]
struct Cli {
    /// TOML config file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[arg(long, global = true, default_value = "run")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the train and eval scene pools.
    GenWorld(GenWorldArgs),
    /// Generate questions with fine and coarse programs for every scene.
    GenQa(GenQaArgs),
    /// Execute the programs of one split under one module registry.
    RunPrograms(RunProgramsArgs),
    /// Turn the distillable steps of stored traces into teacher-labelled triples.
    Harvest(HarvestArgs),
    /// Balance question types and build disjoint train/val/test splits.
    BuildDataset(BuildDatasetArgs),
    /// Train the students on harvested triples and save their state files.
    Distill(DistillArgs),
    /// Score stored traces against ground truth.
    Evaluate(EvaluateArgs),
    /// Ablation studies over distilled-module count, train-set size or
    /// simple_query student strength.
    Ablate(AblateArgs),
    /// Referring-expression grounding, scored by IoU.
    GroundEval(GroundEvalArgs),
    /// Render tables and curve data from stored reports.
    Report(ReportArgs),
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = config::CliConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.recipe.seed = seed;
    }
    if cli.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.workers)
            .build_global()?;
    }
    let env = Env {
        out: cli.out_dir,
        workers: cli.workers,
    };
    match cli.command {
        Command::GenWorld(a) => gen_world(&env, cfg, a),
        Command::GenQa(a) => gen_qa(&env, cfg, a),
        Command::RunPrograms(a) => run_programs(&env, cfg, a),
        Command::Harvest(a) => harvest(&env, cfg, a),
        Command::BuildDataset(a) => build_dataset(&env, cfg, a),
        Command::Distill(a) => distill(&env, cfg, a),
        Command::Evaluate(a) => evaluate(&env, cfg, a),
        Command::Ablate(a) => ablate(&env, cfg, a),
        Command::GroundEval(a) => ground_eval(&env, cfg, a),
        Command::Report(a) => report(&env, cfg, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::ExitKind::Usage as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code_for(&e) as u8)
        }
    }
}
