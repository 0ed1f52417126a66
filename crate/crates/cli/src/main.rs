use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use projprune::experiments::{
    cmd_correlate, cmd_eval, cmd_finetune, cmd_prune, cmd_score, cmd_sweep_lambda, cmd_sweep_sampling,
    cmd_train, Experiment, Outputs, Overrides,
};
use projprune::importance::Criterion;

/// Structured channel pruning experiments.
#[derive(Parser)]
#[command(name = "projprune", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the reference model and write its checkpoint.
    Train(Common),
    /// Score every filter of the trained model with the configured criteria.
    Score(Common),
    /// Score, plan and physically prune the trained model.
    Prune(Common),
    /// Accuracy / size table across criteria and pruning ratios.
    Eval(Common),
    /// Fine-tune the pruned model written by `prune`.
    Finetune(Common),
    /// Pruned-set stability and rank agreement across the λ grid.
    SweepLambda(Common),
    /// Subset-size sweep: overlap with full-data pruning, rank agreement, accuracy.
    SweepSampling(Common),
    /// Pairwise Pearson/Spearman correlation of criteria.
    Correlate(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    criterion: Option<Criterion>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    subset: Option<f64>,
}

impl Common {
    fn experiment(&self) -> projprune::Result<Experiment> {
        let cwd = std::env::current_dir()?;
        let overrides = Overrides {
            seed: self.seed,
            // Relative command-line paths are taken from the working
            // directory, not the config file's directory.
            out_dir: self.out_dir.as_ref().map(|d| cwd.join(d)),
            criterion: self.criterion,
            lambda: self.lambda,
            ratio: self.ratio,
            subset: self.subset,
        };
        Experiment::load(&self.config, &overrides)
    }
}

fn run(cli: Cli) -> projprune::Result<()> {
    let (common, f): (&Common, fn(&Experiment) -> projprune::Result<Outputs>) = match &cli.command {
        Command::Train(c) => (c, cmd_train),
        Command::Score(c) => (c, cmd_score),
        Command::Prune(c) => (c, cmd_prune),
        Command::Eval(c) => (c, cmd_eval),
        Command::Finetune(c) => (c, cmd_finetune),
        Command::SweepLambda(c) => (c, cmd_sweep_lambda),
        Command::SweepSampling(c) => (c, cmd_sweep_sampling),
        Command::Correlate(c) => (c, cmd_correlate),
    };
    let exp = common.experiment()?;
    let outputs = f(&exp)?;
    for path in outputs.commit(&exp.out_dir())? {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
