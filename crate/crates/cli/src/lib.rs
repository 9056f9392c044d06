//! Command-line front end for tabnsa.

pub mod commands;
pub mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use tabnsa::model::Fusion;
use tabnsa::training::OptimizerKind;

use commands::AblationAxis;
use config::{parse_seeds, Overrides, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] tabnsa::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    /// 2 for usage, configuration and schema problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(tabnsa::Error::Config(_) | tabnsa::Error::Schema(_)) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "tabnsa", version, about = "Sparse-attention models for tabular data")]
pub struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and test once per seed.
    Train(RunArgs),
    /// Random hyperparameter search, then refit the best trial per seed.
    Tune(RunArgs),
    /// Evaluate a checkpoint on a CSV file.
    Eval(EvalArgs),
    /// Tune on one feature subset and refit on an overlapping one, both ways.
    Transfer(RunArgs),
    /// Sweep one design axis with everything else held at the baseline.
    Ablate(AblateArgs),
    /// Per-component FLOPs and parameter counts.
    Flops(FlopsArgs),
}

#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Target column name.
    #[arg(long)]
    pub target: Option<String>,
    /// Seeds: `3`, `0,1,2` or `0..9` (inclusive).
    #[arg(long)]
    pub seeds: Option<String>,
    /// Number of search trials.
    #[arg(long)]
    pub budget: Option<usize>,
    /// Shared-feature fraction for transfer splits.
    #[arg(long)]
    pub overlap: Option<f64>,
    #[arg(long)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long)]
    pub fusion: Option<Fusion>,
    /// Restrict every branch to earlier tokens.
    #[arg(long)]
    pub causal: bool,
    /// Drop the learned per-feature embedding.
    #[arg(long)]
    pub no_feature_ids: bool,
}

impl CommonArgs {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        Overrides {
            target: self.target.clone(),
            seeds: self.seeds.as_deref().map(parse_seeds).transpose().map_err(CliError::Usage)?,
            budget: self.budget,
            overlap: self.overlap,
            optimizer: self.optimizer,
            fusion: self.fusion,
            causal: self.causal,
            no_feature_ids: self.no_feature_ids,
        }
        .apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub csv: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub csv: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub csv: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Axis to sweep.
    #[arg(long, value_enum)]
    pub what: AblationAxis,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Take the feature count and task from this CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Feature count when no CSV is given.
    #[arg(long)]
    pub tokens: Option<usize>,
    /// Also report full attention over the same tokens.
    #[arg(long)]
    pub compare_dense: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Runs a parsed command, printing a short summary to stdout.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => {
            let cfg = a.common.resolve()?;
            let s = commands::cmd_train(&cfg, a.common.config.as_deref(), &a.csv, &a.out)?;
            println!("{}: {:.4} ± {:.4} over {} seed(s)", s.metric, s.aggregate.mean, s.aggregate.std, s.aggregate.runs);
        }
        Command::Tune(a) => {
            let cfg = a.common.resolve()?;
            let r = commands::cmd_tune(&cfg, a.common.config.as_deref(), &a.csv, &a.out)?;
            println!(
                "best trial {} (val {:.4}); test {}: {:.4} ± {:.4}",
                r.best_trial.trial_id, r.best_trial.val_metric, r.metric, r.aggregate.mean, r.aggregate.std
            );
        }
        Command::Eval(a) => {
            let r = commands::cmd_eval(&a.checkpoint, &a.csv, a.out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&r).map_err(tabnsa::Error::from)?);
        }
        Command::Transfer(a) => {
            let cfg = a.common.resolve()?;
            let r = commands::cmd_transfer(&cfg, a.common.config.as_deref(), &a.csv, &a.out)?;
            for d in &r.directions {
                println!(
                    "{} -> {}: {} {:.4} ± {:.4}",
                    d.source, d.target, d.report.metric, d.report.aggregate.mean, d.report.aggregate.std
                );
            }
        }
        Command::Ablate(a) => {
            let cfg = a.common.resolve()?;
            let rows = commands::cmd_ablate(&cfg, a.common.config.as_deref(), &a.csv, a.what, &a.out)?;
            print!("{}", commands::ablation_csv(&rows));
        }
        Command::Flops(a) => {
            let mut cfg = a.common.resolve()?;
            if a.tokens.is_some() {
                cfg.tokens = a.tokens;
            }
            let (_, table) = commands::cmd_flops(&cfg, a.csv.as_deref(), a.compare_dense, a.out.as_deref())?;
            print!("{table}");
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
        let cli = Cli::try_parse_from(["tabnsa", "train", "--csv", "a.csv", "--out", "o", "--seeds", "0..9", "--fusion", "c"]).unwrap();
        let Command::Train(a) = cli.command else { panic!() };
        let cfg = a.common.resolve().unwrap();
        assert_eq!(cfg.seeds.len(), 10);
        assert_eq!(cfg.model.fusion, Fusion::Concat);
    }
}
