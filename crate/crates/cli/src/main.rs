use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use set2seq_cli::commands::{self, AnalyzeArgs, EvalArgs};
use set2seq_cli::config::{RunConfig, SplitKind};
use set2seq_core::data::{SplitLabel, SynthConfig, TargetRule};
use set2seq_core::ranking::TiePolicy;
use set2seq_core::train::TrainError;

#[derive(Parser)]
#[command(
    name = "set2seq",
    version,
    about = "Sequential multiple-instance learning-to-rank: training, evaluation, splits, rank aggregation, and embedding analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides train.seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides output.dir from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split, batch size 1.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Comma-separated ranking names.
        #[arg(long, value_delimiter = ',', default_value = "target")]
        rankings: Vec<String>,
        /// Run config; defaults to run_manifest.json next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_tie_policy)]
        tie_policy: Option<TiePolicy>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write an entity_id,split CSV for a manifest.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "stratified", value_parser = parse_strategy)]
        strategy: SplitKind,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Ranking used for stratification.
        #[arg(long, default_value = "target")]
        ranking: String,
        #[arg(long, default_value_t = 10)]
        strata: usize,
        #[arg(long, default_value_t = set2seq_core::data::TIME_SERIES_VAL_START)]
        val_start: i32,
        #[arg(long, default_value_t = set2seq_core::data::TIME_SERIES_TEST_START)]
        test_start: i32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Borda-count aggregation of ranking CSVs over their union universe.
    Aggregate {
        /// Input entity_id,rank CSV files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic corpus manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        entities: usize,
        #[arg(long, default_value_t = 8)]
        d_in: usize,
        /// Start-year range, inclusive, as lo:hi.
        #[arg(long, default_value = "1900:1980", value_parser = parse_i32_range)]
        years: (i32, i32),
        /// Career length range, inclusive, as lo:hi.
        #[arg(long, default_value = "5:10", value_parser = parse_usize_range)]
        career: (usize, usize),
        /// Instances per year, inclusive, as lo:hi.
        #[arg(long, default_value = "2:5", value_parser = parse_usize_range)]
        instances: (usize, usize),
        #[arg(long, default_value = "early_burst", value_parser = parse_rule)]
        rule: TargetRule,
    },
    /// Emit the five pairwise cosine-distance panels for two entities.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        entity_a: String,
        #[arg(long)]
        entity_b: String,
        #[arg(long, default_value_t = 10)]
        first_n: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_tie_policy(s: &str) -> Result<TiePolicy, String> {
    match s {
        "skip_ties" => Ok(TiePolicy::SkipTies),
        "strict_eq9" => Ok(TiePolicy::StrictEq9),
        other => Err(format!("unknown tie policy '{other}' (skip_ties | strict_eq9)")),
    }
}

fn parse_strategy(s: &str) -> Result<SplitKind, String> {
    match s {
        "stratified" => Ok(SplitKind::Stratified),
        "time_series" => Ok(SplitKind::TimeSeries),
        other => Err(format!("unknown strategy '{other}' (stratified | time_series)")),
    }
}

fn parse_rule(s: &str) -> Result<TargetRule, String> {
    match s {
        "static_mean" => Ok(TargetRule::StaticMean),
        "early_burst" => Ok(TargetRule::EarlyBurst),
        "epoch_drift" => Ok(TargetRule::EpochDrift),
        other => Err(format!(
            "unknown rule '{other}' (static_mean | early_burst | epoch_drift)"
        )),
    }
}

fn parse_i32_range(s: &str) -> Result<(i32, i32), String> {
    let (lo, hi) = s.split_once(':').ok_or_else(|| format!("expected lo:hi, got '{s}'"))?;
    Ok((
        lo.parse().map_err(|e| format!("bad range start '{lo}': {e}"))?,
        hi.parse().map_err(|e| format!("bad range end '{hi}': {e}"))?,
    ))
}

fn parse_usize_range(s: &str) -> Result<(usize, usize), String> {
    let (lo, hi) = s.split_once(':').ok_or_else(|| format!("expected lo:hi, got '{s}'"))?;
    Ok((
        lo.parse().map_err(|e| format!("bad range start '{lo}': {e}"))?,
        hi.parse().map_err(|e| format!("bad range end '{hi}': {e}"))?,
    ))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let mut config = RunConfig::from_path(&config)?;
            if let Some(seed) = seed {
                config.train.seed = seed;
            }
            if let Some(out) = out {
                config.output.dir = out;
            }
            config.validate()?;
            let artifacts = commands::cmd_train(&config)?;
            let last = artifacts
                .outcome
                .epochs
                .last()
                .expect("training runs at least one epoch");
            println!(
                "best_epoch={} best_val_loss={:.6} epochs_run={} out={}",
                artifacts.outcome.best_epoch,
                artifacts.outcome.best_val_loss,
                last.epoch + 1,
                artifacts.out_dir.display()
            );
            Ok(())
        }
        Command::Eval {
            checkpoint,
            manifest,
            split,
            rankings,
            config,
            tie_policy,
            out,
        } => {
            let split: SplitLabel = split
                .parse()
                .map_err(|e: String| anyhow::anyhow!(e))
                .context("--split must be train, val, or test")?;
            let args = EvalArgs {
                checkpoint,
                manifest,
                split,
                rankings,
                config,
                tie_policy,
                out_dir: out,
                threads: commands::eval_threads_from_env(),
            };
            let records = commands::cmd_eval(&args)?;
            for r in &records {
                println!("{}", serde_json::to_string(r)?);
            }
            Ok(())
        }
        Command::Split {
            manifest,
            strategy,
            seed,
            ranking,
            strata,
            val_start,
            test_start,
            out,
        } => {
            if val_start >= test_start {
                bail!("--val-start must be below --test-start");
            }
            let mut config = RunConfig::default();
            config.data.split = strategy;
            config.data.split_seed = seed;
            config.data.ranking = ranking;
            config.data.strata = strata;
            config.data.val_start_year = val_start;
            config.data.test_start_year = test_start;
            config.data.min_instances = None;
            commands::cmd_split(&manifest, &config, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Aggregate { inputs, out } => {
            let aggregated = commands::cmd_aggregate(&inputs, &out)?;
            println!("aggregated {} rankings over {} entities into {}", inputs.len(), aggregated.len(), out.display());
            Ok(())
        }
        Command::Synth {
            out,
            seed,
            entities,
            d_in,
            years,
            career,
            instances,
            rule,
        } => {
            let config = SynthConfig {
                n_entities: entities,
                year_range: years,
                career_len_range: career,
                instances_range: instances,
                d_in,
                target_rule: rule,
                seed,
            };
            commands::cmd_synth(&config, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Analyze {
            checkpoint,
            manifest,
            config,
            entity_a,
            entity_b,
            first_n,
            out,
        } => {
            let artifacts = commands::cmd_analyze(&AnalyzeArgs {
                checkpoint,
                manifest,
                config,
                entity_a,
                entity_b,
                first_n,
                out_dir: out,
            })?;
            for f in &artifacts.files {
                println!("wrote {}", f.display());
            }
            Ok(())
        }
    }
}

/// Exit codes: 0 success, 1 configuration or usage error, 2 runtime
/// numeric failure.
fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numeric = e
                .chain()
                .any(|cause| matches!(cause.downcast_ref::<TrainError>(), Some(TrainError::NonFinite { .. })));
            if numeric {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
