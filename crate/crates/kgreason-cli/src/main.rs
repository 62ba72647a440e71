//! Command line driving the full run pipeline: synthesize a graph, split it
//! and sample queries, train the encoder, evaluate rankings.
//!
//! Exit codes: 0 success, 1 usage or configuration, 2 data, 3 numeric.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use kgreason::pipeline::{
    run_eval, run_gen, run_linearize, run_synth, run_train, PipelineError, RunConfig, ScorerKind,
};
use kgreason::train::TrainError;

#[derive(Parser)]
#[command(name = "kgreason", version, about = "Logical query answering over knowledge graphs")]
struct Cli {
    /// TOML run configuration; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set epochs=10 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Directory where run artifacts live.
    #[arg(long, global = true, default_value = "runs/default", value_name = "DIR")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the full knowledge graph.
    SynthKg,
    /// Split the graph and sample query records for every split.
    Gen,
    /// Print query text lines (or one candidate line) from a split.
    Linearize {
        /// Records split: train, valid or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Print at most this many records.
        #[arg(long)]
        limit: Option<usize>,
        /// Print the candidate line of this entity instead.
        #[arg(long, value_name = "NAME")]
        entity: Option<String>,
    },
    /// Train the encoder on the train split.
    Train,
    /// Rank every entity against a records split and report hits@K.
    Eval {
        #[arg(long, default_value = "test")]
        split: String,
        /// model, oracle or random.
        #[arg(long, default_value = "model")]
        scorer: String,
    },
    /// Exact symbolic evaluation; a correct setup scores 1 everywhere.
    Oracle {
        #[arg(long, default_value = "test")]
        split: String,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 for usage and configuration problems, 2 for data problems, 3 for
/// numeric failures.
fn exit_code(e: &anyhow::Error) -> u8 {
    let Some(p) = e.downcast_ref::<PipelineError>() else {
        return 1;
    };
    match p {
        PipelineError::Config(_) | PipelineError::Missing { .. } | PipelineError::Model(_) => 1,
        PipelineError::Train(t) => match t {
            TrainError::NonFinite { .. } => 3,
            TrainError::BatchTooSmall { .. } | TrainError::HeadMismatch { .. } => 1,
            _ => 2,
        },
        _ => 2,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.sets)?;
    let out = &cli.out;
    match cli.command {
        Command::SynthKg => {
            run_synth(&cfg, out).context("synth-kg stage")?;
            println!("graph written under {}", out.join("kg").display());
        }
        Command::Gen => {
            run_gen(&cfg, out).context("gen stage")?;
            println!("query records written under {}", out.join("queries").display());
        }
        Command::Linearize {
            split,
            limit,
            entity,
        } => {
            let lines = run_linearize(&cfg, out, &split, limit, entity.as_deref())
                .context("linearize stage")?;
            for line in lines {
                println!("{line}");
            }
        }
        Command::Train => {
            let report = run_train(&cfg, out).context("train stage")?;
            if let Some(last) = report.epochs.last() {
                println!(
                    "trained {} epochs ({} steps), final loss {:.4}",
                    report.epochs.len(),
                    report.steps,
                    last.total
                );
            }
            println!("checkpoint written to {}", out.join("model.bin").display());
        }
        Command::Eval { split, scorer } => {
            let kind: ScorerKind = scorer
                .parse()
                .map_err(PipelineError::Config)
                .context("eval stage")?;
            let report = run_eval(&cfg, out, &split, kind).context("eval stage")?;
            print!("{report}");
        }
        Command::Oracle { split } => {
            let report =
                run_eval(&cfg, out, &split, ScorerKind::Oracle).context("oracle stage")?;
            print!("{report}");
        }
    }
    Ok(())
}
