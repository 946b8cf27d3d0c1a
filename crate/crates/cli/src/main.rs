use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fisl_core::experiment::{
    evaluate_checkpoint, parse_config, reproduce_table1, train, Checkpoint, DomainChoice, GridOptions,
    CHECKPOINT_FILE,
};
use fisl_core::Error;
use serde_json::json;

#[derive(Parser)]
#[command(name = "fisl", version, about = "Adversarial feature-shift meta-learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Meta-test a checkpoint; reads config.json from the checkpoint's directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        domain: DomainArg,
        /// Evaluate without the shift layer.
        #[arg(long)]
        no_fisl: bool,
    },
    /// Train and evaluate the {MAML, ANIL} x {baseline, FiSL} x {5, 10}-shot grid.
    #[command(name = "reproduce-table1")]
    ReproduceTable1 {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        n_eval_tasks: Option<usize>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum DomainArg {
    Source,
    Unseen,
}

impl From<DomainArg> for DomainChoice {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::Source => DomainChoice::Source,
            DomainArg::Unseen => DomainChoice::Unseen,
        }
    }
}

fn run(cli: Cli) -> Result<serde_json::Value, Error> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out_dir,
            resume,
        } => {
            let mut cfg = parse_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(d) = out_dir {
                cfg.out_dir = d;
            }
            let ckpt = if resume {
                Some(Checkpoint::load(&cfg.out_dir.join(CHECKPOINT_FILE))?)
            } else {
                None
            };
            let out = train(&cfg, Some(&cfg.out_dir), ckpt)?;
            let last = out.metrics.last();
            Ok(json!({
                "status": "ok",
                "out_dir": cfg.out_dir,
                "iteration": out.state.iteration,
                "train_loss": last.map(|r| r.train_loss),
                "val_source": last.and_then(|r| r.val_source),
                "val_unseen": last.and_then(|r| r.val_unseen),
            }))
        }
        Command::Eval {
            checkpoint,
            domain,
            no_fisl,
        } => {
            let record = evaluate_checkpoint(&checkpoint, domain.into(), !no_fisl)?;
            Ok(serde_json::to_value(record)?)
        }
        Command::ReproduceTable1 {
            out_dir,
            iterations,
            seeds,
            n_eval_tasks,
        } => {
            let mut opts = GridOptions::default();
            if let Some(n) = iterations {
                opts.iterations = n;
            }
            if let Some(s) = seeds {
                opts.seeds = s;
            }
            if let Some(n) = n_eval_tasks {
                opts.n_eval_tasks = n;
            }
            let report = reproduce_table1(&out_dir, &opts)?;
            eprintln!("{}", report.table);
            Ok(json!({ "status": "ok", "out_dir": out_dir, "cells": report.cells.len() }))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let mut doc = json!({ "error": e.kind(), "message": e.to_string() });
            if let Error::Config { path, .. } = &e {
                doc["field"] = json!(path);
            }
            if let Error::Diverged { iteration, .. } = &e {
                doc["iteration"] = json!(iteration);
            }
            eprintln!("{doc}");
            ExitCode::FAILURE
        }
    }
}
