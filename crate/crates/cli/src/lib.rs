//! Command-line tools and the realism-study HTTP service.

pub mod cli;
pub mod commands;
pub mod data;
pub mod server;

use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use anyhow::Result;

use cli::{Cli, Command, EvalServeArgs};

fn serve_cmd(args: &EvalServeArgs) -> Result<()> {
    let judgments = args
        .judgments
        .clone()
        .unwrap_or_else(|| args.study.join("judgments.jsonl"));
    let assignments: Option<PathBuf> = args
        .assignments
        .clone()
        .or_else(|| Some(args.study.join("assignments.json")).filter(|p| p.exists()));
    if let Some(dir) = &args.static_dir {
        anyhow::ensure!(dir.is_dir(), "static directory {} does not exist", dir.display());
    }
    let svc = server::StudyService::open(&args.study, &judgments, assignments.as_deref())?;
    let app = server::router(Arc::new(Mutex::new(svc)), args.static_dir.clone());
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(server::serve(args.addr, app))
}

/// Executes a parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::FitNormalizer(a) => commands::fit_normalizer_cmd(a),
        Command::BuildDataset(a) => commands::build_dataset_cmd(a),
        Command::Train(a) => commands::train_cmd(a),
        Command::Nowcast(a) => commands::nowcast_cmd(a),
        Command::Analog(a) => commands::analog_cmd(a),
        Command::EvalSample(a) => commands::eval_sample_cmd(a),
        Command::EvalServe(a) => serve_cmd(a),
        Command::EvalReport(a) => {
            print!("{}", commands::eval_report_cmd(a)?);
            Ok(())
        }
        Command::Selftest => commands::selftest_cmd(),
    }
}
