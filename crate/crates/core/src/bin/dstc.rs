use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dstc::config::PipelineConfig;
use dstc::pipeline::{self, DatasetKind, PipelineError};

#[derive(Parser, Debug)]
#[command(author, version, about = "Build code preference datasets from self-generated code and tests")]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

/// Overrides applied on top of the config file.
#[derive(Args, Debug)]
struct CommonArgs {
    /// TOML config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Per-cell timeout in seconds.
    #[arg(long, global = true)]
    timeout: Option<f64>,
    /// Interpreter command, e.g. "python3 {script}".
    #[arg(long, global = true)]
    interpreter: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse and validate candidates, print a summary.
    Ingest,
    /// Execute, select and emit DPO/KTO datasets.
    Run,
    /// Score a selection log against oracle correctness verdicts.
    Stats {
        #[arg(long)]
        oracle: PathBuf,
        /// Selection log; defaults to the one in the output directory.
        #[arg(long)]
        selections: Option<PathBuf>,
    },
    /// Compare minimax selection with a random baseline under a latent model.
    Simulate {
        #[arg(long)]
        p_code_correct: Option<f64>,
        #[arg(long)]
        p_test_valid: Option<f64>,
        #[arg(long)]
        invalid_test_pass_prob: Option<f64>,
        #[arg(long)]
        j: Option<usize>,
        #[arg(long)]
        n_trials: Option<usize>,
        #[arg(long)]
        confidence: Option<f64>,
    },
    /// Train a tabular policy on an emitted dataset.
    TrainToy {
        #[arg(long, value_enum, default_value_t = Kind::Dpo)]
        kind: Kind,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        universe: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    Dpo,
    Kto,
}

fn load_config(common: &CommonArgs) -> Result<PipelineConfig, PipelineError> {
    let mut config = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(v) = &common.input {
        config.input = Some(v.clone());
    }
    if let Some(v) = &common.output_dir {
        config.output_dir = v.clone();
    }
    if let Some(v) = common.seed {
        config.seed = v;
    }
    if let Some(v) = common.workers {
        config.sandbox.limits.max_workers = v;
    }
    if let Some(v) = common.timeout {
        config.sandbox.limits.timeout_seconds = v;
    }
    if let Some(v) = &common.interpreter {
        config.sandbox.command.interpreter_command = v.clone();
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut config = load_config(&cli.common)?;
    match cli.command {
        Command::Ingest => {
            let (_, summary) = pipeline::cmd_ingest(&config)?;
            println!("{summary}");
        }
        Command::Run => {
            let summary = pipeline::cmd_run(&config)?;
            println!("{summary}");
        }
        Command::Stats { oracle, selections } => {
            let report = pipeline::cmd_stats(&config, &oracle, selections.as_deref())?;
            print!("{}", report.to_csv());
        }
        Command::Simulate {
            p_code_correct,
            p_test_valid,
            invalid_test_pass_prob,
            j,
            n_trials,
            confidence,
        } => {
            let sim = &mut config.simulate;
            sim.p_code_correct = p_code_correct.unwrap_or(sim.p_code_correct);
            sim.p_test_valid = p_test_valid.unwrap_or(sim.p_test_valid);
            sim.invalid_test_pass_prob = invalid_test_pass_prob.unwrap_or(sim.invalid_test_pass_prob);
            sim.j = j.unwrap_or(sim.j);
            sim.n_trials = n_trials.unwrap_or(sim.n_trials);
            sim.confidence = confidence.unwrap_or(sim.confidence);
            let report = pipeline::cmd_simulate(&config)?;
            print!("{}", report.summary());
        }
        Command::TrainToy {
            kind,
            dataset,
            universe,
            steps,
            learning_rate,
        } => {
            config.dpl.steps = steps.unwrap_or(config.dpl.steps);
            config.dpl.learning_rate = learning_rate.unwrap_or(config.dpl.learning_rate);
            let kind = match kind {
                Kind::Dpo => DatasetKind::Dpo,
                Kind::Kto => DatasetKind::Kto,
            };
            let out = pipeline::cmd_train_toy(&config, kind, dataset.as_deref(), universe.as_deref())?;
            println!(
                "{} records, {} steps, loss {} -> {}, metric {} -> {}",
                out.records,
                out.trace.losses.len(),
                out.trace.losses.first().copied().unwrap_or(out.trace.final_loss),
                out.trace.final_loss,
                out.trace.initial_metric,
                out.trace.final_metric
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
