use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hfvc::commands::{eval_cmd, gen_data, mushra_cmd, sweep_cmd, synth_cmd, train_cmd};
use hfvc::config::ExperimentConfig;
use hfvc::formats::read_text;
use hfvc::sweep::SweepGrid;
use hfvc::{CliError, CliResult};

/// Householder-flow VAE experiments on a synthetic style corpus.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config with optional `corpus` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> CliResult<ExperimentConfig> {
        ExperimentConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus directory.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model and write its checkpoint and metric log.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Record real elapsed milliseconds instead of zeros.
        #[arg(long)]
        wall_clock: bool,
    },
    /// Train every grid point with several seeds.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// JSON grid `{"points": [{"arch": "arch3", "k": 16}, ...]}`; default is
        /// the baseline plus three architectures at K = 2, 4, 8, 16.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of seeds, counting up from `train.seed`.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Worker threads; defaults to all cores.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Synthesize a prompt in the style of a reference utterance.
    Synth {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the corpus recorded in the checkpoint.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        reference: String,
        /// Prompt or utterance id, or comma-separated phoneme ids.
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// One-shot transfer report over all held-out references and prompts.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a MUSHRA response table and run Holm-corrected paired t-tests.
    Mushra {
        #[arg(long)]
        responses: PathBuf,
        #[arg(long, default_value = "naturalness")]
        question: String,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_grid(path: Option<&Path>) -> CliResult<SweepGrid> {
    match path {
        None => Ok(SweepGrid::default()),
        Some(p) => serde_json::from_str(&read_text(p)?).map_err(|e| CliError::input(format!("{}: {e}", p.display()))),
    }
}

fn run(command: Command) -> CliResult<String> {
    match command {
        Command::GenData { config, out, seed } => gen_data(&config.load()?, seed, &out),
        Command::Train {
            config,
            corpus,
            out,
            seed,
            wall_clock,
        } => {
            let mut train = config.load()?.train;
            if let Some(s) = seed {
                train.seed = s;
            }
            train_cmd(&train, &corpus, &out, wall_clock)
        }
        Command::Sweep {
            config,
            grid,
            corpus,
            out,
            seeds,
            threads,
        } => {
            let base = config.load()?.train;
            let grid = load_grid(grid.as_deref())?;
            if let Some(n) = threads {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .map_err(|e| CliError::input(format!("threads: {e}")))?;
            }
            let seeds: Vec<u64> = (0..seeds).map(|i| base.seed + i).collect();
            let outcome = sweep_cmd(&base, &grid, &corpus, &seeds, &out)?;
            if outcome.any_ok {
                Ok(outcome.text)
            } else {
                Err(CliError::Numeric(format!("{}every run failed", outcome.text)))
            }
        }
        Command::Synth {
            checkpoint,
            corpus,
            reference,
            prompt,
            out,
        } => synth_cmd(&checkpoint, corpus.as_deref(), &reference, &prompt, &out),
        Command::Eval {
            checkpoint,
            corpus,
            out,
        } => eval_cmd(&checkpoint, corpus.as_deref(), &out),
        Command::Mushra {
            responses,
            question,
            alpha,
            out,
        } => mushra_cmd(&responses, &question, alpha, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
