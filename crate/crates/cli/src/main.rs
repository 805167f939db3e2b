use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hyperprompt::experiments::{
    load_records, lr_sweep, prepare_tasks, run_matrix, write_outputs, ExperimentConfig, MatrixOptions, MatrixOutcome,
    ResultsTable, SweepReport,
};
use hyperprompt::tasks::{generate, TaskKind, TaskSpec};
use hyperprompt::verify::{full_suite, TOLERANCE};
use hyperprompt::Error;

#[derive(Parser)]
#[command(name = "hyperprompt", version, about = "Prompt tuning with generated soft prompts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed list (or the data seed for `tasks generate`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Parallel training runs.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Continue interrupted runs from their last checkpoint.
    #[arg(long, global = true)]
    resume: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset utilities.
    Tasks {
        #[command(subcommand)]
        action: TasksAction,
    },
    /// Train every cell of the config for a single seed.
    Run,
    /// Train every (generator, lr, task, seed) cell and tabulate test scores.
    Matrix,
    /// Learning-rate sweep with a dispersion summary.
    LrSweep,
    /// Rebuild results tables from the run records under --out.
    Report,
    /// Check tape gradients against finite differences.
    VerifyGradients,
}

#[derive(Subcommand)]
enum TasksAction {
    /// Write datasets as `input<TAB>target` files under --out.
    Generate {
        /// Task kinds; all five when omitted and no config is given.
        #[arg(long = "kind")]
        kinds: Vec<TaskKind>,
        #[arg(long, default_value_t = TaskSpec::DEFAULT_TRAIN)]
        train_size: usize,
        #[arg(long, default_value_t = TaskSpec::DEFAULT_DEV)]
        dev_size: usize,
        #[arg(long, default_value_t = TaskSpec::DEFAULT_TEST)]
        test_size: usize,
    },
}

enum Failure {
    Lib(Error),
    Partial(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Dimension { .. } | Error::Index { .. } | Error::Length { .. } => 2,
        Error::Numeric(_) => 3,
        Error::Io { .. } | Error::Format(_) | Error::Truncated { .. } => 4,
    }
}

fn require<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    v.as_deref()
        .ok_or_else(|| Failure::Lib(Error::Config(format!("--{flag} is required for this command"))))
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(require(&common.config, "config")?)?;
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

fn options(common: &Common) -> Result<MatrixOptions, Failure> {
    Ok(MatrixOptions {
        out: require(&common.out, "out")?.to_path_buf(),
        jobs: common.jobs,
        resume: common.resume,
    })
}

fn log(msg: &str) {
    eprintln!("{msg}");
}

fn finish(outcome: &MatrixOutcome) -> Result<(), Failure> {
    print!("{}", outcome.table.to_markdown());
    eprintln!("{} runs, {} newly trained", outcome.records.len(), outcome.new_runs);
    if outcome.failures.is_empty() {
        return Ok(());
    }
    for (run, reason) in &outcome.failures {
        eprintln!("failed: {run}: {reason}");
    }
    Err(Failure::Partial(outcome.failures.len()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let common = cli.common;
    match cli.command {
        Command::Tasks {
            action:
                TasksAction::Generate {
                    kinds,
                    train_size,
                    dev_size,
                    test_size,
                },
        } => {
            let out = require(&common.out, "out")?;
            if let Some(path) = &common.config {
                let mut cfg = ExperimentConfig::load(path)?;
                if let Some(seed) = common.seed {
                    cfg.data.seed = seed;
                }
                for data in prepare_tasks(&cfg, out)? {
                    eprintln!("wrote {}", out.join("data").join(&data.spec.task_id).display());
                }
                return Ok(());
            }
            let kinds = if kinds.is_empty() { TaskKind::ALL.to_vec() } else { kinds };
            for kind in kinds {
                let spec = TaskSpec::new(kind, common.seed.unwrap_or(0)).with_sizes(train_size, dev_size, test_size);
                let data = generate(&spec)?;
                data.save(out)?;
                eprintln!("wrote {}", out.join(&spec.task_id).display());
            }
            Ok(())
        }
        Command::Run | Command::Matrix => {
            let mut cfg = load_config(&common)?;
            if matches!(cli.command, Command::Run) {
                cfg.seeds.truncate(1);
            }
            let outcome = run_matrix(&cfg, &options(&common)?, &log)?;
            finish(&outcome)
        }
        Command::LrSweep => {
            let cfg = load_config(&common)?;
            let (outcome, report) = lr_sweep(&cfg, &options(&common)?, &log)?;
            print!("{}", report.to_markdown());
            finish(&outcome)
        }
        Command::Report => {
            let out = require(&common.out, "out")?;
            let records = load_records(out)?;
            if records.is_empty() {
                return Err(Error::Config(format!("no run records under {}", out.join("runs").display())).into());
            }
            let name = match &common.config {
                Some(p) => ExperimentConfig::load(p)?.name,
                None => records[0].experiment.clone(),
            };
            let table = ResultsTable::from_records(&name, &records);
            write_outputs(out, &records, &table)?;
            print!("{}", table.to_markdown());
            if records.iter().map(|r| r.config.lr.to_bits()).collect::<std::collections::BTreeSet<_>>().len() > 1 {
                print!("\n{}", SweepReport::from_records(&name, &records).to_markdown());
            }
            Ok(())
        }
        Command::VerifyGradients => {
            let checks = full_suite(common.seed.unwrap_or(0))?;
            let mut failed = 0;
            for c in &checks {
                let mark = if c.passed() { "ok  " } else { "FAIL" };
                failed += usize::from(!c.passed());
                println!("{mark} {:<24} input {} {:<28} rel_err {:.3e}", c.name, c.input, c.shapes, c.rel_error);
            }
            println!("{} checks, {failed} above {TOLERANCE:e}", checks.len());
            if failed > 0 {
                return Err(Failure::Partial(failed));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Partial(n)) => {
            eprintln!("{n} failures");
            ExitCode::from(3)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
