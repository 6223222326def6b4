use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hmmar::filters::Methods;
use hmmar::harness::{run_experiment, threads_from_env, write_outputs, ExperimentConfig};
use hmmar::Error;

#[derive(Parser)]
#[command(
    name = "hmmar",
    version,
    about = "Hidden-state estimation for Markov-switching AR processes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte-Carlo experiment and write summary.csv (and traces).
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long, default_value = "hmmar-out")]
        out: PathBuf,
        #[arg(long)]
        tau: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        /// Also write trace_<r>.csv for every repeat.
        #[arg(long)]
        trace: bool,
    },
    /// Check a config file without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Optimal,
    Nonparametric,
    Both,
}

impl From<Mode> for Methods {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Optimal => Methods::Optimal,
            Mode::Nonparametric => Methods::Nonparametric,
            Mode::Both => Methods::Both,
        }
    }
}

fn exit_code(err: &Error) -> ExitCode {
    if err.is_config_error() {
        ExitCode::from(2)
    } else {
        ExitCode::from(3)
    }
}

fn load(path: &Path) -> Result<ExperimentConfig, Error> {
    let cfg = ExperimentConfig::from_path(path);
    // an unreadable config file is a config error, not a runtime failure
    match cfg {
        Err(Error::Io { path, source }) => Err(Error::InvalidConfig {
            field: "config",
            reason: format!("cannot read {}: {source}", path.display()),
        }),
        other => other,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { config } => {
            match load(&config).and_then(|c| c.validate().map(|m| (c, m))) {
                Ok((cfg, model)) => {
                    println!(
                        "ok: {} states, AR({}), n_total {}, eval window {:?}, {} repeats",
                        model.num_states(),
                        model.order(),
                        cfg.n_total,
                        cfg.eval_window,
                        cfg.repeats
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    exit_code(&e)
                }
            }
        }
        Command::Run {
            config,
            seed,
            repeats,
            mode,
            out,
            tau,
            stride,
            trace,
        } => {
            let mut cfg = match load(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return exit_code(&e);
                }
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(r) = repeats {
                cfg.repeats = r;
            }
            if let Some(m) = mode {
                cfg.mode = m.into();
            }
            if let Some(t) = tau {
                cfg.tau = t;
            }
            if let Some(l) = stride {
                cfg.stride = l;
            }
            let result = run_experiment(&cfg, threads_from_env())
                .and_then(|outcome| write_outputs(&outcome, &out, trace).map(|p| (outcome, p)));
            match result {
                Ok((outcome, path)) => {
                    println!(
                        "{:<14} {:<11} {:>10} {:>10}",
                        "method", "task", "error %", "stderr %"
                    );
                    for (method, task, s) in outcome.summary.rows() {
                        println!(
                            "{method:<14} {task:<11} {:>10.2} {:>10.2}",
                            100.0 * s.mean,
                            100.0 * s.stderr
                        );
                    }
                    let fallbacks = outcome.fallback_count();
                    if fallbacks > 0 {
                        println!("QP fallback steps: {fallbacks}");
                    }
                    println!("wrote {}", path.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    exit_code(&e)
                }
            }
        }
    }
}
