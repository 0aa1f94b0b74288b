use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use diffpolicy::oracle::run_suite;
use diffpolicy::trainer::{Trainer, TrainerConfig};
use diffpolicy::{seeded_rng, Error};

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_ORACLE: u8 = 3;

#[derive(Parser)]
#[command(name = "diffpolicy", about = "Diffusion policies trained by mirror descent")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a key = value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. `--set pmd.lambda=0.1`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint and print mean return.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
    },
    /// Print actions sampled from a checkpoint at the start state.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the exact-computation self-checks.
    OracleCheck {
        /// Run a reduced set of instances.
        #[arg(long)]
        quick: bool,
    },
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        Error::Config(_) => ExitCode::from(EXIT_USAGE),
        _ => ExitCode::from(EXIT_FAILURE),
    }
}

fn train(config: PathBuf, overrides: Vec<String>) -> ExitCode {
    let cfg = match TrainerConfig::load(&config, &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let mut t = match Trainer::new(cfg) {
        Ok(t) => t,
        Err(e) => return fail(e),
    };
    match t.run() {
        Ok(out) => {
            if let Some(last) = out.metrics.last() {
                println!(
                    "env_steps {} mean_eval_return {:.4} ± {:.4}",
                    last.env_steps, last.mean_eval_return, last.eval_stderr
                );
            }
            for path in &out.checkpoints {
                println!("checkpoint {}", path.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail(e),
    }
}

fn eval(checkpoint: PathBuf, episodes: usize) -> ExitCode {
    let res = Trainer::from_checkpoint(&checkpoint).and_then(|t| t.evaluate(episodes));
    match res {
        Ok(ev) => {
            print!("episodes {episodes} mean_return {:.4} stderr {:.4}", ev.mean, ev.stderr);
            if let Some(s) = ev.success_rate {
                print!(" success_rate {s:.4}");
            }
            println!();
            ExitCode::SUCCESS
        }
        Err(e) => fail(e),
    }
}

fn sample(checkpoint: PathBuf, n: usize, seed: u64) -> ExitCode {
    let t = match Trainer::from_checkpoint(&checkpoint) {
        Ok(t) => t,
        Err(e) => return fail(e),
    };
    let mut rng = seeded_rng(seed);
    let state = t.env().reset(&mut rng);
    let states = vec![&state[..]; n];
    match t.model().sample_batch(t.policy(), &states, &t.config().sampler, &mut rng) {
        Ok(trajs) => {
            for traj in trajs {
                let tokens: Vec<String> = traj.clean().tokens().iter().map(|x| x.to_string()).collect();
                println!("{}", tokens.join(" "));
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail(e),
    }
}

fn oracle_check(quick: bool) -> ExitCode {
    let results = run_suite(quick);
    let mut failed = 0;
    for c in &results {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        failed += usize::from(!c.passed);
    }
    println!("{}/{} checks passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_ORACLE)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Command::Train { config, overrides } => train(config, overrides),
        Command::Eval { checkpoint, episodes } => eval(checkpoint, episodes),
        Command::Sample { checkpoint, n, seed } => sample(checkpoint, n, seed),
        Command::OracleCheck { quick } => oracle_check(quick),
    }
}
