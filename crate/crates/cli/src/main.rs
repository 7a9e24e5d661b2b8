use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use teamgrpo_core::harness::{self, ExperimentConfig};
use teamgrpo_core::kv::KvFile;
use teamgrpo_core::{Error, ErrorCategory};

/// Train and evaluate role-based agent teams with group-relative policy
/// optimization.
#[derive(Parser, Debug)]
#[command(name = "teamgrpo", version)]
struct Cli {
    /// `key = value` configuration file. Later `--set` flags override it.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set grpo.iterations=40`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory (same as `--set out_dir=...`).
    #[arg(long, short, global = true)]
    out: Option<PathBuf>,
    /// Comma-separated seeds (same as `--set seeds=...`).
    #[arg(long, global = true)]
    seeds: Option<String>,
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one policy per seed; writes curves, checkpoints and buffers.
    Train,
    /// Compare trained teams with the single-agent and scripted baselines.
    Eval {
        /// Evaluate this checkpoint for every seed instead of each seed's own.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Episodes per seed (same as `--set eval_episodes=...`).
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Train and evaluate the four ablation variants.
    Ablate,
    /// Count failure modes of untrained and trained teams.
    Failures {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print the audit report of a JSONL trace.
    Replay { trace: PathBuf },
    /// Print the effective configuration and its hash.
    ShowConfig,
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        ErrorCategory::Config => 2,
        ErrorCategory::Io => 3,
        ErrorCategory::Numeric => 4,
        ErrorCategory::Data => 5,
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut kv = match &cli.config {
        Some(path) => KvFile::parse(&std::fs::read_to_string(path)?)?,
        None => KvFile::default(),
    };
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
        kv.set(k.trim(), v);
    }
    if let Some(out) = &cli.out {
        kv.set("out_dir", &out.to_string_lossy());
    }
    if let Some(seeds) = &cli.seeds {
        kv.set("seeds", seeds);
    }
    if let Command::Eval { episodes: Some(n), .. } = &cli.command {
        kv.set("eval_episodes", &n.to_string());
    }
    let mut exp = ExperimentConfig::default();
    exp.apply_kv(&kv)?;
    if cli.sequential {
        exp.train.exec = teamgrpo_core::par::Exec::Sequential;
    }
    Ok(exp)
}

fn run(cli: &Cli) -> Result<(), Error> {
    if let Command::Replay { trace } = &cli.command {
        print!("{}", harness::replay_audit(trace)?);
        return Ok(());
    }
    let exp = load_config(cli)?;
    log::info!("config hash {}", exp.hash());
    match &cli.command {
        Command::Train => {
            let outcomes = harness::run_train(&exp)?;
            for (seed, o) in exp.seeds.iter().zip(&outcomes) {
                match o.curve.last() {
                    Some(r) => println!(
                        "seed {seed}: team_score {:.3} quality {:.3} turns {:.1}",
                        r.team_score, r.mean_quality, r.mean_turns
                    ),
                    None => println!("seed {seed}: no iterations"),
                }
            }
            println!("wrote {}", exp.out_dir.display());
        }
        Command::Eval { checkpoint, .. } => {
            let rows = harness::run_eval(&exp, checkpoint.as_deref())?;
            print!("{}", harness::eval::summary_table(&rows));
        }
        Command::Ablate => {
            let table = harness::run_ablation(&exp)?;
            print!("{}", table.csv(&exp.hash()));
        }
        Command::Failures { checkpoint } => {
            let (before, after) = harness::run_failures(&exp, checkpoint.as_deref())?;
            print!("{}", harness::failures::comparison_csv(&before, &after));
        }
        Command::ShowConfig => {
            println!("# config_hash={}", exp.hash());
            println!("{}", harness::experiment::to_pretty_json(&exp));
        }
        Command::Replay { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
