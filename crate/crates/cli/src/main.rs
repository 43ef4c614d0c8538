//! Command-line driver for decentralized equilibrium learning in tabular
//! Markov games: train, evaluate, benchmark, and generate game files.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use commands::{run_bench, run_eval, run_gen, run_train, BenchArgs, EvalArgs};
use config::{load_config_file, Algo, LogFormat, RunConfig};
use mgvl::evalx::GapMode;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("invariant violation: {0}")]
    Invariant(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Invariant(_) => 4,
        }
    }
}

#[derive(Parser)]
#[command(name = "mgvl", about = "Equilibrium learning and certification for tabular Markov games")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a run and write its manifest, policy log, and diagnostics.
    Train {
        /// Config file (TOML or JSON; a manifest.json also works). Flags
        /// override file values.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Game document path or inline spec (random:..., parity:...).
        #[arg(long)]
        game: Option<String>,
        #[arg(long)]
        algo: Option<Algo>,
        #[arg(long, short = 'K')]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        bonus_c: Option<f64>,
        #[arg(long)]
        delta: Option<f64>,
        /// Comma-separated checkpoint episodes.
        #[arg(long)]
        checkpoints: Option<String>,
        /// Maintain pessimistic diagnostic tables.
        #[arg(long)]
        pessimistic: bool,
        /// Two-sided zero-sum schedule preset.
        #[arg(long)]
        two_sided: bool,
        #[arg(long)]
        log_format: Option<LogFormat>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained run: certified gaps per (checkpoint, player, mode).
    Eval {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        /// best-response, strategy-mod, or both.
        #[arg(long, default_value = "both")]
        mode: String,
        /// Restrict to one player.
        #[arg(long)]
        player: Option<usize>,
        /// Add Monte-Carlo cross-check rows with this many episodes.
        #[arg(long)]
        mc: Option<usize>,
        /// Evaluate every manifest checkpoint instead of only the final one.
        #[arg(long)]
        checkpoints: bool,
    },
    /// Generate a game document from an inline spec.
    Gen {
        #[arg(long)]
        spec: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Multi-seed train + eval sweep with one CSV row per result.
    Bench {
        #[arg(long)]
        game: String,
        #[arg(long)]
        algo: Algo,
        #[arg(long, short = 'K')]
        episodes: usize,
        /// Comma-separated seeds, or `a..b` for a range.
        #[arg(long, default_value = "0..5")]
        seeds: String,
        #[arg(long, default_value_t = 1.0)]
        bonus_c: f64,
        #[arg(long, default_value_t = 0.01)]
        delta: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    init_thread_pool();
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}

/// `MGVL_THREADS` caps the worker pool used by eval and bench.
fn init_thread_pool() {
    if let Ok(value) = std::env::var("MGVL_THREADS") {
        if let Ok(threads) = value.parse::<usize>() {
            if threads >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            config,
            game,
            algo,
            episodes,
            seed,
            bonus_c,
            delta,
            checkpoints,
            pessimistic,
            two_sided,
            log_format,
            out,
        } => {
            let base = config.map(|path| load_config_file(&path)).transpose()?;
            let config = merge_train_flags(
                base,
                game,
                algo,
                episodes,
                seed,
                bonus_c,
                delta,
                checkpoints,
                pessimistic,
                two_sided,
                log_format,
            )?;
            run_train(config, &out)
        }
        Command::Eval { run, mode, player, mc, checkpoints } => {
            let modes = match mode.as_str() {
                "best-response" | "best_response" => vec![GapMode::BestResponse],
                "strategy-mod" | "strategy_mod" => vec![GapMode::StrategyMod],
                "both" => vec![GapMode::BestResponse, GapMode::StrategyMod],
                other => {
                    return Err(CliError::Config(format!(
                        "mode must be best-response|strategy-mod|both, found '{other}'"
                    )))
                }
            };
            run_eval(&EvalArgs {
                run_dir: run,
                modes,
                players: player.map(|p| vec![p]),
                mc_episodes: mc,
                all_checkpoints: checkpoints,
            })
        }
        Command::Gen { spec, seed, out } => run_gen(&spec, seed, &out),
        Command::Bench { game, algo, episodes, seeds, bonus_c, delta, out } => {
            let base = RunConfig {
                game,
                algo,
                episodes,
                seed: 0,
                bonus_c,
                delta,
                checkpoints: Vec::new(),
                pessimistic: false,
                two_sided: false,
                cut_on_estimate_decrease: false,
                log_format: LogFormat::Binary,
            };
            run_bench(&BenchArgs { base, seeds: parse_seeds(&seeds)?, out_dir: out })
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn merge_train_flags(
    base: Option<RunConfig>,
    game: Option<String>,
    algo: Option<Algo>,
    episodes: Option<usize>,
    seed: Option<u64>,
    bonus_c: Option<f64>,
    delta: Option<f64>,
    checkpoints: Option<String>,
    pessimistic: bool,
    two_sided: bool,
    log_format: Option<LogFormat>,
) -> Result<RunConfig, CliError> {
    let mut config = match base {
        Some(config) => config,
        None => RunConfig {
            game: game
                .clone()
                .ok_or_else(|| CliError::Config("--game required without --config".into()))?,
            algo: algo
                .ok_or_else(|| CliError::Config("--algo required without --config".into()))?,
            episodes: episodes
                .ok_or_else(|| CliError::Config("--episodes required without --config".into()))?,
            seed: seed.unwrap_or(0),
            bonus_c: 1.0,
            delta: 0.01,
            checkpoints: Vec::new(),
            pessimistic: false,
            two_sided: false,
            cut_on_estimate_decrease: false,
            log_format: LogFormat::Json,
        },
    };
    if let Some(v) = game {
        config.game = v;
    }
    if let Some(v) = algo {
        config.algo = v;
    }
    if let Some(v) = episodes {
        config.episodes = v;
    }
    if let Some(v) = seed {
        config.seed = v;
    }
    if let Some(v) = bonus_c {
        config.bonus_c = v;
    }
    if let Some(v) = delta {
        config.delta = v;
    }
    if let Some(list) = checkpoints {
        config.checkpoints = list
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| CliError::Config(format!("bad checkpoint '{s}': {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
    }
    if pessimistic {
        config.pessimistic = true;
    }
    if two_sided {
        config.two_sided = true;
    }
    if let Some(v) = log_format {
        config.log_format = v;
    }
    Ok(config)
}

fn parse_seeds(text: &str) -> Result<Vec<u64>, CliError> {
    if let Some((lo, hi)) = text.split_once("..") {
        let lo: u64 =
            lo.parse().map_err(|e| CliError::Config(format!("bad seed range '{text}': {e}")))?;
        let hi: u64 =
            hi.parse().map_err(|e| CliError::Config(format!("bad seed range '{text}': {e}")))?;
        if hi <= lo {
            return Err(CliError::Config(format!("empty seed range '{text}'")));
        }
        return Ok((lo..hi).collect());
    }
    text.split(',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.trim().parse::<u64>().map_err(|e| CliError::Config(format!("bad seed '{s}': {e}")))
        })
        .collect()
}
