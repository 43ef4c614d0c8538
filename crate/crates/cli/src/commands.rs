//! Subcommand implementations: train, eval, gen, and bench.

use crate::config::{load_game, Algo, LogFormat, RunConfig};
use crate::CliError;
use mgvl::certified::{extract_monotone_markov, CertifiedPolicyLog, LogVariant};
use mgvl::evalx::{
    certified_gap, mc_value, nash_gap_markov, nash_values_zero_sum, EstimateKind, EvalOptions,
    GapMode, GapReport, NashTables,
};
use mgvl::game::MarkovGame;
use mgvl::nashq::{train_nashq_with_reference, QTrainConfig};
use mgvl::vlearn::train_with_reference;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Tracks written artifacts so a failed run leaves no partial outputs.
struct OutputSet {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl OutputSet {
    fn new(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Io(format!("creating {}: {e}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf(), written: Vec::new() })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes)
            .map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))?;
        self.written.push(path.clone());
        Ok(path)
    }

    fn discard(self) {
        for path in self.written {
            let _ = std::fs::remove_file(path);
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: RunConfig,
    pub seed: u64,
    pub checkpoints: Vec<usize>,
    pub artifacts: ManifestArtifacts,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestArtifacts {
    pub game: String,
    pub policy_log: String,
    pub diagnostics: String,
}

pub fn run_train(config: RunConfig, out_dir: &Path) -> Result<(), CliError> {
    let mut outputs = OutputSet::new(out_dir)?;
    match train_inner(&config, &mut outputs) {
        Ok(()) => Ok(()),
        Err(e) => {
            outputs.discard();
            Err(e)
        }
    }
}

fn train_inner(config: &RunConfig, outputs: &mut OutputSet) -> Result<(), CliError> {
    let game = load_game(&config.game, config.seed)?;
    config.validate(&game)?;
    let checkpoints = config.resolved_checkpoints();

    // Exact minimax reference for optimism statistics, where it exists.
    let reference_tables: Option<NashTables> =
        if game.is_zero_sum() && game.num_players() == 2 {
            Some(nash_values_zero_sum(&game).map_err(|e| CliError::Invariant(e.to_string()))?)
        } else {
            None
        };

    let log_name = match config.log_format {
        LogFormat::Json => "policy_log.json",
        LogFormat::Binary => "policy_log.bin",
    };
    let mut csv = String::from("episode,player,optimism_violations,gap_trace,wallclock_ms\n");
    let log: CertifiedPolicyLog = match config.algo {
        Algo::Nashq => {
            let mut qcfg = QTrainConfig::new(config.episodes, config.seed, config.bonus_c);
            qcfg.delta = config.delta;
            qcfg.checkpoints = checkpoints.clone();
            let out = train_nashq_with_reference(&game, &qcfg, reference_tables.as_ref())
                .map_err(|e| CliError::Invariant(e.to_string()))?;
            if out.diagnostics.min_pair_separation < 0.0 {
                return Err(CliError::Invariant(
                    "pessimistic table overtook the optimistic one".into(),
                ));
            }
            for stat in &out.diagnostics.checkpoints {
                let violations = stat
                    .sandwich_violations
                    .map(|(a, b)| (a + b).to_string())
                    .unwrap_or_default();
                // The centralized learner reports one line per player with
                // shared statistics.
                for player in 0..2 {
                    csv.push_str(&format!(
                        "{},{},{},{},{}\n",
                        stat.episode, player, violations, stat.mean_initial_width, stat.wallclock_ms
                    ));
                }
            }
            out.log
        }
        _ => {
            let tcfg = config.to_train_config(&game);
            let reference: Option<Vec<Vec<Vec<f64>>>> = reference_tables.as_ref().map(|tables| {
                (0..2)
                    .map(|j| {
                        (0..game.horizon())
                            .map(|h| {
                                (0..game.num_states())
                                    .map(|s| tables.value_for(j, h, s))
                                    .collect()
                            })
                            .collect()
                    })
                    .collect()
            });
            let out = train_with_reference(&game, &tcfg, reference.as_deref())
                .map_err(|e| CliError::Invariant(e.to_string()))?;
            if let Some(min_gaps) = &out.diagnostics.min_visited_gap {
                if !tcfg.monotone && min_gaps.iter().any(|&g| g < 0.0) {
                    return Err(CliError::Invariant(
                        "negative diagnostic gap at a visited state".into(),
                    ));
                }
            }
            for stat in &out.diagnostics.checkpoints {
                for player in 0..game.num_players() {
                    let violations = stat
                        .optimism_violations
                        .as_ref()
                        .map(|v| v[player].to_string())
                        .unwrap_or_default();
                    csv.push_str(&format!(
                        "{},{},{},{},{}\n",
                        stat.episode, player, violations, stat.gap_trace[player], stat.wallclock_ms
                    ));
                }
            }
            out.log
        }
    };

    outputs.write("game.json", game.to_json().as_bytes())?;
    match config.log_format {
        LogFormat::Json => outputs.write(log_name, log.to_json().as_bytes())?,
        LogFormat::Binary => outputs.write(log_name, &log.to_binary())?,
    };
    outputs.write("diagnostics.csv", csv.as_bytes())?;
    let manifest = Manifest {
        version: 1,
        config: config.clone(),
        seed: config.seed,
        checkpoints,
        artifacts: ManifestArtifacts {
            game: "game.json".into(),
            policy_log: log_name.into(),
            diagnostics: "diagnostics.csv".into(),
        },
    };
    let manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CliError::Io(format!("manifest serialization: {e}")))?;
    outputs.write("manifest.json", manifest_json.as_bytes())?;
    println!("wrote {}", outputs.dir.display());
    Ok(())
}

pub fn load_manifest(run_dir: &Path) -> Result<Manifest, CliError> {
    let path = run_dir.join("manifest.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Io(format!("corrupt manifest {}: {e}", path.display())))
}

pub fn load_run(run_dir: &Path) -> Result<(Manifest, MarkovGame, CertifiedPolicyLog), CliError> {
    let manifest = load_manifest(run_dir)?;
    let game_path = run_dir.join(&manifest.artifacts.game);
    let game_text = std::fs::read_to_string(&game_path)
        .map_err(|e| CliError::Io(format!("reading {}: {e}", game_path.display())))?;
    let game =
        MarkovGame::parse(&game_text).map_err(|e| CliError::Io(format!("corrupt game: {e}")))?;
    let log_path = run_dir.join(&manifest.artifacts.policy_log);
    let bytes = std::fs::read(&log_path)
        .map_err(|e| CliError::Io(format!("reading {}: {e}", log_path.display())))?;
    let log = match manifest.config.log_format {
        LogFormat::Json => CertifiedPolicyLog::from_json(
            std::str::from_utf8(&bytes).map_err(|e| CliError::Io(format!("corrupt log: {e}")))?,
        ),
        LogFormat::Binary => CertifiedPolicyLog::from_binary(&bytes),
    }
    .map_err(|e| CliError::Io(format!("corrupt log: {e}")))?;
    log.validate(&game).map_err(|e| CliError::Io(format!("log/game mismatch: {e}")))?;
    Ok((manifest, game, log))
}

pub struct EvalArgs {
    pub run_dir: PathBuf,
    pub modes: Vec<GapMode>,
    pub players: Option<Vec<usize>>,
    pub mc_episodes: Option<usize>,
    pub all_checkpoints: bool,
}

pub fn run_eval(args: &EvalArgs) -> Result<(), CliError> {
    let (manifest, game, log) = load_run(&args.run_dir)?;
    let players: Vec<usize> =
        args.players.clone().unwrap_or_else(|| (0..game.num_players()).collect());
    for &p in &players {
        if p >= game.num_players() {
            return Err(CliError::Config(format!("player {p} out of range")));
        }
    }
    let checkpoints: Vec<usize> = if args.all_checkpoints {
        manifest.checkpoints.clone()
    } else {
        vec![log.num_episodes]
    };
    let options = EvalOptions::default();

    // One task per (checkpoint, player, mode); the collected order is fixed
    // by the task list, so parallelism never reorders rows.
    let mut tasks = Vec::new();
    for &checkpoint in &checkpoints {
        for &player in &players {
            for &mode in &args.modes {
                tasks.push((checkpoint, player, mode));
            }
        }
    }
    let reports: Result<Vec<GapReport>, CliError> = tasks
        .par_iter()
        .map(|&(checkpoint, player, mode)| {
            let truncated = log.truncated(checkpoint);
            certified_gap(&game, &truncated, player, mode, &options)
                .map_err(|e| CliError::Invariant(e.to_string()))
        })
        .collect();
    let mut reports = reports?;

    if let Some(mc_episodes) = args.mc_episodes {
        let (means, stderrs) =
            mc_value(&game, &log, mc_episodes, manifest.seed.wrapping_add(1))
                .map_err(|e| CliError::Invariant(e.to_string()))?;
        for &player in &players {
            for &mode in &args.modes {
                let exact = reports
                    .iter()
                    .find(|r| {
                        r.player == player && r.mode == mode && r.episodes == log.num_episodes
                    })
                    .map(|r| r.upper_bound);
                if let Some(upper) = exact {
                    reports.push(GapReport {
                        player,
                        mode,
                        episodes: log.num_episodes,
                        on_policy: means[player],
                        upper_bound: upper,
                        gap: upper - means[player],
                        estimate: EstimateKind::MonteCarlo { stderr: stderrs[player] },
                    });
                }
            }
        }
    }

    let mut csv = String::from("player,mode,K,on_policy,upper_bound,gap,exact_or_mc,stderr\n");
    for report in &reports {
        csv.push_str(&report.csv_row());
        csv.push('\n');
    }
    let gaps_path = args.run_dir.join("gaps.csv");
    std::fs::write(&gaps_path, &csv)
        .map_err(|e| CliError::Io(format!("writing {}: {e}", gaps_path.display())))?;
    let json_path = args.run_dir.join("gap_reports.json");
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&reports)
            .map_err(|e| CliError::Io(format!("report serialization: {e}")))?,
    )
    .map_err(|e| CliError::Io(format!("writing {}: {e}", json_path.display())))?;

    // Monotone runs additionally report the exact gaps of the extracted
    // Markov policy.
    if log.variant == LogVariant::VStyle && log.monotone_cuts.is_some() {
        let mut csv = String::from("player,K,nash_gap\n");
        for &checkpoint in &checkpoints {
            let truncated = log.truncated(checkpoint);
            let extracted = extract_monotone_markov(&truncated)
                .map_err(|e| CliError::Invariant(e.to_string()))?;
            let gaps = nash_gap_markov(&game, &extracted.policy)
                .map_err(|e| CliError::Invariant(e.to_string()))?;
            for (player, gap) in gaps.iter().enumerate() {
                csv.push_str(&format!("{player},{checkpoint},{gap}\n"));
            }
        }
        let path = args.run_dir.join("nash_gaps.csv");
        std::fs::write(&path, &csv)
            .map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))?;
    }
    println!("wrote {}", gaps_path.display());
    Ok(())
}

pub fn run_gen(spec: &str, seed: u64, out: &Path) -> Result<(), CliError> {
    let game = load_game(spec, seed)?;
    std::fs::write(out, game.to_json())
        .map_err(|e| CliError::Io(format!("writing {}: {e}", out.display())))?;
    println!("wrote {}", out.display());
    Ok(())
}

pub struct BenchArgs {
    pub base: RunConfig,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

/// Multi-seed train-and-eval sweep emitting one CSV row per
/// `(seed, checkpoint, player, mode)`.
pub fn run_bench(args: &BenchArgs) -> Result<(), CliError> {
    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| CliError::Io(format!("creating {}: {e}", args.out_dir.display())))?;
    let rows: Result<Vec<Vec<String>>, CliError> = args
        .seeds
        .par_iter()
        .map(|&seed| {
            let mut config = args.base.clone();
            config.seed = seed;
            let game = load_game(&config.game, seed)?;
            config.validate(&game)?;
            let start = std::time::Instant::now();
            let log = match config.algo {
                Algo::Nashq => {
                    let mut qcfg = QTrainConfig::new(config.episodes, seed, config.bonus_c);
                    qcfg.delta = config.delta;
                    train_nashq_with_reference(&game, &qcfg, None)
                        .map_err(|e| CliError::Invariant(e.to_string()))?
                        .log
                }
                _ => {
                    let tcfg = config.to_train_config(&game);
                    train_with_reference(&game, &tcfg, None)
                        .map_err(|e| CliError::Invariant(e.to_string()))?
                        .log
                }
            };
            let train_ms = start.elapsed().as_millis();
            let mut rows = Vec::new();
            for checkpoint in config.resolved_checkpoints() {
                let truncated = log.truncated(checkpoint);
                for player in 0..game.num_players() {
                    for mode in [GapMode::BestResponse, GapMode::StrategyMod] {
                        let start = std::time::Instant::now();
                        let report = certified_gap(
                            &game,
                            &truncated,
                            player,
                            mode,
                            &EvalOptions::default(),
                        )
                        .map_err(|e| CliError::Invariant(e.to_string()))?;
                        rows.push(format!(
                            "{seed},{},{checkpoint},{player},{mode},{},{},{},{train_ms},{}",
                            config.algo,
                            report.on_policy,
                            report.upper_bound,
                            report.gap,
                            start.elapsed().as_millis()
                        ));
                    }
                }
            }
            Ok(rows)
        })
        .collect();
    let mut csv =
        String::from("seed,algo,K,player,mode,on_policy,upper_bound,gap,train_ms,eval_ms\n");
    for seed_rows in rows? {
        for row in seed_rows {
            csv.push_str(&row);
            csv.push('\n');
        }
    }
    let path = args.out_dir.join("bench.csv");
    std::fs::write(&path, &csv).map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}
