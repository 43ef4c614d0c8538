//! Run configuration: serializable config files (TOML or JSON), inline game
//! generator specs, and the algorithm selector.

use mgvl::bandit::BanditMode;
use mgvl::envgen::{parity_hard_instance, random_game, Concentration, RandomGameSpec, RewardMode};
use mgvl::game::MarkovGame;
use mgvl::vlearn::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Algo {
    VlearnExternal,
    VlearnSwap,
    VlearnMonotone,
    Nashq,
}

impl std::fmt::Display for Algo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Algo::VlearnExternal => "vlearn-external",
            Algo::VlearnSwap => "vlearn-swap",
            Algo::VlearnMonotone => "vlearn-monotone",
            Algo::Nashq => "nashq",
        };
        write!(f, "{name}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum LogFormat {
    Json,
    Binary,
}

/// Fully resolved training-run configuration; the manifest echoes this
/// structure verbatim, so a manifest is itself a valid `--config` input.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    /// Game source: a path to a game document or an inline generator spec
    /// (`random:...` / `parity:...`).
    pub game: String,
    pub algo: Algo,
    pub episodes: usize,
    pub seed: u64,
    pub bonus_c: f64,
    pub delta: f64,
    /// Diagnostic/evaluation checkpoints; empty means `[K/4, K/2, K]`.
    #[serde(default)]
    pub checkpoints: Vec<usize>,
    #[serde(default)]
    pub pessimistic: bool,
    /// Use the two-sided zero-sum schedule preset (bonus and step-size
    /// rescaled by sqrt(H)).
    #[serde(default)]
    pub two_sided: bool,
    #[serde(default)]
    pub cut_on_estimate_decrease: bool,
    pub log_format: LogFormat,
}

impl RunConfig {
    pub fn resolved_checkpoints(&self) -> Vec<usize> {
        if !self.checkpoints.is_empty() {
            return self.checkpoints.clone();
        }
        let k = self.episodes;
        let mut out = vec![(k / 4).max(1), (k / 2).max(1), k];
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn validate(&self, game: &MarkovGame) -> Result<(), CliError> {
        if self.episodes == 0 {
            return Err(CliError::Config("episodes must be positive".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(CliError::Config(format!("delta {} outside (0,1)", self.delta)));
        }
        if self.algo == Algo::Nashq && !(game.is_zero_sum() && game.num_players() == 2) {
            return Err(CliError::Config(
                "nashq requires a two-player zero-sum game".into(),
            ));
        }
        if self.checkpoints.iter().any(|&c| c == 0 || c > self.episodes) {
            return Err(CliError::Config("checkpoints must lie in 1..=episodes".into()));
        }
        Ok(())
    }

    pub fn to_train_config(&self, game: &MarkovGame) -> TrainConfig {
        let mode = match self.algo {
            Algo::VlearnSwap => BanditMode::Swap,
            _ => BanditMode::External,
        };
        let mut config = if self.two_sided {
            TrainConfig::two_sided_zero_sum(game, self.bonus_c, self.episodes, self.seed)
        } else {
            TrainConfig::uniform(game, mode, self.bonus_c, self.episodes, self.seed)
        };
        if self.two_sided {
            for p in &mut config.players {
                p.mode = mode;
            }
        }
        config.delta = self.delta;
        config.monotone = self.algo == Algo::VlearnMonotone;
        config.pessimistic_diagnostics = self.pessimistic;
        config.cut_on_estimate_decrease = self.cut_on_estimate_decrease;
        config.checkpoints = self.resolved_checkpoints();
        config
    }
}

/// Loads a config file, accepting TOML or JSON, and accepting a manifest
/// (the config is then taken from its `config` field).
pub fn load_config_file(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
    let json_value: Option<serde_json::Value> = serde_json::from_str(&text).ok();
    if let Some(value) = json_value {
        let inner = value.get("config").cloned().unwrap_or(value);
        return serde_json::from_value(inner)
            .map_err(|e| CliError::Config(format!("bad config {}: {e}", path.display())));
    }
    toml::from_str(&text).map_err(|e| CliError::Config(format!("bad config {}: {e}", path.display())))
}

/// Resolves a game source: a `random:` / `parity:` inline spec or a path to
/// a game document. `default_seed` seeds inline generators that don't pin
/// one themselves.
pub fn load_game(source: &str, default_seed: u64) -> Result<MarkovGame, CliError> {
    if let Some(rest) = source.strip_prefix("random:") {
        let spec = parse_random_spec(rest, default_seed)?;
        return random_game(&spec).map_err(|e| CliError::Config(format!("bad generator spec: {e}")));
    }
    if let Some(rest) = source.strip_prefix("parity:") {
        let (horizon, _, _) = parse_parity_spec(rest)?;
        return parity_hard_instance(horizon)
            .map_err(|e| CliError::Config(format!("bad parity spec: {e}")));
    }
    let text = std::fs::read_to_string(PathBuf::from(source))
        .map_err(|e| CliError::Io(format!("reading game {source}: {e}")))?;
    MarkovGame::parse(&text).map_err(|e| CliError::Config(format!("bad game document: {e}")))
}

/// `zs,S=4,A=2,B=2,H=3[,seed=..][,conc=1.0|uniform]` or
/// `gs,m=3,S=3,A=2|2|2,H=2` or `coop,...`.
pub fn parse_random_spec(rest: &str, default_seed: u64) -> Result<RandomGameSpec, CliError> {
    let mut parts = rest.split(',');
    let mode = match parts.next() {
        Some("zs") => RewardMode::ZeroSum,
        Some("gs") => RewardMode::GeneralSum,
        Some("coop") => RewardMode::Cooperative,
        other => {
            return Err(CliError::Config(format!(
                "random spec must start with zs|gs|coop, found {other:?}"
            )))
        }
    };
    let mut num_players: Option<usize> = None;
    let mut num_states: Option<usize> = None;
    let mut horizon: Option<usize> = None;
    let mut a_counts: Option<Vec<usize>> = None;
    let mut b_count: Option<usize> = None;
    let mut seed = default_seed;
    let mut concentration = Concentration::Dirichlet(1.0);
    for part in parts {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("bad spec fragment '{part}'")))?;
        match key {
            "m" => num_players = Some(parse_num(value)?),
            "S" => num_states = Some(parse_num(value)?),
            "H" => horizon = Some(parse_num(value)?),
            "A" => {
                a_counts = Some(
                    value
                        .split('|')
                        .map(|v| parse_num(v))
                        .collect::<Result<Vec<usize>, _>>()?,
                )
            }
            "B" => b_count = Some(parse_num(value)?),
            "seed" => {
                seed = value
                    .parse::<u64>()
                    .map_err(|e| CliError::Config(format!("bad seed '{value}': {e}")))?
            }
            "conc" => {
                concentration = if value == "uniform" {
                    Concentration::Uniform
                } else {
                    Concentration::Dirichlet(value.parse::<f64>().map_err(|e| {
                        CliError::Config(format!("bad concentration '{value}': {e}"))
                    })?)
                }
            }
            other => return Err(CliError::Config(format!("unknown spec key '{other}'"))),
        }
    }
    let mut action_counts =
        a_counts.ok_or_else(|| CliError::Config("random spec needs A=".into()))?;
    if let Some(b) = b_count {
        if action_counts.len() != 1 {
            return Err(CliError::Config("B= only combines with a single A=".into()));
        }
        action_counts.push(b);
    }
    let m = num_players.unwrap_or(action_counts.len().max(2));
    if action_counts.len() == 1 {
        action_counts = vec![action_counts[0]; m];
    }
    if action_counts.len() != m {
        return Err(CliError::Config(format!(
            "{} action counts for m={m} players",
            action_counts.len()
        )));
    }
    Ok(RandomGameSpec {
        num_players: m,
        num_states: num_states.ok_or_else(|| CliError::Config("random spec needs S=".into()))?,
        action_counts,
        horizon: horizon.ok_or_else(|| CliError::Config("random spec needs H=".into()))?,
        reward_mode: mode,
        concentration,
        seed,
    })
}

/// `H=6[,T=1|3][,alpha=0.2]`; returns `(horizon, secret bits, noise)`.
pub fn parse_parity_spec(rest: &str) -> Result<(usize, Vec<usize>, f64), CliError> {
    let mut horizon: Option<usize> = None;
    let mut secret: Vec<usize> = Vec::new();
    let mut noise = 0.2;
    for part in rest.split(',') {
        if part.is_empty() {
            continue;
        }
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("bad parity fragment '{part}'")))?;
        match key {
            "H" => horizon = Some(parse_num(value)?),
            "T" => {
                secret = value
                    .split('|')
                    .map(|v| parse_num(v))
                    .collect::<Result<Vec<usize>, _>>()?
            }
            "alpha" => {
                noise = value
                    .parse::<f64>()
                    .map_err(|e| CliError::Config(format!("bad alpha '{value}': {e}")))?
            }
            other => return Err(CliError::Config(format!("unknown parity key '{other}'"))),
        }
    }
    let horizon = horizon.ok_or_else(|| CliError::Config("parity spec needs H=".into()))?;
    Ok((horizon, secret, noise))
}

fn parse_num(value: &str) -> Result<usize, CliError> {
    value.parse::<usize>().map_err(|e| CliError::Config(format!("bad number '{value}': {e}")))
}
