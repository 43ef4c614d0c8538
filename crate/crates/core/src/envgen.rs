//! Environment generators: seeded random tabular games and the
//! deterministic parity-encoding hard instance with its noisy opponent.

use crate::game::{GameError, MarkovGame, MarkovPolicy, RngStream, Trajectory, TrajectoryStep};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Reward coupling of a generated game.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Two players, `r_1 + r_2 = 1` per entry.
    ZeroSum,
    /// Independent uniform rewards per player.
    GeneralSum,
    /// All players share one reward table.
    Cooperative,
}

/// Sharpness of the generated transition rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Concentration {
    /// Every row exactly uniform.
    Uniform,
    /// Rows drawn from a symmetric Dirichlet with this concentration; small
    /// values give near-deterministic rows.
    Dirichlet(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RandomGameSpec {
    pub num_players: usize,
    pub num_states: usize,
    pub action_counts: Vec<usize>,
    pub horizon: usize,
    pub reward_mode: RewardMode,
    pub concentration: Concentration,
    pub seed: u64,
}

/// Generates a validated random game; the same spec always yields the same
/// game.
pub fn random_game(spec: &RandomGameSpec) -> Result<MarkovGame, GameError> {
    if spec.action_counts.len() != spec.num_players {
        return Err(GameError::DimensionMismatch(format!(
            "{} action counts for {} players",
            spec.action_counts.len(),
            spec.num_players
        )));
    }
    if spec.reward_mode == RewardMode::ZeroSum && spec.num_players != 2 {
        return Err(GameError::Invalid("zero-sum generation needs exactly 2 players".into()));
    }
    let num_joint: usize = spec.action_counts.iter().product();
    let rows = spec.horizon * spec.num_states * num_joint;
    let mut transitions = Vec::with_capacity(rows * spec.num_states);
    let mut trans_rng = RngStream::named(spec.seed, "gen-transitions");
    match spec.concentration {
        Concentration::Uniform => {
            transitions.resize(rows * spec.num_states, 1.0 / spec.num_states as f64);
        }
        Concentration::Dirichlet(conc) => {
            if !(conc > 0.0) {
                return Err(GameError::Invalid(format!("concentration {conc} must be positive")));
            }
            let gamma = Gamma::new(conc, 1.0)
                .map_err(|e| GameError::Invalid(format!("dirichlet setup: {e}")))?;
            for _ in 0..rows {
                let mut row: Vec<f64> =
                    (0..spec.num_states).map(|_| gamma.sample(&mut trans_rng)).collect();
                let mut total: f64 = row.iter().sum();
                if total <= 0.0 {
                    // All-zero draws are possible for tiny concentrations.
                    row.fill(1.0 / spec.num_states as f64);
                    total = 1.0;
                }
                for v in row.iter_mut() {
                    *v /= total;
                }
                transitions.extend_from_slice(&row);
            }
        }
    }
    let mut reward_rng = RngStream::named(spec.seed, "gen-rewards");
    let per_player = spec.horizon * spec.num_states * num_joint;
    let mut rewards = Vec::with_capacity(spec.num_players * per_player);
    match spec.reward_mode {
        RewardMode::ZeroSum => {
            let first: Vec<f64> = (0..per_player).map(|_| reward_rng.gen_range(0.0..1.0)).collect();
            rewards.extend(first.iter().cloned());
            rewards.extend(first.iter().map(|r| 1.0 - r));
        }
        RewardMode::GeneralSum => {
            for _ in 0..spec.num_players {
                rewards.extend((0..per_player).map(|_| reward_rng.gen_range(0.0..1.0)));
            }
        }
        RewardMode::Cooperative => {
            let shared: Vec<f64> =
                (0..per_player).map(|_| reward_rng.gen_range(0.0..1.0)).collect();
            for _ in 0..spec.num_players {
                rewards.extend(shared.iter().cloned());
            }
        }
    }
    MarkovGame::new(
        spec.horizon,
        spec.num_states,
        spec.action_counts.clone(),
        0,
        spec.reward_mode == RewardMode::ZeroSum,
        transitions,
        rewards,
    )
}

/// State index of the parity instance: step-`i` states carry a single
/// tracked bit (`i` is 1-based here to match the generated layout).
pub fn parity_state(step_one_based: usize, bit: usize) -> usize {
    2 * (step_one_based - 1) + bit
}

/// Terminal absorbing state of the parity instance.
pub fn parity_terminal(horizon: usize) -> usize {
    2 * horizon
}

/// The deterministic two-player hard instance on `2H + 1` states.
///
/// States come in pairs `(i_0, i_1)` for steps `i = 1..=H` plus one
/// terminal sink. With max-player actions `(a_0, a_1)` and min-player
/// actions `(b_0, b_1)`, the tracked bit evolves as "keep the bit on `b_0`,
/// reset it to the max player's action on `b_1`", and the only rewards sit
/// at step `H`, where the min player's action decides which bit value pays
/// the max player.
pub fn parity_hard_instance(horizon: usize) -> Result<MarkovGame, GameError> {
    if horizon < 2 {
        return Err(GameError::Invalid("parity instance needs a horizon of at least 2".into()));
    }
    let num_states = 2 * horizon + 1;
    let num_joint = 4;
    let terminal = parity_terminal(horizon);
    let mut transitions = vec![0.0f64; horizon * num_states * num_joint * num_states];
    let mut set = |h: usize, s: usize, joint: usize, next: usize| {
        let base = ((h * num_states + s) * num_joint + joint) * num_states;
        transitions[base + next] = 1.0;
    };
    for h in 0..horizon {
        for s in 0..num_states {
            for joint in 0..num_joint {
                let (a, b) = (joint / 2, joint % 2);
                let step = h + 1; // states i_0/i_1 live at step i
                let here = if s == parity_state(step, 0) {
                    Some(0)
                } else if s == parity_state(step, 1) {
                    Some(1)
                } else {
                    None
                };
                let next = match here {
                    Some(bit) if step < horizon => {
                        let next_bit = if b == 1 { a } else { bit };
                        parity_state(step + 1, next_bit)
                    }
                    _ => terminal,
                };
                set(h, s, joint, next);
            }
        }
    }
    let mut rewards = vec![0.0f64; 2 * horizon * num_states * num_joint];
    {
        let h = horizon - 1;
        for bit in 0..2usize {
            let s = parity_state(horizon, bit);
            for joint in 0..num_joint {
                let b = joint % 2;
                if b == bit {
                    rewards[(h * num_states + s) * num_joint + joint] = 1.0;
                }
            }
        }
        // Min-player rewards are the zero-sum complement everywhere.
        let per_player = horizon * num_states * num_joint;
        for idx in 0..per_player {
            rewards[per_player + idx] = 1.0 - rewards[idx];
        }
    }
    MarkovGame::new(horizon, num_states, vec![2, 2], parity_state(1, 0), true, transitions, rewards)
}

/// Secret-parity opponent specification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParityOpponentSpec {
    /// Bit positions, 1-based over `1..=H-1`.
    pub secret_bits: Vec<usize>,
    /// Label-flip probability in (0, 1/2).
    pub noise: f64,
    pub seed: u64,
}

impl ParityOpponentSpec {
    pub fn validate(&self, horizon: usize) -> Result<(), GameError> {
        let n = horizon - 1;
        if self.secret_bits.is_empty() {
            return Err(GameError::Invalid("secret set must be non-empty".into()));
        }
        if self.secret_bits.iter().any(|&i| i == 0 || i > n) {
            return Err(GameError::Invalid(format!("secret bits must lie in 1..={n}")));
        }
        if !(self.noise > 0.0 && self.noise < 0.5) {
            return Err(GameError::Invalid(format!("noise {} outside (0, 1/2)", self.noise)));
        }
        Ok(())
    }
}

/// One episode's sample from the noisy parity oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParitySample {
    /// Bits `x_1..x_n` packed little-endian.
    pub x: u64,
    /// Noisy label.
    pub y: bool,
}

impl ParitySample {
    pub fn bit(&self, position: usize) -> bool {
        (self.x >> (position - 1)) & 1 == 1
    }
}

/// Parity of `x` restricted to the given 1-based positions.
pub fn parity_of(x: u64, bits: &[usize]) -> bool {
    bits.iter().fold(false, |acc, &i| acc ^ ((x >> (i - 1)) & 1 == 1))
}

/// Draws one `(x, y)` query-oracle sample.
pub fn parity_sample(spec: &ParityOpponentSpec, n: usize, rng: &mut RngStream) -> ParitySample {
    let x: u64 = if n == 64 { rng.gen() } else { rng.gen::<u64>() & ((1u64 << n) - 1) };
    let clean = parity_of(x, &spec.secret_bits);
    let flip = rng.next_f64() < spec.noise;
    ParitySample { x, y: clean ^ flip }
}

/// Min-player action at each step for a drawn sample: `b_{x_h}` while the
/// bits last, then `b_y` at the final step.
pub fn parity_opponent_action(sample: &ParitySample, horizon: usize, h: usize) -> usize {
    if h + 1 < horizon {
        usize::from(sample.bit(h + 1))
    } else {
        usize::from(sample.y)
    }
}

/// Deterministic max-player policy that commits to a guessed secret set.
///
/// The tracked bit of the current state is part of the action: in state
/// `i_p` at step `h` the policy plays `a_{p xor [h in guess]}`, which makes
/// the next state's bit equal to the guess-parity of the opponent's bits
/// revealed so far. The final step plays `a_0`.
pub fn parity_guess_policy(game: &MarkovGame, guess_bits: &[usize]) -> MarkovPolicy {
    let horizon = game.horizon();
    let mut policy = MarkovPolicy::uniform(game);
    for h in 0..horizon {
        let in_guess = guess_bits.contains(&(h + 1)) && h + 1 < horizon;
        for bit in 0..2usize {
            let step = h + 1;
            let s = parity_state(step, bit);
            let action = if h + 1 < horizon { bit ^ usize::from(in_guess) } else { 0 };
            let mut dist = vec![0.0, 0.0];
            dist[action] = 1.0;
            policy.set_action_probs(0, h, s, dist);
        }
    }
    policy
}

/// A max-player Markov policy matched against the parity opponent; episodes
/// draw a fresh oracle sample each time.
#[derive(Debug, Clone)]
pub struct ParityMatchup {
    pub max_policy: MarkovPolicy,
    pub opponent: ParityOpponentSpec,
}

impl ParityMatchup {
    /// Plays one episode and exposes the realized oracle sample.
    pub fn sample_episode_with_labels(
        &self,
        game: &MarkovGame,
        rng: &mut RngStream,
    ) -> Result<(Trajectory, ParitySample), GameError> {
        let horizon = game.horizon();
        let sample = parity_sample(&self.opponent, horizon - 1, rng);
        let mut state = game.initial_state();
        let mut steps = Vec::with_capacity(horizon);
        for h in 0..horizon {
            let a = rng.index_from_probs(self.max_policy.action_probs(0, h, state));
            let b = parity_opponent_action(&sample, horizon, h);
            let (rewards, next) = game.step(h, state, &[a, b], rng)?;
            steps.push(TrajectoryStep { state, actions: vec![a, b], rewards });
            state = next;
        }
        Ok((Trajectory { episode: 0, steps }, sample))
    }
}

impl crate::evalx::EpisodeSampler for ParityMatchup {
    fn sample_episode(
        &self,
        game: &MarkovGame,
        _episode: usize,
        rng: &mut RngStream,
    ) -> Result<Trajectory, GameError> {
        self.sample_episode_with_labels(game, rng).map(|(t, _)| t)
    }
}

/// Writes one transcript line `{"episode":..,"x":..,"y":..}`.
pub fn write_transcript_line(
    w: &mut impl Write,
    episode: usize,
    sample: &ParitySample,
) -> std::io::Result<()> {
    writeln!(w, "{{\"episode\":{episode},\"x\":{},\"y\":{}}}", sample.x, sample.y)
}
