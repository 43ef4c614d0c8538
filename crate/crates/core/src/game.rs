//! Tabular episodic Markov games: the game model, trajectories, Markov
//! policies, and the seeded randomness contract shared by every component.
//!
//! A game is a finite-horizon table `(H, S, A_1..A_m, P, r_1..r_m)` with a
//! fixed initial state. Joint actions are flattened row-major with player 0
//! slowest, both in memory and in the on-disk JSON document.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for transition-row normalization and distribution checks.
pub const DIST_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GameError {
    #[error("malformed game document: {0}")]
    Malformed(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("negative probability {value} at (h={h}, s={s}, a={joint}, s'={next})")]
    NegativeProbability {
        h: usize,
        s: usize,
        joint: usize,
        next: usize,
        value: f64,
    },
    #[error("transition row sums to {sum} at (h={h}, s={s}, a={joint})")]
    RowSum { h: usize, s: usize, joint: usize, sum: f64 },
    #[error("reward {value} outside [0,1] for player {player} at (h={h}, s={s}, a={joint})")]
    RewardOutOfRange {
        player: usize,
        h: usize,
        s: usize,
        joint: usize,
        value: f64,
    },
    #[error("zero-sum flag violated at (h={h}, s={s}, a={joint}): r0 + r1 = {sum}, expected 1")]
    ZeroSumViolation { h: usize, s: usize, joint: usize, sum: f64 },
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("{0}")]
    Invalid(String),
}

/// A fully specified tabular episodic Markov game.
///
/// Immutable after construction; shared freely across threads.
/// Steps `h` and states/actions are dense 0-based indices internally
/// (the public protocol and all documents use 0-based indices as well;
/// a "step h" argument ranges over `0..horizon`).
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovGame {
    horizon: usize,
    num_states: usize,
    action_counts: Vec<usize>,
    initial_state: usize,
    zero_sum: bool,
    num_joint: usize,
    /// `[h][s][joint] -> [s']`, flattened; row-major in (h, s, joint, s').
    transitions: Vec<f64>,
    /// `[player][h][s][joint]`, flattened.
    rewards: Vec<f64>,
}

/// On-disk JSON form of a game.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct GameDocument {
    horizon: usize,
    num_states: usize,
    /// Per-player action counts.
    players: Vec<usize>,
    initial_state: usize,
    #[serde(default)]
    zero_sum: bool,
    /// `[h][s][joint][s']`.
    transitions: Vec<Vec<Vec<Vec<f64>>>>,
    /// `[player][h][s][joint]`.
    rewards: Vec<Vec<Vec<Vec<f64>>>>,
}

impl MarkovGame {
    /// Validates and builds a game from dense tables.
    ///
    /// Transition rows within `DIST_TOL` of total mass 1 are renormalized;
    /// anything further off is rejected with its coordinates.
    pub fn new(
        horizon: usize,
        num_states: usize,
        action_counts: Vec<usize>,
        initial_state: usize,
        zero_sum: bool,
        mut transitions: Vec<f64>,
        rewards: Vec<f64>,
    ) -> Result<Self, GameError> {
        if horizon == 0 || num_states == 0 || action_counts.is_empty() {
            return Err(GameError::Invalid(
                "horizon, state count, and player count must be positive".into(),
            ));
        }
        if action_counts.iter().any(|&a| a == 0) {
            return Err(GameError::Invalid("every player needs at least one action".into()));
        }
        if initial_state >= num_states {
            return Err(GameError::IndexOutOfRange(format!(
                "initial state {initial_state} with {num_states} states"
            )));
        }
        let num_joint: usize = action_counts.iter().product();
        let m = action_counts.len();
        if transitions.len() != horizon * num_states * num_joint * num_states {
            return Err(GameError::DimensionMismatch(format!(
                "transition table has {} entries, expected {}",
                transitions.len(),
                horizon * num_states * num_joint * num_states
            )));
        }
        if rewards.len() != m * horizon * num_states * num_joint {
            return Err(GameError::DimensionMismatch(format!(
                "reward table has {} entries, expected {}",
                rewards.len(),
                m * horizon * num_states * num_joint
            )));
        }
        for h in 0..horizon {
            for s in 0..num_states {
                for joint in 0..num_joint {
                    let base = ((h * num_states + s) * num_joint + joint) * num_states;
                    let row = &mut transitions[base..base + num_states];
                    let mut sum = 0.0;
                    for (next, &p) in row.iter().enumerate() {
                        if p < 0.0 {
                            return Err(GameError::NegativeProbability { h, s, joint, next, value: p });
                        }
                        sum += p;
                    }
                    if (sum - 1.0).abs() > DIST_TOL {
                        return Err(GameError::RowSum { h, s, joint, sum });
                    }
                    // Rows already exact to rounding noise are kept
                    // bit-identical so parse(serialize(g)) == g.
                    if (sum - 1.0).abs() > 1e-13 {
                        for p in row.iter_mut() {
                            *p /= sum;
                        }
                    }
                }
            }
        }
        for player in 0..m {
            for h in 0..horizon {
                for s in 0..num_states {
                    for joint in 0..num_joint {
                        let idx = ((player * horizon + h) * num_states + s) * num_joint + joint;
                        let r = rewards[idx];
                        if !(0.0..=1.0).contains(&r) {
                            return Err(GameError::RewardOutOfRange { player, h, s, joint, value: r });
                        }
                    }
                }
            }
        }
        if zero_sum {
            if m != 2 {
                return Err(GameError::Invalid(format!(
                    "zero-sum flag requires exactly 2 players, found {m}"
                )));
            }
            let per_player = horizon * num_states * num_joint;
            for idx in 0..per_player {
                let sum = rewards[idx] + rewards[per_player + idx];
                if (sum - 1.0).abs() > DIST_TOL {
                    let joint = idx % num_joint;
                    let s = (idx / num_joint) % num_states;
                    let h = idx / (num_joint * num_states);
                    return Err(GameError::ZeroSumViolation { h, s, joint, sum });
                }
            }
        }
        Ok(Self {
            horizon,
            num_states,
            action_counts,
            initial_state,
            zero_sum,
            num_joint,
            transitions,
            rewards,
        })
    }

    /// Parses and validates the JSON game document.
    pub fn parse(text: &str) -> Result<Self, GameError> {
        let doc: GameDocument =
            serde_json::from_str(text).map_err(|e| GameError::Malformed(e.to_string()))?;
        let num_joint: usize = doc.players.iter().product();
        let mut transitions = Vec::with_capacity(doc.horizon * doc.num_states * num_joint * doc.num_states);
        if doc.transitions.len() != doc.horizon {
            return Err(GameError::DimensionMismatch(format!(
                "transitions list {} steps, horizon {}",
                doc.transitions.len(),
                doc.horizon
            )));
        }
        for (h, per_state) in doc.transitions.iter().enumerate() {
            if per_state.len() != doc.num_states {
                return Err(GameError::DimensionMismatch(format!(
                    "transitions[{h}] lists {} states, expected {}",
                    per_state.len(),
                    doc.num_states
                )));
            }
            for (s, per_joint) in per_state.iter().enumerate() {
                if per_joint.len() != num_joint {
                    return Err(GameError::DimensionMismatch(format!(
                        "transitions[{h}][{s}] lists {} joint actions, expected {num_joint}",
                        per_joint.len()
                    )));
                }
                for (joint, row) in per_joint.iter().enumerate() {
                    if row.len() != doc.num_states {
                        return Err(GameError::DimensionMismatch(format!(
                            "transitions[{h}][{s}][{joint}] row of {} entries, expected {}",
                            row.len(),
                            doc.num_states
                        )));
                    }
                    transitions.extend_from_slice(row);
                }
            }
        }
        if doc.rewards.len() != doc.players.len() {
            return Err(GameError::DimensionMismatch(format!(
                "rewards list {} players, expected {}",
                doc.rewards.len(),
                doc.players.len()
            )));
        }
        let mut rewards = Vec::with_capacity(doc.players.len() * doc.horizon * doc.num_states * num_joint);
        for (player, per_h) in doc.rewards.iter().enumerate() {
            if per_h.len() != doc.horizon {
                return Err(GameError::DimensionMismatch(format!(
                    "rewards[{player}] lists {} steps, expected {}",
                    per_h.len(),
                    doc.horizon
                )));
            }
            for (h, per_state) in per_h.iter().enumerate() {
                if per_state.len() != doc.num_states {
                    return Err(GameError::DimensionMismatch(format!(
                        "rewards[{player}][{h}] lists {} states, expected {}",
                        per_state.len(),
                        doc.num_states
                    )));
                }
                for (s, row) in per_state.iter().enumerate() {
                    if row.len() != num_joint {
                        return Err(GameError::DimensionMismatch(format!(
                            "rewards[{player}][{h}][{s}] row of {} entries, expected {num_joint}",
                            row.len()
                        )));
                    }
                    rewards.extend_from_slice(row);
                }
            }
        }
        Self::new(
            doc.horizon,
            doc.num_states,
            doc.players,
            doc.initial_state,
            doc.zero_sum,
            transitions,
            rewards,
        )
    }

    /// Serializes to the JSON game document (round-trips through `parse`).
    pub fn to_json(&self) -> String {
        let mut transitions = Vec::with_capacity(self.horizon);
        for h in 0..self.horizon {
            let mut per_state = Vec::with_capacity(self.num_states);
            for s in 0..self.num_states {
                let mut per_joint = Vec::with_capacity(self.num_joint);
                for joint in 0..self.num_joint {
                    per_joint.push(self.transition_row(h, s, joint).to_vec());
                }
                per_state.push(per_joint);
            }
            transitions.push(per_state);
        }
        let mut rewards = Vec::with_capacity(self.action_counts.len());
        for player in 0..self.action_counts.len() {
            let mut per_h = Vec::with_capacity(self.horizon);
            for h in 0..self.horizon {
                let mut per_state = Vec::with_capacity(self.num_states);
                for s in 0..self.num_states {
                    let base = ((player * self.horizon + h) * self.num_states + s) * self.num_joint;
                    per_state.push(self.rewards[base..base + self.num_joint].to_vec());
                }
                per_h.push(per_state);
            }
            rewards.push(per_h);
        }
        let doc = GameDocument {
            horizon: self.horizon,
            num_states: self.num_states,
            players: self.action_counts.clone(),
            initial_state: self.initial_state,
            zero_sum: self.zero_sum,
            transitions,
            rewards,
        };
        serde_json::to_string_pretty(&doc).expect("game document serialization")
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_players(&self) -> usize {
        self.action_counts.len()
    }

    pub fn action_counts(&self) -> &[usize] {
        &self.action_counts
    }

    pub fn actions(&self, player: usize) -> usize {
        self.action_counts[player]
    }

    pub fn max_actions(&self) -> usize {
        *self.action_counts.iter().max().expect("at least one player")
    }

    pub fn num_joint_actions(&self) -> usize {
        self.num_joint
    }

    pub fn initial_state(&self) -> usize {
        self.initial_state
    }

    pub fn is_zero_sum(&self) -> bool {
        self.zero_sum
    }

    /// Flattens per-player actions into the joint index (player 0 slowest).
    pub fn joint_index(&self, actions: &[usize]) -> usize {
        debug_assert_eq!(actions.len(), self.action_counts.len());
        let mut idx = 0;
        for (a, &count) in actions.iter().zip(&self.action_counts) {
            debug_assert!(*a < count);
            idx = idx * count + a;
        }
        idx
    }

    /// Inverse of [`joint_index`](Self::joint_index).
    pub fn split_joint(&self, mut joint: usize) -> Vec<usize> {
        let mut actions = vec![0; self.action_counts.len()];
        for i in (0..self.action_counts.len()).rev() {
            actions[i] = joint % self.action_counts[i];
            joint /= self.action_counts[i];
        }
        actions
    }

    pub fn transition_row(&self, h: usize, s: usize, joint: usize) -> &[f64] {
        let base = ((h * self.num_states + s) * self.num_joint + joint) * self.num_states;
        &self.transitions[base..base + self.num_states]
    }

    pub fn reward(&self, player: usize, h: usize, s: usize, joint: usize) -> f64 {
        self.rewards[((player * self.horizon + h) * self.num_states + s) * self.num_joint + joint]
    }

    /// Plays one environment step: exact rewards plus a successor drawn from
    /// the transition row. Rows with a unit entry always yield that successor.
    pub fn step(
        &self,
        h: usize,
        s: usize,
        actions: &[usize],
        rng: &mut RngStream,
    ) -> Result<(Vec<f64>, usize), GameError> {
        if h >= self.horizon || s >= self.num_states {
            return Err(GameError::IndexOutOfRange(format!("step h={h}, state s={s}")));
        }
        if actions.len() != self.action_counts.len()
            || actions.iter().zip(&self.action_counts).any(|(&a, &count)| a >= count)
        {
            return Err(GameError::IndexOutOfRange(format!("joint action {actions:?}")));
        }
        let joint = self.joint_index(actions);
        let rewards = (0..self.num_players()).map(|i| self.reward(i, h, s, joint)).collect();
        let next = rng.index_from_probs(self.transition_row(h, s, joint));
        Ok((rewards, next))
    }
}

/// One recorded step of an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub state: usize,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
}

/// A full H-step episode record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub episode: usize,
    pub steps: Vec<TrajectoryStep>,
}

impl Trajectory {
    pub fn total_reward(&self, player: usize) -> f64 {
        self.steps.iter().map(|st| st.rewards[player]).sum()
    }
}

/// A product Markov policy: one action distribution per `(player, h, s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovPolicy {
    action_counts: Vec<usize>,
    horizon: usize,
    num_states: usize,
    /// `[player][h][s] -> Vec<f64>` over that player's actions.
    probs: Vec<Vec<Vec<Vec<f64>>>>,
}

impl MarkovPolicy {
    pub fn uniform(game: &MarkovGame) -> Self {
        let probs = game
            .action_counts()
            .iter()
            .map(|&a| {
                vec![vec![vec![1.0 / a as f64; a]; game.num_states()]; game.horizon()]
            })
            .collect();
        Self {
            action_counts: game.action_counts().to_vec(),
            horizon: game.horizon(),
            num_states: game.num_states(),
            probs,
        }
    }

    pub fn new(
        action_counts: Vec<usize>,
        horizon: usize,
        num_states: usize,
        probs: Vec<Vec<Vec<Vec<f64>>>>,
    ) -> Result<Self, GameError> {
        if probs.len() != action_counts.len() {
            return Err(GameError::DimensionMismatch("policy player count".into()));
        }
        for (player, per_h) in probs.iter().enumerate() {
            if per_h.len() != horizon {
                return Err(GameError::DimensionMismatch(format!("policy horizon for player {player}")));
            }
            for per_s in per_h {
                if per_s.len() != num_states {
                    return Err(GameError::DimensionMismatch(format!("policy states for player {player}")));
                }
                for dist in per_s {
                    if dist.len() != action_counts[player] {
                        return Err(GameError::DimensionMismatch(format!(
                            "policy actions for player {player}"
                        )));
                    }
                    validate_distribution(dist).map_err(GameError::Invalid)?;
                }
            }
        }
        Ok(Self { action_counts, horizon, num_states, probs })
    }

    pub fn action_probs(&self, player: usize, h: usize, s: usize) -> &[f64] {
        &self.probs[player][h][s]
    }

    pub fn set_action_probs(&mut self, player: usize, h: usize, s: usize, dist: Vec<f64>) {
        debug_assert_eq!(dist.len(), self.action_counts[player]);
        self.probs[player][h][s] = dist;
    }

    pub fn num_players(&self) -> usize {
        self.action_counts.len()
    }
}

/// Checks a probability vector: non-negative entries summing to 1 within
/// [`DIST_TOL`].
pub fn validate_distribution(dist: &[f64]) -> Result<(), String> {
    if dist.iter().any(|&p| p < 0.0) {
        return Err(format!("negative probability in {dist:?}"));
    }
    let sum: f64 = dist.iter().sum();
    if (sum - 1.0).abs() > DIST_TOL {
        return Err(format!("distribution sums to {sum}"));
    }
    Ok(())
}

/// Deterministic seeded randomness with independent named substreams.
///
/// The same seed and the same call sequence reproduce draws bit-exactly.
/// Substreams are derived from a stable hash of the name, so the
/// environment, each agent, and the shared output-policy stream never
/// interleave.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn from_seed(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// An independent substream of `seed` keyed by `name`.
    pub fn named(seed: u64, name: &str) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(fnv1a64(name.as_bytes()));
        Self { rng }
    }

    pub fn next_f64(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn uniform_below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// Draws an index from an (approximately normalized) probability vector
    /// by inverse CDF. Leftover mass from rounding falls on the last
    /// positive entry, so degenerate rows are exact.
    pub fn index_from_probs(&mut self, probs: &[f64]) -> usize {
        let u = self.next_f64();
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > 0.0 {
                last_positive = i;
                acc += p;
                if u < acc {
                    return i;
                }
            }
        }
        last_positive
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}
