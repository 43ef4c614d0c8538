//! Optimistic Nash Q-learning for two-player zero-sum games.
//!
//! A centralized learner keeps optimistic and pessimistic action-value
//! tables over `(h, s, a, b)`, refreshes the visited state's joint policy
//! through the CCE subroutine on the rescaled pair, and logs every visit
//! for the certified joint output policy. The exploration bonus enters the
//! optimistic table with a plus sign and the pessimistic one with a minus
//! sign, so the pessimistic table never overtakes the optimistic one.

use crate::bandit::WeightSchedule;
use crate::certified::{CertifiedPolicyLog, JointVisitLog, LogVariant, VisitLog, VisitRecord};
use crate::evalx::NashTables;
use crate::game::{GameError, MarkovGame, RngStream};
use crate::linprog::{solve_cce, LpError};
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NashQError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("optimistic Q-learning requires a two-player zero-sum game")]
    NotZeroSum,
    #[error("environment failure: {0}")]
    Game(#[from] GameError),
    #[error("equilibrium subroutine failed: {0}")]
    Lp(#[from] LpError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QTrainConfig {
    pub episodes: usize,
    pub seed: u64,
    pub bonus_c: f64,
    pub delta: f64,
    pub checkpoints: Vec<usize>,
}

impl QTrainConfig {
    pub fn new(episodes: usize, seed: u64, bonus_c: f64) -> Self {
        Self { episodes, seed, bonus_c, delta: 0.01, checkpoints: Vec::new() }
    }

    /// `iota = log(m H S A_max K / delta)`, as in the V-learning trainer.
    pub fn iota(&self, game: &MarkovGame) -> f64 {
        let numerator = game.num_players() as f64
            * game.horizon() as f64
            * game.num_states() as f64
            * game.max_actions() as f64
            * self.episodes as f64;
        (numerator / self.delta).ln()
    }
}

/// Bonus for the `t`-th visit of a `(h, s, a, b)` cell.
pub fn q_bonus(t: usize, horizon: usize, iota: f64, c: f64) -> f64 {
    assert!(t >= 1);
    c * ((horizon as f64).powi(3) * iota / t as f64).sqrt()
}

/// Centralized optimistic/pessimistic learner state.
pub struct QLearnerState {
    horizon: usize,
    rows: usize,
    cols: usize,
    bonus_c: f64,
    iota: f64,
    /// `[h][s][ab]`.
    q_up: Vec<Vec<Vec<f64>>>,
    q_low: Vec<Vec<Vec<f64>>>,
    /// `[h][s]`.
    v_up: Vec<Vec<f64>>,
    v_low: Vec<Vec<f64>>,
    /// Joint policy per `(h, s)`, row-major over `(a, b)`.
    policy: Vec<Vec<Vec<f64>>>,
    visits: Vec<Vec<Vec<usize>>>,
    /// Smallest `q_up - q_low` seen after any update.
    min_pair_separation: f64,
}

impl QLearnerState {
    pub fn new(game: &MarkovGame, bonus_c: f64, iota: f64) -> Self {
        let horizon = game.horizon();
        let states = game.num_states();
        let rows = game.actions(0);
        let cols = game.actions(1);
        let cells = rows * cols;
        let h_f = horizon as f64;
        Self {
            horizon,
            rows,
            cols,
            bonus_c,
            iota,
            q_up: vec![vec![vec![h_f; cells]; states]; horizon],
            q_low: vec![vec![vec![0.0; cells]; states]; horizon],
            v_up: vec![vec![h_f; states]; horizon],
            v_low: vec![vec![0.0; states]; horizon],
            policy: vec![vec![vec![1.0 / cells as f64; cells]; states]; horizon],
            visits: vec![vec![vec![0; cells]; states]; horizon],
            min_pair_separation: f64::INFINITY,
        }
    }

    pub fn policy(&self, h: usize, s: usize) -> &[f64] {
        &self.policy[h][s]
    }

    pub fn value_bounds(&self, h: usize, s: usize) -> (f64, f64) {
        (self.v_low[h][s], self.v_up[h][s])
    }

    pub fn q_bounds(&self, h: usize, s: usize, joint: usize) -> (f64, f64) {
        (self.q_low[h][s][joint], self.q_up[h][s][joint])
    }

    pub fn visits(&self, h: usize, s: usize, joint: usize) -> usize {
        self.visits[h][s][joint]
    }

    /// Non-negative iff `q_low <= q_up` held after every update so far.
    pub fn min_pair_separation(&self) -> f64 {
        if self.min_pair_separation.is_finite() {
            self.min_pair_separation
        } else {
            0.0
        }
    }

    /// One centralized update from the realized transition, followed by the
    /// CCE policy refresh of the visited state.
    pub fn step(
        &mut self,
        game: &MarkovGame,
        h: usize,
        s: usize,
        joint: usize,
        reward: f64,
        next_state: usize,
    ) -> Result<(), NashQError> {
        let t = self.visits[h][s][joint] + 1;
        self.visits[h][s][joint] = t;
        let alpha = WeightSchedule::new(self.horizon).alpha(t);
        let beta = q_bonus(t, self.horizon, self.iota, self.bonus_c);
        let (up_next, low_next) = if h + 1 < self.horizon {
            (self.v_up[h + 1][next_state], self.v_low[h + 1][next_state])
        } else {
            (0.0, 0.0)
        };
        self.q_up[h][s][joint] =
            (1.0 - alpha) * self.q_up[h][s][joint] + alpha * (reward + up_next + beta);
        self.q_low[h][s][joint] =
            (1.0 - alpha) * self.q_low[h][s][joint] + alpha * (reward + low_next - beta);
        self.min_pair_separation = self
            .min_pair_separation
            .min(self.q_up[h][s][joint] - self.q_low[h][s][joint]);

        let h_f = self.horizon as f64;
        let scale = 1.0 / h_f;
        let to_matrix = |q: &[f64]| -> Vec<Vec<f64>> {
            (0..self.rows)
                .map(|a| (0..self.cols).map(|b| q[a * self.cols + b] * scale).collect())
                .collect()
        };
        let up = to_matrix(&self.q_up[h][s]);
        let low = to_matrix(&self.q_low[h][s]);
        let cce = solve_cce(&up, &low)?;
        let mut v_up = 0.0;
        let mut v_low = 0.0;
        for joint in 0..self.rows * self.cols {
            v_up += cce.probs[joint] * self.q_up[h][s][joint];
            v_low += cce.probs[joint] * self.q_low[h][s][joint];
        }
        self.policy[h][s] = cce.probs;
        self.v_up[h][s] = v_up.clamp(0.0, h_f);
        self.v_low[h][s] = v_low.clamp(0.0, h_f);
        let _ = game;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QCheckpointStats {
    pub episode: usize,
    pub wallclock_ms: u128,
    /// Mean over completed episodes of `v_up - v_low` at the initial state,
    /// measured at each episode's start.
    pub mean_initial_width: f64,
    /// `(v_up below reference, v_low above reference)` entry counts.
    pub sandwich_violations: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QTrainDiagnostics {
    pub iota: f64,
    pub checkpoints: Vec<QCheckpointStats>,
    pub entries: usize,
    pub min_pair_separation: f64,
    pub wallclock_ms: u128,
}

pub struct QTrainOutput {
    pub log: CertifiedPolicyLog,
    pub diagnostics: QTrainDiagnostics,
    pub final_upper: Vec<Vec<f64>>,
    pub final_lower: Vec<Vec<f64>>,
}

/// Runs optimistic Nash Q-learning; both players' actions are drawn jointly
/// from the maintained CCE policy.
pub fn train_nashq(game: &MarkovGame, config: &QTrainConfig) -> Result<QTrainOutput, NashQError> {
    train_nashq_with_reference(game, config, None)
}

/// As [`train_nashq`], counting sandwich violations against the supplied
/// minimax tables at each checkpoint.
pub fn train_nashq_with_reference(
    game: &MarkovGame,
    config: &QTrainConfig,
    reference: Option<&NashTables>,
) -> Result<QTrainOutput, NashQError> {
    if !game.is_zero_sum() || game.num_players() != 2 {
        return Err(NashQError::NotZeroSum);
    }
    if config.episodes == 0 {
        return Err(NashQError::BadConfig("need at least one episode".into()));
    }
    if !(config.delta > 0.0 && config.delta < 1.0) {
        return Err(NashQError::BadConfig(format!("delta {} outside (0,1)", config.delta)));
    }
    if config.checkpoints.iter().any(|&k| k == 0 || k > config.episodes) {
        return Err(NashQError::BadConfig("checkpoint outside 1..=episodes".into()));
    }
    let horizon = game.horizon();
    let states = game.num_states();
    let rows = game.actions(0);
    let cols = game.actions(1);
    let iota = config.iota(game);
    let start = Instant::now();

    let mut learner = QLearnerState::new(game, config.bonus_c, iota);
    let mut state_visits: Vec<Vec<Vec<VisitRecord>>> =
        vec![vec![Vec::new(); states]; horizon];
    let mut cell_visits: Vec<Vec<Vec<Vec<usize>>>> =
        vec![vec![vec![Vec::new(); rows * cols]; states]; horizon];

    let mut env_rng = RngStream::named(config.seed, "env");
    let mut joint_rng = RngStream::named(config.seed, "joint-policy");

    let mut checkpoints: Vec<usize> =
        if config.checkpoints.is_empty() { vec![config.episodes] } else { config.checkpoints.clone() };
    checkpoints.sort_unstable();
    checkpoints.dedup();
    let mut next_checkpoint = 0usize;
    let mut stats = Vec::with_capacity(checkpoints.len());
    let mut width_sum = 0.0f64;

    for k in 1..=config.episodes {
        let s1 = game.initial_state();
        width_sum += learner.v_up[0][s1] - learner.v_low[0][s1];
        let mut s = s1;
        for h in 0..horizon {
            let policy = learner.policy(h, s).to_vec();
            let joint = joint_rng.index_from_probs(&policy);
            state_visits[h][s].push(VisitRecord { episode: k, policy });
            cell_visits[h][s][joint].push(k);
            let actions = game.split_joint(joint);
            let (rewards, next) = game.step(h, s, &actions, &mut env_rng)?;
            learner.step(game, h, s, joint, rewards[0], next)?;
            s = next;
        }
        if next_checkpoint < checkpoints.len() && checkpoints[next_checkpoint] == k {
            next_checkpoint += 1;
            let sandwich_violations = reference.map(|tables| {
                let mut up_bad = 0usize;
                let mut low_bad = 0usize;
                for h in 0..horizon {
                    for s in 0..states {
                        let v_star = tables.v_star[h][s];
                        if learner.v_up[h][s] < v_star - 1e-9 {
                            up_bad += 1;
                        }
                        if learner.v_low[h][s] > v_star + 1e-9 {
                            low_bad += 1;
                        }
                    }
                }
                (up_bad, low_bad)
            });
            stats.push(QCheckpointStats {
                episode: k,
                wallclock_ms: start.elapsed().as_millis(),
                mean_initial_width: width_sum / k as f64,
                sandwich_violations,
            });
        }
    }

    // Final-policy sentinels make "policy at the beginning of episode k"
    // resolvable for every k <= K + 1.
    for h in 0..horizon {
        for s in 0..states {
            state_visits[h][s].push(VisitRecord {
                episode: config.episodes + 1,
                policy: learner.policy(h, s).to_vec(),
            });
        }
    }

    let log = CertifiedPolicyLog {
        variant: LogVariant::QStyle,
        num_episodes: config.episodes,
        shared_seed: config.seed,
        horizon,
        num_states: states,
        players: vec![
            VisitLog::empty(rows, horizon, states),
            VisitLog::empty(cols, horizon, states),
        ],
        joint: Some(JointVisitLog { row_actions: rows, col_actions: cols, state_visits, cell_visits }),
        monotone_cuts: None,
    };
    let diagnostics = QTrainDiagnostics {
        iota,
        checkpoints: stats,
        entries: horizon * states,
        min_pair_separation: learner.min_pair_separation(),
        wallclock_ms: start.elapsed().as_millis(),
    };
    Ok(QTrainOutput {
        log,
        diagnostics,
        final_upper: learner.v_up.clone(),
        final_lower: learner.v_low.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalx::nash_values_zero_sum;

    fn single_cell_game(horizon: usize, reward: f64) -> MarkovGame {
        MarkovGame::new(
            horizon,
            1,
            vec![1, 1],
            0,
            true,
            vec![1.0; horizon],
            {
                let mut r = vec![reward; horizon];
                r.extend(vec![1.0 - reward; horizon]);
                r
            },
        )
        .unwrap()
    }

    fn matching_pennies(horizon: usize) -> MarkovGame {
        let rewards0: Vec<f64> =
            (0..horizon).flat_map(|_| [1.0, 0.0, 0.0, 1.0]).collect();
        let mut rewards = rewards0.clone();
        rewards.extend(rewards0.iter().map(|r| 1.0 - r));
        MarkovGame::new(horizon, 1, vec![2, 2], 0, true, vec![1.0; horizon * 4], rewards).unwrap()
    }

    #[test]
    fn first_visit_sets_exact_value() {
        let game = matching_pennies(2);
        let mut learner = QLearnerState::new(&game, 1.0, 2.0);
        learner.step(&game, 1, 0, 3, 1.0, 0).unwrap();
        // Terminal step: no next value; alpha_1 = 1.
        let beta = q_bonus(1, 2, 2.0, 1.0);
        let (low, up) = learner.q_bounds(1, 0, 3);
        assert!((up - (1.0 + beta)).abs() < 1e-12);
        assert!((low - (1.0 - beta)).abs() < 1e-12);
    }

    #[test]
    fn width_matches_weighted_bonus_sum_h1() {
        // One state, one joint action, H=1: after t visits the pair spread
        // is exactly twice the weighted bonus sum.
        let game = single_cell_game(1, 0.5);
        let config = QTrainConfig::new(64, 5, 1.3);
        let iota = config.iota(&game);
        let mut learner = QLearnerState::new(&game, 1.3, iota);
        let weights = WeightSchedule::new(1);
        for t in 1..=64usize {
            learner.step(&game, 0, 0, 0, 0.5, 0).unwrap();
            let (low, up) = learner.q_bounds(0, 0, 0);
            let w = weights.weights(t);
            let direct: f64 =
                (1..=t).map(|i| w[i - 1] * 2.0 * q_bonus(i, 1, iota, 1.3)).sum();
            assert!(
                (up - low - direct).abs() < 1e-9,
                "t={t}: width {} vs {direct}",
                up - low
            );
        }
    }

    #[test]
    fn transcript_replay_matches_decomposition() {
        let game = matching_pennies(3);
        let iota = 4.0;
        let mut learner = QLearnerState::new(&game, 0.9, iota);
        // Replay a fixed transcript on (h=0, s=0, joint=2), recording the
        // next-step upper values as seen at update time.
        let transcript = [(1.0, 0usize), (0.0, 0), (1.0, 0), (1.0, 0), (0.0, 0)];
        let mut seen_up = Vec::new();
        let mut seen_low = Vec::new();
        for (i, &(r, next)) in transcript.iter().enumerate() {
            seen_up.push(learner.v_up[1][next]);
            seen_low.push(learner.v_low[1][next]);
            learner.step(&game, 0, 0, 2, r, next).unwrap();
            // Interleave updates at other cells to move the policy around.
            learner.step(&game, 1, 0, i % 4, 0.5, 0).unwrap();
        }
        let t = transcript.len();
        let w = WeightSchedule::new(3).weights(t);
        let up_direct: f64 = (0..t)
            .map(|i| w[i] * (transcript[i].0 + seen_up[i] + q_bonus(i + 1, 3, iota, 0.9)))
            .sum();
        let low_direct: f64 = (0..t)
            .map(|i| w[i] * (transcript[i].0 + seen_low[i] - q_bonus(i + 1, 3, iota, 0.9)))
            .sum();
        let (low, up) = learner.q_bounds(0, 0, 2);
        assert!((up - up_direct).abs() < 1e-9);
        assert!((low - low_direct).abs() < 1e-9);
    }

    #[test]
    fn rejects_general_sum_games() {
        let game = MarkovGame::new(1, 1, vec![1, 1], 0, false, vec![1.0], vec![0.5, 0.9]).unwrap();
        let config = QTrainConfig::new(10, 0, 1.0);
        assert!(matches!(train_nashq(&game, &config), Err(NashQError::NotZeroSum)));
    }

    #[test]
    fn pair_order_always_holds() {
        let game = matching_pennies(3);
        let config = QTrainConfig::new(300, 9, 1.0);
        let out = train_nashq(&game, &config).unwrap();
        assert!(out.diagnostics.min_pair_separation >= 0.0);
    }

    #[test]
    fn values_bracket_matching_pennies() {
        let game = matching_pennies(3);
        let mut config = QTrainConfig::new(2000, 1, 1.0);
        config.checkpoints = vec![500, 2000];
        let tables = nash_values_zero_sum(&game).unwrap();
        let out = train_nashq_with_reference(&game, &config, Some(&tables)).unwrap();
        // V* = 0.5 per remaining step by symmetry.
        assert!((tables.v_star[0][0] - 1.5).abs() < 1e-8);
        assert!(out.final_upper[0][0] >= 1.5 - 1e-6);
        assert!(out.final_lower[0][0] <= 1.5 + 1e-6);
        for stat in &out.diagnostics.checkpoints {
            let (up_bad, low_bad) = stat.sandwich_violations.unwrap();
            assert_eq!(up_bad + low_bad, 0, "sandwich violated at {}", stat.episode);
        }
        // The width at the initial state shrinks.
        let first = &out.diagnostics.checkpoints[0];
        let last = &out.diagnostics.checkpoints[1];
        assert!(last.mean_initial_width < first.mean_initial_width);
    }

    #[test]
    fn reruns_are_identical() {
        let game = matching_pennies(2);
        let config = QTrainConfig::new(150, 77, 1.0);
        let a = train_nashq(&game, &config).unwrap();
        let b = train_nashq(&game, &config).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.to_binary(), b.log.to_binary());
    }

    #[test]
    fn log_validates_and_round_trips() {
        let game = matching_pennies(2);
        let config = QTrainConfig::new(40, 3, 1.0);
        let out = train_nashq(&game, &config).unwrap();
        out.log.validate(&game).unwrap();
        let back = CertifiedPolicyLog::from_binary(&out.log.to_binary()).unwrap();
        assert_eq!(out.log, back);
        let back = CertifiedPolicyLog::from_json(&out.log.to_json()).unwrap();
        assert_eq!(out.log, back);
    }
}
