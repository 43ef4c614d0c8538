//! Exact evaluation oracles.
//!
//! - Backward-induction minimax values for two-player zero-sum games.
//! - Exact best responses to product Markov policies.
//! - Certified deviation upper bounds for the chain-executed output
//!   policies, in best-response and strategy-modification flavors.
//! - Exact on-policy values and state-visitation marginals of those
//!   policies, plus seeded Monte-Carlo estimators for cross-checks.
//!
//! The deviation bounds evaluate the recursion in which the deviating
//! player observes the realized chain index from the next step onward and
//! unvisited chain states are valued at the maximum remaining return. Both
//! choices make the reported number a certified upper bound on the true
//! deviation value, so a small reported gap certifies an approximate
//! equilibrium; the true hidden-index best response is a POMDP and is not
//! attempted.
//!
//! The augmented-state dynamic programs are memoized per visit-count class:
//! the value at `(h, chain k, s)` depends on `k` only through the number of
//! logged visits of `(h, s)` up to `k`, except for exact chain-carry paths
//! through unvisited states, which the on-policy pass tracks with raw
//! episode keys.

use crate::certified::{CertifiedError, CertifiedPolicyLog, LogVariant, VisitRecord};
use crate::game::{GameError, MarkovGame, MarkovPolicy, RngStream, Trajectory};
use crate::bandit::WeightSchedule;
use crate::linprog::{solve_matrix_game, LpError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("game error: {0}")]
    Game(#[from] GameError),
    #[error("log error: {0}")]
    Certified(#[from] CertifiedError),
    #[error("solver error: {0}")]
    Lp(#[from] LpError),
    #[error("operation requires a two-player zero-sum game")]
    NotZeroSum,
    #[error("augmented-state budget exceeded ({entries} > {cap})")]
    MemoOverflow { entries: usize, cap: usize },
    #[error("{0}")]
    BadInput(String),
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    /// Cap on distinct augmented `(h, chain, s)` entries across the DP
    /// tables and the forward mass maps.
    pub max_entries: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { max_entries: 20_000_000 }
    }
}

/// Minimax value tables of a zero-sum game, player-0 perspective.
#[derive(Debug, Clone)]
pub struct NashTables {
    /// `[h][s]`.
    pub v_star: Vec<Vec<f64>>,
    /// `[h][s][joint]`.
    pub q_star: Vec<Vec<Vec<f64>>>,
    /// Equilibrium strategies per `(h, s)`.
    pub row_strategies: Vec<Vec<Vec<f64>>>,
    pub col_strategies: Vec<Vec<Vec<f64>>>,
    /// Largest per-state matrix-game duality gap encountered.
    pub max_duality_gap: f64,
}

impl NashTables {
    /// Minimax value for either player; player 1 sees the complement of the
    /// remaining per-step reward budget.
    pub fn value_for(&self, player: usize, h: usize, s: usize) -> f64 {
        let horizon = self.v_star.len();
        if player == 0 {
            self.v_star[h][s]
        } else {
            (horizon - h) as f64 - self.v_star[h][s]
        }
    }

    /// Largest Bellman residual of the stored tables against the game.
    pub fn bellman_residual(&self, game: &MarkovGame) -> f64 {
        let horizon = game.horizon();
        let mut worst = 0.0f64;
        for h in 0..horizon {
            for s in 0..game.num_states() {
                for joint in 0..game.num_joint_actions() {
                    let mut future = 0.0;
                    if h + 1 < horizon {
                        for (sp, p) in game.transition_row(h, s, joint).iter().enumerate() {
                            future += p * self.v_star[h + 1][sp];
                        }
                    }
                    let q = game.reward(0, h, s, joint) + future;
                    worst = worst.max((q - self.q_star[h][s][joint]).abs());
                }
            }
        }
        worst
    }
}

/// Backward induction with a matrix-game solve per `(h, s)`.
pub fn nash_values_zero_sum(game: &MarkovGame) -> Result<NashTables, EvalError> {
    if !game.is_zero_sum() || game.num_players() != 2 {
        return Err(EvalError::NotZeroSum);
    }
    let horizon = game.horizon();
    let states = game.num_states();
    let (rows, cols) = (game.actions(0), game.actions(1));
    let mut v_star = vec![vec![0.0; states]; horizon];
    let mut q_star = vec![vec![Vec::new(); states]; horizon];
    let mut row_strategies = vec![vec![Vec::new(); states]; horizon];
    let mut col_strategies = vec![vec![Vec::new(); states]; horizon];
    let mut max_gap = 0.0f64;
    for h in (0..horizon).rev() {
        let scale = (horizon - h) as f64;
        for s in 0..states {
            let mut q = vec![0.0; rows * cols];
            let mut matrix = vec![vec![0.0; cols]; rows];
            for joint in 0..rows * cols {
                let mut value = game.reward(0, h, s, joint);
                if h + 1 < horizon {
                    for (sp, p) in game.transition_row(h, s, joint).iter().enumerate() {
                        value += p * v_star[h + 1][sp];
                    }
                }
                q[joint] = value;
                matrix[joint / cols][joint % cols] = value / scale;
            }
            let solution = solve_matrix_game(&matrix)?;
            v_star[h][s] = solution.value * scale;
            max_gap = max_gap.max(solution.duality_gap * scale);
            q_star[h][s] = q;
            row_strategies[h][s] = solution.row_strategy;
            col_strategies[h][s] = solution.col_strategy;
        }
    }
    Ok(NashTables { v_star, q_star, row_strategies, col_strategies, max_duality_gap: max_gap })
}

/// Exact best response of `player` against the other players' Markov
/// policies: value tables plus the deterministic argmax policy
/// (lowest-index tie-break).
pub fn best_response_markov(
    game: &MarkovGame,
    policy: &MarkovPolicy,
    player: usize,
) -> Result<(Vec<Vec<f64>>, MarkovPolicy), EvalError> {
    if policy.num_players() != game.num_players() {
        return Err(EvalError::BadInput("policy player count mismatch".into()));
    }
    let horizon = game.horizon();
    let states = game.num_states();
    let own = game.actions(player);
    let mut values = vec![vec![0.0; states]; horizon];
    let mut br = MarkovPolicy::uniform(game);
    for h in (0..horizon).rev() {
        for s in 0..states {
            let mut per_action = vec![0.0f64; own];
            for joint in 0..game.num_joint_actions() {
                let actions = game.split_joint(joint);
                let mut weight = 1.0;
                for (l, &a) in actions.iter().enumerate() {
                    if l != player {
                        weight *= policy.action_probs(l, h, s)[a];
                    }
                }
                if weight == 0.0 {
                    continue;
                }
                let mut value = game.reward(player, h, s, joint);
                if h + 1 < horizon {
                    for (sp, p) in game.transition_row(h, s, joint).iter().enumerate() {
                        value += p * values[h + 1][sp];
                    }
                }
                per_action[actions[player]] += weight * value;
            }
            let mut best = 0usize;
            for a in 1..own {
                if per_action[a] > per_action[best] + 1e-15 {
                    best = a;
                }
            }
            values[h][s] = per_action[best];
            let mut dist = vec![0.0; own];
            dist[best] = 1.0;
            br.set_action_probs(player, h, s, dist);
        }
    }
    Ok((values, br))
}

/// Exact per-player values of a product Markov policy.
pub fn on_policy_markov(game: &MarkovGame, policy: &MarkovPolicy) -> Result<Vec<f64>, EvalError> {
    if policy.num_players() != game.num_players() {
        return Err(EvalError::BadInput("policy player count mismatch".into()));
    }
    let horizon = game.horizon();
    let states = game.num_states();
    let m = game.num_players();
    let mut values = vec![vec![vec![0.0; states]; horizon]; m];
    for h in (0..horizon).rev() {
        for s in 0..states {
            for joint in 0..game.num_joint_actions() {
                let actions = game.split_joint(joint);
                let mut weight = 1.0;
                for (l, &a) in actions.iter().enumerate() {
                    weight *= policy.action_probs(l, h, s)[a];
                }
                if weight == 0.0 {
                    continue;
                }
                for i in 0..m {
                    let mut value = game.reward(i, h, s, joint);
                    if h + 1 < horizon {
                        for (sp, p) in game.transition_row(h, s, joint).iter().enumerate() {
                            value += p * values[i][h + 1][sp];
                        }
                    }
                    values[i][h][s] += weight * value;
                }
            }
        }
    }
    Ok(values.iter().map(|v| v[0][game.initial_state()]).collect())
}

/// Per-player equilibrium gaps of a product Markov policy: best-response
/// value minus on-policy value at the initial state.
pub fn nash_gap_markov(game: &MarkovGame, policy: &MarkovPolicy) -> Result<Vec<f64>, EvalError> {
    let on_policy = on_policy_markov(game, policy)?;
    let mut gaps = Vec::with_capacity(game.num_players());
    for player in 0..game.num_players() {
        let (values, _) = best_response_markov(game, policy, player)?;
        gaps.push(values[0][game.initial_state()] - on_policy[player]);
    }
    Ok(gaps)
}

/// Deviation benchmark of a certified gap report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapMode {
    /// Deviator commits to an independent policy.
    BestResponse,
    /// Deviator remaps her recommended action.
    StrategyMod,
}

impl std::fmt::Display for GapMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GapMode::BestResponse => write!(f, "best_response"),
            GapMode::StrategyMod => write!(f, "strategy_mod"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateKind {
    Exact,
    MonteCarlo { stderr: f64 },
}

/// One player's certified evaluation: exact on-policy value, a certified
/// upper bound on the deviation value, and their difference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapReport {
    pub player: usize,
    pub mode: GapMode,
    pub episodes: usize,
    pub on_policy: f64,
    pub upper_bound: f64,
    pub gap: f64,
    pub estimate: EstimateKind,
}

impl GapReport {
    /// CSV row `player,mode,K,on_policy,upper_bound,gap,exact_or_mc,stderr`.
    pub fn csv_row(&self) -> String {
        let (kind, stderr) = match self.estimate {
            EstimateKind::Exact => ("exact", 0.0),
            EstimateKind::MonteCarlo { stderr } => ("mc", stderr),
        };
        format!(
            "{},{},{},{},{},{},{},{}",
            self.player, self.mode, self.episodes, self.on_policy, self.upper_bound, self.gap, kind, stderr
        )
    }
}

/// Anything that can play seeded episodes of a game.
pub trait EpisodeSampler {
    fn sample_episode(
        &self,
        game: &MarkovGame,
        episode: usize,
        rng: &mut RngStream,
    ) -> Result<Trajectory, GameError>;
}

impl EpisodeSampler for MarkovPolicy {
    fn sample_episode(
        &self,
        game: &MarkovGame,
        _episode: usize,
        rng: &mut RngStream,
    ) -> Result<Trajectory, GameError> {
        let mut state = game.initial_state();
        let mut steps = Vec::with_capacity(game.horizon());
        for h in 0..game.horizon() {
            let actions: Vec<usize> = (0..game.num_players())
                .map(|l| rng.index_from_probs(self.action_probs(l, h, state)))
                .collect();
            let (rewards, next) = game.step(h, state, &actions, rng)?;
            steps.push(crate::game::TrajectoryStep { state, actions, rewards });
            state = next;
        }
        Ok(Trajectory { episode: 0, steps })
    }
}

impl EpisodeSampler for CertifiedPolicyLog {
    fn sample_episode(
        &self,
        game: &MarkovGame,
        _episode: usize,
        rng: &mut RngStream,
    ) -> Result<Trajectory, GameError> {
        crate::certified::execute_certified(self, game, rng)
            .map_err(|e| GameError::Invalid(e.to_string()))
    }
}

/// Monte-Carlo estimate of per-player returns: `(means, standard errors)`.
pub fn mc_value(
    game: &MarkovGame,
    sampler: &impl EpisodeSampler,
    episodes: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>), EvalError> {
    if episodes == 0 {
        return Err(EvalError::BadInput("need at least one episode".into()));
    }
    let m = game.num_players();
    let mut rng = RngStream::named(seed, "mc");
    let mut sums = vec![0.0f64; m];
    let mut sq_sums = vec![0.0f64; m];
    for episode in 0..episodes {
        let trajectory = sampler.sample_episode(game, episode, &mut rng)?;
        for i in 0..m {
            let ret = trajectory.total_reward(i);
            sums[i] += ret;
            sq_sums[i] += ret * ret;
        }
    }
    let n = episodes as f64;
    let means: Vec<f64> = sums.iter().map(|s| s / n).collect();
    let stderrs: Vec<f64> = (0..m)
        .map(|i| {
            if episodes < 2 {
                return 0.0;
            }
            let var = (sq_sums[i] - n * means[i] * means[i]).max(0.0) / (n - 1.0);
            (var / n).sqrt()
        })
        .collect();
    Ok((means, stderrs))
}

/// Number of logged visits with episode `<= k`.
fn visits_through(records: &[VisitRecord], k: usize) -> usize {
    records.partition_point(|r| r.episode <= k)
}

/// Resampling masses: given incoming mass per visit-count class
/// (`in_class[t]`, `t = 1..=T`), returns `out[j-1] = sum_{t >= j}
/// in_class[t] * alpha_t^j` for `j = 1..=T` via the backward tail
/// recursion, in linear time.
fn resample_masses(in_class: &[f64], schedule: &WeightSchedule) -> Vec<f64> {
    let t_max = in_class.len().saturating_sub(1);
    if t_max == 0 {
        return Vec::new();
    }
    let mut tail = vec![0.0f64; t_max + 2];
    for t in (1..=t_max).rev() {
        tail[t] = in_class[t] + (1.0 - schedule.alpha(t + 1)) * tail[t + 1];
    }
    (1..=t_max).map(|j| schedule.alpha(j) * tail[j]).collect()
}

/// Certified deviation upper-bound tables for a state-chain log:
/// `tables[h][s][t]` is the bound at visit-count class `t`.
fn upper_tables_v(
    game: &MarkovGame,
    log: &CertifiedPolicyLog,
    player: usize,
    mode: GapMode,
    options: &EvalOptions,
) -> Result<Vec<Vec<Vec<f64>>>, EvalError> {
    let horizon = game.horizon();
    let states = game.num_states();
    let m = game.num_players();
    let own = game.actions(player);
    let schedule = WeightSchedule::new(horizon);
    let joint_actions: Vec<Vec<usize>> =
        (0..game.num_joint_actions()).map(|j| game.split_joint(j)).collect();
    let mut tables: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); states]; horizon];
    let mut entries = 0usize;
    for h in (0..horizon).rev() {
        for s in 0..states {
            let visit_count = log.players[0].visits(h, s).len();
            entries += visit_count + 1;
            if entries > options.max_entries {
                return Err(EvalError::MemoOverflow { entries, cap: options.max_entries });
            }
            let mut tab = Vec::with_capacity(visit_count + 1);
            tab.push((horizon - h) as f64);
            let mut running = vec![0.0f64; own];
            let mut running_mod = 0.0f64;
            for j in 1..=visit_count {
                let episode = log.players[0].visits(h, s)[j - 1].episode;
                // Continuation bound per successor under the chain moved to
                // this visit's episode.
                let cont: Vec<f64> = if h + 1 < horizon {
                    (0..states)
                        .map(|sp| {
                            let t_next =
                                visits_through(log.players[0].visits(h + 1, sp), episode);
                            tables[h + 1][sp][t_next]
                        })
                        .collect()
                } else {
                    Vec::new()
                };
                let mut per_action = vec![0.0f64; own];
                for (joint, actions) in joint_actions.iter().enumerate() {
                    let mut weight = 1.0;
                    for l in 0..m {
                        if l != player {
                            weight *= log.players[l].visits(h, s)[j - 1].policy[actions[l]];
                        }
                    }
                    if weight == 0.0 {
                        continue;
                    }
                    let mut value = game.reward(player, h, s, joint);
                    if h + 1 < horizon {
                        for (sp, p) in game.transition_row(h, s, joint).iter().enumerate() {
                            value += p * cont[sp];
                        }
                    }
                    per_action[actions[player]] += weight * value;
                }
                let alpha = schedule.alpha(j);
                match mode {
                    GapMode::BestResponse => {
                        for a in 0..own {
                            running[a] = (1.0 - alpha) * running[a] + alpha * per_action[a];
                        }
                        tab.push(running.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
                    }
                    GapMode::StrategyMod => {
                        let best = per_action.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        running_mod = (1.0 - alpha) * running_mod + alpha * best;
                        tab.push(running_mod);
                    }
                }
            }
            tables[h][s] = tab;
        }
    }
    Ok(tables)
}

/// Certified deviation upper-bound tables for a joint-chain log.
fn upper_tables_q(
    game: &MarkovGame,
    log: &CertifiedPolicyLog,
    player: usize,
    mode: GapMode,
    options: &EvalOptions,
) -> Result<Vec<Vec<Vec<f64>>>, EvalError> {
    let joint = log.joint.as_ref().ok_or(CertifiedError::WrongVariant(log.variant))?;
    let horizon = game.horizon();
    let states = game.num_states();
    let rows = joint.row_actions;
    let cols = joint.col_actions;
    let schedule = WeightSchedule::new(horizon);
    let mut tables: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); states]; horizon];
    let mut entries = 0usize;
    for h in (0..horizon).rev() {
        let unvisited_cont = (horizon - h - 1) as f64;
        for s in 0..states {
            let records = &joint.state_visits[h][s];
            let real = records.len() - 1; // final sentinel excluded
            entries += real + 1;
            if entries > options.max_entries {
                return Err(EvalError::MemoOverflow { entries, cap: options.max_entries });
            }
            let cells = &joint.cell_visits[h][s];
            // Episode -> cell map for the sweep.
            let mut cell_of: BTreeMap<usize, usize> = BTreeMap::new();
            for (ab, eps) in cells.iter().enumerate() {
                for &k in eps {
                    cell_of.insert(k, ab);
                }
            }
            let mut cell_count = vec![0usize; rows * cols];
            let mut cell_cont = vec![0.0f64; rows * cols];
            let value_at = |policy: &[f64], cell_count: &[usize], cell_cont: &[f64]| -> f64 {
                let cont = |ab: usize| {
                    if cell_count[ab] == 0 {
                        unvisited_cont
                    } else {
                        cell_cont[ab]
                    }
                };
                match (player, mode) {
                    (0, GapMode::BestResponse) => {
                        let mut best = f64::NEG_INFINITY;
                        for a in 0..rows {
                            let mut total = 0.0;
                            for b in 0..cols {
                                let marginal: f64 =
                                    (0..rows).map(|aa| policy[aa * cols + b]).sum();
                                total += marginal
                                    * (game.reward(0, h, s, a * cols + b) + cont(a * cols + b));
                            }
                            best = best.max(total);
                        }
                        best
                    }
                    (1, GapMode::BestResponse) => {
                        let mut best = f64::NEG_INFINITY;
                        for b in 0..cols {
                            let mut total = 0.0;
                            for a in 0..rows {
                                let marginal: f64 =
                                    (0..cols).map(|bb| policy[a * cols + bb]).sum();
                                total += marginal
                                    * (game.reward(1, h, s, a * cols + b) + cont(a * cols + b));
                            }
                            best = best.max(total);
                        }
                        best
                    }
                    (0, GapMode::StrategyMod) => {
                        let mut total = 0.0;
                        for rec in 0..rows {
                            let mass: f64 = (0..cols).map(|b| policy[rec * cols + b]).sum();
                            if mass == 0.0 {
                                continue;
                            }
                            let mut best = f64::NEG_INFINITY;
                            for a in 0..rows {
                                let mut dev = 0.0;
                                for b in 0..cols {
                                    let cond = policy[rec * cols + b] / mass;
                                    dev += cond
                                        * (game.reward(0, h, s, a * cols + b)
                                            + cont(a * cols + b));
                                }
                                best = best.max(dev);
                            }
                            total += mass * best;
                        }
                        total
                    }
                    (1, GapMode::StrategyMod) => {
                        let mut total = 0.0;
                        for rec in 0..cols {
                            let mass: f64 = (0..rows).map(|a| policy[a * cols + rec]).sum();
                            if mass == 0.0 {
                                continue;
                            }
                            let mut best = f64::NEG_INFINITY;
                            for b in 0..cols {
                                let mut dev = 0.0;
                                for a in 0..rows {
                                    let cond = policy[a * cols + rec] / mass;
                                    dev += cond
                                        * (game.reward(1, h, s, a * cols + b)
                                            + cont(a * cols + b));
                                }
                                best = best.max(dev);
                            }
                            total += mass * best;
                        }
                        total
                    }
                    _ => f64::NAN,
                }
            };
            let mut tab = Vec::with_capacity(real + 1);
            tab.push(value_at(&records[0].policy, &cell_count, &cell_cont));
            for t in 1..=real {
                let episode = records[t - 1].episode;
                let ab = *cell_of.get(&episode).ok_or_else(|| {
                    CertifiedError::Malformed(format!(
                        "state visit at episode {episode} has no cell entry"
                    ))
                })?;
                let mut cont_value = 0.0;
                if h + 1 < horizon {
                    for (sp, p) in game.transition_row(h, s, ab).iter().enumerate() {
                        if *p > 0.0 {
                            let t_next = visits_through_q(joint, h + 1, sp, episode);
                            cont_value += p * tables[h + 1][sp][t_next];
                        }
                    }
                }
                let c = cell_count[ab] + 1;
                cell_count[ab] = c;
                let alpha = schedule.alpha(c);
                cell_cont[ab] = (1.0 - alpha) * cell_cont[ab] + alpha * cont_value;
                tab.push(value_at(&records[t].policy, &cell_count, &cell_cont));
            }
            tables[h][s] = tab;
        }
    }
    Ok(tables)
}

/// State-level visit count of a joint log through episode `k` (sentinel
/// excluded).
fn visits_through_q(joint: &crate::certified::JointVisitLog, h: usize, s: usize, k: usize) -> usize {
    let records = &joint.state_visits[h][s];
    let real = records.len() - 1;
    records[..real].partition_point(|r| r.episode <= k)
}

/// Exact on-policy report: per-player values and visitation marginals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OnPolicyReport {
    pub values: Vec<f64>,
    /// `[h][s]` probability the executed policy is at `s` at step `h`.
    pub visitation: Vec<Vec<f64>>,
}

/// Exact forward pass over the chain-executed output policy.
///
/// Mass is keyed by `(state, exact chain episode)` and collapsed into
/// visit-count classes for the resampling step, which keeps the pass linear
/// in the log size while staying exact on chain-carry paths.
pub fn on_policy_value(
    game: &MarkovGame,
    log: &CertifiedPolicyLog,
    options: &EvalOptions,
) -> Result<OnPolicyReport, EvalError> {
    log.validate(game)?;
    if log.num_episodes == 0 {
        return Err(EvalError::BadInput("empty log".into()));
    }
    let horizon = game.horizon();
    let states = game.num_states();
    let m = game.num_players();
    let schedule = WeightSchedule::new(horizon);
    let joint_actions: Vec<Vec<usize>> =
        (0..game.num_joint_actions()).map(|j| game.split_joint(j)).collect();

    let mut values = vec![0.0f64; m];
    let mut visitation = vec![vec![0.0f64; states]; horizon];
    // Mass per (state, chain episode).
    let mut level: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let share = 1.0 / log.num_episodes as f64;
    for k in 1..=log.num_episodes {
        *level.entry((game.initial_state(), k)).or_insert(0.0) += share;
    }
    let mut total_entries = 0usize;

    for h in 0..horizon {
        let mut next: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        total_entries += level.len();
        if total_entries > options.max_entries {
            return Err(EvalError::MemoOverflow { entries: total_entries, cap: options.max_entries });
        }
        // Group the ordered map by state.
        let mut per_state: Vec<Vec<(usize, f64)>> = vec![Vec::new(); states];
        for (&(s, k), &mass) in &level {
            per_state[s].push((k, mass));
            visitation[h][s] += mass;
        }
        for s in 0..states {
            if per_state[s].is_empty() {
                continue;
            }
            match log.variant {
                LogVariant::VStyle => {
                    let records = log.players[0].visits(h, s);
                    let visit_count = records.len();
                    let mut in_class = vec![0.0f64; visit_count + 1];
                    for &(k, mass) in &per_state[s] {
                        let t = visits_through(records, k);
                        if t == 0 {
                            // Unvisited: uniform play, chain carried.
                            spread_uniform(
                                game, h, s, k, mass, &joint_actions, &mut values, &mut next,
                            );
                        } else {
                            in_class[t] += mass;
                        }
                    }
                    let out = resample_masses(&in_class, &schedule);
                    for (j0, &mass) in out.iter().enumerate() {
                        if mass == 0.0 {
                            continue;
                        }
                        let episode = records[j0].episode;
                        for (joint, actions) in joint_actions.iter().enumerate() {
                            let mut prob = 1.0;
                            for l in 0..m {
                                prob *= log.players[l].visits(h, s)[j0].policy[actions[l]];
                            }
                            if prob == 0.0 {
                                continue;
                            }
                            let flow = mass * prob;
                            for i in 0..m {
                                values[i] += flow * game.reward(i, h, s, joint);
                            }
                            if h + 1 < horizon {
                                for (sp, p) in game.transition_row(h, s, joint).iter().enumerate()
                                {
                                    if *p > 0.0 {
                                        *next.entry((sp, episode)).or_insert(0.0) += flow * p;
                                    }
                                }
                            }
                        }
                    }
                }
                LogVariant::QStyle => {
                    let joint = log.joint.as_ref().ok_or(CertifiedError::WrongVariant(log.variant))?;
                    let records = &joint.state_visits[h][s];
                    let real = records.len() - 1;
                    let cells = &joint.cell_visits[h][s];
                    // Per-cell incoming mass grouped by that cell's count.
                    let mut rho: Vec<Vec<f64>> =
                        cells.iter().map(|eps| vec![0.0; eps.len() + 1]).collect();
                    for &(k, mass) in &per_state[s] {
                        let t = records[..real].partition_point(|r| r.episode <= k);
                        let policy = &records[t].policy;
                        for (ab, eps) in cells.iter().enumerate() {
                            let p = policy[ab];
                            if p == 0.0 {
                                continue;
                            }
                            let flow = mass * p;
                            for i in 0..m {
                                values[i] += flow * game.reward(i, h, s, ab);
                            }
                            let c = eps.partition_point(|&e| e <= k);
                            if c == 0 {
                                // Never-taken cell: chain carried.
                                if h + 1 < horizon {
                                    for (sp, pr) in
                                        game.transition_row(h, s, ab).iter().enumerate()
                                    {
                                        if pr > &0.0 {
                                            *next.entry((sp, k)).or_insert(0.0) += flow * pr;
                                        }
                                    }
                                }
                            } else {
                                rho[ab][c] += flow;
                            }
                        }
                    }
                    if h + 1 < horizon {
                        for (ab, eps) in cells.iter().enumerate() {
                            let out = resample_masses(&rho[ab], &schedule);
                            for (i0, &mass) in out.iter().enumerate() {
                                if mass == 0.0 {
                                    continue;
                                }
                                let episode = eps[i0];
                                for (sp, pr) in game.transition_row(h, s, ab).iter().enumerate() {
                                    if pr > &0.0 {
                                        *next.entry((sp, episode)).or_insert(0.0) += mass * pr;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        level = next;
    }
    Ok(OnPolicyReport { values, visitation })
}

fn spread_uniform(
    game: &MarkovGame,
    h: usize,
    s: usize,
    k: usize,
    mass: f64,
    joint_actions: &[Vec<usize>],
    values: &mut [f64],
    next: &mut BTreeMap<(usize, usize), f64>,
) {
    let m = game.num_players();
    for (joint, actions) in joint_actions.iter().enumerate() {
        let mut prob = 1.0;
        for (l, _) in actions.iter().enumerate() {
            prob *= 1.0 / game.actions(l) as f64;
        }
        let flow = mass * prob;
        for i in 0..m {
            values[i] += flow * game.reward(i, h, s, joint);
        }
        if h + 1 < game.horizon() {
            for (sp, p) in game.transition_row(h, s, joint).iter().enumerate() {
                if p > &0.0 {
                    *next.entry((sp, k)).or_insert(0.0) += flow * p;
                }
            }
        }
    }
}

/// Certified upper bound on the deviation value of `player` against the
/// logged output policy, averaged over the uniform chain start.
pub fn deviation_upper_bound(
    game: &MarkovGame,
    log: &CertifiedPolicyLog,
    player: usize,
    mode: GapMode,
    options: &EvalOptions,
) -> Result<f64, EvalError> {
    log.validate(game)?;
    if player >= game.num_players() {
        return Err(EvalError::BadInput(format!("player {player} out of range")));
    }
    let tables = match log.variant {
        LogVariant::VStyle => upper_tables_v(game, log, player, mode, options)?,
        LogVariant::QStyle => {
            if game.num_players() != 2 {
                return Err(EvalError::BadInput("joint-chain logs are two-player".into()));
            }
            upper_tables_q(game, log, player, mode, options)?
        }
    };
    let s1 = game.initial_state();
    let root_count = |k: usize| match log.variant {
        LogVariant::VStyle => visits_through(log.players[0].visits(0, s1), k),
        LogVariant::QStyle => visits_through_q(log.joint.as_ref().unwrap(), 0, s1, k),
    };
    let mut total = 0.0;
    for k in 1..=log.num_episodes {
        total += tables[0][s1][root_count(k)];
    }
    Ok(total / log.num_episodes as f64)
}

/// Full certified evaluation of one player: exact on-policy value, the
/// deviation upper bound, and the certified gap.
pub fn certified_gap(
    game: &MarkovGame,
    log: &CertifiedPolicyLog,
    player: usize,
    mode: GapMode,
    options: &EvalOptions,
) -> Result<GapReport, EvalError> {
    let upper = deviation_upper_bound(game, log, player, mode, options)?;
    let report = on_policy_value(game, log, options)?;
    let on_policy = report.values[player];
    Ok(GapReport {
        player,
        mode,
        episodes: log.num_episodes,
        on_policy,
        upper_bound: upper,
        gap: upper - on_policy,
        estimate: EstimateKind::Exact,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envgen::{random_game, Concentration, RandomGameSpec, RewardMode};

    fn matching_pennies(horizon: usize) -> MarkovGame {
        // Single state, per-step matching-pennies payoff.
        let rewards0 = vec![1.0, 0.0, 0.0, 1.0];
        let mut rewards = Vec::new();
        for h in 0..horizon {
            let _ = h;
            rewards.extend_from_slice(&rewards0);
        }
        let r1: Vec<f64> = rewards.iter().map(|r| 1.0 - r).collect();
        rewards.extend(r1);
        MarkovGame::new(horizon, 1, vec![2, 2], 0, true, vec![1.0; horizon * 4], rewards).unwrap()
    }

    #[test]
    fn matching_pennies_value() {
        let game = matching_pennies(1);
        let tables = nash_values_zero_sum(&game).unwrap();
        assert!((tables.v_star[0][0] - 0.5).abs() < 1e-8);
        assert!(tables.max_duality_gap <= 1e-8);
        assert!(tables.bellman_residual(&game) <= 1e-8);
    }

    #[test]
    fn constant_payoff_value_scales_with_steps() {
        let horizon = 4;
        let rewards0 = vec![0.7; 4 * horizon];
        let mut rewards = rewards0.clone();
        rewards.extend(rewards0.iter().map(|r| 1.0 - r));
        let game =
            MarkovGame::new(horizon, 1, vec![2, 2], 0, true, vec![1.0; horizon * 4], rewards)
                .unwrap();
        let tables = nash_values_zero_sum(&game).unwrap();
        for h in 0..horizon {
            let expect = 0.7 * (horizon - h) as f64;
            assert!((tables.v_star[h][0] - expect).abs() < 1e-8);
        }
    }

    #[test]
    fn best_response_in_matching_pennies() {
        let game = matching_pennies(1);
        let uniform = MarkovPolicy::uniform(&game);
        let (values, _) = best_response_markov(&game, &uniform, 0).unwrap();
        assert!((values[0][0] - 0.5).abs() < 1e-10);
        // Against a pure opponent the best response exploits fully.
        let mut pure = MarkovPolicy::uniform(&game);
        pure.set_action_probs(1, 0, 0, vec![1.0, 0.0]);
        let (values, br) = best_response_markov(&game, &pure, 0).unwrap();
        assert!((values[0][0] - 1.0).abs() < 1e-10);
        assert_eq!(br.action_probs(0, 0, 0), &[1.0, 0.0]);
    }

    #[test]
    fn best_response_matches_nash_against_nash() {
        let spec = RandomGameSpec {
            num_players: 2,
            num_states: 3,
            action_counts: vec![2, 2],
            horizon: 3,
            reward_mode: RewardMode::ZeroSum,
            concentration: Concentration::Dirichlet(1.0),
            seed: 14,
        };
        let game = random_game(&spec).unwrap();
        let tables = nash_values_zero_sum(&game).unwrap();
        let mut nash = MarkovPolicy::uniform(&game);
        for h in 0..3 {
            for s in 0..3 {
                nash.set_action_probs(0, h, s, tables.row_strategies[h][s].clone());
                nash.set_action_probs(1, h, s, tables.col_strategies[h][s].clone());
            }
        }
        // Either side's best response cannot beat the minimax value.
        let (v0, _) = best_response_markov(&game, &nash, 0).unwrap();
        assert!((v0[0][0] - tables.v_star[0][0]).abs() <= 1e-8);
        let (v1, _) = best_response_markov(&game, &nash, 1).unwrap();
        let complement = game.horizon() as f64 - tables.v_star[0][0];
        assert!((v1[0][0] - complement).abs() <= 1e-8);
        // Gaps of the exact Nash policy vanish.
        for gap in nash_gap_markov(&game, &nash).unwrap() {
            assert!(gap.abs() <= 1e-7);
        }
    }

    #[test]
    fn uniform_is_nash_in_matching_pennies() {
        let game = matching_pennies(1);
        let gaps = nash_gap_markov(&game, &MarkovPolicy::uniform(&game)).unwrap();
        for gap in gaps {
            assert!(gap.abs() < 1e-10);
        }
        // A pure policy is exploited for the full 0.5.
        let mut pure = MarkovPolicy::uniform(&game);
        pure.set_action_probs(0, 0, 0, vec![1.0, 0.0]);
        let gaps = nash_gap_markov(&game, &pure).unwrap();
        assert!((gaps[1] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn nash_matches_policy_pair_enumeration() {
        // Oracle: the zero-sum game restricted to deterministic Markov
        // policies is a finite matrix game whose mixed value equals the
        // backward-induction value.
        let spec = RandomGameSpec {
            num_players: 2,
            num_states: 3,
            action_counts: vec![2, 2],
            horizon: 3,
            reward_mode: RewardMode::ZeroSum,
            concentration: Concentration::Dirichlet(1.5),
            seed: 99,
        };
        let game = random_game(&spec).unwrap();
        let tables = nash_values_zero_sum(&game).unwrap();
        let n_policies = 1usize << 9; // 2^(S*H) deterministic policies per side
        let policy_of = |mask: usize, player: usize| -> MarkovPolicy {
            let mut policy = MarkovPolicy::uniform(&game);
            for h in 0..3 {
                for s in 0..3 {
                    let bit = (mask >> (h * 3 + s)) & 1;
                    let mut dist = vec![0.0, 0.0];
                    dist[bit] = 1.0;
                    policy.set_action_probs(player, h, s, dist);
                }
            }
            policy
        };
        let mut matrix = vec![vec![0.0f64; n_policies]; n_policies];
        for mu in 0..n_policies {
            let mut joint = policy_of(mu, 0);
            for nu in 0..n_policies {
                let other = policy_of(nu, 1);
                for h in 0..3 {
                    for s in 0..3 {
                        joint.set_action_probs(1, h, s, other.action_probs(1, h, s).to_vec());
                    }
                }
                matrix[mu][nu] = on_policy_markov(&game, &joint).unwrap()[0] / 3.0;
            }
        }
        let sol = solve_matrix_game(&matrix).unwrap();
        assert!(
            (sol.value * 3.0 - tables.v_star[0][0]).abs() <= 1e-6,
            "enumeration {} vs induction {}",
            sol.value * 3.0,
            tables.v_star[0][0]
        );
    }

    #[test]
    fn resample_masses_conserve_and_weight() {
        let schedule = WeightSchedule::new(3);
        let in_class = vec![0.0, 0.25, 0.0, 0.5, 0.25];
        let out = resample_masses(&in_class, &schedule);
        let total_in: f64 = in_class.iter().sum();
        let total_out: f64 = out.iter().sum();
        assert!((total_in - total_out).abs() < 1e-12);
        // Direct evaluation.
        for j in 1..=4usize {
            let direct: f64 = (j..=4)
                .map(|t| {
                    let w = schedule.weights(t);
                    in_class[t] * w[j - 1]
                })
                .sum();
            assert!((out[j - 1] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn single_action_deterministic_game_gap_zero() {
        // One action per player, deterministic chain of states: the
        // certified bound collapses to the exact value.
        let horizon = 3;
        let states = 3;
        let mut transitions = vec![0.0; horizon * states * states];
        for h in 0..horizon {
            for s in 0..states {
                let next = (s + 1) % states;
                transitions[(h * states + s) * states + next] = 1.0;
            }
        }
        let rewards: Vec<f64> = (0..horizon * states).map(|i| (i % 4) as f64 * 0.25).collect();
        let game =
            MarkovGame::new(horizon, states, vec![1], 0, false, transitions, rewards).unwrap();
        let config = crate::vlearn::TrainConfig::uniform(
            &game,
            crate::bandit::BanditMode::External,
            1.0,
            7,
            3,
        );
        let out = crate::vlearn::train(&game, &config).unwrap();
        for mode in [GapMode::BestResponse, GapMode::StrategyMod] {
            let report =
                certified_gap(&game, &out.log, 0, mode, &EvalOptions::default()).unwrap();
            assert!(
                report.gap.abs() <= 1e-10,
                "{mode:?}: gap {} (on {}, up {})",
                report.gap,
                report.on_policy,
                report.upper_bound
            );
        }
    }

    #[test]
    fn on_policy_matches_monte_carlo() {
        let spec = RandomGameSpec {
            num_players: 2,
            num_states: 3,
            action_counts: vec![2, 2],
            horizon: 3,
            reward_mode: RewardMode::GeneralSum,
            concentration: Concentration::Dirichlet(1.0),
            seed: 6,
        };
        let game = random_game(&spec).unwrap();
        let config = crate::vlearn::TrainConfig::uniform(
            &game,
            crate::bandit::BanditMode::External,
            1.0,
            200,
            11,
        );
        let out = crate::vlearn::train(&game, &config).unwrap();
        let exact = on_policy_value(&game, &out.log, &EvalOptions::default()).unwrap();
        let (means, stderrs) = mc_value(&game, &out.log, 100_000, 123).unwrap();
        for i in 0..2 {
            let sigma = stderrs[i].max(1e-4);
            assert!(
                (means[i] - exact.values[i]).abs() <= 3.0 * sigma,
                "player {i}: mc {} vs exact {}",
                means[i],
                exact.values[i]
            );
        }
        // Visitation sums to one per step.
        for h in 0..3 {
            let total: f64 = exact.visitation[h].iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn execution_visitation_matches_exact_marginals() {
        let spec = RandomGameSpec {
            num_players: 2,
            num_states: 3,
            action_counts: vec![2, 2],
            horizon: 2,
            reward_mode: RewardMode::ZeroSum,
            concentration: Concentration::Dirichlet(0.8),
            seed: 20,
        };
        let game = random_game(&spec).unwrap();
        let config = crate::vlearn::TrainConfig::uniform(
            &game,
            crate::bandit::BanditMode::External,
            1.0,
            150,
            4,
        );
        let out = crate::vlearn::train(&game, &config).unwrap();
        let exact = on_policy_value(&game, &out.log, &EvalOptions::default()).unwrap();
        let n = 100_000usize;
        let mut rng = RngStream::named(9, "exec");
        let mut counts = vec![vec![0usize; 3]; 2];
        for _ in 0..n {
            let tr = crate::certified::execute_certified(&out.log, &game, &mut rng).unwrap();
            for (h, step) in tr.steps.iter().enumerate() {
                counts[h][step.state] += 1;
            }
        }
        for h in 0..2 {
            for s in 0..3 {
                let p = exact.visitation[h][s];
                let freq = counts[h][s] as f64 / n as f64;
                let sigma = (p * (1.0 - p) / n as f64).sqrt().max(1e-4);
                assert!(
                    (freq - p).abs() <= 3.5 * sigma,
                    "(h={h}, s={s}): {freq} vs {p}"
                );
            }
        }
    }

    #[test]
    fn zero_sum_on_policy_values_sum_to_horizon() {
        let spec = RandomGameSpec {
            num_players: 2,
            num_states: 2,
            action_counts: vec![2, 2],
            horizon: 3,
            reward_mode: RewardMode::ZeroSum,
            concentration: Concentration::Dirichlet(1.0),
            seed: 2,
        };
        let game = random_game(&spec).unwrap();
        let config = crate::vlearn::TrainConfig::uniform(
            &game,
            crate::bandit::BanditMode::External,
            1.0,
            100,
            5,
        );
        let out = crate::vlearn::train(&game, &config).unwrap();
        let exact = on_policy_value(&game, &out.log, &EvalOptions::default()).unwrap();
        assert!((exact.values[0] + exact.values[1] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn k1_log_collapses_to_markov_oracles() {
        // Deterministic single-state game: the one-episode log replays the
        // uniform initial snapshots, so the certified bound and the exact
        // best response against the collapsed Markov policy coincide.
        let horizon = 2;
        let rewards0 = vec![0.9, 0.2, 0.1, 0.6, /* h=1 */ 0.3, 0.8, 0.5, 0.4];
        let mut rewards = rewards0.clone();
        rewards.extend(rewards0.iter().map(|r| 1.0 - r));
        let game =
            MarkovGame::new(horizon, 1, vec![2, 2], 0, true, vec![1.0; horizon * 4], rewards)
                .unwrap();
        let config = crate::vlearn::TrainConfig::uniform(
            &game,
            crate::bandit::BanditMode::External,
            1.0,
            1,
            17,
        );
        let out = crate::vlearn::train(&game, &config).unwrap();
        let uniform = MarkovPolicy::uniform(&game);
        let on_exact = on_policy_markov(&game, &uniform).unwrap();
        for player in 0..2 {
            let (br_values, _) = best_response_markov(&game, &uniform, player).unwrap();
            let br = br_values[0][0];
            for mode in [GapMode::BestResponse, GapMode::StrategyMod] {
                let report =
                    certified_gap(&game, &out.log, player, mode, &EvalOptions::default()).unwrap();
                assert!(
                    (report.upper_bound - br).abs() <= 1e-10,
                    "player {player} {mode:?}: {} vs {br}",
                    report.upper_bound
                );
                assert!((report.on_policy - on_exact[player]).abs() <= 1e-10);
                assert!(report.gap >= -1e-8);
            }
        }
    }

    #[test]
    fn strategy_mod_dominates_best_response_on_v_logs() {
        let spec = RandomGameSpec {
            num_players: 2,
            num_states: 2,
            action_counts: vec![2, 2],
            horizon: 2,
            reward_mode: RewardMode::GeneralSum,
            concentration: Concentration::Dirichlet(1.0),
            seed: 31,
        };
        let game = random_game(&spec).unwrap();
        let config = crate::vlearn::TrainConfig::uniform(
            &game,
            crate::bandit::BanditMode::Swap,
            1.0,
            120,
            8,
        );
        let out = crate::vlearn::train(&game, &config).unwrap();
        for player in 0..2 {
            let br = certified_gap(&game, &out.log, player, GapMode::BestResponse, &EvalOptions::default())
                .unwrap();
            let ce = certified_gap(&game, &out.log, player, GapMode::StrategyMod, &EvalOptions::default())
                .unwrap();
            assert!(ce.upper_bound >= br.upper_bound - 1e-9);
            assert!(br.gap >= -1e-8 && ce.gap >= -1e-8);
        }
    }

    #[test]
    fn memo_cap_is_enforced(){
        let game = matching_pennies(2);
        let config = crate::vlearn::TrainConfig::uniform(
            &game,
            crate::bandit::BanditMode::External,
            1.0,
            50,
            0,
        );
        let out = crate::vlearn::train(&game, &config).unwrap();
        let tiny = EvalOptions { max_entries: 10 };
        assert!(matches!(
            deviation_upper_bound(&game, &out.log, 0, GapMode::BestResponse, &tiny),
            Err(EvalError::MemoOverflow { .. })
        ));
    }

    #[test]
    fn deterministic_sampler_has_zero_stderr() {
        let game = MarkovGame::new(1, 1, vec![1], 0, false, vec![1.0], vec![0.75]).unwrap();
        let policy = MarkovPolicy::uniform(&game);
        let (means, stderrs) = mc_value(&game, &policy, 500, 7).unwrap();
        assert_eq!(means, vec![0.75]);
        assert_eq!(stderrs, vec![0.0]);
    }
}
