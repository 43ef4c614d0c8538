//! Visit logs and execution of the certified output policies.
//!
//! Training appends one record per `(player, h, s)` visit: the episode index
//! and the policy that was in force when the visit's action was drawn.
//! Executing the output policy replays those snapshots through a chain of
//! episode indices: start the chain uniformly over the training episodes,
//! and at each step resample it among the state's logged visits with the
//! recency weights, then act from the sampled snapshot.
//!
//! The chain at episode `k` exposes the visits of episodes `1..=k` (the
//! policy state after `k` completed episodes), so a log trained for one
//! episode already replays its own snapshots instead of degenerating to the
//! unvisited fallback.
//!
//! Two variants share the container: state-indexed chains with per-player
//! own-action snapshots, and `(state, joint action)`-indexed chains with
//! joint-policy snapshots for the centralized Q-learner. Joint tables carry
//! one trailing sentinel record at episode `K + 1` holding the final policy,
//! which makes "policy in force at the beginning of episode `k`" resolvable
//! for every `k <= K + 1`.
//!
//! # Binary layout (version 1, all integers little-endian)
//!
//! ```text
//! magic "MGVL" | version u32 | variant u8 (0 = state chain, 1 = joint chain)
//! num_episodes u64 | shared_seed u64 | horizon u32 | num_states u32 | players u32
//! per player:
//!   action_count u32
//!   per (h, s) row-major: visit count u64, then per visit:
//!     episode u64, policy f64 x action_count
//! joint flag u8; when 1:
//!   row_actions u32 | col_actions u32
//!   per (h, s): visit count u64, then per visit: episode u64, policy f64 x (rows*cols)
//!   per (h, s, joint) row-major: count u64, then episode u64 each
//! cuts flag u8; when 1: per player per (h, s): cut u64
//! ```

use crate::bandit::WeightSchedule;
use crate::game::{MarkovGame, MarkovPolicy, RngStream, Trajectory, TrajectoryStep};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CertifiedError {
    #[error("players disagree on the episode count")]
    MismatchedEpisodes,
    #[error("log does not match the game: {0}")]
    GameMismatch(String),
    #[error("log variant {0:?} not valid for this operation")]
    WrongVariant(LogVariant),
    #[error("monotone provenance missing from the log")]
    MissingMonotoneCuts,
    #[error("malformed log: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogVariant {
    /// State-indexed chain, per-player own-action snapshots.
    VStyle,
    /// (state, joint action)-indexed chain, joint-policy snapshots.
    QStyle,
}

/// One logged visit: the episode it happened in and the pre-update policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitRecord {
    pub episode: usize,
    pub policy: Vec<f64>,
}

/// Per-player visit tables over `(h, s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitLog {
    pub action_count: usize,
    /// `[h][s] -> visit records`, episodes strictly increasing.
    pub tables: Vec<Vec<Vec<VisitRecord>>>,
}

impl VisitLog {
    pub fn empty(action_count: usize, horizon: usize, num_states: usize) -> Self {
        Self { action_count, tables: vec![vec![Vec::new(); num_states]; horizon] }
    }

    pub fn visits(&self, h: usize, s: usize) -> &[VisitRecord] {
        &self.tables[h][s]
    }
}

/// Joint-policy tables for the centralized two-player variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointVisitLog {
    pub row_actions: usize,
    pub col_actions: usize,
    /// `[h][s] -> (episode, joint policy)`; ends with a sentinel record at
    /// episode `K + 1` carrying the final policy.
    pub state_visits: Vec<Vec<Vec<VisitRecord>>>,
    /// `[h][s][joint] -> strictly increasing episode indices`.
    pub cell_visits: Vec<Vec<Vec<Vec<usize>>>>,
}

impl JointVisitLog {
    /// The joint policy in force at the beginning of episode `k`
    /// (`k <= K + 1`).
    pub fn policy_at(&self, h: usize, s: usize, k: usize) -> &[f64] {
        let records = &self.state_visits[h][s];
        let idx = records.partition_point(|r| r.episode < k);
        &records[idx.min(records.len() - 1)].policy
    }
}

/// The full output-policy artifact of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifiedPolicyLog {
    pub variant: LogVariant,
    pub num_episodes: usize,
    pub shared_seed: u64,
    pub horizon: usize,
    pub num_states: usize,
    pub players: Vec<VisitLog>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint: Option<JointVisitLog>,
    /// Monotone provenance: per `(player, h, s)`, the visit count at the
    /// last strict decrease of that player's value estimate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monotone_cuts: Option<Vec<Vec<Vec<usize>>>>,
}

/// Result of resampling the chain at one `(h, s)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleOutcome {
    /// Chain moves to the sampled visit's episode.
    Visited { episode: usize, index: usize },
    /// No visits before the chain's cutoff; play uniform, keep the chain.
    Unvisited,
}

/// Number of logged visits with episode strictly below `k`.
pub fn visits_before(records: &[VisitRecord], k: usize) -> usize {
    records.partition_point(|r| r.episode < k)
}

/// Resamples the chain among the visits with episode `< k`, drawing index
/// `i` with the recency weight `alpha_t^i`.
pub fn sample_next_index(
    records: &[VisitRecord],
    horizon: usize,
    k: usize,
    rng: &mut RngStream,
) -> SampleOutcome {
    let t = visits_before(records, k);
    if t == 0 {
        return SampleOutcome::Unvisited;
    }
    let weights = WeightSchedule::new(horizon).weights(t);
    let index = rng.index_from_probs(&weights);
    SampleOutcome::Visited { episode: records[index].episode, index }
}

impl CertifiedPolicyLog {
    pub fn num_players(&self) -> usize {
        self.players.len()
    }

    /// Structural validation: matching dimensions, agreeing episode lists,
    /// strictly increasing episodes, well-formed snapshots.
    pub fn validate(&self, game: &MarkovGame) -> Result<(), CertifiedError> {
        if self.horizon != game.horizon() || self.num_states != game.num_states() {
            return Err(CertifiedError::GameMismatch("horizon or state count".into()));
        }
        if self.players.len() != game.num_players() {
            return Err(CertifiedError::GameMismatch("player count".into()));
        }
        for (j, log) in self.players.iter().enumerate() {
            if log.action_count != game.actions(j) {
                return Err(CertifiedError::GameMismatch(format!("action count of player {j}")));
            }
            if log.tables.len() != self.horizon
                || log.tables.iter().any(|per_s| per_s.len() != self.num_states)
            {
                return Err(CertifiedError::Malformed(format!("table shape of player {j}")));
            }
        }
        for h in 0..self.horizon {
            for s in 0..self.num_states {
                let reference: Vec<usize> =
                    self.players[0].tables[h][s].iter().map(|r| r.episode).collect();
                if reference.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(CertifiedError::Malformed(format!(
                        "episodes not increasing at (h={h}, s={s})"
                    )));
                }
                for log in &self.players[1..] {
                    let episodes: Vec<usize> =
                        log.tables[h][s].iter().map(|r| r.episode).collect();
                    if episodes != reference {
                        return Err(CertifiedError::MismatchedEpisodes);
                    }
                }
                for log in &self.players {
                    for rec in &log.tables[h][s] {
                        if rec.policy.len() != log.action_count {
                            return Err(CertifiedError::Malformed("snapshot length".into()));
                        }
                        crate::game::validate_distribution(&rec.policy)
                            .map_err(CertifiedError::Malformed)?;
                    }
                }
            }
        }
        if self.variant == LogVariant::QStyle {
            let joint = self.joint.as_ref().ok_or(CertifiedError::Malformed(
                "joint-chain log without joint tables".into(),
            ))?;
            if joint.row_actions != game.actions(0) || joint.col_actions != game.actions(1) {
                return Err(CertifiedError::GameMismatch("joint action counts".into()));
            }
            for h in 0..self.horizon {
                for s in 0..self.num_states {
                    let records = &joint.state_visits[h][s];
                    if records.is_empty() || records.last().unwrap().episode != self.num_episodes + 1
                    {
                        return Err(CertifiedError::Malformed(format!(
                            "missing final sentinel at (h={h}, s={s})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Truncates the log to the first `episodes` training episodes, giving
    /// the artifact that training would have emitted at that checkpoint.
    pub fn truncated(&self, episodes: usize) -> Self {
        let mut out = self.clone();
        out.num_episodes = episodes;
        for log in &mut out.players {
            for per_s in &mut log.tables {
                for records in per_s.iter_mut() {
                    records.retain(|r| r.episode <= episodes);
                }
            }
        }
        if let Some(joint) = &mut out.joint {
            for h in 0..joint.state_visits.len() {
                for s in 0..joint.state_visits[h].len() {
                    let records = &mut joint.state_visits[h][s];
                    // The first record beyond the cut is the policy in force
                    // right after the truncated run; it becomes the sentinel.
                    let cut = records.partition_point(|r| r.episode <= episodes);
                    let sentinel_policy = records[cut.min(records.len() - 1)].policy.clone();
                    records.truncate(cut);
                    records.push(VisitRecord { episode: episodes + 1, policy: sentinel_policy });
                    for cells in joint.cell_visits[h][s].iter_mut() {
                        cells.retain(|&k| k <= episodes);
                    }
                }
            }
        }
        if let Some(cuts) = &mut out.monotone_cuts {
            // Cut indices are visit counts; clamp to the truncated counts.
            for (j, per_h) in cuts.iter_mut().enumerate() {
                for (h, per_s) in per_h.iter_mut().enumerate() {
                    for (s, cut) in per_s.iter_mut().enumerate() {
                        let len = out.players[j].tables[h][s].len();
                        *cut = (*cut).min(len);
                    }
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log serialization")
    }

    pub fn from_json(text: &str) -> Result<Self, CertifiedError> {
        serde_json::from_str(text).map_err(|e| CertifiedError::Malformed(e.to_string()))
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(b"MGVL");
        put_u32(&mut w, 1);
        w.push(match self.variant {
            LogVariant::VStyle => 0,
            LogVariant::QStyle => 1,
        });
        put_u64(&mut w, self.num_episodes as u64);
        put_u64(&mut w, self.shared_seed);
        put_u32(&mut w, self.horizon as u32);
        put_u32(&mut w, self.num_states as u32);
        put_u32(&mut w, self.players.len() as u32);
        for log in &self.players {
            put_u32(&mut w, log.action_count as u32);
            for per_s in &log.tables {
                for records in per_s {
                    put_records(&mut w, records);
                }
            }
        }
        match &self.joint {
            None => w.push(0),
            Some(joint) => {
                w.push(1);
                put_u32(&mut w, joint.row_actions as u32);
                put_u32(&mut w, joint.col_actions as u32);
                for per_s in &joint.state_visits {
                    for records in per_s {
                        put_records(&mut w, records);
                    }
                }
                for per_s in &joint.cell_visits {
                    for cells in per_s {
                        for episodes in cells {
                            put_u64(&mut w, episodes.len() as u64);
                            for &k in episodes {
                                put_u64(&mut w, k as u64);
                            }
                        }
                    }
                }
            }
        }
        match &self.monotone_cuts {
            None => w.push(0),
            Some(cuts) => {
                w.push(1);
                for per_h in cuts {
                    for per_s in per_h {
                        for &cut in per_s {
                            put_u64(&mut w, cut as u64);
                        }
                    }
                }
            }
        }
        w
    }

    pub fn from_binary(data: &[u8]) -> Result<Self, CertifiedError> {
        let mut r = Reader { data, at: 0 };
        let magic = r.bytes(4)?;
        if magic != b"MGVL" {
            return Err(CertifiedError::Malformed("bad magic".into()));
        }
        let version = r.u32()?;
        if version != 1 {
            return Err(CertifiedError::Malformed(format!("unknown version {version}")));
        }
        let variant = match r.u8()? {
            0 => LogVariant::VStyle,
            1 => LogVariant::QStyle,
            v => return Err(CertifiedError::Malformed(format!("unknown variant {v}"))),
        };
        let num_episodes = r.u64()? as usize;
        let shared_seed = r.u64()?;
        let horizon = r.u32()? as usize;
        let num_states = r.u32()? as usize;
        let num_players = r.u32()? as usize;
        if horizon == 0 || num_states == 0 || num_players == 0 {
            return Err(CertifiedError::Malformed("empty dimensions".into()));
        }
        let mut players = Vec::with_capacity(num_players);
        for _ in 0..num_players {
            let action_count = r.u32()? as usize;
            let mut tables = Vec::with_capacity(horizon);
            for _ in 0..horizon {
                let mut per_s = Vec::with_capacity(num_states);
                for _ in 0..num_states {
                    per_s.push(r.records(action_count)?);
                }
                tables.push(per_s);
            }
            players.push(VisitLog { action_count, tables });
        }
        let joint = if r.u8()? == 1 {
            let row_actions = r.u32()? as usize;
            let col_actions = r.u32()? as usize;
            let mut state_visits = Vec::with_capacity(horizon);
            for _ in 0..horizon {
                let mut per_s = Vec::with_capacity(num_states);
                for _ in 0..num_states {
                    per_s.push(r.records(row_actions * col_actions)?);
                }
                state_visits.push(per_s);
            }
            let mut cell_visits = Vec::with_capacity(horizon);
            for _ in 0..horizon {
                let mut per_s = Vec::with_capacity(num_states);
                for _ in 0..num_states {
                    let mut cells = Vec::with_capacity(row_actions * col_actions);
                    for _ in 0..row_actions * col_actions {
                        let count = r.u64()? as usize;
                        let mut eps = Vec::with_capacity(count);
                        for _ in 0..count {
                            eps.push(r.u64()? as usize);
                        }
                        cells.push(eps);
                    }
                    per_s.push(cells);
                }
                cell_visits.push(per_s);
            }
            Some(JointVisitLog { row_actions, col_actions, state_visits, cell_visits })
        } else {
            None
        };
        let monotone_cuts = if r.u8()? == 1 {
            let mut cuts = Vec::with_capacity(num_players);
            for _ in 0..num_players {
                let mut per_h = Vec::with_capacity(horizon);
                for _ in 0..horizon {
                    let mut per_s = Vec::with_capacity(num_states);
                    for _ in 0..num_states {
                        per_s.push(r.u64()? as usize);
                    }
                    per_h.push(per_s);
                }
                cuts.push(per_h);
            }
            Some(cuts)
        } else {
            None
        };
        if r.at != data.len() {
            return Err(CertifiedError::Malformed("trailing bytes".into()));
        }
        Ok(Self {
            variant,
            num_episodes,
            shared_seed,
            horizon,
            num_states,
            players,
            joint,
            monotone_cuts,
        })
    }
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_records(w: &mut Vec<u8>, records: &[VisitRecord]) {
    put_u64(w, records.len() as u64);
    for rec in records {
        put_u64(w, rec.episode as u64);
        for &p in &rec.policy {
            w.extend_from_slice(&p.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    data: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8], CertifiedError> {
        if self.at + n > self.data.len() {
            return Err(CertifiedError::Malformed("truncated data".into()));
        }
        let out = &self.data[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, CertifiedError> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CertifiedError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CertifiedError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CertifiedError> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn records(&mut self, policy_len: usize) -> Result<Vec<VisitRecord>, CertifiedError> {
        let count = self.u64()? as usize;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let episode = self.u64()? as usize;
            let mut policy = Vec::with_capacity(policy_len);
            for _ in 0..policy_len {
                policy.push(self.f64()?);
            }
            out.push(VisitRecord { episode, policy });
        }
        Ok(out)
    }
}

/// Executes one episode of the certified output policy.
///
/// The single `rng` is the shared random seed: every agent resamples the
/// same chain index at every step, which realizes the correlation the
/// output policy needs.
pub fn execute_certified(
    log: &CertifiedPolicyLog,
    game: &MarkovGame,
    rng: &mut RngStream,
) -> Result<Trajectory, CertifiedError> {
    debug_assert!(log.num_episodes >= 1);
    let horizon = game.horizon();
    let mut steps = Vec::with_capacity(horizon);
    let mut chain = rng.uniform_below(log.num_episodes) + 1;
    let mut state = game.initial_state();
    match log.variant {
        LogVariant::VStyle => {
            for h in 0..horizon {
                let records = log.players[0].visits(h, state);
                let outcome = sample_next_index(records, horizon, chain + 1, rng);
                let mut actions = Vec::with_capacity(log.players.len());
                match outcome {
                    SampleOutcome::Visited { episode, index } => {
                        chain = episode;
                        for player in &log.players {
                            let snapshot = &player.visits(h, state)[index].policy;
                            actions.push(rng.index_from_probs(snapshot));
                        }
                    }
                    SampleOutcome::Unvisited => {
                        for player in &log.players {
                            actions.push(rng.uniform_below(player.action_count));
                        }
                    }
                }
                let (rewards, next) = game
                    .step(h, state, &actions, rng)
                    .map_err(|e| CertifiedError::GameMismatch(e.to_string()))?;
                steps.push(TrajectoryStep { state, actions, rewards });
                state = next;
            }
        }
        LogVariant::QStyle => {
            let joint = log.joint.as_ref().ok_or(CertifiedError::WrongVariant(log.variant))?;
            for h in 0..horizon {
                let dist = joint.policy_at(h, state, chain + 1);
                let flat = rng.index_from_probs(dist);
                let actions = game.split_joint(flat);
                let (rewards, next) = game
                    .step(h, state, &actions, rng)
                    .map_err(|e| CertifiedError::GameMismatch(e.to_string()))?;
                let cells = &joint.cell_visits[h][state][flat];
                let t = cells.partition_point(|&k| k <= chain);
                if t >= 1 {
                    let weights = WeightSchedule::new(horizon).weights(t);
                    chain = cells[rng.index_from_probs(&weights)];
                }
                steps.push(TrajectoryStep { state, actions, rewards });
                state = next;
            }
        }
    }
    Ok(Trajectory { episode: 0, steps })
}

/// A Markov output policy extracted from a monotone training run, with the
/// cut index used at each `(player, h, s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneMarkovPolicy {
    pub policy: MarkovPolicy,
    /// `[player][h][s]`: the visit-count cut whose snapshots were mixed.
    pub cuts: Vec<Vec<Vec<usize>>>,
}

/// Builds the Markov output policy of a monotone run: each player's
/// distribution at `(h, s)` is the recency-weighted mixture of her first
/// `t_cut` snapshots, where `t_cut` is the *other* player's last
/// value-decrease visit count at that state. States with no visits fall back
/// to uniform.
pub fn extract_monotone_markov(
    log: &CertifiedPolicyLog,
) -> Result<MonotoneMarkovPolicy, CertifiedError> {
    if log.variant != LogVariant::VStyle {
        return Err(CertifiedError::WrongVariant(log.variant));
    }
    let cuts = log.monotone_cuts.as_ref().ok_or(CertifiedError::MissingMonotoneCuts)?;
    let m = log.players.len();
    if !(m == 1 || m == 2) {
        return Err(CertifiedError::Malformed(format!(
            "monotone extraction defined for 1 or 2 players, log has {m}"
        )));
    }
    let schedule = WeightSchedule::new(log.horizon);
    let mut probs = Vec::with_capacity(m);
    let mut used_cuts = vec![vec![vec![0usize; log.num_states]; log.horizon]; m];
    for j in 0..m {
        let other = if m == 2 { 1 - j } else { j };
        let actions = log.players[j].action_count;
        let mut per_h = Vec::with_capacity(log.horizon);
        for h in 0..log.horizon {
            let mut per_s = Vec::with_capacity(log.num_states);
            for s in 0..log.num_states {
                let records = log.players[j].visits(h, s);
                let cut = cuts[other][h][s].min(records.len());
                used_cuts[j][h][s] = cut;
                if cut == 0 {
                    per_s.push(vec![1.0 / actions as f64; actions]);
                    continue;
                }
                let weights = schedule.weights(cut);
                let mut mix = vec![0.0; actions];
                for (i, w) in weights.iter().enumerate() {
                    for (a, p) in records[i].policy.iter().enumerate() {
                        mix[a] += w * p;
                    }
                }
                per_s.push(mix);
            }
            per_h.push(per_s);
        }
        probs.push(per_h);
    }
    let action_counts: Vec<usize> = log.players.iter().map(|p| p.action_count).collect();
    let policy = MarkovPolicy::new(action_counts, log.horizon, log.num_states, probs)
        .map_err(|e| CertifiedError::Malformed(e.to_string()))?;
    Ok(MonotoneMarkovPolicy { policy, cuts: used_cuts })
}
