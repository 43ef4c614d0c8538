//! Adversarial bandit learners with recency-weighted regret guarantees: an
//! exponential-weights learner with implicit exploration for external regret,
//! its per-recommendation variant for swap regret, the shared learning-rate
//! schedule, closed-form regret envelopes, and an exact offline auditor.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BanditError {
    #[error("loss {0} outside [0, 1]")]
    LossOutOfRange(f64),
    #[error("action {action} out of range for {actions} arms")]
    ActionOutOfRange { action: usize, actions: usize },
    #[error("stationary distribution iteration failed to converge")]
    StationaryDiverged,
}

/// Which regret notion a learner targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BanditMode {
    External,
    Swap,
}

/// The learning-rate sequence `alpha_t = (H+1)/(H+t)` and its derived
/// per-round weights.
///
/// `weights(t)` returns `[alpha_t^1 .. alpha_t^t]`, the probability the
/// `i`-th of `t` observations carries in the running average. They sum to 1
/// for `t >= 1` and tilt heavily toward the most recent `t/H` rounds.
#[derive(Debug, Clone, Copy)]
pub struct WeightSchedule {
    horizon: usize,
}

impl WeightSchedule {
    pub fn new(horizon: usize) -> Self {
        assert!(horizon >= 1, "horizon must be positive");
        Self { horizon }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// `alpha_t` for round `t >= 1`.
    pub fn alpha(&self, t: usize) -> f64 {
        let h = self.horizon as f64;
        (h + 1.0) / (h + t as f64)
    }

    /// The weight vector `[alpha_t^1 .. alpha_t^t]` by the product formula.
    pub fn weights(&self, t: usize) -> Vec<f64> {
        let mut w = vec![0.0; t];
        let mut tail = 1.0; // product of (1 - alpha_j) for j in i+1..=t
        for i in (1..=t).rev() {
            w[i - 1] = self.alpha(i) * tail;
            tail *= 1.0 - self.alpha(i);
        }
        w
    }

    /// `alpha_t^0`: 1 at t = 0, exactly 0 afterwards (alpha_1 = 1).
    pub fn alpha_zero(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            0.0
        }
    }
}

/// Closed-form regret envelopes for the plugged-in learners.
///
/// `per_round` is the anytime weighted-regret bound `xi(B, t, iota)`, and
/// `cumulative` the running-sum bound `Xi(B, t, iota)`.
#[derive(Debug, Clone, Copy)]
pub struct RegretBoundProfile {
    pub mode: BanditMode,
    pub horizon: usize,
}

impl RegretBoundProfile {
    pub fn per_round(&self, actions: usize, t: usize, iota: f64) -> f64 {
        let h = self.horizon as f64;
        let b = actions as f64;
        let t = t as f64;
        match self.mode {
            BanditMode::External => 10.0 * (h * b * iota / t).sqrt(),
            BanditMode::Swap => 10.0 * b * (h * iota / t).sqrt(),
        }
    }

    pub fn cumulative(&self, actions: usize, t: usize, iota: f64) -> f64 {
        let h = self.horizon as f64;
        let b = actions as f64;
        let t = t as f64;
        match self.mode {
            BanditMode::External => 20.0 * (h * b * t * iota).sqrt(),
            BanditMode::Swap => 20.0 * b * (h * t * iota).sqrt(),
        }
    }
}

/// Exponential-weights learner over importance-weighted losses with
/// implicit-exploration smoothing, under the recency-weighted schedule.
///
/// Maintains the weighted running average of loss estimates rather than the
/// raw weighted sums: the raw per-round weights grow without bound, while the
/// average obeys `L <- (1 - alpha_t) L + alpha_t lhat` and produces the same
/// iterates through the exponent `-(eta_t / alpha_t) L`.
#[derive(Debug, Clone)]
pub struct FtrlState {
    num_actions: usize,
    schedule: WeightSchedule,
    eta_scale: f64,
    rounds: usize,
    avg_loss: Vec<f64>,
    policy: Vec<f64>,
}

impl FtrlState {
    pub fn new(num_actions: usize, horizon: usize) -> Self {
        Self::with_eta_scale(num_actions, horizon, 1.0)
    }

    /// `eta_scale` multiplies both the step size and the implicit-exploration
    /// term; presets use it to reproduce alternative published schedules.
    pub fn with_eta_scale(num_actions: usize, horizon: usize, eta_scale: f64) -> Self {
        assert!(num_actions >= 1);
        Self {
            num_actions,
            schedule: WeightSchedule::new(horizon),
            eta_scale,
            rounds: 0,
            avg_loss: vec![0.0; num_actions],
            policy: vec![1.0 / num_actions as f64; num_actions],
        }
    }

    pub fn policy(&self) -> &[f64] {
        &self.policy
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    fn eta(&self, t: usize) -> f64 {
        let h = self.schedule.horizon() as f64;
        let b = self.num_actions as f64;
        self.eta_scale * (h * b.ln() / (b * t as f64)).sqrt()
    }

    /// One bandit round: importance-weight the observed loss onto the played
    /// arm, fold it into the running average, and re-normalize the policy.
    pub fn update(&mut self, action: usize, loss: f64) -> Result<(), BanditError> {
        if action >= self.num_actions {
            return Err(BanditError::ActionOutOfRange { action, actions: self.num_actions });
        }
        if !(0.0..=1.0).contains(&loss) {
            return Err(BanditError::LossOutOfRange(loss));
        }
        self.rounds += 1;
        let t = self.rounds;
        let alpha = self.schedule.alpha(t);
        let gamma = self.eta(t);
        let estimate = loss / (self.policy[action] + gamma);
        for (b, l) in self.avg_loss.iter_mut().enumerate() {
            *l = (1.0 - alpha) * *l + if b == action { alpha * estimate } else { 0.0 };
        }
        let scale = self.eta(t) / alpha;
        softmax_neg(&self.avg_loss, scale, &mut self.policy);
        Ok(())
    }
}

/// Per-recommendation exponential-weights learner whose played policy is the
/// stationary distribution of its conditional tables; bounds weighted swap
/// regret.
#[derive(Debug, Clone)]
pub struct SwapFtrlState {
    num_actions: usize,
    schedule: WeightSchedule,
    eta_scale: f64,
    rounds: usize,
    /// `avg_loss[rec][target]`: running average of conditional estimates.
    avg_loss: Vec<f64>,
    /// `cond[rec][target]`: conditional policy given recommendation `rec`.
    cond: Vec<f64>,
    policy: Vec<f64>,
}

impl SwapFtrlState {
    pub fn new(num_actions: usize, horizon: usize) -> Self {
        Self::with_eta_scale(num_actions, horizon, 1.0)
    }

    pub fn with_eta_scale(num_actions: usize, horizon: usize, eta_scale: f64) -> Self {
        assert!(num_actions >= 1);
        let b = num_actions;
        Self {
            num_actions,
            schedule: WeightSchedule::new(horizon),
            eta_scale,
            rounds: 0,
            avg_loss: vec![0.0; b * b],
            cond: vec![1.0 / b as f64; b * b],
            policy: vec![1.0 / b as f64; b],
        }
    }

    pub fn policy(&self) -> &[f64] {
        &self.policy
    }

    pub fn conditional(&self, rec: usize) -> &[f64] {
        &self.cond[rec * self.num_actions..(rec + 1) * self.num_actions]
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    fn eta(&self, t: usize) -> f64 {
        let h = self.schedule.horizon() as f64;
        let b = self.num_actions as f64;
        self.eta_scale * (h * b.ln() / t as f64).sqrt()
    }

    pub fn update(&mut self, action: usize, loss: f64) -> Result<(), BanditError> {
        if action >= self.num_actions {
            return Err(BanditError::ActionOutOfRange { action, actions: self.num_actions });
        }
        if !(0.0..=1.0).contains(&loss) {
            return Err(BanditError::LossOutOfRange(loss));
        }
        self.rounds += 1;
        let t = self.rounds;
        let alpha = self.schedule.alpha(t);
        let gamma = self.eta(t);
        let b = self.num_actions;
        // The estimate conditioned on recommendation `rec` is the external
        // estimator scaled by the probability `rec` was recommended.
        let base_estimate = loss / (self.policy[action] + gamma);
        for rec in 0..b {
            let row = &mut self.avg_loss[rec * b..(rec + 1) * b];
            let weighted = self.policy[rec] * base_estimate;
            for (target, l) in row.iter_mut().enumerate() {
                *l = (1.0 - alpha) * *l + if target == action { alpha * weighted } else { 0.0 };
            }
        }
        let scale = self.eta(t) / alpha;
        let mut dist = vec![0.0; b];
        for rec in 0..b {
            softmax_neg(&self.avg_loss[rec * b..(rec + 1) * b], scale, &mut dist);
            self.cond[rec * b..(rec + 1) * b].copy_from_slice(&dist);
        }
        self.policy = stationary_distribution(&self.cond, b, &self.policy)?;
        Ok(())
    }
}

/// Stationary distribution of the strictly positive stochastic matrix
/// `cond[rec][target]` (columns conditioned on `rec`): the fixed point of
/// `theta(target) = sum_rec theta(rec) cond[rec][target]`.
///
/// Power iteration from `start`, residual `1e-12`, at most `10^4` sweeps.
/// Strict positivity makes convergence geometric; failure indicates a bug
/// upstream and is a hard error.
pub fn stationary_distribution(
    cond: &[f64],
    b: usize,
    start: &[f64],
) -> Result<Vec<f64>, BanditError> {
    let mut theta = start.to_vec();
    let mut next = vec![0.0; b];
    for _ in 0..10_000 {
        for v in next.iter_mut() {
            *v = 0.0;
        }
        for rec in 0..b {
            let w = theta[rec];
            let row = &cond[rec * b..(rec + 1) * b];
            for (target, &p) in row.iter().enumerate() {
                next[target] += w * p;
            }
        }
        let total: f64 = next.iter().sum();
        for v in next.iter_mut() {
            *v /= total;
        }
        let residual: f64 =
            theta.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut theta, &mut next);
        if residual <= 1e-12 {
            return Ok(theta);
        }
    }
    Err(BanditError::StationaryDiverged)
}

/// `out[b] ~ exp(-scale * values[b])`, normalized, with max-subtraction so
/// the exponents stay bounded however large the averages grow.
fn softmax_neg(values: &[f64], scale: f64, out: &mut Vec<f64>) {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    out.clear();
    // Exponents are clamped just above the underflow threshold so the
    // distribution stays strictly positive however far the averages spread.
    out.extend(values.iter().map(|v| (-scale * (v - min)).max(-700.0).exp()));
    let total: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= total;
    }
}

/// One audited round: the policy in force and the adversary's full loss
/// vector (available only where the test harness controls the adversary).
#[derive(Debug, Clone)]
pub struct PlayRecord {
    pub policy: Vec<f64>,
    pub losses: Vec<f64>,
}

/// Realized weighted regret after each round of a play log.
///
/// External mode compares against the best fixed arm; swap mode against the
/// best action remapping, which decomposes into an independent argmin per
/// recommended arm.
pub fn audit_weighted_regret(
    log: &[PlayRecord],
    schedule: &WeightSchedule,
    mode: BanditMode,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(log.len());
    if log.is_empty() {
        return out;
    }
    let b = log[0].policy.len();
    // Running recency-weighted aggregates, updated as
    // `x_t = (1 - alpha_t) x_{t-1} + alpha_t g_t`.
    let mut on_policy = 0.0f64; // sum_i alpha_t^i <theta_i, l_i>
    let mut per_arm = vec![0.0f64; b]; // sum_i alpha_t^i l_i(arm)
    let mut per_pair = vec![0.0f64; b * b]; // sum_i alpha_t^i theta_i(rec) l_i(target)
    for (i, rec) in log.iter().enumerate() {
        let t = i + 1;
        let alpha = schedule.alpha(t);
        let played: f64 = rec.policy.iter().zip(&rec.losses).map(|(p, l)| p * l).sum();
        on_policy = (1.0 - alpha) * on_policy + alpha * played;
        for arm in 0..b {
            per_arm[arm] = (1.0 - alpha) * per_arm[arm] + alpha * rec.losses[arm];
        }
        match mode {
            BanditMode::External => {
                let best = per_arm.iter().cloned().fold(f64::INFINITY, f64::min);
                out.push(on_policy - best);
            }
            BanditMode::Swap => {
                for r in 0..b {
                    for target in 0..b {
                        per_pair[r * b + target] = (1.0 - alpha) * per_pair[r * b + target]
                            + alpha * rec.policy[r] * rec.losses[target];
                    }
                }
                let mut best_swap = 0.0;
                for r in 0..b {
                    let row = &per_pair[r * b..(r + 1) * b];
                    best_swap += row.iter().cloned().fold(f64::INFINITY, f64::min);
                }
                out.push(on_policy - best_swap);
            }
        }
    }
    out
}
