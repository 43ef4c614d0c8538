//! Decentralized V-learning and optimistic Nash Q-learning for tabular
//! episodic Markov games, with exact evaluation oracles that certify the
//! learned policies' equilibrium gaps.
//!
//! The crate splits into:
//!
//! - [`game`]: the tabular Markov-game model, trajectories, policies, and
//!   the deterministic seeded-randomness contract;
//! - [`linprog`]: dense simplex, matrix-game minimax, and the CCE subroutine;
//! - [`bandit`]: recency-weighted adversarial bandit learners and a regret
//!   auditor;
//! - [`vlearn`]: the decentralized V-learning trainer, its monotone variant,
//!   and training diagnostics;
//! - [`nashq`]: optimistic Nash Q-learning for two-player zero-sum games;
//! - [`certified`]: visit logs, execution of the certified output policies,
//!   and the monotone Markov policy extraction;
//! - [`evalx`]: exact backward-induction values, best responses, certified
//!   exploitability and swap-deviation upper bounds, and Monte-Carlo checks;
//! - [`envgen`]: seeded random game generators and the deterministic
//!   parity-encoding hard instance.

pub mod bandit;
pub mod certified;
pub mod envgen;
pub mod evalx;
pub mod game;
pub mod linprog;
pub mod nashq;
pub mod vlearn;
