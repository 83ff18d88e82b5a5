//! Bilevel meta-reinforcement learning on finite task distributions.
//!
//! The toolkit learns a meta-policy over a distribution of tabular MDP tasks.
//! Each task adapts the meta-policy by a one-shot regularized policy
//! optimization (three distance metrics: forward KL, reverse KL, squared
//! Euclidean), the meta-parameter is updated with exact implicit-differentiation
//! hypergradients, and the resulting task-expected optimality gap is checked
//! against closed-form upper bounds.
//!
//! Module layout:
//!
//! * [`mdp`] -- exact dynamic programming and Monte-Carlo estimators for
//!   finite MDPs (values, advantages, discounted visitation distributions).
//! * [`policy`] -- softmax policies (tabular and linear-feature) and the
//!   policy distance metrics.
//! * [`adapt`] -- the one-shot within-task solvers, the sampled practical
//!   surrogate, and the one-step policy-gradient baseline.
//! * [`hypergrad`] -- implicit-differentiation hypergradients of the
//!   meta-objective plus a finite-difference oracle.
//! * [`meta`] -- the meta-training loop and theorem-derived step sizes.
//! * [`tasks`] -- seeded Frozen-Lake-style gridworld task generation.
//! * [`analysis`] -- optimal policies, task variance, optimality gaps,
//!   theoretical bound values, and meta-test curves.
//!
//! All solvers are pure functions of immutable inputs and are deterministic
//! given their seeds.

pub mod adapt;
pub mod analysis;
pub mod error;
pub mod hypergrad;
pub mod linalg;
pub mod mdp;
pub mod meta;
pub mod policy;
pub mod tasks;

pub use error::{Error, Result};
