//! Multitask reinforcement learning with myopic exploration: exact tabular
//! dynamic programming, ε-greedy policy sharing, fitted Q-iteration, exact
//! exploration-gap computation, linear MDPs and finite-horizon LQR.

pub mod diversity;
pub mod engine;
pub mod error;
pub mod exploration;
pub mod linalg;
pub mod linear;
pub mod lqr;
pub mod mdp;
pub mod oracle;
pub mod rng;

pub use error::{Error, Result};
pub use exploration::{
    default_schedule, eps_greedy, mixture, ExplorationSchedule, Mixture, MixturePolicy, ScheduleVariant,
};
pub use mdp::{evaluate_policy, occupancy, optimal_values, MarkovPolicy, QFunction, TabularMdp, TabularPolicy};
