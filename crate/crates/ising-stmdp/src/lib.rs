//! Controlled low-temperature Ising dynamics on a torus, the auxiliary
//! rectangle MDP obtained from its robust configurations, exact solvers for
//! that MDP, and an experiment harness for lifted policies.

pub mod auxmdp;
pub mod cli;
pub mod dynamics;
pub mod lattice;
pub mod lifting;
pub mod mdpsolver;
pub mod rng;
