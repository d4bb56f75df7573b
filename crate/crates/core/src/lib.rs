//! Covariance-steering stochastic MPC for linear time-varying systems with
//! polytopic parameter uncertainty and Gaussian disturbances.
//!
//! The crate synthesizes terminal ingredients offline (a terminal covariance
//! bound from a vertex-LMI semidefinite program and a robust controlled
//! invariant terminal mean set), solves the receding-horizon conic program
//! online, and runs closed-loop Monte Carlo studies.

pub mod conic;
pub mod linalg;
pub mod lp;
pub mod polytope;
pub mod sim;
pub mod smpc;
pub mod sysmodel;
pub mod terminal;
pub mod vehicle;
