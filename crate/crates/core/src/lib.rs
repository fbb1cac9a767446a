//! Coordination of connected automated vehicles at a two-road merge in
//! mixed traffic.
//!
//! CAVs plan energy-optimal cubic trajectories with the earliest exit time
//! that keeps lateral and rear-end gaps. Human-driven vehicles are modeled
//! with a Newell car-following law whose time shift is learned online by
//! Bayesian linear regression; the resulting Gaussian predictions enter the
//! planner as tightened chance constraints, and stale predictions trigger
//! retraining and selective replanning.

pub mod blr;
pub mod experiment;
pub mod humanmodel;
pub mod planner;
pub mod polytraj;
pub mod replanner;
pub mod sim;
pub mod special;
pub mod uncertainty;
