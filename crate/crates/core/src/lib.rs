//! Optimal mean-reversion trading with a stop-loss on an Ornstein-Uhlenbeck
//! log-price spread: special functions, exit-time analytics, band and
//! leverage optimisation, calibration, simulation and the end-to-end run.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod numeric;
pub mod ou_analytics;
pub mod pipeline;
pub mod report;
pub mod simulation;
pub mod specialfn;
pub mod strategy;
