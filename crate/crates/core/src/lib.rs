//! Value-function decomposition for cooperative multi-agent Q-learning.
//!
//! Includes VDN, QMIX and QPLEX baselines plus the QFIX and Q+FIX fixing
//! layers, together with brute-force checkers for the individual-global-max
//! property and a small reverse-mode autodiff engine that drives it all.

pub mod agents;
pub mod autodiff;
pub mod cli;
pub mod envs;
pub mod error;
pub mod joint;
pub mod mixers;
pub mod nn;
pub mod par;
pub mod seed;
pub mod training;
pub mod verification;

pub use error::{Error, Result};
