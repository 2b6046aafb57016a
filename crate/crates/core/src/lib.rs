//! Conformal latency bounds for learned query optimizers.
//!
//! Split conformal prediction over plan-construction traces, adaptive bounds
//! under distribution shift, STL runtime verification with fallback, and
//! bound-guided plan search, plus a synthetic workload simulator and an
//! empirical-coverage harness.

pub mod adaptive;
pub mod cli;
pub mod cp;
pub mod harness;
pub mod search;
pub mod sim;
pub mod stl;
pub mod trace;
