//! Planning, simulation and cost estimation for parallel process spawning in
//! malleable jobs.
//!
//! - [`cluster`]: node inventory, resize requests and allocation vectors.
//! - [`planner`]: hypercube and iterative diffusive spawn schedules.
//! - [`sim`]: seeded discrete-event model of the post-spawn protocol.
//! - [`cost`]: analytic reconfiguration cost model.
//! - [`cli`]: the `espsim` command line.

pub mod cli;
pub mod cluster;
pub mod cost;
pub mod planner;
pub mod sim;

pub use cluster::{AllocationVectors, ClusterConfig, ClusterError, ReconfigRequest, ResizeMethod, Strategy};
pub use cost::{CostError, CostParams, CostReport, Method};
pub use planner::{PlanError, SpawnEvent, SpawnSchedule};
pub use sim::{SimError, SimOutcome};
