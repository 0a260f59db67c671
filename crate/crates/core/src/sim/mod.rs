//! Round orchestration, convergence detection and experiment output.
//!
//! A round runs mobility, clustering, local training, the CH security round
//! and aggregation, the EPC security round and global aggregation, then
//! broadcasts the global model.

pub mod config;
pub mod convergence;
pub mod engine;
pub mod experiment;
pub mod report;

pub use config::{AttackMode, DefenseArm, ExperimentConfig, TopologyArm, Weighting};
pub use convergence::{detect_convergence, ConvergenceResult};
pub use engine::{roles_for, DetectionStats, RoundMetrics, Simulation, Traces};
pub use experiment::{
    arm_config, parse_summary, run_experiment, run_grid, write_grid, write_run, GridResult, GridSpec, RunResult,
    SummaryRow, ARMS,
};
pub use report::{compare_arms, TrendReport, Verdict};
