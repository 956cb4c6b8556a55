//! Scenario runner, attack suite, workloads and the fixtures they share.

pub mod bench;
pub mod fixtures;
pub mod pentest;
pub mod scenario;

pub use bench::{bench, BenchReport, BenchSpec, Workload};
pub use pentest::{gate_sweep, pentest_suite, PentestResult, SweepReport};
pub use scenario::{run_scenario, ExpectationMismatch, Report, Scenario, ScenarioError};
