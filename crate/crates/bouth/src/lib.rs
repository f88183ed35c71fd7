//! Bottom-up testing of tree-structured hypotheses with false assignment
//! rate (FAR) control.
//!
//! Given p-values at the leaves of a branching tree (for example OTUs in a
//! taxonomy), the procedures here test level by level from the leaves
//! upward: each level runs a step-down test with ascending thresholds, the
//! surviving p-values are truncation-adjusted and Stouffer-aggregated into
//! the parents, and a node whose children are all detected is detected by
//! propagation without a test of its own. Detection-multiplicity weights
//! keep the FAR controlled when one test decides several nodes, with
//! least-favorable weights covering incomplete trees and a two-stage
//! variant splitting the budget between the leaf level and the rest.
//!
//! The crate also ships the comparison baselines (BH over various p-value
//! assignments, top-down family testing), the error-rate and accuracy
//! metrics, and a seeded Monte-Carlo harness.

pub mod baselines;
pub mod bottomup;
pub mod error;
pub mod io;
pub mod metrics;
pub mod sim;
pub mod stats;
pub mod tree;
pub mod weights;

pub use baselines::{bh_stepup, conjunction_method, naive_method, top_down_method};
pub use bottomup::{run_one_stage, run_two_stage, Mode, NodeResult, ProcedureConfig, RunOutcome};
pub use error::{Error, Result};
pub use metrics::{error_rates, pinpoint_rate, weighted_jaccard, TruthModel};
pub use sim::{run_scenario, EffectModel, Method, Pattern, SimScenario, TreeKind};
pub use tree::{LeafPValues, NodeId, TaxTree};
