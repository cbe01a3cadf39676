//! Multi-fidelity Bayesian optimization for mixed continuous/discrete design
//! spaces. A cheap-fidelity Parzen-estimator loop explores the space while a
//! Gaussian-process loop spends a smaller expensive-fidelity budget, and the
//! two share information through a cross-fidelity covariance model.

pub mod cli;
pub mod config;
pub mod coupling;
pub mod evaluator;
pub mod gp;
pub mod objective;
pub mod orchestrator;
pub mod par;
pub mod space;
pub mod stats;
pub mod tpe;

pub use coupling::{estimate_rho, transfer_update, CoupledGp};
pub use evaluator::{BuiltinEvaluator, EvalFailure, EvalRequest, Evaluator, Fidelity, SubprocessEvaluator};
pub use gp::{expected_improvement, fit_gp, GpModel, KernelHyper};
pub use objective::{effective_fom, FomResult, FomSpec, MetricSet};
pub use orchestrator::{
    best_so_far_traces, incumbent, run_coupled, run_fusion_baseline, run_plain_baseline,
    Observation, RunConfig, RunResult,
};
pub use space::{Configuration, ParameterSpace, ParameterSpec};
pub use tpe::propose_next;
