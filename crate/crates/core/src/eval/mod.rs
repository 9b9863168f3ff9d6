//! Evaluation and experiment harnesses.

pub mod experiments;
pub mod report;

pub use experiments::{
    compare_training_orders, convergence_curves, run_ablation, run_cell, sweep_reasoning_steps, CellCache,
    ConvergenceReport, ExperimentSpec, ExperimentTable,
};
pub use report::{evaluate, evaluate_pairs, EvalRecord, EvalReport};
