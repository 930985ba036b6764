//! Few-shot episodic training and evaluation.

pub mod data;
pub mod metrics;
pub mod train;

pub use data::{sample_episode, synth_dataset, Dataset, Episode, Sample, SynthSpec, TaskType};
pub use metrics::{average_precision, mean_average_precision, summarize, DistributionSummary};
pub use train::{
    batch_objective, evaluate, infer, method_gradcheck, multi_run, run_cell, sample_episode_for, train, CellOutcome,
    EvalReport, LossKind, MethodGradCheck, MultiRunResult, OptimizerKind, RunRecord, TrainConfig, TrainReport,
};
