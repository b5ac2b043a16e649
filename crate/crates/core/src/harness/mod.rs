//! Evaluation protocols, metrics, probes, latency benchmarks and the
//! experiment runner.

mod bench;
mod evaluate;
mod experiment;
mod metrics;
mod probe;

pub use bench::{bench_inference, time_predictors, BenchConfig, LatencyStats};
pub use evaluate::{
    evaluate, Observation, Predictor, RunMetrics, SampleRecord, SequenceMode, SequenceSpec, ROLLING_WINDOW,
};
pub use experiment::{
    config_hash, run_experiment, AblationGrid, DataConfig, ExperimentConfig, ExperimentSummary, FileDomain, Manifest, ModelEntry,
    Placement, ResultRow, SyntheticDomain,
};
pub use metrics::{accuracy, macro_f1, rolling_f1};
pub use probe::{LinearProbe, ProbeConfig};
