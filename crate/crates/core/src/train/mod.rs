//! Domain-adversarial training, its losses and source statistics.

mod dat;
pub mod losses;
mod optim;
mod stats;

pub use dat::{
    domain_index, sample_gradients, split_macro_f1, train_dat, DatConfig, LossWeights, SampleGradients, TrainLogEntry,
    TrainOutcome,
};
pub use losses::{
    activity_loss, ccc_loss, cross_entropy, domain_loss, lambda_schedule, one_hot, total_loss, DEFAULT_PROB_EPS,
};
pub use optim::{sgd_step, Adam};
pub use stats::{compute_source_statistics, statistics_over, LayerStats, SourceStatistics};
pub(crate) use stats::first_row;
