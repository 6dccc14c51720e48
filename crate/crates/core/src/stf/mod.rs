//! Straight-through factorizer and the toy network used to exercise it.

mod adam;
mod data;
mod layer;
mod schedule;
mod toy;

pub use adam::{AdamConfig, AdamState};
pub use data::{Sample, SyntheticTask};
pub use layer::{dense_product, dictionary_gradient, DictionaryStep, StfLayer};
pub use schedule::{
    run_after_dense, run_schedule, train_dense, write_metrics, write_metrics_csv, MetricsRow,
    Schedule, TrainConfig, TrainOutcome,
};
pub use toy::{argmax, cross_entropy, ForwardCache, ToyDims, ToyModel, ToyParams, Weight};
