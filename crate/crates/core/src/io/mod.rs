//! Datasets, synthetic data, cross-validation splits and reports.

mod dataset;
mod kfold;
pub mod report;
mod synth;

pub use dataset::{load_dataset, read_dataset, Dataset, DatasetSummary, Schema};
pub use kfold::kfold_split;
pub use synth::synth_fig2;
