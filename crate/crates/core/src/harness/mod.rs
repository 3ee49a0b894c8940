//! Dataset tooling and experiment drivers behind the command-line interface.

pub mod cli;
pub mod dataset;
pub mod degrade;
pub mod downstream;
pub mod experiment;
pub mod manifest;
pub mod synth;

pub use dataset::{Dataset, DatasetManifest, Split};
pub use degrade::{degrade, DegradeMode};
pub use experiment::{ablation_sweep, augmentation_experiment, AugmentConfig, AugmentReport, SweepGrid};
pub use synth::{synth_dataset, synth_generate, SynthSpec};
