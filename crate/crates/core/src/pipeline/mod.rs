//! Experiment orchestration on top of the model components.

pub mod attention;
pub mod config;
pub mod dataset;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod split;
pub mod synth;
pub mod train;

pub use attention::{channel_attention, seed62_layout, AttentionMap, Electrode};
pub use config::{Ablation, DataConfig, ExperimentConfig, FusionKind, ModelConfig, TrainConfig, PRESETS};
pub use dataset::{load_dataset, Dataset, DatasetSample, Manifest, TrialEntry};
pub use experiment::{
    ablation_table, evaluate, load_data, run_ablation, run_experiment, train_arm, AblationRow, RunOutcome,
};
pub use metrics::Metrics;
pub use model::{audit_name, ModelSpec, MoodReader, Prepared, ShapeTrace};
pub use split::{split, Split, SplitBy};
pub use synth::{synth_generate, write_synth_corpus, SynthSpec};
pub use train::{fit, EpochRecord, FitData, TrainReport};
