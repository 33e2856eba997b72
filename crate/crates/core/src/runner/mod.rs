//! Configuration, training, checkpoints and experiment orchestration.

pub mod config;
pub mod experiments;
mod plot;
pub mod train;

pub use config::{DataSource, ExperimentConfig, TrainConfig};
pub use experiments::{ablate, ablation_configs, ablation_table, parse_sweep_csv, report, sweep, sweep_csv, AblationRow, SweepPoint};
pub use plot::{line_plot, Series};
pub use train::{fit, load_data, train, Checkpoint, EpochMetrics, RunOutput, Trainer};
