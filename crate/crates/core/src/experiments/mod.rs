//! Sweeps over training length, model size, norm kind and algorithm, with
//! resumable CSV records and SVG figures.

mod config;
mod plots;
mod records;
mod sweep;

pub use config::{
    fingerprint, Cell, DataConfig, DataSource, DiversityConfig, EncoderConfig, EnergySource, ExperimentConfig,
    OutputConfig, StopSignal, SweepConfig,
};
pub use plots::{emit_plots, render_plots, PlotKind};
pub use records::{ExperimentRecord, RecordSet};
pub use sweep::{
    early_stop, measure_diversity, measurement_sample, run_sweep, stats_csv, CellFailure, EarlyStop, SweepOutcome,
    FAILURES_FILE, RECORDS_FILE, STATS_DIR,
};
