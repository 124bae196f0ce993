//! Experiment orchestration: configuration, the five CLI modes, and
//! plot-ready data export.
//!
//! Every run is fully determined by `(config, seed)`. Data files are plain
//! ASCII, two whitespace-separated columns per line, no header, newline
//! terminated. Measured wall times go to standard output only, so the
//! emitted files are byte-identical across reruns.

mod config;
mod modes;
mod output;

pub use config::{default_sigma_unit, ExperimentConfig, GridAxis, SIGMA_UNIT_SCALE};
pub use modes::{
    bench_selection, run_grid, run_montecarlo, run_rht_compare, run_single, BenchRow,
    GridCellSummary, McRow, McSummary, RhtSummary, RunRecord, SingleSummary,
};
pub use output::write_columns;
