//! Run configuration, synthetic data, the preprocessing-grid runner and the
//! command-line interface.

pub mod cli;
pub mod config;
pub mod grid;
pub mod synth;

pub use config::{ModelKind, OtuBlock, PredictorSet, RfSearch, RunConfig};
pub use grid::{grid_cells, run_cell, run_grid, write_grid_output, Cell, GridOutput, Inputs, ResultRecord};
pub use synth::{alpha_diversity, synth_generate, SynthData, SynthSpec};
