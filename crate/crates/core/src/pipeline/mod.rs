//! End-to-end orchestration: per-task analysis, sweeps, reports and plot
//! tables.

pub mod analysis;
pub mod config;
pub mod report;
pub mod sweep;
pub mod tables;

pub use analysis::{run_analysis, FeatureSource};
pub use config::{RunConfig, SaeSettings, SweepGrid, TaskPair, TranslatorMethod, TranslatorSettings};
pub use report::{AnalysisReport, REPORT_FILE, SWEEP_REPORT_FILE};
pub use sweep::{run_sweep, SweepReport};
pub use tables::{emit_plot_tables, emit_sweep_tables, write_analysis_outputs, write_sweep_outputs};
