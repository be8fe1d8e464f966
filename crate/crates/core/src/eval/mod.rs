//! Scoring, ablation grids and run reports.

mod ablate;
mod bleu;
mod report;
mod translate;

pub use ablate::{ablate, expand, mean_stdev, AblationRow, AblationTable, ExperimentSpec, Grid, GridPoint};
pub use bleu::{bleu, bleu_report, ids_to_string, BleuReport, BleuStats};
pub use report::{line_chart, report};
pub use translate::{evaluate_cascade, evaluate_direct, TestReport};
