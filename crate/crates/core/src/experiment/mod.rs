//! Configured experiments: runs over seeds, report directories, the ablation
//! matrix and parameter accounting.

mod ablate;
mod config;
mod report;
mod run;

pub use ablate::{
    ablation_cells, comparison_table, run_ablation, AblationCell, AblationReport, MatrixRow, Variant,
};
pub use config::{ExperimentConfig, Method, ModelSection};
pub use report::{
    accounting, accounting_table, read_csv, run_experiment, seed_csv_path, summarize, write_csv,
    ClientSummary, ExperimentReport, MeanStd, Metadata, MethodAccounting, Summary,
};
pub use run::{build_clients, run_seed, run_seeds, CsvRow, SeedRun, CSV_COLUMNS};
