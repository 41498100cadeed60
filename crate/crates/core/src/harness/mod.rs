//! End-to-end orchestration: configuration, the staged pipeline, reports
//! and parameter sweeps.

mod config;
mod report;
mod run;
mod sweep;

pub use config::{validate_config, ExperimentConfig, Mode};
pub use report::{
    accuracy_csv, emit_report, load_model, save_model, weights_csv, write_atomic, ClientRecord, ClusteringRecord,
    ErrorRecord, ModelContainer, RunReport, WeightTrajectory,
};
pub use run::{
    bilevel_config, build_teachers, cluster_clients, distill, persist, personalize_clients, prepare_data,
    run_experiment, run_pipeline, synthesize_all, train_clients, Access, RunOutcome, ShardStore, Stage,
};
pub use sweep::{pivot_table, sweep, sweep_csv, SweepGrid, SweepRow};
