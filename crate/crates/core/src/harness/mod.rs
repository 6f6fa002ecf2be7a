//! Experiment orchestration: intra-corpus, combined and cross-corpus runs
//! across color spaces, with CSV/JSON outputs, SVG plots and a summary
//! report.
//!
//! A run directory `<out_dir>/<run_id>/` holds `spec.toml`, `results.csv`,
//! `corpora/<id>/{manifest.csv,scan.json}` and one subdirectory per trained
//! model with manifests, `history.csv`, `metrics.json`, `roc.csv`,
//! checkpoints and plots.

mod plot;
mod report;
mod run;
mod spec;

pub use plot::{emit_plots, line_chart, scatter, Series, CGI_COLOR, REAL_COLOR};
pub use report::{check_completeness, reference_results, render_report, write_report_md, ReferenceRow};
pub use run::{
    configure_threads, embed_features, read_results, run, run_combined, run_cross, run_intra, run_tsne,
    stratified_cap, write_results, ResultRow, RunResult,
};
pub use spec::{BalanceSpec, CombineSpec, CorpusSpec, CrossSpec, EmbedSpec, ExperimentSpec, Protocol};
