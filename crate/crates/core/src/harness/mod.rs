//! Splits, metrics and the multi-seed experiment runner.

mod experiment;
mod metrics;
mod split;

pub use experiment::{
    embed_cohort, holdout_note_ids, labeled_notes, method_name, patient_sequences, pretraining_corpus, render_report,
    run_experiment, run_experiment_on, ExperimentError, ExperimentOutcome, MetricsFile, MetricsReport,
    CONFIG_SNAPSHOT_FILE, METRICS_FILE, REPORT_FILE,
};
pub use metrics::{auroc, early_stop, format_mean_sd, mean_sd, EarlyStopping, StopSignal};
pub use split::{holdout_ids, split, Split, SplitSpec, MIN_PATIENTS};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("score {0} is not finite")]
    NonFiniteScore(f64),
    #[error("AUROC undefined: {positives} positives and {negatives} negatives")]
    UndefinedMetric { positives: u64, negatives: u64 },
    #[error("early stopping needs at least one epoch")]
    EmptyTrack,
    #[error("split: {0}")]
    BadSplit(String),
    #[error("{found} patients; at least {needed} are needed to populate every split")]
    TooFewPatients { found: usize, needed: usize },
}
