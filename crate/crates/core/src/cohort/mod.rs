//! EHR-style tables, cohort selection, labels, summary statistics and the
//! synthetic data generator.

mod rules;
mod stats;
mod synth;
mod tables;

pub use rules::{
    assess, daily_vent_hours, label_mortality, label_pmv, qualifying_days, select_cohort, vent_hours_by_day,
    window_notes, CohortExample, ExclusionTally, Selection, SelectionRules, Stage, DEFAULT_CATEGORIES,
    DEFAULT_EXCLUSION_TAGS, MORTALITY_WINDOW_DAYS, PMV_MIN_HOURS, PMV_MORE_THAN_DAYS,
};
pub use stats::{cohort_stats, CohortStats, CountPct, MeanSd, StatsColumn, ETHNICITY_GROUPS};
pub use synth::{
    keyword_sentinel, synth_generate, temporal_sentinels, ManifestEntry, SignalKind, SynthConfig, SynthOutput,
    MANIFEST_FILE,
};
pub use tables::{
    format_time, parse_time, Admission, Diagnosis, IcuStay, Note, Patient, PatientRecord, Tables, Timestamp, VentEvent,
    ADMISSIONS_CSV, DIAGNOSES_CSV, ICUSTAYS_CSV, NOTES_CSV, PATIENTS_CSV, VENTEVENTS_CSV,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Prediction target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Pmv,
    Mortality,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Pmv, Task::Mortality];

    pub fn name(self) -> &'static str {
        match self {
            Task::Pmv => "pmv",
            Task::Mortality => "mortality",
        }
    }

    pub fn label(self, example: &CohortExample) -> bool {
        match self {
            Task::Pmv => example.pmv,
            Task::Mortality => example.mortality,
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Task {
    type Err = CohortError;
    fn from_str(s: &str) -> Result<Self, CohortError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pmv" => Ok(Task::Pmv),
            "mortality" => Ok(Task::Mortality),
            other => Err(CohortError::UnknownTask(other.to_string())),
        }
    }
}

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("missing table {0}")]
    MissingFile(String),
    #[error("{file}: header {found:?}, expected {expected:?}")]
    BadHeader {
        file: &'static str,
        expected: String,
        found: String,
    },
    #[error("{file} line {line}: {reason}")]
    MalformedRow {
        file: &'static str,
        line: u64,
        reason: String,
    },
    #[error("{file} line {line}: {field} is not an ISO-8601 UTC timestamp: {value:?}")]
    BadTimestamp {
        file: &'static str,
        line: u64,
        field: String,
        value: String,
    },
    #[error("{file}: {reason}")]
    Csv { file: &'static str, reason: String },
    #[error("reference: {0}")]
    Reference(String),
    #[error("death at {death} precedes first ICU admission at {admission}")]
    DeathBeforeAdmission { death: String, admission: String },
    #[error("selection rules: {0}")]
    Rules(String),
    #[error("cohort is empty")]
    EmptyCohort,
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("synthetic data: {0}")]
    Synth(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
