//! Inclusion rules, labels and the note window.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{Duration, NaiveDate, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use super::tables::{Note, PatientRecord, Timestamp, VentEvent};
use super::CohortError;

pub const DEFAULT_CATEGORIES: [&str; 3] = ["nursing", "nursing/other", "respiratory"];
pub const DEFAULT_EXCLUSION_TAGS: [&str; 3] = ["neuromuscular", "neoplasm", "burns"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionRules {
    pub min_age: f64,
    /// Inclusion needs at least this many calendar days ...
    pub mv_min_days: usize,
    /// ... each with strictly more than this many ventilated hours.
    pub mv_hours_exclusive: f64,
    pub excluded_tags: BTreeSet<String>,
    pub exclude_organ_donors: bool,
    pub exclude_transfers: bool,
    pub window_hours: i64,
    pub note_categories: BTreeSet<String>,
}

impl Default for SelectionRules {
    fn default() -> Self {
        SelectionRules {
            min_age: 18.0,
            mv_min_days: 2,
            mv_hours_exclusive: 6.0,
            excluded_tags: DEFAULT_EXCLUSION_TAGS.iter().map(|s| s.to_string()).collect(),
            exclude_organ_donors: true,
            exclude_transfers: true,
            window_hours: 48,
            note_categories: DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl SelectionRules {
    // Negated comparisons so that NaN fails validation.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), CohortError> {
        if !(self.min_age >= 0.0) {
            return Err(CohortError::Rules(format!(
                "min_age {} must be non-negative",
                self.min_age
            )));
        }
        if self.mv_min_days == 0 || !(self.mv_hours_exclusive > 0.0) || self.window_hours <= 0 {
            return Err(CohortError::Rules("thresholds must be positive".into()));
        }
        Ok(())
    }
}

/// PMV: more than this many days ...
pub const PMV_MORE_THAN_DAYS: usize = 7;
/// ... each with at least this many ventilated hours.
pub const PMV_MIN_HOURS: f64 = 6.0;
pub const MORTALITY_WINDOW_DAYS: i64 = 90;

fn day_bounds(day: NaiveDate) -> (Timestamp, Timestamp) {
    let start = Utc.from_utc_datetime(&day.and_hms_opt(0, 0, 0).expect("midnight"));
    (start, start + Duration::days(1))
}

/// Merges overlapping or touching intervals.
fn union(events: &[(Timestamp, Timestamp)]) -> Vec<(Timestamp, Timestamp)> {
    let mut sorted: Vec<_> = events.iter().copied().filter(|(s, e)| s < e).collect();
    sorted.sort();
    let mut out: Vec<(Timestamp, Timestamp)> = Vec::with_capacity(sorted.len());
    for (s, e) in sorted {
        match out.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

fn intervals(events: &[VentEvent]) -> Vec<(Timestamp, Timestamp)> {
    events.iter().map(|v| (v.start, v.end)).collect()
}

/// Hours of ventilation falling on the UTC calendar day `day`. Overlapping
/// events are counted once.
pub fn daily_vent_hours(events: &[VentEvent], day: NaiveDate) -> f64 {
    let (lo, hi) = day_bounds(day);
    let seconds: i64 = union(&intervals(events))
        .iter()
        .map(|&(s, e)| (e.min(hi) - s.max(lo)).num_seconds().max(0))
        .sum();
    seconds as f64 / 3600.0
}

/// Ventilated hours for every calendar day touched by any event.
pub fn vent_hours_by_day(events: &[VentEvent]) -> BTreeMap<NaiveDate, f64> {
    let mut out = BTreeMap::new();
    for (s, e) in union(&intervals(events)) {
        let mut day = s.date_naive();
        while day_bounds(day).0 < e {
            let (lo, hi) = day_bounds(day);
            let secs = (e.min(hi) - s.max(lo)).num_seconds().max(0);
            *out.entry(day).or_insert(0.0) += secs as f64 / 3600.0;
            day = day.succ_opt().expect("date in range");
        }
    }
    out
}

/// Days with more than `hours` ventilated hours (strict) or at least
/// `hours` (inclusive).
pub fn qualifying_days(events: &[VentEvent], hours: f64, strict: bool) -> usize {
    vent_hours_by_day(events)
        .values()
        .filter(|&&h| if strict { h > hours } else { h >= hours })
        .count()
}

pub fn label_pmv(events: &[VentEvent]) -> bool {
    qualifying_days(events, PMV_MIN_HOURS, false) > PMV_MORE_THAN_DAYS
}

/// Death no later than 90 x 24 h after the first ICU admission.
pub fn label_mortality(first_icu_in: Timestamp, death: Option<Timestamp>) -> Result<bool, CohortError> {
    match death {
        None => Ok(false),
        Some(d) if d < first_icu_in => Err(CohortError::DeathBeforeAdmission {
            death: super::tables::format_time(d),
            admission: super::tables::format_time(first_icu_in),
        }),
        Some(d) => Ok(d - first_icu_in <= Duration::days(MORTALITY_WINDOW_DAYS)),
    }
}

/// Notes in `[vent_start, vent_start + window)` of an allowed category,
/// sorted by chart time then note id.
pub fn window_notes(notes: &[Note], vent_start: Timestamp, rules: &SelectionRules) -> Vec<Note> {
    let end = vent_start + Duration::hours(rules.window_hours);
    let mut kept: Vec<Note> = notes
        .iter()
        .filter(|n| n.chart_time >= vent_start && n.chart_time < end)
        .filter(|n| rules.note_categories.contains(&n.category.to_lowercase()))
        .cloned()
        .collect();
    kept.sort_by_key(|n| (n.chart_time, n.note_id));
    kept
}

/// Selection stages in application order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Age,
    OrganDonor,
    Transfer,
    Diagnosis,
    MechanicalVentilation,
    FirstIcuStay,
    NoNotes,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Age,
        Stage::OrganDonor,
        Stage::Transfer,
        Stage::Diagnosis,
        Stage::MechanicalVentilation,
        Stage::FirstIcuStay,
        Stage::NoNotes,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Age => "age",
            Stage::OrganDonor => "organ_donor",
            Stage::Transfer => "transfer",
            Stage::Diagnosis => "diagnosis",
            Stage::MechanicalVentilation => "mechanical_ventilation",
            Stage::FirstIcuStay => "first_icu_stay",
            Stage::NoNotes => "no_notes",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortExample {
    pub patient_id: u64,
    pub notes: Vec<Note>,
    pub pmv: bool,
    pub mortality: bool,
    pub first_stay_id: u64,
    pub vent_start: Timestamp,
    pub age: f64,
    pub sex: String,
    pub ethnicity: String,
    pub n_admissions: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExclusionTally {
    pub input: usize,
    pub included: usize,
    /// Exclusions per stage in application order.
    pub excluded: Vec<(Stage, usize)>,
}

impl ExclusionTally {
    pub fn is_balanced(&self) -> bool {
        self.input == self.included + self.excluded.iter().map(|(_, n)| n).sum::<usize>()
    }

    /// One `stage=count` line per stage, then `included=...`.
    pub fn render(&self) -> String {
        let mut s = format!("input={}\n", self.input);
        for (stage, n) in &self.excluded {
            s.push_str(&format!("excluded.{}={}\n", stage.name(), n));
        }
        s.push_str(&format!("included={}\n", self.included));
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub examples: Vec<CohortExample>,
    pub tally: ExclusionTally,
    /// Stage at which each excluded patient left, by patient id.
    pub exclusions: BTreeMap<u64, Stage>,
}

/// Decides one patient: the stage that excludes them, or the example.
pub fn assess(record: &PatientRecord, rules: &SelectionRules) -> Result<Result<CohortExample, Stage>, CohortError> {
    let p = &record.patient;
    if p.age < rules.min_age {
        return Ok(Err(Stage::Age));
    }
    if rules.exclude_organ_donors && record.admissions.iter().any(|a| a.organ_donor) {
        return Ok(Err(Stage::OrganDonor));
    }
    if rules.exclude_transfers && record.admissions.iter().any(|a| a.external_transfer) {
        return Ok(Err(Stage::Transfer));
    }
    if record.exclusion_tags.iter().any(|t| rules.excluded_tags.contains(t)) {
        return Ok(Err(Stage::Diagnosis));
    }
    if qualifying_days(&record.vent_events, rules.mv_hours_exclusive, true) < rules.mv_min_days {
        return Ok(Err(Stage::MechanicalVentilation));
    }
    let Some(first) = record.icu_stays.iter().min_by_key(|s| (s.in_time, s.stay_id)) else {
        return Ok(Err(Stage::FirstIcuStay));
    };
    let stay_events: Vec<VentEvent> = record
        .vent_events
        .iter()
        .filter(|v| v.stay_id == first.stay_id)
        .copied()
        .collect();
    let Some(vent_start) = stay_events.iter().map(|v| v.start).min() else {
        return Ok(Err(Stage::FirstIcuStay));
    };
    let notes = window_notes(&record.notes, vent_start, rules);
    if notes.is_empty() {
        return Ok(Err(Stage::NoNotes));
    }
    Ok(Ok(CohortExample {
        patient_id: p.patient_id,
        notes,
        pmv: label_pmv(&stay_events),
        mortality: label_mortality(first.in_time, p.death_time)?,
        first_stay_id: first.stay_id,
        vent_start,
        age: p.age,
        sex: p.sex.clone(),
        ethnicity: p.ethnicity.clone(),
        n_admissions: record.admissions.len(),
    }))
}

/// Applies the stages in order to every record. Output is ordered by
/// patient id.
pub fn select_cohort(records: &[PatientRecord], rules: &SelectionRules) -> Result<Selection, CohortError> {
    rules.validate()?;
    let mut sorted: Vec<&PatientRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.patient.patient_id);
    let mut counts: BTreeMap<Stage, usize> = Stage::ALL.iter().map(|&s| (s, 0)).collect();
    let mut examples = Vec::new();
    let mut exclusions = BTreeMap::new();
    for r in sorted {
        match assess(r, rules)? {
            Ok(ex) => examples.push(ex),
            Err(stage) => {
                *counts.get_mut(&stage).expect("all stages") += 1;
                exclusions.insert(r.patient.patient_id, stage);
            }
        }
    }
    let tally = ExclusionTally {
        input: records.len(),
        included: examples.len(),
        excluded: counts.into_iter().collect(),
    };
    Ok(Selection {
        examples,
        tally,
        exclusions,
    })
}
