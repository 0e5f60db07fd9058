//! CSV tables and their per-patient assembly.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use super::CohortError;

pub const PATIENTS_CSV: &str = "patients.csv";
pub const ADMISSIONS_CSV: &str = "admissions.csv";
pub const ICUSTAYS_CSV: &str = "icustays.csv";
pub const VENTEVENTS_CSV: &str = "ventevents.csv";
pub const DIAGNOSES_CSV: &str = "diagnoses.csv";
pub const NOTES_CSV: &str = "notes.csv";

const PATIENTS_HEADER: &[&str] = &["patient_id", "age", "sex", "ethnicity", "death_time"];
const ADMISSIONS_HEADER: &[&str] = &[
    "admission_id",
    "patient_id",
    "admit_time",
    "discharge_time",
    "organ_donor",
    "external_transfer",
];
const ICUSTAYS_HEADER: &[&str] = &["stay_id", "admission_id", "in_time", "out_time"];
const VENTEVENTS_HEADER: &[&str] = &["patient_id", "stay_id", "start_time", "end_time"];
const DIAGNOSES_HEADER: &[&str] = &["patient_id", "exclusion_tag"];
const NOTES_HEADER: &[&str] = &["note_id", "patient_id", "chart_time", "category", "text"];

pub type Timestamp = DateTime<Utc>;

/// `2150-01-01T06:00:00Z`.
pub fn format_time(t: Timestamp) -> String {
    t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

pub fn parse_time(s: &str) -> Option<Timestamp> {
    DateTime::parse_from_rfc3339(s.trim())
        .ok()
        .map(|t| t.with_timezone(&Utc))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patient {
    pub patient_id: u64,
    pub age: f64,
    pub sex: String,
    pub ethnicity: String,
    pub death_time: Option<Timestamp>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Admission {
    pub admission_id: u64,
    pub patient_id: u64,
    pub admit_time: Timestamp,
    pub discharge_time: Timestamp,
    pub organ_donor: bool,
    pub external_transfer: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IcuStay {
    pub stay_id: u64,
    pub admission_id: u64,
    pub in_time: Timestamp,
    pub out_time: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VentEvent {
    pub patient_id: u64,
    pub stay_id: u64,
    pub start: Timestamp,
    pub end: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnosis {
    pub patient_id: u64,
    pub exclusion_tag: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Note {
    pub note_id: u64,
    pub patient_id: u64,
    pub chart_time: Timestamp,
    pub category: String,
    pub text: String,
}

/// All six tables as loaded.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Tables {
    pub patients: Vec<Patient>,
    pub admissions: Vec<Admission>,
    pub icustays: Vec<IcuStay>,
    pub ventevents: Vec<VentEvent>,
    pub diagnoses: Vec<Diagnosis>,
    pub notes: Vec<Note>,
}

/// One patient with everything that refers to them.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub patient: Patient,
    pub admissions: Vec<Admission>,
    pub icu_stays: Vec<IcuStay>,
    pub vent_events: Vec<VentEvent>,
    pub exclusion_tags: BTreeSet<String>,
    pub notes: Vec<Note>,
}

struct Row<'a> {
    file: &'static str,
    line: u64,
    record: &'a csv::StringRecord,
}

impl Row<'_> {
    fn err(&self, reason: impl Into<String>) -> CohortError {
        CohortError::MalformedRow {
            file: self.file,
            line: self.line,
            reason: reason.into(),
        }
    }

    fn field(&self, i: usize) -> &str {
        self.record.get(i).unwrap_or("")
    }

    fn u64(&self, i: usize, name: &str) -> Result<u64, CohortError> {
        self.field(i).trim().parse().map_err(|_| {
            self.err(format!(
                "{name}: expected a non-negative integer, got {:?}",
                self.field(i)
            ))
        })
    }

    fn time(&self, i: usize, name: &str) -> Result<Timestamp, CohortError> {
        parse_time(self.field(i)).ok_or_else(|| CohortError::BadTimestamp {
            file: self.file,
            line: self.line,
            field: name.to_string(),
            value: self.field(i).to_string(),
        })
    }

    fn flag(&self, i: usize, name: &str) -> Result<bool, CohortError> {
        match self.field(i).trim() {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(self.err(format!("{name}: expected 0 or 1, got {other:?}"))),
        }
    }

    fn interval(&self, a: Timestamp, b: Timestamp, what: &str) -> Result<(), CohortError> {
        if a < b {
            Ok(())
        } else {
            Err(self.err(format!(
                "{what}: end {} is not after start {}",
                format_time(b),
                format_time(a)
            )))
        }
    }
}

fn read_table<T>(
    dir: &Path,
    file: &'static str,
    header: &[&str],
    mut parse: impl FnMut(&Row) -> Result<T, CohortError>,
) -> Result<Vec<T>, CohortError> {
    let path = dir.join(file);
    if !path.exists() {
        return Err(CohortError::MissingFile(path.display().to_string()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(&path)
        .map_err(|e| CohortError::Csv {
            file,
            reason: e.to_string(),
        })?;
    let found: Vec<String> = reader
        .headers()
        .map_err(|e| CohortError::Csv {
            file,
            reason: e.to_string(),
        })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if found != header {
        return Err(CohortError::BadHeader {
            file,
            expected: header.join(","),
            found: found.join(","),
        });
    }
    let mut out = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        let line = reader.position().line() + 1;
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {
                let line = record.position().map_or(line, |p| p.line());
                out.push(parse(&Row {
                    file,
                    line,
                    record: &record,
                })?);
            }
            Err(e) => {
                let line = e.position().map_or(line, |p| p.line());
                return Err(CohortError::MalformedRow {
                    file,
                    line,
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok(out)
}

impl Tables {
    /// Reads the six CSV files from `dir`.
    pub fn load(dir: &Path) -> Result<Self, CohortError> {
        let patients = read_table(dir, PATIENTS_CSV, PATIENTS_HEADER, |r| {
            let age: f64 = r
                .field(1)
                .trim()
                .parse()
                .map_err(|_| r.err(format!("age: not a number: {:?}", r.field(1))))?;
            if !(age.is_finite() && age >= 0.0) {
                return Err(r.err(format!("age {age} must be non-negative")));
            }
            let death_time = match r.field(4).trim() {
                "" => None,
                _ => Some(r.time(4, "death_time")?),
            };
            Ok(Patient {
                patient_id: r.u64(0, "patient_id")?,
                age,
                sex: r.field(2).trim().to_string(),
                ethnicity: r.field(3).trim().to_string(),
                death_time,
            })
        })?;
        let admissions = read_table(dir, ADMISSIONS_CSV, ADMISSIONS_HEADER, |r| {
            let a = Admission {
                admission_id: r.u64(0, "admission_id")?,
                patient_id: r.u64(1, "patient_id")?,
                admit_time: r.time(2, "admit_time")?,
                discharge_time: r.time(3, "discharge_time")?,
                organ_donor: r.flag(4, "organ_donor")?,
                external_transfer: r.flag(5, "external_transfer")?,
            };
            r.interval(a.admit_time, a.discharge_time, "admission")?;
            Ok(a)
        })?;
        let icustays = read_table(dir, ICUSTAYS_CSV, ICUSTAYS_HEADER, |r| {
            let s = IcuStay {
                stay_id: r.u64(0, "stay_id")?,
                admission_id: r.u64(1, "admission_id")?,
                in_time: r.time(2, "in_time")?,
                out_time: r.time(3, "out_time")?,
            };
            r.interval(s.in_time, s.out_time, "icu stay")?;
            Ok(s)
        })?;
        let ventevents = read_table(dir, VENTEVENTS_CSV, VENTEVENTS_HEADER, |r| {
            let v = VentEvent {
                patient_id: r.u64(0, "patient_id")?,
                stay_id: r.u64(1, "stay_id")?,
                start: r.time(2, "start_time")?,
                end: r.time(3, "end_time")?,
            };
            r.interval(v.start, v.end, "ventilation event")?;
            Ok(v)
        })?;
        let diagnoses = read_table(dir, DIAGNOSES_CSV, DIAGNOSES_HEADER, |r| {
            Ok(Diagnosis {
                patient_id: r.u64(0, "patient_id")?,
                exclusion_tag: r.field(1).trim().to_string(),
            })
        })?;
        let notes = read_table(dir, NOTES_CSV, NOTES_HEADER, |r| {
            Ok(Note {
                note_id: r.u64(0, "note_id")?,
                patient_id: r.u64(1, "patient_id")?,
                chart_time: r.time(2, "chart_time")?,
                category: r.field(3).trim().to_string(),
                text: r.field(4).to_string(),
            })
        })?;
        let tables = Tables {
            patients,
            admissions,
            icustays,
            ventevents,
            diagnoses,
            notes,
        };
        tables.check_references()?;
        Ok(tables)
    }

    fn check_references(&self) -> Result<(), CohortError> {
        let mut patients = BTreeSet::new();
        for p in &self.patients {
            if !patients.insert(p.patient_id) {
                return Err(CohortError::Reference(format!("duplicate patient_id {}", p.patient_id)));
            }
        }
        let mut admissions = BTreeMap::new();
        for a in &self.admissions {
            if !patients.contains(&a.patient_id) {
                return Err(CohortError::Reference(format!(
                    "admission {} refers to unknown patient {}",
                    a.admission_id, a.patient_id
                )));
            }
            if admissions.insert(a.admission_id, a.patient_id).is_some() {
                return Err(CohortError::Reference(format!(
                    "duplicate admission_id {}",
                    a.admission_id
                )));
            }
        }
        let mut stays = BTreeMap::new();
        for s in &self.icustays {
            let Some(&pid) = admissions.get(&s.admission_id) else {
                return Err(CohortError::Reference(format!(
                    "icu stay {} refers to unknown admission {}",
                    s.stay_id, s.admission_id
                )));
            };
            if stays.insert(s.stay_id, pid).is_some() {
                return Err(CohortError::Reference(format!("duplicate stay_id {}", s.stay_id)));
            }
        }
        for v in &self.ventevents {
            if stays.get(&v.stay_id) != Some(&v.patient_id) {
                return Err(CohortError::Reference(format!(
                    "ventilation event of patient {} refers to stay {} of another or no patient",
                    v.patient_id, v.stay_id
                )));
            }
        }
        for d in &self.diagnoses {
            if !patients.contains(&d.patient_id) {
                return Err(CohortError::Reference(format!(
                    "diagnosis refers to unknown patient {}",
                    d.patient_id
                )));
            }
        }
        let mut notes = BTreeSet::new();
        for n in &self.notes {
            if !patients.contains(&n.patient_id) {
                return Err(CohortError::Reference(format!(
                    "note {} refers to unknown patient {}",
                    n.note_id, n.patient_id
                )));
            }
            if !notes.insert(n.note_id) {
                return Err(CohortError::Reference(format!("duplicate note_id {}", n.note_id)));
            }
        }
        Ok(())
    }

    /// `(file name, data rows)` for each table.
    pub fn row_counts(&self) -> Vec<(&'static str, usize)> {
        vec![
            (PATIENTS_CSV, self.patients.len()),
            (ADMISSIONS_CSV, self.admissions.len()),
            (ICUSTAYS_CSV, self.icustays.len()),
            (VENTEVENTS_CSV, self.ventevents.len()),
            (DIAGNOSES_CSV, self.diagnoses.len()),
            (NOTES_CSV, self.notes.len()),
        ]
    }

    /// Groups rows by patient, ordered by patient id. Within a patient,
    /// rows keep file order.
    pub fn records(&self) -> Vec<PatientRecord> {
        let mut by_id: BTreeMap<u64, PatientRecord> = self
            .patients
            .iter()
            .map(|p| {
                (
                    p.patient_id,
                    PatientRecord {
                        patient: p.clone(),
                        admissions: Vec::new(),
                        icu_stays: Vec::new(),
                        vent_events: Vec::new(),
                        exclusion_tags: BTreeSet::new(),
                        notes: Vec::new(),
                    },
                )
            })
            .collect();
        let mut admission_owner = BTreeMap::new();
        for a in &self.admissions {
            admission_owner.insert(a.admission_id, a.patient_id);
            if let Some(r) = by_id.get_mut(&a.patient_id) {
                r.admissions.push(a.clone());
            }
        }
        for s in &self.icustays {
            if let Some(r) = admission_owner.get(&s.admission_id).and_then(|p| by_id.get_mut(p)) {
                r.icu_stays.push(s.clone());
            }
        }
        for v in &self.ventevents {
            if let Some(r) = by_id.get_mut(&v.patient_id) {
                r.vent_events.push(*v);
            }
        }
        for d in &self.diagnoses {
            if let Some(r) = by_id.get_mut(&d.patient_id) {
                r.exclusion_tags.insert(d.exclusion_tag.clone());
            }
        }
        for n in &self.notes {
            if let Some(r) = by_id.get_mut(&n.patient_id) {
                r.notes.push(n.clone());
            }
        }
        by_id.into_values().collect()
    }

    /// Writes all six files into `dir` (created if needed).
    pub fn write(&self, dir: &Path) -> Result<(), CohortError> {
        std::fs::create_dir_all(dir)?;
        let open = |file: &'static str, style: csv::QuoteStyle| {
            csv::WriterBuilder::new()
                .quote_style(style)
                .from_path(dir.join(file))
                .map_err(|e| CohortError::Csv {
                    file,
                    reason: e.to_string(),
                })
        };
        let csv_err = |file: &'static str| {
            move |e: csv::Error| CohortError::Csv {
                file,
                reason: e.to_string(),
            }
        };

        let mut w = open(PATIENTS_CSV, csv::QuoteStyle::Necessary)?;
        w.write_record(PATIENTS_HEADER).map_err(csv_err(PATIENTS_CSV))?;
        for p in &self.patients {
            w.write_record([
                p.patient_id.to_string(),
                format!("{}", p.age),
                p.sex.clone(),
                p.ethnicity.clone(),
                p.death_time.map(format_time).unwrap_or_default(),
            ])
            .map_err(csv_err(PATIENTS_CSV))?;
        }
        w.flush()?;

        let mut w = open(ADMISSIONS_CSV, csv::QuoteStyle::Necessary)?;
        w.write_record(ADMISSIONS_HEADER).map_err(csv_err(ADMISSIONS_CSV))?;
        for a in &self.admissions {
            w.write_record([
                a.admission_id.to_string(),
                a.patient_id.to_string(),
                format_time(a.admit_time),
                format_time(a.discharge_time),
                u8::from(a.organ_donor).to_string(),
                u8::from(a.external_transfer).to_string(),
            ])
            .map_err(csv_err(ADMISSIONS_CSV))?;
        }
        w.flush()?;

        let mut w = open(ICUSTAYS_CSV, csv::QuoteStyle::Necessary)?;
        w.write_record(ICUSTAYS_HEADER).map_err(csv_err(ICUSTAYS_CSV))?;
        for s in &self.icustays {
            w.write_record([
                s.stay_id.to_string(),
                s.admission_id.to_string(),
                format_time(s.in_time),
                format_time(s.out_time),
            ])
            .map_err(csv_err(ICUSTAYS_CSV))?;
        }
        w.flush()?;

        let mut w = open(VENTEVENTS_CSV, csv::QuoteStyle::Necessary)?;
        w.write_record(VENTEVENTS_HEADER).map_err(csv_err(VENTEVENTS_CSV))?;
        for v in &self.ventevents {
            w.write_record([
                v.patient_id.to_string(),
                v.stay_id.to_string(),
                format_time(v.start),
                format_time(v.end),
            ])
            .map_err(csv_err(VENTEVENTS_CSV))?;
        }
        w.flush()?;

        let mut w = open(DIAGNOSES_CSV, csv::QuoteStyle::Necessary)?;
        w.write_record(DIAGNOSES_HEADER).map_err(csv_err(DIAGNOSES_CSV))?;
        for d in &self.diagnoses {
            w.write_record([d.patient_id.to_string(), d.exclusion_tag.clone()])
                .map_err(csv_err(DIAGNOSES_CSV))?;
        }
        w.flush()?;

        let mut w = open(NOTES_CSV, csv::QuoteStyle::NonNumeric)?;
        w.write_record(NOTES_HEADER).map_err(csv_err(NOTES_CSV))?;
        for n in &self.notes {
            w.write_record([
                n.note_id.to_string(),
                n.patient_id.to_string(),
                format_time(n.chart_time),
                n.category.clone(),
                n.text.clone(),
            ])
            .map_err(csv_err(NOTES_CSV))?;
        }
        w.flush()?;
        Ok(())
    }
}
