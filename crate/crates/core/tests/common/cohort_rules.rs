//! Selection rules, labels and note window against a hand-walked fixture and
//! an independent minute-resolution interpreter.

use std::collections::BTreeSet;
use std::path::PathBuf;

use chrono::{Duration, TimeZone, Utc};
use cxl_core::cohort::{
    assess, label_mortality, label_pmv, parse_time, select_cohort, window_notes, Admission, CohortExample, IcuStay,
    Note, Patient, PatientRecord, SelectionRules, Stage, Tables, Timestamp, VentEvent,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/six_patients")
}

fn t(s: &str) -> Timestamp {
    parse_time(s).unwrap()
}

fn note_ids(ex: &CohortExample) -> Vec<u64> {
    ex.notes.iter().map(|n| n.note_id).collect()
}

fn fixture_records() -> Vec<PatientRecord> {
    Tables::load(&fixture_dir()).unwrap().records()
}

pub fn six_patient_flowchart_walk() {
    let tables = Tables::load(&fixture_dir()).unwrap();
    let counts: Vec<usize> = tables.row_counts().iter().map(|(_, n)| *n).collect();
    assert_eq!(counts, vec![6, 7, 7, 9, 2, 13]);
    let sel = select_cohort(&tables.records(), &SelectionRules::default()).unwrap();

    // 1: 17 years old (also a donor; age is checked first).
    // 2: organ donor (also a transfer). 3: transfer. 4: neoplasm tag.
    let stages: Vec<(u64, Stage)> = sel.exclusions.iter().map(|(&p, &s)| (p, s)).collect();
    assert_eq!(
        stages,
        vec![
            (1, Stage::Age),
            (2, Stage::OrganDonor),
            (3, Stage::Transfer),
            (4, Stage::Diagnosis)
        ]
    );
    let tally: Vec<(Stage, usize)> = sel.tally.excluded.clone();
    assert_eq!(
        tally,
        vec![
            (Stage::Age, 1),
            (Stage::OrganDonor, 1),
            (Stage::Transfer, 1),
            (Stage::Diagnosis, 1),
            (Stage::MechanicalVentilation, 0),
            (Stage::FirstIcuStay, 0),
            (Stage::NoNotes, 0),
        ]
    );
    assert_eq!((sel.tally.input, sel.tally.included), (6, 2));
    assert!(sel.tally.is_balanced());

    // 5: ventilated 16h, then 7 x 24h, then 5h: eight days with >= 6h.
    // Window [Jan 1 08:00, Jan 3 08:00): 51 and 52 tie on time (id order),
    // 53 at 47h59m; 54 at 48h, the physician note and the pre-vent note drop.
    let p5 = &sel.examples[0];
    assert_eq!(p5.patient_id, 5);
    assert_eq!(note_ids(p5), vec![51, 52, 53]);
    assert!(p5.pmv);
    assert!(!p5.mortality);
    assert_eq!(p5.first_stay_id, 500);
    assert_eq!(p5.vent_start, t("2130-01-01T08:00:00Z"));
    assert_eq!(p5.notes[1].text, "pt intubated, sedated.\nsecond line of the same note");

    // 6: first stay 600 (listed second) has three ventilated days, so no
    // PMV even though stay 601 has nine full days. Death exactly 90 x 24h
    // after the stay-600 admission counts.
    let p6 = &sel.examples[1];
    assert_eq!(p6.patient_id, 6);
    assert_eq!(p6.first_stay_id, 600);
    assert_eq!(note_ids(p6), vec![61]);
    assert!(!p6.pmv);
    assert!(p6.mortality);
    assert_eq!(p6.n_admissions, 2);
}

pub fn remaining_stages_by_fixture_mutation() {
    let records = fixture_records();
    let rules = SelectionRules::default();
    let p5 = records.iter().find(|r| r.patient.patient_id == 5).unwrap().clone();
    let p6 = records.iter().find(|r| r.patient.patient_id == 6).unwrap().clone();

    // Second ventilated day has exactly 6h: not "more than 6".
    let mut mv = p6.clone();
    mv.vent_events = vec![
        vent(6, 600, "2130-03-01T12:00:00Z", "2130-03-01T22:00:00Z"),
        vent(6, 600, "2130-03-02T08:00:00Z", "2130-03-02T14:00:00Z"),
    ];
    assert_eq!(assess(&mv, &rules).unwrap(), Err(Stage::MechanicalVentilation));
    mv.vent_events[1].end = t("2130-03-02T14:00:01Z");
    assert!(assess(&mv, &rules).unwrap().is_ok());

    let mut no_stay = p5.clone();
    no_stay.icu_stays.clear();
    assert_eq!(assess(&no_stay, &rules).unwrap(), Err(Stage::FirstIcuStay));

    // Ventilation recorded only against a later stay.
    let mut later = p6.clone();
    later.vent_events.retain(|v| v.stay_id == 601);
    assert_eq!(assess(&later, &rules).unwrap(), Err(Stage::FirstIcuStay));

    let mut quiet = p5.clone();
    quiet.notes.retain(|n| n.category == "Physician" || n.note_id == 54);
    assert_eq!(assess(&quiet, &rules).unwrap(), Err(Stage::NoNotes));

    let mut all = records.clone();
    all.extend([mv, no_stay, later, quiet].into_iter().enumerate().map(|(i, mut r)| {
        r.patient.patient_id = 100 + i as u64;
        r
    }));
    let sel = select_cohort(&all, &rules).unwrap();
    assert!(sel.tally.is_balanced());
    // The MV record was made eligible again above, so it joins 5 and 6.
    assert_eq!(sel.tally.included, 3);
    let counts: Vec<usize> = sel.tally.excluded.iter().map(|(_, n)| *n).collect();
    assert_eq!(counts, vec![1, 1, 1, 1, 0, 2, 1]);
}

fn vent(pid: u64, stay: u64, a: &str, b: &str) -> VentEvent {
    VentEvent {
        patient_id: pid,
        stay_id: stay,
        start: t(a),
        end: t(b),
    }
}

fn note(id: u64, at: Timestamp, category: &str) -> Note {
    Note {
        note_id: id,
        patient_id: 1,
        chart_time: at,
        category: category.into(),
        text: "x".into(),
    }
}

pub fn window_boundaries() {
    let start = t("2130-06-01T09:30:00Z");
    let notes = vec![
        note(1, start + Duration::hours(47) + Duration::minutes(59), "nursing"),
        note(2, start + Duration::hours(48), "nursing"),
        note(3, start, "Respiratory"),
        note(4, start - Duration::seconds(1), "nursing"),
        note(5, start + Duration::hours(1), "physician"),
    ];
    let kept: Vec<u64> = window_notes(&notes, start, &SelectionRules::default())
        .iter()
        .map(|n| n.note_id)
        .collect();
    assert_eq!(kept, vec![3, 1]);
}

fn daily(pid: u64, days: usize, hours: i64) -> Vec<VentEvent> {
    let base = t("2130-02-01T02:00:00Z");
    (0..days as i64)
        .map(|d| VentEvent {
            patient_id: pid,
            stay_id: 1,
            start: base + Duration::days(d),
            end: base + Duration::days(d) + Duration::hours(hours),
        })
        .collect()
}

pub fn label_boundaries() {
    assert!(label_pmv(&daily(1, 8, 7)));
    assert!(!label_pmv(&daily(1, 7, 7)));
    assert!(label_pmv(&daily(1, 8, 6)));
    assert!(!label_pmv(&daily(1, 8, 5)));
    let mut nine = daily(1, 9, 7);
    nine[4].end = nine[4].start + Duration::hours(3);
    assert!(label_pmv(&nine));
    nine[5].end = nine[5].start + Duration::hours(3);
    assert!(!label_pmv(&nine));

    let adm = t("2130-01-01T00:00:00Z");
    assert!(!label_mortality(adm, None).unwrap());
    assert!(label_mortality(adm, Some(adm + Duration::days(89))).unwrap());
    assert!(label_mortality(adm, Some(adm + Duration::days(90))).unwrap());
    assert!(!label_mortality(adm, Some(adm + Duration::days(90) + Duration::seconds(1))).unwrap());
    assert!(label_mortality(adm, Some(adm - Duration::seconds(1))).is_err());
}

// ---- independent interpreter ----------------------------------------------
//
// Times are integer seconds from a fixed midnight. Ventilation is generated
// on whole minutes and counted minute by minute per calendar day.

const DAY: i64 = 86_400;

#[derive(Debug, Clone)]
struct Case {
    age: f64,
    donor: bool,
    transfer: bool,
    tags: Vec<&'static str>,
    /// (stay id, in time)
    stays: Vec<(u64, i64)>,
    /// (stay id, start, end)
    vents: Vec<(u64, i64, i64)>,
    death: Option<i64>,
    /// (note id, time, category)
    notes: Vec<(u64, i64, &'static str)>,
}

#[derive(Debug, PartialEq)]
enum Verdict {
    Out(&'static str),
    In {
        pmv: bool,
        mortality: bool,
        stay: u64,
        start: i64,
        notes: Vec<u64>,
    },
}

fn minutes_on_day(vents: &[(u64, i64, i64)], day: i64) -> i64 {
    (0..1440)
        .filter(|m| {
            let s = day * DAY + m * 60;
            vents.iter().any(|&(_, a, b)| a <= s && s < b)
        })
        .count() as i64
}

fn days_touched(vents: &[(u64, i64, i64)]) -> Vec<i64> {
    let lo = vents.iter().map(|v| v.1.div_euclid(DAY)).min();
    let hi = vents.iter().map(|v| (v.2 - 1).div_euclid(DAY)).max();
    match (lo, hi) {
        (Some(lo), Some(hi)) => (lo..=hi).collect(),
        _ => Vec::new(),
    }
}

fn interpret(c: &Case) -> Verdict {
    if c.age < 18.0 {
        return Verdict::Out("age");
    }
    if c.donor {
        return Verdict::Out("organ_donor");
    }
    if c.transfer {
        return Verdict::Out("transfer");
    }
    if c.tags
        .iter()
        .any(|t| ["neuromuscular", "neoplasm", "burns"].contains(t))
    {
        return Verdict::Out("diagnosis");
    }
    let long_days = days_touched(&c.vents)
        .into_iter()
        .filter(|&d| minutes_on_day(&c.vents, d) > 360)
        .count();
    if long_days < 2 {
        return Verdict::Out("mechanical_ventilation");
    }
    let Some(&(stay, in_time)) = c.stays.iter().min_by_key(|(id, t)| (*t, *id)) else {
        return Verdict::Out("first_icu_stay");
    };
    let mine: Vec<(u64, i64, i64)> = c.vents.iter().copied().filter(|v| v.0 == stay).collect();
    let Some(start) = mine.iter().map(|v| v.1).min() else {
        return Verdict::Out("first_icu_stay");
    };
    let mut notes: Vec<(i64, u64)> = c
        .notes
        .iter()
        .filter(|(_, at, cat)| {
            *at >= start
                && *at < start + 48 * 3600
                && ["nursing", "nursing/other", "respiratory"].contains(&cat.to_lowercase().as_str())
        })
        .map(|(id, at, _)| (*at, *id))
        .collect();
    if notes.is_empty() {
        return Verdict::Out("no_notes");
    }
    notes.sort();
    let pmv_days = days_touched(&mine)
        .into_iter()
        .filter(|&d| minutes_on_day(&mine, d) >= 360)
        .count();
    Verdict::In {
        pmv: pmv_days > 7,
        mortality: c.death.is_some_and(|d| d - in_time <= 90 * DAY),
        stay,
        start,
        notes: notes.into_iter().map(|(_, id)| id).collect(),
    }
}

const CATEGORIES: [&str; 6] = [
    "Nursing",
    "nursing/other",
    "Respiratory",
    "RESPIRATORY",
    "Physician",
    "Radiology",
];
const TAGS: [&str; 4] = ["neoplasm", "burns", "neuromuscular", "asthma"];

fn random_case(rng: &mut ChaCha8Rng) -> Case {
    let age = if rng.random_bool(0.1) {
        [17.0, 18.0, 17.99][rng.random_range(0..3)]
    } else {
        rng.random_range(18.0..95.0)
    };
    let tags = TAGS.iter().copied().filter(|_| rng.random_bool(0.04)).collect();
    let n_stays = if rng.random_bool(0.05) {
        0
    } else {
        rng.random_range(1..=2)
    };
    let stays: Vec<(u64, i64)> = (0..n_stays)
        .map(|i| (10 + i as u64, rng.random_range(0..6 * 24 * 60) * 60))
        .collect();
    let n_vents = rng.random_range(0..=4);
    let vents = (0..n_vents)
        .map(|_| {
            let stay = if stays.is_empty() || rng.random_bool(0.05) {
                99
            } else {
                stays[rng.random_range(0..stays.len())].0
            };
            let start = rng.random_range(0..8 * 24 * 60) * 60;
            let len = if rng.random_bool(0.5) {
                rng.random_range(1..=24 * 60) * 60
            } else {
                rng.random_range(1..=5 * 24 * 60) * 60
            };
            (stay, start, start + len)
        })
        .collect::<Vec<_>>();
    let first_in = stays.iter().map(|s| s.1).min().unwrap_or(0);
    let death = match rng.random_range(0..6) {
        0 | 1 => None,
        2 => Some(first_in + 90 * DAY),
        3 => Some(first_in + 90 * DAY + 1),
        4 => Some(first_in + 90 * DAY - 1),
        _ => Some(first_in + rng.random_range(0..200 * DAY)),
    };
    let anchor = vents.iter().map(|v: &(u64, i64, i64)| v.1).min().unwrap_or(0);
    let notes = (0..rng.random_range(0..=5))
        .map(|i| {
            let at = match rng.random_range(0..4) {
                0 => anchor + 48 * 3600 - 60,
                1 => anchor + 48 * 3600,
                _ => anchor + rng.random_range(-6 * 60..60 * 60) * 60,
            };
            (1000 + i as u64, at, CATEGORIES[rng.random_range(0..CATEGORIES.len())])
        })
        .collect();
    Case {
        age,
        donor: rng.random_bool(0.04),
        transfer: rng.random_bool(0.04),
        tags,
        stays,
        vents,
        death,
        notes,
    }
}

pub fn origin() -> Timestamp {
    Utc.with_ymd_and_hms(2130, 1, 1, 0, 0, 0).unwrap()
}

fn at(secs: i64) -> Timestamp {
    origin() + Duration::seconds(secs)
}

fn to_record(pid: u64, c: &Case) -> PatientRecord {
    PatientRecord {
        patient: Patient {
            patient_id: pid,
            age: c.age,
            sex: "F".into(),
            ethnicity: "White".into(),
            death_time: c.death.map(at),
        },
        admissions: vec![Admission {
            admission_id: pid,
            patient_id: pid,
            admit_time: at(-DAY),
            discharge_time: at(30 * DAY),
            organ_donor: c.donor,
            external_transfer: c.transfer,
        }],
        icu_stays: c
            .stays
            .iter()
            .map(|&(id, t)| IcuStay {
                stay_id: id,
                admission_id: pid,
                in_time: at(t),
                out_time: at(t + 20 * DAY),
            })
            .collect(),
        vent_events: c
            .vents
            .iter()
            .map(|&(stay, a, b)| VentEvent {
                patient_id: pid,
                stay_id: stay,
                start: at(a),
                end: at(b),
            })
            .collect(),
        exclusion_tags: c.tags.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>(),
        notes: c
            .notes
            .iter()
            .map(|&(id, t, cat)| Note {
                note_id: id,
                patient_id: pid,
                chart_time: at(t),
                category: cat.into(),
                text: "n".into(),
            })
            .collect(),
    }
}

pub fn ten_thousand_random_cases_match_interpreter() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0_4047);
    let rules = SelectionRules::default();
    let mut records = Vec::new();
    let mut expected = Vec::new();
    for pid in 0..10_000u64 {
        let c = random_case(&mut rng);
        records.push(to_record(pid, &c));
        expected.push(interpret(&c));
    }
    let sel = select_cohort(&records, &rules).unwrap();
    assert!(sel.tally.is_balanced());

    let mut seen_stages = BTreeSet::new();
    let (mut pmv, mut died) = (0, 0);
    let mut examples = sel.examples.iter();
    for (pid, want) in expected.iter().enumerate() {
        match want {
            Verdict::Out(stage) => {
                assert_eq!(sel.exclusions[&(pid as u64)].name(), *stage, "patient {pid}");
                seen_stages.insert(*stage);
            }
            Verdict::In {
                pmv: p,
                mortality,
                stay,
                start,
                notes,
            } => {
                let ex = examples.next().unwrap();
                assert_eq!(ex.patient_id, pid as u64);
                assert_eq!(
                    (ex.pmv, ex.mortality, ex.first_stay_id, ex.vent_start, note_ids(ex)),
                    (*p, *mortality, *stay, at(*start), notes.clone()),
                    "patient {pid}"
                );
                pmv += usize::from(*p);
                died += usize::from(*mortality);
            }
        }
    }
    assert!(examples.next().is_none());
    let included = expected.iter().filter(|v| matches!(v, Verdict::In { .. })).count();
    assert_eq!(sel.tally.included, included);
    for (stage, n) in &sel.tally.excluded {
        let want = expected.iter().filter(|v| **v == Verdict::Out(stage.name())).count();
        assert_eq!(*n, want, "{}", stage.name());
    }
    // The generator must reach every branch for the comparison to mean much.
    assert_eq!(seen_stages.len(), 7, "{seen_stages:?}");
    assert!(pmv > 20 && included - pmv > 20, "pmv {pmv} of {included}");
    assert!(died > 20 && included - died > 20, "died {died} of {included}");
}

/// Every shared check, in a fixed order.
pub const CASES: &[(&str, fn())] = &[
    ("six_patient_flowchart_walk", six_patient_flowchart_walk),
    (
        "remaining_stages_by_fixture_mutation",
        remaining_stages_by_fixture_mutation,
    ),
    ("window_boundaries", window_boundaries),
    ("label_boundaries", label_boundaries),
    (
        "ten_thousand_random_cases_match_interpreter",
        ten_thousand_random_cases_match_interpreter,
    ),
];
