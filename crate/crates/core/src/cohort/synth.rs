//! Seeded synthetic EHR tables with planted, manifest-recorded label causes.
//!
//! Every patient is generated to leave the selection funnel at a chosen
//! stage or to be included. Included patients receive ventilation and death
//! times that realise their sampled labels, and their in-window notes carry
//! the planted text signal:
//!
//! * `keyword`: a task sentinel appears in some in-window note iff the
//!   signal says positive.
//! * `temporal`: both sentinels of a task pair appear, each in its own note;
//!   the first sentinel's note comes first iff the signal says positive.
//!
//! With `strength < 1` the signal follows the label with that probability
//! and is a fair coin otherwise. Out-of-window and physician notes never
//! carry sentinels.

use std::path::Path;

use chrono::{Duration, TimeZone, Utc};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{LogNormal, Normal};
use serde::{Deserialize, Serialize};

use super::rules::{Stage, DEFAULT_EXCLUSION_TAGS};
use super::tables::{Admission, Diagnosis, IcuStay, Note, Patient, Tables, Timestamp, VentEvent};
use super::{CohortError, Task};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    None,
    Keyword,
    Temporal,
}

impl std::str::FromStr for SignalKind {
    type Err = CohortError;
    fn from_str(s: &str) -> Result<Self, CohortError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(SignalKind::None),
            "keyword" => Ok(SignalKind::Keyword),
            "temporal" | "temporal-order" | "temporal_order" => Ok(SignalKind::Temporal),
            other => Err(CohortError::Synth(format!("unknown signal kind {other:?}"))),
        }
    }
}

/// Single sentinel per task for the keyword signal.
pub fn keyword_sentinel(task: Task) -> &'static str {
    match task {
        Task::Pmv => "zqpmv",
        Task::Mortality => "zqmort",
    }
}

/// `(first, second)` sentinels per task for the temporal signal.
pub fn temporal_sentinels(task: Task) -> (&'static str, &'static str) {
    match task {
        Task::Pmv => ("zqalpha", "zqbeta"),
        Task::Mortality => ("zqgamma", "zqdelta"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub signal: SignalKind,
    /// Probability that the planted signal agrees with the label.
    pub strength: f64,
    pub note_count_mean: f64,
    pub note_count_sd: f64,
    pub max_notes: usize,
    pub word_count_mean: f64,
    pub word_count_sd: f64,
    /// Multiplies both word-count moments.
    pub length_scale: f64,
    pub pmv_rate: f64,
    pub mortality_rate: f64,
    /// Share of patients generated to fail some selection stage.
    pub exclusion_rate: f64,
    /// Per-note probability of carrying the keyword (at least one note does).
    pub sentinel_note_fraction: f64,
    /// Sentinels are inserted within this many leading words.
    pub sentinel_horizon: usize,
    pub sentinel_repeats: usize,
    /// Expected out-of-window or wrong-category notes per patient.
    pub distractor_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 500,
            signal: SignalKind::Keyword,
            strength: 1.0,
            note_count_mean: 9.78,
            note_count_sd: 4.70,
            max_notes: 30,
            word_count_mean: 1774.0,
            word_count_sd: 1645.0,
            length_scale: 0.02,
            pmv_rate: 0.47,
            mortality_rate: 0.37,
            exclusion_rate: 0.1,
            sentinel_note_fraction: 0.5,
            sentinel_horizon: 8,
            sentinel_repeats: 1,
            distractor_rate: 1.0,
        }
    }
}

impl SynthConfig {
    // Negated comparisons so that NaN fails validation.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), CohortError> {
        let bad = |m: String| Err(CohortError::Synth(m));
        if self.n_patients == 0 {
            return bad("n_patients must be positive".into());
        }
        for (name, v) in [
            ("strength", self.strength),
            ("pmv_rate", self.pmv_rate),
            ("mortality_rate", self.mortality_rate),
            ("exclusion_rate", self.exclusion_rate),
            ("sentinel_note_fraction", self.sentinel_note_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1]"));
            }
        }
        for (name, v) in [
            ("note_count_mean", self.note_count_mean),
            ("word_count_mean", self.word_count_mean),
            ("word_count_sd", self.word_count_sd),
            ("length_scale", self.length_scale),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.note_count_sd.is_finite() && self.note_count_sd >= 0.0) || !(self.distractor_rate >= 0.0) {
            return bad("note_count_sd and distractor_rate must be non-negative".into());
        }
        if self.max_notes < 2 || self.sentinel_horizon == 0 || self.sentinel_repeats == 0 {
            return bad("max_notes >= 2, sentinel_horizon >= 1 and sentinel_repeats >= 1 required".into());
        }
        Ok(())
    }
}

/// Generative record for one patient.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub patient_id: u64,
    /// `"included"` or the name of the stage meant to exclude the patient.
    pub expected: String,
    pub pmv: bool,
    pub mortality: bool,
    pub pmv_cause: String,
    pub mortality_cause: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub tables: Tables,
    pub manifest: Vec<ManifestEntry>,
}

impl SynthOutput {
    pub fn write(&self, dir: &Path) -> Result<(), CohortError> {
        self.tables.write(dir)?;
        let mut body = String::new();
        for m in &self.manifest {
            body.push_str(&serde_json::to_string(m).map_err(|e| CohortError::Synth(e.to_string()))?);
            body.push('\n');
        }
        std::fs::write(dir.join(MANIFEST_FILE), body)?;
        Ok(())
    }

    pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>, CohortError> {
        std::fs::read_to_string(dir.join(MANIFEST_FILE))?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| CohortError::Synth(e.to_string())))
            .collect()
    }
}

const LEXICON: &[&str] = &[
    "patient",
    "remains",
    "on",
    "vent",
    "with",
    "and",
    "the",
    "to",
    "of",
    "for",
    "sedation",
    "propofol",
    "fentanyl",
    "sats",
    "stable",
    "overnight",
    "lungs",
    "coarse",
    "clear",
    "diminished",
    "bases",
    "suctioned",
    "thick",
    "thin",
    "secretions",
    "tan",
    "white",
    "ett",
    "peep",
    "fio2",
    "tidal",
    "volume",
    "rate",
    "assist",
    "control",
    "pressure",
    "support",
    "abg",
    "ph",
    "pco2",
    "po2",
    "lactate",
    "hr",
    "bp",
    "map",
    "sbp",
    "levophed",
    "titrated",
    "off",
    "weaning",
    "trial",
    "failed",
    "tolerated",
    "rsbi",
    "cxr",
    "infiltrates",
    "effusion",
    "edema",
    "lasix",
    "diuresis",
    "urine",
    "output",
    "foley",
    "adequate",
    "creatinine",
    "tube",
    "feeds",
    "goal",
    "residuals",
    "abd",
    "soft",
    "bowel",
    "sounds",
    "present",
    "skin",
    "intact",
    "turned",
    "q2h",
    "family",
    "updated",
    "at",
    "bedside",
    "plan",
    "continue",
    "monitor",
    "neuro",
    "follows",
    "commands",
    "agitated",
    "calm",
    "rass",
    "pupils",
    "equal",
    "reactive",
    "temp",
    "afebrile",
    "febrile",
    "cultures",
    "sent",
    "antibiotics",
    "vanco",
    "zosyn",
    "wbc",
    "elevated",
    "glucose",
    "insulin",
    "sliding",
    "scale",
    "heparin",
    "subq",
    "line",
    "art",
    "site",
    "dressing",
    "changed",
    "rt",
    "nebs",
    "albuterol",
    "given",
    "breath",
    "spontaneous",
    "cpap",
    "mode",
    "changed",
    "increased",
    "decreased",
    "no",
    "acute",
    "events",
    "pt",
    "am",
    "pm",
    "noted",
    "will",
    "reassess",
    "in",
    "morning",
    "team",
    "aware",
];

fn base_time() -> Timestamp {
    Utc.with_ymd_and_hms(2150, 1, 1, 0, 0, 0).single().expect("valid date")
}

fn minutes(m: i64) -> Duration {
    Duration::minutes(m)
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
    words: WeightedIndex<f64>,
    word_len: LogNormal<f64>,
    note_count: Normal<f64>,
    next_note_id: u64,
    next_admission_id: u64,
    next_stay_id: u64,
}

/// What the text of one in-window note must contain.
#[derive(Clone, Default)]
struct Plant {
    tokens: Vec<&'static str>,
}

impl<'a> Generator<'a> {
    fn new(cfg: &'a SynthConfig, seed: u64) -> Result<Self, CohortError> {
        let weights: Vec<f64> = (0..LEXICON.len()).map(|r| 1.0 / (r as f64 + 1.0).powf(0.8)).collect();
        let m = cfg.word_count_mean * cfg.length_scale;
        let s = cfg.word_count_sd * cfg.length_scale;
        let sigma2 = (1.0 + (s * s) / (m * m)).ln();
        let mu = m.ln() - sigma2 / 2.0;
        Ok(Generator {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
            words: WeightedIndex::new(weights).map_err(|e| CohortError::Synth(e.to_string()))?,
            word_len: LogNormal::new(mu, sigma2.sqrt()).map_err(|e| CohortError::Synth(e.to_string()))?,
            note_count: Normal::new(cfg.note_count_mean, cfg.note_count_sd)
                .map_err(|e| CohortError::Synth(e.to_string()))?,
            next_note_id: 1,
            next_admission_id: 1,
            next_stay_id: 1,
        })
    }

    fn text(&mut self, plant: &Plant) -> String {
        let n = (self.word_len.sample(&mut self.rng).round() as usize).max(3);
        let mut words: Vec<&str> = (0..n).map(|_| LEXICON[self.words.sample(&mut self.rng)]).collect();
        for tok in &plant.tokens {
            let horizon = self.cfg.sentinel_horizon.min(words.len());
            let at = self.rng.random_range(0..=horizon);
            words.insert(at, tok);
        }
        words.join(" ")
    }

    fn n_window_notes(&mut self, min: usize) -> usize {
        let draw = self.note_count.sample(&mut self.rng).round();
        (draw.max(1.0) as usize).clamp(min, self.cfg.max_notes)
    }

    fn signal_value(&mut self, label: bool) -> (bool, &'static str) {
        if self.rng.random::<f64>() < self.cfg.strength {
            (label, "signal")
        } else {
            (self.rng.random::<bool>(), "noise")
        }
    }

    /// Sentinel placements for one task over `n` in-window notes.
    fn plan_task(&mut self, task: Task, label: bool, plants: &mut [Plant]) -> String {
        let n = plants.len();
        let repeats = self.cfg.sentinel_repeats;
        match self.cfg.signal {
            SignalKind::None => "none".to_string(),
            SignalKind::Keyword => {
                let (present, why) = self.signal_value(label);
                if present {
                    let forced = self.rng.random_range(0..n);
                    for (i, p) in plants.iter_mut().enumerate() {
                        if i == forced || self.rng.random::<f64>() < self.cfg.sentinel_note_fraction {
                            p.tokens.extend(std::iter::repeat_n(keyword_sentinel(task), repeats));
                        }
                    }
                }
                format!("keyword:{}:{why}", if present { "present" } else { "absent" })
            }
            SignalKind::Temporal => {
                let (first_wins, why) = self.signal_value(label);
                let i = self.rng.random_range(0..n - 1);
                let j = self.rng.random_range(i + 1..n);
                let (a, b) = temporal_sentinels(task);
                let (early, late) = if first_wins { (a, b) } else { (b, a) };
                plants[i].tokens.extend(std::iter::repeat_n(early, repeats));
                plants[j].tokens.extend(std::iter::repeat_n(late, repeats));
                format!(
                    "temporal:{}:{why}",
                    if first_wins {
                        "first_before_second"
                    } else {
                        "second_before_first"
                    }
                )
            }
        }
    }

    fn note(&mut self, patient_id: u64, chart_time: Timestamp, category: &str, plant: &Plant) -> Note {
        let text = self.text(plant);
        Note {
            note_id: 0,
            patient_id,
            chart_time,
            category: category.to_string(),
            text,
        }
    }

    fn patient(&mut self, patient_id: u64, tables: &mut Tables) -> ManifestEntry {
        let cfg = self.cfg;
        let rng = &mut self.rng;
        let excluded: Option<Stage> = if rng.random::<f64>() < cfg.exclusion_rate {
            Some(*Stage::ALL.choose(rng).expect("non-empty"))
        } else {
            None
        };
        let pmv = rng.random::<f64>() < cfg.pmv_rate;
        let mortality = rng.random::<f64>() < cfg.mortality_rate;

        let age = if excluded == Some(Stage::Age) {
            (rng.random_range(1.0..17.9f64) * 10.0).round() / 10.0
        } else {
            let a: f64 = Normal::new(64.3, 16.7).expect("valid").sample(rng);
            (a.clamp(18.0, 99.0) * 10.0).round() / 10.0
        };
        let sex = if rng.random::<f64>() < 0.558 { "M" } else { "F" };
        let eth_weights = [70.8, 8.1, 2.9, 2.1, 16.1];
        let eth = ["White", "Black", "Hispanic/Latino", "Asian", "Others"]
            [WeightedIndex::new(eth_weights).expect("valid").sample(rng)];

        let admit = base_time() + Duration::days(rng.random_range(0..3650)) + minutes(rng.random_range(0..1440));
        let icu_in = admit + minutes(rng.random_range(0..720));
        let vent_start = icu_in + minutes(rng.random_range(60..1440));
        let vent_minutes = if pmv {
            rng.random_range(9 * 1440..20 * 1440)
        } else {
            rng.random_range(60 * 60..6 * 1440)
        };
        let vent_end = vent_start + minutes(vent_minutes);
        let icu_out = vent_end + minutes(rng.random_range(360..2880));
        let discharge = icu_out + minutes(rng.random_range(1440..14400));

        let mut admission = Admission {
            admission_id: 0,
            patient_id,
            admit_time: admit,
            discharge_time: discharge,
            organ_donor: excluded == Some(Stage::OrganDonor),
            external_transfer: excluded == Some(Stage::Transfer),
        };
        admission.admission_id = self.next_admission_id;
        self.next_admission_id += 1;
        let first_stay = IcuStay {
            stay_id: self.next_stay_id,
            admission_id: admission.admission_id,
            in_time: icu_in,
            out_time: icu_out,
        };
        self.next_stay_id += 1;
        let rng = &mut self.rng;

        let mut vents = Vec::new();
        let mut stays = vec![first_stay.clone()];
        let mut admissions = vec![admission];
        match excluded {
            Some(Stage::MechanicalVentilation) => {
                // one day above the inclusion threshold, the rest below it
                let day0 = vent_start.date_naive().succ_opt().expect("in range");
                let midnight = Utc.from_utc_datetime(&day0.and_hms_opt(0, 0, 0).expect("valid"));
                vents.push((
                    first_stay.stay_id,
                    midnight + Duration::hours(1),
                    midnight + Duration::hours(12),
                ));
                for d in 1..rng.random_range(1..4) {
                    let s = midnight + Duration::days(d) + Duration::hours(2);
                    vents.push((first_stay.stay_id, s, s + Duration::hours(5)));
                }
            }
            Some(Stage::FirstIcuStay) => {
                // ventilation only during a later stay
                let later_in = icu_out + Duration::days(rng.random_range(1..30));
                let later_out = later_in + Duration::days(5);
                let later = IcuStay {
                    stay_id: self.next_stay_id,
                    admission_id: admissions[0].admission_id,
                    in_time: later_in,
                    out_time: later_out,
                };
                self.next_stay_id += 1;
                admissions[0].discharge_time = later_out + Duration::days(2);
                vents.push((
                    later.stay_id,
                    later_in + Duration::hours(1),
                    later_in + Duration::hours(90),
                ));
                stays.push(later);
            }
            _ => vents.push((first_stay.stay_id, vent_start, vent_end)),
        }
        let rng = &mut self.rng;
        let last_discharge = admissions.iter().map(|a| a.discharge_time).max().expect("one");
        if excluded.is_none() && rng.random::<f64>() < 0.15 {
            // a later readmission with its own ventilated stay; never the first stay
            let a_in = last_discharge + Duration::days(rng.random_range(5..60));
            let second = Admission {
                admission_id: self.next_admission_id,
                patient_id,
                admit_time: a_in,
                discharge_time: a_in + Duration::days(6),
                organ_donor: false,
                external_transfer: false,
            };
            self.next_admission_id += 1;
            let s = IcuStay {
                stay_id: self.next_stay_id,
                admission_id: second.admission_id,
                in_time: a_in + Duration::hours(2),
                out_time: a_in + Duration::days(5),
            };
            self.next_stay_id += 1;
            vents.push((s.stay_id, s.in_time + Duration::hours(1), s.in_time + Duration::days(4)));
            stays.push(s);
            admissions.push(second);
        }
        let rng = &mut self.rng;
        let last_event = admissions.iter().map(|a| a.discharge_time).max().expect("one");

        let death_time = if mortality {
            let latest = icu_in + Duration::days(89);
            let earliest = icu_out.min(latest);
            let span = (latest - earliest).num_minutes().max(1);
            Some(earliest + minutes(rng.random_range(0..span)))
        } else if rng.random::<bool>() {
            let earliest = (icu_in + Duration::days(91)).max(last_event);
            Some(earliest + Duration::days(rng.random_range(1..2000)))
        } else {
            None
        };

        let tag = if excluded == Some(Stage::Diagnosis) {
            Some(DEFAULT_EXCLUSION_TAGS.choose(rng).expect("non-empty").to_string())
        } else if rng.random::<f64>() < 0.2 {
            Some(
                ["sepsis", "pneumonia", "chf"]
                    .choose(rng)
                    .expect("non-empty")
                    .to_string(),
            )
        } else {
            None
        };

        // notes
        let min_notes = if cfg.signal == SignalKind::Temporal { 2 } else { 1 };
        let n_window = if excluded == Some(Stage::NoNotes) {
            0
        } else {
            self.n_window_notes(min_notes)
        };
        let mut plants = vec![Plant::default(); n_window];
        let (pmv_cause, mortality_cause) = if excluded.is_none() && n_window > 0 {
            (
                self.plan_task(Task::Pmv, pmv, &mut plants),
                self.plan_task(Task::Mortality, mortality, &mut plants),
            )
        } else {
            ("excluded".to_string(), "excluded".to_string())
        };
        let window_minutes = 48 * 60;
        let mut times: Vec<i64> = (0..n_window)
            .map(|_| self.rng.random_range(0..window_minutes))
            .collect();
        times.sort_unstable();
        let mut notes = Vec::new();
        for (k, &m) in times.iter().enumerate() {
            let cat = ["nursing", "nursing/other", "respiratory"][self.rng.random_range(0..3)];
            notes.push(self.note(patient_id, vent_start + minutes(m), cat, &plants[k].clone()));
        }
        let n_distract = {
            let lambda = cfg.distractor_rate;
            let whole = lambda.floor() as usize;
            whole + usize::from(self.rng.random::<f64>() < lambda - whole as f64)
        };
        let n_distract = if excluded == Some(Stage::NoNotes) {
            n_distract.max(1)
        } else {
            n_distract
        };
        for _ in 0..n_distract {
            let (t, cat) = match self.rng.random_range(0..3) {
                0 => (vent_start - minutes(self.rng.random_range(1..1440)), "nursing"),
                1 => (
                    vent_start + minutes(window_minutes + self.rng.random_range(0..2880)),
                    "respiratory",
                ),
                _ => (
                    vent_start + minutes(self.rng.random_range(0..window_minutes)),
                    "physician",
                ),
            };
            notes.push(self.note(patient_id, t, cat, &Plant::default()));
        }
        notes.sort_by_key(|n| n.chart_time);
        for n in &mut notes {
            n.note_id = self.next_note_id;
            self.next_note_id += 1;
        }

        tables.patients.push(Patient {
            patient_id,
            age,
            sex: sex.to_string(),
            ethnicity: eth.to_string(),
            death_time,
        });
        tables.admissions.extend(admissions);
        tables.icustays.extend(stays);
        tables
            .ventevents
            .extend(vents.into_iter().map(|(stay_id, start, end)| VentEvent {
                patient_id,
                stay_id,
                start,
                end,
            }));
        if let Some(exclusion_tag) = tag {
            tables.diagnoses.push(Diagnosis {
                patient_id,
                exclusion_tag,
            });
        }
        tables.notes.extend(notes);

        ManifestEntry {
            patient_id,
            expected: excluded.map_or("included", Stage::name).to_string(),
            pmv,
            mortality,
            pmv_cause,
            mortality_cause,
        }
    }
}

/// Generates tables and manifest. Identical `(config, seed)` give identical
/// output.
pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<SynthOutput, CohortError> {
    config.validate()?;
    let mut g = Generator::new(config, seed)?;
    let mut tables = Tables::default();
    let manifest = (1..=config.n_patients as u64)
        .map(|pid| g.patient(pid, &mut tables))
        .collect();
    Ok(SynthOutput { tables, manifest })
}
