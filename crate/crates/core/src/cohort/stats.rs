//! Cohort summary table: mean (sd) for continuous rows, count (%) for
//! categorical rows, one column per label stratum.

use serde::Serialize;

use super::rules::CohortExample;
use super::CohortError;
use crate::harness::mean_sd;

pub const ETHNICITY_GROUPS: [&str; 5] = ["White", "Black", "Hispanic/Latino", "Asian", "Others"];

fn ethnicity_group(raw: &str) -> &'static str {
    ETHNICITY_GROUPS[..4]
        .iter()
        .find(|g| g.eq_ignore_ascii_case(raw.trim()))
        .copied()
        .unwrap_or("Others")
}

fn is_male(sex: &str) -> bool {
    matches!(sex.trim().to_ascii_lowercase().as_str(), "m" | "male")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let (mean, sd) = mean_sd(values);
        Some(MeanSd { mean, sd })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CountPct {
    pub count: usize,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsColumn {
    pub name: String,
    pub admissions: usize,
    pub age: Option<MeanSd>,
    pub male: CountPct,
    /// In [`ETHNICITY_GROUPS`] order.
    pub ethnicity: Vec<(String, CountPct)>,
    /// Words per note.
    pub word_count: Option<MeanSd>,
    /// Notes per patient.
    pub note_count: Option<MeanSd>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CohortStats {
    pub columns: Vec<StatsColumn>,
}

fn pct(count: usize, total: usize) -> CountPct {
    CountPct {
        count,
        percent: if total == 0 {
            0.0
        } else {
            100.0 * count as f64 / total as f64
        },
    }
}

fn column(name: &str, members: &[&CohortExample]) -> StatsColumn {
    let n = members.len();
    let ages: Vec<f64> = members.iter().map(|e| e.age).collect();
    let words: Vec<f64> = members
        .iter()
        .flat_map(|e| e.notes.iter().map(|nt| nt.text.split_whitespace().count() as f64))
        .collect();
    let counts: Vec<f64> = members.iter().map(|e| e.notes.len() as f64).collect();
    let ethnicity = ETHNICITY_GROUPS
        .iter()
        .map(|g| {
            let c = members.iter().filter(|e| ethnicity_group(&e.ethnicity) == *g).count();
            (g.to_string(), pct(c, n))
        })
        .collect();
    StatsColumn {
        name: name.to_string(),
        admissions: n,
        age: MeanSd::of(&ages),
        male: pct(members.iter().filter(|e| is_male(&e.sex)).count(), n),
        ethnicity,
        word_count: MeanSd::of(&words),
        note_count: MeanSd::of(&counts),
    }
}

/// Columns: all, PMV positive, PMV negative, died within 90 days, survived.
pub fn cohort_stats(cohort: &[CohortExample]) -> Result<CohortStats, CohortError> {
    if cohort.is_empty() {
        return Err(CohortError::EmptyCohort);
    }
    let all: Vec<&CohortExample> = cohort.iter().collect();
    let pick = |f: &dyn Fn(&CohortExample) -> bool| all.iter().copied().filter(|e| f(e)).collect::<Vec<_>>();
    Ok(CohortStats {
        columns: vec![
            column("All", &all),
            column("PMV", &pick(&|e| e.pmv)),
            column("No PMV", &pick(&|e| !e.pmv)),
            column("Died < 90d", &pick(&|e| e.mortality)),
            column("Survived >= 90d", &pick(&|e| !e.mortality)),
        ],
    })
}

impl CohortStats {
    /// Plain-text table.
    pub fn render(&self) -> String {
        let fmt_ms = |m: &Option<MeanSd>, digits: usize| match m {
            Some(m) => format!("{:.*} ({:.*})", digits, m.mean, digits, m.sd),
            None => "-".to_string(),
        };
        let fmt_cp = |c: &CountPct| format!("{} ({:.1})", c.count, c.percent);
        let mut rows: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["Statistics".to_string()];
        header.extend(self.columns.iter().map(|c| c.name.clone()));
        rows.push(header);
        let mut push = |label: &str, f: &dyn Fn(&StatsColumn) -> String| {
            let mut r = vec![label.to_string()];
            r.extend(self.columns.iter().map(f));
            rows.push(r);
        };
        push("Admissions", &|c| c.admissions.to_string());
        push("Age", &|c| fmt_ms(&c.age, 1));
        push("Male", &|c| fmt_cp(&c.male));
        push("Ethnicity", &|_| String::new());
        for (i, g) in ETHNICITY_GROUPS.iter().enumerate() {
            push(&format!("  {g}"), &|c| fmt_cp(&c.ethnicity[i].1));
        }
        push("Notes", &|_| String::new());
        push("  Word Count", &|c| fmt_ms(&c.word_count, 0));
        push("  Note Count", &|c| fmt_ms(&c.note_count, 2));
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
            .collect();
        rows.iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .map(|(j, cell)| format!("{cell:<w$}", w = widths[j]))
                    .collect::<Vec<_>>()
                    .join(" | ")
                    .trim_end()
                    .to_string()
            })
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    }
}
