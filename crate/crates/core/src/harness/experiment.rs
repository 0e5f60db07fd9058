//! Multi-seed experiment runner and report writer.
//!
//! Run directory layout:
//!
//! ```text
//! config.snapshot.ini
//! cohort.txt
//! encoder/pretrained.ckpt (+ .vocab), loss.csv, corpus_note_ids.txt
//! embeddings/<digest>.jsonl
//! <task>/seed_<s>/split.json, tuned.ckpt, <method>.ckpt,
//!                 predictions_<method>.csv, metrics.json
//! metrics.json
//! report.txt
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{auroc, format_mean_sd, holdout_ids, mean_sd, split, Split};
use crate::aggregator::{finetune, write_predictions_csv, AggregatorKind, PatientSequence, Prediction};
use crate::cohort::{select_cohort, CohortExample, Tables, Task};
use crate::config::RunConfig;
use crate::encoder::{pretrain, write_loss_csv, CorpusNote, EncoderCheckpoint, PretrainConfig};
use crate::note_repr::{
    embed_patient, meta_finetune, write_embeddings_jsonl, LabeledNote, MetaConfig, NoteEmbedding, NoteReprError,
};
use crate::text::Vocabulary;

pub const CONFIG_SNAPSHOT_FILE: &str = "config.snapshot.ini";
pub const METRICS_FILE: &str = "metrics.json";
pub const REPORT_FILE: &str = "report.txt";

/// A failure tagged with the pipeline stage that raised it. Artifacts
/// written by earlier stages are left in place.
#[derive(Debug, Error)]
#[error("stage {stage}: {source}")]
pub struct ExperimentError {
    pub stage: &'static str,
    #[source]
    pub source: Box<dyn std::error::Error + Send + Sync>,
}

fn at<E: std::error::Error + Send + Sync + 'static>(stage: &'static str) -> impl FnOnce(E) -> ExperimentError {
    move |e| ExperimentError {
        stage,
        source: Box::new(e),
    }
}

/// Display name of an aggregation method in reports.
pub fn method_name(kind: AggregatorKind) -> &'static str {
    match kind {
        AggregatorKind::BiLstm => "plm-bilstm",
        AggregatorKind::Mean => "plm-mean",
    }
}

/// Holdout AUROC of one method on one task across run seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    pub method: String,
    pub seeds: Vec<u64>,
    pub aurocs: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; zero for one seed.
    pub sd: f64,
    pub config_hash: String,
}

impl MetricsReport {
    pub fn new(task: Task, method: &str, seeds: Vec<u64>, aurocs: Vec<f64>, config_hash: &str) -> Self {
        let (mean, sd) = mean_sd(&aurocs);
        MetricsReport {
            task,
            method: method.to_string(),
            seeds,
            aurocs,
            mean,
            sd,
            config_hash: config_hash.to_string(),
        }
    }

    pub fn formatted(&self) -> String {
        format_mean_sd(self.mean, self.sd)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub config_hash: String,
    pub reports: Vec<MetricsReport>,
}

/// Everything a caller may want to audit after a run.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub metrics: MetricsFile,
    pub run_dir: PathBuf,
    pub cohort_patients: Vec<u64>,
    pub holdout: Vec<u64>,
    pub splits: Vec<(Task, u64, Split)>,
    pub corpus_note_ids: Vec<u64>,
    pub holdout_note_ids: Vec<u64>,
}

/// One panel per task, one row per method, `mean ± sd` to three decimals.
pub fn render_report(metrics: &MetricsFile) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "config_hash: {}", metrics.config_hash);
    let tasks: BTreeSet<Task> = metrics.reports.iter().map(|r| r.task).collect();
    for task in tasks {
        let rows: Vec<&MetricsReport> = metrics.reports.iter().filter(|r| r.task == task).collect();
        let seeds = rows[0].seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(", ");
        let width = rows
            .iter()
            .map(|r| r.method.len())
            .max()
            .unwrap_or(0)
            .max("Method".len());
        let _ = writeln!(out, "\nTask: {task} (holdout AUROC over seeds {seeds})");
        let _ = writeln!(out, "{:<width$} | AUROC", "Method");
        let _ = writeln!(out, "{}-+-{}", "-".repeat(width), "-".repeat(13));
        for r in rows {
            let _ = writeln!(out, "{:<width$} | {}", r.method, r.formatted());
        }
    }
    out
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let mut text = serde_json::to_string_pretty(value).map_err(at("write"))?;
    text.push('\n');
    std::fs::write(path, text).map_err(at("write"))
}

/// One labelled note per note of each example.
pub fn labeled_notes(examples: &[&CohortExample], task: Task) -> Vec<LabeledNote> {
    examples
        .iter()
        .flat_map(|e| {
            e.notes.iter().map(move |n| LabeledNote {
                note_id: n.note_id,
                patient_id: e.patient_id,
                text: n.text.clone(),
                label: task.label(e),
            })
        })
        .collect()
}

/// Every note of every patient outside `holdout`, in table order.
pub fn pretraining_corpus(tables: &Tables, holdout: &HashSet<u64>) -> Vec<CorpusNote> {
    tables
        .notes
        .iter()
        .filter(|n| !holdout.contains(&n.patient_id))
        .map(|n| CorpusNote {
            note_id: n.note_id,
            text: n.text.clone(),
        })
        .collect()
}

/// Ids of every note of every patient in `holdout`.
pub fn holdout_note_ids(tables: &Tables, holdout: &HashSet<u64>) -> Vec<u64> {
    tables
        .notes
        .iter()
        .filter(|n| holdout.contains(&n.patient_id))
        .map(|n| n.note_id)
        .collect()
}

/// Per-patient embeddings in chart-time order.
pub fn embed_cohort(
    ck: &EncoderCheckpoint,
    examples: &[&CohortExample],
) -> Result<BTreeMap<u64, Vec<NoteEmbedding>>, NoteReprError> {
    examples
        .iter()
        .map(|e| Ok((e.patient_id, embed_patient(ck, &e.notes)?)))
        .collect()
}

/// Aggregator inputs for `examples`; every patient must be in `embeddings`.
pub fn patient_sequences(
    examples: &[&CohortExample],
    embeddings: &BTreeMap<u64, Vec<NoteEmbedding>>,
    task: Task,
) -> Result<Vec<PatientSequence>, NoteReprError> {
    examples
        .iter()
        .map(|e| {
            let embs = embeddings.get(&e.patient_id).ok_or(NoteReprError::NoNotes)?;
            Ok(PatientSequence {
                patient_id: e.patient_id,
                embeddings: embs.iter().map(|n| n.vector.clone()).collect(),
                label: task.label(e),
            })
        })
        .collect()
}

/// Loads the tables named by `cfg` and runs the full pipeline.
pub fn run_experiment(cfg: &RunConfig, run_dir: &Path) -> Result<ExperimentOutcome, ExperimentError> {
    let tables = Tables::load(&cfg.data_dir).map_err(at("load"))?;
    run_experiment_on(&tables, cfg, run_dir)
}

/// Cohort, shared holdout, pretraining, then per task and seed:
/// split, meta-finetune, embed, aggregator finetune, holdout evaluation.
pub fn run_experiment_on(
    tables: &Tables,
    cfg: &RunConfig,
    run_dir: &Path,
) -> Result<ExperimentOutcome, ExperimentError> {
    cfg.validate().map_err(at("config"))?;
    std::fs::create_dir_all(run_dir).map_err(at("write"))?;
    std::fs::write(run_dir.join(CONFIG_SNAPSHOT_FILE), cfg.snapshot()).map_err(at("write"))?;
    let config_hash = cfg.hash();

    let selection = select_cohort(&tables.records(), &cfg.rules).map_err(at("cohort"))?;
    std::fs::write(run_dir.join("cohort.txt"), selection.tally.render()).map_err(at("write"))?;
    let by_id: BTreeMap<u64, &CohortExample> = selection.examples.iter().map(|e| (e.patient_id, e)).collect();
    let patients: Vec<u64> = by_id.keys().copied().collect();

    let holdout = holdout_ids(&patients, &cfg.split).map_err(at("split"))?;
    let holdout_set: HashSet<u64> = holdout.iter().copied().collect();
    let holdout_note_ids = holdout_note_ids(tables, &holdout_set);
    let corpus = pretraining_corpus(tables, &holdout_set);
    let vocab = Vocabulary::build(
        corpus.iter().map(|n| n.text.as_str()),
        cfg.vocab_min_frequency,
        cfg.vocab_max_size,
    )
    .map_err(at("vocab"))?;
    let mut enc_cfg = cfg.encoder.clone();
    enc_cfg.vocab_size = vocab.len();
    let pre_cfg = PretrainConfig {
        seed: cfg.seed,
        ..cfg.pretrain.clone()
    };
    let holdout_note_set: HashSet<u64> = holdout_note_ids.iter().copied().collect();
    let pre = pretrain(&corpus, &vocab, enc_cfg, &pre_cfg, &holdout_note_set).map_err(at("pretrain"))?;
    let enc_dir = run_dir.join("encoder");
    std::fs::create_dir_all(&enc_dir).map_err(at("write"))?;
    pre.checkpoint
        .save(&enc_dir.join("pretrained.ckpt"))
        .map_err(at("pretrain"))?;
    write_loss_csv(&enc_dir.join("loss.csv"), &pre.losses).map_err(at("pretrain"))?;
    let corpus_note_ids: Vec<u64> = corpus.iter().map(|n| n.note_id).collect();
    let ids_text: String = corpus_note_ids.iter().map(|id| format!("{id}\n")).collect();
    std::fs::write(enc_dir.join("corpus_note_ids.txt"), ids_text).map_err(at("write"))?;

    let emb_dir = run_dir.join("embeddings");
    std::fs::create_dir_all(&emb_dir).map_err(at("write"))?;
    let mut embedding_cache: HashMap<String, BTreeMap<u64, Vec<NoteEmbedding>>> = HashMap::new();

    let mut splits = Vec::new();
    let mut per_method: BTreeMap<(Task, AggregatorKind), Vec<f64>> = BTreeMap::new();
    for &task in &cfg.tasks {
        for &seed in &cfg.split.seeds {
            let seed_dir = run_dir.join(task.name()).join(format!("seed_{seed}"));
            std::fs::create_dir_all(&seed_dir).map_err(at("write"))?;
            let sp = split(&patients, &cfg.split, seed).map_err(at("split"))?;
            write_json(&seed_dir.join("split.json"), &sp)?;
            let members = |ids: &[u64]| ids.iter().map(|id| by_id[id]).collect::<Vec<_>>();
            let (train_ex, val_ex, hold_ex) = (members(&sp.train), members(&sp.val), members(&sp.holdout));

            let meta_cfg = MetaConfig {
                seed,
                ..cfg.meta.clone()
            };
            let tuned = meta_finetune(
                &pre.checkpoint,
                task,
                &labeled_notes(&train_ex, task),
                &labeled_notes(&val_ex, task),
                &meta_cfg,
            )
            .map_err(at("meta-finetune"))?
            .checkpoint;
            let tuned_path = seed_dir.join("tuned.ckpt");
            tuned.save(&tuned_path).map_err(at("meta-finetune"))?;

            let digest = tuned.digest();
            if !embedding_cache.contains_key(&digest) {
                let all: Vec<&CohortExample> = by_id.values().copied().collect();
                let map = embed_cohort(&tuned, &all).map_err(at("embed"))?;
                let flat: Vec<NoteEmbedding> = map.values().flatten().cloned().collect();
                write_embeddings_jsonl(&emb_dir.join(format!("{}.jsonl", &digest[..16])), &flat)
                    .map_err(at("embed"))?;
                embedding_cache.insert(digest.clone(), map);
            }
            let embeddings = &embedding_cache[&digest];
            let seqs = |exs: &[&CohortExample]| patient_sequences(exs, embeddings, task).map_err(at("embed"));
            let (train_seq, val_seq, hold_seq) = (seqs(&train_ex)?, seqs(&val_ex)?, seqs(&hold_ex)?);

            let frozen_bytes = std::fs::read(&tuned_path).map_err(at("finetune"))?;
            let mut seed_metrics = BTreeMap::new();
            for &kind in &cfg.methods {
                let outcome =
                    finetune(kind, &train_seq, &val_seq, &tuned, &cfg.finetune, seed).map_err(at("finetune"))?;
                let mut meta = BTreeMap::new();
                meta.insert("task".to_string(), task.name().to_string());
                meta.insert("seed".to_string(), seed.to_string());
                meta.insert("encoder_sha256".to_string(), digest.clone());
                std::fs::write(
                    seed_dir.join(format!("{}.ckpt", kind.name())),
                    outcome.model.to_bytes(&meta),
                )
                .map_err(at("write"))?;
                let scores = outcome.model.predict_many(&hold_seq).map_err(at("evaluate"))?;
                let preds: Vec<Prediction> = hold_seq
                    .iter()
                    .zip(&scores)
                    .map(|(p, &s)| Prediction {
                        patient_id: p.patient_id,
                        task,
                        p: s,
                        label: Some(p.label),
                    })
                    .collect();
                write_predictions_csv(&seed_dir.join(format!("predictions_{}.csv", kind.name())), &preds)
                    .map_err(at("evaluate"))?;
                let labels: Vec<bool> = hold_seq.iter().map(|p| p.label).collect();
                let value = auroc(&scores, &labels).map_err(at("evaluate"))?;
                seed_metrics.insert(method_name(kind), value);
                per_method.entry((task, kind)).or_default().push(value);
            }
            if std::fs::read(&tuned_path).map_err(at("finetune"))? != frozen_bytes {
                return Err(ExperimentError {
                    stage: "finetune",
                    source: "tuned encoder checkpoint changed on disk during finetuning".into(),
                });
            }
            write_json(&seed_dir.join(METRICS_FILE), &seed_metrics)?;
            splits.push((task, seed, sp));
        }
    }

    let reports = per_method
        .into_iter()
        .map(|((task, kind), aurocs)| {
            MetricsReport::new(task, method_name(kind), cfg.split.seeds.clone(), aurocs, &config_hash)
        })
        .collect();
    let metrics = MetricsFile { config_hash, reports };
    write_json(&run_dir.join(METRICS_FILE), &metrics)?;
    std::fs::write(run_dir.join(REPORT_FILE), render_report(&metrics)).map_err(at("write"))?;
    Ok(ExperimentOutcome {
        metrics,
        run_dir: run_dir.to_path_buf(),
        cohort_patients: patients,
        holdout,
        splits,
        corpus_note_ids,
        holdout_note_ids,
    })
}
