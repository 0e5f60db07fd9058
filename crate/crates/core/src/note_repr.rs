//! Single-note supervised tuning of the encoder and static per-note
//! embeddings taken from its `[CLS]` position.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{format_time, parse_time, Note, Task, Timestamp};
use crate::encoder::{Encoder, EncoderCheckpoint, EncoderError};
use crate::harness::{auroc, EarlyStopping, HarnessError, StopSignal};
use crate::numerics::{Adam, AdamConfig, Gradients, NumericsError, ParamSet, Tape, Tensor, Var};
use crate::text::Vocabulary;

pub const META_HEAD_WEIGHT: &str = "meta_head.w";
pub const META_HEAD_BIAS: &str = "meta_head.b";
const LONG_NOTES_KEY: &str = "long_notes";

#[derive(Debug, Error)]
pub enum NoteReprError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Metric(#[from] HarnessError),
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("patient {0} appears in both training and validation notes")]
    PatientOverlap(u64),
    #[error("patient has no notes")]
    NoNotes,
    #[error("embedding file line {line}: {reason}")]
    BadEmbeddingFile { line: usize, reason: String },
    #[error("checkpoint has no {0} head")]
    MissingHead(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How notes longer than the encoder's window are handled when embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LongNotePolicy {
    /// Keep the first window.
    #[default]
    Truncate,
    /// Average the `[CLS]` vectors of consecutive windows.
    ChunkMean,
}

impl LongNotePolicy {
    pub fn name(self) -> &'static str {
        match self {
            LongNotePolicy::Truncate => "truncate",
            LongNotePolicy::ChunkMean => "chunk_mean",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "truncate" => Some(LongNotePolicy::Truncate),
            "chunk_mean" => Some(LongNotePolicy::ChunkMean),
            _ => None,
        }
    }
}

/// A note carrying its patient's label for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledNote {
    pub note_id: u64,
    pub patient_id: u64,
    pub text: String,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Stop after this many epochs without improvement; 0 runs all epochs.
    pub patience: usize,
    pub clip_norm: Option<f64>,
    pub long_notes: LongNotePolicy,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            epochs: 4,
            batch_size: 32,
            lr: 1e-5,
            seed: 0,
            patience: 0,
            clip_norm: Some(1.0),
            long_notes: LongNotePolicy::Truncate,
        }
    }
}

/// Linear layer + logistic on the `[CLS]` vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaHead {
    /// `[d_model, 1]`.
    pub weight: Tensor,
    /// `[1]`.
    pub bias: Tensor,
}

impl MetaHead {
    pub fn zeros(d_model: usize) -> Self {
        MetaHead {
            weight: Tensor::zeros(&[d_model, 1]),
            bias: Tensor::zeros(&[1]),
        }
    }

    pub fn from_checkpoint(ck: &EncoderCheckpoint) -> Result<Self, NoteReprError> {
        let weight = ck
            .extra(META_HEAD_WEIGHT)
            .ok_or(NoteReprError::MissingHead("meta"))?
            .clone();
        let bias = ck
            .extra(META_HEAD_BIAS)
            .ok_or(NoteReprError::MissingHead("meta"))?
            .clone();
        Ok(MetaHead { weight, bias })
    }

    pub fn probability(&self, cls: &[f64]) -> f64 {
        let z: f64 = cls.iter().zip(self.weight.data()).map(|(a, b)| a * b).sum::<f64>() + self.bias.item();
        1.0 / (1.0 + (-z).exp())
    }
}

#[derive(Debug, Clone)]
pub struct MetaOutcome {
    /// Tuned encoder with the head stored as extras and `task` metadata.
    pub checkpoint: EncoderCheckpoint,
    pub head: MetaHead,
    /// Per-note validation AUROC after each epoch.
    pub val_aurocs: Vec<f64>,
    pub best_epoch: Option<usize>,
}

fn cls_probability<'t>(
    encoder: &Encoder,
    params: &ParamSet,
    tape: &'t Tape,
    ids: &[usize],
    rng: Option<&mut dyn rand::RngCore>,
) -> Result<Var<'t>, NoteReprError> {
    let mask = vec![true; ids.len() * ids.len()];
    let mut rng = rng;
    let pass = encoder.content_pass_with(params, tape, ids, &mask, None, 0, &mut rng)?;
    let cls = pass.hidden.select_rows(&[0])?;
    let logit = cls
        .matmul(params.var(tape, META_HEAD_WEIGHT)?)?
        .add_row(params.var(tape, META_HEAD_BIAS)?)?;
    Ok(logit.sigmoid().sum())
}

fn encoder_subset(params: &ParamSet) -> Result<ParamSet, NumericsError> {
    let mut out = ParamSet::new();
    for (_, name, t) in params.iter() {
        if !name.starts_with("meta_head.") {
            out.insert(name, t.clone())?;
        }
    }
    Ok(out)
}

fn score_notes(encoder: &Encoder, params: &ParamSet, notes: &[Vec<usize>]) -> Result<Vec<f64>, NoteReprError> {
    notes
        .par_iter()
        .map(|ids| {
            let tape = Tape::new();
            Ok(cls_probability(encoder, params, &tape, ids, None)?.value().item())
        })
        .collect()
}

/// Trains encoder and head end to end on single notes with the patient
/// label, keeping the parameters of the epoch with the best per-note
/// validation AUROC. With zero epochs the encoder is returned unchanged and
/// the head is zero.
pub fn meta_finetune(
    base: &EncoderCheckpoint,
    task: Task,
    train: &[LabeledNote],
    val: &[LabeledNote],
    cfg: &MetaConfig,
) -> Result<MetaOutcome, NoteReprError> {
    if train.is_empty() {
        return Err(NoteReprError::EmptySet("training"));
    }
    if val.is_empty() {
        return Err(NoteReprError::EmptySet("validation"));
    }
    let train_patients: HashSet<u64> = train.iter().map(|n| n.patient_id).collect();
    if let Some(n) = val.iter().find(|n| train_patients.contains(&n.patient_id)) {
        return Err(NoteReprError::PatientOverlap(n.patient_id));
    }
    let encoder = &base.encoder;
    let config = encoder.config().clone();
    let tokenize = |notes: &[LabeledNote]| -> Result<Vec<Vec<usize>>, NoteReprError> {
        notes
            .iter()
            .map(|n| {
                Ok(base
                    .vocab
                    .tokenize(&n.text, config.max_len)
                    .map_err(EncoderError::from)?
                    .content()
                    .to_vec())
            })
            .collect()
    };
    let train_ids = tokenize(train)?;
    let val_ids = tokenize(val)?;
    let val_labels: Vec<bool> = val.iter().map(|n| n.label).collect();

    let mut params = encoder.params().clone();
    let head = MetaHead::zeros(config.d_model);
    params.insert(META_HEAD_WEIGHT, head.weight.clone())?;
    params.insert(META_HEAD_BIAS, head.bias.clone())?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x3e7a_f1e7);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_params = params.clone();
    let batch_size = cfg.batch_size.max(1);

    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let jobs: Vec<(usize, u64)> = chunk.iter().map(|&i| (i, rng.random())).collect();
            let p = &params;
            let results: Vec<Result<Gradients, NoteReprError>> = jobs
                .par_iter()
                .map(|&(i, dropout_seed)| {
                    let mut drng = ChaCha8Rng::seed_from_u64(dropout_seed);
                    let tape = Tape::new();
                    let prob = cls_probability(encoder, p, &tape, &train_ids[i], Some(&mut drng))?;
                    let loss = prob.bce(if train[i].label { 1.0 } else { 0.0 })?;
                    Ok(tape.backward(loss)?)
                })
                .collect();
            let mut grads = Gradients::default();
            for g in results {
                grads.add_assign(&g?);
            }
            grads.scale(1.0 / jobs.len() as f64);
            if let Some(max) = cfg.clip_norm {
                grads.clip_norm(max);
            }
            adam.step(&mut params, &grads)?;
        }
        let scores = score_notes(encoder, &params, &val_ids)?;
        let value = auroc(&scores, &val_labels)?;
        let signal = stopper.observe(value);
        if stopper.best_epoch() == Some(stopper.history().len() - 1) {
            best_params = params.clone();
        }
        if signal == StopSignal::Stop {
            break;
        }
    }

    let head = MetaHead {
        weight: best_params.get(META_HEAD_WEIGHT).expect("inserted").clone(),
        bias: best_params.get(META_HEAD_BIAS).expect("inserted").clone(),
    };
    let tuned = Encoder::from_params(config, encoder_subset(&best_params)?)?;
    let mut checkpoint = EncoderCheckpoint::new(tuned, base.vocab.clone(), base.step, cfg.seed);
    checkpoint.extras = vec![
        (META_HEAD_WEIGHT.to_string(), head.weight.clone()),
        (META_HEAD_BIAS.to_string(), head.bias.clone()),
    ];
    checkpoint.metadata.insert("task".into(), task.name().into());
    checkpoint
        .metadata
        .insert("meta_epochs_run".into(), stopper.history().len().to_string());
    checkpoint
        .metadata
        .insert(LONG_NOTES_KEY.into(), cfg.long_notes.name().into());
    Ok(MetaOutcome {
        checkpoint,
        head,
        val_aurocs: stopper.history().to_vec(),
        best_epoch: stopper.best_epoch(),
    })
}

/// Last-layer `[CLS]` vector E_i of one note.
#[derive(Debug, Clone, PartialEq)]
pub struct NoteEmbedding {
    pub patient_id: u64,
    pub note_id: u64,
    pub chart_time: Timestamp,
    pub vector: Vec<f64>,
}

/// `[CLS]` vector of `text` under `policy`.
pub fn embed_text(
    encoder: &Encoder,
    vocab: &Vocabulary,
    text: &str,
    policy: LongNotePolicy,
) -> Result<Vec<f64>, NoteReprError> {
    let max_len = encoder.config().max_len;
    let d = encoder.config().d_model;
    let chunks = match policy {
        LongNotePolicy::Truncate => vec![vocab.tokenize(text, max_len).map_err(EncoderError::from)?],
        LongNotePolicy::ChunkMean => vocab.tokenize_chunks(text, max_len).map_err(EncoderError::from)?,
    };
    let mut acc = vec![0.0; d];
    for chunk in &chunks {
        let h = encoder.hidden_states(chunk.content())?;
        acc.iter_mut().zip(h.row(0)).for_each(|(a, b)| *a += b);
    }
    if chunks.len() > 1 {
        let n = chunks.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
    }
    Ok(acc)
}

fn policy_of(ck: &EncoderCheckpoint) -> LongNotePolicy {
    ck.metadata
        .get(LONG_NOTES_KEY)
        .and_then(|s| LongNotePolicy::parse(s))
        .unwrap_or_default()
}

pub fn embed_note(ck: &EncoderCheckpoint, note: &Note) -> Result<NoteEmbedding, NoteReprError> {
    Ok(NoteEmbedding {
        patient_id: note.patient_id,
        note_id: note.note_id,
        chart_time: note.chart_time,
        vector: embed_text(&ck.encoder, &ck.vocab, &note.text, policy_of(ck))?,
    })
}

/// Embeds notes in parallel; output order is input order.
pub fn embed_notes(ck: &EncoderCheckpoint, notes: &[Note]) -> Result<Vec<NoteEmbedding>, NoteReprError> {
    notes.par_iter().map(|n| embed_note(ck, n)).collect()
}

/// Embeddings ordered by chart time, ties by note id.
pub fn embed_patient(ck: &EncoderCheckpoint, notes: &[Note]) -> Result<Vec<NoteEmbedding>, NoteReprError> {
    if notes.is_empty() {
        return Err(NoteReprError::NoNotes);
    }
    let mut sorted: Vec<&Note> = notes.iter().collect();
    sorted.sort_by_key(|n| (n.chart_time, n.note_id));
    sorted.into_par_iter().map(|n| embed_note(ck, n)).collect()
}

#[derive(Serialize, Deserialize)]
struct EmbeddingRecord {
    patient_id: u64,
    note_id: u64,
    chart_time: String,
    embedding: Vec<f64>,
}

pub fn write_embeddings_jsonl(path: &Path, embeddings: &[NoteEmbedding]) -> Result<(), NoteReprError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in embeddings {
        let rec = EmbeddingRecord {
            patient_id: e.patient_id,
            note_id: e.note_id,
            chart_time: format_time(e.chart_time),
            embedding: e.vector.clone(),
        };
        serde_json::to_writer(&mut f, &rec).map_err(std::io::Error::from)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_embeddings_jsonl(path: &Path) -> Result<Vec<NoteEmbedding>, NoteReprError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| NoteReprError::BadEmbeddingFile { line: i + 1, reason };
        let rec: EmbeddingRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let chart_time =
            parse_time(&rec.chart_time).ok_or_else(|| bad(format!("bad chart_time {:?}", rec.chart_time)))?;
        out.push(NoteEmbedding {
            patient_id: rec.patient_id,
            note_id: rec.note_id,
            chart_time,
            vector: rec.embedding,
        });
    }
    Ok(out)
}
