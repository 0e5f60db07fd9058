//! Subcommand bodies and the on-disk layout they share.
//!
//! ```text
//! <run>/data/                      synth output (six tables + manifest)
//! <run>/cohort/                    tally.txt, stats.txt, cohort.jsonl, holdout.txt
//! <run>/encoder/                   pretrained.ckpt (+ .vocab), loss.csv, corpus_note_ids.txt
//! <run>/<task>/seed_<s>/           split.json, tuned.ckpt, embeddings.jsonl,
//!                                  <method>.ckpt, predictions_<method>.csv, metrics.json
//! <run>/metrics.json, report.txt
//! <run>/snapshots/<stage>.ini      resolved config of the last invocation of each stage
//! ```

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use cxl_core::aggregator::{finetune, write_predictions_csv, Aggregator, AggregatorError, AggregatorKind, Prediction};
use cxl_core::cohort::{
    cohort_stats, select_cohort, synth_generate, CohortError, CohortExample, SignalKind, SynthConfig, Tables, Task,
};
use cxl_core::config::{ConfigError, RunConfig};
use cxl_core::encoder::{pretrain, smoothed_loss, write_loss_csv, EncoderCheckpoint, EncoderError, PretrainConfig};
use cxl_core::harness::{
    auroc, embed_cohort, holdout_ids, holdout_note_ids, labeled_notes, method_name, patient_sequences,
    pretraining_corpus, render_report, run_experiment, split, ExperimentError, HarnessError, MetricsFile,
    MetricsReport, Split, METRICS_FILE, REPORT_FILE,
};
use cxl_core::note_repr::{
    meta_finetune, read_embeddings_jsonl, write_embeddings_jsonl, MetaConfig, NoteEmbedding, NoteReprError,
};
use cxl_core::text::Vocabulary;
use thiserror::Error;

use crate::{Command, Common, SignalArg, RUN_DIR_ENV};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("cohort: {0}")]
    Cohort(#[from] CohortError),
    #[error("encoder: {0}")]
    Encoder(#[from] EncoderError),
    #[error("embedding: {0}")]
    NoteRepr(#[from] NoteReprError),
    #[error("aggregator: {0}")]
    Aggregator(#[from] AggregatorError),
    #[error("metric: {0}")]
    Harness(#[from] HarnessError),
    #[error("{0}")]
    Experiment(#[from] ExperimentError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("missing artifact {path}; run `cxl {stage}` first")]
    MissingArtifact { path: String, stage: &'static str },
    #[error("inconsistent artifacts: {0}")]
    Inconsistent(String),
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(path, contents).map_err(io_err(path))
}

fn require(path: PathBuf, stage: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::MissingArtifact {
            path: path.display().to_string(),
            stage,
        })
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}

struct Ctx {
    cfg: RunConfig,
    dir: PathBuf,
}

impl Ctx {
    fn cohort_dir(&self) -> PathBuf {
        self.dir.join("cohort")
    }

    fn encoder_path(&self) -> PathBuf {
        self.dir.join("encoder").join("pretrained.ckpt")
    }

    fn seed_dir(&self, task: Task, seed: u64) -> PathBuf {
        self.dir.join(task.name()).join(format!("seed_{seed}"))
    }

    fn runs(&self) -> Vec<(Task, u64)> {
        self.cfg
            .tasks
            .iter()
            .flat_map(|&t| self.cfg.split.seeds.iter().map(move |&s| (t, s)))
            .collect()
    }

    fn snapshot(&self, stage: &str) -> Result<()> {
        write_file(
            &self.dir.join("snapshots").join(format!("{stage}.ini")),
            self.cfg.snapshot(),
        )
    }

    fn tables(&self) -> Result<Tables> {
        Ok(Tables::load(&self.cfg.data_dir)?)
    }

    fn cohort(&self) -> Result<Vec<CohortExample>> {
        let path = require(self.cohort_dir().join("cohort.jsonl"), "cohort")?;
        let f = std::fs::File::open(&path).map_err(io_err(&path))?;
        let mut out = Vec::new();
        for line in std::io::BufReader::new(f).lines() {
            let line = line.map_err(io_err(&path))?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }

    fn holdout(&self) -> Result<Vec<u64>> {
        let path = require(self.cohort_dir().join("holdout.txt"), "cohort")?;
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.trim()
                    .parse()
                    .map_err(|_| CliError::Inconsistent(format!("bad patient id {l:?} in {}", path.display())))
            })
            .collect()
    }

    fn split(&self, task: Task, seed: u64) -> Result<Split> {
        let path = require(self.seed_dir(task, seed).join("split.json"), "meta-finetune")?;
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn tuned(&self, task: Task, seed: u64) -> Result<EncoderCheckpoint> {
        let path = require(self.seed_dir(task, seed).join("tuned.ckpt"), "meta-finetune")?;
        Ok(EncoderCheckpoint::load(&path)?)
    }

    fn embeddings(&self, task: Task, seed: u64) -> Result<BTreeMap<u64, Vec<NoteEmbedding>>> {
        let path = require(self.seed_dir(task, seed).join("embeddings.jsonl"), "embed")?;
        let mut map: BTreeMap<u64, Vec<NoteEmbedding>> = BTreeMap::new();
        for e in read_embeddings_jsonl(&path)? {
            map.entry(e.patient_id).or_default().push(e);
        }
        Ok(map)
    }
}

fn context(common: &Common, seed_sets_base: bool) -> Result<Ctx> {
    let dir = match std::env::var_os(RUN_DIR_ENV) {
        Some(d) if !d.is_empty() => PathBuf::from(d),
        _ => common.out.clone().unwrap_or_else(|| PathBuf::from("run")),
    };
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig {
            data_dir: dir.join("data"),
            ..RunConfig::default()
        },
    };
    if let Some(task) = common.task {
        cfg.tasks = vec![task.into()];
    }
    if let Some(seed) = common.seed {
        if seed_sets_base {
            cfg.seed = seed;
        } else {
            cfg.split.seeds = vec![seed];
        }
    }
    cfg.validate()?;
    Ok(Ctx { cfg, dir })
}

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            common,
            patients,
            signal,
            repeats,
            length_scale,
        } => {
            let ctx = context(&common, true)?;
            let defaults = SynthConfig::default();
            let config = SynthConfig {
                n_patients: patients,
                signal: match signal {
                    SignalArg::None => SignalKind::None,
                    SignalArg::Keyword => SignalKind::Keyword,
                    SignalArg::Temporal => SignalKind::Temporal,
                },
                sentinel_repeats: repeats,
                length_scale: length_scale.unwrap_or(defaults.length_scale),
                ..defaults
            };
            synth(&ctx, &config, common.seed.unwrap_or(0))
        }
        Command::Cohort { common } => cohort(&context(&common, false)?),
        Command::Pretrain { common } => pretrain_stage(&context(&common, true)?),
        Command::MetaFinetune { common } => meta_stage(&context(&common, false)?),
        Command::Embed { common } => embed_stage(&context(&common, false)?),
        Command::Finetune { common, method } => {
            let ctx = context(&common, false)?;
            let methods = method.map_or_else(|| ctx.cfg.methods.clone(), |m| vec![m.into()]);
            finetune_stage(&ctx, &methods)
        }
        Command::Evaluate { common } => evaluate_stage(&context(&common, false)?),
        Command::Report { common } => report_stage(&context(&common, false)?),
        Command::Run { common } => {
            let ctx = context(&common, false)?;
            ctx.snapshot("run")?;
            let outcome = run_experiment(&ctx.cfg, &ctx.dir)?;
            print!("{}", render_report(&outcome.metrics));
            Ok(())
        }
    }
}

fn synth(ctx: &Ctx, config: &SynthConfig, seed: u64) -> Result<()> {
    let out = synth_generate(config, seed)?;
    let dir = ctx.dir.join("data");
    out.write(&dir)?;
    println!(
        "patients={} notes={} dir={}",
        out.tables.patients.len(),
        out.tables.notes.len(),
        dir.display()
    );
    Ok(())
}

fn cohort(ctx: &Ctx) -> Result<()> {
    ctx.snapshot("cohort")?;
    let tables = ctx.tables()?;
    let selection = select_cohort(&tables.records(), &ctx.cfg.rules)?;
    let dir = ctx.cohort_dir();
    let tally = selection.tally.render();
    write_file(&dir.join("tally.txt"), &tally)?;
    let mut body = String::new();
    for e in &selection.examples {
        body.push_str(&serde_json::to_string(e)?);
        body.push('\n');
    }
    write_file(&dir.join("cohort.jsonl"), body)?;
    if !selection.examples.is_empty() {
        write_file(&dir.join("stats.txt"), cohort_stats(&selection.examples)?.render())?;
    }
    print!("{tally}");
    let patients: Vec<u64> = selection.examples.iter().map(|e| e.patient_id).collect();
    let holdout_path = dir.join("holdout.txt");
    match holdout_ids(&patients, &ctx.cfg.split) {
        Ok(holdout) => {
            let text: String = holdout.iter().map(|id| format!("{id}\n")).collect();
            write_file(&holdout_path, text)
        }
        // The tally stands on its own; later stages fail on the missing holdout.
        Err(e @ HarnessError::TooFewPatients { .. }) => {
            if holdout_path.exists() {
                std::fs::remove_file(&holdout_path).map_err(io_err(&holdout_path))?;
            }
            eprintln!("note: no holdout written: {e}");
            Ok(())
        }
        Err(e) => Err(e.into()),
    }
}

fn pretrain_stage(ctx: &Ctx) -> Result<()> {
    ctx.snapshot("pretrain")?;
    let holdout: HashSet<u64> = ctx.holdout()?.into_iter().collect();
    let tables = ctx.tables()?;
    let corpus = pretraining_corpus(&tables, &holdout);
    let held_notes: HashSet<u64> = holdout_note_ids(&tables, &holdout).into_iter().collect();
    let vocab = Vocabulary::build(
        corpus.iter().map(|n| n.text.as_str()),
        ctx.cfg.vocab_min_frequency,
        ctx.cfg.vocab_max_size,
    )
    .map_err(EncoderError::from)?;
    let mut enc = ctx.cfg.encoder.clone();
    enc.vocab_size = vocab.len();
    let train = PretrainConfig {
        seed: ctx.cfg.seed,
        ..ctx.cfg.pretrain.clone()
    };
    let out = pretrain(&corpus, &vocab, enc, &train, &held_notes)?;
    let path = ctx.encoder_path();
    let dir = path.parent().expect("has parent").to_path_buf();
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    out.checkpoint.save(&path)?;
    write_loss_csv(&dir.join("loss.csv"), &out.losses)?;
    let ids: String = corpus.iter().map(|n| format!("{}\n", n.note_id)).collect();
    write_file(&dir.join("corpus_note_ids.txt"), ids)?;
    let last = smoothed_loss(&out.losses, 50).map_or("none".to_string(), |l| format!("{l:.4}"));
    println!(
        "steps={} vocab={} baseline={:.4} smoothed_loss={} checkpoint={}",
        train.steps,
        vocab.len(),
        out.baseline,
        last,
        path.display()
    );
    Ok(())
}

fn members<'a>(by_id: &BTreeMap<u64, &'a CohortExample>, ids: &[u64]) -> Result<Vec<&'a CohortExample>> {
    ids.iter()
        .map(|id| {
            by_id
                .get(id)
                .copied()
                .ok_or_else(|| CliError::Inconsistent(format!("patient {id} is not in the cohort")))
        })
        .collect()
}

fn meta_stage(ctx: &Ctx) -> Result<()> {
    ctx.snapshot("meta-finetune")?;
    let cohort = ctx.cohort()?;
    let by_id: BTreeMap<u64, &CohortExample> = cohort.iter().map(|e| (e.patient_id, e)).collect();
    let patients: Vec<u64> = by_id.keys().copied().collect();
    let holdout = ctx.holdout()?;
    let base = EncoderCheckpoint::load(&require(ctx.encoder_path(), "pretrain")?)?;
    for (task, seed) in ctx.runs() {
        let sp = split(&patients, &ctx.cfg.split, seed)?;
        if sp.holdout != holdout {
            return Err(CliError::Inconsistent(
                "holdout differs from cohort/holdout.txt; rerun `cxl cohort` with this config".into(),
            ));
        }
        let dir = ctx.seed_dir(task, seed);
        write_json(&dir.join("split.json"), &sp)?;
        let cfg = MetaConfig {
            seed,
            ..ctx.cfg.meta.clone()
        };
        let outcome = meta_finetune(
            &base,
            task,
            &labeled_notes(&members(&by_id, &sp.train)?, task),
            &labeled_notes(&members(&by_id, &sp.val)?, task),
            &cfg,
        )?;
        outcome.checkpoint.save(&dir.join("tuned.ckpt"))?;
        let best = outcome.best_epoch.map_or("none".to_string(), |b| b.to_string());
        println!("task={task} seed={seed} best_epoch={best}");
    }
    Ok(())
}

fn embed_stage(ctx: &Ctx) -> Result<()> {
    ctx.snapshot("embed")?;
    let cohort = ctx.cohort()?;
    let all: Vec<&CohortExample> = cohort.iter().collect();
    for (task, seed) in ctx.runs() {
        let tuned = ctx.tuned(task, seed)?;
        let map = embed_cohort(&tuned, &all)?;
        let flat: Vec<NoteEmbedding> = map.values().flatten().cloned().collect();
        let path = ctx.seed_dir(task, seed).join("embeddings.jsonl");
        write_embeddings_jsonl(&path, &flat)?;
        println!("task={task} seed={seed} notes={} path={}", flat.len(), path.display());
    }
    Ok(())
}

fn finetune_stage(ctx: &Ctx, methods: &[AggregatorKind]) -> Result<()> {
    ctx.snapshot("finetune")?;
    let cohort = ctx.cohort()?;
    let by_id: BTreeMap<u64, &CohortExample> = cohort.iter().map(|e| (e.patient_id, e)).collect();
    for (task, seed) in ctx.runs() {
        let sp = ctx.split(task, seed)?;
        let tuned = ctx.tuned(task, seed)?;
        let embeddings = ctx.embeddings(task, seed)?;
        let train = patient_sequences(&members(&by_id, &sp.train)?, &embeddings, task)?;
        let val = patient_sequences(&members(&by_id, &sp.val)?, &embeddings, task)?;
        let digest = tuned.digest();
        for &kind in methods {
            let outcome = finetune(kind, &train, &val, &tuned, &ctx.cfg.finetune, seed)?;
            let mut meta = BTreeMap::new();
            meta.insert("task".to_string(), task.name().to_string());
            meta.insert("seed".to_string(), seed.to_string());
            meta.insert("encoder_sha256".to_string(), digest.clone());
            let path = ctx.seed_dir(task, seed).join(format!("{}.ckpt", kind.name()));
            write_file(&path, outcome.model.to_bytes(&meta))?;
            let best = outcome.best_epoch.map_or("none".to_string(), |b| b.to_string());
            println!("task={task} seed={seed} method={} best_epoch={best}", method_name(kind));
        }
    }
    Ok(())
}

fn evaluate_stage(ctx: &Ctx) -> Result<()> {
    ctx.snapshot("evaluate")?;
    let cohort = ctx.cohort()?;
    let by_id: BTreeMap<u64, &CohortExample> = cohort.iter().map(|e| (e.patient_id, e)).collect();
    for (task, seed) in ctx.runs() {
        let dir = ctx.seed_dir(task, seed);
        let sp = ctx.split(task, seed)?;
        let embeddings = ctx.embeddings(task, seed)?;
        let holdout = patient_sequences(&members(&by_id, &sp.holdout)?, &embeddings, task)?;
        let labels: Vec<bool> = holdout.iter().map(|p| p.label).collect();
        let mut metrics = BTreeMap::new();
        for &kind in &ctx.cfg.methods {
            let path = require(dir.join(format!("{}.ckpt", kind.name())), "finetune")?;
            let (model, _) = Aggregator::from_bytes(&std::fs::read(&path).map_err(io_err(&path))?)?;
            let scores = model.predict_many(&holdout)?;
            let preds: Vec<Prediction> = holdout
                .iter()
                .zip(&scores)
                .map(|(p, &s)| Prediction {
                    patient_id: p.patient_id,
                    task,
                    p: s,
                    label: Some(p.label),
                })
                .collect();
            write_predictions_csv(&dir.join(format!("predictions_{}.csv", kind.name())), &preds)?;
            let value = auroc(&scores, &labels)?;
            println!("task={task} seed={seed} method={} auroc={value:.4}", method_name(kind));
            metrics.insert(method_name(kind), value);
        }
        write_json(&dir.join(METRICS_FILE), &metrics)?;
    }
    Ok(())
}

fn report_stage(ctx: &Ctx) -> Result<()> {
    ctx.snapshot("report")?;
    let hash = ctx.cfg.hash();
    let mut methods = ctx.cfg.methods.clone();
    methods.sort();
    methods.dedup();
    let mut tasks = ctx.cfg.tasks.clone();
    tasks.sort();
    let mut reports = Vec::new();
    for &task in &tasks {
        let mut per_method: Vec<Vec<f64>> = vec![Vec::new(); methods.len()];
        for &seed in &ctx.cfg.split.seeds {
            let path = require(ctx.seed_dir(task, seed).join(METRICS_FILE), "evaluate")?;
            let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
            let m: BTreeMap<String, f64> = serde_json::from_str(&text)?;
            for (k, &kind) in methods.iter().enumerate() {
                let v = m.get(method_name(kind)).ok_or_else(|| {
                    CliError::Inconsistent(format!("{} has no entry for {}", path.display(), method_name(kind)))
                })?;
                per_method[k].push(*v);
            }
        }
        for (k, &kind) in methods.iter().enumerate() {
            reports.push(MetricsReport::new(
                task,
                method_name(kind),
                ctx.cfg.split.seeds.clone(),
                per_method[k].clone(),
                &hash,
            ));
        }
    }
    let metrics = MetricsFile {
        config_hash: hash,
        reports,
    };
    write_json(&ctx.dir.join(METRICS_FILE), &metrics)?;
    let text = render_report(&metrics);
    write_file(&ctx.dir.join(REPORT_FILE), &text)?;
    let mut stdout = std::io::stdout().lock();
    stdout
        .write_all(text.as_bytes())
        .map_err(io_err(Path::new("<stdout>")))?;
    Ok(())
}
