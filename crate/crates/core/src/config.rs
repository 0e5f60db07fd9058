//! Sectioned key-value run configuration.
//!
//! Every key has a default; unknown sections and keys are rejected. The
//! canonical snapshot lists every resolved value, and its SHA-256 is the
//! config hash stamped on run outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;
use thiserror::Error;

use crate::aggregator::{AggregatorConfig, AggregatorKind};
use crate::cohort::{SelectionRules, Task};
use crate::encoder::{EncoderConfig, PretrainConfig};
use crate::harness::SplitSpec;
use crate::note_repr::{LongNotePolicy, MetaConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unknown config section [{0}]")]
    UnknownSection(String),
    #[error("unknown config key {section}.{key}")]
    UnknownKey { section: String, key: String },
    #[error("duplicate config key {section}.{key}")]
    DuplicateKey { section: String, key: String },
    #[error("config value {section}.{key} = {value:?}: {reason}")]
    BadValue {
        section: String,
        key: String,
        value: String,
        reason: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Fully resolved settings for a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Directory with the six input tables.
    pub data_dir: PathBuf,
    /// Seeds encoder initialization and pretraining.
    pub seed: u64,
    pub methods: Vec<AggregatorKind>,
    pub rules: SelectionRules,
    pub vocab_min_frequency: usize,
    pub vocab_max_size: usize,
    /// `vocab_size` is ignored; it is taken from the built vocabulary.
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    /// `seed` is ignored; each run seed drives its own meta-finetuning.
    pub meta: MetaConfig,
    pub finetune: AggregatorConfig,
    pub split: SplitSpec,
    pub tasks: Vec<Task>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: PathBuf::from("data"),
            seed: 0,
            methods: vec![AggregatorKind::BiLstm, AggregatorKind::Mean],
            rules: SelectionRules::default(),
            vocab_min_frequency: 1,
            vocab_max_size: 30_000,
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            meta: MetaConfig::default(),
            finetune: AggregatorConfig::default(),
            split: SplitSpec::default(),
            tasks: Task::ALL.to_vec(),
        }
    }
}

fn bad(section: &str, key: &str, value: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::BadValue {
        section: section.into(),
        key: key.into(),
        value: value.into(),
        reason: reason.into(),
    }
}

fn num<T: FromStr>(section: &str, key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e: T::Err| bad(section, key, value, e.to_string()))
}

fn list<T, F>(section: &str, key: &str, value: &str, f: F) -> Result<Vec<T>, ConfigError>
where
    F: Fn(&str) -> Option<T>,
{
    let items: Vec<T> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| f(s).ok_or_else(|| bad(section, key, value, format!("bad item {s:?}"))))
        .collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(bad(section, key, value, "empty list"));
    }
    Ok(items)
}

fn opt_f64(section: &str, key: &str, value: &str) -> Result<Option<f64>, ConfigError> {
    if value.trim().eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        num(section, key, value).map(Some)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |x| format!("{x:?}"))
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    /// Parses `text`; a relative `[data] dir` is resolved against `base`.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self, ConfigError> {
        let ini = Ini::load_from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let mut cfg = RunConfig::default();
        for (section, props) in ini.iter() {
            let section = section.unwrap_or("");
            let mut seen = BTreeSet::new();
            for (key, value) in props.iter() {
                if !seen.insert(key) {
                    return Err(ConfigError::DuplicateKey {
                        section: section.into(),
                        key: key.into(),
                    });
                }
                cfg.set(section, key, value)?;
            }
        }
        if let Some(base) = base {
            if cfg.data_dir.is_relative() {
                cfg.data_dir = base.join(&cfg.data_dir);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, path.parent())
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> Result<(), ConfigError> {
        let s = section;
        match (section, key) {
            ("data", "dir") => self.data_dir = PathBuf::from(v.trim()),
            ("run", "seed") => self.seed = num(s, key, v)?,
            ("run", "methods") => {
                self.methods = list(s, key, v, |x| match x {
                    "bilstm" => Some(AggregatorKind::BiLstm),
                    "mean" => Some(AggregatorKind::Mean),
                    _ => None,
                })?
            }
            ("cohort", "min_age") => self.rules.min_age = num(s, key, v)?,
            ("cohort", "mv_min_days") => self.rules.mv_min_days = num(s, key, v)?,
            ("cohort", "mv_hours") => self.rules.mv_hours_exclusive = num(s, key, v)?,
            ("cohort", "window_hours") => self.rules.window_hours = num(s, key, v)?,
            ("cohort", "categories") => {
                self.rules.note_categories = list(s, key, v, |x| Some(x.to_ascii_lowercase()))?.into_iter().collect()
            }
            ("cohort", "excluded_tags") => {
                self.rules.excluded_tags = list(s, key, v, |x| Some(x.to_ascii_lowercase()))?.into_iter().collect()
            }
            ("vocab", "min_frequency") => self.vocab_min_frequency = num(s, key, v)?,
            ("vocab", "max_size") => self.vocab_max_size = num(s, key, v)?,
            ("encoder", "n_layers") => self.encoder.n_layers = num(s, key, v)?,
            ("encoder", "d_model") => self.encoder.d_model = num(s, key, v)?,
            ("encoder", "n_heads") => self.encoder.n_heads = num(s, key, v)?,
            ("encoder", "d_head") => self.encoder.d_head = num(s, key, v)?,
            ("encoder", "d_inner") => self.encoder.d_inner = num(s, key, v)?,
            ("encoder", "max_len") => self.encoder.max_len = num(s, key, v)?,
            ("encoder", "mem_len") => self.encoder.mem_len = num(s, key, v)?,
            ("encoder", "predict_fraction") => self.encoder.predict_fraction = num(s, key, v)?,
            ("encoder", "dropout") => self.encoder.dropout = num(s, key, v)?,
            ("pretrain", "steps") => self.pretrain.steps = num(s, key, v)?,
            ("pretrain", "batch") => self.pretrain.batch_size = num(s, key, v)?,
            ("pretrain", "lr") => self.pretrain.lr = num(s, key, v)?,
            ("pretrain", "clip_norm") => self.pretrain.clip_norm = opt_f64(s, key, v)?,
            ("meta", "epochs") => self.meta.epochs = num(s, key, v)?,
            ("meta", "batch") => self.meta.batch_size = num(s, key, v)?,
            ("meta", "lr") => self.meta.lr = num(s, key, v)?,
            ("meta", "patience") => self.meta.patience = num(s, key, v)?,
            ("meta", "clip_norm") => self.meta.clip_norm = opt_f64(s, key, v)?,
            ("meta", "long_notes") => {
                self.meta.long_notes =
                    LongNotePolicy::parse(v.trim()).ok_or_else(|| bad(s, key, v, "expected truncate or chunk_mean"))?
            }
            ("finetune", "layers") => self.finetune.n_layers = num(s, key, v)?,
            ("finetune", "batch") => self.finetune.batch_size = num(s, key, v)?,
            ("finetune", "lr") => self.finetune.lr = num(s, key, v)?,
            ("finetune", "hidden_size") => self.finetune.hidden_size = num(s, key, v)?,
            ("finetune", "patience") => self.finetune.patience = num(s, key, v)?,
            ("finetune", "max_epochs") => self.finetune.max_epochs = num(s, key, v)?,
            ("finetune", "predictor_width") => self.finetune.predictor_width = num(s, key, v)?,
            ("finetune", "clip_norm") => self.finetune.clip_norm = opt_f64(s, key, v)?,
            ("split", "holdout") => self.split.holdout_fraction = num(s, key, v)?,
            ("split", "ratio") => {
                let (a, b) = v.split_once(':').ok_or_else(|| bad(s, key, v, "expected TRAIN:VAL"))?;
                self.split.train_ratio = num(s, key, a)?;
                self.split.val_ratio = num(s, key, b)?;
            }
            ("split", "seeds") => self.split.seeds = list(s, key, v, |x| x.parse().ok())?,
            ("split", "holdout_seed") => self.split.holdout_seed = num(s, key, v)?,
            ("task", "tasks") => {
                let tasks: BTreeSet<Task> = list(s, key, v, |x| x.parse().ok())?.into_iter().collect();
                self.tasks = tasks.into_iter().collect();
            }
            (
                "data" | "run" | "cohort" | "vocab" | "encoder" | "pretrain" | "meta" | "finetune" | "split" | "task",
                _,
            ) => {
                return Err(ConfigError::UnknownKey {
                    section: section.into(),
                    key: key.into(),
                })
            }
            _ => return Err(ConfigError::UnknownSection(section.into())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let wrap = |section: &str, r: Result<(), String>| r.map_err(|e| bad(section, "*", "", e));
        wrap("cohort", self.rules.validate().map_err(|e| e.to_string()))?;
        let mut enc = self.encoder.clone();
        enc.vocab_size = crate::text::NUM_SPECIAL + 1;
        wrap("encoder", enc.validate().map_err(|e| e.to_string()))?;
        wrap("finetune", self.finetune.validate().map_err(|e| e.to_string()))?;
        wrap("split", self.split.validate().map_err(|e| e.to_string()))?;
        if self.split.seeds.is_empty() {
            return Err(bad("split", "seeds", "", "at least one seed is required"));
        }
        if self.tasks.is_empty() {
            return Err(bad("task", "tasks", "", "at least one task is required"));
        }
        if self.methods.is_empty() {
            return Err(bad("run", "methods", "", "at least one method is required"));
        }
        Ok(())
    }

    /// Every resolved value in canonical form; parsing it yields `self`.
    pub fn snapshot(&self) -> String {
        let mut sections: BTreeMap<&str, Vec<(&str, String)>> = BTreeMap::new();
        let e = &self.encoder;
        let r = &self.rules;
        sections.insert("data", vec![("dir", self.data_dir.display().to_string())]);
        sections.insert(
            "run",
            vec![
                ("seed", self.seed.to_string()),
                (
                    "methods",
                    join(&self.methods.iter().map(|m| m.name()).collect::<Vec<_>>()),
                ),
            ],
        );
        sections.insert(
            "cohort",
            vec![
                ("min_age", format!("{:?}", r.min_age)),
                ("mv_min_days", r.mv_min_days.to_string()),
                ("mv_hours", format!("{:?}", r.mv_hours_exclusive)),
                ("window_hours", r.window_hours.to_string()),
                (
                    "categories",
                    join(&r.note_categories.iter().map(String::as_str).collect::<Vec<_>>()),
                ),
                (
                    "excluded_tags",
                    join(&r.excluded_tags.iter().map(String::as_str).collect::<Vec<_>>()),
                ),
            ],
        );
        sections.insert(
            "vocab",
            vec![
                ("min_frequency", self.vocab_min_frequency.to_string()),
                ("max_size", self.vocab_max_size.to_string()),
            ],
        );
        sections.insert(
            "encoder",
            vec![
                ("n_layers", e.n_layers.to_string()),
                ("d_model", e.d_model.to_string()),
                ("n_heads", e.n_heads.to_string()),
                ("d_head", e.d_head.to_string()),
                ("d_inner", e.d_inner.to_string()),
                ("max_len", e.max_len.to_string()),
                ("mem_len", e.mem_len.to_string()),
                ("predict_fraction", format!("{:?}", e.predict_fraction)),
                ("dropout", format!("{:?}", e.dropout)),
            ],
        );
        sections.insert(
            "pretrain",
            vec![
                ("steps", self.pretrain.steps.to_string()),
                ("batch", self.pretrain.batch_size.to_string()),
                ("lr", format!("{:?}", self.pretrain.lr)),
                ("clip_norm", fmt_opt(self.pretrain.clip_norm)),
            ],
        );
        sections.insert(
            "meta",
            vec![
                ("epochs", self.meta.epochs.to_string()),
                ("batch", self.meta.batch_size.to_string()),
                ("lr", format!("{:?}", self.meta.lr)),
                ("patience", self.meta.patience.to_string()),
                ("clip_norm", fmt_opt(self.meta.clip_norm)),
                ("long_notes", self.meta.long_notes.name().to_string()),
            ],
        );
        let f = &self.finetune;
        sections.insert(
            "finetune",
            vec![
                ("layers", f.n_layers.to_string()),
                ("batch", f.batch_size.to_string()),
                ("lr", format!("{:?}", f.lr)),
                ("hidden_size", f.hidden_size.to_string()),
                ("patience", f.patience.to_string()),
                ("max_epochs", f.max_epochs.to_string()),
                ("predictor_width", f.predictor_width.to_string()),
                ("clip_norm", fmt_opt(f.clip_norm)),
            ],
        );
        sections.insert(
            "split",
            vec![
                ("holdout", format!("{:?}", self.split.holdout_fraction)),
                ("ratio", format!("{}:{}", self.split.train_ratio, self.split.val_ratio)),
                ("seeds", join(&self.split.seeds)),
                ("holdout_seed", self.split.holdout_seed.to_string()),
            ],
        );
        sections.insert("task", vec![("tasks", join(&self.tasks))]);
        let mut out = String::new();
        for (name, entries) in sections {
            let _ = writeln!(out, "[{name}]");
            for (k, v) in entries {
                let _ = writeln!(out, "{k} = {v}");
            }
            out.push('\n');
        }
        out
    }

    /// Hex SHA-256 of [`RunConfig::snapshot`].
    pub fn hash(&self) -> String {
        crate::encoder::sha256_hex(self.snapshot().as_bytes())
    }
}
