//! Patient-level models over ordered note embeddings: a stacked
//! bidirectional LSTM and the embedding-mean ablation, each followed by the
//! same one-hidden-layer predictor.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::cohort::Task;
use crate::container::{Container, ContainerError};
use crate::encoder::EncoderCheckpoint;
use crate::harness::{auroc, EarlyStopping, HarnessError, StopSignal};
use crate::numerics::{concat, Adam, AdamConfig, Gradients, NumericsError, ParamSet, Tape, Tensor, Var};

pub const AGGREGATOR_MAGIC: &[u8; 5] = b"CXLA1";

#[derive(Debug, Error)]
pub enum AggregatorError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Metric(#[from] HarnessError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("aggregator config: {0}")]
    Config(String),
    #[error("empty note sequence")]
    EmptySequence,
    #[error("embedding of length {found}, expected {expected}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("patient {0} appears in both training and validation sets")]
    PatientOverlap(u64),
    #[error("frozen encoder changed during training (digest {before} -> {after})")]
    EncoderMutated { before: String, after: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    BiLstm,
    Mean,
}

impl AggregatorKind {
    pub fn name(self) -> &'static str {
        match self {
            AggregatorKind::BiLstm => "bilstm",
            AggregatorKind::Mean => "mean",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "bilstm" => Some(AggregatorKind::BiLstm),
            "mean" => Some(AggregatorKind::Mean),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorConfig {
    /// Per direction.
    pub hidden_size: usize,
    pub n_layers: usize,
    pub predictor_width: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub clip_norm: Option<f64>,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        AggregatorConfig {
            hidden_size: 32,
            n_layers: 2,
            predictor_width: 64,
            batch_size: 128,
            lr: 1e-4,
            max_epochs: 50,
            patience: 3,
            clip_norm: Some(1.0),
        }
    }
}

impl AggregatorConfig {
    pub fn validate(&self) -> Result<(), AggregatorError> {
        if self.hidden_size == 0 || self.n_layers == 0 || self.predictor_width == 0 || self.batch_size == 0 {
            return Err(AggregatorError::Config("sizes must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(AggregatorError::Config(format!("lr {} must be non-negative", self.lr)));
        }
        Ok(())
    }
}

fn lstm_param(layer: usize, dir: &str, what: &str) -> String {
    format!("lstm.l{layer}.{dir}.{what}")
}

const DIRECTIONS: [&str; 2] = ["fwd", "bwd"];
pub const PRED_W1: &str = "pred.w1";
pub const PRED_B1: &str = "pred.b1";
pub const PRED_W2: &str = "pred.w2";
pub const PRED_B2: &str = "pred.b2";

/// Componentwise mean of the embeddings.
pub fn aggregate_mean(embeddings: &[Vec<f64>]) -> Result<Vec<f64>, AggregatorError> {
    let first = embeddings.first().ok_or(AggregatorError::EmptySequence)?;
    let d = first.len();
    let mut acc = vec![0.0; d];
    for e in embeddings {
        if e.len() != d {
            return Err(AggregatorError::WidthMismatch {
                expected: d,
                found: e.len(),
            });
        }
        acc.iter_mut().zip(e).for_each(|(a, b)| *a += b);
    }
    let n = embeddings.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Runs one direction over `x_proj` (`[T, 4h]`, input projection plus
/// bias). Returns the hidden state at every time index in natural order.
/// Gate order along the `4h` axis is input, forget, candidate, output.
fn lstm_direction<'t>(
    tape: &'t Tape,
    x_proj: Var<'t>,
    w_hh: Var<'t>,
    hidden: usize,
    reverse: bool,
) -> Result<Vec<Var<'t>>, NumericsError> {
    let steps = x_proj.shape()[0];
    let mut h = tape.constant(Tensor::zeros(&[1, hidden]));
    let mut c = tape.constant(Tensor::zeros(&[1, hidden]));
    let mut out = vec![h; steps];
    let order: Vec<usize> = if reverse {
        (0..steps).rev().collect()
    } else {
        (0..steps).collect()
    };
    for t in order {
        let gates = x_proj.select_rows(&[t])?.add(h.matmul(w_hh)?)?;
        let i = gates.slice(1, 0, hidden)?.sigmoid();
        let f = gates.slice(1, hidden, hidden)?.sigmoid();
        let g = gates.slice(1, 2 * hidden, hidden)?.tanh();
        let o = gates.slice(1, 3 * hidden, hidden)?.sigmoid();
        c = f.mul(c)?.add(i.mul(g)?)?;
        h = o.mul(c.tanh())?;
        out[t] = h;
    }
    Ok(out)
}

/// Stacked bidirectional LSTM over `x` (`[T, input]`). Returns H_N =
/// `[final forward state, final backward state]` of the top layer, `[1, 2h]`.
pub fn bilstm_forward<'t>(
    tape: &'t Tape,
    params: &ParamSet,
    n_layers: usize,
    hidden: usize,
    x: Var<'t>,
) -> Result<Var<'t>, NumericsError> {
    let mut input = x;
    let mut finals = (input, input);
    for l in 0..n_layers {
        let mut per_dir = Vec::with_capacity(2);
        for (k, dir) in DIRECTIONS.iter().enumerate() {
            let w_ih = params.var(tape, &lstm_param(l, dir, "w_ih"))?;
            let w_hh = params.var(tape, &lstm_param(l, dir, "w_hh"))?;
            let b = params.var(tape, &lstm_param(l, dir, "b"))?;
            let proj = input.matmul(w_ih)?.add_row(b)?;
            per_dir.push(lstm_direction(tape, proj, w_hh, hidden, k == 1)?);
        }
        let steps = per_dir[0].len();
        finals = (per_dir[0][steps - 1], per_dir[1][0]);
        let rows: Vec<Var<'t>> = (0..steps)
            .map(|t| concat(&[per_dir[0][t], per_dir[1][t]], 1))
            .collect::<Result<_, _>>()?;
        input = if rows.len() == 1 { rows[0] } else { concat(&rows, 0)? };
    }
    concat(&[finals.0, finals.1], 1)
}

/// `sigmoid(tanh(z W1 + b1) W2 + b2)` as a scalar.
pub fn predictor<'t>(tape: &'t Tape, params: &ParamSet, latent: Var<'t>) -> Result<Var<'t>, NumericsError> {
    let hidden = latent
        .matmul(params.var(tape, PRED_W1)?)?
        .add_row(params.var(tape, PRED_B1)?)?
        .tanh();
    let logit = hidden
        .matmul(params.var(tape, PRED_W2)?)?
        .add_row(params.var(tape, PRED_B2)?)?;
    Ok(logit.sigmoid().sum())
}

#[derive(Debug, Clone)]
pub struct Aggregator {
    kind: AggregatorKind,
    config: AggregatorConfig,
    input_dim: usize,
    params: ParamSet,
}

impl Aggregator {
    pub fn parameter_shapes(
        kind: AggregatorKind,
        config: &AggregatorConfig,
        input_dim: usize,
    ) -> Vec<(String, Vec<usize>)> {
        let h = config.hidden_size;
        let mut out = Vec::new();
        let latent = match kind {
            AggregatorKind::BiLstm => {
                for l in 0..config.n_layers {
                    let fan_in = if l == 0 { input_dim } else { 2 * h };
                    for dir in DIRECTIONS {
                        out.push((lstm_param(l, dir, "w_ih"), vec![fan_in, 4 * h]));
                        out.push((lstm_param(l, dir, "w_hh"), vec![h, 4 * h]));
                        out.push((lstm_param(l, dir, "b"), vec![4 * h]));
                    }
                }
                2 * h
            }
            AggregatorKind::Mean => input_dim,
        };
        out.push((PRED_W1.into(), vec![latent, config.predictor_width]));
        out.push((PRED_B1.into(), vec![config.predictor_width]));
        out.push((PRED_W2.into(), vec![config.predictor_width, 1]));
        out.push((PRED_B2.into(), vec![1]));
        out
    }

    /// Matrices `N(0, 1/fan_in)`, biases zero except the LSTM forget gate
    /// (one).
    pub fn init(
        kind: AggregatorKind,
        config: AggregatorConfig,
        input_dim: usize,
        seed: u64,
    ) -> Result<Self, AggregatorError> {
        config.validate()?;
        if input_dim == 0 {
            return Err(AggregatorError::Config("input_dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let h = config.hidden_size;
        for (name, shape) in Self::parameter_shapes(kind, &config, input_dim) {
            let t = if shape.len() == 2 {
                Tensor::randn(&shape, 1.0 / (shape[0] as f64).sqrt(), &mut rng)
            } else if name.starts_with("lstm.") {
                let mut b = Tensor::zeros(&shape);
                b.data_mut()[h..2 * h].iter_mut().for_each(|x| *x = 1.0);
                b
            } else {
                Tensor::zeros(&shape)
            };
            params.insert(name, t)?;
        }
        Ok(Aggregator {
            kind,
            config,
            input_dim,
            params,
        })
    }

    pub fn from_params(
        kind: AggregatorKind,
        config: AggregatorConfig,
        input_dim: usize,
        params: ParamSet,
    ) -> Result<Self, AggregatorError> {
        config.validate()?;
        let expected = Self::parameter_shapes(kind, &config, input_dim);
        if expected.len() != params.len() {
            return Err(AggregatorError::Checkpoint(format!(
                "expected {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                _ => {
                    return Err(AggregatorError::Checkpoint(format!(
                        "parameter {name} missing or misshaped"
                    )))
                }
            }
        }
        Ok(Aggregator {
            kind,
            config,
            input_dim,
            params,
        })
    }

    pub fn kind(&self) -> AggregatorKind {
        self.kind
    }

    pub fn config(&self) -> &AggregatorConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn check(&self, embeddings: &[Vec<f64>]) -> Result<(), AggregatorError> {
        if embeddings.is_empty() {
            return Err(AggregatorError::EmptySequence);
        }
        if let Some(e) = embeddings.iter().find(|e| e.len() != self.input_dim) {
            return Err(AggregatorError::WidthMismatch {
                expected: self.input_dim,
                found: e.len(),
            });
        }
        Ok(())
    }

    /// Patient latent, `[1, latent]`.
    pub fn latent_var<'t>(
        &self,
        tape: &'t Tape,
        params: &ParamSet,
        embeddings: &[Vec<f64>],
    ) -> Result<Var<'t>, AggregatorError> {
        self.check(embeddings)?;
        match self.kind {
            AggregatorKind::BiLstm => {
                let data: Vec<f64> = embeddings.iter().flatten().copied().collect();
                let x = tape.constant(Tensor::new(vec![embeddings.len(), self.input_dim], data)?);
                Ok(bilstm_forward(
                    tape,
                    params,
                    self.config.n_layers,
                    self.config.hidden_size,
                    x,
                )?)
            }
            AggregatorKind::Mean => {
                let m = aggregate_mean(embeddings)?;
                Ok(tape.constant(Tensor::new(vec![1, self.input_dim], m)?))
            }
        }
    }

    pub fn latent(&self, embeddings: &[Vec<f64>]) -> Result<Vec<f64>, AggregatorError> {
        let tape = Tape::new();
        Ok(self
            .latent_var(&tape, &self.params, embeddings)?
            .value()
            .data()
            .to_vec())
    }

    fn probability_var<'t>(
        &self,
        tape: &'t Tape,
        params: &ParamSet,
        embeddings: &[Vec<f64>],
    ) -> Result<Var<'t>, AggregatorError> {
        let z = self.latent_var(tape, params, embeddings)?;
        Ok(predictor(tape, params, z)?)
    }

    pub fn predict(&self, embeddings: &[Vec<f64>]) -> Result<f64, AggregatorError> {
        let tape = Tape::new();
        Ok(self.probability_var(&tape, &self.params, embeddings)?.value().item())
    }

    pub fn predict_many(&self, patients: &[PatientSequence]) -> Result<Vec<f64>, AggregatorError> {
        patients.par_iter().map(|p| self.predict(&p.embeddings)).collect()
    }

    pub fn to_bytes(&self, metadata: &BTreeMap<String, String>) -> Vec<u8> {
        let mut config = metadata.clone();
        config.insert("kind".into(), self.kind.name().into());
        config.insert("input_dim".into(), self.input_dim.to_string());
        config.insert("hidden_size".into(), self.config.hidden_size.to_string());
        config.insert("n_layers".into(), self.config.n_layers.to_string());
        config.insert("predictor_width".into(), self.config.predictor_width.to_string());
        let records = self.params.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect();
        Container { config, records }.to_bytes(AGGREGATOR_MAGIC)
    }

    /// Training hyperparameters are not stored; they take default values.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, BTreeMap<String, String>), AggregatorError> {
        let c = Container::from_bytes(bytes, AGGREGATOR_MAGIC)?;
        let get = |k: &str| -> Result<&String, AggregatorError> {
            c.config
                .get(k)
                .ok_or_else(|| AggregatorError::Checkpoint(format!("missing config key {k}")))
        };
        let num = |k: &str| -> Result<usize, AggregatorError> {
            get(k)?
                .parse()
                .map_err(|_| AggregatorError::Checkpoint(format!("bad value for {k}")))
        };
        let kind =
            AggregatorKind::parse(get("kind")?).ok_or_else(|| AggregatorError::Checkpoint("unknown kind".into()))?;
        let config = AggregatorConfig {
            hidden_size: num("hidden_size")?,
            n_layers: num("n_layers")?,
            predictor_width: num("predictor_width")?,
            ..AggregatorConfig::default()
        };
        let input_dim = num("input_dim")?;
        let mut params = ParamSet::new();
        for (name, t) in c.records {
            params.insert(name, t)?;
        }
        let meta = c
            .config
            .into_iter()
            .filter(|(k, _)| !["kind", "input_dim", "hidden_size", "n_layers", "predictor_width"].contains(&k.as_str()))
            .collect();
        Ok((Self::from_params(kind, config, input_dim, params)?, meta))
    }
}

/// One patient's ordered note embeddings and label.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientSequence {
    pub patient_id: u64,
    pub embeddings: Vec<Vec<f64>>,
    pub label: bool,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: Aggregator,
    pub val_aurocs: Vec<f64>,
    pub best_epoch: Option<usize>,
}

/// Trains a fresh aggregator of `kind` with early stopping on patient-level
/// validation AUROC and returns the best epoch's weights. The `frozen`
/// encoder is only read; its serialized digest is compared before and after.
pub fn finetune(
    kind: AggregatorKind,
    train: &[PatientSequence],
    val: &[PatientSequence],
    frozen: &EncoderCheckpoint,
    config: &AggregatorConfig,
    seed: u64,
) -> Result<FinetuneOutcome, AggregatorError> {
    if train.is_empty() {
        return Err(AggregatorError::EmptySet("training"));
    }
    if val.is_empty() {
        return Err(AggregatorError::EmptySet("validation"));
    }
    let train_ids: HashSet<u64> = train.iter().map(|p| p.patient_id).collect();
    if let Some(p) = val.iter().find(|p| train_ids.contains(&p.patient_id)) {
        return Err(AggregatorError::PatientOverlap(p.patient_id));
    }
    let before = frozen.digest();
    let input_dim = frozen.encoder.config().d_model;
    let mut model = Aggregator::init(kind, config.clone(), input_dim, seed)?;
    for p in train.iter().chain(val) {
        model.check(&p.embeddings)?;
    }
    let val_labels: Vec<bool> = val.iter().map(|p| p.label).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa66e_6a7e);
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr));
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = model.params.clone();

    for _epoch in 0..config.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let m = &model;
            let results: Vec<Result<Gradients, AggregatorError>> = chunk
                .par_iter()
                .map(|&i| {
                    let tape = Tape::new();
                    let p = m.probability_var(&tape, &m.params, &train[i].embeddings)?;
                    let loss = p.bce(if train[i].label { 1.0 } else { 0.0 })?;
                    Ok(tape.backward(loss)?)
                })
                .collect();
            let mut grads = Gradients::default();
            for g in results {
                grads.add_assign(&g?);
            }
            grads.scale(1.0 / chunk.len() as f64);
            if let Some(max) = config.clip_norm {
                grads.clip_norm(max);
            }
            adam.step(&mut model.params, &grads)?;
        }
        let scores = model.predict_many(val)?;
        let signal = stopper.observe(auroc(&scores, &val_labels)?);
        if stopper.best_epoch() == Some(stopper.history().len() - 1) {
            best = model.params.clone();
        }
        if signal == StopSignal::Stop {
            break;
        }
    }
    model.params = best;

    let after = frozen.digest();
    if before != after {
        return Err(AggregatorError::EncoderMutated { before, after });
    }
    Ok(FinetuneOutcome {
        model,
        val_aurocs: stopper.history().to_vec(),
        best_epoch: stopper.best_epoch(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub patient_id: u64,
    pub task: Task,
    pub p: f64,
    pub label: Option<bool>,
}

/// CSV `patient_id,task,p,label`; an unknown label is left empty.
pub fn write_predictions_csv(path: &Path, predictions: &[Prediction]) -> Result<(), AggregatorError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "patient_id,task,p,label")?;
    for p in predictions {
        let label = p.label.map_or(String::new(), |l| u8::from(l).to_string());
        writeln!(f, "{},{},{:?},{}", p.patient_id, p.task.name(), p.p, label)?;
    }
    f.flush()?;
    Ok(())
}
