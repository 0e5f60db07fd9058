//! Batched content encoding and the permutation-language-model training loop.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Encoder, EncoderCheckpoint, EncoderConfig, EncoderError, PermutationPlan};
use crate::numerics::{Adam, AdamConfig, Gradients, Tape, Tensor};
use crate::text::{TokenSequence, Vocabulary};

/// Hidden states (flattened) and new memories of one sequence.
type SequenceOutput = Result<(Vec<f64>, Vec<Tensor>), EncoderError>;

/// Encodes padded sequences of equal length. Padding keys are masked out;
/// rows at padding positions are still produced.
///
/// With `mems`, each sequence `b` attends additionally to `mems[b]` (one
/// tensor per layer). The returned memories hold, per sequence and layer,
/// the last `mem_len` unpadded layer inputs appended to the old memory.
pub fn encode_batch(
    encoder: &Encoder,
    batch: &[TokenSequence],
    mems: Option<&[Vec<Tensor>]>,
) -> Result<(Tensor, Vec<Vec<Tensor>>), EncoderError> {
    let Some(first) = batch.first() else {
        return Err(EncoderError::EmptySequence);
    };
    let len = first.len();
    if batch.iter().any(|s| s.len() != len) {
        return Err(EncoderError::PlanInvariant("batch sequences differ in length".into()));
    }
    if let Some(m) = mems {
        if m.len() != batch.len() {
            return Err(EncoderError::Memory(format!(
                "{} memories for batch of {}",
                m.len(),
                batch.len()
            )));
        }
    }
    let d = encoder.config().d_model;
    let mem_len = encoder.config().mem_len;
    let results: Vec<SequenceOutput> = batch
        .par_iter()
        .enumerate()
        .map(|(b, seq)| {
            let seq_mems = mems.map(|m| m[b].as_slice());
            let mlen = seq_mems.map_or(0, |m| m.first().map_or(0, |t| t.shape()[0]));
            let visible: Vec<bool> = (0..len).map(|p| p < seq.true_length).collect();
            let mask = Encoder::content_mask(len, mlen, &visible);
            let tape = Tape::new();
            let pass = encoder.content_pass(&tape, &seq.ids, &mask, seq_mems, 0, None)?;
            let mut new_mems = Vec::new();
            if mem_len > 0 {
                for (l, input) in pass.layer_inputs.iter().enumerate() {
                    let fresh = input.value();
                    let mut rows: Vec<f64> = seq_mems.map_or(Vec::new(), |m| m[l].data().to_vec());
                    rows.extend_from_slice(&fresh.data()[..seq.true_length * d]);
                    let n = rows.len() / d;
                    let keep = n.min(mem_len);
                    let tail = rows[(n - keep) * d..].to_vec();
                    new_mems.push(Tensor::new(vec![keep, d], tail)?);
                }
            }
            Ok((pass.hidden.value().data().to_vec(), new_mems))
        })
        .collect();
    let mut data = Vec::with_capacity(batch.len() * len * d);
    let mut all_mems = Vec::with_capacity(batch.len());
    for r in results {
        let (h, m) = r?;
        data.extend(h);
        all_mems.push(m);
    }
    Ok((Tensor::new(vec![batch.len(), len, d], data)?, all_mems))
}

/// One pretraining document.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusNote {
    pub note_id: u64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables.
    pub clip_norm: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 200,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: EncoderCheckpoint,
    /// `(step, mean loss over the batch's targets)`, steps counted from 1.
    pub losses: Vec<(usize, f64)>,
    /// `ln` of the number of predictable tokens: the loss of uniform logits.
    pub baseline: f64,
}

/// Mean of the last `window` entries of a loss trace.
pub fn smoothed_loss(losses: &[(usize, f64)], window: usize) -> Option<f64> {
    if losses.is_empty() || window == 0 {
        return None;
    }
    let tail = &losses[losses.len().saturating_sub(window)..];
    Some(tail.iter().map(|(_, l)| l).sum::<f64>() / tail.len() as f64)
}

pub fn write_loss_csv(path: &Path, losses: &[(usize, f64)]) -> Result<(), EncoderError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,loss")?;
    for (s, l) in losses {
        writeln!(f, "{s},{l:?}")?;
    }
    f.flush()?;
    Ok(())
}

/// Trains a freshly initialized encoder on `corpus` and returns the final
/// checkpoint. Refuses to run if any note id is in `holdout_note_ids`.
pub fn pretrain(
    corpus: &[CorpusNote],
    vocab: &Vocabulary,
    config: EncoderConfig,
    train: &PretrainConfig,
    holdout_note_ids: &HashSet<u64>,
) -> Result<PretrainOutcome, EncoderError> {
    if corpus.is_empty() {
        return Err(EncoderError::EmptyCorpus);
    }
    let leaked: Vec<u64> = corpus
        .iter()
        .map(|n| n.note_id)
        .filter(|id| holdout_note_ids.contains(id))
        .collect();
    if let Some(&first) = leaked.first() {
        return Err(EncoderError::Contamination {
            count: leaked.len(),
            first,
        });
    }
    if config.vocab_size != vocab.len() {
        return Err(EncoderError::Config(format!(
            "vocab_size {} but vocabulary has {} entries",
            config.vocab_size,
            vocab.len()
        )));
    }
    let mut encoder = Encoder::init(config.clone(), train.seed)?;
    let baseline = (config.num_regular() as f64).ln();
    let sequences: Vec<Vec<usize>> = corpus
        .iter()
        .map(|n| vocab.tokenize(&n.text, config.max_len).map(|s| s.content().to_vec()))
        .collect::<Result<_, _>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x5eed_91a7);
    let mut adam = Adam::new(AdamConfig::with_lr(train.lr));
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(train.steps);
    let batch_size = train.batch_size.max(1);

    for step in 1..=train.steps {
        let mut jobs = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            if order.is_empty() {
                order = (0..sequences.len()).collect();
                order.shuffle(&mut rng);
            }
            let idx = order.pop().expect("refilled");
            let ids = &sequences[idx];
            let plan = PermutationPlan::for_tokens(ids, config.predict_fraction, &mut rng)?;
            let dropout_seed: u64 = rng.random();
            if !plan.targets().is_empty() {
                jobs.push((idx, plan, dropout_seed));
            }
        }
        if jobs.is_empty() {
            continue;
        }
        let enc = &encoder;
        let per_seq: Vec<Result<(f64, usize, Gradients), EncoderError>> = jobs
            .par_iter()
            .map(|(idx, plan, dropout_seed)| {
                let ids = &sequences[*idx];
                let mut drng = ChaCha8Rng::seed_from_u64(*dropout_seed);
                let tape = Tape::new();
                let lp = enc
                    .target_log_probs(&tape, ids, plan, Some(&mut drng))?
                    .expect("jobs have targets");
                let n = plan.targets().len();
                let nll = lp.sum().scale(-1.0);
                let value = nll.value().item();
                let grads = tape.backward(nll)?;
                Ok((value, n, grads))
            })
            .collect();
        let mut total = 0.0;
        let mut count = 0usize;
        let mut grads = Gradients::default();
        for r in per_seq {
            let (v, n, g) = r?;
            total += v;
            count += n;
            grads.add_assign(&g);
        }
        grads.scale(1.0 / count as f64);
        if let Some(max) = train.clip_norm {
            grads.clip_norm(max);
        }
        adam.step(encoder.params_mut(), &grads)?;
        losses.push((step, total / count as f64));
    }

    Ok(PretrainOutcome {
        checkpoint: EncoderCheckpoint::new(encoder, vocab.clone(), train.steps as u64, train.seed),
        losses,
        baseline,
    })
}
