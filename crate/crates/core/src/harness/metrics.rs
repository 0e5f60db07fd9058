//! Ranking metric, early stopping and seed-level summary statistics.

use super::HarnessError;

/// Area under the ROC curve in its Mann-Whitney form: the share of
/// (positive, negative) pairs where the positive scores higher, ties
/// counting one half.
///
/// Counts are kept as doubled integers so the result is the exact quotient
/// `(2 wins + ties) / (2 P N)`.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, HarnessError> {
    if scores.len() != labels.len() {
        return Err(HarnessError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(&bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(HarnessError::NonFiniteScore(bad));
    }
    let n_pos = labels.iter().filter(|&&l| l).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(HarnessError::UndefinedMetric {
            positives: n_pos,
            negatives: n_neg,
        });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut doubled: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        doubled += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    Ok(doubled as f64 / (2 * n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopSignal {
    Continue,
    Stop,
}

/// Tracks a per-epoch validation metric (higher is better). The best epoch
/// is the earliest one attaining the maximum; training should stop once
/// `patience` epochs pass without a strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    history: Vec<f64>,
    best: Option<usize>,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            history: Vec::new(),
            best: None,
        }
    }

    pub fn observe(&mut self, value: f64) -> StopSignal {
        let epoch = self.history.len();
        self.history.push(value);
        match self.best {
            Some(b) if self.history[b] >= value => {}
            _ => self.best = Some(epoch),
        }
        if self.patience > 0 && epoch - self.best.expect("set above") >= self.patience {
            StopSignal::Stop
        } else {
            StopSignal::Continue
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best
    }

    pub fn best_value(&self) -> Option<f64> {
        self.best.map(|b| self.history[b])
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }
}

/// Replays `track` through [`EarlyStopping`]. Returns the best epoch and the
/// epoch after which a stop was signalled, if any.
pub fn early_stop(track: &[f64], patience: usize) -> Result<(usize, Option<usize>), HarnessError> {
    if track.is_empty() {
        return Err(HarnessError::EmptyTrack);
    }
    let mut es = EarlyStopping::new(patience);
    for (epoch, &v) in track.iter().enumerate() {
        if es.observe(v) == StopSignal::Stop {
            return Ok((es.best_epoch().expect("non-empty"), Some(epoch)));
        }
    }
    Ok((es.best_epoch().expect("non-empty"), None))
}

/// Mean and sample standard deviation (`n - 1` denominator; 0 when n < 2).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// `"0.720 ± 0.020"`.
pub fn format_mean_sd(mean: f64, sd: f64) -> String {
    format!("{mean:.3} ± {sd:.3}")
}
