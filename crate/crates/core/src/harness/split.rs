//! Patient-level holdout / train / validation partitions.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;

/// Fewest patients for which every set can be non-empty under defaults.
pub const MIN_PATIENTS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitSpec {
    pub holdout_fraction: f64,
    pub train_ratio: u32,
    pub val_ratio: u32,
    pub seeds: Vec<u64>,
    /// Fixed across run seeds so every run shares one holdout.
    pub holdout_seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            holdout_fraction: 0.10,
            train_ratio: 8,
            val_ratio: 1,
            seeds: vec![1, 2, 3],
            holdout_seed: 0x401d,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(HarnessError::BadSplit(format!(
                "holdout fraction {} outside (0, 1)",
                self.holdout_fraction
            )));
        }
        if self.train_ratio == 0 || self.val_ratio == 0 {
            return Err(HarnessError::BadSplit("ratio terms must be positive".into()));
        }
        Ok(())
    }
}

/// Sorted, pairwise disjoint patient sets whose union is the input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub holdout: Vec<u64>,
    pub train: Vec<u64>,
    pub val: Vec<u64>,
}

fn shuffled(ids: &[u64], seed: u64) -> Vec<u64> {
    let mut v = ids.to_vec();
    v.sort_unstable();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

/// The shared holdout, independent of any run seed.
pub fn holdout_ids(patients: &[u64], spec: &SplitSpec) -> Result<Vec<u64>, HarnessError> {
    Ok(split(patients, spec, 0)?.holdout)
}

/// Carves the holdout with `spec.holdout_seed`, then splits the rest
/// `train_ratio:val_ratio` with `seed`. Set sizes round to nearest.
pub fn split(patients: &[u64], spec: &SplitSpec, seed: u64) -> Result<Split, HarnessError> {
    spec.validate()?;
    let mut unique = patients.to_vec();
    unique.sort_unstable();
    unique.dedup();
    if unique.len() != patients.len() {
        return Err(HarnessError::BadSplit("duplicate patient ids".into()));
    }
    let n = unique.len();
    if n < MIN_PATIENTS {
        return Err(HarnessError::TooFewPatients {
            found: n,
            needed: MIN_PATIENTS,
        });
    }
    let n_holdout = ((n as f64 * spec.holdout_fraction).round() as usize).max(1);
    let rest_n = n - n_holdout;
    let val_share = spec.val_ratio as f64 / (spec.train_ratio + spec.val_ratio) as f64;
    let n_val = ((rest_n as f64 * val_share).round() as usize).max(1);
    if n_holdout >= n || n_val >= rest_n {
        return Err(HarnessError::TooFewPatients {
            found: n,
            needed: MIN_PATIENTS,
        });
    }
    let order = shuffled(&unique, spec.holdout_seed);
    let mut holdout = order[..n_holdout].to_vec();
    let rest = shuffled(&order[n_holdout..], seed);
    let mut val = rest[..n_val].to_vec();
    let mut train = rest[n_val..].to_vec();
    holdout.sort_unstable();
    val.sort_unstable();
    train.sort_unstable();
    Ok(Split { holdout, train, val })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hundred_patients() {
        let ids: Vec<u64> = (0..100).collect();
        let s = split(&ids, &SplitSpec::default(), 7).unwrap();
        assert_eq!((s.holdout.len(), s.train.len(), s.val.len()), (10, 80, 10));
    }

    #[test]
    fn seeds_share_holdout() {
        let ids: Vec<u64> = (0..300).map(|i| i * 3 + 1).collect();
        let spec = SplitSpec::default();
        let a = split(&ids, &spec, 1).unwrap();
        let b = split(&ids, &spec, 2).unwrap();
        assert_eq!(a.holdout, b.holdout);
        assert_ne!(a.train, b.train);
        assert_eq!(a, split(&ids, &spec, 1).unwrap());
        assert_eq!(holdout_ids(&ids, &spec).unwrap(), a.holdout);
    }

    #[test]
    fn too_few_or_duplicated() {
        let spec = SplitSpec::default();
        assert!(matches!(
            split(&[1, 2, 3], &spec, 0),
            Err(HarnessError::TooFewPatients { found: 3, .. })
        ));
        let mut ids: Vec<u64> = (0..20).collect();
        ids.push(4);
        assert!(split(&ids, &spec, 0).is_err());
    }

    #[test]
    fn fractions_are_validated() {
        let ids: Vec<u64> = (0..50).collect();
        for f in [0.0, 1.0, -0.1, f64::NAN] {
            let spec = SplitSpec {
                holdout_fraction: f,
                ..SplitSpec::default()
            };
            assert!(split(&ids, &spec, 0).is_err());
        }
    }
}
