//! Factorization orders and the two attention masks derived from them.

use rand::seq::SliceRandom;
use rand::Rng;

use super::EncoderError;
use crate::text::Vocabulary;

/// A factorization order over positions `0..len`.
///
/// `rank[p]` is the index of position `p` in `order`. Positions whose rank
/// is at least `cutoff` are prediction targets. The content stream at `j`
/// sees every `k` with `rank[k] <= rank[j]`; the query stream sees only
/// `rank[k] < rank[j]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationPlan {
    order: Vec<usize>,
    rank: Vec<usize>,
    cutoff: usize,
}

impl PermutationPlan {
    pub fn from_order(order: Vec<usize>, cutoff: usize) -> Result<Self, EncoderError> {
        let len = order.len();
        if len == 0 {
            return Err(EncoderError::EmptySequence);
        }
        if cutoff > len {
            return Err(EncoderError::PlanInvariant(format!("cutoff {cutoff} > length {len}")));
        }
        let mut rank = vec![usize::MAX; len];
        for (r, &p) in order.iter().enumerate() {
            if p >= len || rank[p] != usize::MAX {
                return Err(EncoderError::PlanInvariant(format!(
                    "order {order:?} is not a permutation"
                )));
            }
            rank[p] = r;
        }
        Ok(PermutationPlan { order, rank, cutoff })
    }

    /// Uniform permutation of `0..len` with `max(1, floor(fraction * len))`
    /// targets.
    pub fn sample<R: Rng + ?Sized>(len: usize, predict_fraction: f64, rng: &mut R) -> Result<Self, EncoderError> {
        Self::sample_pinned(len, &[], predict_fraction, rng)
    }

    /// Like [`sample`](Self::sample), but the `pinned` positions take the
    /// first ranks (in ascending position order) and are never targets. The
    /// remaining positions are permuted uniformly.
    pub fn sample_pinned<R: Rng + ?Sized>(
        len: usize,
        pinned: &[usize],
        predict_fraction: f64,
        rng: &mut R,
    ) -> Result<Self, EncoderError> {
        if len == 0 {
            return Err(EncoderError::EmptySequence);
        }
        let mut is_pinned = vec![false; len];
        for &p in pinned {
            if p >= len {
                return Err(EncoderError::PlanInvariant(format!("pinned position {p} >= {len}")));
            }
            is_pinned[p] = true;
        }
        let mut order: Vec<usize> = (0..len).filter(|&p| is_pinned[p]).collect();
        let mut free: Vec<usize> = (0..len).filter(|&p| !is_pinned[p]).collect();
        free.shuffle(rng);
        let n_free = free.len();
        order.extend(free);
        let n_targets = if n_free == 0 {
            0
        } else {
            ((predict_fraction * n_free as f64).floor() as usize).clamp(1, n_free)
        };
        Self::from_order(order, len - n_targets)
    }

    /// Plan for an unpadded token sequence: special tokens are pinned.
    pub fn for_tokens<R: Rng + ?Sized>(
        ids: &[usize],
        predict_fraction: f64,
        rng: &mut R,
    ) -> Result<Self, EncoderError> {
        let pinned: Vec<usize> = (0..ids.len()).filter(|&p| Vocabulary::is_special(ids[p])).collect();
        Self::sample_pinned(ids.len(), &pinned, predict_fraction, rng)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn rank(&self, position: usize) -> usize {
        self.rank[position]
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    /// Target positions in factorization order.
    pub fn targets(&self) -> &[usize] {
        &self.order[self.cutoff..]
    }

    pub fn is_target(&self, position: usize) -> bool {
        self.rank[position] >= self.cutoff
    }

    pub fn content_visible(&self, query: usize, key: usize) -> bool {
        self.rank[key] <= self.rank[query]
    }

    pub fn query_visible(&self, query: usize, key: usize) -> bool {
        self.rank[key] < self.rank[query]
    }

    /// Row-major `len x len`, true = may attend.
    pub fn content_mask(&self) -> Vec<bool> {
        self.mask(|j, k| self.content_visible(j, k))
    }

    pub fn query_mask(&self) -> Vec<bool> {
        self.mask(|j, k| self.query_visible(j, k))
    }

    fn mask(&self, f: impl Fn(usize, usize) -> bool) -> Vec<bool> {
        let n = self.len();
        (0..n * n).map(|i| f(i / n, i % n)).collect()
    }

    /// Checks that no special token is a target.
    pub fn check_targets(&self, ids: &[usize]) -> Result<(), EncoderError> {
        if ids.len() != self.len() {
            return Err(EncoderError::PlanInvariant(format!(
                "plan length {} for sequence of length {}",
                self.len(),
                ids.len()
            )));
        }
        if let Some(&p) = self.targets().iter().find(|&&p| Vocabulary::is_special(ids[p])) {
            return Err(EncoderError::PlanInvariant(format!(
                "special token at position {p} is a prediction target"
            )));
        }
        Ok(())
    }
}
