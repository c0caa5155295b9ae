//! Adaptive identity re-weighting state machine.
//!
//! Tracks a per-identity hardness moving average fed by the unweighted
//! implicit loss, promotes the easiest still-excluded identities in batches
//! of `k` at a fixed cadence, fades every already-promoted weight by `alpha`
//! per update, and terminates once the kept fraction reaches `keep_ratio`.
//! Identities never promoted end with weight exactly zero: that zero set is
//! the excluded (personalized) set.
//!
//! Indices here are dense class indices `0..m`; the trainer maps dataset
//! identity ids onto them.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ReweightError {
    #[error("unknown identity index {0} (state tracks {1})")]
    UnknownIdentity(usize, usize),
    #[error("batch carries only zero-weight identities")]
    DegenerateBatch,
    #[error("weights not initialized: {0} identities never observed")]
    Unobserved(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityWeightState {
    hardness: Vec<f64>,
    weight: Vec<f64>,
    seen: Vec<bool>,
    weights_initialized: bool,
    pub updates_applied: usize,
}

impl IdentityWeightState {
    pub fn new(m: usize) -> Self {
        IdentityWeightState {
            hardness: vec![0.0; m],
            weight: vec![0.0; m],
            seen: vec![false; m],
            weights_initialized: false,
            updates_applied: 0,
        }
    }

    /// All-ones weights (the no-reweighting ablation).
    pub fn uniform(m: usize) -> Self {
        IdentityWeightState {
            hardness: vec![0.0; m],
            weight: vec![1.0; m],
            seen: vec![true; m],
            weights_initialized: true,
            updates_applied: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.weight.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weight.is_empty()
    }

    pub fn hardness(&self) -> &[f64] {
        &self.hardness
    }

    pub fn weights(&self) -> &[f64] {
        &self.weight
    }

    pub fn weights_initialized(&self) -> bool {
        self.weights_initialized
    }

    pub fn all_observed(&self) -> bool {
        self.seen.iter().all(|&s| s)
    }

    pub fn nonzero_count(&self) -> usize {
        self.weight.iter().filter(|&&w| w > 0.0).count()
    }

    /// Indices with weight exactly zero (never promoted).
    pub fn excluded(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.weight[i] == 0.0).collect()
    }

    /// Moving-average hardness update for the identities present in a batch.
    /// The first observation seeds the average directly; afterwards
    /// H <- beta * H + (1 - beta) * loss.
    pub fn update_hardness(
        &mut self,
        batch_indices: &[usize],
        per_identity_loss: &[f64],
        beta: f64,
    ) -> Result<(), ReweightError> {
        assert!(beta > 0.0 && beta < 1.0, "beta must lie in (0,1)");
        assert_eq!(batch_indices.len(), per_identity_loss.len());
        for (&i, &loss) in batch_indices.iter().zip(per_identity_loss) {
            if i >= self.len() {
                return Err(ReweightError::UnknownIdentity(i, self.len()));
            }
            if self.seen[i] {
                self.hardness[i] = beta * self.hardness[i] + (1.0 - beta) * loss;
            } else {
                self.hardness[i] = loss;
                self.seen[i] = true;
            }
        }
        Ok(())
    }

    /// Initial weights: 1 for the floor(init_fraction * m) smallest-hardness
    /// identities (ties to the smaller index), 0 otherwise. Requires every
    /// hardness to have been observed.
    pub fn init_weights(&mut self, init_fraction: f64) -> Result<(), ReweightError> {
        let unobserved = self.seen.iter().filter(|&&s| !s).count();
        if unobserved > 0 {
            return Err(ReweightError::Unobserved(unobserved));
        }
        let count = floor_count(init_fraction, self.len());
        let order = self.indices_by_hardness(|_| true);
        self.weight.fill(0.0);
        for &i in order.iter().take(count) {
            self.weight[i] = 1.0;
        }
        self.weights_initialized = true;
        Ok(())
    }

    /// Promotion update: the min(k, |zero set|) zero-weight identities with
    /// smallest hardness get weight 1; every other identity's weight is
    /// multiplied by alpha. Returns the promoted indices in hardness order.
    pub fn update_weights(&mut self, k: usize, alpha: f64) -> Vec<usize> {
        assert!(k >= 1, "k must be >= 1");
        assert!(alpha > 0.0 && alpha < 1.0, "alpha must lie in (0,1)");
        let zero_ranked = self.indices_by_hardness(|i| self.weight[i] == 0.0);
        let promoted: Vec<usize> = zero_ranked.into_iter().take(k).collect();
        for (i, w) in self.weight.iter_mut().enumerate() {
            if promoted.contains(&i) {
                *w = 1.0;
            } else {
                *w *= alpha;
            }
        }
        self.updates_applied += 1;
        promoted
    }

    /// True once the kept fraction reaches keep_ratio:
    /// count(weight > 0) >= keep_ratio * m.
    pub fn stop_condition(&self, keep_ratio: f64) -> bool {
        self.nonzero_count() >= ceil_count(keep_ratio, self.len())
    }

    /// Normalized batch weights: weight of each batch identity divided by the
    /// sum of weights over the batch (or over all identities when
    /// `full_set_norm` is set).
    pub fn batch_weights(
        &self,
        batch_indices: &[usize],
        full_set_norm: bool,
    ) -> Result<Vec<f64>, ReweightError> {
        for &i in batch_indices {
            if i >= self.len() {
                return Err(ReweightError::UnknownIdentity(i, self.len()));
            }
        }
        let denom: f64 = if full_set_norm {
            self.weight.iter().sum()
        } else {
            batch_indices.iter().map(|&i| self.weight[i]).sum()
        };
        if denom <= 0.0 {
            return Err(ReweightError::DegenerateBatch);
        }
        Ok(batch_indices.iter().map(|&i| self.weight[i] / denom).collect())
    }

    fn indices_by_hardness(&self, keep: impl Fn(usize) -> bool) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        order.sort_by(|&a, &b| {
            self.hardness[a]
                .partial_cmp(&self.hardness[b])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        order
    }
}

/// floor(frac * m) with an absolute guard against representation noise in
/// products that are mathematically integral (0.3 * 10, 0.9 * 200, ...).
pub fn floor_count(frac: f64, m: usize) -> usize {
    ((frac * m as f64) + 1e-9).floor() as usize
}

/// ceil(frac * m) with the same guard.
pub fn ceil_count(frac: f64, m: usize) -> usize {
    ((frac * m as f64) - 1e-9).ceil() as usize
}
