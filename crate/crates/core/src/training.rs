//! Shared settings and helpers for minibatch training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    /// Share of training units held out for early stopping.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch_size: 32,
            epochs: 30,
            patience: 5,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> Adam {
        Adam::with_lr(self.lr)
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// Per-epoch record of a training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Validation C-index per epoch, when a validation split exists.
    pub val_cindex: Vec<f64>,
    pub best_epoch: usize,
    pub skipped_batches: usize,
    pub stopped_early: bool,
}

/// Splits `0..n` into shuffled (train, validation) index sets.
pub fn split_indices(n: usize, val_fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_val = if val_fraction > 0.0 && n >= 10 {
        ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Tracks the best validation score and decides when to stop.
#[derive(Debug)]
pub(crate) struct EarlyStopping<T> {
    patience: usize,
    best: Option<(f64, usize, T)>,
}

impl<T: Clone> EarlyStopping<T> {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None }
    }

    /// Records an epoch; returns true when training should stop.
    pub fn record(&mut self, epoch: usize, score: f64, state: &T) -> bool {
        let improved = self.best.as_ref().is_none_or(|(b, _, _)| score > *b);
        if improved {
            self.best = Some((score, epoch, state.clone()));
        }
        let best_epoch = self.best.as_ref().map_or(epoch, |b| b.1);
        self.patience > 0 && epoch - best_epoch >= self.patience
    }

    pub fn into_best(self) -> Option<(usize, T)> {
        self.best.map(|(_, e, s)| (e, s))
    }
}
