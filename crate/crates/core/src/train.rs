//! Shared mini-batch training loop with cell-held-out early stopping.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::WindowSample;
use crate::error::{Error, Result};
use crate::tensor::{params_to_map, AdamState, Binder, Parameter, Tape, TensorId};

/// Optimizer and schedule settings shared by both training stages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Early-stopping patience in epochs.
    pub patience: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Fraction of training cells held out for early stopping.
    pub val_fraction: f64,
    /// Classification-target smoothing: targets become
    /// y*(1-eps) + eps/2. Zero keeps hard 0/1 targets; a small positive
    /// value caps the optimal logits so the decision boundary settles in
    /// the middle of the unlabeled margin instead of drifting to either
    /// class's edge.
    pub label_smoothing: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            epochs: 100,
            patience: 20,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            seed: 0,
            val_fraction: 0.1,
            label_smoothing: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// A model trainable against labeled windows.
pub trait Trainable {
    /// Build the scalar loss for one mini-batch on the given tape.
    fn loss_graph(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        batch: &[&WindowSample],
    ) -> Result<TensorId>;

    fn parameters(&self) -> Vec<&Parameter>;
    fn parameters_mut(&mut self) -> Vec<&mut Parameter>;
}

/// Split windows into train/validation sets. Splitting is by cell when the
/// set covers at least two cells; for a single cell the last tenth of its
/// windows is held out instead.
fn split_validation(
    windows: &[WindowSample],
    val_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut by_cell: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, w) in windows.iter().enumerate() {
        by_cell.entry(w.cell_id.as_str()).or_default().push(i);
    }
    if by_cell.len() >= 2 {
        let mut ids: Vec<&str> = by_cell.keys().copied().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed));
        ids.shuffle(&mut rng);
        let n_val = ((ids.len() as f64 * val_fraction).round() as usize)
            .clamp(1, ids.len() - 1);
        let val_cells: Vec<&str> = ids[..n_val].to_vec();
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (cell, idxs) in &by_cell {
            if val_cells.contains(cell) {
                val.extend(idxs);
            } else {
                train.extend(idxs);
            }
        }
        (train, val)
    } else {
        let n = windows.len();
        let n_val = ((n as f64 * val_fraction).ceil() as usize).clamp(1, n - 1);
        ((0..n - n_val).collect(), (n - n_val..n).collect())
    }
}

fn mean_loss<M: Trainable>(model: &M, windows: &[&WindowSample], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in windows.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let loss = model.loss_graph(&mut tape, &mut binder, chunk)?;
        total += tape.value(loss).item() * chunk.len() as f64;
    }
    Ok(total / windows.len() as f64)
}

/// Train `model` on `windows` with Adam, early stopping on held-out cells,
/// and best-epoch weight restoration.
pub fn fit<M: Trainable>(
    model: &mut M,
    windows: &[WindowSample],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    if windows.len() < 2 {
        return Err(Error::Training(format!(
            "need at least 2 labeled windows, got {}",
            windows.len()
        )));
    }
    let (train_idx, val_idx) = split_validation(windows, cfg.val_fraction, cfg.seed);
    let val_set: Vec<&WindowSample> = val_idx.iter().map(|&i| &windows[i]).collect();

    let mut adam = AdamState::new(cfg.lr, cfg.beta1, cfg.beta2);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = train_idx.clone();

    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        stopped_early: false,
    };
    let mut best_params = params_to_map(&model.parameters());
    let mut epochs_since_best = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&WindowSample> = chunk.iter().map(|&i| &windows[i]).collect();
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let loss = model.loss_graph(&mut tape, &mut binder, &batch)?;
            train_loss += tape.value(loss).item() * batch.len() as f64;
            tape.backward(loss)?;
            let mut params = model.parameters_mut();
            binder.harvest(&tape, &mut params)?;
            adam.step(&mut params)?;
            for p in params {
                p.zero_grad();
            }
        }
        train_loss /= train_idx.len() as f64;
        let val_loss = mean_loss(model, &val_set, cfg.batch_size)?;
        history.epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });

        if val_loss < history.best_val_loss {
            history.best_val_loss = val_loss;
            history.best_epoch = epoch;
            best_params = params_to_map(&model.parameters());
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }

    let mut params = model.parameters_mut();
    crate::tensor::load_params_from_map(&best_params, &mut params)?;
    Ok(history)
}
