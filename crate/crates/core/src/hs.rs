//! Stage 1: health-state division.
//!
//! An LSTM classifier scores each sliding window with the probability that
//! the cell is already degrading; a consecutive-trigger rule over those
//! per-cycle probabilities, guarded by a minimum cycle threshold (MCT),
//! yields the first prediction cycle (FPC) where Stage 2 takes over.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{CellSeries, NormStats, WindowSample};
use crate::error::{Error, Result};
use crate::nn::{Linear, LstmStack};
use crate::tensor::{
    load_params_from_map, params_to_map, Binder, Parameter, SavedTensor, Tape, Tensor, TensorId,
};
use crate::train::{fit, TrainConfig, TrainHistory, Trainable};

fn default_hs_hidden() -> usize {
    32
}

/// Classifier geometry. The network is two stacked 4-layer LSTM modules
/// followed by one fully connected layer with a sigmoid output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HsConfig {
    pub n_f: usize,
    pub n_w: usize,
    #[serde(default = "default_hs_hidden")]
    pub hidden: usize,
}

impl HsConfig {
    pub fn new(n_f: usize, n_w: usize) -> Self {
        HsConfig {
            n_f,
            n_w,
            hidden: default_hs_hidden(),
        }
    }
}

const LSTM_LAYERS_PER_MODULE: usize = 4;

/// Stage-1 health-state classifier.
#[derive(Debug, Clone)]
pub struct HsClassifier {
    config: HsConfig,
    lstm_a: LstmStack,
    lstm_b: LstmStack,
    fc: Linear,
}

impl HsClassifier {
    pub fn new(config: HsConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lstm_a = LstmStack::new(
            "hs.lstm_a",
            config.n_f,
            config.hidden,
            LSTM_LAYERS_PER_MODULE,
            &mut rng,
        );
        let lstm_b = LstmStack::new(
            "hs.lstm_b",
            config.hidden,
            config.hidden,
            LSTM_LAYERS_PER_MODULE,
            &mut rng,
        );
        let fc = Linear::new("hs.fc", config.hidden, 1, &mut rng);
        HsClassifier {
            config,
            lstm_a,
            lstm_b,
            fc,
        }
    }

    pub fn config(&self) -> &HsConfig {
        &self.config
    }

    fn check_window(&self, shape: &[usize]) -> Result<()> {
        if shape != [self.config.n_f, self.config.n_w] {
            return Err(Error::shape(
                "hs_forward",
                &[self.config.n_f, self.config.n_w],
                shape,
            ));
        }
        Ok(())
    }

    /// Probability of the unhealthy state for one window already on the
    /// tape, shape [n_f, n_w]. Output is a [1, 1] tensor in (0, 1).
    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, window: TensorId) -> Result<TensorId> {
        self.check_window(tape.value(window).shape())?;
        // Time-major view so each step is a cheap row slice.
        let tm = tape.transpose(window)?;
        let xs: Vec<TensorId> = (0..self.config.n_w)
            .map(|t| tape.slice(tm, 0, t, 1))
            .collect::<Result<_>>()?;
        let seq_a = self.lstm_a.forward_seq(tape, binder, &xs)?;
        let seq_b = self.lstm_b.forward_seq(tape, binder, &seq_a)?;
        let last = *seq_b.last().expect("n_w >= 1");
        let logit = self.fc.forward(tape, binder, last)?;
        Ok(tape.sigmoid(logit))
    }

    /// Pure inference on one window matrix.
    pub fn predict(&self, window: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let id = tape.constant(window.clone());
        let out = self.forward(&mut tape, &mut binder, id)?;
        Ok(tape.value(out).item())
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out = self.lstm_a.params();
        out.extend(self.lstm_b.params());
        out.extend(self.fc.params());
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.lstm_a.params_mut();
        out.extend(self.lstm_b.params_mut());
        out.extend(self.fc.params_mut());
        out
    }

    pub fn count_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    pub fn save(&self, path: &Path, norm: &NormStats) -> Result<()> {
        let ckpt = HsCheckpoint {
            format: HS_CHECKPOINT_FORMAT.to_string(),
            config: self.config.clone(),
            norm: norm.clone(),
            params: params_to_map(&self.parameters()),
        };
        std::fs::write(path, serde_json::to_string(&ckpt)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(HsClassifier, NormStats)> {
        let raw = std::fs::read_to_string(path)?;
        let ckpt: HsCheckpoint = serde_json::from_str(&raw)?;
        if ckpt.format != HS_CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unexpected checkpoint format `{}`, expected `{HS_CHECKPOINT_FORMAT}`",
                ckpt.format
            )));
        }
        let mut model = HsClassifier::new(ckpt.config, 0);
        load_params_from_map(&ckpt.params, &mut model.parameters_mut())?;
        Ok((model, ckpt.norm))
    }
}

pub const HS_CHECKPOINT_FORMAT: &str = "rulcast-hs-checkpoint/v1";

/// Checkpoint bundle: geometry, normalization statistics, and weights.
#[derive(Debug, Serialize, Deserialize)]
struct HsCheckpoint {
    format: String,
    config: HsConfig,
    norm: NormStats,
    params: BTreeMap<String, SavedTensor>,
}

/// Binary cross entropy between predictions in (0, 1) and 0/1 labels,
/// averaged over the batch. Predictions are clamped to
/// [1e-7, 1 - 1e-7] before the logs.
pub fn bce_loss(tape: &mut Tape, preds: TensorId, labels: &[f64]) -> Result<TensorId> {
    let weights = vec![1.0; labels.len()];
    bce_loss_weighted(tape, preds, labels, &weights)
}

/// BCE with per-sample weights (mean of weighted terms). `train_hs` uses
/// this to balance the classes: with a window size of 50 and small head
/// fractions, far fewer head windows exist than tail windows.
pub fn bce_loss_weighted(
    tape: &mut Tape,
    preds: TensorId,
    labels: &[f64],
    weights: &[f64],
) -> Result<TensorId> {
    let n = labels.len();
    if n == 0 || tape.value(preds).numel() != n || weights.len() != n {
        return Err(Error::InvalidArgument(format!(
            "bce_loss over {} predictions, {} labels, {} weights",
            tape.value(preds).numel(),
            n,
            weights.len()
        )));
    }
    let shape = tape.value(preds).shape().to_vec();
    let w_y = tape.constant(Tensor::new(
        shape.clone(),
        labels.iter().zip(weights).map(|(y, w)| y * w).collect(),
    )?);
    let w_one_minus_y = tape.constant(Tensor::new(
        shape.clone(),
        labels
            .iter()
            .zip(weights)
            .map(|(y, w)| (1.0 - y) * w)
            .collect(),
    )?);
    let ones = tape.constant(Tensor::new(shape, vec![1.0; n])?);

    let p = tape.clamp(preds, 1e-7, 1.0 - 1e-7);
    let log_p = tape.log(p);
    let one_minus_p = tape.sub(ones, p)?;
    let log_1mp = tape.log(one_minus_p);
    let t1 = tape.mul(w_y, log_p)?;
    let t2 = tape.mul(w_one_minus_y, log_1mp)?;
    let s = tape.add(t1, t2)?;
    let m = tape.mean(s);
    Ok(tape.scalar_mul(m, -1.0))
}

fn hs_batch_loss(
    model: &HsClassifier,
    tape: &mut Tape,
    binder: &mut Binder,
    batch: &[&WindowSample],
    class_weights: (f64, f64),
    label_smoothing: f64,
) -> Result<TensorId> {
    let mut preds = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    let mut weights = Vec::with_capacity(batch.len());
    for w in batch {
        let label = w.hs_label.ok_or_else(|| {
            Error::Training(format!(
                "window of cell `{}` at cycle {} has no HS label",
                w.cell_id, w.end_cycle
            ))
        })?;
        let id = tape.constant(w.matrix.clone());
        preds.push(model.forward(tape, binder, id)?);
        labels.push(label as f64 * (1.0 - label_smoothing) + label_smoothing / 2.0);
        weights.push(if label == 0 { class_weights.0 } else { class_weights.1 });
    }
    let stacked = tape.concat(&preds, 0)?;
    bce_loss_weighted(tape, stacked, &labels, &weights)
}

impl Trainable for HsClassifier {
    fn loss_graph(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        batch: &[&WindowSample],
    ) -> Result<TensorId> {
        hs_batch_loss(self, tape, binder, batch, (1.0, 1.0), 0.0)
    }

    fn parameters(&self) -> Vec<&Parameter> {
        HsClassifier::parameters(self)
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        HsClassifier::parameters_mut(self)
    }
}

/// Classifier plus class weights, so the healthy minority (few windows end
/// inside the head region when `n_w` is large) is not drowned out.
struct BalancedHs<'a> {
    model: &'a mut HsClassifier,
    class_weights: (f64, f64),
    label_smoothing: f64,
}

impl Trainable for BalancedHs<'_> {
    fn loss_graph(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        batch: &[&WindowSample],
    ) -> Result<TensorId> {
        hs_batch_loss(
            self.model,
            tape,
            binder,
            batch,
            self.class_weights,
            self.label_smoothing,
        )
    }

    fn parameters(&self) -> Vec<&Parameter> {
        self.model.parameters()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.model.parameters_mut()
    }
}

/// Train the classifier on HS-labeled (and already normalized) windows.
/// Requires both classes to be present; the BCE is class-balanced
/// (each class weighted inversely to its frequency, mean weight 1).
pub fn train_hs(
    model: &mut HsClassifier,
    windows: &[WindowSample],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    let labeled: Vec<WindowSample> = windows
        .iter()
        .filter(|w| w.hs_label.is_some())
        .cloned()
        .collect();
    if labeled.is_empty() {
        return Err(Error::Training("no HS-labeled windows".into()));
    }
    let healthy = labeled.iter().filter(|w| w.hs_label == Some(0)).count();
    if healthy == 0 || healthy == labeled.len() {
        return Err(Error::Training(format!(
            "degenerate single-class label set ({healthy} healthy of {})",
            labeled.len()
        )));
    }
    let n = labeled.len() as f64;
    let unhealthy = n - healthy as f64;
    let mut balanced = BalancedHs {
        model,
        class_weights: (n / (2.0 * healthy as f64), n / (2.0 * unhealthy)),
        label_smoothing: cfg.label_smoothing,
    };
    fit(&mut balanced, &labeled, cfg)
}

/// Continuous-trigger settings for the FPC decision.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TriggerConfig {
    /// Number of consecutive unhealthy classifications required.
    pub consecutive_required: usize,
    /// Probability cutoff above which a window counts as unhealthy.
    pub unhealthy_threshold: f64,
    /// Minimum cycle threshold as a fraction of the reference lifetime.
    pub mct_fraction: f64,
}

impl Default for TriggerConfig {
    fn default() -> Self {
        TriggerConfig {
            consecutive_required: 5,
            unhealthy_threshold: 0.5,
            mct_fraction: 0.10,
        }
    }
}

impl TriggerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.consecutive_required < 1 {
            return Err(Error::InvalidArgument(
                "consecutive_required must be at least 1".into(),
            ));
        }
        if !(self.unhealthy_threshold > 0.0 && self.unhealthy_threshold < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "unhealthy_threshold must lie in (0, 1), got {}",
                self.unhealthy_threshold
            )));
        }
        if !(0.0..1.0).contains(&self.mct_fraction) {
            return Err(Error::InvalidArgument(format!(
                "mct_fraction must lie in [0, 1), got {}",
                self.mct_fraction
            )));
        }
        Ok(())
    }
}

/// Per-cycle classifier probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleProb {
    pub cycle: usize,
    pub prob: f64,
}

/// The FPC decision record for one cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FpcResult {
    pub cell_id: String,
    pub fpc_cycle: usize,
    /// End cycles of the consecutive windows that fired the trigger.
    pub trigger_cycle_window: Vec<usize>,
    pub probabilities: Vec<CycleProb>,
}

/// Classifier probabilities for every window of a (normalized) cell,
/// indexed by window end cycle.
pub fn cycle_probabilities(
    model: &HsClassifier,
    windows: &[WindowSample],
) -> Result<Vec<CycleProb>> {
    let mut probs = Vec::with_capacity(windows.len());
    for w in windows {
        probs.push(CycleProb {
            cycle: w.end_cycle,
            prob: model.predict(&w.matrix)?,
        });
    }
    probs.sort_by_key(|p| p.cycle);
    Ok(probs)
}

/// Scan per-cycle probabilities for the first run of
/// `consecutive_required` unhealthy classifications whose first cycle lies
/// strictly beyond `mct_fraction * eol_reference`. Returns `None` when the
/// trigger never fires; absence is a value, not an error.
pub fn decide_fpc(
    cell_id: &str,
    probs: &[CycleProb],
    eol_reference: f64,
    trigger: &TriggerConfig,
) -> Option<FpcResult> {
    let required = trigger.consecutive_required;
    let mct_cycle = trigger.mct_fraction * eol_reference;
    let mut run = 0usize;
    for (i, p) in probs.iter().enumerate() {
        if p.prob >= trigger.unhealthy_threshold {
            run += 1;
        } else {
            run = 0;
        }
        if run >= required {
            let start = i + 1 - required;
            if probs[start].cycle as f64 > mct_cycle {
                return Some(FpcResult {
                    cell_id: cell_id.to_string(),
                    fpc_cycle: p.cycle,
                    trigger_cycle_window: probs[start..=i].iter().map(|p| p.cycle).collect(),
                    probabilities: probs.to_vec(),
                });
            }
        }
    }
    None
}

/// Percentage of first-cycle discharge capacity remaining at the FPC.
pub fn fpc_capacity_pct(cell: &CellSeries, fpc: usize) -> f64 {
    100.0 * cell.discharge_capacity(fpc) / cell.discharge_capacity(1)
}
