//! Stage 2: spatio-temporal multimodal attention network for RUL
//! regression.
//!
//! Pipeline per window (n_f features x n_w cycles):
//!   1. depthwise conv lifts each channel independently to d_model features
//!      over time;
//!   2. at each time step, multi-head self-attention across the n_f channel
//!      tokens (pre-norm encoder block), added residually to its input;
//!   3. a fully connected layer fuses all channels per time step;
//!   4. an LSTM walks the fused sequence;
//!   5. temporal attention scores every hidden state against the last one
//!      and builds a global context vector;
//!   6. the context re-enters through a trainable multiplier, initialized
//!      to zero so the network starts as plain last-hidden-state regression;
//!   7. a sigmoid output head maps to an RUL percentage in (0, 1).

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{NormStats, WindowSample};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, LstmStack, MultiHeadAttention};
use crate::tensor::{
    load_params_from_map, params_to_map, Binder, Parameter, SavedTensor, Tape, Tensor, TensorId,
};
use crate::train::{fit, TrainConfig, TrainHistory, Trainable};

fn default_kernel() -> usize {
    3
}
fn default_d_model() -> usize {
    8
}
fn default_n_heads() -> usize {
    2
}
fn default_d_fuse() -> usize {
    16
}
fn default_d_h() -> usize {
    64
}

/// Network sizes. Defaults land the parameter count in the low tens of
/// thousands for a 7-feature input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StManConfig {
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_n_heads")]
    pub n_heads: usize,
    #[serde(default = "default_d_fuse")]
    pub d_fuse: usize,
    #[serde(default = "default_d_h")]
    pub d_h: usize,
}

impl Default for StManConfig {
    fn default() -> Self {
        StManConfig {
            kernel: default_kernel(),
            d_model: default_d_model(),
            n_heads: default_n_heads(),
            d_fuse: default_d_fuse(),
            d_h: default_d_h(),
        }
    }
}

impl StManConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv kernel must be odd, got {}",
                self.kernel
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct StManModel {
    config: StManConfig,
    n_f: usize,
    n_w: usize,
    // One [n_f, kernel] depthwise kernel set and one [n_f, 1] bias per
    // output feature; together they lift each channel to d_model features.
    conv_kernels: Vec<Parameter>,
    conv_bias: Vec<Parameter>,
    ln1: LayerNorm,
    mha: MultiHeadAttention,
    ln2: LayerNorm,
    ffn1: Linear,
    ffn2: Linear,
    fuse: Linear,
    lstm: LstmStack,
    /// Key projection of the temporal attention layer.
    attn_key: Parameter,
    /// Trainable multiplier gating the global context; starts at zero.
    lambda: Parameter,
    out: Linear,
}

impl StManModel {
    pub fn new(config: StManConfig, n_f: usize, n_w: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (config.kernel as f64 * n_f as f64).sqrt();
        let mut conv_kernels = Vec::with_capacity(config.d_model);
        let mut conv_bias = Vec::with_capacity(config.d_model);
        for m in 0..config.d_model {
            let data: Vec<f64> = (0..n_f * config.kernel)
                .map(|_| rand::Rng::random_range(&mut rng, -bound..bound))
                .collect();
            conv_kernels.push(Parameter::new(
                format!("stman.conv.k{m}.w"),
                Tensor::new(vec![n_f, config.kernel], data)?,
            ));
            let bias: Vec<f64> = (0..n_f)
                .map(|_| rand::Rng::random_range(&mut rng, -bound..bound))
                .collect();
            conv_bias.push(Parameter::new(
                format!("stman.conv.k{m}.b"),
                Tensor::new(vec![n_f, 1], bias)?,
            ));
        }
        let ln1 = LayerNorm::new("stman.encoder.ln1", config.d_model);
        let mha = MultiHeadAttention::new("stman.encoder.mha", config.d_model, config.n_heads, &mut rng);
        let ln2 = LayerNorm::new("stman.encoder.ln2", config.d_model);
        let ffn1 = Linear::new("stman.encoder.ffn1", config.d_model, 2 * config.d_model, &mut rng);
        let ffn2 = Linear::new("stman.encoder.ffn2", 2 * config.d_model, config.d_model, &mut rng);
        let fuse = Linear::new("stman.fuse", n_f * config.d_model, config.d_fuse, &mut rng);
        let lstm = LstmStack::new("stman.lstm", config.d_fuse, config.d_h, 1, &mut rng);
        let attn_key = Parameter::new(
            "stman.temporal.w_key",
            {
                let b = 1.0 / (config.d_h as f64).sqrt();
                let data: Vec<f64> = (0..config.d_h * config.d_h)
                    .map(|_| rand::Rng::random_range(&mut rng, -b..b))
                    .collect();
                Tensor::new(vec![config.d_h, config.d_h], data)?
            },
        );
        let lambda = Parameter::new("stman.lambda", Tensor::scalar(0.0));
        let out = Linear::new("stman.out", config.d_h, 1, &mut rng);
        Ok(StManModel {
            config,
            n_f,
            n_w,
            conv_kernels,
            conv_bias,
            ln1,
            mha,
            ln2,
            ffn1,
            ffn2,
            fuse,
            lstm,
            attn_key,
            lambda,
            out,
        })
    }

    pub fn config(&self) -> &StManConfig {
        &self.config
    }

    pub fn n_f(&self) -> usize {
        self.n_f
    }

    pub fn n_w(&self) -> usize {
        self.n_w
    }

    fn check_window(&self, shape: &[usize]) -> Result<()> {
        if shape != [self.n_f, self.n_w] {
            return Err(Error::shape("stman_forward", &[self.n_f, self.n_w], shape));
        }
        Ok(())
    }

    /// Channel tokens per time step after the conv lift: a [n_f, d_model]
    /// matrix for each of the n_w cycles.
    fn conv_tokens(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        window: TensorId,
    ) -> Result<Vec<TensorId>> {
        let mut lifted = Vec::with_capacity(self.config.d_model);
        for (k, b) in self.conv_kernels.iter().zip(&self.conv_bias) {
            let kid = binder.bind(tape, k);
            let bid = binder.bind(tape, b);
            let y = tape.conv1d_depthwise(window, kid)?;
            let bb = tape.broadcast_to(bid, &[self.n_f, self.n_w])?;
            lifted.push(tape.add(y, bb)?);
        }
        let mut tokens = Vec::with_capacity(self.n_w);
        for t in 0..self.n_w {
            let cols: Vec<TensorId> = lifted
                .iter()
                .map(|&y| tape.slice(y, 1, t, 1))
                .collect::<Result<_>>()?;
            tokens.push(tape.concat(&cols, 1)?);
        }
        Ok(tokens)
    }

    /// Pre-norm transformer encoder block over one token matrix.
    fn encoder_forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        tokens: TensorId,
    ) -> Result<TensorId> {
        let a = self.ln1.forward(tape, binder, tokens)?;
        let attended = self.mha.forward(tape, binder, a)?;
        let res1 = tape.add(tokens, attended)?;
        let b = self.ln2.forward(tape, binder, res1)?;
        let f1 = self.ffn1.forward(tape, binder, b)?;
        let f1 = tape.relu(f1);
        let f2 = self.ffn2.forward(tape, binder, f1)?;
        tape.add(res1, f2)
    }

    fn forward_parts(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        window: TensorId,
    ) -> Result<(TensorId, TensorId)> {
        self.check_window(tape.value(window).shape())?;
        let tokens = self.conv_tokens(tape, binder, window)?;
        let mut fused_seq = Vec::with_capacity(self.n_w);
        for tok in tokens {
            let enc = self.encoder_forward(tape, binder, tok)?;
            let flat = tape.reshape(enc, &[1, self.n_f * self.config.d_model])?;
            fused_seq.push(self.fuse.forward(tape, binder, flat)?);
        }
        let hidden = self.lstm.forward_seq(tape, binder, &fused_seq)?;
        let h_all = tape.concat(&hidden, 0)?;
        let h_last = *hidden.last().expect("n_w >= 1");

        let w_key = binder.bind(tape, &self.attn_key);
        let keys = tape.matmul(h_all, w_key)?;
        let keys_t = tape.transpose(keys)?;
        let scores = tape.matmul(h_last, keys_t)?;
        let scaled = tape.scalar_mul(scores, 1.0 / (self.config.d_h as f64).sqrt());
        let alpha = tape.softmax(scaled, 1)?;
        let context = tape.matmul(alpha, h_all)?;

        let lam = binder.bind(tape, &self.lambda);
        let lam_b = tape.broadcast_to(lam, &[1, self.config.d_h])?;
        let gated = tape.mul(lam_b, context)?;
        let z = tape.add(h_last, gated)?;
        let logit = self.out.forward(tape, binder, z)?;
        Ok((tape.sigmoid(logit), alpha))
    }

    /// RUL percentage in (0, 1) for one window already on the tape.
    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, window: TensorId) -> Result<TensorId> {
        Ok(self.forward_parts(tape, binder, window)?.0)
    }

    /// Pure inference on one window matrix.
    pub fn predict(&self, window: &Tensor) -> Result<f64> {
        Ok(self.predict_with_attention(window)?.0)
    }

    /// Inference that also returns the temporal attention weights.
    pub fn predict_with_attention(&self, window: &Tensor) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let id = tape.constant(window.clone());
        let (out, alpha) = self.forward_parts(&mut tape, &mut binder, id)?;
        Ok((
            tape.value(out).item(),
            tape.value(alpha).data().to_vec(),
        ))
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out: Vec<&Parameter> = Vec::new();
        out.extend(self.conv_kernels.iter());
        out.extend(self.conv_bias.iter());
        out.extend(self.ln1.params());
        out.extend(self.mha.params());
        out.extend(self.ln2.params());
        out.extend(self.ffn1.params());
        out.extend(self.ffn2.params());
        out.extend(self.fuse.params());
        out.extend(self.lstm.params());
        out.push(&self.attn_key);
        out.push(&self.lambda);
        out.extend(self.out.params());
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = Vec::new();
        out.extend(self.conv_kernels.iter_mut());
        out.extend(self.conv_bias.iter_mut());
        out.extend(self.ln1.params_mut());
        out.extend(self.mha.params_mut());
        out.extend(self.ln2.params_mut());
        out.extend(self.ffn1.params_mut());
        out.extend(self.ffn2.params_mut());
        out.extend(self.fuse.params_mut());
        out.extend(self.lstm.params_mut());
        out.push(&mut self.attn_key);
        out.push(&mut self.lambda);
        out.extend(self.out.params_mut());
        out
    }

    /// Exact count of trainable scalars.
    pub fn count_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    /// FLOPs of one forward pass on an n_f x n_w window, counting a
    /// multiply–add as 2 FLOPs (see `Tape::flops` for the convention).
    pub fn estimate_flops(&self) -> Result<u64> {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let id = tape.constant(Tensor::zeros(vec![self.n_f, self.n_w]));
        self.forward(&mut tape, &mut binder, id)?;
        Ok(tape.flops())
    }

    pub fn save(&self, path: &Path, norm: &NormStats) -> Result<()> {
        let ckpt = StManCheckpoint {
            format: STMAN_CHECKPOINT_FORMAT.to_string(),
            config: self.config.clone(),
            n_f: self.n_f,
            n_w: self.n_w,
            norm: norm.clone(),
            params: params_to_map(&self.parameters()),
        };
        std::fs::write(path, serde_json::to_string(&ckpt)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(StManModel, NormStats)> {
        let raw = std::fs::read_to_string(path)?;
        let ckpt: StManCheckpoint = serde_json::from_str(&raw)?;
        if ckpt.format != STMAN_CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unexpected checkpoint format `{}`, expected `{STMAN_CHECKPOINT_FORMAT}`",
                ckpt.format
            )));
        }
        let mut model = StManModel::new(ckpt.config, ckpt.n_f, ckpt.n_w, 0)?;
        load_params_from_map(&ckpt.params, &mut model.parameters_mut())?;
        Ok((model, ckpt.norm))
    }
}

pub const STMAN_CHECKPOINT_FORMAT: &str = "rulcast-stman-checkpoint/v1";

#[derive(Debug, Serialize, Deserialize)]
struct StManCheckpoint {
    format: String,
    config: StManConfig,
    n_f: usize,
    n_w: usize,
    norm: NormStats,
    params: BTreeMap<String, SavedTensor>,
}

/// Composite RUL loss: MAE + RMSE + MAPE over the batch, with the MAPE
/// denominator clamped to max(y, 1e-6) so end-of-life labels at exactly
/// zero stay usable.
pub fn rul_loss(tape: &mut Tape, preds: TensorId, labels: &[f64]) -> Result<TensorId> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::Training("rul_loss over an empty batch".into()));
    }
    if tape.value(preds).numel() != n {
        return Err(Error::InvalidArgument(format!(
            "rul_loss over {} predictions and {} labels",
            tape.value(preds).numel(),
            n
        )));
    }
    let shape = tape.value(preds).shape().to_vec();
    let y = tape.constant(Tensor::new(shape.clone(), labels.to_vec())?);
    let recip = tape.constant(Tensor::new(
        shape,
        labels.iter().map(|v| 1.0 / v.max(1e-6)).collect(),
    )?);

    let err = tape.sub(preds, y)?;
    let abs_err = tape.abs(err);
    let mae = tape.mean(abs_err);
    let sq = tape.mul(err, err)?;
    let mse = tape.mean(sq);
    let rmse = tape.sqrt(mse);
    let ape = tape.mul(abs_err, recip)?;
    let mape = tape.mean(ape);
    let partial = tape.add(mae, rmse)?;
    tape.add(partial, mape)
}

impl Trainable for StManModel {
    fn loss_graph(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        batch: &[&WindowSample],
    ) -> Result<TensorId> {
        let mut preds = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        for w in batch {
            let label = w.rul_label.ok_or_else(|| {
                Error::Training(format!(
                    "window of cell `{}` at cycle {} has no RUL label",
                    w.cell_id, w.end_cycle
                ))
            })?;
            let id = tape.constant(w.matrix.clone());
            preds.push(self.forward(tape, binder, id)?);
            labels.push(label);
        }
        let stacked = tape.concat(&preds, 0)?;
        rul_loss(tape, stacked, &labels)
    }

    fn parameters(&self) -> Vec<&Parameter> {
        StManModel::parameters(self)
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        StManModel::parameters_mut(self)
    }
}

/// Train on RUL-labeled post-FPC windows (already normalized).
///
/// The single end-of-life window whose label is exactly 0 is kept out of
/// the training set: the loss contract wants labels in (0, 1], and the
/// clamped MAPE term at y = 0 scales like 1e6 and drowns every other
/// window's gradient. Evaluation still scores that window.
pub fn train_rul(
    model: &mut StManModel,
    windows: &[WindowSample],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    let labeled: Vec<WindowSample> = windows
        .iter()
        .filter(|w| w.rul_label.is_some_and(|y| y > 0.0))
        .cloned()
        .collect();
    if labeled.is_empty() {
        return Err(Error::Training("no post-FPC windows to train on".into()));
    }
    fit(model, &labeled, cfg)
}

/// Invert the RUL-percentage label into remaining cycles:
/// remaining = y * (j - fpc) / (1 - y).
pub fn rul_to_cycles(rul_pct: f64, current_cycle: usize, fpc: usize) -> Result<f64> {
    if current_cycle <= fpc {
        return Err(Error::InvalidArgument(format!(
            "current cycle {current_cycle} must lie beyond the FPC {fpc}"
        )));
    }
    if !(0.0..1.0).contains(&rul_pct) {
        return Err(Error::InvalidArgument(format!(
            "RUL percentage must lie in [0, 1), got {rul_pct}"
        )));
    }
    Ok(rul_pct * (current_cycle - fpc) as f64 / (1.0 - rul_pct))
}
