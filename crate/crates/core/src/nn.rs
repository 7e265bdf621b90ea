//! Network building blocks shared by the two stages: linear layers, layer
//! norm, stacked LSTMs, and multi-head self-attention over a token matrix.
//!
//! Layers own their [`Parameter`]s; `forward` methods build nodes on a caller
//! tape via a [`Binder`], so one batch graph reuses each weight leaf.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Binder, Parameter, Tape, Tensor, TensorId};

/// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
fn uniform_init(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape/data agree by construction")
}

/// Fully connected layer: x [B, d_in] -> x @ w + b, w [d_in, d_out].
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Parameter,
    pub b: Parameter,
    d_out: usize,
}

impl Linear {
    pub fn new(name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: Parameter::new(format!("{name}.w"), uniform_init(rng, vec![d_in, d_out], d_in)),
            b: Parameter::new(format!("{name}.b"), uniform_init(rng, vec![1, d_out], d_in)),
            d_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: TensorId) -> Result<TensorId> {
        let w = binder.bind(tape, &self.w);
        let b = binder.bind(tape, &self.b);
        let xw = tape.matmul(x, w)?;
        let rows = tape.value(xw).shape()[0];
        let bb = tape.broadcast_to(b, &[rows, self.d_out])?;
        tape.add(xw, bb)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Layer normalization over the last axis with learned affine.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: Parameter::new(
                format!("{name}.gamma"),
                Tensor::new(vec![d], vec![1.0; d]).expect("const shape"),
            ),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(vec![d])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: TensorId) -> Result<TensorId> {
        let g = binder.bind(tape, &self.gamma);
        let b = binder.bind(tape, &self.beta);
        tape.layer_norm(x, g, b, self.eps)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// One LSTM layer. Gate order along the 4h axis is (input, forget, cell,
/// output); weights are stored input-major so a step is two matmuls.
#[derive(Debug, Clone)]
pub struct LstmLayer {
    pub w_ih: Parameter, // [d_in, 4h]
    pub w_hh: Parameter, // [h, 4h]
    pub b_ih: Parameter, // [1, 4h]
    pub b_hh: Parameter, // [1, 4h]
}

impl LstmLayer {
    pub fn new(name: &str, d_in: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan = hidden.max(1);
        LstmLayer {
            w_ih: Parameter::new(format!("{name}.w_ih"), uniform_init(rng, vec![d_in, 4 * hidden], fan)),
            w_hh: Parameter::new(format!("{name}.w_hh"), uniform_init(rng, vec![hidden, 4 * hidden], fan)),
            b_ih: Parameter::new(format!("{name}.b_ih"), uniform_init(rng, vec![1, 4 * hidden], fan)),
            b_hh: Parameter::new(format!("{name}.b_hh"), uniform_init(rng, vec![1, 4 * hidden], fan)),
        }
    }

    /// One time step: x [1, d_in], h and c [1, h] -> (h', c').
    pub fn step(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        x: TensorId,
        h: TensorId,
        c: TensorId,
    ) -> Result<(TensorId, TensorId)> {
        let w_ih = binder.bind(tape, &self.w_ih);
        let w_hh = binder.bind(tape, &self.w_hh);
        let b_ih = binder.bind(tape, &self.b_ih);
        let b_hh = binder.bind(tape, &self.b_hh);
        tape.lstm_cell(x, h, c, w_ih, w_hh, b_ih, b_hh)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.w_ih, &self.w_hh, &self.b_ih, &self.b_hh]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.w_ih, &mut self.w_hh, &mut self.b_ih, &mut self.b_hh]
    }
}

/// Stacked LSTM layers applied over a sequence; returns the top layer's
/// hidden state at every time step.
#[derive(Debug, Clone)]
pub struct LstmStack {
    pub layers: Vec<LstmLayer>,
    hidden: usize,
}

impl LstmStack {
    pub fn new(name: &str, d_in: usize, hidden: usize, n_layers: usize, rng: &mut ChaCha8Rng) -> Self {
        let layers = (0..n_layers)
            .map(|l| {
                let d = if l == 0 { d_in } else { hidden };
                LstmLayer::new(&format!("{name}.l{l}"), d, hidden, rng)
            })
            .collect();
        LstmStack { layers, hidden }
    }

    /// `xs` are per-time-step inputs of shape [1, d_in].
    pub fn forward_seq(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        xs: &[TensorId],
    ) -> Result<Vec<TensorId>> {
        let zero = Tensor::zeros(vec![1, self.hidden]);
        let mut states: Vec<(TensorId, TensorId)> = self
            .layers
            .iter()
            .map(|_| {
                let h = tape.constant(zero.clone());
                let c = tape.constant(zero.clone());
                (h, c)
            })
            .collect();
        let mut outputs = Vec::with_capacity(xs.len());
        for &x in xs {
            let mut inp = x;
            for (layer, state) in self.layers.iter().zip(states.iter_mut()) {
                let (h, c) = layer.step(tape, binder, inp, state.0, state.1)?;
                *state = (h, c);
                inp = h;
            }
            outputs.push(inp);
        }
        Ok(outputs)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// Multi-head self-attention over a token matrix x [n_tokens, d_model].
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    n_heads: usize,
    d_head: usize,
}

impl MultiHeadAttention {
    pub fn new(name: &str, d_model: usize, n_heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(
            d_model % n_heads == 0,
            "d_model {d_model} must be divisible by n_heads {n_heads}"
        );
        MultiHeadAttention {
            wq: Linear::new(&format!("{name}.wq"), d_model, d_model, rng),
            wk: Linear::new(&format!("{name}.wk"), d_model, d_model, rng),
            wv: Linear::new(&format!("{name}.wv"), d_model, d_model, rng),
            wo: Linear::new(&format!("{name}.wo"), d_model, d_model, rng),
            n_heads,
            d_head: d_model / n_heads,
        }
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: TensorId) -> Result<TensorId> {
        let q = self.wq.forward(tape, binder, x)?;
        let k = self.wk.forward(tape, binder, x)?;
        let v = self.wv.forward(tape, binder, x)?;
        let scale = 1.0 / (self.d_head as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = tape.slice(q, 1, h * self.d_head, self.d_head)?;
            let kh = tape.slice(k, 1, h * self.d_head, self.d_head)?;
            let vh = tape.slice(v, 1, h * self.d_head, self.d_head)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.scalar_mul(scores, scale);
            let attn = tape.softmax(scaled, 1)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let merged = tape.concat(&heads, 1)?;
        self.wo.forward(tape, binder, merged)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        [&self.wq, &self.wk, &self.wv, &self.wo]
            .iter()
            .flat_map(|l| l.params())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.wq.params_mut();
        out.extend(self.wk.params_mut());
        out.extend(self.wv.params_mut());
        out.extend(self.wo.params_mut());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;

    #[test]
    fn linear_fc_parameter_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fc = Linear::new("fc", 3, 2, &mut rng);
        let n: usize = fc.params().iter().map(|p| p.numel()).sum();
        assert_eq!(n, 8); // 3*2 weights + 2 biases
    }

    #[test]
    fn lstm_cell_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layer = LstmLayer::new("lstm", 3, 4, &mut rng);
        // Check w.r.t. x, h, c and all four weight tensors at once.
        let point = [
            Tensor::new(vec![1, 3], vec![0.4, -0.2, 0.9]).unwrap(),
            Tensor::new(vec![1, 4], vec![0.1, 0.3, -0.5, 0.2]).unwrap(),
            Tensor::new(vec![1, 4], vec![-0.3, 0.8, 0.05, -0.1]).unwrap(),
            layer.w_ih.value.clone(),
            layer.w_hh.value.clone(),
            layer.b_ih.value.clone(),
            layer.b_hh.value.clone(),
        ];
        let err = grad_check(
            |tape, ids| {
                let (h_new, _) =
                    tape.lstm_cell(ids[0], ids[1], ids[2], ids[3], ids[4], ids[5], ids[6])?;
                Ok(tape.sum(h_new))
            },
            &point,
        )
        .unwrap();
        assert!(err < 1e-4, "lstm cell grad err {err}");
    }

    /// The fused cell must agree with the same step spelled out in
    /// primitive ops, forward values and gradients both.
    #[test]
    fn fused_lstm_cell_matches_primitive_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let layer = LstmLayer::new("lstm", 3, 5, &mut rng);
        let hidden = 5;
        let x = Tensor::new(vec![1, 3], vec![0.7, -0.4, 0.15]).unwrap();
        let h = Tensor::new(vec![1, 5], vec![0.2, -0.1, 0.4, 0.0, -0.6]).unwrap();
        let c = Tensor::new(vec![1, 5], vec![0.1, 0.9, -0.2, 0.3, 0.05]).unwrap();

        let run = |fused: bool| -> (Vec<f64>, Vec<f64>) {
            let mut tape = Tape::new();
            let xi = tape.leaf(x.clone(), true);
            let hi = tape.constant(h.clone());
            let ci = tape.constant(c.clone());
            let w_ih = tape.leaf(layer.w_ih.value.clone(), true);
            let w_hh = tape.leaf(layer.w_hh.value.clone(), true);
            let b_ih = tape.leaf(layer.b_ih.value.clone(), true);
            let b_hh = tape.leaf(layer.b_hh.value.clone(), true);
            let h_new = if fused {
                tape.lstm_cell(xi, hi, ci, w_ih, w_hh, b_ih, b_hh).unwrap().0
            } else {
                let a = tape.matmul(xi, w_ih).unwrap();
                let b = tape.matmul(hi, w_hh).unwrap();
                let s1 = tape.add(a, b_ih).unwrap();
                let s2 = tape.add(b, b_hh).unwrap();
                let gates = tape.add(s1, s2).unwrap();
                let i_g = tape.slice(gates, 1, 0, hidden).unwrap();
                let f_g = tape.slice(gates, 1, hidden, hidden).unwrap();
                let g_g = tape.slice(gates, 1, 2 * hidden, hidden).unwrap();
                let o_g = tape.slice(gates, 1, 3 * hidden, hidden).unwrap();
                let i_t = tape.sigmoid(i_g);
                let f_t = tape.sigmoid(f_g);
                let g_t = tape.tanh(g_g);
                let o_t = tape.sigmoid(o_g);
                let fc = tape.mul(f_t, ci).unwrap();
                let ig = tape.mul(i_t, g_t).unwrap();
                let c_new = tape.add(fc, ig).unwrap();
                let c_act = tape.tanh(c_new);
                tape.mul(o_t, c_act).unwrap()
            };
            let loss = tape.sum(h_new);
            tape.backward(loss).unwrap();
            (
                tape.value(h_new).data().to_vec(),
                tape.grad(w_ih).unwrap().to_vec(),
            )
        };

        let (v_fused, g_fused) = run(true);
        let (v_prim, g_prim) = run(false);
        for (a, b) in v_fused.iter().zip(&v_prim) {
            assert!((a - b).abs() < 1e-12, "forward {a} vs {b}");
        }
        for (a, b) in g_fused.iter().zip(&g_prim) {
            assert!((a - b).abs() < 1e-12, "grad {a} vs {b}");
        }
    }

    #[test]
    fn lstm_param_count_scales_quadratically_in_hidden() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let count = |h: usize, rng: &mut ChaCha8Rng| -> usize {
            LstmLayer::new("l", 8, h, rng)
                .params()
                .iter()
                .map(|p| p.numel())
                .sum()
        };
        let small = count(16, &mut rng);
        let big = count(32, &mut rng);
        // Doubling the hidden size roughly quadruples the recurrent block.
        let ratio = big as f64 / small as f64;
        assert!(ratio > 2.5 && ratio < 4.0, "ratio {ratio}");
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mha = MultiHeadAttention::new("mha", 4, 2, &mut rng);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let x = tape.constant(
            Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64) * 0.13 - 0.7).collect()).unwrap(),
        );
        let out = mha.forward(&mut tape, &mut binder, x).unwrap();
        assert_eq!(tape.value(out).shape(), &[3, 4]);
        assert!(tape.value(out).data().iter().all(|v| v.is_finite()));
    }
}
