//! Dense f64 tensors with tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every forward operation; [`Tape::backward`] replays the
//! record in reverse and accumulates exact analytic gradients into the leaves
//! that were created with `requires_grad = true`. All values are 64-bit floats
//! and a tape is single-threaded by construction; distinct tapes are
//! independent and may live on distinct threads.

mod adam;
mod gradcheck;
mod param;

pub use adam::AdamState;
pub use gradcheck::{grad_check, GRAD_CHECK_H};
pub use param::{load_params_from_map, params_to_map, Binder, Parameter, SavedTensor};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A plain dense tensor value: a shape and row-major data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "tensor shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Build a 2-D tensor from rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map(|r| r.len()).unwrap_or(0);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n_cols {
                return Err(Error::InvalidArgument(format!(
                    "row {} has length {}, expected {}",
                    i,
                    r.len(),
                    n_cols
                )));
            }
        }
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor::new(vec![n_rows, n_cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Element of a 2-D tensor at (row, col).
    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    ScalarMul(TensorId, f64),
    MatMul(TensorId, TensorId),
    Transpose(TensorId),
    Concat { inputs: Vec<TensorId>, axis: usize },
    Slice { input: TensorId, axis: usize, start: usize },
    BroadcastTo(TensorId),
    Reshape(TensorId),
    Conv1dDepthwise { input: TensorId, kernels: TensorId },
    Sigmoid(TensorId),
    Tanh(TensorId),
    Relu(TensorId),
    Abs(TensorId),
    Sqrt(TensorId),
    Log(TensorId),
    Clamp { input: TensorId, lo: f64, hi: f64 },
    Softmax { input: TensorId, axis: usize },
    LayerNorm { input: TensorId, gamma: TensorId, beta: TensorId, eps: f64 },
    Sum(TensorId),
    Mean(TensorId),
    LstmCell {
        x: TensorId,
        h: TensorId,
        c: TensorId,
        w_ih: TensorId,
        w_hh: TensorId,
        b_ih: TensorId,
        b_hh: TensorId,
        /// Post-activation gates (i, f, g, o), saved for the backward pass.
        gates: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Computation tape: owns every tensor of one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    flops: u64,
}

/// Decompose a shape around `axis` into (outer, axis_len, inner) extents for
/// row-major iteration.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply–add-weighted FLOP count of all forward ops recorded so far.
    ///
    /// Convention: a multiply–add counts as 2 FLOPs (matmul, conv); an
    /// elementwise arithmetic op counts 1 per element; a transcendental
    /// counts 1 per element; softmax counts 4 and layer norm 8 per element;
    /// pure data movement (slice, concat, reshape, transpose, broadcast)
    /// counts 0.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the loss w.r.t. tensor `id`, if one was computed.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Clear all accumulated gradients, keeping values and the op record.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        id
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Record a leaf tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorId {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Record a constant (non-differentiable) leaf.
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.leaf(value, false)
    }

    // ── Elementwise binary ops ──────────────────────────────────────────

    fn binary_values(&self, op: &str, a: TensorId, b: TensorId) -> Result<(Vec<usize>, usize)> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok((sa.to_vec(), self.value(a).numel()))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (shape, n) = self.binary_values("add", a, b)?;
        let data: Vec<f64> = self.value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        self.flops += n as u64;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor { shape, data }, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (shape, n) = self.binary_values("sub", a, b)?;
        let data: Vec<f64> = self.value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        self.flops += n as u64;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor { shape, data }, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (shape, n) = self.binary_values("mul", a, b)?;
        let data: Vec<f64> = self.value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        self.flops += n as u64;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor { shape, data }, rg, Op::Mul(a, b)))
    }

    pub fn scalar_mul(&mut self, a: TensorId, c: f64) -> TensorId {
        let shape = self.value(a).shape().to_vec();
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x * c).collect();
        self.flops += data.len() as u64;
        let rg = self.requires(a);
        self.push(Tensor { shape, data }, rg, Op::ScalarMul(a, c))
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.flops += 2 * (m * k * n) as u64;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            rg,
            Op::MatMul(a, b),
        ))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.value(a).shape();
        if sa.len() != 2 {
            return Err(Error::shape("transpose", sa, sa));
        }
        let (r, c) = (sa[0], sa[1]);
        let src = self.value(a).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.requires(a);
        Ok(self.push(
            Tensor {
                shape: vec![c, r],
                data,
            },
            rg,
            Op::Transpose(a),
        ))
    }

    // ── Shape ops ───────────────────────────────────────────────────────

    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let first = self.value(inputs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidArgument(format!(
                "concat axis {} out of range for shape {:?}",
                axis, first
            )));
        }
        let mut axis_total = 0;
        for &id in inputs {
            let s = self.value(id).shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::shape("concat", &first, s));
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let (outer, _, inner) = axis_extents(&shape, axis);
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0; numel];
        for o in 0..outer {
            let mut offset = 0;
            for &id in inputs {
                let s_axis = self.value(id).shape()[axis];
                let src = self.value(id).data();
                let src_start = o * s_axis * inner;
                let dst_start = o * axis_total * inner + offset * inner;
                data[dst_start..dst_start + s_axis * inner]
                    .copy_from_slice(&src[src_start..src_start + s_axis * inner]);
                offset += s_axis;
            }
        }
        let rg = inputs.iter().any(|&id| self.requires(id));
        Ok(self.push(
            Tensor { shape, data },
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    pub fn slice(&mut self, input: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let s = self.value(input).shape().to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(Error::InvalidArgument(format!(
                "slice [{start}, {start}+{len}) on axis {axis} out of range for shape {s:?}"
            )));
        }
        let (outer, axis_len, inner) = axis_extents(&s, axis);
        let src = self.value(input).data();
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src_start = (o * axis_len + start) * inner;
            let dst_start = o * len * inner;
            data[dst_start..dst_start + len * inner]
                .copy_from_slice(&src[src_start..src_start + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.requires(input);
        Ok(self.push(
            Tensor { shape, data },
            rg,
            Op::Slice { input, axis, start },
        ))
    }

    /// Expand `input` to `shape` with numpy broadcast semantics: shapes are
    /// right-aligned and each input dimension must equal the target or be 1.
    pub fn broadcast_to(&mut self, input: TensorId, shape: &[usize]) -> Result<TensorId> {
        let in_shape = self.value(input).shape().to_vec();
        let map = broadcast_index_map(&in_shape, shape)
            .ok_or_else(|| Error::shape("broadcast_to", &in_shape, shape))?;
        let src = self.value(input).data();
        let data: Vec<f64> = map.iter().map(|&i| src[i]).collect();
        let rg = self.requires(input);
        Ok(self.push(
            Tensor {
                shape: shape.to_vec(),
                data,
            },
            rg,
            Op::BroadcastTo(input),
        ))
    }

    pub fn reshape(&mut self, input: TensorId, shape: &[usize]) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(input).numel() {
            return Err(Error::shape(
                "reshape",
                self.value(input).shape(),
                shape,
            ));
        }
        let data = self.value(input).data().to_vec();
        let rg = self.requires(input);
        Ok(self.push(
            Tensor {
                shape: shape.to_vec(),
                data,
            },
            rg,
            Op::Reshape(input),
        ))
    }

    // ── Convolution ─────────────────────────────────────────────────────

    /// Depthwise 1-D convolution along the time axis with "same" zero
    /// padding: `input` is `[channels, time]`, `kernels` is `[channels, k]`
    /// (k odd), one independent kernel per channel.
    pub fn conv1d_depthwise(&mut self, input: TensorId, kernels: TensorId) -> Result<TensorId> {
        let (si, sk) = (self.value(input).shape(), self.value(kernels).shape());
        if si.len() != 2 || sk.len() != 2 || si[0] != sk[0] || sk[1] % 2 == 0 {
            return Err(Error::shape("conv1d_depthwise", si, sk));
        }
        let (channels, time, k) = (si[0], si[1], sk[1]);
        let pad = k / 2;
        let x = self.value(input).data();
        let w = self.value(kernels).data();
        let mut data = vec![0.0; channels * time];
        for c in 0..channels {
            for t in 0..time {
                let mut acc = 0.0;
                for j in 0..k {
                    let src = t as isize + j as isize - pad as isize;
                    if src >= 0 && (src as usize) < time {
                        acc += w[c * k + j] * x[c * time + src as usize];
                    }
                }
                data[c * time + t] = acc;
            }
        }
        self.flops += 2 * (channels * time * k) as u64;
        let rg = self.requires(input) || self.requires(kernels);
        Ok(self.push(
            Tensor {
                shape: vec![channels, time],
                data,
            },
            rg,
            Op::Conv1dDepthwise { input, kernels },
        ))
    }

    // ── Elementwise unary ops ───────────────────────────────────────────

    fn unary(
        &mut self,
        input: TensorId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> TensorId {
        let shape = self.value(input).shape().to_vec();
        let data: Vec<f64> = self.value(input).data().iter().map(|&x| f(x)).collect();
        self.flops += data.len() as u64;
        let rg = self.requires(input);
        self.push(Tensor { shape, data }, rg, op)
    }

    pub fn sigmoid(&mut self, input: TensorId) -> TensorId {
        self.unary(input, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(input))
    }

    pub fn tanh(&mut self, input: TensorId) -> TensorId {
        self.unary(input, f64::tanh, Op::Tanh(input))
    }

    pub fn relu(&mut self, input: TensorId) -> TensorId {
        self.unary(input, |x| x.max(0.0), Op::Relu(input))
    }

    pub fn abs(&mut self, input: TensorId) -> TensorId {
        self.unary(input, f64::abs, Op::Abs(input))
    }

    pub fn sqrt(&mut self, input: TensorId) -> TensorId {
        self.unary(input, f64::sqrt, Op::Sqrt(input))
    }

    pub fn log(&mut self, input: TensorId) -> TensorId {
        self.unary(input, f64::ln, Op::Log(input))
    }

    pub fn clamp(&mut self, input: TensorId, lo: f64, hi: f64) -> TensorId {
        self.unary(input, |x| x.clamp(lo, hi), Op::Clamp { input, lo, hi })
    }

    // ── Softmax and layer norm ──────────────────────────────────────────

    pub fn softmax(&mut self, input: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.value(input).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {} out of range for shape {:?}",
                axis, shape
            )));
        }
        let (outer, axis_len, inner) = axis_extents(&shape, axis);
        let src = self.value(input).data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * axis_len + a) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for a in 0..axis_len {
                    max = max.max(src[idx(a)]);
                }
                let mut denom = 0.0;
                for a in 0..axis_len {
                    let e = (src[idx(a)] - max).exp();
                    data[idx(a)] = e;
                    denom += e;
                }
                for a in 0..axis_len {
                    data[idx(a)] /= denom;
                }
            }
        }
        self.flops += 4 * src.len() as u64;
        let rg = self.requires(input);
        Ok(self.push(Tensor { shape, data }, rg, Op::Softmax { input, axis }))
    }

    /// Layer normalization over the last axis with affine transform.
    /// `gamma` and `beta` have the shape of the last axis.
    pub fn layer_norm(
        &mut self,
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let shape = self.value(input).shape().to_vec();
        let d = *shape.last().ok_or_else(|| {
            Error::InvalidArgument("layer_norm on zero-rank tensor".into())
        })?;
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::shape("layer_norm", &shape, self.value(gamma).shape()));
        }
        let src = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = src.len() / d;
        let mut data = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                data[r * d + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        self.flops += 8 * src.len() as u64;
        let rg = self.requires(input) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            Tensor { shape, data },
            rg,
            Op::LayerNorm { input, gamma, beta, eps },
        ))
    }

    // ── Fused recurrent cell ────────────────────────────────────────────

    /// One LSTM cell step, fused into a single tape node. Inputs are
    /// `x [B, d_in]`, `h`/`c` `[B, hidden]`, weights `w_ih [d_in, 4*hidden]`
    /// and `w_hh [hidden, 4*hidden]`, biases `[1, 4*hidden]`; gate order is
    /// (input, forget, cell, output). Returns `(h_new, c_new)`.
    #[allow(clippy::too_many_arguments)]
    pub fn lstm_cell(
        &mut self,
        x: TensorId,
        h: TensorId,
        c: TensorId,
        w_ih: TensorId,
        w_hh: TensorId,
        b_ih: TensorId,
        b_hh: TensorId,
    ) -> Result<(TensorId, TensorId)> {
        let (sx, sh) = (self.value(x).shape(), self.value(h).shape());
        if sx.len() != 2 || sh.len() != 2 || sx[0] != sh[0] {
            return Err(Error::shape("lstm_cell", sx, sh));
        }
        let (batch, d_in, hidden) = (sx[0], sx[1], sh[1]);
        for (name, id, want) in [
            ("w_ih", w_ih, vec![d_in, 4 * hidden]),
            ("w_hh", w_hh, vec![hidden, 4 * hidden]),
            ("b_ih", b_ih, vec![1, 4 * hidden]),
            ("b_hh", b_hh, vec![1, 4 * hidden]),
            ("c", c, vec![batch, hidden]),
        ] {
            if self.value(id).shape() != want.as_slice() {
                return Err(Error::shape(
                    &format!("lstm_cell ({name})"),
                    &want,
                    self.value(id).shape(),
                ));
            }
        }

        let xv = self.value(x).data();
        let hv = self.value(h).data();
        let cv = self.value(c).data();
        let wi = self.value(w_ih).data();
        let wh = self.value(w_hh).data();
        let bi = self.value(b_ih).data();
        let bh = self.value(b_hh).data();

        let g4 = 4 * hidden;
        let mut pre = vec![0.0; batch * g4];
        for b in 0..batch {
            let row = &mut pre[b * g4..(b + 1) * g4];
            for (dst, (p, q)) in row.iter_mut().zip(bi.iter().zip(bh)) {
                *dst = p + q;
            }
            for k in 0..d_in {
                let a = xv[b * d_in + k];
                if a != 0.0 {
                    for (dst, w) in row.iter_mut().zip(&wi[k * g4..(k + 1) * g4]) {
                        *dst += a * w;
                    }
                }
            }
            for k in 0..hidden {
                let a = hv[b * hidden + k];
                if a != 0.0 {
                    for (dst, w) in row.iter_mut().zip(&wh[k * g4..(k + 1) * g4]) {
                        *dst += a * w;
                    }
                }
            }
        }

        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut gates = vec![0.0; batch * g4];
        let mut out = vec![0.0; batch * 2 * hidden];
        for b in 0..batch {
            let p = &pre[b * g4..(b + 1) * g4];
            let g = &mut gates[b * g4..(b + 1) * g4];
            for j in 0..hidden {
                g[j] = sigmoid(p[j]);
                g[hidden + j] = sigmoid(p[hidden + j]);
                g[2 * hidden + j] = p[2 * hidden + j].tanh();
                g[3 * hidden + j] = sigmoid(p[3 * hidden + j]);
            }
            for j in 0..hidden {
                let c_new = g[hidden + j] * cv[b * hidden + j] + g[j] * g[2 * hidden + j];
                out[b * 2 * hidden + j] = g[3 * hidden + j] * c_new.tanh();
                out[b * 2 * hidden + hidden + j] = c_new;
            }
        }

        self.flops += (2 * batch * (d_in + hidden) * g4 + 12 * batch * hidden) as u64;
        let rg = [x, h, c, w_ih, w_hh, b_ih, b_hh]
            .iter()
            .any(|&id| self.requires(id));
        let cell = self.push(
            Tensor {
                shape: vec![batch, 2 * hidden],
                data: out,
            },
            rg,
            Op::LstmCell {
                x,
                h,
                c,
                w_ih,
                w_hh,
                b_ih,
                b_hh,
                gates,
            },
        );
        let h_new = self.slice(cell, 1, 0, hidden)?;
        let c_new = self.slice(cell, 1, hidden, hidden)?;
        Ok((h_new, c_new))
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum(&mut self, input: TensorId) -> TensorId {
        let s: f64 = self.value(input).data().iter().sum();
        self.flops += self.value(input).numel() as u64;
        let rg = self.requires(input);
        self.push(Tensor::scalar(s), rg, Op::Sum(input))
    }

    pub fn mean(&mut self, input: TensorId) -> TensorId {
        let n = self.value(input).numel() as f64;
        let s: f64 = self.value(input).data().iter().sum();
        self.flops += self.value(input).numel() as u64;
        let rg = self.requires(input);
        self.push(Tensor::scalar(s / n), rg, Op::Mean(input))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar `loss`. Gradients accumulate
    /// additively into every reachable `requires_grad` tensor; call
    /// [`Tape::zero_grad`] between independent passes.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        // Local adjoints keep repeated backward() calls independent; they
        // are folded into the persistent per-node grads at the end.
        let mut adjoint: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adjoint[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = adjoint[i].take() else { continue };
            self.propagate(i, &g, &mut adjoint);
            // Fold into the persistent accumulator.
            let grad = self.nodes[i]
                .grad
                .get_or_insert_with(|| vec![0.0; g.len()]);
            for (dst, src) in grad.iter_mut().zip(&g) {
                *dst += src;
            }
        }
        Ok(())
    }

    fn accumulate(adjoint: &mut [Option<Vec<f64>>], id: TensorId, numel: usize, add: impl FnOnce(&mut [f64])) {
        let buf = adjoint[id.0].get_or_insert_with(|| vec![0.0; numel]);
        add(buf);
    }

    fn propagate(&self, i: usize, g: &[f64], adjoint: &mut [Option<Vec<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}

            &Op::Add(a, b) => {
                for id in [a, b] {
                    if self.requires(id) {
                        Self::accumulate(adjoint, id, g.len(), |buf| {
                            for (d, s) in buf.iter_mut().zip(g) {
                                *d += s;
                            }
                        });
                    }
                }
            }

            &Op::Sub(a, b) => {
                if self.requires(a) {
                    Self::accumulate(adjoint, a, g.len(), |buf| {
                        for (d, s) in buf.iter_mut().zip(g) {
                            *d += s;
                        }
                    });
                }
                if self.requires(b) {
                    Self::accumulate(adjoint, b, g.len(), |buf| {
                        for (d, s) in buf.iter_mut().zip(g) {
                            *d -= s;
                        }
                    });
                }
            }

            &Op::Mul(a, b) => {
                if self.requires(a) {
                    let vb = self.value(b).data();
                    Self::accumulate(adjoint, a, g.len(), |buf| {
                        for ((d, s), y) in buf.iter_mut().zip(g).zip(vb) {
                            *d += s * y;
                        }
                    });
                }
                if self.requires(b) {
                    let va = self.value(a).data();
                    Self::accumulate(adjoint, b, g.len(), |buf| {
                        for ((d, s), x) in buf.iter_mut().zip(g).zip(va) {
                            *d += s * x;
                        }
                    });
                }
            }

            &Op::ScalarMul(a, c) => {
                if self.requires(a) {
                    Self::accumulate(adjoint, a, g.len(), |buf| {
                        for (d, s) in buf.iter_mut().zip(g) {
                            *d += s * c;
                        }
                    });
                }
            }

            &Op::MatMul(a, b) => {
                let sa = self.value(a).shape();
                let sb = self.value(b).shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires(a) {
                    // dA = dC @ B^T
                    let vb = self.value(b).data();
                    let mut bt = vec![0.0; n * k];
                    for p in 0..k {
                        for q in 0..n {
                            bt[q * k + p] = vb[p * n + q];
                        }
                    }
                    let da = matmul_raw(g, &bt, m, n, k);
                    Self::accumulate(adjoint, a, m * k, |buf| {
                        for (d, s) in buf.iter_mut().zip(&da) {
                            *d += s;
                        }
                    });
                }
                if self.requires(b) {
                    // dB = A^T @ dC
                    let va = self.value(a).data();
                    let mut at = vec![0.0; k * m];
                    for p in 0..m {
                        for q in 0..k {
                            at[q * m + p] = va[p * k + q];
                        }
                    }
                    let db = matmul_raw(&at, g, k, m, n);
                    Self::accumulate(adjoint, b, k * n, |buf| {
                        for (d, s) in buf.iter_mut().zip(&db) {
                            *d += s;
                        }
                    });
                }
            }

            &Op::Transpose(a) => {
                if self.requires(a) {
                    let out_shape = self.value(TensorId(i)).shape();
                    let (r, c) = (out_shape[0], out_shape[1]);
                    Self::accumulate(adjoint, a, r * c, |buf| {
                        for p in 0..r {
                            for q in 0..c {
                                buf[q * r + p] += g[p * c + q];
                            }
                        }
                    });
                }
            }

            Op::Concat { inputs, axis } => {
                let axis = *axis;
                let out_shape = self.value(TensorId(i)).shape().to_vec();
                let (outer, axis_total, inner) = axis_extents(&out_shape, axis);
                let mut offset = 0;
                for &id in inputs {
                    let s_axis = self.value(id).shape()[axis];
                    if self.requires(id) {
                        let numel = self.value(id).numel();
                        Self::accumulate(adjoint, id, numel, |buf| {
                            for o in 0..outer {
                                let src_start = (o * axis_total + offset) * inner;
                                let dst_start = o * s_axis * inner;
                                for j in 0..s_axis * inner {
                                    buf[dst_start + j] += g[src_start + j];
                                }
                            }
                        });
                    }
                    offset += s_axis;
                }
            }

            &Op::Slice { input, axis, start } => {
                if self.requires(input) {
                    let in_shape = self.value(input).shape().to_vec();
                    let (outer, axis_len, inner) = axis_extents(&in_shape, axis);
                    let out_axis = self.value(TensorId(i)).shape()[axis];
                    let numel = self.value(input).numel();
                    Self::accumulate(adjoint, input, numel, |buf| {
                        for o in 0..outer {
                            let dst_start = (o * axis_len + start) * inner;
                            let src_start = o * out_axis * inner;
                            for j in 0..out_axis * inner {
                                buf[dst_start + j] += g[src_start + j];
                            }
                        }
                    });
                }
            }

            &Op::BroadcastTo(input) => {
                if self.requires(input) {
                    let in_shape = self.value(input).shape().to_vec();
                    let out_shape = self.value(TensorId(i)).shape().to_vec();
                    let map = broadcast_index_map(&in_shape, &out_shape)
                        .expect("broadcast validated in forward");
                    let numel = self.value(input).numel();
                    Self::accumulate(adjoint, input, numel, |buf| {
                        for (out_idx, &in_idx) in map.iter().enumerate() {
                            buf[in_idx] += g[out_idx];
                        }
                    });
                }
            }

            &Op::Reshape(input) => {
                if self.requires(input) {
                    Self::accumulate(adjoint, input, g.len(), |buf| {
                        for (d, s) in buf.iter_mut().zip(g) {
                            *d += s;
                        }
                    });
                }
            }

            &Op::Conv1dDepthwise { input, kernels } => {
                let si = self.value(input).shape().to_vec();
                let sk = self.value(kernels).shape().to_vec();
                let (channels, time, k) = (si[0], si[1], sk[1]);
                let pad = k / 2;
                if self.requires(input) {
                    let w = self.value(kernels).data();
                    Self::accumulate(adjoint, input, channels * time, |buf| {
                        for c in 0..channels {
                            for t in 0..time {
                                for j in 0..k {
                                    let src = t as isize + j as isize - pad as isize;
                                    if src >= 0 && (src as usize) < time {
                                        buf[c * time + src as usize] +=
                                            g[c * time + t] * w[c * k + j];
                                    }
                                }
                            }
                        }
                    });
                }
                if self.requires(kernels) {
                    let x = self.value(input).data();
                    Self::accumulate(adjoint, kernels, channels * k, |buf| {
                        for c in 0..channels {
                            for t in 0..time {
                                for j in 0..k {
                                    let src = t as isize + j as isize - pad as isize;
                                    if src >= 0 && (src as usize) < time {
                                        buf[c * k + j] +=
                                            g[c * time + t] * x[c * time + src as usize];
                                    }
                                }
                            }
                        }
                    });
                }
            }

            &Op::Sigmoid(a) => {
                if self.requires(a) {
                    let out = self.value(TensorId(i)).data();
                    Self::accumulate(adjoint, a, g.len(), |buf| {
                        for ((d, s), y) in buf.iter_mut().zip(g).zip(out) {
                            *d += s * y * (1.0 - y);
                        }
                    });
                }
            }

            &Op::Tanh(a) => {
                if self.requires(a) {
                    let out = self.value(TensorId(i)).data();
                    Self::accumulate(adjoint, a, g.len(), |buf| {
                        for ((d, s), y) in buf.iter_mut().zip(g).zip(out) {
                            *d += s * (1.0 - y * y);
                        }
                    });
                }
            }

            &Op::Relu(a) => {
                if self.requires(a) {
                    let x = self.value(a).data();
                    Self::accumulate(adjoint, a, g.len(), |buf| {
                        for ((d, s), &v) in buf.iter_mut().zip(g).zip(x) {
                            if v > 0.0 {
                                *d += s;
                            }
                        }
                    });
                }
            }

            &Op::Abs(a) => {
                if self.requires(a) {
                    let x = self.value(a).data();
                    Self::accumulate(adjoint, a, g.len(), |buf| {
                        for ((d, s), &v) in buf.iter_mut().zip(g).zip(x) {
                            // Subgradient 0 at v == 0.
                            *d += s * if v > 0.0 {
                                1.0
                            } else if v < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                        }
                    });
                }
            }

            &Op::Sqrt(a) => {
                if self.requires(a) {
                    let out = self.value(TensorId(i)).data();
                    Self::accumulate(adjoint, a, g.len(), |buf| {
                        for ((d, s), y) in buf.iter_mut().zip(g).zip(out) {
                            *d += s / (2.0 * y);
                        }
                    });
                }
            }

            &Op::Log(a) => {
                if self.requires(a) {
                    let x = self.value(a).data();
                    Self::accumulate(adjoint, a, g.len(), |buf| {
                        for ((d, s), &v) in buf.iter_mut().zip(g).zip(x) {
                            *d += s / v;
                        }
                    });
                }
            }

            &Op::Clamp { input, lo, hi } => {
                if self.requires(input) {
                    let x = self.value(input).data();
                    Self::accumulate(adjoint, input, g.len(), |buf| {
                        for ((d, s), &v) in buf.iter_mut().zip(g).zip(x) {
                            if v > lo && v < hi {
                                *d += s;
                            }
                        }
                    });
                }
            }

            &Op::Softmax { input, axis } => {
                if self.requires(input) {
                    let out = self.value(TensorId(i)).data();
                    let shape = self.value(TensorId(i)).shape().to_vec();
                    let (outer, axis_len, inner) = axis_extents(&shape, axis);
                    Self::accumulate(adjoint, input, out.len(), |buf| {
                        for o in 0..outer {
                            for ii in 0..inner {
                                let idx = |a: usize| (o * axis_len + a) * inner + ii;
                                let mut dot = 0.0;
                                for a in 0..axis_len {
                                    dot += g[idx(a)] * out[idx(a)];
                                }
                                for a in 0..axis_len {
                                    buf[idx(a)] += out[idx(a)] * (g[idx(a)] - dot);
                                }
                            }
                        }
                    });
                }
            }

            &Op::LayerNorm { input, gamma, beta, eps } => {
                let x = self.value(input).data();
                let gm = self.value(gamma).data();
                let d = self.value(gamma).numel();
                let rows = x.len() / d;
                // Precompute per-row statistics once.
                let mut dx = vec![0.0; x.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let row = &x[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var =
                        row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                    let mut dxhat = vec![0.0; d];
                    for j in 0..d {
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                        dxhat[j] = grow[j] * gm[j];
                    }
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    let df = d as f64;
                    for j in 0..d {
                        dx[r * d + j] = inv_std / df
                            * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                if self.requires(input) {
                    Self::accumulate(adjoint, input, x.len(), |buf| {
                        for (dst, s) in buf.iter_mut().zip(&dx) {
                            *dst += s;
                        }
                    });
                }
                if self.requires(gamma) {
                    Self::accumulate(adjoint, gamma, d, |buf| {
                        for (dst, s) in buf.iter_mut().zip(&dgamma) {
                            *dst += s;
                        }
                    });
                }
                if self.requires(beta) {
                    Self::accumulate(adjoint, beta, d, |buf| {
                        for (dst, s) in buf.iter_mut().zip(&dbeta) {
                            *dst += s;
                        }
                    });
                }
            }

            &Op::Sum(a) => {
                if self.requires(a) {
                    let numel = self.value(a).numel();
                    let s = g[0];
                    Self::accumulate(adjoint, a, numel, |buf| {
                        for d in buf.iter_mut() {
                            *d += s;
                        }
                    });
                }
            }

            &Op::Mean(a) => {
                if self.requires(a) {
                    let numel = self.value(a).numel();
                    let s = g[0] / numel as f64;
                    Self::accumulate(adjoint, a, numel, |buf| {
                        for d in buf.iter_mut() {
                            *d += s;
                        }
                    });
                }
            }

            Op::LstmCell {
                x,
                h,
                c,
                w_ih,
                w_hh,
                b_ih,
                b_hh,
                gates,
            } => {
                let (x, h, c) = (*x, *h, *c);
                let (w_ih, w_hh, b_ih, b_hh) = (*w_ih, *w_hh, *b_ih, *b_hh);
                let batch = self.value(x).shape()[0];
                let d_in = self.value(x).shape()[1];
                let hidden = self.value(h).shape()[1];
                let g4 = 4 * hidden;
                let out = self.value(TensorId(i)).data();
                let xv = self.value(x).data();
                let hv = self.value(h).data();
                let cv = self.value(c).data();
                let wi = self.value(w_ih).data();
                let wh = self.value(w_hh).data();

                // Adjoint of the pre-activation gate block, then one matmul
                // family per input.
                let mut dpre = vec![0.0; batch * g4];
                let mut dc_prev = vec![0.0; batch * hidden];
                for b in 0..batch {
                    let gt = &gates[b * g4..(b + 1) * g4];
                    for j in 0..hidden {
                        let (i_g, f_g, g_g, o_g) =
                            (gt[j], gt[hidden + j], gt[2 * hidden + j], gt[3 * hidden + j]);
                        let c_new = out[b * 2 * hidden + hidden + j];
                        let t = c_new.tanh();
                        let gh = g[b * 2 * hidden + j];
                        let gc_out = g[b * 2 * hidden + hidden + j];
                        let d_o = gh * t;
                        let gc = gc_out + gh * o_g * (1.0 - t * t);
                        dc_prev[b * hidden + j] = gc * f_g;
                        let d_i = gc * g_g;
                        let d_f = gc * cv[b * hidden + j];
                        let d_g = gc * i_g;
                        let p = &mut dpre[b * g4..(b + 1) * g4];
                        p[j] = d_i * i_g * (1.0 - i_g);
                        p[hidden + j] = d_f * f_g * (1.0 - f_g);
                        p[2 * hidden + j] = d_g * (1.0 - g_g * g_g);
                        p[3 * hidden + j] = d_o * o_g * (1.0 - o_g);
                    }
                }

                if self.requires(c) {
                    Self::accumulate(adjoint, c, batch * hidden, |buf| {
                        for (d, s) in buf.iter_mut().zip(&dc_prev) {
                            *d += s;
                        }
                    });
                }
                if self.requires(x) {
                    Self::accumulate(adjoint, x, batch * d_in, |buf| {
                        for b in 0..batch {
                            let p = &dpre[b * g4..(b + 1) * g4];
                            for k in 0..d_in {
                                let row = &wi[k * g4..(k + 1) * g4];
                                let mut acc = 0.0;
                                for (pv, wv) in p.iter().zip(row) {
                                    acc += pv * wv;
                                }
                                buf[b * d_in + k] += acc;
                            }
                        }
                    });
                }
                if self.requires(h) {
                    Self::accumulate(adjoint, h, batch * hidden, |buf| {
                        for b in 0..batch {
                            let p = &dpre[b * g4..(b + 1) * g4];
                            for k in 0..hidden {
                                let row = &wh[k * g4..(k + 1) * g4];
                                let mut acc = 0.0;
                                for (pv, wv) in p.iter().zip(row) {
                                    acc += pv * wv;
                                }
                                buf[b * hidden + k] += acc;
                            }
                        }
                    });
                }
                if self.requires(w_ih) {
                    Self::accumulate(adjoint, w_ih, d_in * g4, |buf| {
                        for b in 0..batch {
                            let p = &dpre[b * g4..(b + 1) * g4];
                            for k in 0..d_in {
                                let a = xv[b * d_in + k];
                                if a != 0.0 {
                                    for (d, pv) in buf[k * g4..(k + 1) * g4].iter_mut().zip(p) {
                                        *d += a * pv;
                                    }
                                }
                            }
                        }
                    });
                }
                if self.requires(w_hh) {
                    Self::accumulate(adjoint, w_hh, hidden * g4, |buf| {
                        for b in 0..batch {
                            let p = &dpre[b * g4..(b + 1) * g4];
                            for k in 0..hidden {
                                let a = hv[b * hidden + k];
                                if a != 0.0 {
                                    for (d, pv) in buf[k * g4..(k + 1) * g4].iter_mut().zip(p) {
                                        *d += a * pv;
                                    }
                                }
                            }
                        }
                    });
                }
                for bias in [b_ih, b_hh] {
                    if self.requires(bias) {
                        Self::accumulate(adjoint, bias, g4, |buf| {
                            for b in 0..batch {
                                for (d, pv) in buf.iter_mut().zip(&dpre[b * g4..(b + 1) * g4]) {
                                    *d += pv;
                                }
                            }
                        });
                    }
                }
            }
        }
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// For each flat index of `out_shape`, the flat index of the `in_shape`
/// element it reads under numpy broadcasting. `None` if incompatible.
fn broadcast_index_map(in_shape: &[usize], out_shape: &[usize]) -> Option<Vec<usize>> {
    if in_shape.len() > out_shape.len() {
        return None;
    }
    let ndim = out_shape.len();
    let offset = ndim - in_shape.len();
    // Stride 0 marks broadcast dimensions.
    let mut in_strides = vec![0usize; ndim];
    {
        let mut stride = 1;
        for d in (0..in_shape.len()).rev() {
            let out_d = out_shape[offset + d];
            if in_shape[d] == out_d {
                in_strides[offset + d] = stride;
            } else if in_shape[d] == 1 {
                in_strides[offset + d] = 0;
            } else {
                return None;
            }
            stride *= in_shape[d];
        }
    }
    let numel: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut coords = vec![0usize; ndim];
    for _ in 0..numel {
        let mut idx = 0;
        for d in 0..ndim {
            idx += coords[d] * in_strides[d];
        }
        map.push(idx);
        for d in (0..ndim).rev() {
            coords[d] += 1;
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    Some(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let s = tape.softmax(x, 0).unwrap();
        for v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_positive() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, -2.0, 0.5, 10.0, 10.0, -30.0]));
        let s = tape.softmax(x, 1).unwrap();
        let v = tape.value(s).data();
        for r in 0..2 {
            let sum: f64 = v[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(v[r * 3..(r + 1) * 3].iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).item(), 0.5);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let k = tape.constant(t(&[1, 3], &[0.0, 1.0, 0.0]));
        let y = tape.conv1d_depthwise(x, k).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn conv_same_padding_edges() {
        // Averaging kernel: edges see one zero-padded neighbor.
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[3.0, 6.0, 9.0]));
        let k = tape.constant(t(&[1, 3], &[1.0, 1.0, 1.0]));
        let y = tape.conv1d_depthwise(x, k).unwrap();
        assert_eq!(tape.value(y).data(), &[9.0, 18.0, 15.0]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut tape = Tape::new();
        let p = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let sq = tape.mul(p, p).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(p).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_sigmoid_prime_at_zero() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(0.0), true);
        let x = tape.constant(Tensor::scalar(1.0));
        let wx = tape.mul(w, x).unwrap();
        let y = tape.sigmoid(wx);
        tape.backward(y).unwrap();
        assert!((tape.grad(w).unwrap()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_accumulates_without_zero_grad() {
        let mut tape = Tape::new();
        let p = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let sq = tape.mul(p, p).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(p).unwrap(), &[4.0, 8.0]);
        tape.zero_grad();
        assert!(tape.grad(p).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let p = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let err = tape.backward(p).unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss { .. }));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2]") && msg.contains("[3]"));
    }

    #[test]
    fn matmul_known_product() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.constant(t(&[3, 2], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn concat_slice_roundtrip() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[5.0, 6.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = tape.slice(c, 1, 0, 2).unwrap();
        assert_eq!(tape.value(back).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn broadcast_row_bias() {
        let mut tape = Tape::new();
        let b = tape.leaf(t(&[1, 2], &[10.0, 20.0]), true);
        let bb = tape.broadcast_to(b, &[3, 2]).unwrap();
        assert_eq!(
            tape.value(bb).data(),
            &[10.0, 20.0, 10.0, 20.0, 10.0, 20.0]
        );
        let loss = tape.sum(bb);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn determinism_bitwise() {
        let run = || {
            let mut tape = Tape::new();
            let a = tape.leaf(t(&[2, 2], &[0.3, -1.7, 2.9, 0.01]), true);
            let b = tape.constant(t(&[2, 2], &[1.3, 0.7, -0.9, 2.1]));
            let m = tape.matmul(a, b).unwrap();
            let s = tape.sigmoid(m);
            let l = tape.mean(s);
            tape.backward(l).unwrap();
            (
                tape.value(l).item().to_bits(),
                tape.grad(a).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }
}
