//! Randomized finite-difference checks for every tape primitive and the
//! composite losses. The acceptance suite runs the same checks over more
//! seeds; this is the fast development version.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rulcast_core::hs::bce_loss;
use rulcast_core::stman::rul_loss;
use rulcast_core::tensor::{grad_check, Tape, Tensor};

const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..numel).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Random values bounded away from zero, for ops with a kink there.
fn rand_tensor_off_origin(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let numel: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..numel)
            .map(|_| {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                sign * rng.random_range(0.05..1.5)
            })
            .collect(),
    )
    .unwrap()
}

#[test]
fn elementwise_and_reduction_ops() {
    for seed in 0..30u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = rng.random_range(1..4);
        let cols = rng.random_range(1..6);
        let shape = [rows, cols];

        let a = rand_tensor(&mut rng, &shape, -2.0, 2.0);
        let b = rand_tensor(&mut rng, &shape, -2.0, 2.0);
        let err = grad_check(
            |tape, ids| {
                let s = tape.add(ids[0], ids[1])?;
                let d = tape.sub(s, ids[1])?;
                let m = tape.mul(d, ids[1])?;
                let sc = tape.scalar_mul(m, -1.7);
                Ok(tape.mean(sc))
            },
            &[a, b],
        )
        .unwrap();
        assert!(err < TOL, "add/sub/mul seed {seed}: {err}");

        let x = rand_tensor(&mut rng, &shape, -2.0, 2.0);
        let err = grad_check(
            |tape, ids| {
                let s = tape.sigmoid(ids[0]);
                let t = tape.tanh(s);
                Ok(tape.sum(t))
            },
            &[x],
        )
        .unwrap();
        assert!(err < TOL, "sigmoid/tanh seed {seed}: {err}");

        let x = rand_tensor_off_origin(&mut rng, &shape);
        let err = grad_check(
            |tape, ids| {
                let r = tape.relu(ids[0]);
                let a = tape.abs(ids[0]);
                let s = tape.add(r, a)?;
                Ok(tape.sum(s))
            },
            &[x],
        )
        .unwrap();
        assert!(err < TOL, "relu/abs seed {seed}: {err}");

        let x = rand_tensor(&mut rng, &shape, 0.2, 2.0);
        let err = grad_check(
            |tape, ids| {
                let q = tape.sqrt(ids[0]);
                let l = tape.log(q);
                let c = tape.clamp(l, -10.0, 10.0);
                Ok(tape.mean(c))
            },
            &[x],
        )
        .unwrap();
        assert!(err < TOL, "sqrt/log/clamp seed {seed}: {err}");
    }
}

#[test]
fn linear_algebra_and_shape_ops() {
    for seed in 0..30u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (m, k, n) = (
            rng.random_range(1..4),
            rng.random_range(1..4),
            rng.random_range(1..4),
        );
        let a = rand_tensor(&mut rng, &[m, k], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[k, n], -1.0, 1.0);
        let err = grad_check(
            |tape, ids| {
                let c = tape.matmul(ids[0], ids[1])?;
                let t = tape.transpose(c)?;
                Ok(tape.sum(t))
            },
            &[a, b],
        )
        .unwrap();
        assert!(err < TOL, "matmul/transpose seed {seed}: {err}");

        let rows = rng.random_range(2..5);
        let cols = rng.random_range(2..5);
        let x = rand_tensor(&mut rng, &[rows, cols], -1.0, 1.0);
        let y = rand_tensor(&mut rng, &[rows, cols], -1.0, 1.0);
        let start = rng.random_range(0..cols - 1);
        let len = rng.random_range(1..cols - start);
        let err = grad_check(
            |tape, ids| {
                let cat = tape.concat(&[ids[0], ids[1]], 1)?;
                let sl = tape.slice(cat, 1, start, len)?;
                let rs = tape.reshape(sl, &[rows * len])?;
                // Weight elements unevenly so slice/reshape mistakes show.
                let w = tape.constant(Tensor::new(
                    vec![rows * len],
                    (0..rows * len).map(|i| 0.3 + i as f64).collect(),
                )?);
                let wx = tape.mul(rs, w)?;
                Ok(tape.sum(wx))
            },
            &[x, y],
        )
        .unwrap();
        assert!(err < TOL, "concat/slice/reshape seed {seed}: {err}");

        let bias = rand_tensor(&mut rng, &[1, cols], -1.0, 1.0);
        let err = grad_check(
            |tape, ids| {
                let bb = tape.broadcast_to(ids[0], &[rows, cols])?;
                let w = tape.constant(rand_tensor(
                    &mut ChaCha8Rng::seed_from_u64(seed),
                    &[rows, cols],
                    -1.0,
                    1.0,
                ));
                let p = tape.mul(bb, w)?;
                Ok(tape.sum(p))
            },
            &[bias],
        )
        .unwrap();
        assert!(err < TOL, "broadcast seed {seed}: {err}");
    }
}

#[test]
fn conv_softmax_layernorm_lstm() {
    for seed in 0..30u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        // Positive-cone inputs: every kernel/input gradient is a sum of
        // positive terms, so no component cancels to the truncation floor.
        let channels = rng.random_range(1..4);
        let time = rng.random_range(3..8);
        let k = *[1usize, 3, 5].get(rng.random_range(0..3)).unwrap();
        let x = rand_tensor(&mut rng, &[channels, time], 0.3, 1.3);
        let w = rand_tensor(&mut rng, &[channels, k], 0.2, 1.0);
        let err = grad_check(
            |tape, ids| {
                let y = tape.conv1d_depthwise(ids[0], ids[1])?;
                let s = tape.sigmoid(y);
                Ok(tape.sum(s))
            },
            &[x, w],
        )
        .unwrap();
        assert!(err < TOL, "conv seed {seed}: {err}");

        // Cross-entropy downstream keeps every softmax gradient component
        // bounded away from zero, where truncation noise would otherwise
        // dominate the relative error.
        let rows = rng.random_range(1..4);
        let cols = rng.random_range(2..6);
        let x = rand_tensor(&mut rng, &[rows, cols], -2.0, 2.0);
        let target = rng.random_range(0..cols);
        let err = grad_check(
            |tape, ids| {
                let s = tape.softmax(ids[0], 1)?;
                let picked = tape.slice(s, 1, target, 1)?;
                let l = tape.log(picked);
                let m = tape.mean(l);
                Ok(tape.scalar_mul(m, -1.0))
            },
            &[x],
        )
        .unwrap();
        assert!(err < TOL, "softmax seed {seed}: {err}");

        let d = rng.random_range(2..6);
        let x = rand_tensor(&mut rng, &[3, d], -1.5, 1.5);
        let gamma = rand_tensor(&mut rng, &[d], 0.5, 1.5);
        let beta = rand_tensor(&mut rng, &[d], -0.5, 0.5);
        let err = grad_check(
            |tape, ids| {
                let ln = tape.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
                let s = tape.sigmoid(ln);
                Ok(tape.mean(s))
            },
            &[x, gamma, beta],
        )
        .unwrap();
        assert!(err < TOL, "layer_norm seed {seed}: {err}");

        // Positive cone with mild weights: keeps the gates off both their
        // saturated and dead regions, where a gradient component would sink
        // under the finite-difference truncation floor.
        let d_in = rng.random_range(1..4);
        let hidden = rng.random_range(1..5);
        let point = [
            rand_tensor(&mut rng, &[1, d_in], 0.2, 1.0),
            rand_tensor(&mut rng, &[1, hidden], 0.2, 1.0),
            rand_tensor(&mut rng, &[1, hidden], 0.2, 1.0),
            rand_tensor(&mut rng, &[d_in, 4 * hidden], 0.05, 0.25),
            rand_tensor(&mut rng, &[hidden, 4 * hidden], 0.05, 0.25),
            rand_tensor(&mut rng, &[1, 4 * hidden], 0.05, 0.25),
            rand_tensor(&mut rng, &[1, 4 * hidden], 0.05, 0.25),
        ];
        let err = grad_check(
            |tape, ids| {
                let (h1, c1) =
                    tape.lstm_cell(ids[0], ids[1], ids[2], ids[3], ids[4], ids[5], ids[6])?;
                // Run a second chained step so state gradients flow.
                let (h2, _) = tape.lstm_cell(ids[0], h1, c1, ids[3], ids[4], ids[5], ids[6])?;
                Ok(tape.sum(h2))
            },
            &point,
        )
        .unwrap();
        assert!(err < TOL, "lstm_cell seed {seed}: {err}");
    }
}

#[test]
fn composite_losses() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let n = rng.random_range(1..6);
        let preds = rand_tensor(&mut rng, &[n, 1], 0.1, 0.9);
        let labels: Vec<f64> = (0..n).map(|_| f64::from(rng.random::<bool>())).collect();
        let err = grad_check(|tape, ids| bce_loss(tape, ids[0], &labels), &[preds]).unwrap();
        assert!(err < TOL, "bce seed {seed}: {err}");

        // Keep |pred - label| >= 0.05 so the RMSE term's curvature stays
        // bounded (its third derivative scales like 1/rmse^2).
        let labels: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..0.9)).collect();
        let pred_vals: Vec<f64> = labels
            .iter()
            .map(|y| {
                let offset = rng.random_range(0.05..0.09);
                if rng.random::<bool>() && y + offset < 0.99 {
                    y + offset
                } else {
                    y - offset
                }
            })
            .collect();
        let preds = Tensor::new(vec![n, 1], pred_vals).unwrap();
        let err = grad_check(|tape, ids| rul_loss(tape, ids[0], &labels), &[preds]).unwrap();
        assert!(err < TOL, "rul seed {seed}: {err}");
    }
}

/// Repeated softmax sanity over random inputs: strictly positive outputs
/// summing to one along the reduced axis.
#[test]
fn softmax_distribution_property() {
    let mut rng = ChaCha8Rng::seed_from_u64(4000);
    for _ in 0..200 {
        let rows = rng.random_range(1..5);
        let cols = rng.random_range(1..7);
        let x = rand_tensor(&mut rng, &[rows, cols], -30.0, 30.0);
        let mut tape = Tape::new();
        let id = tape.constant(x);
        let s = tape.softmax(id, 1).unwrap();
        let v = tape.value(s).data();
        for r in 0..rows {
            let sum: f64 = v[r * cols..(r + 1) * cols].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(v[r * cols..(r + 1) * cols].iter().all(|&p| p > 0.0));
        }
    }
}
