//! Finite-difference verification of tape gradients.

use crate::error::Result;
use crate::tensor::{Tape, Tensor, TensorId};

/// Step used for central differences.
pub const GRAD_CHECK_H: f64 = 1e-4;

/// Compare analytic gradients of a scalar-valued tensor function against
/// central finite differences at `point`.
///
/// `f` rebuilds the computation on the given tape from leaves that are
/// already recorded (one per entry of `point`, in order, `requires_grad`
/// true). Returns the maximum over all inputs of
/// `|analytic - numeric| / max(1e-8, |numeric|)`.
pub fn grad_check<F>(f: F, point: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = tensors.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &ids)?;
        Ok(tape.value(out).item())
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = point.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &ids)?;
    tape.backward(out)?;

    let mut max_rel = 0.0f64;
    for (arg, &id) in ids.iter().enumerate() {
        let analytic = tape
            .grad(id)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; point[arg].numel()]);
        for i in 0..point[arg].numel() {
            let mut plus = point.to_vec();
            let mut minus = point.to_vec();
            let mut pd = plus[arg].data().to_vec();
            let mut md = minus[arg].data().to_vec();
            pd[i] += GRAD_CHECK_H;
            md[i] -= GRAD_CHECK_H;
            plus[arg] = Tensor::new(plus[arg].shape().to_vec(), pd)?;
            minus[arg] = Tensor::new(minus[arg].shape().to_vec(), md)?;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * GRAD_CHECK_H);
            let rel = (analytic[i] - numeric).abs() / numeric.abs().max(1e-8);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let point = [Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.7]).unwrap()];
        let err = grad_check(|tape, ids| Ok(tape.sum(ids[0])), &point).unwrap();
        assert!(err < 1e-10, "err {err}");
    }

    #[test]
    fn composite_expression() {
        let point = [
            Tensor::new(vec![2, 2], vec![0.5, -0.3, 0.8, 0.1]).unwrap(),
            Tensor::new(vec![2, 2], vec![1.1, 0.4, -0.6, 0.9]).unwrap(),
        ];
        let err = grad_check(
            |tape, ids| {
                let m = tape.matmul(ids[0], ids[1])?;
                let s = tape.sigmoid(m);
                let t = tape.tanh(s);
                Ok(tape.mean(t))
            },
            &point,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }
}
