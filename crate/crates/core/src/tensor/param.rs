//! Named trainable parameters and their bridge onto a [`Tape`].
//!
//! Parameters live outside any tape; each training step binds them onto a
//! fresh tape as `requires_grad` leaves, runs forward/backward, then harvests
//! the gradients back. [`SavedTensor`] is the serialized form used by the
//! checkpoint files.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

/// A named trainable tensor. `requires_grad` is implicitly true.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Parameter {
            name: name.into(),
            value,
            grad: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Memoizing bridge from parameters to tape leaves.
///
/// Binding the same parameter twice within one tape returns the same leaf,
/// so a batch graph that reuses a weight accumulates one gradient for it.
#[derive(Default)]
pub struct Binder {
    ids: BTreeMap<String, TensorId>,
}

impl Binder {
    pub fn new() -> Self {
        Binder::default()
    }

    pub fn bind(&mut self, tape: &mut Tape, p: &Parameter) -> TensorId {
        if let Some(&id) = self.ids.get(&p.name) {
            return id;
        }
        let id = tape.leaf(p.value.clone(), true);
        self.ids.insert(p.name.clone(), id);
        id
    }

    /// Pre-bind a name to an existing tape leaf, so a later `bind` of the
    /// same name resolves to it. Used by gradient checks to differentiate
    /// a model w.r.t. externally supplied leaves.
    pub fn insert(&mut self, name: impl Into<String>, id: TensorId) {
        self.ids.insert(name.into(), id);
    }

    /// Copy gradients off the tape, adding into each parameter's
    /// accumulator. Parameters never bound on this tape are left untouched.
    pub fn harvest(&self, tape: &Tape, params: &mut [&mut Parameter]) -> Result<()> {
        for p in params.iter_mut() {
            let Some(&id) = self.ids.get(&p.name) else {
                continue;
            };
            let Some(g) = tape.grad(id) else {
                return Err(Error::MissingGrad {
                    name: p.name.clone(),
                });
            };
            match &mut p.grad {
                Some(acc) => {
                    let shape = acc.shape().to_vec();
                    let mut data = acc.data().to_vec();
                    for (d, s) in data.iter_mut().zip(g) {
                        *d += s;
                    }
                    p.grad = Some(Tensor::new(shape, data)?);
                }
                None => {
                    p.grad = Some(Tensor::new(p.value.shape().to_vec(), g.to_vec())?);
                }
            }
        }
        Ok(())
    }
}

/// Serialized tensor: shape header plus row-major values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl SavedTensor {
    pub fn from_tensor(t: &Tensor) -> Self {
        SavedTensor {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }

    pub fn into_tensor(self) -> Result<Tensor> {
        Tensor::new(self.shape, self.data)
    }
}

/// Snapshot a parameter list into a name-keyed map.
pub fn params_to_map(params: &[&Parameter]) -> BTreeMap<String, SavedTensor> {
    params
        .iter()
        .map(|p| (p.name.clone(), SavedTensor::from_tensor(&p.value)))
        .collect()
}

/// Restore parameter values from a map produced by [`params_to_map`].
/// Every parameter must be present with a matching shape.
pub fn load_params_from_map(
    map: &BTreeMap<String, SavedTensor>,
    params: &mut [&mut Parameter],
) -> Result<()> {
    for p in params.iter_mut() {
        let saved = map.get(&p.name).ok_or_else(|| {
            Error::Checkpoint(format!("missing parameter `{}`", p.name))
        })?;
        if saved.shape != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` has shape {:?} in the checkpoint, expected {:?}",
                p.name,
                saved.shape,
                p.value.shape()
            )));
        }
        p.value = Tensor::new(saved.shape.clone(), saved.data.clone())?;
    }
    if map.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model expects {}",
            map.len(),
            params.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binder_dedups_by_name() {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let p = Parameter::new("w", Tensor::scalar(2.0));
        let a = binder.bind(&mut tape, &p);
        let b = binder.bind(&mut tape, &p);
        assert_eq!(a, b);
    }

    #[test]
    fn harvest_accumulates_and_errors_on_missing_grad() {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let mut p = Parameter::new("w", Tensor::scalar(3.0));
        let id = binder.bind(&mut tape, &p);
        let sq = tape.mul(id, id).unwrap();
        tape.backward(sq).unwrap();
        binder.harvest(&tape, &mut [&mut p]).unwrap();
        assert_eq!(p.grad.as_ref().unwrap().data(), &[6.0]);
        binder.harvest(&tape, &mut [&mut p]).unwrap();
        assert_eq!(p.grad.as_ref().unwrap().data(), &[12.0]);

        let mut fresh = Tape::new();
        let mut binder2 = Binder::new();
        let mut q = Parameter::new("q", Tensor::scalar(1.0));
        binder2.bind(&mut fresh, &q);
        let err = binder2.harvest(&fresh, &mut [&mut q]).unwrap_err();
        assert!(err.to_string().contains("`q`"));
    }
}
